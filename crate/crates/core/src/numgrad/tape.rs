//! Reverse-mode autodiff over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the adjoint. [`Tape::backward`] walks the nodes in reverse.

use super::{Real, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// `[outer, channels, inner]` view used by per-channel normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelGeom {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl ChannelGeom {
    /// Channel axis is 1 for both `[N, F]` and `[B, C, H, W]` layouts.
    pub fn of_shape(shape: &[usize]) -> Result<Self> {
        match *shape {
            [n, f] => Ok(Self { outer: n, channels: f, inner: 1 }),
            [b, c, h, w] => Ok(Self { outer: b, channels: c, inner: h * w }),
            _ => Err(Error::dim("batchnorm", shape, "[N, F] or [B, C, H, W]")),
        }
    }

    fn count(&self) -> usize {
        self.outer * self.inner
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Source pixel index for patch row `r` at output position `p`, if inside the raster.
    #[inline]
    fn source(&self, r: usize, p: usize) -> Option<usize> {
        let kk = self.kernel * self.kernel;
        let (c, rem) = (r / kk, r % kk);
        let (ki, kj) = (rem / self.kernel, rem % self.kernel);
        let (oy, ox) = (p / self.out_width, p % self.out_width);
        let y = (oy * self.stride + ki) as isize - self.padding as isize;
        let x = (ox * self.stride + kj) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((c * self.height + y as usize) * self.width + x as usize)
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, n: usize, k: usize, m: usize },
    Affine { x: Var, w: Var, bias: Var, n: usize, k: usize, m: usize },
    AddBias { x: Var, bias: Var },
    Add(Var, Var),
    Scale(Var, T),
    MulCol { x: Var, s: Var },
    RowDot { a: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, geom: ChannelGeom, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, geom: ChannelGeom, mean: Vec<T>, inv_std: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    GlobalAvgPool { x: Var, inner: usize },
    SegmentMax { x: Var, argmax: Vec<usize> },
    Concat { a: Var, b: Var, wa: usize, wb: usize },
    SliceCols { x: Var, width: usize, start: usize, len: usize },
    SegmentMatMul { x: Var, a: Var, segs: Vec<usize>, k: usize },
    OrthPenalty { a: Var, k: usize, resid: Vec<T> },
    Bce { p: Var, labels: Vec<T>, clamped: Vec<T> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    Reshape(Var),
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation recorder. Values are computed eagerly as ops are appended.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    kinks: Option<u64>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn mix(h: &mut u64, v: u64) {
    *h = (*h ^ v).wrapping_mul(FNV_PRIME);
}

/// BCE clamp bound on probabilities.
pub const PROB_CLAMP: f64 = 1e-7;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), kinks: None }
    }

    /// Records a fingerprint of every non-smooth branch taken (ReLU signs,
    /// max-pool winners, loss clamps) so finite differences can detect
    /// perturbations that cross a kink.
    pub fn with_kink_tracking() -> Self {
        Self { nodes: Vec::new(), kinks: Some(0xcbf2_9ce4_8422_2325) }
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape values are validated on push")
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("output of {op_name}")));
        }
        self.nodes.push(Node { shape, data, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(op, s, "rank 2")),
        }
    }

    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t, false))
    }

    /// `[n, k] · [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2("matmul", a)?;
        let (k2, m) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(n, k, m, self.value(a), false, self.value(b), false, &mut out, false);
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", vec![n, m], out, Op::MatMul { a, b, n, k, m }, ng)
    }

    /// `x · w + bias` for `x: [n, k]`, `w: [k, m]`, `bias: [m]`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (n, k) = self.dims2("affine", x)?;
        let (k2, m) = self.dims2("affine", w)?;
        if k != k2 || self.value(bias).len() != m {
            return Err(Error::dim("affine", self.shape(x), (self.shape(w), self.shape(bias))));
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias));
        }
        T::gemm(n, k, m, self.value(x), false, self.value(w), false, &mut out, true);
        let ng = self.needs(x) || self.needs(w) || self.needs(bias);
        self.push("affine", vec![n, m], out, Op::Affine { x, w, bias, n, k, m }, ng)
    }

    /// Adds a length-`m` vector to every row of an `[n, m]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, m) = self.dims2("add_bias", x)?;
        if self.value(bias).len() != m {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(m) {
            add_into(row, b);
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push("add_bias", self.shape(x).to_vec(), out, Op::AddBias { x, bias }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let ng = self.needs(x);
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale(x, s), ng)
    }

    /// Multiplies each row of `x: [r, c]` by the matching entry of `s: [r, 1]`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims2("mul_col", x)?;
        if self.shape(s) != [r, 1] {
            return Err(Error::dim("mul_col", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s);
        let out = self.value(x).chunks(c).zip(sv).flat_map(|(row, &w)| row.iter().map(move |&v| v * w)).collect();
        let ng = self.needs(x) || self.needs(s);
        self.push("mul_col", vec![r, c], out, Op::MulCol { x, s }, ng)
    }

    /// Row-wise inner products of `a, b: [r, c]`, shaped `[r, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims2("row_dot", a)?;
        if self.shape(b) != [r, c] {
            return Err(Error::dim("row_dot", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .chunks(c)
            .zip(self.value(b).chunks(c))
            .map(|(x, y)| x.iter().zip(y).map(|(&u, &v)| u * v).sum::<T>())
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push("row_dot", vec![r, 1], out, Op::RowDot { a, b }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        if let Some(h) = &mut self.kinks {
            for chunk in out.chunks(64) {
                let bits = chunk.iter().enumerate().fold(0u64, |acc, (i, &v)| acc | (((v > T::zero()) as u64) << i));
                mix(h, bits);
            }
        }
        let ng = self.needs(x);
        self.push("relu", self.shape(x).to_vec(), out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let ng = self.needs(x);
        self.push("sigmoid", self.shape(x).to_vec(), out, Op::Sigmoid(x), ng)
    }

    /// Softmax along the last axis of a rank-2 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.dims2("softmax", x)?;
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(c) {
            out.extend(softmax_row(row));
        }
        let ng = self.needs(x);
        self.push("softmax", self.shape(x).to_vec(), out, Op::Softmax(x), ng)
    }

    /// Batch normalization with batch statistics. Returns the output plus the
    /// per-channel batch mean and biased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let geom = ChannelGeom::of_shape(self.shape(x))?;
        let c = geom.channels;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim("batchnorm", self.shape(x), self.shape(gamma)));
        }
        let xs = self.value(x);
        let n = T::of(geom.count() as f64);
        let mut mean = channel_sums(&geom, |i, _| xs[i]);
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = channel_sums(&geom, |i, ch| (xs[i] - mean[ch]) * (xs[i] - mean[ch]));
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for_each_channel(&geom, |i, ch| {
            let h = (xs[i] - mean[ch]) * inv_std[ch];
            xhat[i] = h;
            out[i] = g[ch] * h + b[ch];
        });
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = self.shape(x).to_vec();
        let v = self.push("batchnorm", shape, out, Op::BatchNorm { x, gamma, beta, geom, xhat, inv_std }, ng)?;
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let geom = ChannelGeom::of_shape(self.shape(x))?;
        let c = geom.channels;
        if self.value(gamma).len() != c || mean.len() != c || var.len() != c {
            return Err(Error::dim("batchnorm", self.shape(x), mean.len()));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xs, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![T::zero(); xs.len()];
        for_each_channel(&geom, |i, ch| out[i] = g[ch] * ((xs[i] - mean[ch]) * inv_std[ch]) + b[ch]);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = self.shape(x).to_vec();
        let op = Op::BatchNormEval { x, gamma, beta, geom, mean: mean.to_vec(), inv_std };
        self.push("batchnorm", shape, out, op, ng)
    }

    /// Elementwise product with a fixed mask (already scaled by `1 / (1 - rate)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::dim("dropout", self.shape(x), mask.len()));
        }
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let ng = self.needs(x);
        self.push("dropout", self.shape(x).to_vec(), out, Op::Dropout { x, mask }, ng)
    }

    /// 2-D convolution, `x: [B, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (batch, in_channels, height, width) = match *self.shape(x) {
            [b, c, h, w] => (b, c, h, w),
            ref s => return Err(Error::dim("conv2d", s, "[B, C, H, W]")),
        };
        let (out_channels, kernel) = match *self.shape(w) {
            [o, c, k, k2] if c == in_channels && k == k2 => (o, k),
            ref s => return Err(Error::dim("conv2d", self.shape(x), s)),
        };
        if self.value(b).len() != out_channels {
            return Err(Error::dim("conv2d", self.shape(w), self.shape(b)));
        }
        if stride == 0 || height + 2 * padding < kernel || width + 2 * padding < kernel {
            return Err(Error::dim("conv2d", self.shape(x), self.shape(w)));
        }
        let geom = ConvGeom {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel,
            stride,
            padding,
            out_height: (height + 2 * padding - kernel) / stride + 1,
            out_width: (width + 2 * padding - kernel) / stride + 1,
        };
        let (patch, pos) = (geom.patch(), geom.positions());
        let img = in_channels * height * width;
        let xs = self.value(x);
        let mut cols = vec![T::zero(); batch * patch * pos];
        for bi in 0..batch {
            let src = &xs[bi * img..(bi + 1) * img];
            let dst = &mut cols[bi * patch * pos..(bi + 1) * patch * pos];
            for r in 0..patch {
                for p in 0..pos {
                    if let Some(s) = geom.source(r, p) {
                        dst[r * pos + p] = src[s];
                    }
                }
            }
        }
        let (wv, bv) = (self.value(w), self.value(b));
        let mut out = vec![T::zero(); batch * out_channels * pos];
        for bi in 0..batch {
            let o = &mut out[bi * out_channels * pos..(bi + 1) * out_channels * pos];
            for (oc, row) in o.chunks_mut(pos).enumerate() {
                row.fill(bv[oc]);
            }
            T::gemm(out_channels, patch, pos, wv, false, &cols[bi * patch * pos..(bi + 1) * patch * pos], false, o, true);
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        let shape = vec![batch, out_channels, geom.out_height, geom.out_width];
        self.push("conv2d", shape, out, Op::Conv2d { x, w, b, geom, cols }, ng)
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, inner) = match *self.shape(x) {
            [b, c, h, w] => (b, c, h * w),
            ref s => return Err(Error::dim("global_avg_pool", s, "[B, C, H, W]")),
        };
        let n = T::of(inner as f64);
        let out = self.value(x).chunks(inner).map(|ch| ch.iter().copied().sum::<T>() / n).collect();
        let ng = self.needs(x);
        self.push("global_avg_pool", vec![b, c], out, Op::GlobalAvgPool { x, inner }, ng)
    }

    /// Column-wise max over consecutive row segments of `x: [N, F]`; output `[segs.len(), F]`.
    ///
    /// Ties route the gradient to the lowest row index.
    pub fn segment_max(&mut self, x: Var, segs: &[usize]) -> Result<Var> {
        let (n, f) = self.dims2("set_max_pool", x)?;
        if segs.iter().sum::<usize>() != n {
            return Err(Error::dim("set_max_pool", self.shape(x), segs));
        }
        if segs.is_empty() || segs.contains(&0) {
            return Err(Error::EmptySet("set_max_pool"));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(segs.len() * f);
        let mut argmax = Vec::with_capacity(segs.len() * f);
        let mut start = 0;
        for &len in segs {
            let mut best: Vec<T> = xs[start * f..(start + 1) * f].to_vec();
            let mut arg = vec![start; f];
            for r in start + 1..start + len {
                let row = &xs[r * f..(r + 1) * f];
                for j in 0..f {
                    if row[j] > best[j] {
                        best[j] = row[j];
                        arg[j] = r;
                    }
                }
            }
            out.extend(best);
            argmax.extend(arg);
            start += len;
        }
        if let Some(h) = &mut self.kinks {
            argmax.iter().for_each(|&a| mix(h, a as u64));
        }
        let ng = self.needs(x);
        self.push("set_max_pool", vec![segs.len(), f], out, Op::SegmentMax { x, argmax }, ng)
    }

    /// Concatenates `[B, p]` and `[B, q]` along the feature axis, `a` first.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, wa) = self.dims2("concat", a)?;
        let (rb, wb) = self.dims2("concat", b)?;
        if ra != rb {
            return Err(Error::dim("concat", self.shape(a), self.shape(b)));
        }
        let mut out = Vec::with_capacity(ra * (wa + wb));
        for (x, y) in self.value(a).chunks(wa).zip(self.value(b).chunks(wb)) {
            out.extend_from_slice(x);
            out.extend_from_slice(y);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push("concat", vec![ra, wa + wb], out, Op::Concat { a, b, wa, wb }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, width) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > width {
            return Err(Error::dim("slice_cols", self.shape(x), start..start + len));
        }
        let out = self.value(x).chunks(width).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let ng = self.needs(x);
        self.push("slice_cols", vec![r, len], out, Op::SliceCols { x, width, start, len }, ng)
    }

    /// Right-multiplies each row segment of `x: [N, k]` by its own `k×k` matrix from `a: [S, k*k]`.
    pub fn segment_matmul(&mut self, x: Var, a: Var, segs: &[usize]) -> Result<Var> {
        let (n, k) = self.dims2("segment_matmul", x)?;
        if self.shape(a) != [segs.len(), k * k] || segs.iter().sum::<usize>() != n {
            return Err(Error::dim("segment_matmul", self.shape(x), self.shape(a)));
        }
        let (xs, av) = (self.value(x), self.value(a));
        let mut out = vec![T::zero(); n * k];
        let mut start = 0;
        for (s, &len) in segs.iter().enumerate() {
            T::gemm(
                len,
                k,
                k,
                &xs[start * k..(start + len) * k],
                false,
                &av[s * k * k..(s + 1) * k * k],
                false,
                &mut out[start * k..(start + len) * k],
                false,
            );
            start += len;
        }
        let ng = self.needs(x) || self.needs(a);
        self.push("segment_matmul", vec![n, k], out, Op::SegmentMatMul { x, a, segs: segs.to_vec(), k }, ng)
    }

    /// Mean over the batch of `‖I − A·Aᵀ‖²_F` for `a: [S, k*k]`.
    pub fn orth_penalty(&mut self, a: Var, k: usize) -> Result<Var> {
        let (s, kk) = self.dims2("orth_penalty", a)?;
        if kk != k * k {
            return Err(Error::dim("orth_penalty", self.shape(a), k));
        }
        let av = self.value(a);
        let mut resid = vec![T::zero(); s * kk];
        let mut total = T::zero();
        for i in 0..s {
            let m = &av[i * kk..(i + 1) * kk];
            let e = &mut resid[i * kk..(i + 1) * kk];
            T::gemm(k, k, k, m, false, m, true, e, false);
            for r in 0..k {
                for c in 0..k {
                    let id = if r == c { T::one() } else { T::zero() };
                    e[r * k + c] = id - e[r * k + c];
                }
            }
            total += e.iter().map(|&v| v * v).sum::<T>();
        }
        let out = vec![total / T::of(s as f64)];
        let ng = self.needs(a);
        self.push("orth_penalty", vec![1], out, Op::OrthPenalty { a, k, resid }, ng)
    }

    /// Mean binary cross-entropy on probabilities, clamped to `[1e-7, 1 - 1e-7]`.
    ///
    /// The clamp is straight-through for the gradient.
    pub fn bce(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        let n = self.value(p).len();
        if labels.len() != n || self.shape(p)[0] != n {
            return Err(Error::dim("bce", self.shape(p), labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Label(format!("{l} is not a binary label")));
        }
        let lo = T::of(PROB_CLAMP);
        let hi = T::one() - lo;
        let clamped: Vec<T> = self.value(p).iter().map(|&v| v.max(lo).min(hi)).collect();
        if let Some(h) = &mut self.kinks {
            for (&raw, &c) in self.nodes[p.0].data.iter().zip(&clamped) {
                mix(h, (raw != c) as u64);
            }
        }
        let ys: Vec<T> = labels.iter().map(|&l| T::of(l as f64)).collect();
        let total: T = clamped
            .iter()
            .zip(&ys)
            .map(|(&q, &y)| -(y * q.ln() + (T::one() - y) * (T::one() - q).ln()))
            .sum();
        let out = vec![total / T::of(n as f64)];
        let ng = self.needs(p);
        self.push("bce", vec![1], out, Op::Bce { p, labels: ys, clamped }, ng)
    }

    /// Mean softmax cross-entropy on raw logits `[B, C]`.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2("softmax_ce", logits)?;
        if labels.len() != b {
            return Err(Error::dim("softmax_ce", self.shape(logits), labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label(format!("{l} outside 0..{c}")));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut total = T::zero();
        for (row, &l) in self.value(logits).chunks(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[l];
            probs.extend(softmax_row(row));
        }
        let out = vec![total / T::of(b as f64)];
        let ng = self.needs(logits);
        self.push("softmax_ce", vec![1], out, Op::SoftmaxCe { logits, labels: labels.to_vec(), probs }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = vec![self.value(x).iter().copied().sum()];
        let ng = self.needs(x);
        self.push("sum", vec![1], out, Op::Sum(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        let ng = self.needs(x);
        self.push("reshape", shape, out, Op::Reshape(x), ng)
    }

    /// Back-propagates from a scalar root. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.adjoint(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let needs = self.nodes.iter().map(|n| n.needs_grad).collect::<Vec<_>>();
        Ok(Gradients {
            grads: grads.into_iter().zip(needs).map(|(g, n)| if n { g } else { None }).collect(),
        })
    }

    fn adjoint(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| -> &[T] { &self.nodes[v.0].data };
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::Affine { x, w, bias, n, k, m } => {
                if needs(x) {
                    let dx = slot(grads, x, n * k);
                    T::gemm(n, m, k, g, false, val(w), true, dx, true);
                }
                if needs(w) {
                    let dw = slot(grads, w, k * m);
                    T::gemm(k, n, m, val(x), true, g, false, dw, true);
                }
                if needs(bias) {
                    let db = slot(grads, bias, m);
                    for row in g.chunks_exact(m) {
                        add_into(db, row);
                    }
                }
            }
            &Op::MatMul { a, b, n, k, m } => {
                if needs(a) {
                    let da = slot(grads, a, n * k);
                    T::gemm(n, m, k, g, false, val(b), true, da, true);
                }
                if needs(b) {
                    let db = slot(grads, b, k * m);
                    T::gemm(k, n, m, val(a), true, g, false, db, true);
                }
            }
            &Op::AddBias { x, bias } => {
                let m = val(bias).len();
                if needs(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
                if needs(bias) {
                    let db = slot(grads, bias, m);
                    for row in g.chunks(m) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            &Op::Scale(x, s) => {
                if needs(x) {
                    let dx = slot(grads, x, g.len());
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * s);
                }
            }
            &Op::RowDot { a, b } => {
                let c = val(a).len() / g.len();
                for (this, other) in [(a, b), (b, a)] {
                    if needs(this) {
                        let ov = val(other);
                        let d = slot(grads, this, ov.len());
                        for (r, (drow, orow)) in d.chunks_mut(c).zip(ov.chunks(c)).enumerate() {
                            drow.iter_mut().zip(orow).for_each(|(dv, &o)| *dv += g[r] * o);
                        }
                    }
                }
            }
            &Op::MulCol { x, s } => {
                let c = g.len() / val(s).len();
                if needs(x) {
                    let sv = val(s);
                    let dx = slot(grads, x, g.len());
                    for (r, (drow, grow)) in dx.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        drow.iter_mut().zip(grow).for_each(|(d, &gv)| *d += gv * sv[r]);
                    }
                }
                if needs(s) {
                    let xv = val(x);
                    let ds = slot(grads, s, val(s).len());
                    for (r, (xrow, grow)) in xv.chunks(c).zip(g.chunks(c)).enumerate() {
                        ds[r] += xrow.iter().zip(grow).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
            &Op::Relu(x) => {
                let y = &node.data;
                let dx = slot(grads, x, g.len());
                for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                    if yv > T::zero() {
                        *d += gv;
                    }
                }
            }
            &Op::Sigmoid(x) => {
                let y = &node.data;
                let dx = slot(grads, x, g.len());
                for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                    *d += gv * yv * (T::one() - yv);
                }
            }
            &Op::Softmax(x) => {
                let c = node.shape[1];
                let dx = slot(grads, x, g.len());
                for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(node.data.chunks(c)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, geom, xhat, inv_std } => {
                let c = geom.channels;
                let sum_g = channel_sums(geom, |i, _| g[i]);
                let sum_gx = channel_sums(geom, |i, _| g[i] * xhat[i]);
                if needs(*gamma) {
                    add_into(slot(grads, *gamma, c), &sum_gx);
                }
                if needs(*beta) {
                    add_into(slot(grads, *beta, c), &sum_g);
                }
                if needs(*x) {
                    let gam = val(*gamma).to_vec();
                    let n = T::of(geom.count() as f64);
                    let k: Vec<T> = gam.iter().zip(inv_std).map(|(&gm, &is)| gm * is / n).collect();
                    let dx = slot(grads, *x, g.len());
                    for_each_channel(geom, |i, ch| dx[i] += k[ch] * (n * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]));
                }
            }
            Op::BatchNormEval { x, gamma, beta, geom, mean, inv_std } => {
                let c = geom.channels;
                let xv = val(*x);
                let gam = val(*gamma).to_vec();
                let sum_g = channel_sums(geom, |i, _| g[i]);
                let sum_gx = channel_sums(geom, |i, ch| g[i] * (xv[i] - mean[ch]) * inv_std[ch]);
                if needs(*gamma) {
                    add_into(slot(grads, *gamma, c), &sum_gx);
                }
                if needs(*beta) {
                    add_into(slot(grads, *beta, c), &sum_g);
                }
                if needs(*x) {
                    let dx = slot(grads, *x, g.len());
                    for_each_channel(geom, |i, ch| dx[i] += g[i] * gam[ch] * inv_std[ch]);
                }
            }
            Op::Dropout { x, mask } => {
                let dx = slot(grads, *x, g.len());
                for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (patch, pos, oc) = (geom.patch(), geom.positions(), geom.out_channels);
                if needs(*b) {
                    let db = slot(grads, *b, oc);
                    for gb in g.chunks(oc * pos) {
                        for (o, row) in gb.chunks(pos).enumerate() {
                            db[o] += row.iter().copied().sum::<T>();
                        }
                    }
                }
                if needs(*w) {
                    let dw = slot(grads, *w, oc * patch);
                    for bi in 0..geom.batch {
                        let gb = &g[bi * oc * pos..(bi + 1) * oc * pos];
                        let cb = &cols[bi * patch * pos..(bi + 1) * patch * pos];
                        T::gemm(oc, pos, patch, gb, false, cb, true, dw, true);
                    }
                }
                if needs(*x) {
                    let wv = val(*w).to_vec();
                    let img = geom.in_channels * geom.height * geom.width;
                    let mut dcols = vec![T::zero(); patch * pos];
                    let dx = slot(grads, *x, geom.batch * img);
                    for bi in 0..geom.batch {
                        let gb = &g[bi * oc * pos..(bi + 1) * oc * pos];
                        T::gemm(patch, oc, pos, &wv, true, gb, false, &mut dcols, false);
                        let dxb = &mut dx[bi * img..(bi + 1) * img];
                        for r in 0..patch {
                            for p in 0..pos {
                                if let Some(s) = geom.source(r, p) {
                                    dxb[s] += dcols[r * pos + p];
                                }
                            }
                        }
                    }
                }
            }
            &Op::GlobalAvgPool { x, inner } => {
                let n = T::of(inner as f64);
                let dx = slot(grads, x, g.len() * inner);
                for (chunk, &gv) in dx.chunks_mut(inner).zip(g) {
                    chunk.iter_mut().for_each(|d| *d += gv / n);
                }
            }
            Op::SegmentMax { x, argmax } => {
                let f = node.shape[1];
                let len = val(*x).len();
                let dx = slot(grads, *x, len);
                for (idx, (&r, &gv)) in argmax.iter().zip(g).enumerate() {
                    dx[r * f + idx % f] += gv;
                }
            }
            &Op::Concat { a, b, wa, wb } => {
                let rows = node.shape[0];
                if needs(a) {
                    let da = slot(grads, a, rows * wa);
                    for (drow, grow) in da.chunks_mut(wa).zip(g.chunks(wa + wb)) {
                        add_into(drow, &grow[..wa]);
                    }
                }
                if needs(b) {
                    let db = slot(grads, b, rows * wb);
                    for (drow, grow) in db.chunks_mut(wb).zip(g.chunks(wa + wb)) {
                        add_into(drow, &grow[wa..]);
                    }
                }
            }
            &Op::SliceCols { x, width, start, len } => {
                let dx = slot(grads, x, node.shape[0] * width);
                for (drow, grow) in dx.chunks_mut(width).zip(g.chunks(len)) {
                    add_into(&mut drow[start..start + len], grow);
                }
            }
            Op::SegmentMatMul { x, a, segs, k } => {
                let k = *k;
                let (xv, av) = (val(*x), val(*a));
                if needs(*x) {
                    let dx = slot(grads, *x, xv.len());
                    let mut start = 0;
                    for (s, &len) in segs.iter().enumerate() {
                        T::gemm(
                            len,
                            k,
                            k,
                            &g[start * k..(start + len) * k],
                            false,
                            &av[s * k * k..(s + 1) * k * k],
                            true,
                            &mut dx[start * k..(start + len) * k],
                            true,
                        );
                        start += len;
                    }
                }
                if needs(*a) {
                    let da = slot(grads, *a, av.len());
                    let mut start = 0;
                    for (s, &len) in segs.iter().enumerate() {
                        T::gemm(
                            k,
                            len,
                            k,
                            &xv[start * k..(start + len) * k],
                            true,
                            &g[start * k..(start + len) * k],
                            false,
                            &mut da[s * k * k..(s + 1) * k * k],
                            true,
                        );
                        start += len;
                    }
                }
            }
            Op::OrthPenalty { a, k, resid } => {
                let k = *k;
                let av = val(*a);
                let s = av.len() / (k * k);
                let scale = -T::of(4.0) * g[0] / T::of(s as f64);
                let mut tmp = vec![T::zero(); k * k];
                let da = slot(grads, *a, av.len());
                for i in 0..s {
                    let range = i * k * k..(i + 1) * k * k;
                    T::gemm(k, k, k, &resid[range.clone()], false, &av[range.clone()], false, &mut tmp, false);
                    da[range].iter_mut().zip(&tmp).for_each(|(d, &t)| *d += scale * t);
                }
            }
            Op::Bce { p, labels, clamped } => {
                let n = T::of(labels.len() as f64);
                let dp = slot(grads, *p, labels.len());
                for ((d, &y), &q) in dp.iter_mut().zip(labels).zip(clamped) {
                    *d += g[0] * (-y / q + (T::one() - y) / (T::one() - q)) / n;
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let c = probs.len() / labels.len();
                let n = T::of(labels.len() as f64);
                let dl = slot(grads, *logits, probs.len());
                for (r, &l) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == l { T::one() } else { T::zero() };
                        dl[r * c + j] += g[0] * (probs[r * c + j] - onehot) / n;
                    }
                }
            }
            &Op::Sum(x) => {
                let len = val(x).len();
                slot(grads, x, len).iter_mut().for_each(|d| *d += g[0]);
            }
            &Op::Reshape(x) => {
                add_into(slot(grads, x, g.len()), g);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// Visits every element index with its channel, in memory order.
#[inline]
fn for_each_channel(geom: &ChannelGeom, mut f: impl FnMut(usize, usize)) {
    let (c, inner) = (geom.channels, geom.inner);
    let mut i = 0;
    for _ in 0..geom.outer {
        for ch in 0..c {
            for _ in 0..inner {
                f(i, ch);
                i += 1;
            }
        }
    }
}

/// Per-channel sums of `f(element, channel)`.
#[inline]
fn channel_sums<T: Real>(geom: &ChannelGeom, mut f: impl FnMut(usize, usize) -> T) -> Vec<T> {
    let mut acc = vec![T::zero(); geom.channels];
    let mut i = 0;
    for _ in 0..geom.outer {
        for (ch, a) in acc.iter_mut().enumerate() {
            let mut s = T::zero();
            for _ in 0..geom.inner {
                s += f(i, ch);
                i += 1;
            }
            *a += s;
        }
    }
    acc
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softmax_row<T: Real>(row: &[T]) -> impl Iterator<Item = T> + '_ {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = row.iter().map(|&v| (v - max).exp()).sum();
    row.iter().map(move |&v| (v - max).exp() / z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape<f64>, shape: &[usize], data: &[f64]) -> Var {
        let x = Tensor::new(shape.to_vec(), data.to_vec()).unwrap();
        t.leaf(&x, true)
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let w = leaf(&mut t, &[1, 1], &[3.0]);
        let y = t.matmul(w, w).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &[6.0]);
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[1, 1], &[2.0]);
        let b = leaf(&mut t, &[1, 1], &[5.0]);
        let y = t.matmul(a, b).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(a).unwrap(), &[5.0]);
        assert_eq!(g.get(b).unwrap(), &[2.0]);
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r), &[0.0, 0.0, 2.0]);
        let z = t.constant(vec![1], vec![0.0]).unwrap();
        let s = t.sigmoid(z).unwrap();
        assert_eq!(t.value(s), &[0.5]);
    }

    #[test]
    fn set_max_pool_columnwise() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[2, 2], &[1.0, 5.0, 3.0, 2.0]);
        let m = t.segment_max(x, &[2]).unwrap();
        assert_eq!(t.value(m), &[3.0, 5.0]);
        let s = t.sum(m).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn set_max_pool_ties_route_to_lowest_row() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[3, 1], &[4.0, 4.0, 4.0]);
        let m = t.segment_max(x, &[3]).unwrap();
        let s = t.sum(m).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn set_max_pool_empty_is_error() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[1, 2], &[1.0, 2.0]);
        assert!(matches!(t.segment_max(x, &[1, 0]), Err(Error::EmptySet(_))));
    }

    #[test]
    fn losses_match_closed_forms() {
        let mut t = Tape::<f64>::new();
        let p = t.constant(vec![1, 1], vec![0.5]).unwrap();
        let l = t.bce(p, &[1]).unwrap();
        assert!((t.value(l)[0] - 2f64.ln()).abs() < 1e-12);

        let logits = t.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let l = t.softmax_ce(logits, &[0]).unwrap();
        assert!((t.value(l)[0] - 2f64.ln()).abs() < 1e-12);

        let p = t.constant(vec![1, 1], vec![1.0 - 1e-7]).unwrap();
        let l = t.bce(p, &[1]).unwrap();
        assert!((t.value(l)[0] - 1e-7).abs() < 1e-12);

        let p = t.constant(vec![1, 1], vec![1.0]).unwrap();
        let l = t.bce(p, &[1]).unwrap();
        assert!(t.value(l)[0] <= 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        let mut t = Tape::<f64>::new();
        let logits = t.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(t.softmax_ce(logits, &[2]), Err(Error::Label(_))));
        let p = t.constant(vec![1, 1], vec![0.5]).unwrap();
        assert!(matches!(t.bce(p, &[3]), Err(Error::Label(_))));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = leaf(&mut t, &[2, 3], &[0.0; 6]);
        let b = leaf(&mut t, &[2, 3], &[0.0; 6]);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn orth_penalty_of_scaled_identity() {
        let mut t = Tape::<f64>::new();
        let a = leaf(&mut t, &[1, 9], &[2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0]);
        let p = t.orth_penalty(a, 3).unwrap();
        assert_eq!(t.value(p), &[27.0]);
    }

    #[test]
    fn non_finite_output_is_error() {
        let mut t = Tape::<f64>::new();
        let a = leaf(&mut t, &[1], &[f64::MAX]);
        assert!(matches!(t.scale(a, 10.0), Err(Error::NonFinite(_))));
    }
}
