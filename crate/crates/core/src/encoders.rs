//! Point-cloud encoder (shared per-point MLP + max-pool, optional T-Nets) and
//! a compact convolutional image encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::RgbImage;
use crate::numgrad::{Layer, LayerSpec, ParameterStore, Real, Session, Tensor, Var};
use crate::pixel2point::PointCloud;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointEncoderConfig {
    /// 3 for `(x, y, z)`, 6 with colors appended.
    pub input_dims: usize,
    /// Shared per-point MLP widths; the last one is the global feature size.
    pub widths: Vec<usize>,
    /// Learned alignment of `(x, y, z)`; color columns bypass it.
    pub use_input_transform: bool,
    /// Learned alignment of the first-layer point features.
    pub use_feature_transform: bool,
    /// Weight of the feature-transform orthogonality penalty.
    pub reg_weight: f64,
    pub tnet_widths: Vec<usize>,
    pub tnet_fc: Vec<usize>,
}

impl Default for PointEncoderConfig {
    fn default() -> Self {
        Self {
            input_dims: 3,
            widths: vec![64, 128, 1024],
            use_input_transform: true,
            use_feature_transform: false,
            reg_weight: 0.001,
            tnet_widths: vec![64, 128, 1024],
            tnet_fc: vec![512, 256],
        }
    }
}

impl PointEncoderConfig {
    pub fn global_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dims != 3 && self.input_dims != 6 {
            return Err(Error::Config(format!("point encoder input dims must be 3 or 6, got {}", self.input_dims)));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("point encoder widths must be non-empty and positive".into()));
        }
        if self.reg_weight < 0.0 {
            return Err(Error::Config("orthogonality penalty weight must be >= 0".into()));
        }
        let tnet_on = self.use_input_transform || self.use_feature_transform;
        if tnet_on && (self.tnet_widths.is_empty() || self.tnet_widths.contains(&0) || self.tnet_fc.contains(&0)) {
            return Err(Error::Config("T-Net widths must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// `affine -> batchnorm -> relu`, the repeating unit of both encoders' MLPs.
#[derive(Clone, Debug)]
struct DenseBlock {
    fc: Layer,
    bn: Layer,
}

impl DenseBlock {
    fn new(name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            fc: Layer::new(format!("{name}.fc"), LayerSpec::affine(fan_in, fan_out))?,
            bn: Layer::new(format!("{name}.bn"), LayerSpec::batch_norm(fan_out))?,
        })
    }

    fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.fc.init(store, rng)?;
        self.bn.init(store, rng)
    }

    fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc.forward(s, &[x])?;
        let h = self.bn.forward(s, &[h])?;
        s.tape.relu(h)
    }
}

fn stack(prefix: &str, fan_in: usize, widths: &[usize]) -> Result<Vec<DenseBlock>> {
    let mut prev = fan_in;
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let b = DenseBlock::new(&format!("{prefix}{i}"), prev, w);
            prev = w;
            b
        })
        .collect()
}

/// Predicts a per-cloud `k×k` transform, initialized to the identity.
#[derive(Clone, Debug)]
struct TNet {
    k: usize,
    per_point: Vec<DenseBlock>,
    fc: Vec<DenseBlock>,
    out: Layer,
}

impl TNet {
    fn new(prefix: &str, k: usize, widths: &[usize], fc: &[usize]) -> Result<Self> {
        let per_point = stack(&format!("{prefix}.point"), k, widths)?;
        let pooled = *widths.last().expect("validated");
        let fc_blocks = stack(&format!("{prefix}.fc"), pooled, fc)?;
        let last = fc.last().copied().unwrap_or(pooled);
        let out = Layer::new(format!("{prefix}.out"), LayerSpec::affine(last, k * k))?;
        Ok(Self { k, per_point, fc: fc_blocks, out })
    }

    fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        for b in self.per_point.iter().chain(&self.fc) {
            b.init(store, rng)?;
        }
        self.out.init(store, rng)?;
        store.get_mut(&format!("{}.weight", self.out.name))?.data_mut().fill(T::zero());
        Ok(())
    }

    /// `x: [N, k]` → `[S, k*k]`, one row-major matrix per segment.
    fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, segs: &[usize]) -> Result<Var> {
        let mut h = x;
        for b in &self.per_point {
            h = b.forward(s, h)?;
        }
        h = s.tape.segment_max(h, segs)?;
        for b in &self.fc {
            h = b.forward(s, h)?;
        }
        let a = self.out.forward(s, &[h])?;
        let identity: Vec<T> = (0..self.k * self.k)
            .map(|i| if i % (self.k + 1) == 0 { T::one() } else { T::zero() })
            .collect();
        let id = s.tape.constant(vec![self.k * self.k], identity)?;
        s.tape.add_bias(a, id)
    }
}

/// A batch of clouds stacked row-wise, with per-cloud row counts.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudBatch<T> {
    pub points: Tensor<T>,
    pub segments: Vec<usize>,
}

impl<T: Real> CloudBatch<T> {
    pub fn from_clouds(clouds: &[&PointCloud]) -> Result<Self> {
        let dims = clouds.first().ok_or(Error::EmptySet("cloud batch"))?.dims();
        let mut data = Vec::new();
        let mut segments = Vec::with_capacity(clouds.len());
        for c in clouds {
            if c.dims() != dims {
                return Err(Error::dim("cloud batch", dims, c.dims()));
            }
            if c.is_empty() {
                return Err(Error::EmptySet("point cloud"));
            }
            data.extend(c.coords().iter().map(|&v| T::of(v as f64)));
            segments.push(c.len());
        }
        let n = data.len() / dims;
        Ok(Self { points: Tensor::new(vec![n, dims], data)?, segments })
    }

    pub fn dims(&self) -> usize {
        self.points.shape()[1]
    }
}

/// Outputs of [`PointEncoder::forward`].
pub struct PointFeatures {
    /// `[S, global_dim]`, one order-invariant row per cloud.
    pub global: Var,
    pub input_transform: Option<Var>,
    /// Feature transform and its size `k`, for the orthogonality penalty.
    pub feature_transform: Option<(Var, usize)>,
}

#[derive(Clone, Debug)]
pub struct PointEncoder {
    cfg: PointEncoderConfig,
    input_tnet: Option<TNet>,
    feature_tnet: Option<TNet>,
    trunk: Vec<DenseBlock>,
}

impl PointEncoder {
    pub fn new(prefix: &str, cfg: &PointEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let input_tnet = cfg
            .use_input_transform
            .then(|| TNet::new(&format!("{prefix}.tnet_in"), 3, &cfg.tnet_widths, &cfg.tnet_fc))
            .transpose()?;
        let feature_tnet = cfg
            .use_feature_transform
            .then(|| TNet::new(&format!("{prefix}.tnet_feat"), cfg.widths[0], &cfg.tnet_widths, &cfg.tnet_fc))
            .transpose()?;
        let trunk = stack(&format!("{prefix}.mlp"), cfg.input_dims, &cfg.widths)?;
        Ok(Self { cfg: cfg.clone(), input_tnet, feature_tnet, trunk })
    }

    pub fn config(&self) -> &PointEncoderConfig {
        &self.cfg
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        for b in &self.trunk {
            b.init(store, rng)?;
        }
        for t in self.input_tnet.iter().chain(&self.feature_tnet) {
            t.init(store, rng)?;
        }
        Ok(())
    }

    /// `points: [N, d]` split into clouds by `segments` → global features `[S, global_dim]`.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, points: Var, segments: &[usize]) -> Result<PointFeatures> {
        let d = s.tape.shape(points)[1];
        if d != self.cfg.input_dims {
            return Err(Error::dim("point encoder", self.cfg.input_dims, s.tape.shape(points)));
        }
        let mut x = points;
        let mut input_transform = None;
        if let Some(tnet) = &self.input_tnet {
            let xyz = if d == 3 { x } else { s.tape.slice_cols(x, 0, 3)? };
            let a = tnet.forward(s, xyz, segments)?;
            let moved = s.tape.segment_matmul(xyz, a, segments)?;
            x = if d == 3 {
                moved
            } else {
                let rest = s.tape.slice_cols(x, 3, d - 3)?;
                s.tape.concat(moved, rest)?
            };
            input_transform = Some(a);
        }
        let mut feature_transform = None;
        for (i, block) in self.trunk.iter().enumerate() {
            x = block.forward(s, x)?;
            if i == 0 {
                if let Some(tnet) = &self.feature_tnet {
                    let a = tnet.forward(s, x, segments)?;
                    x = s.tape.segment_matmul(x, a, segments)?;
                    feature_transform = Some((a, tnet.k));
                }
            }
        }
        let global = s.tape.segment_max(x, segments)?;
        Ok(PointFeatures { global, input_transform, feature_transform })
    }
}

/// `λ · ‖I − A·Aᵀ‖²_F` for a row-major `k×k` matrix.
pub fn tnet_regularizer(transform: &[f64], k: usize, weight: f64) -> Result<f64> {
    if transform.len() != k * k {
        return Err(Error::dim("tnet_regularizer", transform.len(), (k, k)));
    }
    let mut total = 0.0;
    for r in 0..k {
        for c in 0..k {
            let dot: f64 = (0..k).map(|j| transform[r * k + j] * transform[c * k + j]).sum();
            let e = if r == c { 1.0 - dot } else { -dot };
            total += e * e;
        }
    }
    Ok(weight * total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageEncoderConfig {
    /// Square input raster side.
    pub size: usize,
    /// Output channels of the stride-2 conv blocks.
    pub widths: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self { size: 224, widths: vec![32, 64, 128, 256], feature_dim: 2048 }
    }
}

impl ImageEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 2 || self.widths.is_empty() || self.widths.contains(&0) || self.feature_dim == 0 {
            return Err(Error::Config(format!("invalid image encoder config {self:?}")));
        }
        Ok(())
    }
}

/// `conv3x3/2 -> batchnorm -> relu` blocks, global average pool, affine projection.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    cfg: ImageEncoderConfig,
    blocks: Vec<(Layer, Layer)>,
    pool: Layer,
    proj: Layer,
}

impl ImageEncoder {
    pub fn new(prefix: &str, cfg: &ImageEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut prev = 3;
        let mut blocks = Vec::new();
        for (i, &w) in cfg.widths.iter().enumerate() {
            let conv = LayerSpec::Conv2d { in_channels: prev, out_channels: w, kernel: 3, stride: 2, padding: 1 };
            blocks.push((
                Layer::new(format!("{prefix}.conv{i}"), conv)?,
                Layer::new(format!("{prefix}.bn{i}"), LayerSpec::batch_norm(w))?,
            ));
            prev = w;
        }
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            pool: Layer::new(format!("{prefix}.pool"), LayerSpec::GlobalAvgPool)?,
            proj: Layer::new(format!("{prefix}.proj"), LayerSpec::affine(prev, cfg.feature_dim))?,
        })
    }

    pub fn config(&self) -> &ImageEncoderConfig {
        &self.cfg
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        for (conv, bn) in &self.blocks {
            conv.init(store, rng)?;
            bn.init(store, rng)?;
        }
        self.proj.init(store, rng)
    }

    /// `images: [B, 3, size, size]` with values in `[0, 1]` → `[B, feature_dim]`.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, images: Var) -> Result<Var> {
        match s.tape.shape(images) {
            &[_, 3, h, w] if h == self.cfg.size && w == self.cfg.size => {}
            other => return Err(Error::dim("image encoder", other, (3, self.cfg.size, self.cfg.size))),
        }
        let mut x = images;
        for (conv, bn) in &self.blocks {
            x = conv.forward(s, &[x])?;
            x = bn.forward(s, &[x])?;
            x = s.tape.relu(x)?;
        }
        let pooled = self.pool.forward(s, &[x])?;
        self.proj.forward(s, &[pooled])
    }
}

/// Stacks equally sized rasters into `[B, 3, H, W]` with values in `[0, 1]`.
pub fn image_batch<T: Real>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or(Error::EmptySet("image batch"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::dim("image batch", (w, h), (img.width(), img.height())));
        }
        data.extend(img.to_chw().into_iter().map(|v| T::of(v as f64)));
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}
