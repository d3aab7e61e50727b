use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParameterStore, Real, Tape, Tensor, Var};
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DROPOUT_RATE: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Batch statistics and random dropout masks.
    Train,
    /// Running statistics and identity dropout.
    Eval,
}

/// The layer catalog. Each kind has a forward rule and an exact adjoint on the tape.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Affine { fan_in: usize, fan_out: usize },
    Relu,
    Sigmoid,
    Softmax,
    BatchNorm { features: usize, eps: f64, momentum: f64 },
    Dropout { rate: f64 },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    GlobalAvgPool,
    SetMaxPool,
    Concat,
}

impl LayerSpec {
    pub fn affine(fan_in: usize, fan_out: usize) -> Self {
        LayerSpec::Affine { fan_in, fan_out }
    }

    pub fn batch_norm(features: usize) -> Self {
        LayerSpec::BatchNorm { features, eps: BN_EPS, momentum: BN_MOMENTUM }
    }

    pub fn dropout(rate: f64) -> Self {
        LayerSpec::Dropout { rate }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(msg));
        match *self {
            LayerSpec::Affine { fan_in, fan_out } if fan_in == 0 || fan_out == 0 => {
                bad(format!("affine layer needs positive widths, got {fan_in}->{fan_out}"))
            }
            LayerSpec::BatchNorm { eps, .. } if !(eps > 0.0) => bad(format!("batchnorm epsilon must be > 0, got {eps}")),
            LayerSpec::BatchNorm { momentum, .. } if !(0.0..=1.0).contains(&momentum) => {
                bad(format!("batchnorm momentum must lie in [0, 1], got {momentum}"))
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                bad(format!("dropout rate must lie in [0, 1), got {rate}"))
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, .. }
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 =>
            {
                bad("conv2d needs positive channels, kernel and stride".into())
            }
            _ => Ok(()),
        }
    }
}

/// A named instance of a [`LayerSpec`]; parameters live under `"{name}.*"`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

impl Layer {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { name: name.into(), spec })
    }

    fn key(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.name)
    }

    /// Registers this layer's parameters: weights from a uniform fan-in rule
    /// with bound `sqrt(6 / fan_in)`, zero biases, unit batch-norm scale.
    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        let uniform = |shape: Vec<usize>, fan_in: usize, rng: &mut dyn rand::RngCore| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
            Tensor::new(shape, data).map(Tensor::with_grad)
        };
        match self.spec {
            LayerSpec::Affine { fan_in, fan_out } => {
                store.insert(self.key("weight"), uniform(vec![fan_in, fan_out], fan_in, rng)?)?;
                store.insert(self.key("bias"), Tensor::zeros(&[fan_out]).with_grad())?;
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                let fan_in = in_channels * kernel * kernel;
                let shape = vec![out_channels, in_channels, kernel, kernel];
                store.insert(self.key("weight"), uniform(shape, fan_in, rng)?)?;
                store.insert(self.key("bias"), Tensor::zeros(&[out_channels]).with_grad())?;
            }
            LayerSpec::BatchNorm { features, .. } => {
                store.insert(self.key("gamma"), Tensor::filled(&[features], T::one()).with_grad())?;
                store.insert(self.key("beta"), Tensor::zeros(&[features]).with_grad())?;
                store.insert(self.key("running_mean"), Tensor::zeros(&[features]))?;
                store.insert(self.key("running_var"), Tensor::filled(&[features], T::one()))?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Applies the layer. `Concat` takes two inputs, every other kind one.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, inputs: &[Var]) -> Result<Var> {
        let arity = if self.spec == LayerSpec::Concat { 2 } else { 1 };
        if inputs.len() != arity {
            return Err(Error::Contract(format!("{} expects {arity} inputs, got {}", self.name, inputs.len())));
        }
        let x = inputs[0];
        match self.spec {
            LayerSpec::Affine { fan_in, .. } => {
                if s.tape.shape(x).last() != Some(&fan_in) {
                    return Err(Error::dim("affine", s.tape.shape(x), fan_in));
                }
                let w = s.param(&self.key("weight"))?;
                let b = s.param(&self.key("bias"))?;
                s.tape.affine(x, w, b)
            }
            LayerSpec::Relu => s.tape.relu(x),
            LayerSpec::Sigmoid => s.tape.sigmoid(x),
            LayerSpec::Softmax => s.tape.softmax(x),
            LayerSpec::BatchNorm { eps, momentum, .. } => {
                let gamma = s.param(&self.key("gamma"))?;
                let beta = s.param(&self.key("beta"))?;
                let (mean_key, var_key) = (self.key("running_mean"), self.key("running_var"));
                match s.mode {
                    Mode::Train => {
                        let (y, mean, var) = s.tape.batch_norm_train(x, gamma, beta, T::of(eps))?;
                        let n = s.tape.shape(x).iter().product::<usize>() / mean.len();
                        let unbias = if n > 1 { T::of(n as f64 / (n as f64 - 1.0)) } else { T::one() };
                        let mom = T::of(momentum);
                        let keep = T::one() - mom;
                        let rm = s.store.get_mut(&mean_key)?.data_mut();
                        rm.iter_mut().zip(&mean).for_each(|(r, &m)| *r = keep * *r + mom * m);
                        let rv = s.store.get_mut(&var_key)?.data_mut();
                        rv.iter_mut().zip(&var).for_each(|(r, &v)| *r = keep * *r + mom * v * unbias);
                        Ok(y)
                    }
                    Mode::Eval => {
                        let mean = s.store.get(&mean_key)?.data().to_vec();
                        let var = s.store.get(&var_key)?.data().to_vec();
                        s.tape.batch_norm_eval(x, gamma, beta, &mean, &var, T::of(eps))
                    }
                }
            }
            LayerSpec::Dropout { rate } => {
                if s.mode == Mode::Eval || rate == 0.0 {
                    return Ok(x);
                }
                let keep = 1.0 - rate;
                let scale = T::of(1.0 / keep);
                let n = s.tape.value(x).len();
                let mask = (0..n).map(|_| if s.rng.random_bool(keep) { scale } else { T::zero() }).collect();
                s.tape.dropout(x, mask)
            }
            LayerSpec::Conv2d { stride, padding, .. } => {
                let w = s.param(&self.key("weight"))?;
                let b = s.param(&self.key("bias"))?;
                s.tape.conv2d(x, w, b, stride, padding)
            }
            LayerSpec::GlobalAvgPool => s.tape.global_avg_pool(x),
            LayerSpec::SetMaxPool => {
                let segs = match &s.segments {
                    Some(segs) => segs.clone(),
                    None => vec![s.tape.shape(x)[0]],
                };
                s.tape.segment_max(x, &segs)
            }
            LayerSpec::Concat => s.tape.concat(x, inputs[1]),
        }
    }
}

/// One forward/backward pass: a fresh tape bound to a parameter store.
pub struct Session<'a, T: Real> {
    pub tape: Tape<T>,
    store: &'a mut ParameterStore<T>,
    bound: BTreeMap<String, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    segments: Option<Vec<usize>>,
}

impl<'a, T: Real> Session<'a, T> {
    /// `seed` drives dropout masks for this pass.
    pub fn new(store: &'a mut ParameterStore<T>, mode: Mode, seed: u64) -> Self {
        Self::with_tape(store, mode, seed, Tape::new())
    }

    pub fn with_tape(store: &'a mut ParameterStore<T>, mode: Mode, seed: u64, tape: Tape<T>) -> Self {
        Self {
            tape,
            store,
            bound: BTreeMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            segments: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParameterStore<T> {
        self.store
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Row segments (one per point cloud) consumed by `SetMaxPool` layers.
    pub fn set_segments(&mut self, segs: Option<Vec<usize>>) {
        self.segments = segs;
    }

    /// Places a stored tensor on the tape; repeated calls return the same handle.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?;
        let v = self.tape.leaf(t, t.requires_grad());
        self.bound.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.tape.leaf(t, false)
    }

    /// Runs the adjoint pass and accumulates gradients into the store.
    pub fn backward(self, root: Var) -> Result<()> {
        let Session { tape, store, bound, .. } = self;
        let mut grads = tape.backward(root)?;
        for (name, v) in bound {
            let t = store.get_mut(&name)?;
            if !t.requires_grad() {
                continue;
            }
            if let Some(g) = grads.take(v) {
                t.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(LayerSpec::dropout(1.0).validate().is_err());
        assert!(LayerSpec::dropout(-0.1).validate().is_err());
        assert!(LayerSpec::dropout(0.0).validate().is_ok());
        assert!(LayerSpec::BatchNorm { features: 2, eps: 0.0, momentum: 0.1 }.validate().is_err());
        assert!(LayerSpec::affine(0, 3).validate().is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut store = ParameterStore::<f32>::new();
        let layer = Layer::new("d", LayerSpec::dropout(0.3)).unwrap();
        let mut s = Session::new(&mut store, Mode::Eval, 1);
        let x = s.input(&Tensor::new(vec![1, 3], vec![1.0, -2.0, 3.0]).unwrap());
        let y = layer.forward(&mut s, &[x]).unwrap();
        assert_eq!(s.tape.value(y), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn dropout_in_train_zeroes_or_rescales() {
        let mut store = ParameterStore::<f64>::new();
        let layer = Layer::new("d", LayerSpec::dropout(0.5)).unwrap();
        let mut s = Session::new(&mut store, Mode::Train, 1);
        let x = s.input(&Tensor::filled(&[1, 64], 1.0));
        let y = layer.forward(&mut s, &[x]).unwrap();
        assert!(s.tape.value(y).iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(s.tape.value(y).contains(&0.0));
    }

    #[test]
    fn batch_norm_updates_running_stats_in_train_only() {
        let mut store = ParameterStore::<f64>::new();
        let layer = Layer::new("bn", LayerSpec::batch_norm(1)).unwrap();
        layer.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        {
            let mut s = Session::new(&mut store, Mode::Train, 0);
            let xv = s.input(&x);
            let y = layer.forward(&mut s, &[xv]).unwrap();
            let out = s.tape.value(y);
            assert!((out[0] + 1.0).abs() < 1e-5 && (out[1] - 1.0).abs() < 1e-5);
        }
        let rm = store.get("bn.running_mean").unwrap().data()[0];
        let rv = store.get("bn.running_var").unwrap().data()[0];
        assert!((rm - 0.2).abs() < 1e-12);
        // unbiased batch variance is 2
        assert!((rv - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
        {
            let mut s = Session::new(&mut store, Mode::Eval, 0);
            let xv = s.input(&x);
            layer.forward(&mut s, &[xv]).unwrap();
        }
        assert_eq!(store.get("bn.running_mean").unwrap().data()[0], rm);
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let layer = Layer::new("fc", LayerSpec::affine(4, 3)).unwrap();
        let mut a = ParameterStore::<f32>::new();
        let mut b = ParameterStore::<f32>::new();
        layer.init(&mut a, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        layer.init(&mut b, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.get("fc.bias").unwrap().data().iter().all(|&v| v == 0.0));
        let bound = (6.0f32 / 4.0).sqrt();
        assert!(a.get("fc.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn affine_rejects_wrong_width() {
        let mut store = ParameterStore::<f32>::new();
        let layer = Layer::new("fc", LayerSpec::affine(4, 3)).unwrap();
        layer.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut s = Session::new(&mut store, Mode::Eval, 0);
        let x = s.input(&Tensor::zeros(&[2, 5]));
        assert!(matches!(layer.forward(&mut s, &[x]), Err(Error::Dimension { .. })));
    }
}
