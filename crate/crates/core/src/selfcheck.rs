//! Built-in verification suites: finite-difference gradient checks over every
//! layer kind, both encoders and all fusion variants at tiny widths, and the
//! FPS comparison against the brute-force greedy oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{ImageEncoder, ImageEncoderConfig, PointEncoder, PointEncoderConfig};
use crate::fusion::{Batch, Model, ModelConfig, ModelVariant};
use crate::encoders::CloudBatch;
use crate::numgrad::{
    check_gradients, GradCheckOptions, GradCheckReport, Layer, LayerSpec, Mode, ParameterStore, Session, Tensor, Var,
};
use crate::pixel2point::{fps, fps_reference, start_index, FpsStart};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub block: String,
    pub report: GradCheckReport,
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("finite")
        .with_grad()
}

/// Reduces any output to a scalar through fixed pseudo-random weights, so
/// every output coordinate contributes a distinct amount.
pub fn scalarize(s: &mut Session<'_, f64>, y: Var) -> Result<Var> {
    let shape = s.tape.shape(y).to_vec();
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product::<usize>().max(1);
    let flat = s.tape.reshape(y, vec![rows, cols])?;
    let weights: Vec<f64> = (0..rows * cols).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let w = s.tape.constant(vec![rows, cols], weights)?;
    let d = s.tape.row_dot(flat, w)?;
    s.tape.sum(d)
}

fn run(
    block: &str,
    store: &mut ParameterStore<f64>,
    opts: GradCheckOptions,
    f: impl FnMut(&mut Session<'_, f64>) -> Result<Var>,
) -> Result<BlockReport> {
    let report = check_gradients(store, opts, f)?;
    log::info!("{block}: max rel error {:.3e} ({} checked, {} skipped)", report.max_rel_error, report.checked, report.skipped);
    Ok(BlockReport { block: block.to_owned(), report })
}

fn layer_block(
    name: &str,
    spec: LayerSpec,
    input_shapes: &[&[usize]],
    mode: Mode,
    opts: GradCheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<BlockReport> {
    let layer = Layer::new(name, spec)?;
    let mut store = ParameterStore::new();
    layer.init(&mut store, rng)?;
    for (i, shape) in input_shapes.iter().enumerate() {
        store.insert(format!("input{i}"), random_tensor(shape, rng))?;
    }
    // Random affine offsets move biases and shifts off their zero initialization.
    let names: Vec<String> = store.trainable().map(str::to_owned).collect();
    for n in names.iter().filter(|n| n.ends_with(".bias") || n.ends_with(".beta")) {
        for v in store.get_mut(n)?.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let n_inputs = input_shapes.len();
    run(name, &mut store, GradCheckOptions { mode, ..opts }, |s| {
        let inputs = (0..n_inputs).map(|i| s.param(&format!("input{i}"))).collect::<Result<Vec<_>>>()?;
        let y = layer.forward(s, &inputs)?;
        scalarize(s, y)
    })
}

/// Configuration of every fusion variant at gradient-check scale.
pub fn tiny_model_config(variant: ModelVariant, cloud_dims: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        variant,
        classes,
        point: PointEncoderConfig {
            input_dims: cloud_dims,
            widths: vec![4, 8, 16],
            use_input_transform: true,
            use_feature_transform: true,
            reg_weight: 0.001,
            tnet_widths: vec![4, 8],
            tnet_fc: vec![6],
        },
        image: ImageEncoderConfig { size: 8, widths: vec![2, 3], feature_dim: 6 },
        ccm: ImageEncoderConfig { size: 8, widths: vec![2], feature_dim: 4 },
        projected_dim: 3,
        head_widths: vec![5, 4],
        dropout: 0.3,
        attention_dim: 4,
    }
}

/// A random batch matching `cfg`: `batch` samples with `points` points each.
pub fn random_batch(cfg: &ModelConfig, batch: usize, points: usize, rng: &mut impl Rng) -> Result<Batch<f64>> {
    let v = cfg.variant;
    let raster = |size: usize, rng: &mut dyn rand::RngCore| {
        let n = batch * 3 * size * size;
        Tensor::new(vec![batch, 3, size, size], (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
    };
    let d = cfg.point.input_dims;
    Ok(Batch {
        images: if v.uses_image() { Some(raster(cfg.image.size, rng)?) } else { None },
        ccm: if v.uses_ccm() { Some(raster(cfg.ccm.size, rng)?) } else { None },
        clouds: if v.uses_cloud() {
            let data = (0..batch * points * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            Some(CloudBatch { points: Tensor::new(vec![batch * points, d], data)?, segments: vec![points; batch] })
        } else {
            None
        },
    })
}

fn randomize_biases(store: &mut ParameterStore<f64>, rng: &mut impl Rng) {
    for (name, t) in store.iter_mut() {
        if t.requires_grad() && (name.ends_with(".bias") || name.ends_with(".beta")) {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
}

/// The full suite. Each block reports the worst relative error over its probed coordinates.
pub fn gradient_suite(opts: GradCheckOptions) -> Result<Vec<BlockReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    let train = Mode::Train;
    out.push(layer_block("sigmoid", LayerSpec::Sigmoid, &[&[4, 5]], train, opts, &mut rng)?);
    out.push(layer_block("affine", LayerSpec::affine(5, 4), &[&[3, 5]], train, opts, &mut rng)?);
    out.push(layer_block("relu", LayerSpec::Relu, &[&[4, 5]], train, opts, &mut rng)?);
    out.push(layer_block("softmax", LayerSpec::Softmax, &[&[3, 4]], train, opts, &mut rng)?);
    out.push(layer_block("batchnorm_train", LayerSpec::batch_norm(4), &[&[6, 4]], train, opts, &mut rng)?);
    out.push(layer_block("batchnorm_spatial", LayerSpec::batch_norm(2), &[&[2, 2, 3, 3]], train, opts, &mut rng)?);
    out.push(layer_block("batchnorm_eval", LayerSpec::batch_norm(4), &[&[6, 4]], Mode::Eval, opts, &mut rng)?);
    out.push(layer_block("dropout", LayerSpec::dropout(0.3), &[&[4, 6]], train, opts, &mut rng)?);
    let conv = LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 2, padding: 1 };
    out.push(layer_block("conv2d", conv, &[&[2, 2, 5, 5]], train, opts, &mut rng)?);
    out.push(layer_block("global_avg_pool", LayerSpec::GlobalAvgPool, &[&[2, 3, 3, 3]], train, opts, &mut rng)?);
    out.push(layer_block("set_max_pool", LayerSpec::SetMaxPool, &[&[7, 4]], train, opts, &mut rng)?);
    out.push(layer_block("concat", LayerSpec::Concat, &[&[3, 2], &[3, 4]], train, opts, &mut rng)?);

    {
        let mut store = ParameterStore::new();
        store.insert("x", random_tensor(&[7, 3], &mut rng))?;
        store.insert("a", random_tensor(&[2, 9], &mut rng))?;
        out.push(run("segment_matmul", &mut store, opts, |s| {
            let (x, a) = (s.param("x")?, s.param("a")?);
            let y = s.tape.segment_matmul(x, a, &[3, 4])?;
            scalarize(s, y)
        })?);
        out.push(run("orth_penalty", &mut store, opts, |s| {
            let a = s.param("a")?;
            s.tape.orth_penalty(a, 3)
        })?);
    }
    {
        let mut store = ParameterStore::new();
        store.insert("p", random_tensor(&[3, 4], &mut rng))?;
        store.insert("q", random_tensor(&[3, 4], &mut rng))?;
        out.push(run("row_dot", &mut store, opts, |s| {
            let (p, q) = (s.param("p")?, s.param("q")?);
            let y = s.tape.row_dot(p, q)?;
            scalarize(s, y)
        })?);
        out.push(run("softmax_cross_entropy", &mut store, opts, |s| {
            let p = s.param("p")?;
            s.tape.softmax_ce(p, &[0, 3, 1])
        })?);
        out.push(run("binary_cross_entropy", &mut store, opts, |s| {
            let p = s.param("p")?;
            let col = s.tape.slice_cols(p, 1, 1)?;
            let prob = s.tape.sigmoid(col)?;
            s.tape.bce(prob, &[1, 0, 1])
        })?);
    }

    for dims in [3, 6] {
        let cfg = tiny_model_config(ModelVariant::CloudOnly, dims, 2).point;
        let enc = PointEncoder::new("point", &cfg)?;
        let mut store = ParameterStore::new();
        enc.init(&mut store, &mut rng)?;
        randomize_biases(&mut store, &mut rng);
        // Perturb the zero-initialized transform heads so their gradients are exercised.
        for (name, t) in store.iter_mut() {
            if name.ends_with(".out.weight") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
            }
        }
        store.insert("cloud", random_tensor(&[9, dims], &mut rng))?;
        out.push(run(&format!("point_encoder_{dims}d"), &mut store, opts, |s| {
            let x = s.param("cloud")?;
            let f = enc.forward(s, x, &[4, 5])?;
            let y = scalarize(s, f.global)?;
            match f.feature_transform {
                Some((a, k)) => {
                    let pen = s.tape.orth_penalty(a, k)?;
                    s.tape.add(y, pen)
                }
                None => Ok(y),
            }
        })?);
    }
    {
        let cfg = tiny_model_config(ModelVariant::ImageOnly, 3, 2).image;
        let enc = ImageEncoder::new("image", &cfg)?;
        let mut store = ParameterStore::new();
        enc.init(&mut store, &mut rng)?;
        randomize_biases(&mut store, &mut rng);
        store.insert("images", random_tensor(&[2, 3, 8, 8], &mut rng))?;
        out.push(run("image_encoder", &mut store, opts, |s| {
            let x = s.param("images")?;
            let y = enc.forward(s, x)?;
            scalarize(s, y)
        })?);
    }
    for variant in ModelVariant::ALL {
        for classes in [2, 3] {
            let cfg = tiny_model_config(variant, 3, classes);
            let model = Model::new(&cfg)?;
            let mut store: ParameterStore<f64> = model.init_store(rng.random())?;
            randomize_biases(&mut store, &mut rng);
            let batch = random_batch(&cfg, 4, 5, &mut rng)?;
            let labels: Vec<usize> = (0..4).map(|i| i % classes).collect();
            out.push(run(&format!("{variant}_{classes}class"), &mut store, opts, |s| {
                let o = model.forward(s, &batch)?;
                model.loss(s, &o, &labels)
            })?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FpsCheck {
    pub instances: usize,
    pub matched: usize,
    /// Description of the first disagreement, if any.
    pub first_mismatch: Option<String>,
}

/// Compares [`fps`] with the brute-force oracle on `instances` seeded random
/// inputs (up to 512 points on a coarse grid so distance ties occur, `m ≤ 64`).
pub fn fps_check(instances: usize, seed: u64) -> Result<FpsCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matched = 0;
    let mut first_mismatch = None;
    for i in 0..instances {
        let n = rng.random_range(1..=512);
        let grid = rng.random_range(4..=64) as f64;
        let pts: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(0..grid as u32) as f64, rng.random_range(0..grid as u32) as f64])
            .collect();
        let m = rng.random_range(1..=64usize.min(n));
        let start = if rng.random_bool(0.5) { FpsStart::NearestCentroid } else { FpsStart::Seeded(rng.random()) };
        let got = fps(&pts, m, start)?;
        let want = fps_reference(&pts, m, start_index(&pts, start)?);
        if got.indices == want {
            matched += 1;
        } else if first_mismatch.is_none() {
            first_mismatch = Some(format!("instance {i}: n={n} m={m}: got {:?}, oracle {:?}", got.indices, want));
        }
    }
    Ok(FpsCheck { instances, matched, first_mismatch })
}
