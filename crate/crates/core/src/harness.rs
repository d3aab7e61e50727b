//! Experiment configuration, the seeded training loop, evaluation metrics and
//! the point-removal / zero-z ablation suites.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{image_batch, CloudBatch, ImageEncoderConfig, PointEncoderConfig};
use crate::fusion::{predictions, Batch, Model, ModelConfig, ModelVariant};
use crate::imaging::{
    apply_mask, augment_image, encode_ccm, load_image, load_mask, resize_nearest, RgbImage,
};
use crate::numgrad::{adam_step, AdamConfig, AdamState, Mode, ParameterStore, Session, StepLr};
use crate::pixel2point::{ablate_points, augment_cloud, kept_count, read_cloud, zero_z, CloudAugment, PointCloud};
use crate::synthdata::{sample_seed, Manifest, Split};
use crate::{Error, Result};

/// Batch sizes accepted by [`TrainConfig::validate`].
pub const BATCH_SIZES: [usize; 5] = [8, 16, 32, 64, 128];

/// Flat `key = value` experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub seed: u64,
    pub variant: ModelVariant,
    pub classes: usize,
    pub cloud_dims: usize,
    pub image_size: usize,
    pub augment_images: bool,
    pub augment_clouds: bool,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    /// Zero the z column of every cloud, in training and evaluation.
    pub zero_z: bool,
    pub point_widths: Vec<usize>,
    pub input_transform: bool,
    pub feature_transform: bool,
    pub transform_reg: f64,
    pub tnet_widths: Vec<usize>,
    pub tnet_fc: Vec<usize>,
    pub image_widths: Vec<usize>,
    pub image_features: usize,
    pub ccm_size: usize,
    pub ccm_widths: Vec<usize>,
    pub ccm_features: usize,
    pub projected_dim: usize,
    pub head_widths: Vec<usize>,
    pub dropout: f64,
    pub attention_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let point = PointEncoderConfig::default();
        let image = ImageEncoderConfig::default();
        let model = ModelConfig::default();
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 0.001,
            weight_decay: 1e-4,
            decoupled_weight_decay: false,
            lr_step: 20,
            lr_gamma: 0.7,
            seed: 0,
            variant: ModelVariant::SimnetConcat,
            classes: 2,
            cloud_dims: 3,
            image_size: image.size,
            augment_images: true,
            augment_clouds: true,
            jitter_sigma: CloudAugment::default().jitter_sigma,
            jitter_clip: CloudAugment::default().jitter_clip,
            zero_z: false,
            point_widths: point.widths,
            input_transform: point.use_input_transform,
            feature_transform: point.use_feature_transform,
            transform_reg: point.reg_weight,
            tnet_widths: point.tnet_widths,
            tnet_fc: point.tnet_fc,
            image_widths: image.widths.clone(),
            image_features: image.feature_dim,
            ccm_size: image.size,
            ccm_widths: image.widths,
            ccm_features: model.ccm.feature_dim,
            projected_dim: model.projected_dim,
            head_widths: model.head_widths,
            dropout: model.dropout,
            attention_dim: model.attention_dim,
        }
    }
}

impl TrainConfig {
    /// Reduced widths and 64×64 rasters for CPU runs on the synthetic tasks.
    /// The image feature keeps its 2048 entries; the global cloud feature has 128.
    pub fn desk_scale() -> Self {
        Self {
            epochs: 12,
            image_size: 64,
            ccm_size: 64,
            point_widths: vec![32, 64, 128],
            tnet_widths: vec![16, 32, 64],
            tnet_fc: vec![32],
            image_widths: vec![8, 16, 32],
            ccm_widths: vec![8, 16, 32],
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_over(&Self::default(), text)
    }

    /// Parses `text`, taking every key it leaves out from `base`.
    pub fn from_toml_over(base: &TrainConfig, text: &str) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let mut table: toml::Table = toml::from_str(&base.to_toml()).map_err(|e| bad(&e))?;
        let overrides: toml::Table = toml::from_str(text).map_err(|e| bad(&e))?;
        table.extend(overrides);
        let cfg: TrainConfig = table.try_into().map_err(|e| bad(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&std::fs::read_to_string(path).map_err(Error::at_path(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !BATCH_SIZES.contains(&self.batch_size) {
            return Err(Error::Config(format!("batch size must be one of {BATCH_SIZES:?}, got {}", self.batch_size)));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.lr_step == 0 || !(self.lr_gamma > 0.0) {
            return Err(Error::Config("learning-rate schedule parameters out of range".into()));
        }
        if self.cloud_dims != 3 && self.cloud_dims != 6 {
            return Err(Error::Config(format!("cloud dims must be 3 or 6, got {}", self.cloud_dims)));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            classes: self.classes,
            point: PointEncoderConfig {
                input_dims: self.cloud_dims,
                widths: self.point_widths.clone(),
                use_input_transform: self.input_transform,
                use_feature_transform: self.feature_transform,
                reg_weight: self.transform_reg,
                tnet_widths: self.tnet_widths.clone(),
                tnet_fc: self.tnet_fc.clone(),
            },
            image: ImageEncoderConfig {
                size: self.image_size,
                widths: self.image_widths.clone(),
                feature_dim: self.image_features,
            },
            ccm: ImageEncoderConfig { size: self.ccm_size, widths: self.ccm_widths.clone(), feature_dim: self.ccm_features },
            projected_dim: self.projected_dim,
            head_widths: self.head_widths.clone(),
            dropout: self.dropout,
            attention_dim: self.attention_dim,
        }
    }

    pub fn schedule(&self) -> StepLr {
        StepLr { base_lr: self.lr, step_size: self.lr_step, gamma: self.lr_gamma }
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    fn cloud_augment(&self) -> CloudAugment {
        CloudAugment { rotate: true, jitter_sigma: self.jitter_sigma, jitter_clip: self.jitter_clip }
    }
}

/// One loaded sample, already resized to the model's rasters.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub ccm: Option<RgbImage>,
    pub cloud: PointCloud,
    pub label: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads every record of `manifest` in the split `split`.
    pub fn load(manifest: &Manifest, split: Split, cfg: &TrainConfig) -> Result<Self> {
        let mut samples = Vec::new();
        for rec in manifest.records.iter().filter(|r| r.split == split) {
            let raw = load_image(manifest.resolve(&rec.image))?;
            let image = resize_nearest(&raw, cfg.image_size, cfg.image_size);
            let ccm = if cfg.variant.uses_ccm() {
                let mask = load_mask(manifest.resolve(&rec.mask))?;
                let ccm = encode_ccm(&apply_mask(&raw, &mask)?)?;
                Some(resize_nearest(ccm.as_rgb(), cfg.ccm_size, cfg.ccm_size))
            } else {
                None
            };
            let cloud = read_cloud(manifest.resolve(&rec.cloud))?;
            let mut cloud = match (cloud.dims(), cfg.cloud_dims) {
                (d, want) if d == want => cloud,
                (6, 3) => cloud.xyz(),
                (d, want) => {
                    return Err(Error::Data(format!("{}: cloud has {d} dims, config needs {want}", rec.cloud)));
                }
            };
            if cfg.zero_z {
                cloud = zero_z(&cloud);
            }
            samples.push(Sample { id: rec.id.clone(), image, ccm, cloud, label: rec.label });
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Copy with every cloud passed through `f`.
    pub fn map_clouds(&self, mut f: impl FnMut(usize, &PointCloud) -> Result<PointCloud>) -> Result<Self> {
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| Ok(Sample { cloud: f(i, &s.cloud)?, ..s.clone() }))
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }
}

fn assemble(cfg: &TrainConfig, images: &[RgbImage], ccm: &[&RgbImage], clouds: &[PointCloud]) -> Result<Batch<f32>> {
    let v = cfg.variant;
    Ok(Batch {
        images: if v.uses_image() { Some(image_batch(&images.iter().collect::<Vec<_>>())?) } else { None },
        ccm: if v.uses_ccm() { Some(image_batch(ccm)?) } else { None },
        clouds: if v.uses_cloud() { Some(CloudBatch::from_clouds(&clouds.iter().collect::<Vec<_>>())?) } else { None },
    })
}

fn eval_batch(cfg: &TrainConfig, samples: &[&Sample]) -> Result<Batch<f32>> {
    let images: Vec<RgbImage> = if cfg.variant.uses_image() { samples.iter().map(|s| s.image.clone()).collect() } else { vec![] };
    let ccm: Vec<&RgbImage> = samples.iter().filter_map(|s| s.ccm.as_ref()).collect();
    let clouds: Vec<PointCloud> = if cfg.variant.uses_cloud() { samples.iter().map(|s| s.cloud.clone()).collect() } else { vec![] };
    assemble(cfg, &images, &ccm, &clouds)
}

fn train_batch(cfg: &TrainConfig, samples: &[&Sample], rng: &mut ChaCha8Rng) -> Result<Batch<f32>> {
    let v = cfg.variant;
    let images: Vec<RgbImage> = if v.uses_image() {
        samples
            .iter()
            .map(|s| if cfg.augment_images { augment_image(&s.image, rng) } else { s.image.clone() })
            .collect()
    } else {
        vec![]
    };
    let ccm: Vec<&RgbImage> = samples.iter().filter_map(|s| s.ccm.as_ref()).collect();
    let aug = cfg.cloud_augment();
    let clouds: Vec<PointCloud> = if v.uses_cloud() {
        samples
            .iter()
            .map(|s| {
                let c = if cfg.augment_clouds { augment_cloud(&s.cloud, &aug, rng) } else { s.cloud.clone() };
                if cfg.zero_z {
                    zero_z(&c)
                } else {
                    c
                }
            })
            .collect()
    } else {
        vec![]
    };
    assemble(cfg, &images, &ccm, &clouds)
}

/// `2·TP / (2·TP + FP + FN)`; 0 when nothing is predicted positive.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if tp + fp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Accuracy and F1 (positive class 1 for two classes, macro average otherwise).
pub fn classification_metrics(preds: &[usize], labels: &[usize], classes: usize) -> Result<(f64, f64)> {
    if preds.len() != labels.len() {
        return Err(Error::dim("metrics", preds.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptySet("evaluation set"));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let acc = correct as f64 / labels.len() as f64;
    let class_f1 = |c: usize| {
        let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count();
        let fp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l != c).count();
        let fn_ = preds.iter().zip(labels).filter(|&(&p, &l)| p != c && l == c).count();
        f1_score(tp, fp, fn_)
    };
    let f1 = if classes == 2 { class_f1(1) } else { (0..classes).map(class_f1).sum::<f64>() / classes as f64 };
    Ok((acc, f1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_f1: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epochs: Vec<EpochMetrics>,
    pub final_acc: f64,
    pub final_f1: f64,
    pub best_acc: f64,
    pub best_f1: f64,
    /// Epoch whose weights were kept (highest validation accuracy, earliest on ties).
    pub best_epoch: usize,
    pub config_hash: String,
    pub seed: u64,
    /// Not part of equality-sensitive outputs; never written to metrics files.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_acc,val_f1,lr";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            writeln!(out, "{},{},{},{},{}", e.epoch, e.train_loss, e.val_acc, e.val_f1, e.lr).expect("string write");
        }
        out
    }

    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &MetricsReport) -> bool {
        MetricsReport { wall_time_secs: 0.0, ..self.clone() } == MetricsReport { wall_time_secs: 0.0, ..other.clone() }
    }
}

pub struct TrainOutcome {
    pub report: MetricsReport,
    pub model: Model,
    /// Weights of the best validation epoch.
    pub best: ParameterStore<f32>,
}

/// Predicted class of every sample, in order. The store is not modified.
pub fn predict(model: &Model, store: &ParameterStore<f32>, cfg: &TrainConfig, data: &Dataset) -> Result<Vec<usize>> {
    let mut scratch = store.clone();
    let outputs = model.config().outputs();
    let mut preds = Vec::with_capacity(data.len());
    let refs: Vec<&Sample> = data.samples.iter().collect();
    for chunk in refs.chunks(cfg.batch_size) {
        let batch = eval_batch(cfg, chunk)?;
        let mut s = Session::new(&mut scratch, Mode::Eval, 0);
        let out = model.forward(&mut s, &batch)?;
        preds.extend(predictions(s.tape.value(out.probs), outputs));
    }
    Ok(preds)
}

/// Accuracy and F1 of `store` on `data`.
pub fn evaluate_store(model: &Model, store: &ParameterStore<f32>, cfg: &TrainConfig, data: &Dataset) -> Result<(f64, f64)> {
    let labels = data.labels();
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.classes) {
        return Err(Error::Contract(format!("label {bad} does not fit a {}-class head", cfg.classes)));
    }
    let preds = predict(model, store, cfg, data)?;
    classification_metrics(&preds, &labels, cfg.classes)
}

/// Rebuilds the model described by `cfg` and loads checkpoint weights into it.
pub fn load_model(cfg: &TrainConfig, checkpoint: impl AsRef<Path>) -> Result<(Model, ParameterStore<f32>)> {
    cfg.validate()?;
    let model = Model::new(&cfg.model_config())?;
    let mut store: ParameterStore<f32> = model.init_store(cfg.seed)?;
    store.load(checkpoint)?;
    Ok((model, store))
}

fn load_split(manifest: &Manifest, split: Split, cfg: &TrainConfig) -> Result<Dataset> {
    let data = Dataset::load(manifest, split, cfg)?;
    if data.is_empty() {
        return Err(Error::Data(format!("no {split:?} samples in the manifest")));
    }
    Ok(data)
}

/// Loads a checkpoint written by [`train`] and evaluates it on one split.
pub fn evaluate(cfg: &TrainConfig, checkpoint: impl AsRef<Path>, manifest: &Manifest, split: Split) -> Result<(f64, f64)> {
    let (model, store) = load_model(cfg, checkpoint)?;
    evaluate_store(&model, &store, cfg, &load_split(manifest, split, cfg)?)
}

/// Trains on the manifest's train split, validating on its val split after
/// every epoch. The best-accuracy weights are written to `checkpoint` if given.
pub fn train(cfg: &TrainConfig, manifest: &Manifest, checkpoint: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_data = Dataset::load(manifest, Split::Train, cfg)?;
    let val_data = Dataset::load(manifest, Split::Val, cfg)?;
    let outcome = train_on(cfg, &train_data, &val_data)?;
    if let Some(path) = checkpoint {
        outcome.best.save(path)?;
    }
    Ok(outcome)
}

/// The training loop over preloaded datasets.
pub fn train_on(cfg: &TrainConfig, train_data: &Dataset, val_data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::Data("empty train split".into()));
    }
    if val_data.is_empty() {
        return Err(Error::Data("empty val split".into()));
    }
    let started = Instant::now();
    let model = Model::new(&cfg.model_config())?;
    let mut store: ParameterStore<f32> = model.init_store(cfg.seed)?;
    let mut adam = AdamState::new(AdamConfig {
        weight_decay: cfg.weight_decay,
        decoupled: cfg.decoupled_weight_decay,
        ..AdamConfig::default()
    });
    let schedule = cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::NEG_INFINITY, 0.0, 0usize, store.clone());
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            // A lone trailing sample gives degenerate batch statistics.
            if idx.len() < 2 && order.len() >= 2 {
                continue;
            }
            let samples: Vec<&Sample> = idx.iter().map(|&i| &train_data.samples[i]).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let batch = train_batch(cfg, &samples, &mut rng)?;
            store.zero_grad();
            let diverged = |detail: String| Error::Divergence { epoch, batch: b, detail };
            let mut s = Session::new(&mut store, Mode::Train, sample_seed(cfg.seed, (epoch * 100_003 + b) as u64));
            let value = (|| {
                let out = model.forward(&mut s, &batch)?;
                model.loss(&mut s, &out, &labels)
            })()
            .map_err(|e| match e {
                Error::NonFinite(d) => diverged(d),
                other => other,
            })?;
            let loss = s.tape.value(value)[0] as f64;
            if !loss.is_finite() {
                return Err(diverged(format!("loss {loss}")));
            }
            s.backward(value).map_err(|e| match e {
                Error::NonFinite(d) => diverged(d),
                other => other,
            })?;
            adam_step(&mut store, &mut adam, lr)?;
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        let (val_acc, val_f1) = evaluate_store(&model, &store, cfg, val_data)?;
        log::info!("epoch {epoch}: loss {train_loss:.4} val acc {val_acc:.4} f1 {val_f1:.4} lr {lr}");
        if val_acc > best.0 {
            best = (val_acc, val_f1, epoch, store.clone());
        }
        epochs.push(EpochMetrics { epoch, train_loss, val_acc, val_f1, lr });
    }
    let last = epochs.last().expect("epochs >= 1");
    let report = MetricsReport {
        final_acc: last.val_acc,
        final_f1: last.val_f1,
        best_acc: best.0,
        best_f1: epochs.iter().map(|e| e.val_f1).fold(f64::NEG_INFINITY, f64::max),
        best_epoch: best.2,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        wall_time_secs: started.elapsed().as_secs_f64(),
        epochs,
    };
    let mut best_store = best.3;
    best_store.zero_grad();
    Ok(TrainOutcome { report, model, best: best_store })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    PointRemoval,
    ZeroZ,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "points" | "point_removal" => Ok(AblationKind::PointRemoval),
            "zeroz" | "zero_z" => Ok(AblationKind::ZeroZ),
            _ => Err(Error::Config(format!("unknown ablation kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub condition: String,
    pub acc: f64,
    pub f1: f64,
}

pub const KEEP_FRACTIONS: [f64; 3] = [1.0, 0.4, 0.1];

/// `"1024 points"`, `"410 points (40%)"`, ...
pub fn point_condition_label(m: usize, keep: f64) -> String {
    let k = kept_count(m, keep);
    if keep >= 1.0 {
        format!("{k} points")
    } else {
        format!("{k} points ({}%)", (keep * 100.0).round())
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("condition,acc,f1\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.condition, r.acc, r.f1).expect("string write");
    }
    out
}

/// Evaluates trained weights on `val_data` with a random `keep` fraction of
/// every cloud's points, for each of [`KEEP_FRACTIONS`].
pub fn point_removal_table(
    model: &Model,
    store: &ParameterStore<f32>,
    cfg: &TrainConfig,
    val_data: &Dataset,
) -> Result<Vec<AblationRow>> {
    let m = val_data.samples.first().ok_or(Error::EmptySet("validation set"))?.cloud.len();
    KEEP_FRACTIONS
        .iter()
        .map(|&keep| {
            let reduced = val_data.map_clouds(|i, c| {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed ^ keep.to_bits(), i as u64));
                ablate_points(c, keep, &mut rng)
            })?;
            let (acc, f1) = evaluate_store(model, store, cfg, &reduced)?;
            Ok(AblationRow { condition: point_condition_label(m, keep), acc, f1 })
        })
        .collect()
}

/// Point-removal table for an existing checkpoint on the manifest's val split.
pub fn point_removal_from_checkpoint(
    cfg: &TrainConfig,
    checkpoint: impl AsRef<Path>,
    manifest: &Manifest,
) -> Result<Vec<AblationRow>> {
    if !cfg.variant.uses_cloud() {
        return Err(Error::Config(format!("{} has no point-cloud branch to ablate", cfg.variant)));
    }
    let (model, store) = load_model(cfg, checkpoint)?;
    point_removal_table(&model, &store, cfg, &load_split(manifest, Split::Val, cfg)?)
}

/// Runs an ablation end to end from a manifest with train and val splits.
/// Point removal trains once and evaluates at every keep fraction; zero-z
/// trains one model with z and one with z zeroed.
pub fn ablation_suite(cfg: &TrainConfig, manifest: &Manifest, kind: AblationKind) -> Result<Vec<AblationRow>> {
    if !cfg.variant.uses_cloud() {
        return Err(Error::Config(format!("{} has no point-cloud branch to ablate", cfg.variant)));
    }
    match kind {
        AblationKind::PointRemoval => {
            let train_data = Dataset::load(manifest, Split::Train, cfg)?;
            let val_data = Dataset::load(manifest, Split::Val, cfg)?;
            let out = train_on(cfg, &train_data, &val_data)?;
            point_removal_table(&out.model, &out.best, cfg, &val_data)
        }
        AblationKind::ZeroZ => {
            let mut rows = Vec::new();
            for (zero, condition) in [(false, "with z"), (true, "zero z")] {
                let c = TrainConfig { zero_z: zero, ..cfg.clone() };
                let out = train(&c, manifest, None)?;
                rows.push(AblationRow { condition: condition.into(), acc: out.report.best_acc, f1: out.report.best_f1 });
            }
            Ok(rows)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        assert!((f1_score(2, 1, 1) - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(f1_score(0, 0, 3), 0.0);
        assert_eq!(f1_score(0, 0, 0), 0.0);
        let (acc, f1) = classification_metrics(&[1, 0, 1], &[1, 0, 1], 2).unwrap();
        assert_eq!((acc, f1), (1.0, 1.0));
        assert!(classification_metrics(&[], &[], 2).is_err());
    }

    #[test]
    fn condition_labels() {
        assert_eq!(point_condition_label(1024, 1.0), "1024 points");
        assert_eq!(point_condition_label(1024, 0.4), "410 points (40%)");
        assert_eq!(point_condition_label(1024, 0.1), "102 points (10%)");
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert!(TrainConfig::from_toml("batch_size = 12").is_err());
        assert!(TrainConfig::from_toml("epochs = 0").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        let c = TrainConfig::from_toml("variant = \"simnet_bca\"\nepochs = 3").unwrap();
        assert_eq!((c.variant, c.epochs), (ModelVariant::SimnetBca, 3));
    }

    #[test]
    fn schedule_matches_step_decay() {
        let s = TrainConfig::default().schedule();
        assert_eq!(s.lr(19), 0.001);
        assert!((s.lr(20) - 0.0007).abs() < 1e-18);
    }
}
