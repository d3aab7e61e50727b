//! Seeded synthetic image/mask/cloud datasets whose class signal lives in
//! silhouette shape, in foreground texture, or in the intensity-derived z.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imaging::{apply_mask, load_image, load_mask, save_image, save_mask, MaskImage, RgbImage};
use crate::pixel2point::{image_to_cloud, write_cloud, ConversionConfig, FpsStart};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    /// Smooth vs spiked silhouettes, identical color distributions.
    Shape,
    /// Identical silhouette distribution, class-dependent color statistics.
    Texture,
    /// Identical silhouettes and per-channel marginals, class-dependent channel mean.
    Zsignal,
}

impl fmt::Display for SynthTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthTask::Shape => "shape",
            SynthTask::Texture => "texture",
            SynthTask::Zsignal => "zsignal",
        })
    }
}

impl FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shape" => Ok(SynthTask::Shape),
            "texture" => Ok(SynthTask::Texture),
            "zsignal" => Ok(SynthTask::Zsignal),
            _ => Err(Error::Config(format!("unknown synthetic task {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub task: SynthTask,
    pub classes: usize,
    /// Square raster side in pixels.
    pub size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Per-pixel color noise standard deviation as a fraction of 255.
    pub noise: f64,
    pub seed: u64,
    /// Points per stored cloud.
    pub points: usize,
    /// Stored cloud dims (3 or 6); consumers may keep only `x, y, z`.
    pub cloud_dims: usize,
    /// Minimum foreground pixels per mask; defaults to `points`.
    pub min_eligible: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            task: SynthTask::Shape,
            classes: 2,
            size: 64,
            train_per_class: 400,
            val_per_class: 100,
            noise: 0.08,
            seed: 0,
            points: 256,
            cloud_dims: 6,
            min_eligible: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes != 2 {
            return Err(Error::Config(format!("synthetic tasks are binary, got {} classes", self.classes)));
        }
        if self.size < 16 {
            return Err(Error::Config(format!("raster side must be >= 16, got {}", self.size)));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 {
            return Err(Error::Config("need at least one sample per class and split".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise must lie in [0, 1], got {}", self.noise)));
        }
        if self.cloud_dims != 3 && self.cloud_dims != 6 {
            return Err(Error::Config(format!("cloud dims must be 3 or 6, got {}", self.cloud_dims)));
        }
        if self.points == 0 {
            return Err(Error::Config("points must be >= 1".into()));
        }
        if self.min_eligible() > self.size * self.size / 4 {
            return Err(Error::Config(format!(
                "{} foreground pixels cannot fit a {}x{} raster",
                self.min_eligible(),
                self.size,
                self.size
            )));
        }
        Ok(())
    }

    pub fn min_eligible(&self) -> usize {
        self.min_eligible.unwrap_or(self.points)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub cloud: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<SampleRecord>) -> Self {
        Self { root: root.into(), records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> Manifest {
        let records = self.records.iter().filter(|r| r.split == split).cloned().collect();
        Manifest { root: self.root.clone(), records }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Sample count per label, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = Vec::new();
        for r in &self.records {
            if counts.len() <= r.label {
                counts.resize(r.label + 1, 0);
            }
            counts[r.label] += 1;
        }
        counts
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(Error::at_path(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(Error::at_path(path))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(Error::at_path(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }
}

/// Stratified split: each label's samples are shuffled under `seed` and
/// `round(n · train_fraction)` of them (at least one, at most `n − 1`) go to train.
pub fn split_manifest(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if manifest.is_empty() {
        return Err(Error::EmptySet("manifest"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Contract(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = manifest.class_counts();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (label, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        if n < 2 {
            return Err(Error::Data(format!("label {label} has {n} sample; stratification needs at least 2")));
        }
        let mut idx: Vec<usize> = (0..manifest.len()).filter(|&i| manifest.records[i].label == label).collect();
        idx.shuffle(&mut rng);
        let k = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
        for (j, &i) in idx.iter().enumerate() {
            let mut r = manifest.records[i].clone();
            r.split = if j < k { Split::Train } else { Split::Val };
            if j < k {
                train.push((i, r));
            } else {
                val.push((i, r));
            }
        }
    }
    train.sort_by_key(|(i, _)| *i);
    val.sort_by_key(|(i, _)| *i);
    let strip = |v: Vec<(usize, SampleRecord)>| Manifest::new(manifest.root.clone(), v.into_iter().map(|(_, r)| r).collect());
    Ok((strip(train), strip(val)))
}

/// Per-channel mean and variance of foreground pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ColorStats {
    pub mean: [f64; 3],
    pub var: [f64; 3],
    pub pixels: u64,
}

#[derive(Default)]
struct ColorAccumulator {
    sum: [f64; 3],
    sum_sq: [f64; 3],
    n: u64,
}

impl ColorAccumulator {
    fn add(&mut self, rgb: [u8; 3]) {
        for c in 0..3 {
            let v = rgb[c] as f64;
            self.sum[c] += v;
            self.sum_sq[c] += v * v;
        }
        self.n += 1;
    }

    fn finish(&self) -> ColorStats {
        let n = self.n.max(1) as f64;
        let mean = self.sum.map(|s| s / n);
        let var = [0, 1, 2].map(|c| self.sum_sq[c] / n - mean[c] * mean[c]);
        ColorStats { mean, var, pixels: self.n }
    }
}

pub struct SynthOutput {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    /// Foreground color statistics per class, over both splits.
    pub color_stats: Vec<ColorStats>,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Per-sample seed: the run seed combined with a scrambled sample index.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Writes `images/`, `masks/`, `clouds/` and `manifest.jsonl` under `out_dir`.
pub fn generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthOutput> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    for sub in ["images", "masks", "clouds"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(Error::at_path(&d))?;
    }
    let conversion = ConversionConfig {
        points: cfg.points,
        dims: cfg.cloud_dims,
        normalize: true,
        start: FpsStart::NearestCentroid,
    };
    let mut records = Vec::new();
    let mut acc: Vec<ColorAccumulator> = (0..cfg.classes).map(|_| ColorAccumulator::default()).collect();
    let mut index = 0u64;
    for (split, per_class) in [(Split::Train, cfg.train_per_class), (Split::Val, cfg.val_per_class)] {
        for j in 0..per_class {
            for label in 0..cfg.classes {
                let id = format!("{}_{index:05}", cfg.task);
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, index));
                let (image, mask) = render_sample(cfg, label, &mut rng)
                    .map_err(|e| Error::Data(format!("sample {id} (class {label}, #{j}): {e}")))?;
                for (px, &fg) in image.pixels().zip(mask.data()) {
                    if fg {
                        acc[label].add(px);
                    }
                }
                let masked = apply_mask(&image, &mask)?;
                let cloud = image_to_cloud(&masked, &conversion, &id)?;
                let rec = SampleRecord {
                    image: format!("images/{id}.png"),
                    mask: format!("masks/{id}.png"),
                    cloud: format!("clouds/{id}.simpc"),
                    id,
                    label,
                    split,
                };
                save_image(&image, out_dir.join(&rec.image))?;
                save_mask(&mask, out_dir.join(&rec.mask))?;
                write_cloud(&cloud, out_dir.join(&rec.cloud))?;
                records.push(rec);
                index += 1;
            }
        }
    }
    let manifest = Manifest::new(out_dir, records);
    let manifest_path = out_dir.join(MANIFEST_NAME);
    manifest.save(&manifest_path)?;
    log::info!("wrote {} synthetic {} samples to {}", manifest.len(), cfg.task, out_dir.display());
    Ok(SynthOutput { manifest, manifest_path, color_stats: acc.iter().map(ColorAccumulator::finish).collect() })
}

/// Renders one `(image, mask)` pair; background clutter never touches the mask.
pub fn render_sample(cfg: &SynthConfig, label: usize, rng: &mut impl Rng) -> Result<(RgbImage, MaskImage)> {
    let s = cfg.size;
    let mut mask = MaskImage::empty(s, s);
    for _ in 0..32 {
        let spiked = cfg.task == SynthTask::Shape && label == 1;
        mask = silhouette(s, spiked, rng);
        if mask.foreground_count() >= cfg.min_eligible() {
            break;
        }
    }
    if mask.foreground_count() < cfg.min_eligible() {
        return Err(Error::Degenerate(format!(
            "silhouette has {} pixels, need {}",
            mask.foreground_count(),
            cfg.min_eligible()
        )));
    }
    let mut img = background(s, rng);
    clutter(&mut img, &mask, rng);
    paint_foreground(&mut img, &mask, cfg, label, rng);
    Ok((img, mask))
}

fn silhouette(s: usize, spiked: bool, rng: &mut impl Rng) -> MaskImage {
    let sf = s as f64;
    let cx = sf / 2.0 + rng.random_range(-0.08..0.08) * sf;
    let cy = sf / 2.0 + rng.random_range(-0.08..0.08) * sf;
    let r0 = sf * rng.random_range(0.22..0.28);
    blob(s, (cx, cy), r0, spiked, rng)
}

/// A small blob of either form anywhere in the frame, used for background debris.
fn silhouette_at(s: usize, scale: f64, spiked: bool, rng: &mut impl Rng) -> MaskImage {
    let sf = s as f64;
    let centre = (rng.random_range(0.0..sf), rng.random_range(0.0..sf));
    blob(s, centre, sf * scale, spiked, rng)
}

fn blob(s: usize, (cx, cy): (f64, f64), r0: f64, spiked: bool, rng: &mut impl Rng) -> MaskImage {
    let (p1, p2) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
    let (a1, a2) = (rng.random_range(0.04..0.12), rng.random_range(0.02..0.08));
    let spikes = rng.random_range(5..=8) as f64;
    let phase = rng.random_range(0.0..TAU);
    let radius = |theta: f64| {
        let smooth = 1.0 + a1 * (2.0 * theta + p1).sin() + a2 * (3.0 * theta + p2).sin();
        if spiked {
            let c = (spikes * theta + phase).cos().max(0.0);
            r0 * (0.82 * smooth + 0.5 * c.powi(8))
        } else {
            r0 * smooth
        }
    };
    let mut mask = MaskImage::empty(s, s);
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx.hypot(dy) <= radius(dy.atan2(dx)) {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn background(s: usize, rng: &mut impl Rng) -> RgbImage {
    let base = [215.0, 205.0, 180.0].map(|b: f64| b + rng.random_range(-15.0..15.0));
    let grain = Normal::new(0.0, 6.0).expect("valid sigma");
    let mut img = RgbImage::black(s, s);
    for y in 0..s {
        for x in 0..s {
            let px = [0, 1, 2].map(|c| clamp_u8(base[c] + grain.sample(rng)));
            img.set_pixel(x, y, px);
        }
    }
    img
}

/// Labels, scale bars, plant debris and thin stems drawn outside the mask.
fn clutter(img: &mut RgbImage, mask: &MaskImage, rng: &mut impl Rng) {
    let s = img.width() as f64;
    let plant_like = [[70.0, 130.0, 60.0], [40.0, 40.0, 40.0], [120.0, 90.0, 60.0], [30.0, 30.0, 120.0]];
    let paint = |img: &mut RgbImage, x: f64, y: f64, color: [f64; 3]| {
        let (xi, yi) = (x.floor(), y.floor());
        if xi < 0.0 || yi < 0.0 || xi >= s || yi >= s {
            return;
        }
        let (xi, yi) = (xi as usize, yi as usize);
        if !mask.get(xi, yi) {
            img.set_pixel(xi, yi, color.map(clamp_u8));
        }
    };
    for _ in 0..rng.random_range(1..=3) {
        let (w, h) = (rng.random_range(0.1..0.25) * s, rng.random_range(0.05..0.12) * s);
        let (x0, y0) = (rng.random_range(0.0..s - w), rng.random_range(0.0..s - h));
        let color = [0, 1, 2].map(|_| rng.random_range(200.0..250.0));
        for yy in 0..h as usize {
            for xx in 0..w as usize {
                paint(img, x0 + xx as f64, y0 + yy as f64, color);
            }
        }
        let ink = plant_like[1];
        for xx in (0..w as usize).step_by(2) {
            paint(img, x0 + xx as f64, y0 + h / 2.0, ink);
        }
    }
    let noise = Normal::new(0.0, 12.0).expect("valid sigma");
    for _ in 0..rng.random_range(2..=4) {
        let debris = silhouette_at(s as usize, rng.random_range(0.08..0.16), rng.random_bool(0.5), rng);
        for y in 0..s as usize {
            for x in 0..s as usize {
                if debris.get(x, y) {
                    let px = plant_like[0].map(|b| b + noise.sample(rng));
                    paint(img, x as f64, y as f64, px);
                }
            }
        }
    }
    for _ in 0..rng.random_range(3..=7) {
        let len = rng.random_range(0.1..0.3) * s;
        let angle = rng.random_range(0.0..PI);
        let (x0, y0) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let color = plant_like[rng.random_range(0..plant_like.len())];
        let steps = (len * 2.0) as usize;
        for t in 0..steps {
            let d = t as f64 / 2.0;
            paint(img, x0 + d * angle.cos(), y0 + d * angle.sin(), color);
        }
    }
}

fn paint_foreground(img: &mut RgbImage, mask: &MaskImage, cfg: &SynthConfig, label: usize, rng: &mut impl Rng) {
    let noise = Normal::new(0.0, cfg.noise * 255.0 + f64::MIN_POSITIVE).expect("valid sigma");
    let jitter = [0, 1, 2].map(|_| rng.random_range(-4.0..4.0));
    let base = match (cfg.task, label) {
        (SynthTask::Texture, 1) => [125.0, 105.0, 55.0],
        _ => [70.0, 130.0, 60.0],
    };
    let wave_len = cfg.size as f64 * rng.random_range(0.3..0.5);
    let dir = rng.random_range(0.0..TAU);
    let phase = rng.random_range(0.0..TAU);
    let s = cfg.size;
    for y in 0..s {
        for x in 0..s {
            if !mask.get(x, y) {
                continue;
            }
            let mut px = [0.0; 3];
            if cfg.task == SynthTask::Zsignal {
                let t = TAU * (x as f64 * dir.cos() + y as f64 * dir.sin()) / wave_len + phase;
                for (c, v) in px.iter_mut().enumerate() {
                    let shift = if label == 0 { TAU * c as f64 / 3.0 } else { 0.0 };
                    *v = 120.0 + jitter[c] + 50.0 * (t + shift).sin();
                }
            } else {
                for (c, v) in px.iter_mut().enumerate() {
                    *v = base[c] + jitter[c];
                }
            }
            // Foreground pixels stay eligible: never pure black.
            let rgb = [0, 1, 2].map(|c| clamp_u8(px[c] + noise.sample(rng)).max(1));
            img.set_pixel(x, y, rgb);
        }
    }
}

const HIST_BINS: usize = 8;

fn foreground_histogram(manifest: &Manifest, rec: &SampleRecord) -> Result<Vec<f64>> {
    let img = load_image(manifest.resolve(&rec.image))?;
    let mask = load_mask(manifest.resolve(&rec.mask))?;
    let masked = apply_mask(&img, &mask)?;
    let mut hist = vec![0.0; 3 * HIST_BINS];
    let mut n = 0.0;
    for (px, &fg) in masked.pixels().zip(mask.data()) {
        if fg {
            for c in 0..3 {
                hist[c * HIST_BINS + px[c] as usize * HIST_BINS / 256] += 1.0;
            }
            n += 1.0;
        }
    }
    if n == 0.0 {
        return Err(Error::EmptyForeground);
    }
    hist.iter_mut().for_each(|h| *h /= n);
    Ok(hist)
}

/// Validation accuracy of a texture-only classifier: each sample is reduced to
/// its normalized foreground color histogram and assigned to the nearest
/// (L1) training-class mean histogram.
pub fn histogram_oracle_accuracy(manifest: &Manifest) -> Result<f64> {
    let (train, val) = (manifest.split(Split::Train), manifest.split(Split::Val));
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptySet("oracle split"));
    }
    let classes = manifest.class_counts().len();
    let mut centroids = vec![vec![0.0; 3 * HIST_BINS]; classes];
    let mut counts = vec![0.0; classes];
    for rec in &train.records {
        let h = foreground_histogram(manifest, rec)?;
        centroids[rec.label].iter_mut().zip(&h).for_each(|(c, v)| *c += v);
        counts[rec.label] += 1.0;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= f64::max(*n, 1.0));
    }
    let mut correct = 0usize;
    for rec in &val.records {
        let h = foreground_histogram(manifest, rec)?;
        let pred = centroids
            .iter()
            .map(|c| c.iter().zip(&h).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, d)| if d < best.1 { (i, d) } else { best })
            .0;
        correct += usize::from(pred == rec.label);
    }
    Ok(correct as f64 / val.len() as f64)
}
