//! Command implementations behind the `simnet` binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use simnet_core::harness::{
    ablation_csv, ablation_suite, evaluate, point_removal_from_checkpoint, train, AblationKind, MetricsReport,
    TrainConfig,
};
use simnet_core::imaging::{apply_mask, encode_ccm, load_image, load_mask, save_image};
use simnet_core::numgrad::GradCheckOptions;
use simnet_core::pixel2point::{image_to_cloud, write_cloud, ConversionConfig, FpsStart};
use simnet_core::selfcheck::{fps_check, gradient_suite};
use simnet_core::synthdata::{
    generate, histogram_oracle_accuracy, sample_seed, split_manifest, Manifest, SampleRecord, Split, SynthConfig,
    SynthTask, MANIFEST_NAME,
};

/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] simnet_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("acceptance failure: {0}")]
    Acceptance(String),
}

impl CliError {
    /// 1 for contract and config errors, 2 for data errors, 3 for failed checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_data_error() => 2,
            CliError::Core(_) | CliError::Usage(_) => 1,
            CliError::Acceptance(_) => 3,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "simnet", version, about = "Image and point-cloud fusion pipeline for specimen classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert image/mask pairs into point clouds plus a manifest.
    Convert(ConvertArgs),
    /// Encode image/mask pairs as color-coded coordinate masks.
    Ccm(CcmArgs),
    /// Generate a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one manifest split.
    Eval(EvalArgs),
    /// Run the point-removal or zero-z ablation.
    Ablate(AblateArgs),
    /// Finite-difference gradient suite over layers, encoders and fusion variants.
    Gradcheck(GradcheckArgs),
    /// Compare farthest point sampling with the brute-force greedy oracle.
    Fpscheck(FpscheckArgs),
}

#[derive(Debug, Args)]
pub struct PairArgs {
    /// Directory of RGB images (PNG or PPM).
    #[arg(long)]
    pub images: PathBuf,
    /// Directory of binary masks; `foo.png` pairs with `foo{suffix}.png`.
    #[arg(long)]
    pub masks: PathBuf,
    /// Suffix appended to the image stem to form the mask stem, e.g. `_mask`.
    #[arg(long, default_value = "")]
    pub mask_suffix: String,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[command(flatten)]
    pub pairs: PairArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Points per cloud.
    #[arg(long, default_value_t = 1024)]
    pub points: usize,
    /// 3 for (x, y, z) or 6 for (x, y, z, r, g, b).
    #[arg(long, default_value_t = 3)]
    pub dims: usize,
    /// Keep raw pixel coordinates and intensities.
    #[arg(long)]
    pub no_normalize: bool,
    /// Start each sampling at a seeded random point instead of the one nearest the centroid.
    #[arg(long)]
    pub random_start: bool,
    /// CSV of `stem,label` lines; without it every record gets label 0 and the train split.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Stratified train fraction used when labels are given.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CcmArgs {
    #[command(flatten)]
    pub pairs: PairArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_parser = parse_task)]
    pub task: SynthTask,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 400)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    pub val_per_class: usize,
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    #[arg(long, default_value_t = 6)]
    pub dims: usize,
    /// Per-pixel color noise as a fraction of 255.
    #[arg(long, default_value_t = 0.08)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size encoders (224×224 images, 1024-d cloud features).
    Full,
    /// Reduced widths and 64×64 rasters.
    Desk,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config; keys left out take the preset's values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    pub preset: Preset,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for metrics, report and checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Independent runs with derived seeds; a summary lists the per-run and best values.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// `points` (keep 100/40/10% of each cloud) or `zeroz`.
    #[arg(long, value_parser = parse_kind)]
    pub kind: AblationKind,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Evaluate these weights instead of training (point removal only).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Write the CSV table here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Network widths; only `tiny` is supported.
    #[arg(long, default_value = "tiny")]
    pub widths: String,
    /// Floating-point precision in bits; only 64 is supported.
    #[arg(long, default_value_t = 64)]
    pub precision: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FpscheckArgs {
    /// Number of random instances.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_task(s: &str) -> Result<SynthTask, String> {
    s.parse().map_err(|e: simnet_core::Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<AblationKind, String> {
    s.parse().map_err(|e: simnet_core::Error| e.to_string())
}

/// Raises glibc's mmap and trim thresholds so the large, short-lived training
/// buffers are reused instead of being returned to the kernel after every batch.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables and is called before any threads start.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

/// Runs one command, writing its report to the returned string.
pub fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Convert(a) => convert(&a),
        Command::Ccm(a) => ccm(&a),
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Ablate(a) => ablate_cmd(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Fpscheck(a) => fpscheck(&a),
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "ppm", "pgm"];

fn has_image_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

/// An image with the mask it pairs with, if any.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub stem: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

/// Every image in `images`, sorted by file name, with its mask from `masks`.
pub fn pair_files(images: &Path, masks: &Path, suffix: &str) -> CliResult<Vec<Pair>> {
    let read = |dir: &Path| -> CliResult<Vec<PathBuf>> {
        let entries = fs::read_dir(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && has_image_extension(p))
            .collect();
        files.sort();
        Ok(files)
    };
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut mask_by_stem = BTreeMap::new();
    for m in read(masks)? {
        mask_by_stem.entry(stem(&m)).or_insert(m);
    }
    Ok(read(images)?
        .into_iter()
        .map(|image| {
            let s = stem(&image);
            let mask = mask_by_stem.get(&format!("{s}{suffix}")).cloned();
            Pair { stem: s, image, mask }
        })
        .collect())
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Usage(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| simnet_core::Error::Io(e).into())
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn absolute(p: &Path) -> CliResult<String> {
    let abs = fs::canonicalize(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
    Ok(abs.to_string_lossy().into_owned())
}

fn read_labels(path: &Path) -> CliResult<BTreeMap<String, usize>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line.eq_ignore_ascii_case("stem,label")) {
            continue;
        }
        let (stem, label) = line
            .split_once(',')
            .ok_or_else(|| CliError::Usage(format!("{}:{}: expected `stem,label`", path.display(), n + 1)))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{}:{}: bad label {label:?}", path.display(), n + 1)))?;
        out.insert(stem.trim().to_owned(), label);
    }
    Ok(out)
}

fn skip_report(skipped: &[(String, String)]) -> String {
    let mut out = String::from("stem\treason\n");
    for (stem, reason) in skipped {
        writeln!(out, "{stem}\t{reason}").expect("string write");
    }
    out
}

fn load_pair(pair: &Pair) -> Result<simnet_core::imaging::RgbImage, String> {
    let mask_path = pair.mask.as_ref().ok_or("no matching mask")?;
    let image = load_image(&pair.image).map_err(|e| e.to_string())?;
    let mask = load_mask(mask_path).map_err(|e| e.to_string())?;
    apply_mask(&image, &mask).map_err(|e| e.to_string())
}

pub fn convert(a: &ConvertArgs) -> CliResult<String> {
    if a.dims != 3 && a.dims != 6 {
        return Err(CliError::Usage(format!("--dims must be 3 or 6, got {}", a.dims)));
    }
    if a.points == 0 {
        return Err(CliError::Usage("--points must be at least 1".into()));
    }
    let labels = a.labels.as_deref().map(read_labels).transpose()?;
    let pairs = pair_files(&a.pairs.images, &a.pairs.masks, &a.pairs.mask_suffix)?;
    let clouds = a.out.join("clouds");
    create_dir(&clouds)?;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let label = match &labels {
            Some(map) => match map.get(&pair.stem) {
                Some(&l) => l,
                None => {
                    skipped.push((pair.stem.clone(), "no label".to_owned()));
                    continue;
                }
            },
            None => 0,
        };
        let start = if a.random_start { FpsStart::Seeded(sample_seed(a.seed, i as u64)) } else { FpsStart::NearestCentroid };
        let cfg = ConversionConfig { points: a.points, dims: a.dims, normalize: !a.no_normalize, start };
        let cloud = load_pair(pair).and_then(|masked| image_to_cloud(&masked, &cfg, &pair.stem).map_err(|e| e.to_string()));
        let cloud = match cloud {
            Ok(c) => c,
            Err(reason) => {
                log::warn!("skipping {}: {reason}", pair.stem);
                skipped.push((pair.stem.clone(), reason));
                continue;
            }
        };
        let rel = format!("clouds/{}.simpc", pair.stem);
        write_cloud(&cloud, a.out.join(&rel))?;
        records.push(SampleRecord {
            id: pair.stem.clone(),
            image: absolute(&pair.image)?,
            mask: absolute(pair.mask.as_ref().expect("paired"))?,
            cloud: rel,
            label,
            split: Split::Train,
        });
    }
    write(&a.out.join("skipped.tsv"), &skip_report(&skipped))?;
    if records.is_empty() {
        return Err(simnet_core::Error::Data(format!("none of {} images converted", pairs.len())).into());
    }
    let mut manifest = Manifest::new(&a.out, records);
    if labels.is_some() {
        let (train, val) = split_manifest(&manifest, a.train_fraction, a.seed)?;
        let split_of: BTreeMap<String, Split> = train
            .records
            .iter()
            .map(|r| (r.id.clone(), Split::Train))
            .chain(val.records.iter().map(|r| (r.id.clone(), Split::Val)))
            .collect();
        for r in &mut manifest.records {
            r.split = split_of[&r.id];
        }
    }
    manifest.save(a.out.join(MANIFEST_NAME))?;
    Ok(format!("converted {} of {} images ({} skipped)\n", manifest.len(), pairs.len(), skipped.len()))
}

pub fn ccm(a: &CcmArgs) -> CliResult<String> {
    let pairs = pair_files(&a.pairs.images, &a.pairs.masks, &a.pairs.mask_suffix)?;
    create_dir(&a.out)?;
    let mut skipped = Vec::new();
    let mut written = 0;
    for pair in &pairs {
        let encoded = load_pair(pair).and_then(|m| {
            if m.pixels().all(|px| px == [0, 0, 0]) {
                return Err(simnet_core::Error::EmptyForeground.to_string());
            }
            encode_ccm(&m).map_err(|e| e.to_string())
        });
        match encoded {
            Ok(c) => {
                save_image(c.as_rgb(), a.out.join(format!("{}.png", pair.stem)))?;
                written += 1;
            }
            Err(reason) => {
                log::warn!("skipping {}: {reason}", pair.stem);
                skipped.push((pair.stem.clone(), reason));
            }
        }
    }
    write(&a.out.join("skipped.tsv"), &skip_report(&skipped))?;
    if written == 0 {
        return Err(simnet_core::Error::Data(format!("none of {} images encoded", pairs.len())).into());
    }
    Ok(format!("encoded {written} of {} images ({} skipped)\n", pairs.len(), skipped.len()))
}

pub fn synth(a: &SynthArgs) -> CliResult<String> {
    let cfg = SynthConfig {
        task: a.task,
        size: a.size,
        train_per_class: a.train_per_class,
        val_per_class: a.val_per_class,
        points: a.points,
        cloud_dims: a.dims,
        noise: a.noise,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let out = generate(&cfg, &a.out)?;
    let mut report = format!("wrote {} samples to {}\n", out.manifest.len(), out.manifest_path.display());
    for (c, s) in out.color_stats.iter().enumerate() {
        writeln!(
            report,
            "class {c}: foreground mean [{:.2}, {:.2}, {:.2}] var [{:.1}, {:.1}, {:.1}] over {} pixels",
            s.mean[0], s.mean[1], s.mean[2], s.var[0], s.var[1], s.var[2], s.pixels
        )
        .expect("string write");
    }
    writeln!(report, "color histogram oracle accuracy: {:.3}", histogram_oracle_accuracy(&out.manifest)?)
        .expect("string write");
    Ok(report)
}

/// The training config a command runs with: preset, then file, then seed override.
pub fn resolve_config(a: &ConfigArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let base = match a.preset {
                Preset::Full => TrainConfig::default(),
                Preset::Desk => TrainConfig::desk_scale(),
            };
            TrainConfig::from_toml_over(&base, &text)?
        }
        None => match a.preset {
            Preset::Full => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk_scale(),
        },
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_run(dir: &Path, cfg: &TrainConfig, report: &MetricsReport) -> CliResult<()> {
    write(&dir.join("metrics.csv"), &report.to_csv())?;
    let json = serde_json::to_string_pretty(report).expect("serializable report");
    write(&dir.join("report.json"), &format!("{json}\n"))?;
    write(&dir.join("config.toml"), &cfg.to_toml())
}

pub fn train_cmd(a: &TrainArgs) -> CliResult<String> {
    if a.repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    let base = resolve_config(&a.config)?;
    let manifest = Manifest::load(&a.manifest)?;
    create_dir(&a.out)?;
    let mut summary = String::from("run,seed,final_acc,final_f1,best_acc,best_f1,best_epoch\n");
    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for run in 0..a.repeats {
        let cfg = TrainConfig { seed: sample_seed(base.seed, run as u64), ..base.clone() };
        let dir = if a.repeats == 1 { a.out.clone() } else { a.out.join(format!("run{run}")) };
        create_dir(&dir)?;
        let outcome = train(&cfg, &manifest, Some(&dir.join("checkpoint.simng")))?;
        let r = &outcome.report;
        write_run(&dir, &cfg, r)?;
        log::info!("run {run}: best acc {:.4} at epoch {} ({:.1} s)", r.best_acc, r.best_epoch, r.wall_time_secs);
        writeln!(summary, "{run},{},{},{},{},{},{}", cfg.seed, r.final_acc, r.final_f1, r.best_acc, r.best_f1, r.best_epoch)
            .expect("string write");
        best = (best.0.max(r.best_acc), best.1.max(r.best_f1));
    }
    if a.repeats > 1 {
        writeln!(summary, "max,,,,{},{},", best.0, best.1).expect("string write");
        write(&a.out.join("summary.csv"), &summary)?;
    }
    Ok(summary)
}

pub fn eval_cmd(a: &EvalArgs) -> CliResult<String> {
    let cfg = resolve_config(&a.config)?;
    let manifest = Manifest::load(&a.manifest)?;
    let (acc, f1) = evaluate(&cfg, &a.checkpoint, &manifest, a.split.into())?;
    Ok(format!("acc,f1\n{acc},{f1}\n"))
}

pub fn ablate_cmd(a: &AblateArgs) -> CliResult<String> {
    let cfg = resolve_config(&a.config)?;
    let manifest = Manifest::load(&a.manifest)?;
    let rows = match (&a.checkpoint, a.kind) {
        (Some(ckpt), AblationKind::PointRemoval) => point_removal_from_checkpoint(&cfg, ckpt, &manifest)?,
        (Some(_), AblationKind::ZeroZ) => {
            return Err(CliError::Usage("--checkpoint applies to point removal only; zero-z trains both models".into()));
        }
        (None, kind) => ablation_suite(&cfg, &manifest, kind)?,
    };
    let csv = ablation_csv(&rows);
    if let Some(out) = &a.out {
        write(out, &csv)?;
    }
    Ok(csv)
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<String> {
    if a.widths != "tiny" {
        return Err(CliError::Usage(format!("--widths supports only `tiny`, got {:?}", a.widths)));
    }
    if a.precision != 64 {
        return Err(CliError::Usage(format!("--precision supports only 64, got {}", a.precision)));
    }
    let reports = gradient_suite(GradCheckOptions { seed: a.seed, ..GradCheckOptions::default() })?;
    let mut out = String::from("block,max_rel_error,checked,skipped\n");
    let mut failed = Vec::new();
    for r in &reports {
        writeln!(out, "{},{:.3e},{},{}", r.block, r.report.max_rel_error, r.report.checked, r.report.skipped)
            .expect("string write");
        if !(r.report.max_rel_error < GRADCHECK_TOLERANCE) {
            failed.push(format!("{} ({:.3e})", r.block, r.report.max_rel_error));
        }
    }
    if failed.is_empty() {
        Ok(out)
    } else {
        print!("{out}");
        Err(CliError::Acceptance(format!("gradient error above {GRADCHECK_TOLERANCE:e} in {}", failed.join(", "))))
    }
}

pub fn fpscheck(a: &FpscheckArgs) -> CliResult<String> {
    let r = fps_check(a.n, a.seed)?;
    let line = format!("{}/{} match oracle\n", r.matched, r.instances);
    match r.first_mismatch {
        None => Ok(line),
        Some(m) => {
            print!("{line}");
            Err(CliError::Acceptance(m))
        }
    }
}
