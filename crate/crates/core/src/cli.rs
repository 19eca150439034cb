//! Subcommands of the `geosal` binary.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
//! Outputs are written to a temporary sibling and renamed into place, so a
//! failed run leaves no partial files behind.

use std::collections::{BTreeMap, HashSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ad::OpKind;
use crate::gradcheck::{run_suite, TOLERANCE};
use crate::metrics::{aggregate, evaluate_sample, write_curve_csv, EvalOptions, EvalReport, DEFAULT_BETA_SQ, IOU_THRESHOLD};
use crate::model::{backbone_features, manifest_path, predict, ModelParams};
use crate::pcio::{build_input_features, generate_scene, load_ply, random_scene_spec, save_ply, FeatureMode, PlyEncoding, PointCloud, INPUT_CHANNELS};
use crate::superpoint::{adaptive_gamma, partition, SuperpointPartition, DEFAULT_GAMMA_PERCENTILE, DEFAULT_K};
use crate::train::{sample_seed, train, write_log_csv, TrainConfig, TrainOptions, Variant};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "geosal", version, about = "Salient object detection on point clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write labelled synthetic scenes and a manifest.
    Synth(SynthArgs),
    /// Train a model on a directory of labelled PLY files.
    Train(TrainArgs),
    /// Predict per-point saliency for one cloud.
    Segment(SegmentArgs),
    /// Score predicted clouds against ground truth.
    Eval(EvalArgs),
    /// Export a superpoint partition as a randomly colored cloud.
    Superpoints(SuperpointArgs),
    /// Write only the mean threshold curve of predicted clouds.
    Curves(CurvesArgs),
    /// Run the finite-difference gradient-check suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub scenes: usize,
    /// Points per scene; with --max-points, the lower bound of a uniform draw.
    #[arg(long)]
    pub points: usize,
    #[arg(long)]
    pub max_points: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file of TrainConfig overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path; rewritten after every epoch.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "full")]
    pub variant: String,
    /// Validation directory of labelled PLY files.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Per-epoch log CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ignore colors; must match how the checkpoint was trained.
    #[arg(long)]
    pub xyz_only: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub curves: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BETA_SQ)]
    pub beta_sq: f64,
}

#[derive(Debug, Args)]
pub struct SuperpointArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Feature-distance threshold; defaults to a percentile of sampled
    /// pairwise distances.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cluster on this checkpoint's backbone features instead of the raw
    /// input features.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurvesArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BETA_SQ)]
    pub beta_sq: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Scale this op's backward rule to exercise the failure path.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Segment(a) => segment(&a),
        Command::Eval(a) => eval(&a),
        Command::Superpoints(a) => superpoints(&a),
        Command::Curves(a) => curves(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

/// Runs `write` against a temporary sibling of `path`, then renames it into
/// place. Extra files derived from the temporary path (see `siblings`) are
/// renamed alongside.
fn write_atomic(path: &Path, siblings: &[fn(&Path) -> PathBuf], write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let mut name = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(format!(".partial-{}", std::process::id()));
    let tmp = path.with_file_name(name);
    let pairs: Vec<(PathBuf, PathBuf)> = std::iter::once((tmp.clone(), path.to_path_buf()))
        .chain(siblings.iter().map(|f| (f(&tmp), f(path))))
        .collect();
    let cleanup = || pairs.iter().for_each(|(t, _)| drop(std::fs::remove_file(t)));
    if let Err(e) = write(&tmp) {
        cleanup();
        return Err(e);
    }
    for (t, p) in &pairs {
        if let Err(e) = std::fs::rename(t, p) {
            cleanup();
            return Err(Error::io(p, e));
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, &[], |tmp| std::fs::write(tmp, text).map_err(|e| Error::io(tmp, e)))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(p) if !p.is_dir() => Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "directory does not exist"))),
        _ => Ok(()),
    }
}

/// `*.ply` files of `dir` keyed by file name.
fn ply_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")) && path.is_file() {
            let name = path.file_name().expect("file").to_string_lossy().into_owned();
            out.insert(name, path);
        }
    }
    Ok(out)
}

fn load_labelled_dir(dir: &Path) -> Result<Vec<PointCloud>> {
    let files = ply_files(dir)?;
    if files.is_empty() {
        return Err(Error::invalid(format!("no .ply files in {}", dir.display())));
    }
    files
        .values()
        .map(|p| {
            let c = load_ply(p)?;
            c.require_mask(&p.display().to_string())?;
            Ok(c)
        })
        .collect()
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    if a.scenes == 0 {
        return Err(Error::invalid("--scenes must be at least 1"));
    }
    let hi = a.max_points.unwrap_or(a.points);
    if a.points < 64 || hi < a.points {
        return Err(Error::invalid(format!("point range {}..={hi} must start at 64 or more and be non-empty", a.points)));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut manifest = String::from("file,seed,points\n");
    for i in 0..a.scenes {
        let scene_seed: u64 = rng.gen();
        let n = rng.gen_range(a.points..=hi);
        let cloud = generate_scene(&random_scene_spec(scene_seed, n))?;
        let name = format!("scene_{i:04}.ply");
        let path = a.out.join(&name);
        write_atomic(&path, &[], |tmp| save_ply(&cloud, tmp, None, PlyEncoding::BinaryLittleEndian))?;
        manifest.push_str(&format!("{name},{scene_seed},{n}\n"));
    }
    write_text(&a.out.join("manifest.csv"), &manifest)?;
    println!("wrote {} scenes to {}", a.scenes, a.out.display());
    Ok(())
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let config = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let variant = Variant::parse(&a.variant)?;
    ensure_parent(&a.out)?;
    if let Some(log) = &a.log {
        ensure_parent(log)?;
    }
    let data = load_labelled_dir(&a.data)?;
    let val = a.val.as_deref().map(load_labelled_dir).transpose()?;
    let mut ck_name = a.out.file_name().map(OsString::from).unwrap_or_default();
    ck_name.push(".inprogress");
    let checkpoint = a.out.with_file_name(ck_name);
    let outcome = train(
        &data,
        &config,
        variant,
        TrainOptions {
            validation: val.as_deref(),
            checkpoint: Some(checkpoint.clone()),
            init: None,
            progress: !a.quiet,
        },
    )?;
    write_atomic(&a.out, &[manifest_path], |tmp| outcome.params.save(tmp))?;
    for p in [manifest_path(&checkpoint), checkpoint] {
        let _ = std::fs::remove_file(p);
    }
    if let Some(log) = &a.log {
        write_atomic(log, &[], |tmp| write_log_csv(tmp, &outcome.log))?;
    }
    let last = outcome.log.last().expect("at least one epoch");
    println!(
        "trained {} for {} epochs: final loss {:.6}{}",
        variant.as_str(),
        config.epochs,
        last.mean_loss,
        last.val_iou.map_or(String::new(), |x| format!(", val iou {x:.4}"))
    );
    Ok(())
}

pub fn segment(a: &SegmentArgs) -> Result<()> {
    let params = ModelParams::load(&a.model)?;
    let wanted = if a.xyz_only { FeatureMode::XyzOnly } else { FeatureMode::XyzRgb };
    if params.config.feature_mode != wanted {
        return Err(Error::invalid(format!(
            "checkpoint was trained with {} features but the flags request {}",
            params.config.feature_mode.as_str(),
            wanted.as_str()
        )));
    }
    ensure_parent(&a.out)?;
    let cloud = load_ply(&a.input)?;
    let saliency = predict(&cloud, &params, a.seed)?;
    let labels = saliency.iter().map(|&s| u8::from(s >= IOU_THRESHOLD)).collect();
    let out = cloud.with_mask(labels)?.with_saliency(saliency)?;
    write_atomic(&a.out, &[], |tmp| save_ply(&out, tmp, None, PlyEncoding::BinaryLittleEndian))?;
    println!("segmented {} points into {}", out.len(), a.out.display());
    Ok(())
}

/// Pairs predicted and ground-truth files by name; any file without a
/// partner is an error that lists every unmatched name.
fn paired_reports(pred: &Path, gt: &Path, beta_sq: f64) -> Result<EvalReport> {
    let (p, g) = (ply_files(pred)?, ply_files(gt)?);
    let mut unmatched: Vec<String> = p.keys().filter(|k| !g.contains_key(*k)).map(|k| format!("{k} (no ground truth)")).collect();
    unmatched.extend(g.keys().filter(|k| !p.contains_key(*k)).map(|k| format!("{k} (no prediction)")));
    if !unmatched.is_empty() {
        return Err(Error::invalid(format!("unmatched files: {}", unmatched.join(", "))));
    }
    if p.is_empty() {
        return Err(Error::invalid(format!("no .ply files in {}", pred.display())));
    }
    let opts = EvalOptions { beta_sq };
    let samples = p
        .iter()
        .map(|(name, path)| {
            let pc = load_ply(path)?;
            let gc = load_ply(&g[name])?;
            let s = pc
                .saliency()
                .ok_or_else(|| Error::invalid(format!("{name}: prediction has no saliency property")))?;
            let mask = gc.require_mask(name)?;
            if s.len() != mask.len() {
                return Err(Error::shape("eval", format!("{name}: {} predictions for {} points", s.len(), mask.len())));
            }
            evaluate_sample(name, s, mask, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(samples, opts)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    ensure_parent(&a.report)?;
    ensure_parent(&a.curves)?;
    let report = paired_reports(&a.pred, &a.gt, a.beta_sq)?;
    write_text(&a.report, &report.to_text())?;
    write_atomic(&a.curves, &[], |tmp| write_curve_csv(tmp, &report.curve))?;
    println!(
        "{} samples: mae {:.6} f {:.6} e {:.6} iou {:.6}",
        report.samples.len(),
        report.mae,
        report.f_measure,
        report.e_measure,
        report.iou
    );
    Ok(())
}

pub fn curves(a: &CurvesArgs) -> Result<()> {
    ensure_parent(&a.out)?;
    let report = paired_reports(&a.pred, &a.gt, a.beta_sq)?;
    write_atomic(&a.out, &[], |tmp| write_curve_csv(tmp, &report.curve))?;
    println!("wrote {} curve rows to {}", report.curve.len(), a.out.display());
    Ok(())
}

/// Distinct random 8-bit colors, one per superpoint.
pub fn superpoint_colors(count: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let c: [u8; 3] = rng.gen();
        if seen.insert(c) {
            out.push(c.map(|v| v as f64 / 255.0));
        }
    }
    out
}

/// Partition of `cloud` as exported by `superpoints`.
pub fn superpoint_partition(cloud: &PointCloud, k: usize, gamma: Option<f64>, seed: u64, model: Option<&ModelParams>) -> Result<SuperpointPartition> {
    let (features, channels) = match model {
        Some(p) => (backbone_features(cloud, p)?, p.config.channels),
        None => (build_input_features(cloud).into_values(), INPUT_CHANNELS),
    };
    let gamma = match gamma {
        Some(g) => g,
        None => adaptive_gamma(&features, channels, DEFAULT_GAMMA_PERCENTILE, seed)?,
    };
    partition(cloud.positions(), &features, channels, k, gamma, seed)
}

pub fn superpoints(a: &SuperpointArgs) -> Result<()> {
    if let Some(g) = a.gamma {
        if !(g >= 0.0) {
            return Err(Error::invalid(format!("--gamma {g} must be >= 0")));
        }
    }
    let model = a.model.as_deref().map(ModelParams::load).transpose()?;
    ensure_parent(&a.out)?;
    let cloud = load_ply(&a.input)?;
    let part = superpoint_partition(&cloud, a.k, a.gamma, a.seed, model.as_ref())?;
    let palette = superpoint_colors(part.len(), sample_seed(a.seed, part.len()));
    let colors: Vec<[f64; 3]> = part.sp_id_of_point().iter().map(|&s| palette[s as usize]).collect();
    write_atomic(&a.out, &[], |tmp| save_ply(&cloud, tmp, Some(&colors), PlyEncoding::BinaryLittleEndian))?;
    println!("{} points in {} superpoints", cloud.len(), part.len());
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let corrupt = match &a.corrupt {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Error::invalid(format!("unknown op '{name}'")))?),
        None => None,
    };
    let outcomes = run_suite(corrupt)?;
    let mut failed = Vec::new();
    for c in &outcomes {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<20} max_rel_error {:.3e}  checked {:>5}  skipped {:>4}  {verdict}",
            c.name, c.report.max_rel_error, c.report.checked, c.report.skipped
        );
        if !c.passed() {
            failed.push(c.name.as_str());
        }
    }
    if failed.is_empty() {
        println!("all {} checks within {TOLERANCE:e}", outcomes.len());
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient check failed for: {}", failed.join(", "))))
    }
}
