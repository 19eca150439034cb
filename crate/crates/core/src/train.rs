//! Adam, augmentation, the training loop, and the ablation and density
//! harnesses.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::losses::{final_loss, LossConfig};
use crate::metrics::{aggregate, evaluate_sample, EvalOptions, EvalReport};
use crate::model::{forward, predict, Enhancement, ForwardOptions, Gamma, ModelConfig, ModelParams, DEFAULT_COORD_SCALE};
use crate::pcio::{FeatureMode, PointCloud};
use crate::spatial::{generate_local_areas, DEFAULT_VOXEL_SHAPE};
use crate::superpoint::{DEFAULT_GAMMA_PERCENTILE, DEFAULT_K};
use crate::{Error, Result};

/// Training hyperparameters. Every field has a default, so a config file
/// only lists overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Fraction of `lr` reached at the last optimizer step under cosine
    /// decay; 1 keeps the rate constant.
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub translation_noise_std: [f64; 3],
    pub voxel_shape: [usize; 3],
    pub k: usize,
    /// Fixed partition threshold; when absent the percentile rule is used.
    pub gamma: Option<f64>,
    pub gamma_percentile: f64,
    pub seed: u64,
    pub channels: usize,
    pub layers: usize,
    pub xyz_only: bool,
    /// Multiplier on the raw-xyz input columns.
    pub coord_scale: f64,
    pub alpha: f64,
    pub beta: f64,
    pub ce_weight: f64,
    pub agn_weight: f64,
    pub agn_on_enhanced: bool,
    pub agn_normalize: bool,
    pub area_count: usize,
    pub area_size: usize,
    /// Samples whose gradients are summed before each optimizer step.
    pub accumulate: usize,
    /// Validate every this many epochs (and always after the last one);
    /// 0 validates only after the last epoch.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_floor: 0.05,
            weight_decay: 1e-4,
            epochs: 60,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            translation_noise_std: [3.0; 3],
            voxel_shape: DEFAULT_VOXEL_SHAPE,
            k: DEFAULT_K,
            gamma: None,
            gamma_percentile: DEFAULT_GAMMA_PERCENTILE,
            seed: 0,
            channels: 32,
            layers: 3,
            xyz_only: false,
            coord_scale: DEFAULT_COORD_SCALE,
            alpha: 0.01,
            beta: 0.2,
            ce_weight: 1.0,
            agn_weight: 1.0,
            agn_on_enhanced: false,
            agn_normalize: true,
            area_count: 16,
            area_size: 32,
            accumulate: 1,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::invalid(format!("lr_floor {} must lie in [0, 1]", self.lr_floor)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.translation_noise_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("translation stds must be >= 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam betas must lie in [0, 1) and eps must be positive"));
        }
        if self.accumulate == 0 || self.area_count == 0 || self.area_size == 0 {
            return Err(Error::invalid("accumulate, area_count and area_size must be at least 1"));
        }
        self.model_config(Variant::Full).validate()?;
        self.loss_config(Variant::Full).validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::parse("train config", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self, variant: Variant) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            layers: self.layers,
            feature_mode: if self.xyz_only { FeatureMode::XyzOnly } else { FeatureMode::XyzRgb },
            coord_scale: self.coord_scale,
            voxel_shape: self.voxel_shape,
            k: self.k,
            gamma: self.gamma.map_or(Gamma::Percentile(self.gamma_percentile), Gamma::Fixed),
            enhancement: variant.enhancement(),
        }
    }

    pub fn loss_config(&self, variant: Variant) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            ce_weight: self.ce_weight,
            agn_weight: if variant.uses_agnostic_loss() { self.agn_weight } else { 0.0 },
            agn_on_enhanced: self.agn_on_enhanced,
            agn_normalize: self.agn_normalize,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Rungs of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    SuperpointPool,
    GeometryEnhanced,
    Full,
}

impl Variant {
    pub const LADDER: [Variant; 4] = [
        Variant::Baseline,
        Variant::SuperpointPool,
        Variant::GeometryEnhanced,
        Variant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::SuperpointPool => "+SP",
            Variant::GeometryEnhanced => "+SP+GE",
            Variant::Full => "+SP+GE+CA",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::LADDER
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .or(match s {
                "full" => Some(Variant::Full),
                "sp" => Some(Variant::SuperpointPool),
                "sp-ge" => Some(Variant::GeometryEnhanced),
                _ => None,
            })
            .ok_or_else(|| Error::invalid(format!("unknown variant '{s}'")))
    }

    pub fn enhancement(self) -> Enhancement {
        match self {
            Variant::Baseline => Enhancement::None,
            Variant::SuperpointPool => Enhancement::PoolOnly,
            Variant::GeometryEnhanced | Variant::Full => Enhancement::Attention,
        }
    }

    pub fn uses_agnostic_loss(self) -> bool {
        self == Variant::Full
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// One Adam update with decoupled weight decay:
/// `p ← p − lr·(m̂ / (√v̂ + ε) + wd·p)`.
pub fn adam_step(params: &mut ModelParams, grads: &[Vec<f64>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape("adam_step", format!("{} gradients for {} params", grads.len(), params.len())));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if g.len() != p.numel() {
            return Err(Error::shape("adam_step", format!("{name}: {} gradient values for {}", g.len(), p.numel())));
        }
        if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient {bad} for parameter {name}")));
        }
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            *x -= cfg.lr * (update + cfg.weight_decay * *x);
        }
    }
    Ok(())
}

/// A per-axis Gaussian offset with the given standard deviations.
pub fn sample_translation(std: [f64; 3], rng: &mut impl Rng) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for a in 0..3 {
        if !(std[a] >= 0.0) {
            return Err(Error::invalid(format!("translation std {} must be >= 0", std[a])));
        }
        if std[a] > 0.0 {
            out[a] = Normal::new(0.0, std[a]).expect("valid std").sample(rng);
        }
    }
    Ok(out)
}

/// Adds one random global translation to every point.
pub fn augment(cloud: &PointCloud, std: [f64; 3], seed: u64) -> Result<PointCloud> {
    let offset = sample_translation(std, &mut ChaCha8Rng::seed_from_u64(seed))?;
    translate(cloud, offset)
}

pub fn translate(cloud: &PointCloud, offset: [f64; 3]) -> Result<PointCloud> {
    if offset == [0.0; 3] {
        return Ok(cloud.clone());
    }
    let moved = cloud
        .positions()
        .iter()
        .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
        .collect();
    cloud.clone().with_positions(moved)
}

/// Partition and local-area seed of a training sample; fixed across epochs.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Loss and gradients of one sample, in [`ModelParams`] order.
pub struct SampleGrad {
    pub loss: f64,
    pub ce: f64,
    pub agn: Option<f64>,
    pub grads: Vec<Vec<f64>>,
}

pub fn sample_gradient(
    params: &ModelParams,
    cloud: &PointCloud,
    loss_cfg: &LossConfig,
    area_count: usize,
    area_size: usize,
    seed: u64,
) -> Result<SampleGrad> {
    let mask = cloud.require_mask("training")?.to_vec();
    let mut pass = forward(
        cloud,
        params,
        ForwardOptions {
            partition: None,
            seed,
            requires_grad: true,
        },
    )?;
    let areas = if loss_cfg.agn_weight != 0.0 {
        match generate_local_areas(&pass.trace.reduced, area_count, area_size, seed) {
            Ok(a) => Some(a),
            Err(Error::InvalidArgument(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let terms = final_loss(&mut pass.graph, &pass.trace, &mask, areas.as_ref(), loss_cfg)?;
    let loss = pass.graph.value(terms.total).item();
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("training loss became {loss}")));
    }
    pass.graph.backward(terms.total)?;
    let grads = pass
        .vars
        .all
        .iter()
        .map(|&v| {
            pass.graph
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; pass.graph.value(v).numel()])
        })
        .collect();
    Ok(SampleGrad {
        loss,
        ce: pass.graph.value(terms.ce).item(),
        agn: terms.agn.map(|a| pass.graph.value(a).item()),
        grads,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_iou: Option<f64>,
    pub val_mae: Option<f64>,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    /// Loss of every optimizer-visible sample in order.
    pub step_losses: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    pub validation: Option<&'a [PointCloud]>,
    /// Overwritten with the latest parameters after every epoch.
    pub checkpoint: Option<PathBuf>,
    pub init: Option<ModelParams>,
    pub progress: bool,
}

pub fn train(dataset: &[PointCloud], config: &TrainConfig, variant: Variant, opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for (i, c) in dataset.iter().enumerate() {
        c.require_mask(&format!("training sample {i}"))?;
    }
    let mut params = match opts.init {
        Some(p) => p,
        None => ModelParams::init(config.model_config(variant), config.seed)?,
    };
    let loss_cfg = config.loss_config(variant);
    let mut adam = config.adam();
    let mut state = AdamState::default();
    let total_steps = config.epochs * dataset.len().div_ceil(config.accumulate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA076_1D64_78BD_642F);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::new();
    let mut acc: Option<Vec<Vec<f64>>> = None;
    let mut pending = 0;
    let mut last_good: Option<PathBuf> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let offset = sample_translation(config.translation_noise_std, &mut rng)?;
            let cloud = translate(&dataset[i], offset)?;
            let seed = sample_seed(config.seed, i);
            let sg = sample_gradient(&params, &cloud, &loss_cfg, config.area_count, config.area_size, seed)
                .map_err(|e| diverged(e, epoch, &last_good))?;
            total += sg.loss;
            step_losses.push(sg.loss);
            match &mut acc {
                None => acc = Some(sg.grads),
                Some(a) => a.iter_mut().zip(&sg.grads).for_each(|(a, g)| {
                    a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }),
            }
            pending += 1;
            if pending == config.accumulate {
                let g = acc.take().expect("accumulated");
                adam.lr = scheduled_lr(config, state.step, total_steps);
                adam_step(&mut params, &g, &mut state, &adam).map_err(|e| diverged(e, epoch, &last_good))?;
                pending = 0;
            }
        }
        let mean_loss = total / dataset.len() as f64;
        let validate = epoch == config.epochs || (config.val_every > 0 && epoch % config.val_every == 0);
        let (val_iou, val_mae) = match opts.validation.filter(|v| validate && !v.is_empty()) {
            Some(v) => {
                let r = evaluate(&params, v, config.seed)?;
                (Some(r.iou), Some(r.mae))
            }
            None => (None, None),
        };
        if let Some(path) = &opts.checkpoint {
            params.save(path)?;
            last_good = Some(path.clone());
        }
        if opts.progress {
            eprintln!(
                "epoch {epoch}/{} loss {mean_loss:.5}{}",
                config.epochs,
                val_iou.map_or(String::new(), |x| format!(" val_iou {x:.4}"))
            );
        }
        log.push(EpochLog {
            epoch,
            mean_loss,
            val_iou,
            val_mae,
        });
    }
    if pending > 0 {
        let g = acc.take().expect("accumulated");
        adam.lr = scheduled_lr(config, state.step, total_steps);
        adam_step(&mut params, &g, &mut state, &adam)?;
        if let Some(path) = &opts.checkpoint {
            params.save(path)?;
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        step_losses,
    })
}

/// Cosine decay from `lr` to `lr·lr_floor` over `total` optimizer steps.
pub fn scheduled_lr(config: &TrainConfig, step: u64, total: usize) -> f64 {
    let progress = if total > 1 { (step as f64 / (total - 1) as f64).min(1.0) } else { 1.0 };
    let floor = config.lr_floor;
    config.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

fn diverged(e: Error, epoch: usize, last_good: &Option<PathBuf>) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!(
            "{m} in epoch {epoch}; last good checkpoint: {}",
            last_good.as_ref().map_or("none".to_string(), |p| p.display().to_string())
        )),
        other => other,
    }
}

/// Writes `epoch,mean_loss,val_iou,val_mae` rows; missing values are empty.
pub fn write_log_csv(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["epoch", "mean_loss", "val_iou", "val_mae"]).map_err(io)?;
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    for r in log {
        w.write_record([r.epoch.to_string(), r.mean_loss.to_string(), opt(r.val_iou), opt(r.val_mae)])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Predicts every cloud and aggregates metrics; samples are named by index.
pub fn evaluate(params: &ModelParams, clouds: &[PointCloud], seed: u64) -> Result<EvalReport> {
    let samples = clouds
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let s = predict(c, params, sample_seed(seed, i))?;
            evaluate_sample(&format!("{i}"), &s, c.require_mask("evaluation")?, EvalOptions::default())
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(samples, EvalOptions::default())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub mae: f64,
    pub f_measure: f64,
    pub e_measure: f64,
    pub iou: f64,
    /// Per-seed test IoU, in seed order.
    pub seed_iou: Vec<f64>,
}

/// Trains every ladder rung under each seed and reports seed-mean test
/// scores in ladder order.
pub fn ablation_harness(
    train_set: &[PointCloud],
    test_set: &[PointCloud],
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    Variant::LADDER
        .into_iter()
        .map(|variant| {
            let reports = seeds
                .iter()
                .map(|&seed| {
                    let cfg = TrainConfig { seed, ..config.clone() };
                    let out = train(train_set, &cfg, variant, TrainOptions::default())?;
                    evaluate(&out.params, test_set, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ablation_row(variant, &reports))
        })
        .collect()
}

pub fn ablation_row(variant: Variant, reports: &[EvalReport]) -> AblationRow {
    let n = reports.len() as f64;
    let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    AblationRow {
        variant,
        mae: mean(|r| r.mae),
        f_measure: mean(|r| r.f_measure),
        e_measure: mean(|r| r.e_measure),
        iou: mean(|r| r.iou),
        seed_iou: reports.iter().map(|r| r.iou).collect(),
    }
}

pub fn write_ablation_csv(path: impl AsRef<Path>, rows: &[AblationRow]) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["variant", "mae", "f_measure", "e_measure", "iou"]).map_err(io)?;
    for r in rows {
        w.write_record([
            r.variant.as_str().to_string(),
            r.mae.to_string(),
            r.f_measure.to_string(),
            r.e_measure.to_string(),
            r.iou.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityRow {
    pub fraction: f64,
    pub mae: f64,
}

/// Uniform random subset of `round(fraction·N)` points (at least one), in
/// original order. A fraction of 1 returns the cloud unchanged.
pub fn subsample(cloud: &PointCloud, fraction: f64, seed: u64) -> Result<PointCloud> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} must lie in (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(cloud.clone());
    }
    let n = cloud.len();
    let keep = ((n as f64 * fraction).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    rows.sort_unstable();
    cloud.select(&rows)
}

/// Dataset-mean MAE of a fixed model on subsampled copies of each cloud.
pub fn density_harness(params: &ModelParams, dataset: &[PointCloud], factors: &[f64], seed: u64) -> Result<Vec<DensityRow>> {
    factors
        .iter()
        .map(|&f| {
            let clouds = dataset
                .iter()
                .enumerate()
                .map(|(i, c)| subsample(c, f, sample_seed(seed, i)))
                .collect::<Result<Vec<_>>>()?;
            Ok(DensityRow {
                fraction: f,
                mae: evaluate(params, &clouds, seed)?.mae,
            })
        })
        .collect()
}

pub fn write_density_csv(path: impl AsRef<Path>, rows: &[DensityRow]) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["fraction", "mae"]).map_err(io)?;
    for r in rows {
        w.write_record([r.fraction.to_string(), r.mae.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
