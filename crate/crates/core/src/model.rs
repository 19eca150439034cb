//! Per-point feature extractor, superpoint-point cross attention with a
//! residual inverse map, and the two-class prediction head.
//!
//! The extractor is a shared per-point MLP standing in for a sparse 3D CNN.
//! It runs on the voxel-reduced cloud; logits are gathered back to every
//! input point at the end.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ad::{Graph, Tensor, Var};
use crate::pcio::{build_input_features_with, FeatureMode, PointCloud, INPUT_CHANNELS};
use crate::spatial::{voxelize, VoxelGrid, DEFAULT_VOXEL_SHAPE};
use crate::superpoint::{self, SuperpointPartition, DEFAULT_GAMMA_PERCENTILE, DEFAULT_K};
use crate::{Error, Result};

const MANIFEST_FORMAT: &str = "geosal-checkpoint 1";
pub const DEFAULT_COORD_SCALE: f64 = 0.2;

/// How backbone features are refined before the head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Enhancement {
    /// Head reads backbone features directly; no partition is computed.
    None,
    /// `G = Inv(pool(F)) + F`.
    PoolOnly,
    /// `G = Inv(CrossAttention(pool(F), F)) + F`.
    #[default]
    Attention,
}

impl Enhancement {
    pub fn as_str(self) -> &'static str {
        match self {
            Enhancement::None => "none",
            Enhancement::PoolOnly => "pool",
            Enhancement::Attention => "attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Enhancement::None),
            "pool" => Ok(Enhancement::PoolOnly),
            "attention" => Ok(Enhancement::Attention),
            other => Err(Error::invalid(format!("unknown enhancement '{other}'"))),
        }
    }
}

/// Partition threshold: fixed, or a percentile of sampled feature distances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gamma {
    Fixed(f64),
    Percentile(f64),
}

impl Default for Gamma {
    fn default() -> Self {
        Gamma::Percentile(DEFAULT_GAMMA_PERCENTILE)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub layers: usize,
    pub feature_mode: FeatureMode,
    /// Multiplier on the raw-xyz input columns. Translated scenes put raw
    /// coordinates near 10 while every other channel stays within [0, 1].
    pub coord_scale: f64,
    pub voxel_shape: [usize; 3],
    pub k: usize,
    pub gamma: Gamma,
    pub enhancement: Enhancement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            layers: 3,
            feature_mode: FeatureMode::XyzRgb,
            coord_scale: DEFAULT_COORD_SCALE,
            voxel_shape: DEFAULT_VOXEL_SHAPE,
            k: DEFAULT_K,
            gamma: Gamma::default(),
            enhancement: Enhancement::Attention,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.layers == 0 || self.k == 0 {
            return Err(Error::invalid("channels, layers and k must be at least 1"));
        }
        if !(self.coord_scale > 0.0) || !self.coord_scale.is_finite() {
            return Err(Error::invalid(format!("coord_scale {} must be positive", self.coord_scale)));
        }
        if self.voxel_shape.iter().any(|&s| s == 0) {
            return Err(Error::invalid(format!("voxel shape {:?} has a zero axis", self.voxel_shape)));
        }
        match self.gamma {
            Gamma::Fixed(g) if !(g >= 0.0) => Err(Error::invalid(format!("gamma {g} must be >= 0"))),
            Gamma::Percentile(p) if !(0.0..=1.0).contains(&p) => {
                Err(Error::invalid(format!("gamma percentile {p} must lie in [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Named learnable arrays plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    params: Vec<(String, Tensor)>,
}

fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let c = config.channels;
    let mut out = Vec::new();
    for l in 0..config.layers {
        let fan_in = if l == 0 { INPUT_CHANNELS } else { c };
        out.push((format!("extractor.{l}.weight"), vec![fan_in, c]));
        out.push((format!("extractor.{l}.bias"), vec![1, c]));
    }
    for name in ["wq", "wk", "wv", "wo"] {
        out.push((format!("attn.{name}"), vec![c, c]));
    }
    out.push(("head.weight".into(), vec![c, 2]));
    out.push(("head.bias".into(), vec![1, 2]));
    out
}

impl ModelParams {
    /// He-normal extractor weights, `N(0, 1/C)` attention projections and
    /// head, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_shapes(&config)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let std = if name.ends_with("bias") {
                    0.0
                } else if name.starts_with("extractor") {
                    (2.0 / shape[0] as f64).sqrt()
                } else {
                    (1.0 / shape[0] as f64).sqrt()
                };
                let data = if std == 0.0 {
                    vec![0.0; n]
                } else {
                    let dist = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                };
                Ok((name, Tensor::new(shape, data)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, params })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Writes raw little-endian f64 values to `path` and a text manifest to
    /// `path` + `.manifest`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut manifest = format!("format {MANIFEST_FORMAT}\n");
        let c = &self.config;
        let gamma = match c.gamma {
            Gamma::Fixed(g) => format!("fixed {g}"),
            Gamma::Percentile(p) => format!("percentile {p}"),
        };
        let v = c.voxel_shape;
        for (k, val) in [
            ("channels", c.channels.to_string()),
            ("layers", c.layers.to_string()),
            ("feature_mode", c.feature_mode.as_str().to_string()),
            ("coord_scale", format!("{:?}", c.coord_scale)),
            ("voxel_shape", format!("{}x{}x{}", v[0], v[1], v[2])),
            ("k", c.k.to_string()),
            ("gamma", gamma),
            ("enhancement", c.enhancement.as_str().to_string()),
        ] {
            let _ = writeln!(manifest, "config {k} {val}");
        }
        let mut bytes = Vec::with_capacity(self.numel() * 8);
        for (name, t) in &self.params {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(manifest, "param {name} {} {}", shape.join("x"), bytes.len());
            for x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        let mpath = manifest_path(path);
        std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mpath = manifest_path(path);
        let ctx = mpath.display().to_string();
        let file = std::fs::File::open(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;

        let mut config = ModelConfig::default();
        let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let mut saw_format = false;
        for (ln, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&mpath, e))?;
            let bad = |m: &str| Error::parse(&ctx, format!("line {}: {m}", ln + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                [] => {}
                ["format", rest @ ..] => {
                    if rest.join(" ") != MANIFEST_FORMAT {
                        return Err(bad("unsupported format"));
                    }
                    saw_format = true;
                }
                ["config", key, vals @ ..] => {
                    let val = vals.first().ok_or_else(|| bad("missing value"))?;
                    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
                    match *key {
                        "channels" => config.channels = num(val)?,
                        "layers" => config.layers = num(val)?,
                        "k" => config.k = num(val)?,
                        "feature_mode" => config.feature_mode = FeatureMode::parse(val)?,
                        "coord_scale" => config.coord_scale = val.parse().map_err(|_| bad("bad coord_scale"))?,
                        "enhancement" => config.enhancement = Enhancement::parse(val)?,
                        "voxel_shape" => {
                            let d: Vec<usize> = val.split('x').map(num).collect::<Result<_>>()?;
                            config.voxel_shape = d.try_into().map_err(|_| bad("voxel shape needs 3 axes"))?;
                        }
                        "gamma" => {
                            let x: f64 = vals
                                .get(1)
                                .and_then(|s| s.parse().ok())
                                .ok_or_else(|| bad("bad gamma"))?;
                            config.gamma = match *val {
                                "fixed" => Gamma::Fixed(x),
                                "percentile" => Gamma::Percentile(x),
                                _ => return Err(bad("bad gamma kind")),
                            };
                        }
                        other => return Err(bad(&format!("unknown config key '{other}'"))),
                    }
                }
                ["param", name, shape, offset] => {
                    let shape: Vec<usize> = shape
                        .split('x')
                        .map(|s| s.parse().map_err(|_| bad("bad shape")))
                        .collect::<Result<_>>()?;
                    let offset = offset.parse().map_err(|_| bad("bad offset"))?;
                    entries.push((name.to_string(), shape, offset));
                }
                _ => return Err(bad("unrecognised line")),
            }
        }
        if !saw_format {
            return Err(Error::parse(&ctx, "missing format line"));
        }
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.len() != entries.len() {
            return Err(Error::parse(&ctx, format!("expected {} params, found {}", expected.len(), entries.len())));
        }
        let mut params = Vec::with_capacity(entries.len());
        for ((ename, eshape), (name, shape, offset)) in expected.into_iter().zip(entries) {
            if ename != name || eshape != shape {
                return Err(Error::parse(&ctx, format!("param {name} {shape:?} where {ename} {eshape:?} was expected")));
            }
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| Error::parse(path.display().to_string(), format!("{name} runs past end of file")))?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { config, params })
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Parameters bound as leaves of one graph.
#[derive(Clone, Debug)]
pub struct ParamVars {
    /// In [`ModelParams`] order.
    pub all: Vec<Var>,
    pub extractor: Vec<(Var, Var)>,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl ParamVars {
    pub fn bind(g: &mut Graph, params: &ModelParams, requires_grad: bool) -> Self {
        let all: Vec<Var> = params.params.iter().map(|(_, t)| g.leaf(t.clone(), requires_grad)).collect();
        Self::from_leaves(&params.config, all)
    }

    /// Wraps leaves created in [`ModelParams`] order.
    pub fn from_leaves(config: &ModelConfig, all: Vec<Var>) -> Self {
        let layers = config.layers;
        let extractor = (0..layers).map(|l| (all[2 * l], all[2 * l + 1])).collect();
        let base = 2 * layers;
        Self {
            extractor,
            wq: all[base],
            wk: all[base + 1],
            wv: all[base + 2],
            wo: all[base + 3],
            head_w: all[base + 4],
            head_b: all[base + 5],
            all,
        }
    }
}

fn check_cols(g: &Graph, op: &'static str, v: Var, cols: usize) -> Result<()> {
    let s = g.value(v).shape();
    if s.len() != 2 || s[1] != cols {
        return Err(Error::shape(op, format!("expected {cols} columns, got shape {s:?}")));
    }
    Ok(())
}

/// Shared per-point MLP: `relu(x·W + b)` per layer.
pub fn extract_features(g: &mut Graph, input: Var, vars: &ParamVars) -> Result<Var> {
    check_cols(g, "extract_features", input, INPUT_CHANNELS)?;
    let mut h = input;
    for &(w, b) in &vars.extractor {
        let z = g.matmul(h, w)?;
        let z = g.add(z, b)?;
        h = g.relu(z);
    }
    Ok(h)
}

/// Single-head `softmax(U·Wq (F·Wk)ᵀ / √C) (F·Wv) · Wo`.
pub fn cross_attention(g: &mut Graph, u: Var, f: Var, vars: &ParamVars) -> Result<Var> {
    let c = g.value(vars.wq).rows();
    check_cols(g, "cross_attention", u, c)?;
    check_cols(g, "cross_attention", f, c)?;
    let q = g.matmul(u, vars.wq)?;
    let k = g.matmul(f, vars.wk)?;
    let v = g.matmul(f, vars.wv)?;
    let s = g.matmul_nt(q, k, 1.0 / (c as f64).sqrt())?;
    let a = g.row_softmax(s)?;
    let o = g.matmul(a, v)?;
    g.matmul(o, vars.wo)
}

/// Pooled and attended superpoint features and the enhanced point features.
#[derive(Clone, Copy, Debug)]
pub struct Enhanced {
    pub pooled: Var,
    pub attended: Var,
    pub enhanced: Var,
}

/// `G = Inv(CrossAttention(pool(F), F)) + F`.
pub fn geometry_enhance(g: &mut Graph, f: Var, part: &SuperpointPartition, vars: &ParamVars) -> Result<Enhanced> {
    let n = g.value(f).rows();
    if part.point_count() != n {
        return Err(Error::shape(
            "geometry_enhance",
            format!("partition covers {} points, features have {n} rows", part.point_count()),
        ));
    }
    let pooled = g.scatter_mean_rows(f, part.sp_id_of_point(), part.len())?;
    let attended = cross_attention(g, pooled, f, vars)?;
    let back = g.gather_rows(attended, part.sp_id_of_point())?;
    let enhanced = g.add(back, f)?;
    Ok(Enhanced {
        pooled,
        attended,
        enhanced,
    })
}

fn pool_enhance(g: &mut Graph, f: Var, part: &SuperpointPartition) -> Result<Enhanced> {
    let pooled = g.scatter_mean_rows(f, part.sp_id_of_point(), part.len())?;
    let back = g.gather_rows(pooled, part.sp_id_of_point())?;
    let enhanced = g.add(back, f)?;
    Ok(Enhanced {
        pooled,
        attended: pooled,
        enhanced,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    /// Partition of the voxel-reduced points to use instead of computing one.
    pub partition: Option<&'a SuperpointPartition>,
    pub seed: u64,
    pub requires_grad: bool,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            partition: None,
            seed: 0,
            requires_grad: false,
        }
    }
}

/// Everything one forward pass produced. Row counts of `features`,
/// `enhanced` and `reduced` refer to voxel-reduced points; `logits` and
/// `saliency` cover every input point.
pub struct ForwardTrace {
    pub grid: VoxelGrid,
    pub reduced: PointCloud,
    pub partition: Option<SuperpointPartition>,
    pub features: Var,
    pub pooled: Option<Var>,
    pub attended: Option<Var>,
    pub enhanced: Var,
    pub voxel_logits: Var,
    pub logits: Var,
    pub saliency: Vec<f64>,
}

/// Foreground probability of each two-column logit row.
pub fn foreground_probability(logits: &[f64]) -> Vec<f64> {
    logits
        .chunks_exact(2)
        .map(|l| {
            let m = l[0].max(l[1]);
            let (e0, e1) = ((l[0] - m).exp(), (l[1] - m).exp());
            e1 / (e0 + e1)
        })
        .collect()
}

/// A forward pass together with the graph that recorded it.
pub struct Pass {
    pub graph: Graph,
    pub vars: ParamVars,
    pub trace: ForwardTrace,
}

pub fn forward(cloud: &PointCloud, params: &ModelParams, opts: ForwardOptions<'_>) -> Result<Pass> {
    let mut graph = Graph::new();
    let vars = ParamVars::bind(&mut graph, params, opts.requires_grad);
    let trace = forward_on(&mut graph, &vars, &params.config, cloud, opts)?;
    Ok(Pass { graph, vars, trace })
}

/// Records a forward pass on `g` using already-bound parameters.
pub fn forward_on(
    g: &mut Graph,
    vars: &ParamVars,
    cfg: &ModelConfig,
    cloud: &PointCloud,
    opts: ForwardOptions<'_>,
) -> Result<ForwardTrace> {
    let (grid, reduced) = voxelize(cloud, cfg.voxel_shape)?;
    let input = model_input(&reduced, cfg)?;
    let rows = input.rows();
    let x = g.constant(input);
    let features = extract_features(g, x, vars)?;

    let mut partition = None;
    let mut enh = None;
    if cfg.enhancement != Enhancement::None {
        let part = match opts.partition {
            Some(p) => {
                if p.point_count() != rows {
                    return Err(Error::shape(
                        "forward",
                        format!("partition covers {} points, reduced cloud has {rows}", p.point_count()),
                    ));
                }
                p.clone()
            }
            None => {
                let fv = g.value(features).data();
                let c = cfg.channels;
                let gamma = match cfg.gamma {
                    Gamma::Fixed(x) => x,
                    Gamma::Percentile(p) => superpoint::adaptive_gamma(fv, c, p, opts.seed)?,
                };
                superpoint::partition(reduced.positions(), fv, c, cfg.k, gamma, opts.seed)?
            }
        };
        enh = Some(match cfg.enhancement {
            Enhancement::PoolOnly => pool_enhance(g, features, &part)?,
            _ => geometry_enhance(g, features, &part, vars)?,
        });
        partition = Some(part);
    }
    let enhanced = enh.map_or(features, |e| e.enhanced);
    let z = g.matmul(enhanced, vars.head_w)?;
    let voxel_logits = g.add(z, vars.head_b)?;
    let logits = g.gather_rows(voxel_logits, &grid.voxel_of_point)?;
    let saliency = foreground_probability(g.value(logits).data());
    Ok(ForwardTrace {
        grid,
        reduced,
        partition,
        features,
        pooled: enh.map(|e| e.pooled),
        attended: enh.filter(|_| cfg.enhancement == Enhancement::Attention).map(|e| e.attended),
        enhanced,
        voxel_logits,
        logits,
        saliency,
    })
}

/// Per-point foreground probability for every input point.
pub fn predict(cloud: &PointCloud, params: &ModelParams, seed: u64) -> Result<Vec<f64>> {
    Ok(forward(
        cloud,
        params,
        ForwardOptions {
            seed,
            ..Default::default()
        },
    )?
    .trace
    .saliency)
}

/// Input features with the raw-xyz columns scaled, as the extractor sees them.
pub fn model_input(cloud: &PointCloud, cfg: &ModelConfig) -> Result<Tensor> {
    let input = build_input_features_with(cloud, cfg.feature_mode);
    let rows = input.rows();
    let mut values = input.into_values();
    for row in values.chunks_exact_mut(INPUT_CHANNELS) {
        for v in &mut row[..3] {
            *v *= cfg.coord_scale;
        }
    }
    Tensor::matrix(rows, INPUT_CHANNELS, values)
}

/// Backbone features of the voxel-reduced cloud, without a graph.
pub fn point_features(cloud: &PointCloud, params: &ModelParams) -> Result<(VoxelGrid, PointCloud, Vec<f64>)> {
    let (grid, reduced) = voxelize(cloud, params.config.voxel_shape)?;
    let values = backbone_features(&reduced, params)?;
    Ok((grid, reduced, values))
}

/// Backbone features of every point of `cloud` as given, without
/// voxelization.
pub fn backbone_features(cloud: &PointCloud, params: &ModelParams) -> Result<Vec<f64>> {
    let input = model_input(cloud, &params.config)?;
    let mut g = Graph::new();
    let vars = ParamVars::bind(&mut g, params, false);
    let x = g.constant(input);
    let f = extract_features(&mut g, x, &vars)?;
    Ok(g.value(f).data().to_vec())
}

#[cfg(test)]
mod tests;
