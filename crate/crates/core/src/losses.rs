//! Pull/push class-agnostic loss, cross-entropy and their combination.
//!
//! Area means and the background mean are computed inside the graph, so
//! gradients flow through them.

use crate::ad::{Graph, Tensor, Var};
use crate::model::ForwardTrace;
use crate::spatial::LocalAreaSet;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub ce_weight: f64,
    pub agn_weight: f64,
    /// Attach the class-agnostic loss to enhanced features instead of
    /// backbone features.
    pub agn_on_enhanced: bool,
    /// Feed row-normalized features to the class-agnostic loss, so its
    /// margins act on feature directions and cannot be met by rescaling.
    pub agn_normalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.2,
            ce_weight: 1.0,
            agn_weight: 1.0,
            agn_on_enhanced: false,
            agn_normalize: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::invalid(format!(
                "margins must be >= 0 (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        if !self.ce_weight.is_finite() || !self.agn_weight.is_finite() {
            return Err(Error::invalid("loss weights must be finite"));
        }
        Ok(())
    }
}

/// Flattened area membership: rows, area id per row and the per-row weight
/// `1 / (Z · |area|)`.
fn flatten(op: &'static str, areas: &LocalAreaSet, rows: usize) -> Result<(Vec<u32>, Vec<u32>, Vec<f64>)> {
    if areas.areas.is_empty() {
        return Err(Error::invalid(format!("{op}: empty area set")));
    }
    let z = areas.areas.len() as f64;
    let mut members = Vec::new();
    let mut ids = Vec::new();
    let mut weights = Vec::new();
    for (i, area) in areas.areas.iter().enumerate() {
        if area.is_empty() {
            return Err(Error::invalid(format!("{op}: area {i} is empty")));
        }
        if let Some(&bad) = area.iter().find(|&&r| r as usize >= rows) {
            return Err(Error::shape(op, format!("area {i} references row {bad} of {rows}")));
        }
        let w = 1.0 / (z * area.len() as f64);
        members.extend_from_slice(area);
        ids.extend(std::iter::repeat(i as u32).take(area.len()));
        weights.extend(std::iter::repeat(w).take(area.len()));
    }
    Ok((members, ids, weights))
}

fn weighted_total(g: &mut Graph, per_row: Var, weights: Vec<f64>) -> Result<Var> {
    let n = weights.len();
    let w = g.constant(Tensor::new(vec![n], weights)?);
    let p = g.mul(per_row, w)?;
    Ok(g.sum_all(p))
}

/// `(1/Z) Σᵢ (1/|𝒩ᵢ|) Σ_{j∈𝒩ᵢ} [‖f_j − y_i‖ − α]₊²` with `y_i` the area mean.
pub fn pull_loss(g: &mut Graph, f: Var, areas: &LocalAreaSet, alpha: f64) -> Result<Var> {
    let (members, ids, weights) = flatten("pull_loss", areas, g.value(f).rows())?;
    let x = g.gather_rows(f, &members)?;
    let means = g.scatter_mean_rows(x, &ids, areas.areas.len())?;
    let y = g.gather_rows(means, &ids)?;
    let d = g.sub(x, y)?;
    let n = g.l2_norm_rows(d)?;
    let m = g.add_scalar(n, -alpha);
    let h = g.hinge(m);
    let s = g.square(h);
    weighted_total(g, s, weights)
}

/// `(1/Z) Σᵢ (1/|𝒩ᵢ|) Σ_{j∈𝒩ᵢ} [2β − ‖f_j − b‖]₊²` with `b` the background
/// mean; zero when there is no background.
pub fn push_loss(g: &mut Graph, f: Var, areas: &LocalAreaSet, beta: f64) -> Result<Var> {
    let (members, _, weights) = flatten("push_loss", areas, g.value(f).rows())?;
    if areas.background.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let rows = g.value(f).rows();
    if let Some(&bad) = areas.background.iter().find(|&&r| r as usize >= rows) {
        return Err(Error::shape("push_loss", format!("background references row {bad} of {rows}")));
    }
    let bg = g.gather_rows(f, &areas.background)?;
    let b = g.mean_rows(bg)?;
    let x = g.gather_rows(f, &members)?;
    let d = g.sub(x, b)?;
    let n = g.l2_norm_rows(d)?;
    let neg = g.scalar_mul(n, -1.0);
    let m = g.add_scalar(neg, 2.0 * beta);
    let h = g.hinge(m);
    let s = g.square(h);
    weighted_total(g, s, weights)
}

pub fn agnostic_loss(g: &mut Graph, f: Var, areas: &LocalAreaSet, config: &LossConfig) -> Result<Var> {
    let pull = pull_loss(g, f, areas, config.alpha)?;
    let push = push_loss(g, f, areas, config.beta)?;
    g.add(pull, push)
}

/// Mean over rows of `−log softmax(logits)[class]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, mask: &[u8]) -> Result<Var> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(Error::shape("cross_entropy", format!("logits must be N×2, got {shape:?}")));
    }
    if shape[0] != mask.len() || mask.is_empty() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} logit rows, {} mask values", shape[0], mask.len()),
        ));
    }
    let mut onehot = vec![0.0; 2 * mask.len()];
    for (i, &m) in mask.iter().enumerate() {
        onehot[2 * i + usize::from(m == 1)] = 1.0;
    }
    let ls = g.log_softmax_rows(logits)?;
    let oh = g.constant(Tensor::matrix(mask.len(), 2, onehot)?);
    let picked = g.mul(ls, oh)?;
    let total = g.sum_all(picked);
    Ok(g.scalar_mul(total, -1.0 / mask.len() as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    /// Absent when its weight is zero or no areas were supplied.
    pub agn: Option<Var>,
}

/// `ce_weight · L_ce + agn_weight · L_agn`. Cross-entropy covers every input
/// point; the class-agnostic term uses `areas`, indexed into the
/// voxel-reduced rows of `trace`.
pub fn final_loss(
    g: &mut Graph,
    trace: &ForwardTrace,
    mask: &[u8],
    areas: Option<&LocalAreaSet>,
    config: &LossConfig,
) -> Result<LossTerms> {
    config.validate()?;
    let ce = cross_entropy(g, trace.logits, mask)?;
    let mut total = g.scalar_mul(ce, config.ce_weight);
    let mut agn = None;
    if let (Some(areas), true) = (areas, config.agn_weight != 0.0) {
        let mut f = if config.agn_on_enhanced { trace.enhanced } else { trace.features };
        if config.agn_normalize {
            f = g.normalize_rows(f)?;
        }
        let a = agnostic_loss(g, f, areas, config)?;
        let weighted = g.scalar_mul(a, config.agn_weight);
        total = g.add(total, weighted)?;
        agn = Some(a);
    }
    Ok(LossTerms { total, ce, agn })
}
