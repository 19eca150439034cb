//! Saliency evaluation: MAE, precision/recall, F-measure, E-measure, IoU
//! and threshold-swept curves.
//!
//! Conventions for empty denominators: precision with no positive
//! predictions is 0, recall with an empty ground truth is 1, IoU of two
//! empty masks is 1, F-measure with `β²·P + R = 0` is 0.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_BETA_SQ: f64 = 0.3;

/// Stabiliser in the alignment term of the E-measure.
pub const E_EPS: f64 = 1e-12;

/// Binarisation threshold for the scalar IoU.
pub const IOU_THRESHOLD: f64 = 0.5;

fn same_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("lengths {a} and {b} differ")));
    }
    if a == 0 {
        return Err(Error::shape(op, "empty input"));
    }
    Ok(())
}

pub fn mae(saliency: &[f64], gt: &[u8]) -> Result<f64> {
    same_len("mae", saliency.len(), gt.len())?;
    let s: f64 = saliency.iter().zip(gt).map(|(&p, &g)| (p - f64::from(g)).abs()).sum();
    Ok(s / saliency.len() as f64)
}

/// True/false positive and negative counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn of(pred: &[u8], gt: &[u8]) -> Result<Self> {
        same_len("confusion", pred.len(), gt.len())?;
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        let d = self.tp + self.fp;
        if d == 0 {
            0.0
        } else {
            self.tp as f64 / d as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let d = self.tp + self.fn_;
        if d == 0 {
            1.0
        } else {
            self.tp as f64 / d as f64
        }
    }

    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            self.tp as f64 / d as f64
        }
    }

    /// Enhanced alignment averaged over points. Only four (pred, gt) value
    /// pairs exist, so the per-point mean reduces to a weighted sum.
    pub fn e_measure(&self) -> f64 {
        let n = self.total() as f64;
        let gt_pos = self.tp + self.fn_;
        if gt_pos == 0 || gt_pos == self.total() {
            let wrong = if gt_pos == 0 { self.fp } else { self.fn_ };
            return 1.0 - wrong as f64 / n;
        }
        let mp = (self.tp + self.fp) as f64 / n;
        let mg = gt_pos as f64 / n;
        let score = |p: f64, g: f64| {
            let (a, b) = (p - mp, g - mg);
            let xi = 2.0 * a * b / (a * a + b * b + E_EPS);
            0.25 * (1.0 + xi) * (1.0 + xi)
        };
        (self.tp as f64 * score(1.0, 1.0)
            + self.fp as f64 * score(1.0, 0.0)
            + self.fn_ as f64 * score(0.0, 1.0)
            + self.tn as f64 * score(0.0, 0.0))
            / n
    }
}

pub fn precision_recall(pred: &[u8], gt: &[u8]) -> Result<(f64, f64)> {
    let c = Confusion::of(pred, gt)?;
    Ok((c.precision(), c.recall()))
}

/// `(1 + β²)·P·R / (β²·P + R)`.
pub fn f_measure(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let d = beta_sq * precision + recall;
    if d <= 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / d
    }
}

/// Bias-removed alignment of two binary masks; a constant ground truth falls
/// back to `1 − mean|pred − gt|`.
pub fn e_measure(pred: &[u8], gt: &[u8]) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.e_measure())
}

pub fn iou(pred: &[u8], gt: &[u8]) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.iou())
}

/// `saliency ≥ t` as a 0/1 mask.
pub fn binarize(saliency: &[f64], threshold: f64) -> Vec<u8> {
    saliency.iter().map(|&s| u8::from(s >= threshold)).collect()
}

/// `i/256` for `i = 1..=255`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=255).map(|i| i as f64 / 256.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub e_measure: f64,
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::invalid("threshold list is empty"));
    }
    if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::invalid("thresholds must lie in [0, 1]"));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("thresholds must be strictly increasing"));
    }
    Ok(())
}

/// Precision, recall, F and E of `saliency ≥ t` for each threshold.
pub fn threshold_sweep(saliency: &[f64], gt: &[u8], thresholds: &[f64], beta_sq: f64) -> Result<Vec<CurveRow>> {
    same_len("threshold_sweep", saliency.len(), gt.len())?;
    check_thresholds(thresholds)?;
    let mut pairs: Vec<(f64, bool)> = saliency.iter().zip(gt).map(|(&s, &g)| (s, g != 0)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // positives_below[i]: positives among the i smallest saliencies.
    let mut positives_below = Vec::with_capacity(pairs.len() + 1);
    positives_below.push(0u64);
    for &(_, g) in &pairs {
        positives_below.push(positives_below.last().unwrap() + u64::from(g));
    }
    let n = pairs.len() as u64;
    let gt_pos = *positives_below.last().unwrap();
    Ok(thresholds
        .iter()
        .map(|&t| {
            let below = pairs.partition_point(|p| p.0 < t);
            let tp = gt_pos - positives_below[below];
            let predicted = n - below as u64;
            let c = Confusion {
                tp,
                fp: predicted - tp,
                fn_: gt_pos - tp,
                tn: n - predicted - (gt_pos - tp),
            };
            let (p, r) = (c.precision(), c.recall());
            CurveRow {
                threshold: t,
                precision: p,
                recall: r,
                f_measure: f_measure(p, r, beta_sq),
                e_measure: c.e_measure(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleReport {
    pub name: String,
    pub mae: f64,
    /// Maximum over this sample's curve.
    pub f_measure: f64,
    /// Maximum over this sample's curve.
    pub e_measure: f64,
    pub iou: f64,
    pub curve: Vec<CurveRow>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub beta_sq: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            beta_sq: DEFAULT_BETA_SQ,
        }
    }
}

fn curve_max(curve: &[CurveRow], f: impl Fn(&CurveRow) -> f64) -> f64 {
    curve.iter().map(f).fold(0.0, f64::max)
}

pub fn evaluate_sample(name: &str, saliency: &[f64], gt: &[u8], options: EvalOptions) -> Result<SampleReport> {
    if let Some(s) = saliency.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::invalid(format!("{name}: saliency {s} outside [0, 1]")));
    }
    let curve = threshold_sweep(saliency, gt, &default_thresholds(), options.beta_sq)?;
    Ok(SampleReport {
        name: name.to_string(),
        mae: mae(saliency, gt)?,
        f_measure: curve_max(&curve, |r| r.f_measure),
        e_measure: curve_max(&curve, |r| r.e_measure),
        iou: iou(&binarize(saliency, IOU_THRESHOLD), gt)?,
        curve,
    })
}

/// Dataset-level scores. `mae` and `iou` are sample means; `f_measure` and
/// `e_measure` are maxima over the mean curve.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleReport>,
    pub mae: f64,
    pub f_measure: f64,
    pub e_measure: f64,
    pub iou: f64,
    pub beta_sq: f64,
    pub curve: Vec<CurveRow>,
}

pub fn aggregate(samples: Vec<SampleReport>, options: EvalOptions) -> Result<EvalReport> {
    let first = samples.first().ok_or_else(|| Error::invalid("cannot aggregate an empty dataset"))?;
    let t = first.curve.len();
    if let Some(s) = samples.iter().find(|s| s.curve.len() != t) {
        return Err(Error::shape("aggregate", format!("{} has {} curve rows, expected {t}", s.name, s.curve.len())));
    }
    let n = samples.len() as f64;
    let mean = |f: &dyn Fn(&SampleReport) -> f64| samples.iter().map(f).sum::<f64>() / n;
    let curve: Vec<CurveRow> = (0..t)
        .map(|i| CurveRow {
            threshold: first.curve[i].threshold,
            precision: mean(&|s| s.curve[i].precision),
            recall: mean(&|s| s.curve[i].recall),
            f_measure: mean(&|s| s.curve[i].f_measure),
            e_measure: mean(&|s| s.curve[i].e_measure),
        })
        .collect();
    Ok(EvalReport {
        mae: mean(&|s| s.mae),
        iou: mean(&|s| s.iou),
        f_measure: curve_max(&curve, |r| r.f_measure),
        e_measure: curve_max(&curve, |r| r.e_measure),
        beta_sq: options.beta_sq,
        curve,
        samples,
    })
}

impl EvalReport {
    /// Flat `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "samples = {}", self.samples.len());
        let _ = writeln!(out, "beta_sq = {}", self.beta_sq);
        let _ = writeln!(out, "thresholds = {}", self.curve.len());
        for (k, v) in [
            ("mae", self.mae),
            ("f_measure", self.f_measure),
            ("e_measure", self.e_measure),
            ("iou", self.iou),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        for s in &self.samples {
            for (k, v) in [
                ("mae", s.mae),
                ("f_measure", s.f_measure),
                ("e_measure", s.e_measure),
                ("iou", s.iou),
            ] {
                let _ = writeln!(out, "sample.{}.{k} = {v}", s.name);
            }
        }
        out
    }
}

/// Parses `key = value` lines into pairs, skipping blanks and `#` comments.
pub fn parse_report(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::parse("report", format!("line {}: expected 'key = value'", i + 1)))
        })
        .collect()
}

pub fn write_curve_csv(path: impl AsRef<Path>, curve: &[CurveRow]) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for row in curve {
        w.serialize(row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curve_csv(path: impl AsRef<Path>) -> Result<Vec<CurveRow>> {
    let path = path.as_ref();
    let ctx = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let header = r.headers().map_err(|e| Error::parse(&ctx, e.to_string()))?;
    if header != vec!["threshold", "precision", "recall", "f_measure", "e_measure"] {
        return Err(Error::parse(&ctx, format!("unexpected header {header:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::parse(&ctx, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests;
