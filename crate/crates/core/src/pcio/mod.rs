//! Point-cloud data model, PLY I/O, input features and synthetic scenes.

mod ply;
mod scene;

pub use ply::{load_ply, save_ply, PlyEncoding};
pub use scene::{
    generate_scene, random_scene_spec, synthetic_dataset, Background, Primitive, SceneSpec, Shape,
};

use crate::{Error, Result};

/// Number of per-point input channels fed to the model.
pub const INPUT_CHANNELS: usize = 9;

/// Color assigned to points when the source carries none.
pub const DEFAULT_GRAY: f64 = 0.5;

/// A point cloud with optional ground-truth mask and predicted saliency.
///
/// Values are validated on construction and immutable afterwards; the
/// `with_*` builders return new clouds.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
    gt_mask: Option<Vec<u8>>,
    saliency: Option<Vec<f64>>,
}

impl PointCloud {
    /// Builds a cloud from positions and colors. `colors = None` fills gray.
    pub fn new(positions: Vec<[f64; 3]>, colors: Option<Vec<[f64; 3]>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if let Some((i, _)) = positions
            .iter()
            .enumerate()
            .find(|(_, p)| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::invalid(format!("position of point {i} is not finite")));
        }
        let colors = match colors {
            Some(c) => {
                if c.len() != positions.len() {
                    return Err(Error::shape(
                        "PointCloud::new",
                        format!("{} colors for {} points", c.len(), positions.len()),
                    ));
                }
                if let Some((i, _)) = c
                    .iter()
                    .enumerate()
                    .find(|(_, rgb)| rgb.iter().any(|v| !(0.0..=1.0).contains(v)))
                {
                    return Err(Error::invalid(format!("color of point {i} outside [0,1]")));
                }
                c
            }
            None => vec![[DEFAULT_GRAY; 3]; positions.len()],
        };
        Ok(Self {
            positions,
            colors,
            gt_mask: None,
            saliency: None,
        })
    }

    pub fn with_mask(mut self, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != self.len() {
            return Err(Error::shape(
                "PointCloud::with_mask",
                format!("{} labels for {} points", mask.len(), self.len()),
            ));
        }
        if let Some(i) = mask.iter().position(|&m| m > 1) {
            return Err(Error::invalid(format!(
                "mask value {} at point {i} outside {{0,1}}",
                mask[i]
            )));
        }
        self.gt_mask = Some(mask);
        Ok(self)
    }

    pub fn with_saliency(mut self, saliency: Vec<f64>) -> Result<Self> {
        if saliency.len() != self.len() {
            return Err(Error::shape(
                "PointCloud::with_saliency",
                format!("{} saliency values for {} points", saliency.len(), self.len()),
            ));
        }
        if let Some(i) = saliency.iter().position(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid(format!(
                "saliency {} at point {i} outside [0,1]",
                saliency[i]
            )));
        }
        self.saliency = Some(saliency);
        Ok(self)
    }

    pub fn without_saliency(mut self) -> Self {
        self.saliency = None;
        self
    }

    /// Replaces positions, keeping colors and labels. Used by augmentation.
    pub fn with_positions(mut self, positions: Vec<[f64; 3]>) -> Result<Self> {
        if positions.len() != self.len() {
            return Err(Error::shape(
                "PointCloud::with_positions",
                format!("{} positions for {} points", positions.len(), self.len()),
            ));
        }
        if positions.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("non-finite position"));
        }
        self.positions = positions;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn gt_mask(&self) -> Option<&[u8]> {
        self.gt_mask.as_deref()
    }

    pub fn saliency(&self) -> Option<&[f64]> {
        self.saliency.as_deref()
    }

    /// Ground-truth mask or an error naming the caller.
    pub fn require_mask(&self, op: &str) -> Result<&[u8]> {
        self.gt_mask
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("{op} requires a ground-truth mask")))
    }

    /// Keeps the listed rows, in order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("selection is empty"));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::invalid(format!("row {r} out of range for {} points", self.len())));
        }
        Ok(Self {
            positions: rows.iter().map(|&r| self.positions[r]).collect(),
            colors: rows.iter().map(|&r| self.colors[r]).collect(),
            gt_mask: self.gt_mask.as_ref().map(|m| rows.iter().map(|&r| m[r]).collect()),
            saliency: self.saliency.as_ref().map(|s| rows.iter().map(|&r| s[r]).collect()),
        })
    }
}

/// How RGB enters the model input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FeatureMode {
    #[default]
    XyzRgb,
    /// RGB channels are zeroed.
    XyzOnly,
}

impl FeatureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::XyzRgb => "xyzrgb",
            FeatureMode::XyzOnly => "xyz",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "xyzrgb" => Ok(FeatureMode::XyzRgb),
            "xyz" => Ok(FeatureMode::XyzOnly),
            other => Err(Error::invalid(format!("unknown feature mode '{other}'"))),
        }
    }
}

/// Row-major N×9 model input: raw xyz, rgb, per-cloud min-max normalized xyz.
#[derive(Clone, Debug, PartialEq)]
pub struct InputFeatures {
    values: Vec<f64>,
}

impl InputFeatures {
    pub fn rows(&self) -> usize {
        self.values.len() / INPUT_CHANNELS
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * INPUT_CHANNELS..(i + 1) * INPUT_CHANNELS]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

pub fn build_input_features(cloud: &PointCloud) -> InputFeatures {
    build_input_features_with(cloud, FeatureMode::XyzRgb)
}

pub fn build_input_features_with(cloud: &PointCloud, mode: FeatureMode) -> InputFeatures {
    let (lo, hi) = bounds(cloud.positions());
    let mut values = Vec::with_capacity(cloud.len() * INPUT_CHANNELS);
    for (p, c) in cloud.positions().iter().zip(cloud.colors()) {
        values.extend_from_slice(p);
        match mode {
            FeatureMode::XyzRgb => values.extend_from_slice(c),
            FeatureMode::XyzOnly => values.extend_from_slice(&[0.0; 3]),
        }
        for a in 0..3 {
            let extent = hi[a] - lo[a];
            let v = if extent > 0.0 {
                ((p[a] - lo[a]) / extent).clamp(0.0, 1.0)
            } else {
                0.5
            };
            values.push(v);
        }
    }
    InputFeatures { values }
}

/// Axis-aligned bounding box of a non-empty point set.
pub fn bounds(positions: &[[f64; 3]]) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in positions {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}
