//! Deterministic synthetic scenes: primitives on a ground plane with clutter.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    /// Ellipsoid with semi-axes `scale`.
    Sphere,
    /// Box with half-extents `scale`.
    Box,
    /// Elliptic cylinder with radii `scale[0..2]` and half-height `scale[2]`.
    Cylinder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub scale: [f64; 3],
    /// Rotation about +z in radians.
    #[serde(default)]
    pub yaw: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    /// Ground plane size along x and y, centered on the origin at z = 0.
    pub extent: [f64; 2],
    pub color: [f64; 3],
    /// Share of the background budget spent on clutter items.
    pub clutter_density: f64,
    #[serde(default)]
    pub clutter_items: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_points: usize,
    /// Share of `n_points` sampled on object primitives.
    pub object_fraction: f64,
    pub noise_std: f64,
    /// Per-point Gaussian color perturbation.
    #[serde(default)]
    pub color_jitter: f64,
    /// Standard deviation of a smooth per-channel color field over space,
    /// so nearby points share their shading.
    #[serde(default)]
    pub color_texture: f64,
    pub background: Background,
    pub objects: Vec<Primitive>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 64 {
            return Err(Error::invalid(format!("scene needs at least 64 points, got {}", self.n_points)));
        }
        if self.objects.is_empty() {
            return Err(Error::invalid("scene needs at least one object primitive"));
        }
        if !(self.object_fraction > 0.0 && self.object_fraction < 1.0) {
            return Err(Error::invalid("object_fraction must lie in (0, 1)"));
        }
        if !(self.noise_std >= 0.0) || !(self.color_jitter >= 0.0) || !(self.color_texture >= 0.0) {
            return Err(Error::invalid("noise_std, color_jitter and color_texture must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.background.clutter_density) {
            return Err(Error::invalid("clutter_density must lie in [0, 1]"));
        }
        if self.background.extent.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::invalid("background extent must be positive"));
        }
        for (i, p) in self.objects.iter().enumerate() {
            if p.scale.iter().any(|s| !(*s > 0.0)) || surface_area(p.shape, p.scale) <= 0.0 {
                return Err(Error::invalid(format!("object {i} has zero surface area")));
            }
            if p.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::invalid(format!("object {i} color outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("scene spec", e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

fn surface_area(shape: Shape, s: [f64; 3]) -> f64 {
    match shape {
        Shape::Sphere => {
            // Knud Thomsen's approximation.
            let p = 1.6075;
            let t = ((s[0] * s[1]).powf(p) + (s[0] * s[2]).powf(p) + (s[1] * s[2]).powf(p)) / 3.0;
            4.0 * PI * t.powf(1.0 / p)
        }
        Shape::Box => 8.0 * (s[0] * s[1] + s[0] * s[2] + s[1] * s[2]),
        Shape::Cylinder => {
            let (a, b, h) = (s[0], s[1], s[2]);
            // Ramanujan perimeter of the ellipse.
            let perim = PI * (3.0 * (a + b) - ((3.0 * a + b) * (a + 3.0 * b)).sqrt());
            perim * 2.0 * h + 2.0 * PI * a * b
        }
    }
}

fn sample_surface(shape: Shape, s: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    match shape {
        Shape::Sphere => {
            let z: f64 = rng.gen_range(-1.0..1.0);
            let phi = rng.gen_range(0.0..2.0 * PI);
            let r = (1.0 - z * z).sqrt();
            [s[0] * r * phi.cos(), s[1] * r * phi.sin(), s[2] * z]
        }
        Shape::Box => {
            let faces = [s[1] * s[2], s[1] * s[2], s[0] * s[2], s[0] * s[2], s[0] * s[1], s[0] * s[1]];
            let total: f64 = faces.iter().sum();
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 5;
            for (i, a) in faces.iter().enumerate() {
                if pick < *a {
                    face = i;
                    break;
                }
                pick -= a;
            }
            let u = rng.gen_range(-1.0..1.0);
            let v = rng.gen_range(-1.0..1.0);
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [sign * s[0], u * s[1], v * s[2]],
                1 => [u * s[0], sign * s[1], v * s[2]],
                _ => [u * s[0], v * s[1], sign * s[2]],
            }
        }
        Shape::Cylinder => {
            let side = surface_area(Shape::Cylinder, s) - 2.0 * PI * s[0] * s[1];
            let cap = PI * s[0] * s[1];
            let theta = rng.gen_range(0.0..2.0 * PI);
            if rng.gen_range(0.0..side + 2.0 * cap) < side {
                [s[0] * theta.cos(), s[1] * theta.sin(), rng.gen_range(-s[2]..s[2])]
            } else {
                let r = rng.gen::<f64>().sqrt();
                let z = if rng.gen_bool(0.5) { s[2] } else { -s[2] };
                [s[0] * r * theta.cos(), s[1] * r * theta.sin(), z]
            }
        }
    }
}

fn place(local: [f64; 3], center: [f64; 3], yaw: f64) -> [f64; 3] {
    let (sn, cs) = yaw.sin_cos();
    [
        center[0] + cs * local[0] - sn * local[1],
        center[1] + sn * local[0] + cs * local[1],
        center[2] + local[2],
    ]
}

const TEXTURE_WAVES: usize = 4;

/// Sum of random plane waves per color channel, unit variance at every point.
struct ColorField {
    waves: Vec<[([f64; 3], f64); TEXTURE_WAVES]>,
}

impl ColorField {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let waves = (0..3)
            .map(|_| {
                std::array::from_fn(|_| {
                    let d: [f64; 3] = std::array::from_fn(|_| normal.sample(rng));
                    let len = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let freq = rng.gen_range(1.0..4.0);
                    (d.map(|v| v * freq / len), rng.gen_range(0.0..2.0 * PI))
                })
            })
            .collect();
        Self { waves }
    }

    fn at(&self, p: [f64; 3]) -> [f64; 3] {
        let amp = (2.0 / TEXTURE_WAVES as f64).sqrt();
        std::array::from_fn(|c| {
            self.waves[c]
                .iter()
                .map(|(k, phase)| amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos())
                .sum()
        })
    }
}

fn quantize_color(c: f64) -> f64 {
    (c.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Samples `count` points over primitives, weighting by surface area.
fn sample_primitives(
    prims: &[Primitive],
    count: usize,
    jitter: &Normal<f64>,
    rng: &mut ChaCha8Rng,
    out_pos: &mut Vec<[f64; 3]>,
    out_col: &mut Vec<[f64; 3]>,
) {
    let areas: Vec<f64> = prims.iter().map(|p| surface_area(p.shape, p.scale)).collect();
    let total: f64 = areas.iter().sum();
    for _ in 0..count {
        let mut pick = rng.gen_range(0.0..total);
        let mut idx = prims.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                idx = i;
                break;
            }
            pick -= a;
        }
        let p = &prims[idx];
        let local = sample_surface(p.shape, p.scale, rng);
        out_pos.push(place(local, p.center, p.yaw));
        out_col.push(p.color.map(|c| c + jitter.sample(rng)));
    }
}

/// Generates the scene described by `spec`; `gt_mask` is 1 exactly on
/// object-primitive points. Positions are rounded to f32 and colors to
/// byte levels so the cloud survives a PLY round-trip unchanged.
pub fn generate_scene(spec: &SceneSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let jitter = Normal::new(0.0, spec.color_jitter).map_err(|e| Error::invalid(e.to_string()))?;

    let n_obj = ((spec.n_points as f64 * spec.object_fraction).round() as usize).clamp(1, spec.n_points - 1);
    let n_bg = spec.n_points - n_obj;
    let bg = &spec.background;
    let half = [bg.extent[0] / 2.0, bg.extent[1] / 2.0];

    let clutter: Vec<Primitive> = (0..bg.clutter_items)
        .map(|_| {
            let hx = rng.gen_range(0.08..0.3);
            let hy = rng.gen_range(0.08..0.3);
            let hz = rng.gen_range(0.04..0.25);
            Primitive {
                shape: Shape::Box,
                center: [
                    rng.gen_range(-half[0]..half[0]),
                    rng.gen_range(-half[1]..half[1]),
                    hz,
                ],
                scale: [hx, hy, hz],
                yaw: rng.gen_range(0.0..PI),
                color: hsv(rng.gen_range(0.0..1.0), rng.gen_range(0.05..0.35), rng.gen_range(0.3..0.7)),
            }
        })
        .collect();
    let n_clutter = if clutter.is_empty() {
        0
    } else {
        (n_bg as f64 * bg.clutter_density).round() as usize
    };
    let n_plane = n_bg - n_clutter;

    let mut positions = Vec::with_capacity(spec.n_points);
    let mut colors = Vec::with_capacity(spec.n_points);
    sample_primitives(&spec.objects, n_obj, &jitter, &mut rng, &mut positions, &mut colors);
    sample_primitives(&clutter, n_clutter, &jitter, &mut rng, &mut positions, &mut colors);
    for _ in 0..n_plane {
        positions.push([rng.gen_range(-half[0]..half[0]), rng.gen_range(-half[1]..half[1]), 0.0]);
        colors.push(bg.color.map(|c| c + jitter.sample(&mut rng)));
    }
    let mut mask = vec![0u8; spec.n_points];
    mask[..n_obj].fill(1);

    if spec.color_texture > 0.0 {
        let field = ColorField::sample(&mut rng);
        for (c, p) in colors.iter_mut().zip(&positions) {
            let t = field.at(*p);
            *c = std::array::from_fn(|i| c[i] + spec.color_texture * t[i]);
        }
    }

    for p in positions.iter_mut() {
        for v in p.iter_mut() {
            *v = (*v + noise.sample(&mut rng)) as f32 as f64;
        }
    }
    for c in colors.iter_mut() {
        *c = c.map(quantize_color);
    }

    let mut order: Vec<usize> = (0..spec.n_points).collect();
    order.shuffle(&mut rng);
    let positions = order.iter().map(|&i| positions[i]).collect();
    let colors = order.iter().map(|&i| colors[i]).collect();
    let mask = order.iter().map(|&i| mask[i]).collect();
    PointCloud::new(positions, Some(colors))?.with_mask(mask)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Draws a random desk-scale scene description: one to three saturated
/// primitives resting on a muted ground plane with low clutter. Smooth
/// color shading is strong enough that color alone does not separate object
/// from background.
pub fn random_scene_spec(seed: u64, n_points: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7_e5ee_d000_0001);
    let extent = [9.0, 6.0];
    let n_objects = rng.gen_range(1..=3);
    let mut objects: Vec<Primitive> = Vec::new();
    while objects.len() < n_objects {
        let shape = [Shape::Sphere, Shape::Box, Shape::Cylinder][rng.gen_range(0..3)];
        let scale: [f64; 3] = match shape {
            Shape::Sphere => {
                let r = rng.gen_range(0.5..1.1);
                [r, r, r]
            }
            Shape::Box => [rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.1)],
            Shape::Cylinder => {
                let r = rng.gen_range(0.3..0.7);
                [r, r, rng.gen_range(0.5..1.2)]
            }
        };
        let reach = scale[0].max(scale[1]) * 1.5;
        let center = [
            rng.gen_range(-extent[0] / 2.0 + reach..extent[0] / 2.0 - reach),
            rng.gen_range(-extent[1] / 2.0 + reach..extent[1] / 2.0 - reach),
            scale[2],
        ];
        let clear = objects.iter().all(|o| {
            let d = ((o.center[0] - center[0]).powi(2) + (o.center[1] - center[1]).powi(2)).sqrt();
            d > reach + o.scale[0].max(o.scale[1]) * 1.5
        });
        if !clear {
            continue;
        }
        objects.push(Primitive {
            shape,
            center,
            scale,
            yaw: rng.gen_range(0.0..PI),
            color: hsv(rng.gen_range(0.0..1.0), rng.gen_range(0.65..1.0), rng.gen_range(0.7..1.0)),
        });
    }
    SceneSpec {
        seed,
        n_points,
        object_fraction: rng.gen_range(0.25..0.45),
        noise_std: 0.005,
        color_jitter: 0.04,
        color_texture: 0.15,
        background: Background {
            extent,
            color: hsv(rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.25), rng.gen_range(0.3..0.6)),
            clutter_density: rng.gen_range(0.1..0.3),
            clutter_items: rng.gen_range(2..8),
        },
        objects,
    }
}

/// `count` random scenes with point counts drawn uniformly from `points`.
pub fn synthetic_dataset(
    count: usize,
    points: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<Vec<PointCloud>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let scene_seed: u64 = rng.gen();
            let n = rng.gen_range(points.clone());
            generate_scene(&random_scene_spec(scene_seed, n))
        })
        .collect()
}
