//! Voxel reduction, exact kNN, farthest-point sampling and local areas.

pub(crate) mod grid;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pcio::{bounds, PointCloud};
use crate::{Error, Result};
pub(crate) use grid::BucketGrid;

/// Default spatial grid used for voxel reduction.
pub const DEFAULT_VOXEL_SHAPE: [usize; 3] = [150, 100, 75];

/// Mapping between an input cloud and its voxel-reduced version.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub shape: [usize; 3],
    pub origin: [f64; 3],
    pub cell_size: [f64; 3],
    /// Reduced-cloud row of every input point.
    pub voxel_of_point: Vec<u32>,
    /// Linear cell id (x fastest) of every reduced row, strictly increasing.
    pub cell_of_voxel: Vec<u64>,
    /// Input rows gathered into each reduced row.
    pub point_rows_of_voxel: Vec<Vec<u32>>,
}

impl VoxelGrid {
    pub fn voxel_count(&self) -> usize {
        self.point_rows_of_voxel.len()
    }

    pub fn point_count(&self) -> usize {
        self.voxel_of_point.len()
    }
}

/// Quantizes the bounding box of `cloud` into `shape` cells and keeps one
/// point per occupied cell: mean position and color, majority mask with
/// ties resolved to 1, mean saliency.
pub fn voxelize(cloud: &PointCloud, shape: [usize; 3]) -> Result<(VoxelGrid, PointCloud)> {
    if shape.iter().any(|&s| s == 0) {
        return Err(Error::invalid(format!("voxel shape {shape:?} has a zero axis")));
    }
    let (lo, hi) = bounds(cloud.positions());
    let mut cell_size = [1.0; 3];
    for a in 0..3 {
        let extent = hi[a] - lo[a];
        if extent > 0.0 {
            cell_size[a] = extent / shape[a] as f64;
        }
    }
    let mut keyed: Vec<(u64, u32)> = cloud
        .positions()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut c = [0u64; 3];
            for a in 0..3 {
                let v = ((p[a] - lo[a]) / cell_size[a]).floor();
                c[a] = if v <= 0.0 { 0 } else { (v as u64).min(shape[a] as u64 - 1) };
            }
            let id = c[0] + shape[0] as u64 * (c[1] + shape[1] as u64 * c[2]);
            (id, i as u32)
        })
        .collect();
    keyed.sort_unstable();

    let mut voxel_of_point = vec![0u32; cloud.len()];
    let mut cell_of_voxel = Vec::new();
    let mut point_rows_of_voxel: Vec<Vec<u32>> = Vec::new();
    for (cell, i) in keyed {
        if cell_of_voxel.last() != Some(&cell) {
            cell_of_voxel.push(cell);
            point_rows_of_voxel.push(Vec::new());
        }
        voxel_of_point[i as usize] = (cell_of_voxel.len() - 1) as u32;
        point_rows_of_voxel.last_mut().unwrap().push(i);
    }

    let v = point_rows_of_voxel.len();
    let mut positions = Vec::with_capacity(v);
    let mut colors = Vec::with_capacity(v);
    let mut mask = cloud.gt_mask().map(|_| Vec::with_capacity(v));
    let mut saliency = cloud.saliency().map(|_| Vec::with_capacity(v));
    for rows in &point_rows_of_voxel {
        let n = rows.len() as f64;
        let mut p = [0.0; 3];
        let mut c = [0.0; 3];
        for &r in rows {
            for a in 0..3 {
                p[a] += cloud.positions()[r as usize][a];
                c[a] += cloud.colors()[r as usize][a];
            }
        }
        positions.push(p.map(|s| s / n));
        colors.push(c.map(|s| (s / n).clamp(0.0, 1.0)));
        if let (Some(out), Some(m)) = (mask.as_mut(), cloud.gt_mask()) {
            let ones = rows.iter().filter(|&&r| m[r as usize] == 1).count();
            out.push((2 * ones >= rows.len()) as u8);
        }
        if let (Some(out), Some(s)) = (saliency.as_mut(), cloud.saliency()) {
            let sum: f64 = rows.iter().map(|&r| s[r as usize]).sum();
            out.push((sum / n).clamp(0.0, 1.0));
        }
    }
    let mut reduced = PointCloud::new(positions, Some(colors))?;
    if let Some(m) = mask {
        reduced = reduced.with_mask(m)?;
    }
    if let Some(s) = saliency {
        reduced = reduced.with_saliency(s)?;
    }
    Ok((
        VoxelGrid {
            shape,
            origin: lo,
            cell_size,
            voxel_of_point,
            cell_of_voxel,
            point_rows_of_voxel,
        },
        reduced,
    ))
}

/// Broadcasts row-major `V×cols` voxel values back to the `N` input points.
pub fn devoxelize(grid: &VoxelGrid, voxel_values: &[f64], cols: usize) -> Result<Vec<f64>> {
    if cols == 0 || voxel_values.len() != grid.voxel_count() * cols {
        return Err(Error::shape(
            "devoxelize",
            format!(
                "{} values for {} voxels × {cols} columns",
                voxel_values.len(),
                grid.voxel_count()
            ),
        ));
    }
    let mut out = Vec::with_capacity(grid.point_count() * cols);
    for &v in &grid.voxel_of_point {
        let v = v as usize;
        out.extend_from_slice(&voxel_values[v * cols..(v + 1) * cols]);
    }
    Ok(out)
}

/// Reusable exact kNN index over a fixed point set.
pub struct KnnIndex<'a> {
    positions: &'a [[f64; 3]],
    grid: BucketGrid,
}

impl<'a> KnnIndex<'a> {
    pub fn new(positions: &'a [[f64; 3]]) -> Self {
        let ids: Vec<u32> = (0..positions.len() as u32).collect();
        Self {
            positions,
            grid: BucketGrid::build(positions, &ids),
        }
    }

    /// The `k` nearest points to row `query`, excluding itself, sorted by
    /// distance with ties broken by smaller index.
    pub fn knn(&self, query: usize, k: usize) -> Result<Vec<usize>> {
        let n = self.positions.len();
        if query >= n {
            return Err(Error::invalid(format!("query {query} out of range for {n} points")));
        }
        if k == 0 || k >= n {
            return Err(Error::invalid(format!("k = {k} outside [1, {}]", n.saturating_sub(1))));
        }
        let mut hits = Vec::new();
        self.grid
            .knn(self.positions, self.positions[query], k, Some(query as u32), &mut hits);
        Ok(hits.into_iter().map(|(_, i)| i as usize).collect())
    }

    /// Nearest `k` points to row `query` including the query itself first.
    fn ball(&self, query: usize, k: usize) -> Vec<usize> {
        let mut hits = Vec::new();
        self.grid
            .knn(self.positions, self.positions[query], k.saturating_sub(1), Some(query as u32), &mut hits);
        std::iter::once(query)
            .chain(hits.into_iter().map(|(_, i)| i as usize))
            .collect()
    }
}

/// One-shot convenience wrapper around [`KnnIndex`].
pub fn knn(positions: &[[f64; 3]], query: usize, k: usize) -> Result<Vec<usize>> {
    KnnIndex::new(positions).knn(query, k)
}

/// Greedy max-min sampling from a seeded random start.
pub fn farthest_point_sample(positions: &[[f64; 3]], count: usize, seed: u64) -> Result<Vec<usize>> {
    if positions.is_empty() {
        return Err(Error::invalid("farthest_point_sample on empty set"));
    }
    let start = ChaCha8Rng::seed_from_u64(seed).gen_range(0..positions.len());
    farthest_point_sample_from(positions, count, start)
}

/// Max-min sampling from a fixed start; distance ties go to the smaller index.
pub fn farthest_point_sample_from(
    positions: &[[f64; 3]],
    count: usize,
    start: usize,
) -> Result<Vec<usize>> {
    let n = positions.len();
    if count == 0 || count > n {
        return Err(Error::invalid(format!("sample count {count} outside [1, {n}]")));
    }
    if start >= n {
        return Err(Error::invalid(format!("start {start} out of range")));
    }
    let mut picked = Vec::with_capacity(count);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = start;
    loop {
        picked.push(current);
        min_d2[current] = -1.0;
        if picked.len() == count {
            break;
        }
        let c = positions[current];
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, p) in positions.iter().enumerate() {
            if min_d2[i] < 0.0 {
                continue;
            }
            let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if min_d2[i] > best.0 {
                best = (min_d2[i], i);
            }
        }
        current = best.1;
    }
    Ok(picked)
}

/// Local areas inside the object plus the background pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalAreaSet {
    pub areas: Vec<Vec<u32>>,
    pub background: Vec<u32>,
}

impl LocalAreaSet {
    pub fn len(&self) -> usize {
        self.areas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.areas.is_empty()
    }
}

/// Seeds areas with farthest-point sampling over object points and grows
/// each into the `area_size` nearest object points (seed included).
pub fn generate_local_areas(
    cloud: &PointCloud,
    area_count: usize,
    area_size: usize,
    seed: u64,
) -> Result<LocalAreaSet> {
    let mask = cloud.require_mask("generate_local_areas")?;
    if area_count == 0 || area_size == 0 {
        return Err(Error::invalid("area_count and area_size must be at least 1"));
    }
    let object: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == 1).collect();
    let background: Vec<u32> = (0..mask.len() as u32).filter(|&i| mask[i as usize] == 0).collect();
    if object.is_empty() {
        return Err(Error::invalid("cannot build local areas: object mask is empty"));
    }
    let obj_pos: Vec<[f64; 3]> = object.iter().map(|&i| cloud.positions()[i]).collect();
    let seeds = farthest_point_sample(&obj_pos, area_count.min(object.len()), seed)?;
    let index = KnnIndex::new(&obj_pos);
    let size = area_size.min(object.len());
    let areas = seeds
        .into_iter()
        .map(|s| index.ball(s, size).into_iter().map(|j| object[j] as u32).collect())
        .collect();
    Ok(LocalAreaSet { areas, background })
}
