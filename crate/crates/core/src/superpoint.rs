//! Greedy queue-based superpoint partition, pooling and inverse mapping.
//!
//! The partition repeatedly picks a random unclustered point as a center,
//! queues the `k` nearest unclustered points by position, and absorbs them
//! in distance order while their feature distance to the center stays
//! within `gamma`. The first rejection closes the superpoint; rejected
//! points stay unclustered. Center features are never updated.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::spatial::BucketGrid;
use crate::{Error, Result};

/// Default queue size.
pub const DEFAULT_K: usize = 32;
/// Percentile of sampled pairwise feature distances used when gamma is adaptive.
pub const DEFAULT_GAMMA_PERCENTILE: f64 = 0.10;
const GAMMA_SAMPLE_PAIRS: usize = 4096;

thread_local! {
    static PARTITION_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`partition`] calls made on the current thread.
pub fn partition_calls() -> u64 {
    PARTITION_CALLS.with(Cell::get)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpointPartition {
    sp_id_of_point: Vec<u32>,
    members: Vec<Vec<u32>>,
    centers: Vec<u32>,
}

impl SuperpointPartition {
    /// Builds a partition from per-point ids, validating that ids cover
    /// `0..M` without gaps. Centers default to the first member.
    pub fn from_ids(ids: Vec<u32>) -> Result<Self> {
        let m = ids.iter().max().map_or(0, |&x| x as usize + 1);
        let mut members = vec![Vec::new(); m];
        for (i, &s) in ids.iter().enumerate() {
            members[s as usize].push(i as u32);
        }
        if members.iter().any(Vec::is_empty) || ids.is_empty() {
            return Err(Error::invalid("superpoint ids must be a dense range 0..M"));
        }
        let centers = members.iter().map(|m| m[0]).collect();
        Ok(Self {
            sp_id_of_point: ids,
            members,
            centers,
        })
    }

    /// Every point in its own superpoint, ordered by index.
    pub fn singletons(n: usize) -> Self {
        Self {
            sp_id_of_point: (0..n as u32).collect(),
            members: (0..n as u32).map(|i| vec![i]).collect(),
            centers: (0..n as u32).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn point_count(&self) -> usize {
        self.sp_id_of_point.len()
    }

    pub fn sp_id_of_point(&self) -> &[u32] {
        &self.sp_id_of_point
    }

    pub fn members(&self) -> &[Vec<u32>] {
        &self.members
    }

    pub fn centers(&self) -> &[u32] {
        &self.centers
    }

    /// Checks the exact-cover and center-membership invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.sp_id_of_point.len();
        let mut seen = vec![false; n];
        for (s, group) in self.members.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::invalid(format!("superpoint {s} is empty")));
            }
            if !group.contains(&self.centers[s]) {
                return Err(Error::invalid(format!("center of superpoint {s} not a member")));
            }
            for &p in group {
                let p = p as usize;
                if p >= n || seen[p] || self.sp_id_of_point[p] as usize != s {
                    return Err(Error::invalid(format!("point {p} breaks the exact cover")));
                }
                seen[p] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("partition does not cover every point"));
        }
        Ok(())
    }
}

fn feature_distance(features: &[f64], c: usize, i: usize, j: usize) -> f64 {
    let a = &features[i * c..(i + 1) * c];
    let b = &features[j * c..(j + 1) * c];
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Runs the greedy partition over `positions` with row-major `features`
/// of `channels` columns.
pub fn partition(
    positions: &[[f64; 3]],
    features: &[f64],
    channels: usize,
    k: usize,
    gamma: f64,
    seed: u64,
) -> Result<SuperpointPartition> {
    PARTITION_CALLS.with(|c| c.set(c.get() + 1));
    let n = positions.len();
    if n == 0 {
        return Err(Error::invalid("partition needs at least one point"));
    }
    if channels == 0 || features.len() != n * channels {
        return Err(Error::shape(
            "partition",
            format!("{} feature values for {n} points × {channels} channels", features.len()),
        ));
    }
    if k == 0 {
        return Err(Error::invalid("queue size k must be at least 1"));
    }
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma must be non-negative, got {gamma}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unclustered: Vec<u32> = (0..n as u32).collect();
    let mut slot: Vec<u32> = (0..n as u32).collect();
    let take = |u: &mut Vec<u32>, slot: &mut Vec<u32>, id: u32| {
        let s = slot[id as usize] as usize;
        u.swap_remove(s);
        if let Some(&moved) = u.get(s) {
            slot[moved as usize] = s as u32;
        }
    };

    let mut grid = BucketGrid::build(positions, &unclustered);
    let mut indexed = n;
    let mut sp_id = vec![u32::MAX; n];
    let mut members: Vec<Vec<u32>> = Vec::new();
    let mut centers = Vec::new();
    let mut queue = Vec::with_capacity(k);

    while !unclustered.is_empty() {
        let center = unclustered[rng.gen_range(0..unclustered.len())];
        take(&mut unclustered, &mut slot, center);
        grid.remove(center);
        let id = members.len() as u32;
        sp_id[center as usize] = id;
        let mut group = vec![center];

        grid.knn(positions, positions[center as usize], k, None, &mut queue);
        for &(_, j) in queue.iter() {
            if feature_distance(features, channels, center as usize, j as usize) <= gamma {
                sp_id[j as usize] = id;
                group.push(j);
                take(&mut unclustered, &mut slot, j);
                grid.remove(j);
            } else {
                break;
            }
        }
        members.push(group);
        centers.push(center);

        // Shrinking the index keeps bucket occupancy, and so query cost, bounded.
        if grid.live() > 0 && grid.live() * 4 < indexed {
            grid = BucketGrid::build(positions, &unclustered);
            indexed = grid.live();
        }
    }
    Ok(SuperpointPartition {
        sp_id_of_point: sp_id,
        members,
        centers,
    })
}

/// Adaptive threshold: the given percentile of feature distances over
/// seeded random point pairs. Returns 0 for a single point.
pub fn adaptive_gamma(features: &[f64], channels: usize, percentile: f64, seed: u64) -> Result<f64> {
    if channels == 0 || features.is_empty() || features.len() % channels != 0 {
        return Err(Error::shape("adaptive_gamma", format!("{} values, {channels} channels", features.len())));
    }
    let n = features.len() / channels;
    if n < 2 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d: Vec<f64> = (0..GAMMA_SAMPLE_PAIRS)
        .map(|_| {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            feature_distance(features, channels, i, j)
        })
        .collect();
    let rank = ((percentile.clamp(0.0, 1.0) * (d.len() - 1) as f64).round()) as usize;
    let (_, v, _) = d.select_nth_unstable_by(rank, |a, b| a.total_cmp(b));
    Ok(*v)
}

/// Mean of member rows per superpoint (`M×C`).
pub fn superpoint_pool(features: &[f64], channels: usize, part: &SuperpointPartition) -> Result<Vec<f64>> {
    if channels == 0 || features.len() != part.point_count() * channels {
        return Err(Error::shape(
            "superpoint_pool",
            format!("{} values for {} points × {channels}", features.len(), part.point_count()),
        ));
    }
    let mut out = vec![0.0; part.len() * channels];
    for (s, group) in part.members.iter().enumerate() {
        let row = &mut out[s * channels..(s + 1) * channels];
        for &p in group {
            let src = &features[p as usize * channels..(p as usize + 1) * channels];
            row.iter_mut().zip(src).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / group.len() as f64;
        row.iter_mut().for_each(|o| *o *= inv);
    }
    Ok(out)
}

/// Broadcasts superpoint rows to their member points (`N×C`).
pub fn inverse_map(sp_values: &[f64], channels: usize, part: &SuperpointPartition) -> Result<Vec<f64>> {
    if channels == 0 || sp_values.len() != part.len() * channels {
        return Err(Error::shape(
            "inverse_map",
            format!("{} values for {} superpoints × {channels}", sp_values.len(), part.len()),
        ));
    }
    let mut out = Vec::with_capacity(part.point_count() * channels);
    for &s in &part.sp_id_of_point {
        out.extend_from_slice(&sp_values[s as usize * channels..(s as usize + 1) * channels]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn line(n: usize) -> Vec<[f64; 3]> {
        (0..n).map(|i| [i as f64, 0.0, 0.0]).collect()
    }

    #[test]
    fn identical_features_one_superpoint() {
        let p = partition(&line(5), &[0.3; 10], 2, 4, 0.1, 1).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.members()[0].len(), 5);
        p.validate().unwrap();
    }

    #[test]
    fn zero_gamma_distinct_features_singletons() {
        let f: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let p = partition(&line(8), &f, 1, 3, 0.0, 2).unwrap();
        assert_eq!(p.len(), 8);
        p.validate().unwrap();
    }

    #[test]
    fn separated_triplets_hand_trace() {
        let pos = vec![
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [0.0, 0.1, 0.0],
            [5.0, 0.0, 0.0],
            [5.1, 0.0, 0.0],
            [5.0, 0.1, 0.0],
        ];
        let f = vec![0.0, 0.0, 0.0, 10.0, 10.0, 10.0];
        for seed in 0..10 {
            let p = partition(&pos, &f, 1, 5, 1.0, seed).unwrap();
            assert_eq!(p.len(), 2, "seed {seed}");
            let mut groups: Vec<Vec<u32>> = p
                .members()
                .iter()
                .map(|g| {
                    let mut g = g.clone();
                    g.sort_unstable();
                    g
                })
                .collect();
            groups.sort();
            assert_eq!(groups, vec![vec![0, 1, 2], vec![3, 4, 5]]);
        }
    }

    #[test]
    fn errors() {
        assert!(partition(&line(3), &[0.0; 5], 2, 2, 0.1, 0).is_err());
        assert!(partition(&line(3), &[0.0; 3], 1, 0, 0.1, 0).is_err());
        assert!(partition(&line(3), &[0.0; 3], 1, 2, -1.0, 0).is_err());
        assert!(partition(&[], &[], 1, 2, 0.1, 0).is_err());
    }

    #[test]
    fn pool_of_pair() {
        let part = SuperpointPartition::from_ids(vec![0, 0]).unwrap();
        assert_eq!(superpoint_pool(&[1.0, 1.0, 3.0, 3.0], 2, &part).unwrap(), vec![2.0, 2.0]);
        assert!(superpoint_pool(&[1.0], 2, &part).is_err());
    }

    #[test]
    fn inverse_map_broadcast() {
        let part = SuperpointPartition::from_ids(vec![0, 1, 0]).unwrap();
        assert_eq!(inverse_map(&[7.0, 9.0], 1, &part).unwrap(), vec![7.0, 9.0, 7.0]);
        assert!(inverse_map(&[7.0], 1, &part).is_err());
        assert!(SuperpointPartition::from_ids(vec![0, 2]).is_err());
    }

    #[test]
    fn singletons_round_trip() {
        let part = SuperpointPartition::singletons(4);
        let f = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(superpoint_pool(&f, 1, &part).unwrap(), f);
        assert_eq!(inverse_map(&f, 1, &part).unwrap(), f);
    }

    #[test]
    fn pool_matches_accumulation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (n, c, m) = (64, 8, 9);
        let mut ids: Vec<u32> = (0..m as u32).collect();
        ids.extend((m..n).map(|_| rng.gen_range(0..m as u32)));
        let part = SuperpointPartition::from_ids(ids.clone()).unwrap();
        let f: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pooled = superpoint_pool(&f, c, &part).unwrap();
        let mut sums = vec![0.0; m * c];
        let mut counts = vec![0usize; m];
        for i in 0..n {
            counts[ids[i] as usize] += 1;
            for ch in 0..c {
                sums[ids[i] as usize * c + ch] += f[i * c + ch];
            }
        }
        for s in 0..m {
            for ch in 0..c {
                assert!((pooled[s * c + ch] - sums[s * c + ch] / counts[s] as f64).abs() <= 1e-12);
            }
        }
        // Pool after broadcast returns the pooled values.
        let again = superpoint_pool(&inverse_map(&pooled, c, &part).unwrap(), c, &part).unwrap();
        for (a, b) in again.iter().zip(&pooled) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn call_counter_counts() {
        let before = partition_calls();
        partition(&line(2), &[0.0, 0.0], 1, 1, 0.0, 0).unwrap();
        assert_eq!(partition_calls(), before + 1);
    }

    #[test]
    fn adaptive_gamma_percentiles() {
        let f: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let lo = adaptive_gamma(&f, 1, 0.1, 3).unwrap();
        let hi = adaptive_gamma(&f, 1, 0.9, 3).unwrap();
        assert!(lo < hi);
        assert!(lo > 0.0);
        assert_eq!(adaptive_gamma(&[1.0, 2.0], 2, 0.1, 0).unwrap(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn partition_is_cover_within_gamma(
            n in 1usize..200,
            k in 1usize..40,
            gamma in 0.0f64..2.0,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pos: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let f: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = partition(&pos, &f, 3, k, gamma, seed).unwrap();
            p.validate().unwrap();
            for (s, group) in p.members().iter().enumerate() {
                let c = p.centers()[s] as usize;
                prop_assert!(group.len() <= k + 1);
                for &j in group {
                    prop_assert!(feature_distance(&f, 3, c, j as usize) <= gamma);
                }
            }
            prop_assert_eq!(p, partition(&pos, &f, 3, k, gamma, seed).unwrap());
        }
    }
}
