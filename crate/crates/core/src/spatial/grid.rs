//! Uniform bucket grid supporting exact kNN queries and point removal.

use std::cmp::Ordering;

/// Candidate neighbor: squared distance and point id.
pub(crate) type Hit = (f64, u32);

pub(crate) fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

const ABSENT: u32 = u32::MAX;

#[derive(Clone, Debug)]
pub(crate) struct BucketGrid {
    lo: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
    cell_of: Vec<u32>,
    slot_of: Vec<u32>,
    live: usize,
}

impl BucketGrid {
    /// Indexes the points `ids` (rows of `positions`).
    pub fn build(positions: &[[f64; 3]], ids: &[u32]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in ids {
            let p = positions[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if ids.is_empty() {
            lo = [0.0; 3];
            hi = [0.0; 3];
        }
        let extent = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        let emax = extent.iter().cloned().fold(0.0, f64::max);
        let target = (ids.len() / 2).max(1) as f64;
        let cap = 4 * ids.len() + 64;
        let (cell, dims) = if emax > 0.0 {
            let floor = emax * 1e-2;
            let vol: f64 = extent.iter().map(|e| e.max(floor)).product();
            let mut cell = (vol / target).cbrt();
            loop {
                let dims = extent.map(|e| ((e / cell).floor() as usize + 1).max(1));
                if dims.iter().product::<usize>() <= cap {
                    break (cell, dims);
                }
                cell *= 1.25;
            }
        } else {
            (1.0, [1, 1, 1])
        };
        let mut grid = Self {
            lo,
            cell,
            dims,
            cells: vec![Vec::new(); dims.iter().product()],
            cell_of: vec![ABSENT; positions.len()],
            slot_of: vec![ABSENT; positions.len()],
            live: 0,
        };
        for &i in ids {
            let c = grid.linear(grid.coords(positions[i as usize]));
            grid.slot_of[i as usize] = grid.cells[c].len() as u32;
            grid.cell_of[i as usize] = c as u32;
            grid.cells[c].push(i);
        }
        grid.live = ids.len();
        grid
    }

    pub fn live(&self) -> usize {
        self.live
    }

    pub fn contains(&self, id: u32) -> bool {
        self.cell_of[id as usize] != ABSENT
    }

    fn coords(&self, p: [f64; 3]) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let v = ((p[a] - self.lo[a]) / self.cell).floor();
            c[a] = if v <= 0.0 {
                0
            } else {
                (v as usize).min(self.dims[a] - 1)
            };
        }
        c
    }

    fn linear(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    pub fn remove(&mut self, id: u32) {
        let c = self.cell_of[id as usize];
        if c == ABSENT {
            return;
        }
        let slot = self.slot_of[id as usize] as usize;
        let bucket = &mut self.cells[c as usize];
        bucket.swap_remove(slot);
        if let Some(&moved) = bucket.get(slot) {
            self.slot_of[moved as usize] = slot as u32;
        }
        self.cell_of[id as usize] = ABSENT;
        self.slot_of[id as usize] = ABSENT;
        self.live -= 1;
    }

    /// The `k` indexed points nearest to `query` (excluding `exclude`),
    /// sorted by (distance, id). Returns fewer when fewer are indexed.
    pub fn knn(
        &self,
        positions: &[[f64; 3]],
        query: [f64; 3],
        k: usize,
        exclude: Option<u32>,
        out: &mut Vec<Hit>,
    ) {
        out.clear();
        let available = self.live - exclude.map_or(0, |e| self.contains(e) as usize);
        let want = k.min(available);
        if want == 0 {
            return;
        }
        let c = self.coords(query);
        let max_r = (0..3)
            .map(|a| c[a].max(self.dims[a] - 1 - c[a]))
            .max()
            .unwrap_or(0);
        let mut r = 0usize;
        loop {
            self.visit_shell(c, r, |id| {
                if Some(id) != exclude {
                    let p = positions[id as usize];
                    let d2 = (p[0] - query[0]).powi(2) + (p[1] - query[1]).powi(2) + (p[2] - query[2]).powi(2);
                    out.push((d2, id));
                }
            });
            if r >= max_r {
                break;
            }
            if out.len() >= want {
                out.select_nth_unstable_by(want - 1, hit_order);
                let kth = out[want - 1].0;
                // Distance from the query to the outside of the visited block.
                let mut bound = f64::INFINITY;
                for a in 0..3 {
                    if c[a] >= r + 1 {
                        let face = self.lo[a] + (c[a] - r) as f64 * self.cell;
                        bound = bound.min(query[a] - face);
                    }
                    if c[a] + r + 1 < self.dims[a] {
                        let face = self.lo[a] + (c[a] + r + 1) as f64 * self.cell;
                        bound = bound.min(face - query[a]);
                    }
                }
                let bound = bound.max(0.0);
                if kth < bound * bound {
                    break;
                }
            }
            r += 1;
        }
        out.sort_unstable_by(hit_order);
        out.truncate(want);
    }

    fn visit_shell(&self, c: [usize; 3], r: usize, mut f: impl FnMut(u32)) {
        let lo = |a: usize| c[a].saturating_sub(r);
        let hi = |a: usize| (c[a] + r).min(self.dims[a] - 1);
        let ring = |v: usize, a: usize| v + r == c[a] || v == c[a] + r;
        for z in lo(2)..=hi(2) {
            let z_edge = ring(z, 2);
            for y in lo(1)..=hi(1) {
                let yz_edge = z_edge || ring(y, 1);
                let row = self.dims[0] * (y + self.dims[1] * z);
                if yz_edge {
                    for x in lo(0)..=hi(0) {
                        self.cells[row + x].iter().for_each(|&id| f(id));
                    }
                } else {
                    if c[0] >= r {
                        self.cells[row + c[0] - r].iter().for_each(|&id| f(id));
                    }
                    if r > 0 && c[0] + r < self.dims[0] {
                        self.cells[row + c[0] + r].iter().for_each(|&id| f(id));
                    }
                }
            }
        }
    }
}
