//! Exact nearest-neighbour search by uniform grid bucketing.
//!
//! Cell size is `bbox_diag / ∛N` over the reference set. A query visits
//! shells of cells at growing Chebyshev radius and stops once the nearest
//! hit found so far is closer than anything the next shell could hold.

pub type Point = [f64; 3];

pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Bucketed reference set.
#[derive(Debug, Clone)]
pub struct Grid<'a> {
    points: &'a [Point],
    origin: Point,
    cell: f64,
    dims: [usize; 3],
    /// Start offsets into `order` per cell (length = cells + 1).
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> Grid<'a> {
    pub fn build(points: &'a [Point]) -> Self {
        assert!(!points.is_empty(), "grid over an empty reference set");
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let diag = sq_dist(&lo, &hi).sqrt();
        let n = points.len() as f64;
        let mut cell = diag / n.cbrt();
        if !(cell > 1e-12) {
            cell = 1.0;
        }
        let mut dims = [1usize; 3];
        for k in 0..3 {
            dims[k] = (((hi[k] - lo[k]) / cell).floor() as usize + 1).max(1);
        }
        let cells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; cells + 1];
        let keys: Vec<usize> = points
            .iter()
            .map(|p| {
                let c = Self::cell_of(p, &lo, cell, &dims);
                c[0] + dims[0] * (c[1] + dims[1] * c[2])
            })
            .collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        Self {
            points,
            origin: lo,
            cell,
            dims,
            starts: counts,
            order,
        }
    }

    fn cell_of(p: &Point, lo: &Point, cell: f64, dims: &[usize; 3]) -> [usize; 3] {
        let mut c = [0usize; 3];
        for k in 0..3 {
            let v = ((p[k] - lo[k]) / cell).floor();
            c[k] = if v <= 0.0 {
                0
            } else {
                (v as usize).min(dims[k] - 1)
            };
        }
        c
    }

    /// Index and squared distance of the nearest reference point. Ties go to
    /// the lowest index, matching a brute-force scan.
    pub fn nearest(&self, q: &Point) -> (usize, f64) {
        // query cell, possibly outside the grid
        let mut qc = [0isize; 3];
        for k in 0..3 {
            qc[k] = ((q[k] - self.origin[k]) / self.cell).floor() as isize;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        // shells closer than `outside` do not touch the grid
        let outside = qc
            .iter()
            .zip(&self.dims)
            .map(|(&c, &d)| {
                if c < 0 {
                    -c
                } else {
                    (c - d as isize + 1).max(0)
                }
            })
            .max()
            .unwrap();
        let max_r = outside + self.dims.iter().map(|&d| d as isize).max().unwrap();
        for r in outside..=max_r {
            // anything in shell r is at least (r-1)·cell away
            if r >= 1 {
                let bound = (r - 1) as f64 * self.cell;
                if bound * bound > best.1 {
                    break;
                }
            }
            self.visit_shell(&qc, r, |i| {
                let d = sq_dist(q, &self.points[i]);
                if d < best.1 || (d == best.1 && i < best.0) {
                    best = (i, d);
                }
            });
        }
        best
    }

    fn visit_shell(&self, qc: &[isize; 3], r: isize, mut f: impl FnMut(usize)) {
        let lo = |k: usize| (qc[k] - r).max(0);
        let hi = |k: usize| (qc[k] + r).min(self.dims[k] as isize - 1);
        for z in lo(2)..=hi(2) {
            for y in lo(1)..=hi(1) {
                for x in lo(0)..=hi(0) {
                    let on_shell =
                        (x - qc[0]).abs() == r || (y - qc[1]).abs() == r || (z - qc[2]).abs() == r;
                    if !on_shell {
                        continue;
                    }
                    let key = x as usize + self.dims[0] * (y as usize + self.dims[1] * z as usize);
                    for &i in &self.order[self.starts[key]..self.starts[key + 1]] {
                        f(i);
                    }
                }
            }
        }
    }
}

/// For every query, the nearest reference index and squared distance.
pub fn nearest_neighbors(queries: &[Point], reference: &[Point]) -> Vec<(usize, f64)> {
    let grid = Grid::build(reference);
    queries.iter().map(|q| grid.nearest(q)).collect()
}

/// O(N·M) reference implementation.
pub fn nearest_neighbors_brute(queries: &[Point], reference: &[Point]) -> Vec<(usize, f64)> {
    queries
        .iter()
        .map(|q| {
            let mut best = (usize::MAX, f64::INFINITY);
            for (i, p) in reference.iter().enumerate() {
                let d = sq_dist(q, p);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best
        })
        .collect()
}
