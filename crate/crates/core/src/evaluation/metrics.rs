//! Chamfer distance and F-score with an exact grid nearest-neighbour search.

use crate::world::PointCloud;
use crate::{Error, Result};

#[inline]
pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Uniform bucket grid over a point set. Queries return exactly the
/// brute-force minimum since both evaluate [`distance`] on the same pairs
/// that can attain it.
pub struct NeighborGrid<'a> {
    points: &'a [[f64; 3]],
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    /// Cell start offsets into `order` (length `cells + 1`).
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> NeighborGrid<'a> {
    pub fn new(points: &'a [[f64; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let per_axis = (points.len() as f64).cbrt().ceil().max(1.0);
        let cell = if extent > 0.0 { extent / per_axis } else { 1.0 };
        let mut dims = [1usize; 3];
        for a in 0..3 {
            dims[a] = (((hi[a] - lo[a]) / cell).floor() as usize + 1).max(1);
        }
        let mut grid = Self {
            points,
            origin: lo,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let cells = dims[0] * dims[1] * dims[2];
        let ids: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        let mut counts = vec![0usize; cells + 1];
        for &c in &ids {
            counts[c + 1] += 1;
        }
        for i in 0..cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &c) in ids.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        grid
    }

    fn cell_of(&self, p: &[f64; 3]) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let x = ((p[a] - self.origin[a]) / self.cell).floor();
            c[a] = if x <= 0.0 { 0 } else { (x as usize).min(self.dims[a] - 1) };
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    /// Distance from `q` to its nearest point in the grid (`∞` if empty).
    pub fn nearest(&self, q: &[f64; 3]) -> f64 {
        if self.points.is_empty() {
            return f64::INFINITY;
        }
        let c = self.cell_of(q);
        let max_ring = *self.dims.iter().max().unwrap();
        let mut best = f64::INFINITY;
        for r in 0..=max_ring {
            let lo: Vec<i64> = (0..3).map(|a| c[a] as i64 - r as i64).collect();
            let hi: Vec<i64> = (0..3).map(|a| c[a] as i64 + r as i64).collect();
            for x in lo[0].max(0)..=hi[0].min(self.dims[0] as i64 - 1) {
                for y in lo[1].max(0)..=hi[1].min(self.dims[1] as i64 - 1) {
                    for z in lo[2].max(0)..=hi[2].min(self.dims[2] as i64 - 1) {
                        let on_shell = x == lo[0] || x == hi[0] || y == lo[1] || y == hi[1] || z == lo[2] || z == hi[2];
                        if r > 0 && !on_shell {
                            continue;
                        }
                        let f = self.flat([x as usize, y as usize, z as usize]);
                        for &i in &self.order[self.starts[f]..self.starts[f + 1]] {
                            let d = distance(q, &self.points[i]);
                            if d < best {
                                best = d;
                            }
                        }
                    }
                }
            }
            // Cells beyond ring r are at least r cell widths away; the margin
            // absorbs rounding in the cell assignment.
            if best <= (r as f64 - 1e-6) * self.cell {
                break;
            }
        }
        best
    }
}

/// Nearest-neighbour distance from every point of `a` to the set `b`.
pub fn nearest_distances(a: &PointCloud, b: &PointCloud) -> Vec<f64> {
    let grid = NeighborGrid::new(&b.points);
    a.points.iter().map(|p| grid.nearest(p)).collect()
}

fn nonempty(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("metric on an empty point cloud"));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// `mean_a min_b ‖a − b‖ + mean_b min_a ‖a − b‖` (not squared).
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    nonempty(a, b)?;
    Ok(mean(&nearest_distances(a, b)) + mean(&nearest_distances(b, a)))
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        200.0 * (precision * recall) / (precision + recall)
    }
}

fn hit_rate(d: &[f64], threshold: f64) -> f64 {
    d.iter().filter(|&&x| x <= threshold).count() as f64 / d.len() as f64
}

/// F-score in percent; a distance equal to the threshold counts as a hit.
pub fn f_score(a: &PointCloud, b: &PointCloud, threshold: f64) -> Result<f64> {
    nonempty(a, b)?;
    if !(threshold > 0.0) {
        return Err(Error::invalid("F-score threshold must be positive"));
    }
    let p = hit_rate(&nearest_distances(a, b), threshold);
    let r = hit_rate(&nearest_distances(b, a), threshold);
    Ok(f1(p, r))
}

/// Chamfer distance and F-scores at 0.1 and 0.05 from one pair of
/// nearest-neighbour sweeps.
pub fn geometry_metrics(a: &PointCloud, b: &PointCloud) -> Result<super::GeoMetrics> {
    nonempty(a, b)?;
    let ab = nearest_distances(a, b);
    let ba = nearest_distances(b, a);
    Ok(super::GeoMetrics {
        cd: mean(&ab) + mean(&ba),
        f1_0_1: f1(hit_rate(&ab, 0.1), hit_rate(&ba, 0.1)),
        f1_0_05: f1(hit_rate(&ab, 0.05), hit_rate(&ba, 0.05)),
    })
}
