//! Deterministic stand-in for a frozen image encoder.
//!
//! The cloud is projected orthographically onto the camera's image plane, cut
//! into a `g × g` patch grid, summarised per patch by five statistics and
//! lifted to `feat_dim` channels by one fixed random matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Camera, PointCloud};
use crate::numerics::Tensor;

/// Per-patch statistics before lifting.
pub const RAW_STATS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Patches per image side; `S = patch_grid²`.
    pub patch_grid: usize,
    pub feat_dim: usize,
    /// Image plane covers `[-image_extent, image_extent]²`.
    pub image_extent: f64,
    /// Seed of the lift matrix, shared by every view and every run.
    pub lift_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_grid: 4,
            feat_dim: 32,
            image_extent: 1.6,
            lift_seed: 0x00d1_0e5e,
        }
    }
}

impl EncoderConfig {
    pub fn patches(&self) -> usize {
        self.patch_grid * self.patch_grid
    }
}

#[derive(Clone, Debug)]
pub struct ViewEncoder {
    cfg: EncoderConfig,
    /// `[RAW_STATS, feat_dim]`, row-major.
    lift: Vec<f64>,
}

impl ViewEncoder {
    pub fn new(cfg: EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.lift_seed);
        let scale = 1.0 / (RAW_STATS as f64).sqrt();
        let lift = (0..RAW_STATS * cfg.feat_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self { cfg, lift }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Raw `[S, 5]` statistics: occupancy (patch count · S / P), mean and
    /// variance of depth along the view direction, and the projected centroid
    /// in image-plane coordinates. Empty patches are all zero.
    pub fn patch_stats(&self, pc: &PointCloud, cam: &Camera) -> Vec<[f64; RAW_STATS]> {
        let g = self.cfg.patch_grid;
        let s = g * g;
        let ext = self.cfg.image_extent;
        let (right, up, fwd) = cam.basis();
        let dot = |a: &[f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let mut count = vec![0usize; s];
        let mut sums = vec![[0.0f64; 4]; s]; // depth, depth², u, v
        for p in &pc.points {
            let (u, v, depth) = (dot(p, right), dot(p, up), dot(p, fwd));
            let cu = (u + ext) / (2.0 * ext) * g as f64;
            let cv = (ext - v) / (2.0 * ext) * g as f64;
            if !(0.0..g as f64).contains(&cu) || !(0.0..g as f64).contains(&cv) {
                continue;
            }
            let idx = cv as usize * g + cu as usize;
            count[idx] += 1;
            let acc = &mut sums[idx];
            acc[0] += depth;
            acc[1] += depth * depth;
            acc[2] += u;
            acc[3] += v;
        }
        let total = pc.points.len().max(1) as f64;
        count
            .iter()
            .zip(&sums)
            .map(|(&c, acc)| {
                if c == 0 {
                    return [0.0; RAW_STATS];
                }
                let n = c as f64;
                let mean = acc[0] / n;
                let var = (acc[1] / n - mean * mean).max(0.0);
                [n * s as f64 / total, mean, var, acc[2] / n, acc[3] / n]
            })
            .collect()
    }

    /// `[S, feat_dim]` patch features of `pc` seen from `cam`.
    pub fn encode_view(&self, pc: &PointCloud, cam: &Camera) -> Tensor {
        let stats = self.patch_stats(pc, cam);
        let d = self.cfg.feat_dim;
        let mut out = vec![0.0; stats.len() * d];
        for (row, st) in out.chunks_mut(d).zip(&stats) {
            for (k, &x) in st.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (o, w) in row.iter_mut().zip(&self.lift[k * d..(k + 1) * d]) {
                    *o += x * w;
                }
            }
        }
        Tensor::new(vec![stats.len(), d], out).expect("patch grid shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_shape, ShapeClass};

    fn encoder() -> ViewEncoder {
        ViewEncoder::new(EncoderConfig::default())
    }

    #[test]
    fn empty_patches_encode_to_zero() {
        let enc = encoder();
        // A single point lands in exactly one patch.
        let pc = PointCloud::new(vec![[0.0, 0.1, 0.1]]);
        let f = enc.encode_view(&pc, &Camera::new(0.0, 0.0));
        let nonzero: Vec<usize> = (0..f.rows()).filter(|&r| f.row(r).iter().any(|&v| v != 0.0)).collect();
        assert_eq!(nonzero.len(), 1);
        let empty = enc.encode_view(&PointCloud::new(vec![]), &Camera::new(0.0, 0.0));
        assert!(empty.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoding_is_deterministic() {
        let enc = encoder();
        let pc = generate_shape(1, ShapeClass::NotchedBox, 1024).unwrap();
        let cam = Camera::new(33.0, 12.0);
        let a = enc.encode_view(&pc, &cam);
        let b = ViewEncoder::new(EncoderConfig::default()).encode_view(&pc, &cam);
        assert_eq!(a, b);
    }

    #[test]
    fn moving_points_out_of_one_patch_changes_only_that_patch() {
        let enc = encoder();
        let cam = Camera::new(0.0, 0.0);
        let pc = generate_shape(2, ShapeClass::LPrism, 1024).unwrap();
        let base = enc.encode_view(&pc, &cam);
        // Points of the busiest patch are pushed off the image plane.
        let stats = enc.patch_stats(&pc, &cam);
        let target = (0..stats.len())
            .max_by(|&a, &b| stats[a][0].total_cmp(&stats[b][0]))
            .unwrap();
        let g = enc.config().patch_grid;
        let ext = enc.config().image_extent;
        let (right, up, _) = cam.basis();
        let mut moved = pc.clone();
        for p in &mut moved.points {
            let u = p[0] * right[0] + p[1] * right[1] + p[2] * right[2];
            let v = p[0] * up[0] + p[1] * up[1] + p[2] * up[2];
            let cu = ((u + ext) / (2.0 * ext) * g as f64) as usize;
            let cv = ((ext - v) / (2.0 * ext) * g as f64) as usize;
            if cv * g + cu == target {
                // Along `right` by a full image width.
                for a in 0..3 {
                    p[a] += 4.0 * ext * right[a];
                }
            }
        }
        let after = enc.encode_view(&moved, &cam);
        for r in 0..base.rows() {
            if r == target {
                assert!(after.row(r).iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(base.row(r), after.row(r), "patch {r} changed");
            }
        }
    }
}
