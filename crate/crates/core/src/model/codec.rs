//! Analytic occupancy codec between point clouds and latent tokens.
//!
//! The cube `[-1, 1]³` is cut into an `n × n × n` grid (`n` even). Token
//! `(ix·n + iy)·n + iz` holds `[occupancy, ox, oy, oz, 0, ...]`: occupancy is
//! `min(1, count / saturation)` and the offset is the centroid of the cell's
//! points relative to the cell center, in half-cell units (so in `[-1, 1]`).
//!
//! Cell assignment is symmetric under negation (`x` and `-x` land in mirrored
//! cells even on boundaries), so quarter turns about the vertical axis act on
//! encoded tokens as an exact cell permutation.

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::world::PointCloud;
use crate::{Error, Result};

/// Channels carrying geometry; any further channels are zero.
pub const GEOMETRY_CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    /// Cells per axis; must be even.
    pub grid: usize,
    /// Token width, at least 4.
    pub channels: usize,
    /// A cell saturates at `saturation_fraction · P` points.
    pub saturation_fraction: f64,
    pub threshold: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            grid: 4,
            channels: GEOMETRY_CHANNELS,
            saturation_fraction: 1.0 / 256.0,
            threshold: 0.5,
        }
    }
}

impl CodecConfig {
    pub fn tokens(&self) -> usize {
        self.grid * self.grid * self.grid
    }

    pub fn cell_size(&self) -> f64 {
        2.0 / self.grid as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 || self.grid % 2 != 0 {
            return Err(Error::invalid(format!("codec grid must be even and ≥ 2, got {}", self.grid)));
        }
        if self.channels < GEOMETRY_CHANNELS {
            return Err(Error::invalid(format!("codec needs at least {GEOMETRY_CHANNELS} channels")));
        }
        if !(self.saturation_fraction > 0.0 && self.saturation_fraction <= 1.0) {
            return Err(Error::invalid("saturation_fraction must be in (0, 1]"));
        }
        Ok(())
    }

    /// Index of the cell containing coordinate `x`, with mirrored boundaries.
    pub fn cell_of(&self, x: f64) -> usize {
        let m = self.grid / 2;
        let k = |a: f64| ((a * m as f64).floor() as usize).min(m - 1);
        if x.is_sign_negative() {
            m - 1 - k(-x)
        } else {
            m + k(x)
        }
    }

    pub fn cell_center(&self, i: usize) -> f64 {
        -1.0 + (i as f64 + 0.5) * self.cell_size()
    }

    pub fn token_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.grid + iy) * self.grid + iz
    }

    pub fn token_cell(&self, i: usize) -> (usize, usize, usize) {
        let n = self.grid;
        (i / (n * n), (i / n) % n, i % n)
    }
}

/// `N × C` latent with its orientation tag.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTokens {
    pub tokens: Tensor,
    /// Degrees; bookkeeping for training-sample construction only.
    pub azimuth_tag: f64,
}

impl LatentTokens {
    pub fn new(tokens: Tensor, azimuth_tag: f64) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(Error::shape(format!("latent must be rank 2, got {:?}", tokens.shape())));
        }
        if !tokens.is_finite() {
            return Err(Error::NonFinite("latent tokens".into()));
        }
        Ok(Self { tokens, azimuth_tag })
    }
}

pub fn latent_encode(pc: &PointCloud, cfg: &CodecConfig) -> LatentTokens {
    let n = cfg.tokens();
    let c = cfg.channels;
    let mut count = vec![0usize; n];
    let mut sum = vec![[0.0f64; 3]; n];
    for p in &pc.points {
        let idx = cfg.token_index(cfg.cell_of(p[0]), cfg.cell_of(p[1]), cfg.cell_of(p[2]));
        count[idx] += 1;
        for a in 0..3 {
            sum[idx][a] += p[a];
        }
    }
    let saturation = (cfg.saturation_fraction * pc.len() as f64).max(1.0);
    let half = cfg.cell_size() / 2.0;
    let mut data = vec![0.0; n * c];
    for (i, row) in data.chunks_mut(c).enumerate() {
        if count[i] == 0 {
            continue;
        }
        let (ix, iy, iz) = cfg.token_cell(i);
        let centers = [cfg.cell_center(ix), cfg.cell_center(iy), cfg.cell_center(iz)];
        let k = count[i] as f64;
        row[0] = (k / saturation).min(1.0);
        for a in 0..3 {
            row[1 + a] = ((sum[i][a] / k - centers[a]) / half).clamp(-1.0, 1.0);
        }
    }
    LatentTokens {
        tokens: Tensor::new(vec![n, c], data).expect("codec shape"),
        azimuth_tag: 0.0,
    }
}

/// One point per cell whose occupancy reaches the threshold. An all-empty
/// latent decodes to an empty cloud.
pub fn latent_decode(z: &LatentTokens, cfg: &CodecConfig) -> PointCloud {
    let half = cfg.cell_size() / 2.0;
    let mut points = Vec::new();
    for i in 0..z.tokens.rows().min(cfg.tokens()) {
        let row = z.tokens.row(i);
        if !(row[0] >= cfg.threshold) {
            continue;
        }
        let (ix, iy, iz) = cfg.token_cell(i);
        let centers = [cfg.cell_center(ix), cfg.cell_center(iy), cfg.cell_center(iz)];
        let mut p = [0.0; 3];
        for a in 0..3 {
            let o = if row[1 + a].is_finite() { row[1 + a].clamp(-1.0, 1.0) } else { 0.0 };
            p[a] = centers[a] + o * half;
        }
        points.push(p);
    }
    PointCloud::new(points)
}

/// Rotates the encoded geometry by `quarter_turns · 90°` about the vertical
/// axis, matching `rotate_azimuth` on the cloud: `(x, y) → (−y, x)` per turn.
pub fn rotate_latent(z: &LatentTokens, quarter_turns: usize, cfg: &CodecConfig) -> LatentTokens {
    let n = cfg.grid;
    let c = z.tokens.last_dim();
    let mut cur = z.tokens.clone();
    for _ in 0..quarter_turns % 4 {
        let mut next = Tensor::zeros(cur.shape());
        for i in 0..cfg.tokens() {
            let (ix, iy, iz) = cfg.token_cell(i);
            let j = cfg.token_index(n - 1 - iy, ix, iz);
            let src = cur.row(i);
            let dst = next.row_mut(j);
            dst.copy_from_slice(src);
            if c >= GEOMETRY_CHANNELS {
                dst[1] = -src[2];
                dst[2] = src[1];
            }
        }
        cur = next;
    }
    LatentTokens {
        tokens: cur,
        azimuth_tag: crate::world::camera::normalize_azimuth(z.azimuth_tag + 90.0 * (quarter_turns % 4) as f64),
    }
}
