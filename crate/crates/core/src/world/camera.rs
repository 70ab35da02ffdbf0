use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BIN_COUNT: usize = 4;
pub const BIN_HALF_WIDTH: f64 = 45.0;

/// Orthographic camera on a sphere around the origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Degrees in `[0, 360)`.
    pub azimuth: f64,
    pub elevation: f64,
    /// Azimuth bin: bins are centered at 0°, 90°, 180°, 270° and span ±45°.
    pub bin: usize,
}

pub fn normalize_azimuth(deg: f64) -> f64 {
    let a = deg.rem_euclid(360.0);
    if a >= 360.0 {
        0.0
    } else {
        a
    }
}

pub fn azimuth_bin(deg: f64) -> usize {
    (normalize_azimuth(deg) / 90.0).round() as usize % BIN_COUNT
}

impl Camera {
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        let azimuth = normalize_azimuth(azimuth);
        Self {
            azimuth,
            elevation,
            bin: azimuth_bin(azimuth),
        }
    }

    /// Orthonormal `(right, up, forward)` basis; `forward` points from the
    /// camera toward the origin.
    pub fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let (sa, ca) = self.azimuth.to_radians().sin_cos();
        let (se, ce) = self.elevation.to_radians().sin_cos();
        let forward = [-ce * ca, -ce * sa, -se];
        let right = [-sa, ca, 0.0];
        let up = [
            right[1] * forward[2] - right[2] * forward[1],
            right[2] * forward[0] - right[0] * forward[2],
            right[0] * forward[1] - right[1] * forward[0],
        ];
        (right, up, forward)
    }
}

/// Camera with azimuth uniform in `bin`'s span and elevation uniform in
/// `[-elevation_range, elevation_range]`.
pub fn sample_in_bin<R: Rng + ?Sized>(rng: &mut R, bin: usize, elevation_range: f64) -> Camera {
    let az = 90.0 * bin as f64 - BIN_HALF_WIDTH + rng.random::<f64>() * 2.0 * BIN_HALF_WIDTH;
    let el = if elevation_range > 0.0 {
        rng.random_range(-elevation_range..=elevation_range)
    } else {
        0.0
    };
    Camera::new(az, el)
}

/// `count` cameras, each in a bin drawn uniformly from `bins`.
pub fn sample_views<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    bins: &[usize],
    elevation_range: f64,
) -> Result<Vec<Camera>> {
    if bins.is_empty() {
        return Err(Error::invalid("no azimuth bins to sample from"));
    }
    if count == 0 {
        return Err(Error::invalid("view count must be at least 1"));
    }
    if let Some(b) = bins.iter().find(|&&b| b >= BIN_COUNT) {
        return Err(Error::invalid(format!("azimuth bin {b} out of range")));
    }
    Ok((0..count)
        .map(|_| {
            let bin = bins[rng.random_range(0..bins.len())];
            sample_in_bin(rng, bin, elevation_range)
        })
        .collect())
}
