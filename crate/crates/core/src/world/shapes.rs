//! Procedural, rotationally asymmetric shapes built from face-sharing boxes and
//! surface-sampled into point clouds.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::hash_key;
use crate::{Error, Result};

/// Largest half-extent of a normalized shape along any axis.
pub const NORMALIZED_HALF_EXTENT: f64 = 0.9;
pub const MIN_POINTS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeClass {
    NotchedBox,
    LPrism,
    AsymmetricCross,
    SteppedPyramid,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [
        ShapeClass::NotchedBox,
        ShapeClass::LPrism,
        ShapeClass::AsymmetricCross,
        ShapeClass::SteppedPyramid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::NotchedBox => "notched-box",
            ShapeClass::LPrism => "L-prism",
            ShapeClass::AsymmetricCross => "asymmetric-cross",
            ShapeClass::SteppedPyramid => "stepped-pyramid",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownClass(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeId {
    pub seed: u64,
    pub class: ShapeClass,
}

impl fmt::Display for ShapeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.class, self.seed)
    }
}

/// Points in the canonical box `[-1, 1]³`; `z` is the vertical axis.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub shape_id: Option<ShapeId>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self {
            points,
            shape_id: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(mut lo, mut hi), p| {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
            (lo, hi)
        }))
    }
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl Aabb {
    fn new(lo: [f64; 3], hi: [f64; 3]) -> Self {
        Self { lo, hi }
    }

    fn strictly_contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] > self.lo[a] && p[a] < self.hi[a])
    }

    fn face_area(&self, axis: usize) -> f64 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        (self.hi[u] - self.lo[u]) * (self.hi[v] - self.lo[v])
    }
}

fn boxes_for(class: ShapeClass, rng: &mut ChaCha8Rng) -> Vec<Aabb> {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    match class {
        ShapeClass::NotchedBox => {
            // Non-square footprint plus one corner notch breaks every
            // nontrivial quarter turn.
            let (a, b, c) = (u(1.5, 2.0), u(0.8, 1.15), u(0.8, 1.4));
            let (na, nb, nc) = (a * u(0.4, 0.55), b * u(0.45, 0.6), c * u(0.4, 0.6));
            vec![
                Aabb::new([0.0, 0.0, 0.0], [a - na, b, c]),
                Aabb::new([a - na, 0.0, 0.0], [a, b - nb, c]),
                Aabb::new([a - na, b - nb, 0.0], [a, b, c - nc]),
            ]
        }
        ShapeClass::LPrism => {
            let (a, b, h) = (u(1.5, 2.0), u(1.0, 1.4), u(0.6, 1.2));
            let (t1, t2) = (b * u(0.3, 0.45), a * u(0.25, 0.4));
            vec![
                Aabb::new([0.0, 0.0, 0.0], [a, t1, h]),
                Aabb::new([0.0, t1, 0.0], [t2, b, h]),
            ]
        }
        ShapeClass::AsymmetricCross => {
            let w = u(0.35, 0.5);
            let h = u(0.5, 1.0);
            let half = w / 2.0;
            let (px, nx, py, ny) = (u(0.8, 1.0), u(0.2, 0.35), u(0.5, 0.7), u(0.3, 0.45));
            vec![
                Aabb::new([-half, -half, 0.0], [half, half, h]),
                Aabb::new([half, -half, 0.0], [half + px, half, h]),
                Aabb::new([-half - nx, -half, 0.0], [-half, half, h]),
                Aabb::new([-half, half, 0.0], [half, half + py, h]),
                Aabb::new([-half, -half - ny, 0.0], [half, -half, h]),
            ]
        }
        ShapeClass::SteppedPyramid => {
            let (a, b) = (u(1.5, 2.0), u(1.1, 1.5));
            let (h0, h1, h2) = (u(0.3, 0.45), u(0.3, 0.45), u(0.3, 0.45));
            let (s1x, s1y) = (u(0.55, 0.7), u(0.6, 0.75));
            let (s2x, s2y) = (u(0.4, 0.6), u(0.45, 0.65));
            let (a1, b1) = (a * s1x, b * s1y);
            let (a2, b2) = (a1 * s2x, b1 * s2y);
            vec![
                Aabb::new([0.0, 0.0, 0.0], [a, b, h0]),
                Aabb::new([0.0, 0.0, h0], [a1, b1, h0 + h1]),
                Aabb::new([0.0, 0.0, h0 + h1], [a2, b2, h0 + h1 + h2]),
            ]
        }
    }
}

/// Uniform surface sample of the union of face-sharing boxes.
fn sample_surface(boxes: &[Aabb], count: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    // (box, axis, side) with cumulative area for face selection.
    let mut faces = Vec::with_capacity(boxes.len() * 6);
    let mut total = 0.0;
    for (bi, b) in boxes.iter().enumerate() {
        for axis in 0..3 {
            for side in 0..2 {
                total += b.face_area(axis);
                faces.push((bi, axis, side, total));
            }
        }
    }
    let eps = 1e-9;
    let mut pts = Vec::with_capacity(count);
    while pts.len() < count {
        let r = rng.random::<f64>() * total;
        let idx = faces.partition_point(|f| f.3 <= r).min(faces.len() - 1);
        let (bi, axis, side, _) = faces[idx];
        let b = &boxes[bi];
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = if a == axis {
                if side == 0 {
                    b.lo[a]
                } else {
                    b.hi[a]
                }
            } else {
                b.lo[a] + rng.random::<f64>() * (b.hi[a] - b.lo[a])
            };
        }
        // A face patch is interior when stepping outward enters another box.
        let mut probe = p;
        probe[axis] += if side == 0 { -eps } else { eps };
        let interior = boxes
            .iter()
            .enumerate()
            .any(|(oi, o)| oi != bi && o.strictly_contains(probe));
        if !interior {
            pts.push(p);
        }
    }
    pts
}

/// Deterministic surface-sampled shape of `class`, centered and scaled so its
/// bounding box is centered at the origin with half-extent at most
/// [`NORMALIZED_HALF_EXTENT`].
pub fn generate_shape(seed: u64, class: ShapeClass, points: usize) -> Result<PointCloud> {
    if points < MIN_POINTS {
        return Err(Error::invalid(format!("need at least {MIN_POINTS} points, got {points}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hash_key(&[seed, class.tag()]));
    let boxes = boxes_for(class, &mut rng);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for b in &boxes {
        for a in 0..3 {
            lo[a] = lo[a].min(b.lo[a]);
            hi[a] = hi[a].max(b.hi[a]);
        }
    }
    let center: Vec<f64> = (0..3).map(|a| 0.5 * (lo[a] + hi[a])).collect();
    let half = (0..3).map(|a| 0.5 * (hi[a] - lo[a])).fold(0.0, f64::max);
    let scale = NORMALIZED_HALF_EXTENT / half;
    let raw = sample_surface(&boxes, points, &mut rng);
    let pts = raw
        .into_iter()
        .map(|p| {
            [
                (p[0] - center[0]) * scale,
                (p[1] - center[1]) * scale,
                (p[2] - center[2]) * scale,
            ]
        })
        .collect();
    Ok(PointCloud {
        points: pts,
        shape_id: Some(ShapeId { seed, class }),
    })
}

/// Rigid rotation about the vertical (`z`) axis, right-handed: a quarter turn
/// maps `(1, 0, 0)` to `(0, 1, 0)`. Multiples of 90° are applied exactly.
pub fn rotate_azimuth(pc: &PointCloud, degrees: f64) -> PointCloud {
    let turns = degrees / 90.0;
    let points = if turns.fract() == 0.0 && turns.is_finite() {
        let q = (turns as i64).rem_euclid(4);
        pc.points
            .iter()
            .map(|&[x, y, z]| match q {
                0 => [x, y, z],
                1 => [-y, x, z],
                2 => [-x, -y, z],
                _ => [y, -x, z],
            })
            .collect()
    } else {
        let (s, c) = degrees.to_radians().sin_cos();
        pc.points
            .iter()
            .map(|&[x, y, z]| [c * x - s * y, s * x + c * y, z])
            .collect()
    };
    PointCloud {
        points,
        shape_id: pc.shape_id,
    }
}
