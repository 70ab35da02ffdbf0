//! Procedural shapes, cameras over the four azimuth bins, and the synthetic
//! per-view feature encoder.

pub mod camera;
pub mod dataset;
pub mod encoder;
pub mod shapes;

use serde::{Deserialize, Serialize};

pub use camera::{azimuth_bin, sample_in_bin, sample_views, Camera, BIN_COUNT};
pub use dataset::{ShapeRecord, Split};
pub use encoder::{EncoderConfig, ViewEncoder};
pub use shapes::{generate_shape, rotate_azimuth, PointCloud, ShapeClass, ShapeId};

use crate::numerics::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Points per generated cloud.
    pub points: usize,
    /// Half-range of sampled camera elevations, degrees.
    pub elevation_range: f64,
    pub encoder: EncoderConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            points: 2048,
            elevation_range: 30.0,
            encoder: EncoderConfig::default(),
        }
    }
}

/// Patch features of `V` views, each `[S, D_feat]`, with their cameras and an
/// optional primary-view designation.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatureSet {
    pub features: Vec<Tensor>,
    pub cameras: Vec<Camera>,
    pub primary: Option<usize>,
}

impl ViewFeatureSet {
    pub fn new(features: Vec<Tensor>, cameras: Vec<Camera>, primary: Option<usize>) -> Result<Self> {
        let set = Self {
            features,
            cameras,
            primary,
        };
        set.validate()?;
        Ok(set)
    }

    /// Encodes `pc` from each camera; the first camera is primary.
    pub fn encode(encoder: &ViewEncoder, pc: &PointCloud, cameras: &[Camera]) -> Result<Self> {
        let features = cameras.iter().map(|c| encoder.encode_view(pc, c)).collect();
        Self::new(features, cameras.to_vec(), Some(0))
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .features
            .first()
            .ok_or_else(|| Error::invalid("a view set needs at least one view"))?;
        if first.rank() != 2 {
            return Err(Error::shape("view features must be [S, D]"));
        }
        if self.features.iter().any(|f| f.shape() != first.shape()) {
            return Err(Error::shape("views disagree on [S, D]"));
        }
        if self.cameras.len() != self.features.len() {
            return Err(Error::shape(format!(
                "{} cameras for {} views",
                self.cameras.len(),
                self.features.len()
            )));
        }
        if let Some(p) = self.primary {
            if p >= self.features.len() {
                return Err(Error::invalid(format!("primary view {p} out of range")));
            }
        }
        if self.features.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite("view features".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn patches(&self) -> usize {
        self.features[0].shape()[0]
    }

    pub fn feat_dim(&self) -> usize {
        self.features[0].shape()[1]
    }

    /// Keeps the views at `order` (in that order); the primary designation
    /// follows its view if kept.
    pub fn select(&self, order: &[usize]) -> Result<Self> {
        if let Some(&bad) = order.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("view {bad} out of range")));
        }
        let primary = self
            .primary
            .and_then(|p| order.iter().position(|&i| i == p));
        Self::new(
            order.iter().map(|&i| self.features[i].clone()).collect(),
            order.iter().map(|&i| self.cameras[i]).collect(),
            primary,
        )
    }

    pub fn bins(&self) -> Vec<usize> {
        self.cameras.iter().map(|c| c.bin).collect()
    }
}
