//! On-disk dataset: a JSONL manifest plus every cloud in one tensor file.
//! View features are not stored; they are a pure function of cloud and camera.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;
use roar3d_core::config::RunConfig;
use roar3d_core::numerics::{read_tensors, write_tensors, NamedTensor, Tensor};
use roar3d_core::world::dataset::{build_records, read_manifest, write_manifest};
use roar3d_core::world::{PointCloud, ShapeId, ShapeRecord, Split};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.jsonl";
pub const CLOUDS: &str = "clouds.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<ShapeRecord>,
    pub clouds: Vec<PointCloud>,
}

impl Dataset {
    pub fn generate(cfg: &RunConfig) -> CliResult<Self> {
        let d = &cfg.data;
        let records = build_records(
            cfg.seed,
            [(Split::Train, d.train), (Split::Val, d.val), (Split::Test, d.test)],
            &d.classes,
        )?;
        let clouds = records
            .par_iter()
            .map(|r| r.generate(cfg.world.points))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { records, clouds })
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir)?;
        write_manifest(BufWriter::new(File::create(dir.join(MANIFEST))?), &self.records)?;
        let tensors: Vec<NamedTensor> = self
            .records
            .iter()
            .zip(&self.clouds)
            .map(|(r, c)| (r.shape_id.clone(), cloud_tensor(c)))
            .collect();
        write_tensors(&dir.join(CLOUDS), &tensors)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        for f in [MANIFEST, CLOUDS] {
            if !dir.join(f).exists() {
                return Err(CliError::missing(&dir.join(f)));
            }
        }
        let records = read_manifest(BufReader::new(File::open(dir.join(MANIFEST))?))?;
        let tensors = read_tensors(&dir.join(CLOUDS))?;
        if tensors.len() != records.len() {
            return Err(CliError::new(
                crate::error::Failure::Other,
                format!("{} clouds for {} manifest records", tensors.len(), records.len()),
            ));
        }
        let mut clouds = Vec::with_capacity(records.len());
        for (r, (name, t)) in records.iter().zip(tensors) {
            if name != r.shape_id || t.rank() != 2 || t.last_dim() != 3 {
                return Err(CliError::new(
                    crate::error::Failure::Other,
                    format!("cloud `{name}` does not match record `{}`", r.shape_id),
                ));
            }
            let mut cloud = PointCloud::new(t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect());
            cloud.shape_id = Some(ShapeId {
                seed: r.seed,
                class: r.class,
            });
            clouds.push(cloud);
        }
        Ok(Self { records, clouds })
    }

    pub fn split(&self, split: Split) -> Vec<(ShapeRecord, PointCloud)> {
        self.records
            .iter()
            .zip(&self.clouds)
            .filter(|(r, _)| r.split == split)
            .map(|(r, c)| (r.clone(), c.clone()))
            .collect()
    }

    pub fn find(&self, shape_id: &str) -> Option<(ShapeRecord, PointCloud)> {
        self.records
            .iter()
            .position(|r| r.shape_id == shape_id)
            .map(|i| (self.records[i].clone(), self.clouds[i].clone()))
    }
}

pub fn cloud_tensor(c: &PointCloud) -> Tensor {
    Tensor::new(vec![c.len(), 3], c.points.iter().flatten().copied().collect()).expect("cloud shape")
}
