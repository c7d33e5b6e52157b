//! On-disk demonstration sets: `DIR/manifest.json` plus `DIR/images/*.ppm`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ppm::RgbImage;
use super::scene::{self, DemoMeta, Demonstration};
use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic, write_json_atomic};
use crate::model::Sample;

pub const MANIFEST_VERSION: u32 = 1;
/// Seed offset of the fixed held-out episodes.
pub const TEST_SEED_BASE: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub action: Vec<f64>,
    pub meta: DemoMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub image_size: [usize; 2],
    pub action_dim: usize,
    /// Action entries a grasp-profile mixture should model.
    #[serde(default)]
    pub grasp_dims: Vec<usize>,
    pub entries: Vec<ManifestEntry>,
}

/// Episodes `seed, seed + 1, ..., seed + n - 1`.
pub fn generate(n: usize, seed: u64) -> Result<Vec<Demonstration>> {
    (0..n as u64).map(|i| scene::generate_demo(seed + i)).collect()
}

pub fn write_dataset(dir: &Path, demos: &[Demonstration]) -> Result<DatasetManifest> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut entries = Vec::with_capacity(demos.len());
    for (i, d) in demos.iter().enumerate() {
        let rel = format!("images/{i:06}.ppm");
        write_atomic(&dir.join(&rel), &d.image.encode())?;
        entries.push(ManifestEntry {
            image: rel,
            action: d.action.clone(),
            meta: d.meta.clone(),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        image_size: [scene::IMAGE_SIZE, scene::IMAGE_SIZE],
        action_dim: scene::ACTION_DIM,
        grasp_dims: scene::GRASP_DIMS.to_vec(),
        entries,
    };
    write_json_atomic(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub demos: Vec<Demonstration>,
}

impl Dataset {
    pub fn from_demos(demos: Vec<Demonstration>) -> Self {
        let entries = demos
            .iter()
            .enumerate()
            .map(|(i, d)| ManifestEntry {
                image: format!("images/{i:06}.ppm"),
                action: d.action.clone(),
                meta: d.meta.clone(),
            })
            .collect();
        Self {
            manifest: DatasetManifest {
                version: MANIFEST_VERSION,
                image_size: [scene::IMAGE_SIZE, scene::IMAGE_SIZE],
                action_dim: scene::ACTION_DIM,
                grasp_dims: scene::GRASP_DIMS.to_vec(),
                entries,
            },
            demos,
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Input(format!("unsupported manifest version {}", manifest.version)));
        }
        let [h, w] = manifest.image_size;
        let mut demos = Vec::with_capacity(manifest.entries.len());
        for (i, e) in manifest.entries.iter().enumerate() {
            let path = dir.join(&e.image);
            let bytes = std::fs::read(&path).map_err(|err| Error::io(&path, err))?;
            let image = RgbImage::decode(&bytes)?;
            if (image.height, image.width) != (h, w) {
                return Err(Error::Input(format!(
                    "{} is {}x{}, manifest says {h}x{w}",
                    path.display(),
                    image.height,
                    image.width
                )));
            }
            if e.action.len() != manifest.action_dim {
                return Err(Error::Input(format!(
                    "entry {i} has {} action values, manifest says {}",
                    e.action.len(),
                    manifest.action_dim
                )));
            }
            demos.push(Demonstration {
                image,
                action: e.action.clone(),
                meta: e.meta.clone(),
            });
        }
        Ok(Self { manifest, demos })
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.demos.iter().map(to_sample).collect()
    }

    pub fn actions(&self) -> Vec<Vec<f64>> {
        self.demos.iter().map(|d| d.action.clone()).collect()
    }
}

pub fn to_sample(d: &Demonstration) -> Sample {
    Sample {
        image: d.image.to_tensor(),
        action: d.action.clone(),
    }
}
