//! Dataset directory: `manifest.json` (world, seed, class table,
//! annotations) plus `images.bin` with every image's raw u8 grid, train
//! split first.

use std::path::Path;

use dedetr_core::synth::{catalog, Annotation, Dataset, Image, Pattern, Sample, ShapeKind, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const FORMAT: &str = "dedetr-dataset";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const IMAGES: &str = "images.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: usize,
    pub name: String,
    pub shape: ShapeKind,
    pub pattern: Pattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub width: usize,
    pub height: usize,
    /// Byte offset into `images.bin`.
    pub offset: u64,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub world: WorldConfig,
    pub classes: Vec<ClassEntry>,
    pub train: Vec<ImageEntry>,
    pub test: Vec<ImageEntry>,
}

pub fn save(dataset: &Dataset, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = |samples: &[Sample]| -> Vec<ImageEntry> {
        samples
            .iter()
            .map(|s| {
                let offset = blob.len() as u64;
                blob.extend_from_slice(&s.image.pixels);
                ImageEntry {
                    width: s.image.width,
                    height: s.image.height,
                    offset,
                    annotations: s.annotations.clone(),
                }
            })
            .collect()
    };
    let train = entries(&dataset.train);
    let test = entries(&dataset.test);
    let classes = catalog()
        .into_iter()
        .take(dataset.world.n_classes)
        .map(|c| ClassEntry { id: c.id, name: c.name(), shape: c.shape, pattern: c.pattern })
        .collect();
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        seed: dataset.seed,
        world: dataset.world,
        classes,
        train,
        test,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join(MANIFEST);
    std::fs::write(&mpath, json).map_err(|e| CliError::io(&mpath, e))?;
    let ipath = dir.join(IMAGES);
    std::fs::write(&ipath, blob).map_err(|e| CliError::io(&ipath, e))
}

pub fn load(dir: &Path) -> Result<Dataset, CliError> {
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| CliError::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::format("dataset manifest", e.to_string()))?;
    if m.format != FORMAT {
        return Err(CliError::format("dataset manifest", format!("format {:?}", m.format)));
    }
    if m.version != VERSION {
        return Err(CliError::format("dataset manifest", format!("unsupported version {}", m.version)));
    }
    let ipath = dir.join(IMAGES);
    let blob = std::fs::read(&ipath).map_err(|e| CliError::io(&ipath, e))?;
    let samples = |entries: &[ImageEntry]| -> Result<Vec<Sample>, CliError> {
        entries
            .iter()
            .map(|e| {
                let start = e.offset as usize;
                let end = start + e.width * e.height;
                let pixels = blob
                    .get(start..end)
                    .ok_or_else(|| CliError::format("dataset images", "offset past end of file"))?
                    .to_vec();
                Ok(Sample {
                    image: Image { width: e.width, height: e.height, pixels },
                    annotations: e.annotations.clone(),
                })
            })
            .collect()
    };
    Ok(Dataset { world: m.world, seed: m.seed, train: samples(&m.train)?, test: samples(&m.test)? })
}
