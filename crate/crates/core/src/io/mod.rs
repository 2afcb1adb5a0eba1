//! PPM images, checkpoints and dataset directories.
//!
//! A dataset directory holds `NNNN_rainy.ppm` / `NNNN_clean.ppm` pairs.

mod checkpoint;
mod ppm;

use std::fs;
use std::path::{Path, PathBuf};

pub use checkpoint::{
    checkpoint_size, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint,
    Checkpoint, MAGIC, VERSION,
};
pub use ppm::{decode_ppm, encode_ppm, read_image, write_image, ImageBuffer};

use crate::error::{Error, Result};
use crate::train::RainPair;

const RAINY: &str = "_rainy.ppm";
const CLEAN: &str = "_clean.ppm";

pub fn pair_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{index:04}{RAINY}")),
        dir.join(format!("{index:04}{CLEAN}")),
    )
}

/// Writes every pair as 8-bit images, creating `dir` if needed.
pub fn write_dataset(dir: &Path, pairs: &[RainPair]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, pair) in pairs.iter().enumerate() {
        let (rainy, clean) = pair_paths(dir, i);
        write_image(rainy, &ImageBuffer::from_tensor(&pair.rainy)?)?;
        write_image(clean, &ImageBuffer::from_tensor(&pair.clean)?)?;
    }
    Ok(())
}

/// Loads all pairs in name order. Every rainy image needs a clean partner.
pub fn load_dataset(dir: &Path) -> Result<Vec<RainPair>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(RAINY) {
            stems.push(stem.to_string());
        }
    }
    if stems.is_empty() {
        return Err(Error::EmptyDataset);
    }
    stems.sort();
    stems
        .iter()
        .map(|stem| {
            let rainy = read_image(dir.join(format!("{stem}{RAINY}")))?;
            let clean = read_image(dir.join(format!("{stem}{CLEAN}")))?;
            RainPair::from_images(rainy.to_tensor(), clean.to_tensor())
        })
        .collect()
}
