//! Persistence: checkpoints, the toy dataset, training logs, JSON configs
//! and image files.

mod checkpoint;
mod dataset;
mod image;
mod log;

pub use checkpoint::{
    load_checkpoint, read_header, save_checkpoint, Checkpoint, CheckpointHeader, TensorEntry, FORMAT_VERSION, MAGIC,
};
pub use dataset::{Sample, ToyDataset};
pub use image::{encode_image_grid, save_image_grid};
pub use log::{read_training_log, training_log_append, TrainRecord};

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Reads a JSON document.
pub fn read_json<V: DeserializeOwned>(path: impl AsRef<Path>) -> Result<V> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes a pretty-printed JSON document, creating parent directories.
pub fn write_json<V: Serialize + ?Sized>(path: impl AsRef<Path>, value: &V) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
