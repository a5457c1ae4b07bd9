//! Per-step CSV training log.

use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One logged step. Components that were not evaluated are empty fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub l_simple: f64,
    pub l_noise: Option<f64>,
    pub l_var: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub wall_time: f64,
}

/// Appends one row, writing the header first if the file is new or empty.
pub fn training_log_append(path: impl AsRef<Path>, record: &TrainRecord) -> Result<()> {
    let path = path.as_ref();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    let mut w = csv::WriterBuilder::new().has_headers(empty).from_writer(file);
    w.serialize(record)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_training_log(path: impl AsRef<Path>) -> Result<Vec<TrainRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}
