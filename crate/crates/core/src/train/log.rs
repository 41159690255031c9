use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::train::config::Stage;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        stage: Stage,
        step: u64,
        epoch: usize,
        losses: BTreeMap<String, f64>,
        lr_g: f64,
        lr_d: Option<f64>,
    },
    Epoch {
        stage: Stage,
        epoch: usize,
        train: BTreeMap<String, f64>,
        val: f64,
        lr_g: f64,
        lr_d: Option<f64>,
        improved: bool,
    },
}

/// Append-only JSON-lines writer.
pub struct TrainLog {
    file: std::fs::File,
}

impl TrainLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file })
    }

    pub fn write(&mut self, rec: &LogRecord) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(rec)?)?;
        Ok(())
    }
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
