//! Append-only JSONL result log, one self-contained record per line.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use calmix_core::bench::{LrTrial, MetricRecord, SeedAggregate};
use calmix_core::settings::TrEvSetting;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const RESULTS_FILE: &str = "results.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Train,
    Lr,
    Seeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResultLine {
    Run {
        stage: Stage,
        config_hash: String,
        #[serde(flatten)]
        record: MetricRecord,
    },
    LrSelection {
        config_id: String,
        dataset: String,
        backbone: String,
        setting: TrEvSetting,
        best_lr: f64,
        trials: Vec<LrTrial>,
    },
    Aggregate {
        dataset: String,
        backbone: String,
        setting: TrEvSetting,
        lr: f64,
        #[serde(flatten)]
        aggregate: SeedAggregate,
    },
    Throughput {
        checkpoint: String,
        setting: TrEvSetting,
        backbone: String,
        batch_size: usize,
        num_samples: usize,
        warmup_batches: usize,
        throughput_sps: f64,
    },
}

/// Appends one line and flushes it, so a crash never leaves a torn record
/// behind an intact one.
pub fn append(path: &Path, line: &ResultLine) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    let mut text = serde_json::to_string(line)?;
    text.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(CliError::io(path))?;
    f.write_all(text.as_bytes()).map_err(CliError::io(path))?;
    f.sync_data().map_err(CliError::io(path))
}

/// Every parseable line; a trailing partial line from an interrupted write
/// is skipped.
pub fn read_all(path: &Path) -> Result<Vec<ResultLine>> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut out = Vec::new();
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => {}
            Err(e) => return Err(CliError::Json(e)),
        }
    }
    Ok(out)
}
