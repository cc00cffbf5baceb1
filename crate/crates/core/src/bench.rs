//! Metrics, min-max normalization and the two-stage experiment protocol.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::settings::{infer, ModelBundle, TrEvSetting};

pub const DEFAULT_LR_GRID: [f64; 5] = [0.3, 0.1, 0.03, 0.01, 0.003];
pub const DEFAULT_WARMUP_BATCHES: usize = 2;

/// One run's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub config_id: String,
    pub dataset: String,
    pub backbone: String,
    pub setting: TrEvSetting,
    pub lr: f64,
    pub seed: u64,
    /// Fraction in `[0, 1]`.
    pub top1: f64,
    pub train_time_min: f64,
    /// Samples per second; absent until measured.
    pub throughput_sps: Option<f64>,
    #[serde(default)]
    pub diverged: bool,
}

impl MetricRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.top1) {
            return Err(Error::InvalidArgument(format!("top1 {} outside [0, 1]", self.top1)));
        }
        if !self.train_time_min.is_finite() || self.train_time_min < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "train time {} must be finite and ≥ 0",
                self.train_time_min
            )));
        }
        if let Some(t) = self.throughput_sps {
            if !t.is_finite() || t <= 0.0 {
                return Err(Error::InvalidArgument(format!("throughput {t} must be finite and > 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedMetrics {
    pub config_id: String,
    pub setting: TrEvSetting,
    pub backbone: String,
    pub seed: u64,
    pub top1: f64,
    pub train_time: f64,
    pub throughput: Option<f64>,
}

pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Runs `run` and returns its output with the wall-clock time in minutes.
pub fn measure_train_time<R>(run: impl FnOnce() -> Result<R>) -> Result<(R, f64)> {
    let start = Instant::now();
    let out = run()?;
    Ok((out, start.elapsed().as_secs_f64() / 60.0))
}

/// Exclusive machine-wide lock held while timing throughput.
#[derive(Debug)]
pub struct ThroughputLock {
    _file: File,
    path: PathBuf,
}

impl ThroughputLock {
    /// Takes the lock at `path`, blocking when `wait` is set and failing
    /// with [`Error::LockHeld`] otherwise.
    pub fn acquire(path: &Path, wait: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(path)?;
        if wait {
            file.lock()?;
        } else {
            match file.try_lock() {
                Ok(()) => {}
                Err(std::fs::TryLockError::WouldBlock) => return Err(Error::LockHeld(path.to_path_buf())),
                Err(std::fs::TryLockError::Error(e)) => return Err(e.into()),
            }
        }
        Ok(Self {
            _file: file,
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn default_lock_path() -> PathBuf {
    std::env::temp_dir().join("calmix-throughput.lock")
}

/// Batched inference throughput in samples per second.
///
/// Samples are drawn cyclically from `images`. The first `warmup_batches`
/// batches run untimed; the remaining `num_samples − warmup` samples are
/// timed. The lock argument proves exclusive access to the machine.
pub fn measure_throughput<T: Scalar>(
    _lock: &ThroughputLock,
    model: &ModelBundle<T>,
    setting: TrEvSetting,
    images: &[Image],
    batch_size: usize,
    num_samples: usize,
    warmup_batches: usize,
) -> Result<f64> {
    if batch_size == 0 || images.is_empty() {
        return Err(Error::InvalidArgument("throughput needs images and batch_size ≥ 1".into()));
    }
    let warmup = batch_size * warmup_batches;
    if num_samples < batch_size * (warmup_batches + 1) {
        return Err(Error::InvalidArgument(format!(
            "num_samples {num_samples} < batch_size·(warmup_batches+1) = {}",
            batch_size * (warmup_batches + 1)
        )));
    }
    let batches = |start: usize, end: usize| -> Vec<Vec<Image>> {
        (start..end)
            .collect::<Vec<_>>()
            .chunks(batch_size)
            .map(|c| c.iter().map(|&i| images[i % images.len()].clone()).collect())
            .collect()
    };
    for b in batches(0, warmup) {
        infer(setting, model, &b)?;
    }
    let timed = batches(warmup, num_samples);
    let start = Instant::now();
    for b in &timed {
        infer(setting, model, b)?;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((num_samples - warmup) as f64 / secs)
}

/// `(x − min)/(max − min)`; an all-equal group maps to zeros.
pub fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    values
        .iter()
        .map(|&v| if range > 0.0 { (v - min) / range } else { 0.0 })
        .collect()
}

/// Normalizes every axis over `records`, which form one comparison group.
pub fn normalize_group(records: &[MetricRecord]) -> Vec<NormalizedMetrics> {
    let top1 = minmax_normalize(&records.iter().map(|r| r.top1).collect::<Vec<_>>());
    let time = minmax_normalize(&records.iter().map(|r| r.train_time_min).collect::<Vec<_>>());
    let measured: Vec<f64> = records.iter().filter_map(|r| r.throughput_sps).collect();
    let thr_norm = minmax_normalize(&measured);
    let mut thr_iter = thr_norm.into_iter();
    records
        .iter()
        .enumerate()
        .map(|(i, r)| NormalizedMetrics {
            config_id: r.config_id.clone(),
            setting: r.setting,
            backbone: r.backbone.clone(),
            seed: r.seed,
            top1: top1[i],
            train_time: time[i],
            throughput: r.throughput_sps.and_then(|_| thr_iter.next()),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrTrial {
    pub lr: f64,
    pub top1: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSearch {
    /// In evaluation order.
    pub trials: Vec<LrTrial>,
    pub best_lr: f64,
}

/// Picks the learning rate with the best holdout accuracy, ties toward the
/// smaller rate. Diverged runs score 0; other errors abort the search.
pub fn lr_search(lrs: &[f64], mut evaluate: impl FnMut(f64) -> Result<f64>) -> Result<LrSearch> {
    if lrs.is_empty() {
        return Err(Error::InvalidArgument("empty learning-rate grid".into()));
    }
    if let Some(bad) = lrs.iter().find(|lr| !(lr.is_finite() && **lr > 0.0)) {
        return Err(Error::InvalidArgument(format!("learning rate {bad} must be finite and > 0")));
    }
    let mut trials = Vec::with_capacity(lrs.len());
    for &lr in lrs {
        let trial = match evaluate(lr) {
            Ok(acc) if acc.is_finite() => LrTrial { lr, top1: acc, diverged: false },
            Ok(_) | Err(Error::Diverged(_)) => LrTrial { lr, top1: 0.0, diverged: true },
            Err(e) => return Err(e),
        };
        trials.push(trial);
    }
    let best = trials
        .iter()
        .copied()
        .reduce(|a, b| {
            if b.top1 > a.top1 || (b.top1 == a.top1 && b.lr < a.lr) {
                b
            } else {
                a
            }
        })
        .expect("non-empty grid");
    Ok(LrSearch {
        trials,
        best_lr: best.lr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1).
    pub std: f64,
}

/// Mean and sample standard deviation. Values are summed in sorted order
/// so the result does not depend on input order.
pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 values for a sample std, got {}",
            values.len()
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let mut sq: Vec<f64> = sorted.iter().map(|v| (v - mean) * (v - mean)).collect();
    sq.sort_by(f64::total_cmp);
    let var = sq.iter().sum::<f64>() / (n - 1.0);
    Ok(MeanStd { mean, std: var.sqrt() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub config_id: String,
    pub seeds: Vec<u64>,
    pub top1: MeanStd,
    pub train_time_min: MeanStd,
    pub throughput_sps: Option<MeanStd>,
}

/// Per-axis mean and sample std over records sharing one configuration.
pub fn multi_seed_aggregate(records: &[MetricRecord]) -> Result<SeedAggregate> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("no records to aggregate".into()))?;
    if let Some(r) = records.iter().find(|r| r.config_id != first.config_id) {
        return Err(Error::InvalidArgument(format!(
            "records mix configurations `{}` and `{}`",
            first.config_id, r.config_id
        )));
    }
    let axis = |f: fn(&MetricRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let throughput: Option<Vec<f64>> = records.iter().map(|r| r.throughput_sps).collect();
    Ok(SeedAggregate {
        config_id: first.config_id.clone(),
        seeds: records.iter().map(|r| r.seed).collect(),
        top1: mean_std(&axis(|r| r.top1))?,
        train_time_min: mean_std(&axis(|r| r.train_time_min))?,
        throughput_sps: throughput.map(|t| mean_std(&t)).transpose()?,
    })
}

/// `100·(variant − baseline)/baseline`.
pub fn relative_change(baseline: f64, variant: f64) -> Result<f64> {
    if baseline == 0.0 || !baseline.is_finite() || !variant.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "relative change needs a finite non-zero baseline, got ({baseline}, {variant})"
        )));
    }
    Ok(100.0 * (variant - baseline) / baseline)
}
