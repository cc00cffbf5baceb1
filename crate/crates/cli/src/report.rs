//! Per-dataset trade-off reports: CSV of raw and min-max normalized
//! metrics, SVG charts, and a relative-change table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use calmix_core::bench::{normalize_group, relative_change, MetricRecord, NormalizedMetrics};
use calmix_core::settings::TrEvSetting;

use crate::checkpoint::ensure_writable_dir;
use crate::error::{CliError, Result};
use crate::records::{read_all, ResultLine, Stage};
use crate::svg::{scatter, Series};

pub const FOOTER: &str = "Normalization: x' = (x - min)/(max - min) within each dataset. \
A column whose values are all equal maps to 0, keeping the lowest-cost reading for constant cost columns.";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub csv: Vec<PathBuf>,
    pub svg: Vec<PathBuf>,
    pub relative_change: PathBuf,
    pub summary: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativeChangeRow {
    pub dataset: String,
    pub backbone: String,
    pub baseline: TrEvSetting,
    pub variant: TrEvSetting,
    pub top1_pct: f64,
    pub train_time_pct: Option<f64>,
    pub throughput_pct: Option<f64>,
}

/// Final-evaluation run records (train and seeds stages) grouped by dataset.
pub fn final_records(lines: &[ResultLine]) -> BTreeMap<String, Vec<MetricRecord>> {
    let mut groups: BTreeMap<String, Vec<MetricRecord>> = BTreeMap::new();
    for line in lines {
        if let ResultLine::Run { stage, record, .. } = line {
            if matches!(stage, Stage::Train | Stage::Seeds) && !record.diverged {
                groups.entry(record.dataset.clone()).or_default().push(record.clone());
            }
        }
    }
    groups
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn opt_mean(v: &[Option<f64>]) -> Option<f64> {
    let vals: Option<Vec<f64>> = v.iter().copied().collect();
    vals.filter(|v| !v.is_empty()).map(|v| mean(&v))
}

/// Relative change between every ordered setting pair sharing a backbone,
/// on seed-averaged raw metrics.
pub fn relative_changes(dataset: &str, records: &[MetricRecord]) -> Result<Vec<RelativeChangeRow>> {
    let mut cells: BTreeMap<(String, TrEvSetting), Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.backbone.clone(), r.setting)).or_default().push(r);
    }
    let mut rows = Vec::new();
    for ((bb, a), ra) in &cells {
        for ((bb2, b), rb) in &cells {
            if bb != bb2 || a >= b {
                continue;
            }
            let m = |rs: &[&MetricRecord], f: fn(&MetricRecord) -> f64| mean(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let t = |rs: &[&MetricRecord]| opt_mean(&rs.iter().map(|r| r.throughput_sps).collect::<Vec<_>>());
            let top1_pct = relative_change(m(ra, |r| r.top1), m(rb, |r| r.top1))?;
            let train_time_pct = relative_change(m(ra, |r| r.train_time_min), m(rb, |r| r.train_time_min)).ok();
            let throughput_pct = match (t(ra), t(rb)) {
                (Some(x), Some(y)) => relative_change(x, y).ok(),
                _ => None,
            };
            rows.push(RelativeChangeRow {
                dataset: dataset.into(),
                backbone: bb.clone(),
                baseline: *a,
                variant: *b,
                top1_pct,
                train_time_pct,
                throughput_pct,
            });
        }
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn write_csv(path: &Path, records: &[MetricRecord], norm: &[NormalizedMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "config_id",
        "setting",
        "backbone",
        "seed",
        "lr",
        "top1",
        "train_time_min",
        "throughput_sps",
        "top1_norm",
        "train_time_norm",
        "throughput_norm",
    ])?;
    for (r, n) in records.iter().zip(norm) {
        w.write_record([
            r.config_id.clone(),
            r.setting.to_string(),
            r.backbone.clone(),
            r.seed.to_string(),
            r.lr.to_string(),
            r.top1.to_string(),
            r.train_time_min.to_string(),
            fmt_opt(r.throughput_sps),
            n.top1.to_string(),
            n.train_time.to_string(),
            fmt_opt(n.throughput),
        ])?;
    }
    w.flush().map_err(CliError::io(path))
}

/// Seed-averaged normalized points, one series per setting and one point
/// per backbone.
fn chart_series(norm: &[NormalizedMetrics], x: fn(&NormalizedMetrics) -> Option<f64>) -> Vec<Series> {
    let mut cells: BTreeMap<TrEvSetting, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for n in norm {
        if let Some(xv) = x(n) {
            cells
                .entry(n.setting)
                .or_default()
                .entry(n.backbone.clone())
                .or_default()
                .push((xv, n.top1));
        }
    }
    cells
        .into_iter()
        .map(|(setting, by_bb)| Series {
            label: setting.to_string(),
            points: by_bb
                .values()
                .map(|pts| {
                    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
                    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
                    (mean(&xs), mean(&ys))
                })
                .collect(),
        })
        .collect()
}

pub fn generate_report(results: &Path, out_dir: &Path, overwrite: bool) -> Result<ReportFiles> {
    if !results.exists() {
        return Err(CliError::Usage(format!("{}: no results file", results.display())));
    }
    let groups = final_records(&read_all(results)?);
    if groups.is_empty() {
        return Err(CliError::Usage(format!("{}: no completed run records", results.display())));
    }
    if let Some((ds, rs)) = groups.iter().find(|(_, rs)| rs.len() < 2) {
        return Err(CliError::Usage(format!(
            "dataset `{ds}` has {} record(s); a normalized comparison needs at least 2",
            rs.len()
        )));
    }
    ensure_writable_dir(out_dir, overwrite)?;
    let mut files = ReportFiles {
        csv: Vec::new(),
        svg: Vec::new(),
        relative_change: out_dir.join("relative_change.csv"),
        summary: out_dir.join("summary.md"),
    };
    let mut rel_rows = Vec::new();
    let mut summary = String::from("# Accuracy vs cost\n\n");
    for (dataset, records) in &groups {
        let norm = normalize_group(records);
        let stem = safe_name(dataset);
        let csv_path = out_dir.join(format!("{stem}.csv"));
        write_csv(&csv_path, records, &norm)?;
        files.csv.push(csv_path);
        for (suffix, x_label, x) in [
            (
                "accuracy_vs_train_time",
                "normalized train time",
                (|n: &NormalizedMetrics| Some(n.train_time)) as fn(&NormalizedMetrics) -> Option<f64>,
            ),
            ("accuracy_vs_throughput", "normalized throughput", |n: &NormalizedMetrics| n.throughput),
        ] {
            let svg = scatter(
                &format!("{dataset}: accuracy vs {}", x_label.trim_start_matches("normalized ")),
                x_label,
                "normalized top-1 accuracy",
                &chart_series(&norm, x),
            );
            let path = out_dir.join(format!("{stem}_{suffix}.svg"));
            fs::write(&path, svg).map_err(CliError::io(&path))?;
            files.svg.push(path);
        }
        let _ = writeln!(summary, "## {dataset}\n\n| setting | backbone | seeds | top-1 | train time (min) | throughput (samples/s) |\n|---|---|---|---|---|---|");
        let mut cells: BTreeMap<(TrEvSetting, String), Vec<&MetricRecord>> = BTreeMap::new();
        for r in records {
            cells.entry((r.setting, r.backbone.clone())).or_default().push(r);
        }
        for ((setting, bb), rs) in cells {
            let top1 = mean(&rs.iter().map(|r| r.top1).collect::<Vec<_>>());
            let time = mean(&rs.iter().map(|r| r.train_time_min).collect::<Vec<_>>());
            let thr = opt_mean(&rs.iter().map(|r| r.throughput_sps).collect::<Vec<_>>());
            let _ = writeln!(
                summary,
                "| {setting} | {bb} | {} | {:.4} | {time:.3} | {} |",
                rs.len(),
                top1,
                thr.map(|t| format!("{t:.1}")).unwrap_or_else(|| "-".into())
            );
        }
        summary.push('\n');
        rel_rows.extend(relative_changes(dataset, records)?);
    }
    let mut w = csv::Writer::from_path(&files.relative_change)?;
    w.write_record([
        "dataset",
        "backbone",
        "baseline",
        "variant",
        "top1_change_pct",
        "train_time_change_pct",
        "throughput_change_pct",
    ])?;
    for r in &rel_rows {
        w.write_record([
            r.dataset.clone(),
            r.backbone.clone(),
            r.baseline.to_string(),
            r.variant.to_string(),
            r.top1_pct.to_string(),
            fmt_opt(r.train_time_pct),
            fmt_opt(r.throughput_pct),
        ])?;
    }
    w.flush().map_err(CliError::io(&files.relative_change))?;
    let _ = writeln!(summary, "---\n\n{FOOTER}");
    fs::write(&files.summary, summary).map_err(CliError::io(&files.summary))?;
    Ok(files)
}
