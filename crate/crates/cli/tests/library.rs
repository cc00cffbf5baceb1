use std::fs::{self, OpenOptions};
use std::io::Write;

use calmix_cli::checkpoint::{load_checkpoint, read_manifest, save_checkpoint};
use calmix_cli::commands::{sweep_lr_stage, sweep_seeds_stage};
use calmix_cli::config::ExperimentConfig;
use calmix_cli::records::{append, read_all, ResultLine, Stage};
use calmix_cli::report::generate_report;
use calmix_cli::CliError;
use calmix_core::backbones::Registry;
use calmix_core::bench::MetricRecord;
use calmix_core::settings::{build_model, CalConfig};
use calmix_core::{Error, TrEvSetting};
use proptest::prelude::*;

fn record(setting: TrEvSetting, seed: u64, top1: f64, time: f64) -> MetricRecord {
    MetricRecord {
        config_id: format!("toy-tiny-{setting}"),
        dataset: "toy".into(),
        backbone: "tiny".into(),
        setting,
        lr: 0.01,
        seed,
        top1,
        train_time_min: time,
        throughput_sps: Some(50.0),
        diverged: false,
    }
}

fn run_line(r: MetricRecord) -> ResultLine {
    ResultLine::Run { stage: Stage::Seeds, config_hash: "h".into(), record: r }
}

#[test]
fn torn_last_line_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    append(&path, &run_line(record(TrEvSetting::Ft, 0, 0.5, 1.0))).unwrap();
    append(&path, &run_line(record(TrEvSetting::Cal, 0, 0.6, 2.0))).unwrap();
    OpenOptions::new().append(true).open(&path).unwrap().write_all(b"{\"kind\":\"run\",\"sta").unwrap();
    assert_eq!(read_all(&path).unwrap().len(), 2);
}

#[test]
fn constant_columns_normalize_to_zero_in_reports() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    for (s, top1) in [(TrEvSetting::Ft, 0.4), (TrEvSetting::CalNc, 0.8)] {
        append(&path, &run_line(record(s, 0, top1, 3.0))).unwrap();
    }
    let files = generate_report(&path, &dir.path().join("rep"), false).unwrap();
    let text = fs::read_to_string(&files.csv[0]).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.iter().map(|r| r[9]).collect::<Vec<_>>(), ["0", "0"]);
    assert_eq!(rows.iter().map(|r| r[8]).collect::<Vec<_>>(), ["0", "1"]);
    let rel = fs::read_to_string(&files.relative_change).unwrap();
    assert!(rel.contains("toy,tiny,FT,CAL_NC,100"), "{rel}");
}

#[test]
fn single_record_groups_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    append(&path, &run_line(record(TrEvSetting::Ft, 0, 0.4, 1.0))).unwrap();
    assert!(matches!(generate_report(&path, &dir.path().join("rep"), false), Err(CliError::Usage(_))));
}

#[test]
fn checkpoint_failures_are_distinguished() {
    let registry = Registry::<f32>::with_defaults();
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    let model = build_model(&registry, TrEvSetting::Cal, "tiny", 4, 32, CalConfig::default(), 1).unwrap();
    save_checkpoint(&ck, &model, "hash", None, false).unwrap();
    assert!(matches!(save_checkpoint(&ck, &model, "hash", None, false), Err(CliError::WouldClobber { .. })));
    save_checkpoint(&ck, &model, "hash", None, true).unwrap();

    let mut other = build_model(&registry, TrEvSetting::Cal, "tiny", 5, 32, CalConfig::default(), 1).unwrap();
    let err = load_checkpoint(&ck, &mut other).unwrap_err();
    assert!(matches!(err, CliError::Core(Error::Shape(_))), "{err}");

    let manifest = read_manifest(&ck).unwrap();
    let blob = ck.join(&manifest.tensors[0].file);
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    let mut same = model.clone();
    assert!(matches!(load_checkpoint(&ck, &mut same), Err(CliError::Corrupt(_))));
}

#[test]
fn lr_stage_refuses_to_clobber_and_logs_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(dir.path().join("data"), TrEvSetting::Ft);
    cfg.output_dir = dir.path().join("out");
    let r = sweep_lr_stage(&cfg, false, |_, lr| if lr > 0.2 { Err(Error::Diverged("x".into())) } else { Ok(lr) }).unwrap();
    assert_eq!(r.best_lr, 0.1);
    assert!(r.search.trials.iter().any(|t| t.diverged && t.top1 == 0.0));
    assert!(matches!(sweep_lr_stage(&cfg, false, |_, _| Ok(0.5)), Err(CliError::WouldClobber { .. })));

    let seeds = sweep_seeds_stage(&cfg, false, |c, seed, lr| {
        let mut r = record(c.setting, seed, 0.5 + seed as f64 / 10.0, 1.0);
        r.config_id = c.config_id();
        r.lr = lr;
        Ok(r)
    })
    .unwrap();
    assert_eq!(seeds.records.iter().map(|r| r.seed).collect::<Vec<_>>(), [0, 1, 2]);
    assert!(seeds.records.iter().all(|r| r.lr == 0.1));
}

proptest! {
    #[test]
    fn config_round_trips(lr in 1e-5f64..1.0, epochs in 1usize..100, seed in any::<u64>(), maps in 1usize..64,
                          lambda in 0.0f64..4.0, clip in prop::option::of(0.1f64..10.0), setting in 0usize..6) {
        let mut cfg = ExperimentConfig::new("data", TrEvSetting::ALL[setting]);
        cfg.learning_rate = lr;
        cfg.epochs = epochs;
        cfg.seed = seed;
        cfg.attention_maps = maps;
        cfg.lambda_cf = lambda;
        cfg.grad_clip = clip;
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}
