//! Subcommand implementations. The protocol stages take their per-run
//! work as closures so tests can substitute stub evaluators.

use std::fs;
use std::path::{Path, PathBuf};

use calmix_core::augment::{
    attention_crop, attention_mask, bbox_from_attention, mix_pair, select_attention_map_argmax, Image,
};
use calmix_core::backbones::{conformance, ConformanceCheck, Registry};
use calmix_core::bench::{
    default_lock_path, lr_search, measure_throughput, measure_train_time, multi_seed_aggregate, LrSearch,
    MetricRecord, SeedAggregate, ThroughputLock, DEFAULT_LR_GRID,
};
use calmix_core::datasets::{
    generate_synthetic_fgir, load_image_folder, make_holdout_split, LabeledDataset, SplitManifest,
};
use calmix_core::settings::{attention_maps, build_model, evaluate, fit, ModelBundle, TrEvSetting};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ensure_writable_dir, load_model, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::records::{append, ResultLine, Stage, RESULTS_FILE};

pub fn results_path(out: &Path) -> PathBuf {
    out.join(RESULTS_FILE)
}

pub fn checkpoint_dir(out: &Path, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    out.join("checkpoints").join(format!("{}-seed{seed}", cfg.config_id()))
}

pub fn sweep_dir(out: &Path, cfg: &ExperimentConfig) -> PathBuf {
    out.join("sweeps").join(cfg.config_id())
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let manifest = SplitManifest::load(&cfg.dataset.manifest_path())?;
    Ok(load_image_folder(&cfg.dataset.root, &manifest, cfg.image_size)?)
}

/// Outcome of one training run evaluated on some split.
pub struct TrainedRun {
    pub model: ModelBundle<f32>,
    pub top1: f64,
    pub train_time_min: f64,
    pub diverged: Option<String>,
}

/// Trains on `train` and scores top-1 on `eval`. Divergence is reported in
/// the result, not as an error.
pub fn train_and_score(
    cfg: &ExperimentConfig,
    registry: &Registry<f32>,
    train: &LabeledDataset,
    eval: &LabeledDataset,
    seed: u64,
    lr: f64,
) -> Result<TrainedRun> {
    let mut model = build_model(
        registry,
        cfg.setting,
        &cfg.backbone,
        train.num_classes,
        cfg.image_size,
        cfg.cal_config(),
        seed,
    )?;
    let opts = cfg.train_options(seed, lr);
    let fitted = measure_train_time(|| fit(&mut model, train, &opts, |_, _| {}));
    match fitted {
        Ok((_, minutes)) => {
            let top1 = evaluate(cfg.setting, &model, eval, cfg.eval_batch_size)?;
            Ok(TrainedRun {
                model,
                top1,
                train_time_min: minutes,
                diverged: None,
            })
        }
        Err(calmix_core::Error::Diverged(msg)) => Ok(TrainedRun {
            model,
            top1: 0.0,
            train_time_min: 0.0,
            diverged: Some(msg),
        }),
        Err(e) => Err(e.into()),
    }
}

/// Deterministic random probe images; throughput does not depend on content.
pub fn probe_images(image_size: usize, count: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let data = (0..image_size * image_size * 3).map(|_| rng.gen::<f32>()).collect();
            Image::new(image_size, image_size, data).expect("valid probe image")
        })
        .collect()
}

pub fn lock_path() -> PathBuf {
    std::env::var_os("CALMIX_LOCK")
        .map(PathBuf::from)
        .unwrap_or_else(default_lock_path)
}

/// Throughput under the machine-wide lock.
pub fn throughput(
    model: &ModelBundle<f32>,
    setting: TrEvSetting,
    batch_size: usize,
    num_samples: usize,
    warmup_batches: usize,
    wait: bool,
) -> Result<f64> {
    let images = probe_images(model.image_size, batch_size.min(num_samples).max(1), 0xBEEF);
    let lock = ThroughputLock::acquire(&lock_path(), wait)?;
    Ok(measure_throughput(
        &lock,
        model,
        setting,
        &images,
        batch_size,
        num_samples,
        warmup_batches,
    )?)
}

fn base_record(cfg: &ExperimentConfig, seed: u64, lr: f64) -> MetricRecord {
    MetricRecord {
        config_id: cfg.config_id(),
        dataset: cfg.dataset.display_name(),
        backbone: cfg.backbone.clone(),
        setting: cfg.setting,
        lr,
        seed,
        top1: 0.0,
        train_time_min: 0.0,
        throughput_sps: None,
        diverged: false,
    }
}

/// Full run: train split → test accuracy, train time, throughput, and a
/// checkpoint. A diverged run is logged and reported as an error.
pub fn full_run(
    cfg: &ExperimentConfig,
    registry: &Registry<f32>,
    data: &(LabeledDataset, LabeledDataset),
    seed: u64,
    lr: f64,
    stage: Stage,
    overwrite: bool,
    wait: bool,
) -> Result<MetricRecord> {
    let out = cfg.resolved_output_dir();
    let ckpt = checkpoint_dir(&out, cfg, seed);
    if ckpt.exists() && !overwrite {
        return Err(CliError::WouldClobber { path: ckpt });
    }
    let run = train_and_score(cfg, registry, &data.0, &data.1, seed, lr)?;
    let mut record = base_record(cfg, seed, lr);
    let results = results_path(&out);
    let mut hashed = cfg.clone();
    hashed.seed = seed;
    hashed.learning_rate = lr;
    let config_hash = hashed.hash();
    if let Some(msg) = run.diverged {
        record.diverged = true;
        append(&results, &ResultLine::Run { stage, config_hash, record })?;
        return Err(CliError::Diverged(msg));
    }
    record.top1 = run.top1;
    record.train_time_min = run.train_time_min;
    let t = cfg.throughput;
    record.throughput_sps = Some(throughput(
        &run.model,
        cfg.setting,
        t.batch_size,
        t.num_samples,
        t.warmup_batches,
        wait,
    )?);
    record.validate()?;
    save_checkpoint(
        &ckpt,
        &run.model,
        &config_hash,
        Some(serde_json::to_value(&record)?),
        overwrite,
    )?;
    append(&results, &ResultLine::Run { stage, config_hash, record: record.clone() })?;
    Ok(record)
}

pub fn cmd_train(cfg: &ExperimentConfig, overwrite: bool, wait: bool) -> Result<MetricRecord> {
    let registry = Registry::with_defaults();
    let data = load_data(cfg)?;
    full_run(cfg, &registry, &data, cfg.seed, cfg.learning_rate, Stage::Train, overwrite, wait)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrStageResult {
    pub config_id: String,
    pub best_lr: f64,
    pub search: LrSearch,
}

/// Learning-rate stage over the five-rate grid. `evaluate` returns the
/// holdout accuracy of one rate; a divergence error scores 0.
pub fn sweep_lr_stage(
    cfg: &ExperimentConfig,
    overwrite: bool,
    mut evaluate: impl FnMut(&ExperimentConfig, f64) -> calmix_core::Result<f64>,
) -> Result<LrStageResult> {
    let out = cfg.resolved_output_dir();
    let dir = sweep_dir(&out, cfg);
    let file = dir.join("lr.json");
    if file.exists() && !overwrite {
        return Err(CliError::WouldClobber { path: file });
    }
    let mut times = Vec::new();
    let search = lr_search(&DEFAULT_LR_GRID, |lr| {
        let timed = measure_train_time(|| evaluate(cfg, lr));
        match timed {
            Ok((acc, minutes)) => {
                times.push(minutes);
                Ok(acc)
            }
            Err(e) => {
                times.push(0.0);
                Err(e)
            }
        }
    })?;
    let results = results_path(&out);
    for (trial, minutes) in search.trials.iter().zip(&times) {
        let mut hashed = cfg.clone();
        hashed.learning_rate = trial.lr;
        let mut record = base_record(cfg, cfg.seed, trial.lr);
        record.top1 = trial.top1;
        record.train_time_min = *minutes;
        record.diverged = trial.diverged;
        append(
            &results,
            &ResultLine::Run {
                stage: Stage::Lr,
                config_hash: hashed.hash(),
                record,
            },
        )?;
    }
    append(
        &results,
        &ResultLine::LrSelection {
            config_id: cfg.config_id(),
            dataset: cfg.dataset.display_name(),
            backbone: cfg.backbone.clone(),
            setting: cfg.setting,
            best_lr: search.best_lr,
            trials: search.trials.clone(),
        },
    )?;
    let result = LrStageResult {
        config_id: cfg.config_id(),
        best_lr: search.best_lr,
        search,
    };
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    fs::write(&file, serde_json::to_vec_pretty(&result)?).map_err(CliError::io(&file))?;
    Ok(result)
}

/// Holdout evaluator: trains on the train split minus a stratified holdout
/// and scores the holdout.
pub fn holdout_evaluator(
    registry: Registry<f32>,
    train: LabeledDataset,
) -> impl FnMut(&ExperimentConfig, f64) -> calmix_core::Result<f64> {
    move |cfg, lr| {
        let (kept, held) = make_holdout_split(&train, cfg.holdout_fraction, cfg.seed)?;
        let run = train_and_score(cfg, &registry, &kept, &held, cfg.seed, lr).map_err(|e| match e {
            CliError::Core(c) => c,
            other => calmix_core::Error::InvalidArgument(other.to_string()),
        })?;
        match run.diverged {
            Some(msg) => Err(calmix_core::Error::Diverged(msg)),
            None => Ok(run.top1),
        }
    }
}

pub fn read_lr_stage(cfg: &ExperimentConfig) -> Result<LrStageResult> {
    let file = sweep_dir(&cfg.resolved_output_dir(), cfg).join("lr.json");
    if !file.exists() {
        return Err(CliError::Usage(format!(
            "no learning-rate result at {}; run `sweep --stage lr` first",
            file.display()
        )));
    }
    let text = fs::read_to_string(&file).map_err(CliError::io(&file))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStageResult {
    pub lr: f64,
    pub records: Vec<MetricRecord>,
    pub aggregate: SeedAggregate,
}

/// Seeds stage at the selected rate. `run` produces one seed's record.
pub fn sweep_seeds_stage(
    cfg: &ExperimentConfig,
    overwrite: bool,
    mut run: impl FnMut(&ExperimentConfig, u64, f64) -> Result<MetricRecord>,
) -> Result<SeedStageResult> {
    let lr = read_lr_stage(cfg)?.best_lr;
    let out = cfg.resolved_output_dir();
    let file = sweep_dir(&out, cfg).join("seeds.json");
    if file.exists() && !overwrite {
        return Err(CliError::WouldClobber { path: file });
    }
    let records = (0..cfg.num_seeds as u64)
        .map(|k| run(cfg, cfg.seed + k, lr))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = multi_seed_aggregate(&records)?;
    append(
        &results_path(&out),
        &ResultLine::Aggregate {
            dataset: cfg.dataset.display_name(),
            backbone: cfg.backbone.clone(),
            setting: cfg.setting,
            lr,
            aggregate: aggregate.clone(),
        },
    )?;
    let result = SeedStageResult { lr, records, aggregate };
    fs::write(&file, serde_json::to_vec_pretty(&result)?).map_err(CliError::io(&file))?;
    Ok(result)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, stage: &str, overwrite: bool, wait: bool) -> Result<()> {
    let registry = Registry::with_defaults();
    match stage {
        "lr" => {
            let (train, _) = load_data(cfg)?;
            let r = sweep_lr_stage(cfg, overwrite, holdout_evaluator(registry, train))?;
            for t in &r.search.trials {
                println!(
                    "lr {:<6} holdout top-1 {:.4}{}",
                    t.lr,
                    t.top1,
                    if t.diverged { " (diverged)" } else { "" }
                );
            }
            println!("selected lr {}", r.best_lr);
        }
        "seeds" => {
            read_lr_stage(cfg)?;
            let data = load_data(cfg)?;
            let r = sweep_seeds_stage(cfg, overwrite, |c, seed, lr| {
                let mut c = c.clone();
                c.seed = seed;
                full_run(&c, &registry, &data, seed, lr, Stage::Seeds, overwrite, wait)
            })?;
            println!(
                "lr {}: top-1 {:.4} ± {:.4} over {} seeds",
                r.lr,
                r.aggregate.top1.mean,
                r.aggregate.top1.std,
                r.records.len()
            );
        }
        other => return Err(CliError::Usage(format!("unknown stage `{other}` (expected lr or seeds)"))),
    }
    Ok(())
}

pub struct BenchmarkArgs {
    pub checkpoint: PathBuf,
    pub setting: Option<TrEvSetting>,
    pub batch_size: usize,
    pub num_samples: usize,
    pub warmup_batches: usize,
    pub wait: bool,
    pub out: PathBuf,
}

pub fn cmd_benchmark(args: &BenchmarkArgs) -> Result<f64> {
    let registry = Registry::with_defaults();
    let (model, manifest) = load_model(&args.checkpoint, &registry)?;
    let setting = args.setting.unwrap_or(manifest.setting);
    let sps = throughput(
        &model,
        setting,
        args.batch_size,
        args.num_samples,
        args.warmup_batches,
        args.wait,
    )?;
    append(
        &results_path(&args.out),
        &ResultLine::Throughput {
            checkpoint: args.checkpoint.display().to_string(),
            setting,
            backbone: manifest.backbone,
            batch_size: args.batch_size,
            num_samples: args.num_samples,
            warmup_batches: args.warmup_batches,
            throughput_sps: sps,
        },
    )?;
    Ok(sps)
}

pub fn cmd_gen_data(
    out: &Path,
    classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
    overwrite: bool,
) -> Result<SplitManifest> {
    ensure_writable_dir(out, overwrite)?;
    Ok(generate_synthetic_fgir(out, classes, per_class, image_size, seed)?)
}

pub fn cmd_conformance(backbone: Option<&str>, image_size: usize) -> Result<Vec<(String, ConformanceCheck)>> {
    let registry = Registry::<f32>::with_defaults();
    let names = match backbone {
        Some(n) => vec![n.to_string()],
        None => registry.names(),
    };
    let mut out = Vec::new();
    for name in names {
        let bb = registry.build(&name, calmix_core::backbones::BackboneInit { seed: 0 })?;
        out.extend(conformance(bb.as_ref(), image_size).into_iter().map(|c| (name.clone(), c)));
    }
    Ok(out)
}

fn save_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, img.w as u32, img.h as u32, image::ExtendedColorType::Rgb8)?;
    Ok(())
}

/// Writes raw, attention, crop, mask and (when a same-class partner exists
/// among the dumped images) mix views of the first `count` training images.
pub fn cmd_dump_aug(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    count: usize,
    out: &Path,
    overwrite: bool,
) -> Result<Vec<PathBuf>> {
    let registry = Registry::with_defaults();
    let (train, _) = load_data(cfg)?;
    let model = match checkpoint {
        Some(dir) => load_model(dir, &registry)?.0,
        None => {
            let setting = if cfg.setting.uses_attention_head() { cfg.setting } else { TrEvSetting::CalMix };
            build_model(
                &registry,
                setting,
                &cfg.backbone,
                train.num_classes,
                cfg.image_size,
                cfg.cal_config(),
                cfg.seed,
            )?
        }
    };
    ensure_writable_dir(out, overwrite)?;
    let items: Vec<&(Image, usize)> = train.items.iter().take(count).collect();
    let images: Vec<Image> = items.iter().map(|(im, _)| im.clone()).collect();
    let maps = attention_maps(&model, &images)?;
    let size = (cfg.image_size, cfg.image_size);
    let selected: Vec<_> = maps.iter().map(|m| select_attention_map_argmax(m, size)).collect();
    let mut written = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let sel = &selected[i];
        let heat = Image::new(img.h, img.w, sel.values.iter().flat_map(|&v| [v, v, v]).collect())?;
        let b = bbox_from_attention(sel, model.cal.crop_threshold).padded(model.cal.crop_padding, img.h, img.w);
        let mut views = vec![
            ("raw", img.clone()),
            ("attention", heat),
            ("crop", attention_crop(img, &b, size)?),
            ("mask", attention_mask(img, sel, model.cal.mask_threshold)?),
        ];
        if let Some(j) = (0..images.len()).find(|&j| j != i && items[j].1 == items[i].1) {
            views.push(("mix", mix_pair(img, sel, &images[j], &selected[j], model.cal.crop_threshold)?.0));
        }
        for (kind, view) in views {
            let path = out.join(format!("{i:03}_{kind}.png"));
            save_png(&path, &view)?;
            written.push(path);
        }
    }
    Ok(written)
}
