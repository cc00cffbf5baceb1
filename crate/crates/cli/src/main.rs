use std::path::PathBuf;
use std::process::ExitCode;

use calmix_cli::commands::{self, BenchmarkArgs};
use calmix_cli::config::ExperimentConfig;
use calmix_cli::report::generate_report;
use calmix_cli::{CliError, Result};
use calmix_core::TrEvSetting;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "calmix", version, about = "Train and benchmark attention-augmented fine-grained classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration on its train split and evaluate on test.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        overwrite: bool,
        /// Fail instead of waiting when another throughput measurement holds the lock.
        #[arg(long)]
        no_wait: bool,
    },
    /// Run one stage of the sweep protocol (`lr` then `seeds`).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage: String,
        #[arg(long)]
        overwrite: bool,
        #[arg(long)]
        no_wait: bool,
    },
    /// Measure inference throughput of a saved checkpoint.
    Benchmark {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate under a different setting than the one trained.
        #[arg(long)]
        setting: Option<TrEvSetting>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 512)]
        num_samples: usize,
        #[arg(long, default_value_t = 2)]
        warmup_batches: usize,
        #[arg(long)]
        no_wait: bool,
        #[arg(long, env = "CALMIX_OUT", default_value = "runs")]
        out: PathBuf,
    },
    /// Build normalized tables, plots and the relative-change table.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Write a synthetic fine-grained dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        overwrite: bool,
    },
    /// Run the backbone adapter checks.
    Conformance {
        #[arg(long)]
        backbone: Option<String>,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Save raw, attention, crop, mask and mix views as PNGs.
    DumpAug {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, overwrite, no_wait } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let r = commands::cmd_train(&cfg, overwrite, !no_wait)?;
            println!(
                "{} seed {}: top-1 {:.4}, train {:.2} min, {:.1} samples/s",
                r.config_id,
                r.seed,
                r.top1,
                r.train_time_min,
                r.throughput_sps.unwrap_or(0.0)
            );
        }
        Command::Sweep { config, stage, overwrite, no_wait } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_sweep(&cfg, &stage, overwrite, !no_wait)?;
        }
        Command::Benchmark {
            checkpoint,
            setting,
            batch_size,
            num_samples,
            warmup_batches,
            no_wait,
            out,
        } => {
            let sps = commands::cmd_benchmark(&BenchmarkArgs {
                checkpoint,
                setting,
                batch_size,
                num_samples,
                warmup_batches,
                wait: !no_wait,
                out,
            })?;
            println!("{sps:.1} samples/s");
        }
        Command::Report { results, out, overwrite } => {
            let files = generate_report(&results, &out, overwrite)?;
            println!("wrote {}", files.summary.display());
        }
        Command::GenData { out, classes, per_class, image_size, seed, overwrite } => {
            let m = commands::cmd_gen_data(&out, classes, per_class, image_size, seed, overwrite)?;
            println!("{} images in {}", m.rows.len(), out.display());
        }
        Command::Conformance { backbone, image_size } => {
            let checks = commands::cmd_conformance(backbone.as_deref(), image_size)?;
            let mut failed = 0;
            for (name, c) in &checks {
                println!("{} {name} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(CliError::Conformance(format!("{failed} check(s) failed")));
            }
        }
        Command::DumpAug { config, checkpoint, count, out, overwrite } => {
            let cfg = ExperimentConfig::load(&config)?;
            let files = commands::cmd_dump_aug(&cfg, checkpoint.as_deref(), count, &out, overwrite)?;
            println!("wrote {} images to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
