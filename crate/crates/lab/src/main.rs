use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use plab::pipeline::{self, load_timings};
use plab::ExperimentConfig;
use plab_core::finetune::parse_configs;
use plab_core::taskgen::TaskKind;
use plab_core::tensor::Precision;

/// Probing lab: generate tasks, train the toy VLM, probe its layers and
/// compare fine-tuning configurations.
#[derive(Parser)]
#[command(name = "plab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON). Defaults to the desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_precision)]
    precision: Option<Precision>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Manual segmentation as "l1,l2": first middle and first upper layer.
    #[arg(long, global = true, value_parser = parse_boundaries)]
    boundaries: Option<(usize, usize)>,
    /// Comma-separated fine-tuning configurations, e.g. "Base,All,L-M,M>U".
    #[arg(long, global = true)]
    configs: Option<String>,
    /// Comma-separated tasks to fine-tune.
    #[arg(long, global = true)]
    tasks: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic datasets.
    Generate,
    /// Train the base model jointly on every task.
    TrainBase,
    /// Probe every layer and token type of the base model.
    Probe,
    /// Fine-tune every configuration and write the report.
    Finetune,
    /// Rebuild the report from existing artifacts.
    Report,
    /// All stages in order.
    Run,
    /// Print the effective configuration as JSON.
    ShowConfig,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("unknown precision {s:?} (expected f32 or f64)")),
    }
}

fn parse_boundaries(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected l1,l2")?;
    let p = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

fn build_config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(p) = c.precision {
        cfg.precision = p;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(b) = c.boundaries {
        cfg.finetune.boundaries = Some(b);
    }
    if let Some(s) = &c.configs {
        cfg.finetune.configs = parse_configs(s)?;
    }
    if let Some(s) = &c.tasks {
        cfg.finetune.tasks = s
            .split(',')
            .map(|t| t.trim().parse::<TaskKind>())
            .collect::<Result<_, _>>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = build_config(&cli.common)?;
    match cli.command {
        Command::ShowConfig => println!("{}", serde_json::to_string_pretty(&cfg)?),
        Command::Generate => {
            let m = pipeline::cmd_generate(&cfg)?;
            for e in &m.entries {
                println!("{:<32} {:>6} samples", e.file, e.count);
            }
        }
        Command::TrainBase => {
            let log = pipeline::cmd_train_base(&cfg)?;
            if let Some(c) = log.checks.get(log.kept) {
                println!("kept check at step {} (epoch {})", c.step, c.epoch);
                for (k, a) in &c.accuracy {
                    println!("  {k:<12} {:.3}", a);
                }
            }
            if !log.reached_band {
                eprintln!(
                    "warning: validation accuracy never reached [{:.2}, {:.2}] on every task; \
                     kept the closest checkpoint",
                    cfg.base_train.band_low, cfg.base_train.band_high
                );
            }
        }
        Command::Probe => {
            for (k, g) in pipeline::cmd_probe(&cfg)? {
                println!(
                    "{k:<12} a_resp {:.3}  max_lp {:.3} (layer {})  gap {:+.3}",
                    g.a_resp, g.max_lp, g.argmax_layer, g.gap
                );
            }
        }
        Command::Finetune => {
            let r = pipeline::cmd_finetune(&cfg)?;
            print!("{}", r.render(&load_timings(&cfg)));
        }
        Command::Report => {
            let r = pipeline::cmd_report(&cfg)?;
            if r.rows.is_empty() && r.baselines.is_empty() {
                bail!("no artifacts under {}", cfg.out_dir.display());
            }
            print!("{}", r.render(&load_timings(&cfg)));
        }
        Command::Run => {
            let r = pipeline::run_all(&cfg)?;
            if r.base_reached_band == Some(false) {
                eprintln!("warning: base model missed the validation accuracy band");
            }
            print!("{}", r.render(&load_timings(&cfg)));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
