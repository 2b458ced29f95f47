use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use twins::config::ExperimentConfig;
use twins::results::RunMetrics;
use twins::runner;
use twins_core::trainer::MethodVariant;

#[derive(Parser)]
#[command(name = "twins", version, about = "Paired weighted classifiers for partial domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run this single seed instead of the configured list.
    #[arg(long, value_name = "SEED")]
    seed_override: Option<u64>,
    /// Run this variant instead of the configured list.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<MethodVariant>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured variants on every seed.
    Run(Common),
    /// Repeat runs over `sweep.class_counts`.
    Sweep(Common),
    /// Train all four variants on every seed.
    Ablate(Common),
    /// Write hidden-layer features of the first network as CSV.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to read; trains a fresh pair when omitted.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// 1-based hidden layer; defaults to the penultimate layer.
        #[arg(long)]
        layer: Option<usize>,
    },
}

fn parse_variant(s: &str) -> std::result::Result<MethodVariant, String> {
    MethodVariant::parse(s).ok_or_else(|| {
        let names: Vec<&str> = MethodVariant::ALL.iter().map(|v| v.as_str()).collect();
        format!("unknown variant `{s}`, expected one of {}", names.join(", "))
    })
}

fn prepare(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed_override {
        cfg.seeds = vec![seed];
    }
    if let Some(v) = common.variant {
        cfg.variants = vec![v];
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    cfg.output_dir = out.clone();
    cfg.validate()?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    cfg.save(&out.join("config.toml"))?;
    Ok((cfg, out))
}

fn report(runs: &[RunMetrics], out: &Path) {
    for r in runs {
        let m = &r.metrics;
        println!(
            "{:<17} n={:<3} seed={:<4} fused={:.4} f1={:.4} f2={:.4} tv={:.4} absent={:.4}{}",
            r.variant.as_str(),
            r.n_classes,
            r.seed,
            m.accuracy_fused,
            m.accuracy_f1,
            m.accuracy_f2,
            m.weight_tv,
            m.absent_mass,
            if r.aborted.is_some() { " ABORTED" } else { "" }
        );
    }
    println!("results in {}", out.display());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| -> Result<()> {
        match &cli.command {
            Command::Run(c) => {
                let (cfg, out) = prepare(c)?;
                report(&runner::run_all(&cfg, &out)?, &out);
            }
            Command::Sweep(c) => {
                let (cfg, out) = prepare(c)?;
                report(&runner::run_sweep(&cfg, &out)?, &out);
            }
            Command::Ablate(c) => {
                let (cfg, out) = prepare(c)?;
                report(&runner::run_ablations(&cfg, &out)?, &out);
            }
            Command::ExportFeatures { common, checkpoint, layer } => {
                let (cfg, out) = prepare(common)?;
                let path = runner::export_features(&cfg, checkpoint.as_deref(), *layer, cfg.seeds[0], &out)?;
                println!("features in {}", path.display());
            }
        }
        Ok(())
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
