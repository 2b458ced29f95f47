//! Single runs, class-count sweeps and ablations. Everything a run writes
//! goes under the output directory it is given.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use twins_core::data::{gen_blobs, PdaTask, PdaTaskSpec, Split};
use twins_core::eval::{evaluate, export_features as export_table};
use twins_core::nn::ClassifierPair;
use twins_core::trainer::{run_with_hook, Boundary, MethodVariant, TrainLog};

use crate::checkpoint;
use crate::config::{ExperimentConfig, IdxFiles, TaskConfig};
use crate::error::{Error, Result};
use crate::features;
use crate::idx::load_idx;
use crate::results::{
    write_aggregate_csv, write_epochs_csv, write_summary_csv, write_text, write_weights_csv, RunMetrics,
};

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// The task for one run. `target_classes` overrides the configured count.
pub fn build_task(cfg: &ExperimentConfig, target_classes: Option<usize>, seed: u64) -> Result<PdaTask> {
    match &cfg.task {
        TaskConfig::Blobs(spec) => {
            let spec =
                PdaTaskSpec { seed, target_classes: target_classes.unwrap_or(spec.target_classes), ..spec.clone() };
            Ok(gen_blobs(&spec)?)
        }
        TaskConfig::Idx(c) => {
            let n = target_classes.unwrap_or(c.target_classes);
            let all: Vec<usize> = (0..c.num_classes).collect();
            let kept: Vec<usize> = (0..n).collect();
            let load =
                |f: &IdxFiles, keep: &[usize], split| load_idx(&f.images, &f.labels, Some(keep), c.num_classes, split);
            let task = PdaTask {
                source_train: load(&c.source_train, &all, Split::Train)?,
                source_test: load(&c.source_test, &all, Split::Test)?,
                target_train: load(&c.target_train, &kept, Split::Train)?,
                target_test: load(&c.target_test, &kept, Split::Test)?,
            };
            let d = task.source_train.dim();
            for (name, ds) in [
                ("source_test", &task.source_test),
                ("target_train", &task.target_train),
                ("target_test", &task.target_test),
            ] {
                if ds.dim() != d {
                    return Err(Error::config(
                        format!("task.{name}"),
                        format!("{} features per row, source_train has {d}", ds.dim()),
                    ));
                }
            }
            Ok(task)
        }
    }
}

pub fn widths(cfg: &ExperimentConfig, task: &PdaTask) -> Vec<usize> {
    let mut w = vec![task.dim()];
    w.extend(&cfg.model.hidden);
    w.push(task.num_classes());
    w
}

pub fn run_dir(out: &Path, variant: MethodVariant, n_classes: usize, seed: u64) -> PathBuf {
    out.join(format!("{}_n{}_s{}", variant.as_str(), n_classes, seed))
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub log: TrainLog,
    pub pair: ClassifierPair,
    pub dir: PathBuf,
}

/// Trains one variant on one seed and writes `metrics.json`, `epochs.csv`,
/// `weights.csv`, phase-boundary checkpoints and `run_info.json` (the only
/// file with timestamps) into a run directory under `out`.
pub fn run_single(
    cfg: &ExperimentConfig,
    variant: MethodVariant,
    seed: u64,
    target_classes: Option<usize>,
    out: &Path,
) -> Result<RunOutput> {
    cfg.validate()?;
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let n = target_classes.unwrap_or(cfg.task.target_classes());
    let task = build_task(cfg, Some(n), seed)?;
    let w = widths(cfg, &task);
    let schedule = twins_core::trainer::TrainSchedule { seed, ..cfg.schedule.clone() };

    let dir = run_dir(out, variant, n, seed);
    let ckpt_dir = dir.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let mut hook = |b: Boundary, pair: &ClassifierPair| -> twins_core::Result<()> {
        let name = match b {
            Boundary::AfterPretrain => "pretrain.ckpt",
            Boundary::Final => "final.ckpt",
        };
        checkpoint::save(pair, &ckpt_dir.join(name)).map_err(|e| twins_core::Error::Contract(e.to_string()))
    };
    let outcome = run_with_hook(variant, &task, &w, &schedule, None, &mut hook)?;
    if outcome.log.aborted.is_some() {
        checkpoint::save(&outcome.pair, &ckpt_dir.join("aborted.ckpt"))?;
    }
    let fallback = evaluate(&outcome.pair, &task)?;
    let metrics = RunMetrics::from_log(variant, n, seed, &outcome.log, fallback);

    write_text(&dir.join("metrics.json"), &metrics.to_json()?)?;
    write_epochs_csv(&outcome.log, create(&dir.join("epochs.csv"))?)?;
    write_weights_csv(&outcome.log, create(&dir.join("weights.csv"))?)?;
    let info = serde_json::json!({
        "started_unix_secs": started,
        "elapsed_secs": clock.elapsed().as_secs_f64(),
    });
    write_text(&dir.join("run_info.json"), &(serde_json::to_string_pretty(&info)? + "\n"))?;
    Ok(RunOutput { metrics, log: outcome.log, pair: outcome.pair, dir })
}

/// Runs every configured variant and seed at the configured class count.
pub fn run_all(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RunMetrics>> {
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for &v in &cfg.variants {
            runs.push(run_single(cfg, v, seed, None, out)?.metrics);
        }
    }
    write_summary_csv(&runs, create(&out.join("summary.csv"))?)?;
    write_aggregate_csv(&runs, create(&out.join("summary_aggregate.csv"))?)?;
    Ok(runs)
}

/// Every configured variant and seed at each `sweep.class_counts` entry;
/// one row per run in `sweep.csv`.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RunMetrics>> {
    cfg.validate()?;
    create_dir(out)?;
    let mut runs = Vec::with_capacity(cfg.sweep.class_counts.len() * cfg.variants.len() * cfg.seeds.len());
    for &n in &cfg.sweep.class_counts {
        for &seed in &cfg.seeds {
            for &v in &cfg.variants {
                runs.push(run_single(cfg, v, seed, Some(n), out)?.metrics);
            }
        }
    }
    write_summary_csv(&runs, create(&out.join("sweep.csv"))?)?;
    write_aggregate_csv(&runs, create(&out.join("sweep_aggregate.csv"))?)?;
    Ok(runs)
}

/// All four variants on every seed. Runs sharing a seed share the initial
/// pair, the data and the shuffles.
pub fn run_ablations(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RunMetrics>> {
    cfg.validate()?;
    create_dir(out)?;
    let mut runs = Vec::with_capacity(4 * cfg.seeds.len());
    for &seed in &cfg.seeds {
        for v in MethodVariant::ALL {
            runs.push(run_single(cfg, v, seed, None, out)?.metrics);
        }
    }
    write_summary_csv(&runs, create(&out.join("ablation.csv"))?)?;
    write_aggregate_csv(&runs, create(&out.join("ablation_aggregate.csv"))?)?;
    Ok(runs)
}

/// Writes hidden features of the first network for the source and target
/// test splits to `out/features.csv`. Uses `checkpoint` when given, otherwise
/// trains the first configured variant on `seed` first. `layer` defaults to
/// the penultimate layer.
pub fn export_features(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    layer: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<PathBuf> {
    cfg.validate()?;
    create_dir(out)?;
    let task = build_task(cfg, None, seed)?;
    let pair = match checkpoint {
        Some(p) => checkpoint::load(p)?,
        None => run_single(cfg, cfg.variants[0], seed, None, out)?.pair,
    };
    if pair.widths() != widths(cfg, &task) {
        return Err(Error::config(
            "model.hidden",
            format!("checkpoint widths {:?} do not fit the task", pair.widths()),
        ));
    }
    let layer = layer.unwrap_or(pair.f1.depth() - 1);
    let table = export_table(&pair.f1, layer, &task.source_test, &task.target_test)?;
    let path = out.join("features.csv");
    features::write_csv(&table, create(&path)?)?;
    Ok(path)
}
