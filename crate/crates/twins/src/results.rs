//! Metrics JSON, per-epoch CSV and summary tables.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use twins_core::eval::MetricsRecord;
use twins_core::trainer::{AbortRecord, MethodVariant, TrainLog};

use crate::error::{Error, Result};

/// Final metrics of one run. Contains nothing time-dependent, so identical
/// configs give byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub variant: MethodVariant,
    /// Target class count.
    pub n_classes: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: MetricsRecord,
    /// Mean L1 between the networks after the first adaptation epoch.
    pub first_adapt_mean_l1: Option<f64>,
    pub epochs: usize,
    pub aborted: Option<AbortRecord>,
}

impl RunMetrics {
    pub fn from_log(
        variant: MethodVariant,
        n_classes: usize,
        seed: u64,
        log: &TrainLog,
        fallback: MetricsRecord,
    ) -> Self {
        Self {
            variant,
            n_classes,
            seed,
            metrics: log.last().map(|r| r.metrics.clone()).unwrap_or(fallback),
            first_adapt_mean_l1: log.first_adapt().map(|r| r.metrics.mean_l1),
            epochs: log.records.len(),
            aborted: log.aborted.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const EPOCH_COLUMNS: [&str; 12] = [
    "epoch",
    "phase",
    "ls1",
    "ls2",
    "lt",
    "acc_f1",
    "acc_f2",
    "acc_fused",
    "weight_tv",
    "absent_mass",
    "disagree_rate",
    "mean_l1",
];

pub fn write_epochs_csv<W: Write>(log: &TrainLog, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EPOCH_COLUMNS)?;
    for r in &log.records {
        let m = &r.metrics;
        let mut rec = vec![r.epoch.to_string(), r.phase.number().to_string()];
        rec.extend(
            [
                r.losses.ls1,
                r.losses.ls2,
                r.losses.lt,
                m.accuracy_f1,
                m.accuracy_f2,
                m.accuracy_fused,
                m.weight_tv,
                m.absent_mass,
                m.disagree_rate,
                m.mean_l1,
            ]
            .iter()
            .map(|v| format!("{v:?}")),
        );
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<epochs csv>", e))?;
    Ok(())
}

/// The weights used in each epoch, one column per class.
pub fn write_weights_csv<W: Write>(log: &TrainLog, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let k = log.records.first().map_or(0, |r| r.weights.len());
    let mut header = vec!["epoch".to_string()];
    header.extend((0..k).map(|j| format!("w{j}")));
    w.write_record(&header)?;
    for r in &log.records {
        let mut rec = vec![r.epoch.to_string()];
        rec.extend(r.weights.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<weights csv>", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SummaryRow {
    variant: MethodVariant,
    n_classes: usize,
    seed: u64,
    accuracy_f1: f64,
    accuracy_f2: f64,
    accuracy_fused: f64,
    weight_tv: f64,
    absent_mass: f64,
    disagree_rate: f64,
    mean_l1: f64,
    aborted: bool,
}

/// One row per run.
pub fn write_summary_csv<W: Write>(runs: &[RunMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in runs {
        let m = &r.metrics;
        w.serialize(SummaryRow {
            variant: r.variant,
            n_classes: r.n_classes,
            seed: r.seed,
            accuracy_f1: m.accuracy_f1,
            accuracy_f2: m.accuracy_f2,
            accuracy_fused: m.accuracy_fused,
            weight_tv: m.weight_tv,
            absent_mass: m.absent_mass,
            disagree_rate: m.disagree_rate,
            mean_l1: m.mean_l1,
            aborted: r.aborted.is_some(),
        })?;
    }
    w.flush().map_err(|e| Error::io("<summary csv>", e))?;
    Ok(())
}

/// Mean and sample standard deviation of each final metric per
/// (variant, target class count), in first-seen order.
pub fn write_aggregate_csv<W: Write>(runs: &[RunMetrics], out: W) -> Result<()> {
    let mut groups: Vec<((MethodVariant, usize), Vec<&RunMetrics>)> = Vec::new();
    for r in runs {
        let key = (r.variant, r.n_classes);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    type Field = (&'static str, fn(&MetricsRecord) -> f64);
    let fields: [Field; 7] = [
        ("accuracy_f1", |m| m.accuracy_f1),
        ("accuracy_f2", |m| m.accuracy_f2),
        ("accuracy_fused", |m| m.accuracy_fused),
        ("weight_tv", |m| m.weight_tv),
        ("absent_mass", |m| m.absent_mass),
        ("disagree_rate", |m| m.disagree_rate),
        ("mean_l1", |m| m.mean_l1),
    ];
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["variant".to_string(), "n_classes".to_string(), "runs".to_string(), "aborted".to_string()];
    for (name, _) in &fields {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    w.write_record(&header)?;
    for ((variant, n), group) in &groups {
        let mut rec = vec![
            variant.as_str().to_string(),
            n.to_string(),
            group.len().to_string(),
            group.iter().filter(|r| r.aborted.is_some()).count().to_string(),
        ];
        for (_, get) in &fields {
            let xs: Vec<f64> = group.iter().map(|r| get(&r.metrics)).collect();
            let (mean, std) = mean_std(&xs);
            rec.push(format!("{mean:?}"));
            rec.push(format!("{std:?}"));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<aggregate csv>", e))?;
    Ok(())
}

/// Sample standard deviation; zero for a single value.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean fused accuracy of `variant` at `n_classes` over all its seeds.
pub fn mean_fused_accuracy(runs: &[RunMetrics], variant: MethodVariant, n_classes: usize) -> Option<f64> {
    let xs: Vec<f64> = runs
        .iter()
        .filter(|r| r.variant == variant && r.n_classes == n_classes)
        .map(|r| r.metrics.accuracy_fused)
        .collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}
