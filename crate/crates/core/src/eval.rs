//! Accuracy, agreement and weight-quality metrics, plus hidden-feature export.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, PdaTask};
use crate::error::{bail, Result};
use crate::losses::{estimate_weights, mean_l1, ClassWeights};
use crate::nn::{ClassifierPair, MlpClassifier};
use crate::tensor::Tensor;

/// Rows per forward chunk when scoring whole datasets.
pub const EVAL_CHUNK: usize = 1024;

/// Which prediction to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    F1,
    F2,
    /// argmax of `(p1 + p2) / 2`.
    Mean,
}

pub fn predict(pair: &ClassifierPair, x: &Tensor, fusion: Fusion) -> Result<Vec<usize>> {
    let probs = match fusion {
        Fusion::F1 => pair.f1.forward_probs(x)?,
        Fusion::F2 => pair.f2.forward_probs(x)?,
        Fusion::Mean => pair.fused_probs(x)?,
    };
    probs.argmax_rows()
}

fn fraction_correct(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Fraction of labelled rows predicted correctly.
pub fn accuracy(pair: &ClassifierPair, data: &DomainDataset, fusion: Fusion) -> Result<f64> {
    let labels = data.require_labels()?;
    let pred = predict(pair, data.features(), fusion)?;
    Ok(fraction_correct(&pred, labels))
}

/// How much the two networks disagree on a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    /// Fraction of rows whose argmax differs.
    pub disagree_rate: f64,
    /// Mean L1 distance between the two probability rows.
    pub mean_l1: f64,
}

pub fn divergence_proxy(pair: &ClassifierPair, data: &DomainDataset) -> Result<Divergence> {
    if data.is_empty() {
        bail!(Data, "divergence of an empty dataset");
    }
    let p1 = pair.f1.forward_probs(data.features())?;
    let p2 = pair.f2.forward_probs(data.features())?;
    let a1 = p1.argmax_rows()?;
    let a2 = p2.argmax_rows()?;
    let differ = a1.iter().zip(&a2).filter(|(a, b)| a != b).count();
    Ok(Divergence { disagree_rate: differ as f64 / data.len() as f64, mean_l1: mean_l1(&p1, &p2)? })
}

/// Distance between normalised weights `w / |Ys|` and a true label distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightQuality {
    /// `½ ‖w/|Ys| − q‖₁`.
    pub tv: f64,
    /// Normalised weight mass on classes with `q = 0`.
    pub absent_mass: f64,
}

pub fn weight_quality(w: &ClassWeights, true_dist: &[f64]) -> Result<WeightQuality> {
    if w.len() != true_dist.len() {
        bail!(Dimension, "{} weights against a {}-class distribution", w.len(), true_dist.len());
    }
    let k = w.len() as f64;
    let mut tv = 0.0;
    let mut absent = 0.0;
    for (&wi, &q) in w.as_slice().iter().zip(true_dist) {
        let p = wi / k;
        tv += (p - q).abs();
        if q == 0.0 {
            absent += p;
        }
    }
    Ok(WeightQuality { tv: 0.5 * tv, absent_mass: absent })
}

/// End-of-epoch or end-of-run metrics on the target domain.
///
/// Accuracies and agreement are measured on the target test split; weights are
/// re-estimated from the target training split and compared with its true
/// label distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub accuracy_f1: f64,
    pub accuracy_f2: f64,
    pub accuracy_fused: f64,
    pub weight_tv: f64,
    pub absent_mass: f64,
    pub disagree_rate: f64,
    pub mean_l1: f64,
}

pub fn evaluate(pair: &ClassifierPair, task: &PdaTask) -> Result<MetricsRecord> {
    let test = &task.target_test;
    let labels = test.require_labels()?;
    let x = test.features();
    let p1 = pair.f1.forward_probs(x)?;
    let p2 = pair.f2.forward_probs(x)?;
    let fused = p1.add(&p2)?.scale(0.5);
    let a1 = p1.argmax_rows()?;
    let a2 = p2.argmax_rows()?;
    let differ = a1.iter().zip(&a2).filter(|(a, b)| a != b).count();
    let w = estimate_weights(pair, task.target_train.features(), EVAL_CHUNK)?;
    let quality = weight_quality(&w, &task.target_distribution()?)?;
    Ok(MetricsRecord {
        accuracy_f1: fraction_correct(&a1, labels),
        accuracy_f2: fraction_correct(&a2, labels),
        accuracy_fused: fraction_correct(&fused.argmax_rows()?, labels),
        weight_tv: quality.tv,
        absent_mass: quality.absent_mass,
        disagree_rate: differ as f64 / test.len() as f64,
        mean_l1: mean_l1(&p1, &p2)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub features: Vec<f64>,
    pub domain: Domain,
    pub label: usize,
    /// Whether the label occurs in the target domain.
    pub present: bool,
}

/// Hidden activations of both domains with their metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub columns: Vec<String>,
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn width(&self) -> usize {
        self.columns.len()
    }
}

/// Activations of hidden layer `layer` (1-based; the penultimate layer is
/// `net.depth() - 1`) for every labelled source and target row.
pub fn export_features(
    net: &MlpClassifier,
    layer: usize,
    source: &DomainDataset,
    target: &DomainDataset,
) -> Result<FeatureTable> {
    let hs = net.hidden(source.features(), layer)?;
    let ht = net.hidden(target.features(), layer)?;
    let target_labels = target.require_labels()?;
    let mut present = vec![false; target.class_universe().max(source.class_universe())];
    for &y in target_labels {
        present[y] = true;
    }
    let mut rows = Vec::with_capacity(source.len() + target.len());
    for (h, ds, domain) in [(&hs, source, Domain::Source), (&ht, target, Domain::Target)] {
        let labels = ds.require_labels()?;
        for (i, &label) in labels.iter().enumerate() {
            rows.push(FeatureRow { features: h.row(i).to_vec(), domain, label, present: present[label] });
        }
    }
    let columns = (0..hs.cols()).map(|j| format!("h{j}")).collect();
    Ok(FeatureTable { columns, rows })
}
