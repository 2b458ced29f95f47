//! Domain datasets, synthetic partial-shift blob tasks and paired mini-batches.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Features of one domain, with labels when they are known.
///
/// Labels always index the full source class universe; target data is never
/// re-indexed.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    features: Tensor,
    labels: Option<Vec<usize>>,
    class_universe: usize,
    split: Split,
}

impl DomainDataset {
    pub fn new(features: Tensor, labels: Option<Vec<usize>>, class_universe: usize, split: Split) -> Result<Self> {
        let [n, _] = *features.shape() else {
            bail!(Dimension, "features must be n×d, got {:?}", features.shape());
        };
        if class_universe == 0 {
            bail!(Config, "class universe must be positive");
        }
        if !features.all_finite() {
            bail!(Data, "features contain non-finite values");
        }
        if let Some(l) = &labels {
            if l.len() != n {
                bail!(Data, "{} labels for {} rows", l.len(), n);
            }
            if let Some(&y) = l.iter().find(|&&y| y >= class_universe) {
                bail!(Data, "label {} outside class universe of {}", y, class_universe);
            }
        }
        Ok(Self { features, labels, class_universe, split })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        match &self.labels {
            Some(l) => Ok(l),
            None => bail!(Data, "{:?} dataset has no labels", self.split),
        }
    }

    pub fn class_universe(&self) -> usize {
        self.class_universe
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Same rows without labels, as the learner sees target data.
    pub fn unlabeled(&self) -> Self {
        Self { labels: None, ..self.clone() }
    }

    pub fn label_counts(&self) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.class_universe];
        for &y in self.require_labels()? {
            counts[y] += 1;
        }
        Ok(counts)
    }

    /// Empirical label distribution over the full class universe.
    pub fn label_distribution(&self) -> Result<Vec<f64>> {
        let n = self.len() as f64;
        Ok(self.label_counts()?.into_iter().map(|c| c as f64 / n).collect())
    }

    /// Rows in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let features = self.features.select_rows(indices)?;
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Self { features, labels, ..*self })
    }

    /// Keeps only rows whose label is in `keep`.
    pub fn filter_classes(&self, keep: &[usize]) -> Result<Self> {
        let labels = self.require_labels()?;
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&labels[i])).collect();
        if idx.is_empty() {
            bail!(Data, "no rows left after keeping classes {:?}", keep);
        }
        self.select(&idx)
    }
}

/// Global covariate shift applied to target features: rotate the first two
/// coordinates about the origin, translate, then add isotropic noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftParams {
    pub rotation_deg: f64,
    /// Empty means no translation; otherwise one entry per feature.
    pub translation: Vec<f64>,
    pub noise: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self { rotation_deg: 16.0, translation: Vec::new(), noise: 0.3 }
    }
}

impl ShiftParams {
    pub fn none() -> Self {
        Self { rotation_deg: 0.0, translation: Vec::new(), noise: 0.0 }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.noise == 0.0 && self.translation.iter().all(|&t| t == 0.0)
    }
}

/// Where class centres sit on the circle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobLayout {
    /// Class `k` at slot `k`.
    Sequential,
    /// The first half of the classes on even slots, the rest on odd slots, so
    /// every low-index class is flanked by high-index ones.
    Interleaved,
}

/// Synthetic partial domain adaptation task description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdaTaskSpec {
    /// Source classes |Ys|.
    pub num_classes: usize,
    /// Target keeps classes `0..target_classes`.
    pub target_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub radius: f64,
    pub class_std: f64,
    pub layout: BlobLayout,
    pub shift: ShiftParams,
    pub seed: u64,
}

impl Default for PdaTaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            target_classes: 5,
            dim: 2,
            train_per_class: 400,
            test_per_class: 200,
            radius: 5.0,
            class_std: 0.3,
            layout: BlobLayout::Interleaved,
            shift: ShiftParams::default(),
            seed: 0,
        }
    }
}

impl PdaTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            bail!(Config, "need at least two source classes, got {}", self.num_classes);
        }
        if self.target_classes == 0 || self.target_classes > self.num_classes {
            bail!(Config, "target classes {} must lie in 1..={}", self.target_classes, self.num_classes);
        }
        if self.dim < 2 {
            bail!(Config, "blob tasks need at least two dimensions, got {}", self.dim);
        }
        if self.train_per_class < 2 || self.test_per_class < 2 {
            bail!(Config, "need at least two samples per class and split");
        }
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !(self.radius.is_finite() && self.radius > 0.0) || !nonneg(self.class_std) || !nonneg(self.shift.noise) {
            bail!(Config, "radius must be positive and spreads nonnegative");
        }
        if !self.shift.translation.is_empty() && self.shift.translation.len() != self.dim {
            bail!(Config, "translation has {} entries for dimension {}", self.shift.translation.len(), self.dim);
        }
        Ok(())
    }

    fn slot(&self, class: usize) -> usize {
        match self.layout {
            BlobLayout::Sequential => class,
            BlobLayout::Interleaved => {
                let half = self.num_classes.div_ceil(2);
                if class < half {
                    2 * class
                } else {
                    2 * (class - half) + 1
                }
            }
        }
    }

    /// Centre of class `k`; coordinates beyond the first two are zero.
    pub fn center(&self, class: usize) -> Vec<f64> {
        let angle = 2.0 * PI * self.slot(class) as f64 / self.num_classes as f64;
        let mut c = vec![0.0; self.dim];
        c[0] = self.radius * libm::cos(angle);
        c[1] = self.radius * libm::sin(angle);
        c
    }
}

/// Train/test splits of both domains.
#[derive(Debug, Clone, PartialEq)]
pub struct PdaTask {
    pub source_train: DomainDataset,
    pub source_test: DomainDataset,
    pub target_train: DomainDataset,
    pub target_test: DomainDataset,
}

impl PdaTask {
    pub fn num_classes(&self) -> usize {
        self.source_train.class_universe()
    }

    pub fn dim(&self) -> usize {
        self.source_train.dim()
    }

    /// True label distribution of the target training set, used only for
    /// monitoring.
    pub fn target_distribution(&self) -> Result<Vec<f64>> {
        self.target_train.label_distribution()
    }
}

fn sample_blobs(spec: &PdaTaskSpec, classes: usize, per_class: usize, rng: &mut Rng) -> (Vec<f64>, Vec<usize>) {
    let mut x = Vec::with_capacity(classes * per_class * spec.dim);
    let mut y = Vec::with_capacity(classes * per_class);
    for k in 0..classes {
        let c = spec.center(k);
        for _ in 0..per_class {
            for &ci in &c {
                let z: f64 = rng.sample(StandardNormal);
                x.push(ci + spec.class_std * z);
            }
            y.push(k);
        }
    }
    (x, y)
}

fn apply_shift(spec: &PdaTaskSpec, x: &mut [f64], rng: &mut Rng) {
    let theta = spec.shift.rotation_deg * PI / 180.0;
    let (s, c) = (libm::sin(theta), libm::cos(theta));
    for row in x.chunks_mut(spec.dim) {
        let (a, b) = (row[0], row[1]);
        row[0] = c * a - s * b;
        row[1] = s * a + c * b;
        for (j, v) in row.iter_mut().enumerate() {
            if let Some(t) = spec.shift.translation.get(j) {
                *v += t;
            }
            if spec.shift.noise > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                *v += spec.shift.noise * z;
            }
        }
    }
}

/// Gaussian blobs on a circle. The source holds every class; the target holds
/// the first `target_classes` classes drawn from the same class-conditionals
/// and then shifted. Each split draws from its own seeded stream, so the
/// source is identical across target class counts.
pub fn gen_blobs(spec: &PdaTaskSpec) -> Result<PdaTask> {
    spec.validate()?;
    let k = spec.num_classes;
    let make = |name: &str, classes: usize, per_class: usize, shifted: bool, split: Split| -> Result<DomainDataset> {
        let mut rng = rng::stream(spec.seed, name, 0);
        let (mut x, y) = sample_blobs(spec, classes, per_class, &mut rng);
        if shifted {
            apply_shift(spec, &mut x, &mut rng);
        }
        DomainDataset::new(Tensor::new(vec![y.len(), spec.dim], x)?, Some(y), k, split)
    };
    let target_k = spec.target_classes;
    Ok(PdaTask {
        source_train: make("data/source/train", k, spec.train_per_class, false, Split::Train)?,
        source_test: make("data/source/test", k, spec.test_per_class, false, Split::Test)?,
        target_train: make("data/target/train", target_k, spec.train_per_class, true, Split::Train)?,
        target_test: make("data/target/test", target_k, spec.test_per_class, true, Split::Test)?,
    })
}

/// One step of paired data: labelled source rows and unlabelled target rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub xs: Tensor,
    pub ys: Vec<usize>,
    pub xt: Tensor,
    pub source_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
}

/// One epoch of paired batches. The epoch visits every source row once (the
/// last batch may be short); the target is reshuffled and recycled whenever
/// it runs out, so every step has a target half of the same size.
#[derive(Debug)]
pub struct PairedBatches<'a> {
    source: &'a DomainDataset,
    labels: &'a [usize],
    target: &'a DomainDataset,
    batch: usize,
    source_order: Vec<usize>,
    source_pos: usize,
    target_order: Vec<usize>,
    target_pos: usize,
    target_rng: Rng,
}

pub fn paired_batches<'a>(
    source: &'a DomainDataset,
    target: &'a DomainDataset,
    batch_per_domain: usize,
    seed: u64,
    epoch: u64,
) -> Result<PairedBatches<'a>> {
    let labels = source.require_labels()?;
    if source.dim() != target.dim() {
        bail!(Dimension, "source has {} features, target {}", source.dim(), target.dim());
    }
    if batch_per_domain == 0 || batch_per_domain > source.len() || batch_per_domain > target.len() {
        bail!(
            Config,
            "batch_per_domain {} must lie in 1..={} (source {}, target {})",
            batch_per_domain,
            source.len().min(target.len()),
            source.len(),
            target.len()
        );
    }
    let mut source_order: Vec<usize> = (0..source.len()).collect();
    source_order.shuffle(&mut rng::stream(seed, "shuffle/source", epoch));
    let mut target_rng = rng::stream(seed, "shuffle/target", epoch);
    let mut target_order: Vec<usize> = (0..target.len()).collect();
    target_order.shuffle(&mut target_rng);
    Ok(PairedBatches {
        source,
        labels,
        target,
        batch: batch_per_domain,
        source_order,
        source_pos: 0,
        target_order,
        target_pos: 0,
        target_rng,
    })
}

impl PairedBatches<'_> {
    pub fn steps(&self) -> usize {
        self.source.len().div_ceil(self.batch)
    }

    fn next_target(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.target_pos == self.target_order.len() {
                self.target_order.shuffle(&mut self.target_rng);
                self.target_pos = 0;
            }
            let take = (n - out.len()).min(self.target_order.len() - self.target_pos);
            out.extend_from_slice(&self.target_order[self.target_pos..self.target_pos + take]);
            self.target_pos += take;
        }
        out
    }

    fn make_batch(&mut self) -> Result<PairedBatch> {
        let end = (self.source_pos + self.batch).min(self.source_order.len());
        let source_indices = self.source_order[self.source_pos..end].to_vec();
        self.source_pos = end;
        let target_indices = self.next_target(source_indices.len());
        Ok(PairedBatch {
            xs: self.source.features().select_rows(&source_indices)?,
            ys: source_indices.iter().map(|&i| self.labels[i]).collect(),
            xt: self.target.features().select_rows(&target_indices)?,
            source_indices,
            target_indices,
        })
    }
}

impl Iterator for PairedBatches<'_> {
    type Item = PairedBatch;

    fn next(&mut self) -> Option<PairedBatch> {
        if self.source_pos >= self.source_order.len() {
            return None;
        }
        // indices are in range by construction
        Some(self.make_batch().expect("indices in range"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PdaTaskSpec {
        PdaTaskSpec { train_per_class: 12, test_per_class: 6, seed: 3, ..PdaTaskSpec::default() }
    }

    #[test]
    fn blobs_are_reproducible() {
        assert_eq!(gen_blobs(&small_spec()).unwrap(), gen_blobs(&small_spec()).unwrap());
    }

    #[test]
    fn target_keeps_first_classes() {
        let task = gen_blobs(&small_spec()).unwrap();
        let counts = task.target_train.label_counts().unwrap();
        assert_eq!(counts.iter().filter(|&&c| c > 0).count(), 5);
        assert!(counts[5..].iter().all(|&c| c == 0));
        assert_eq!(task.source_train.label_counts().unwrap(), vec![12; 10]);
        assert_eq!(task.target_test.class_universe(), 10);
    }

    #[test]
    fn full_target_is_standard_uda() {
        let spec = PdaTaskSpec { target_classes: 10, ..small_spec() };
        let task = gen_blobs(&spec).unwrap();
        assert_eq!(task.target_train.label_counts().unwrap(), vec![12; 10]);
    }

    #[test]
    fn too_many_target_classes_is_config_error() {
        let spec = PdaTaskSpec { target_classes: 11, ..small_spec() };
        assert!(matches!(gen_blobs(&spec), Err(crate::Error::Config(_))));
    }

    #[test]
    fn zero_shift_matches_source_generator() {
        // With no shift the target draws class-k points from the same
        // Gaussian: the per-class means agree with the source centre.
        let spec = PdaTaskSpec { shift: ShiftParams::none(), train_per_class: 2000, ..small_spec() };
        let task = gen_blobs(&spec).unwrap();
        for k in 0..5 {
            let c = spec.center(k);
            for ds in [&task.source_train, &task.target_train] {
                let l = ds.labels().unwrap();
                let rows: Vec<&[f64]> = (0..ds.len()).filter(|&i| l[i] == k).map(|i| ds.features().row(i)).collect();
                for j in 0..2 {
                    let m = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
                    assert!((m - c[j]).abs() < 0.05, "class {k} coord {j}: {m} vs {}", c[j]);
                }
            }
        }
    }

    #[test]
    fn interleaved_slots() {
        let spec = PdaTaskSpec::default();
        let slots: Vec<usize> = (0..10).map(|k| spec.slot(k)).collect();
        assert_eq!(slots, vec![0, 2, 4, 6, 8, 1, 3, 5, 7, 9]);
    }

    #[test]
    fn paired_batch_epoch_contract() {
        let task = gen_blobs(&small_spec()).unwrap();
        let target = task.target_train.unlabeled();
        let batches: Vec<_> = paired_batches(&task.source_train, &target, 16, 9, 0).unwrap().collect();
        assert_eq!(batches.len(), 120usize.div_ceil(16));
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.source_indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..120).collect::<Vec<_>>());
        for b in &batches {
            assert_eq!(b.xs.rows(), b.xt.rows());
            assert_eq!(b.ys.len(), b.xs.rows());
        }
        assert!(batches[..batches.len() - 1].iter().all(|b| b.xs.rows() == 16));
        // 120 source rows against 60 target rows: the target is recycled
        let total_target: usize = batches.iter().map(|b| b.target_indices.len()).sum();
        assert_eq!(total_target, 120);
    }

    #[test]
    fn paired_batches_are_deterministic_per_epoch() {
        let task = gen_blobs(&small_spec()).unwrap();
        let a: Vec<_> = paired_batches(&task.source_train, &task.target_train, 8, 1, 4).unwrap().collect();
        let b: Vec<_> = paired_batches(&task.source_train, &task.target_train, 8, 1, 4).unwrap().collect();
        let c: Vec<_> = paired_batches(&task.source_train, &task.target_train, 8, 1, 5).unwrap().collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn oversized_batch_is_config_error() {
        let task = gen_blobs(&small_spec()).unwrap();
        let r = paired_batches(&task.source_train, &task.target_train, 61, 1, 0);
        assert!(matches!(r, Err(crate::Error::Config(_))));
    }

    #[test]
    fn unlabeled_source_is_rejected() {
        let task = gen_blobs(&small_spec()).unwrap();
        let s = task.source_train.unlabeled();
        assert!(matches!(paired_batches(&s, &task.target_train, 4, 1, 0), Err(crate::Error::Data(_))));
    }

    #[test]
    fn dataset_validation() {
        let x = Tensor::zeros(vec![2, 2]);
        assert!(DomainDataset::new(x.clone(), Some(vec![0, 3]), 3, Split::Train).is_err());
        assert!(DomainDataset::new(x.clone(), Some(vec![0]), 3, Split::Train).is_err());
        let bad = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(DomainDataset::new(bad, None, 3, Split::Train).is_err());
        let ds = DomainDataset::new(x, Some(vec![0, 2]), 3, Split::Test).unwrap();
        assert_eq!(ds.filter_classes(&[2]).unwrap().labels().unwrap(), &[2]);
        assert!(ds.filter_classes(&[1]).is_err());
    }
}
