//! Objective terms: source cross-entropy, target label-distribution weights,
//! weighted cross-entropy, the L1 inconsistency between the two classifiers,
//! and their sum.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{bail, Result};
use crate::nn::ClassifierPair;
use crate::tensor::Tensor;

/// Inputs to `log` are clamped here so saturated softmax never yields `-inf`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Per-class weights `w`, scaled so they sum to the number of source classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            bail!(Dimension, "class weights need at least one class");
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            bail!(Numeric, "class weights must be finite and nonnegative: {:?}", w);
        }
        Ok(Self(w))
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0; num_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Raises every weight to at least `floor`, then rescales back to a sum of
    /// `len()`. A zero floor leaves the weights untouched.
    pub fn with_floor(self, floor: f64) -> Self {
        if floor <= 0.0 {
            return self;
        }
        let k = self.0.len() as f64;
        let raised: Vec<f64> = self.0.iter().map(|&v| v.max(floor)).collect();
        let total: f64 = raised.iter().sum();
        Self(raised.into_iter().map(|v| v * k / total).collect())
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        bail!(Dimension, "{} labels for {} rows", labels.len(), rows);
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        bail!(Data, "label {} out of range for {} classes", y, classes);
    }
    Ok(())
}

fn prob_dims(tape: &Tape, probs: Var) -> Result<(usize, usize)> {
    match *tape.value(probs).shape() {
        [n, k] => Ok((n, k)),
        ref s => bail!(Dimension, "probabilities must be n×K, got {:?}", s),
    }
}

/// `-(1/n) Σ log p(yᵢ | xᵢ)`.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = prob_dims(tape, probs)?;
    check_labels(labels, n, k)?;
    let picked = tape.gather(probs, labels)?;
    let logs = tape.log(picked, LOG_FLOOR)?;
    let total = tape.sum(logs)?;
    tape.scale(total, -1.0 / n as f64)
}

/// `-(1/n) Σ w_{yᵢ} log p(yᵢ | xᵢ)`; `w` enters as a constant.
pub fn weighted_cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize], w: &ClassWeights) -> Result<Var> {
    let (n, k) = prob_dims(tape, probs)?;
    if w.len() != k {
        bail!(Dimension, "{} class weights for {} classes", w.len(), k);
    }
    check_labels(labels, n, k)?;
    let picked = tape.gather(probs, labels)?;
    let logs = tape.log(picked, LOG_FLOOR)?;
    let per_sample = tape.constant(Tensor::vector(labels.iter().map(|&y| w.as_slice()[y]).collect()));
    let weighted = tape.mul(logs, per_sample)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0 / n as f64)
}

/// `(1/n) Σ ‖p1(·|xᵢ) − p2(·|xᵢ)‖₁`, differentiable in both arguments.
pub fn inconsistency_loss(tape: &mut Tape, p1: Var, p2: Var) -> Result<Var> {
    let (n, _) = prob_dims(tape, p1)?;
    if tape.value(p1).shape() != tape.value(p2).shape() {
        bail!(Dimension, "inconsistency between {:?} and {:?}", tape.value(p1).shape(), tape.value(p2).shape());
    }
    let diff = tape.sub(p1, p2)?;
    let dist = tape.abs(diff)?;
    let total = tape.sum(dist)?;
    tape.scale(total, 1.0 / n as f64)
}

/// Unit-coefficient sum of the two weighted source losses and the target
/// inconsistency.
pub fn total_loss(tape: &mut Tape, source1: Var, source2: Var, inconsistency: Var) -> Result<Var> {
    for v in [source1, source2, inconsistency] {
        if !tape.value(v).is_scalar() {
            bail!(Contract, "total_loss terms must be scalars");
        }
    }
    let s = tape.add(source1, source2)?;
    tape.add(s, inconsistency)
}

/// Tape-free mean L1 distance between two probability matrices.
pub fn mean_l1(p1: &Tensor, p2: &Tensor) -> Result<f64> {
    let diff = p1.sub(p2)?;
    Ok(diff.data().iter().map(|v| v.abs()).sum::<f64>() / p1.rows() as f64)
}

/// Target label-distribution weights from both networks' averaged outputs
/// over every row of `target_x`:
/// `w = |Ys| / (2 n_t) · Σᵢ (p1(·|xᵢ) + p2(·|xᵢ))`.
///
/// Runs without a tape, `chunk` rows at a time.
pub fn estimate_weights(pair: &ClassifierPair, target_x: &Tensor, chunk: usize) -> Result<ClassWeights> {
    let n = match target_x.shape() {
        [n, _] => *n,
        s => bail!(Dimension, "target features must be n×d, got {:?}", s),
    };
    if n == 0 {
        bail!(Data, "cannot estimate weights from an empty target set");
    }
    let k = pair.num_classes();
    let chunk = chunk.max(1);
    let mut acc = vec![0.0; k];
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let x = target_x.slice_rows(start, end)?;
        for net in pair.nets() {
            let p = net.forward_probs(&x)?;
            for row in p.data().chunks(k) {
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
        }
        start = end;
    }
    let scale = k as f64 / (2.0 * n as f64);
    ClassWeights::new(acc.into_iter().map(|a| a * scale).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ClassifierPair, MlpClassifier};

    fn probs(tape: &mut Tape, rows: &[&[f64]]) -> Var {
        let t = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        tape.param(t)
    }

    fn value(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let p = probs(&mut t, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = cross_entropy(&mut t, p, &[0, 1]).unwrap();
        assert_eq!(value(&t, l), 0.0);

        let p = probs(&mut t, &[&[0.2; 5], &[0.2; 5]]);
        let l = cross_entropy(&mut t, p, &[1, 4]).unwrap();
        assert!((value(&t, l) - libm::log(5.0)).abs() < 1e-12);

        let p = probs(&mut t, &[&[0.5, 0.5], &[0.75, 0.25]]);
        let l = cross_entropy(&mut t, p, &[0, 1]).unwrap();
        let expected = -(libm::log(0.5) + libm::log(0.25)) / 2.0;
        assert!((value(&t, l) - expected).abs() < 1e-12);
        assert!((value(&t, l) - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut t = Tape::new();
        let p = probs(&mut t, &[&[0.5, 0.5]]);
        assert!(matches!(cross_entropy(&mut t, p, &[2]), Err(crate::Error::Data(_))));
    }

    #[test]
    fn saturated_probability_stays_finite() {
        let mut t = Tape::new();
        let p = probs(&mut t, &[&[1.0, 0.0]]);
        let l = cross_entropy(&mut t, p, &[1]).unwrap();
        assert!((value(&t, l) + libm::log(LOG_FLOOR)).abs() < 1e-9);
        t.backward(l).unwrap();
        assert!(t.grad(p).unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn weighted_examples() {
        let mut t = Tape::new();
        let p = probs(&mut t, &[&[0.5, 0.5]]);
        let w = ClassWeights::new(vec![1.4, 0.6]).unwrap();
        let l = weighted_cross_entropy(&mut t, p, &[0], &w).unwrap();
        assert!((value(&t, l) - 1.4 * libm::log(2.0)).abs() < 1e-12);

        let p = probs(&mut t, &[&[0.1, 0.9, 0.0], &[0.3, 0.3, 0.4]]);
        let w = ClassWeights::new(vec![0.0, 1.5, 1.5]).unwrap();
        let l = weighted_cross_entropy(&mut t, p, &[0, 0], &w).unwrap();
        assert_eq!(value(&t, l), 0.0);
    }

    #[test]
    fn unit_weights_match_plain_cross_entropy_bitwise() {
        let mut t = Tape::new();
        let p = probs(&mut t, &[&[0.3, 0.7], &[0.9, 0.1], &[0.45, 0.55]]);
        let a = cross_entropy(&mut t, p, &[1, 0, 0]).unwrap();
        let b = weighted_cross_entropy(&mut t, p, &[1, 0, 0], &ClassWeights::uniform(2)).unwrap();
        assert_eq!(value(&t, a).to_bits(), value(&t, b).to_bits());
    }

    #[test]
    fn inconsistency_examples() {
        let mut t = Tape::new();
        let p1 = probs(&mut t, &[&[0.7, 0.3]]);
        let p2 = probs(&mut t, &[&[0.5, 0.5]]);
        let l = inconsistency_loss(&mut t, p1, p2).unwrap();
        assert!((value(&t, l) - 0.4).abs() < 1e-12);

        let a = probs(&mut t, &[&[1.0, 0.0]]);
        let b = probs(&mut t, &[&[0.0, 1.0]]);
        let l = inconsistency_loss(&mut t, a, b).unwrap();
        assert_eq!(value(&t, l), 2.0);
        let l = inconsistency_loss(&mut t, a, a).unwrap();
        assert_eq!(value(&t, l), 0.0);

        let c = probs(&mut t, &[&[1.0, 0.0, 0.0]]);
        assert!(matches!(inconsistency_loss(&mut t, a, c), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn inconsistency_gradient_reaches_both_networks() {
        let mut t = Tape::new();
        let p1 = probs(&mut t, &[&[0.7, 0.3]]);
        let p2 = probs(&mut t, &[&[0.5, 0.5]]);
        let l = inconsistency_loss(&mut t, p1, p2).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(p1).unwrap(), &[1.0, -1.0]);
        assert_eq!(t.grad(p2).unwrap(), &[-1.0, 1.0]);
    }

    #[test]
    fn total_loss_sums() {
        let mut t = Tape::new();
        let a = t.param(Tensor::scalar(1.0));
        let b = t.param(Tensor::scalar(0.5));
        let c = t.param(Tensor::scalar(0.4));
        let l = total_loss(&mut t, a, b, c).unwrap();
        assert!((value(&t, l) - 1.9).abs() < 1e-15);
        let z = t.constant(Tensor::scalar(0.0));
        let l = total_loss(&mut t, z, z, z).unwrap();
        assert_eq!(value(&t, l), 0.0);
    }

    #[test]
    fn uniform_pair_gives_unit_weights() {
        let pair = ClassifierPair::new(MlpClassifier::zeros(&[2, 4]).unwrap(), MlpClassifier::zeros(&[2, 4]).unwrap())
            .unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 0.0]]).unwrap();
        let w = estimate_weights(&pair, &x, 2).unwrap();
        for v in w.as_slice() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_weights_two_classes() {
        // single-layer nets with zero weights and biases chosen so that
        // softmax gives (0.8, 0.2) and (0.6, 0.4)
        let mut f1 = MlpClassifier::zeros(&[1, 2]).unwrap();
        let mut f2 = MlpClassifier::zeros(&[1, 2]).unwrap();
        f1.params_mut()[1].value = Tensor::vector(vec![libm::log(0.8), libm::log(0.2)]);
        f2.params_mut()[1].value = Tensor::vector(vec![libm::log(0.6), libm::log(0.4)]);
        let pair = ClassifierPair::new(f1, f2).unwrap();
        let w = estimate_weights(&pair, &Tensor::from_rows(&[vec![0.3]]).unwrap(), 16).unwrap();
        assert!((w.as_slice()[0] - 1.4).abs() < 1e-12);
        assert!((w.as_slice()[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn target_width_mismatch_is_rejected() {
        let pair = ClassifierPair::new(MlpClassifier::zeros(&[2, 4]).unwrap(), MlpClassifier::zeros(&[2, 4]).unwrap())
            .unwrap();
        let x = Tensor::zeros(vec![1, 3]);
        assert!(estimate_weights(&pair, &x, 4).is_err());
    }

    #[test]
    fn floor_keeps_total() {
        let w = ClassWeights::new(vec![2.0, 0.0, 1.0]).unwrap().with_floor(0.1);
        assert!((w.sum() - 3.0).abs() < 1e-12);
        assert!(w.as_slice()[1] > 0.0);
        let same = ClassWeights::new(vec![2.0, 0.0, 1.0]).unwrap().with_floor(0.0);
        assert_eq!(same.as_slice(), &[2.0, 0.0, 1.0]);
    }
}
