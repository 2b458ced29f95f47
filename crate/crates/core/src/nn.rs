//! Feed-forward classifiers and the parameter-disjoint classifier pair.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{bail, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Rows evaluated per chunk on tape-free inference paths.
const EVAL_CHUNK: usize = 1024;

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self { name: name.into(), value, grad: None }
    }
}

/// `d → h1 → … → K` multilayer perceptron with ReLU between affine layers.
///
/// Weights are stored `in×out` so a batch `x (n×in)` maps to `x·W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpClassifier {
    widths: Vec<usize>,
    params: Vec<Param>,
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        bail!(Config, "model widths need at least input and output, got {:?}", widths);
    }
    if widths.contains(&0) {
        bail!(Config, "model widths must be positive, got {:?}", widths);
    }
    Ok(())
}

impl MlpClassifier {
    /// He-uniform weights `U(-√(6/fan_in), √(6/fan_in))`, zero biases.
    pub fn he_uniform(widths: &[usize], rng: &mut Rng) -> Result<Self> {
        check_widths(widths)?;
        let mut params = Vec::with_capacity(2 * (widths.len() - 1));
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = libm::sqrt(6.0 / fan_in as f64);
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            params.push(Param::new(format!("layer{l}.weight"), Tensor::new(vec![fan_in, fan_out], w)?));
            params.push(Param::new(format!("layer{l}.bias"), Tensor::zeros(vec![fan_out])));
        }
        Ok(Self { widths: widths.to_vec(), params })
    }

    /// All-zero parameters; every input maps to uniform probabilities.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        let mut params = Vec::new();
        for (l, pair) in widths.windows(2).enumerate() {
            params.push(Param::new(format!("layer{l}.weight"), Tensor::zeros(vec![pair[0], pair[1]])));
            params.push(Param::new(format!("layer{l}.bias"), Tensor::zeros(vec![pair[1]])));
        }
        Ok(Self { widths: widths.to_vec(), params })
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_params(widths: &[usize], params: Vec<Param>) -> Result<Self> {
        let expected = Self::zeros(widths)?;
        if params.len() != expected.params.len() {
            bail!(Dimension, "expected {} parameter tensors, got {}", expected.params.len(), params.len());
        }
        for (p, e) in params.iter().zip(&expected.params) {
            if p.name != e.name {
                bail!(Dimension, "parameter {} found where {} was expected", p.name, e.name);
            }
            if p.value.shape() != e.value.shape() {
                bail!(Dimension, "{}: shape {:?}, expected {:?}", e.name, p.value.shape(), e.value.shape());
            }
        }
        Ok(Self { widths: widths.to_vec(), params })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        match x.shape() {
            [_, d] if *d == self.input_dim() => Ok(()),
            s => bail!(Dimension, "model expects n×{} input, got {:?}", self.input_dim(), s),
        }
    }

    /// Activations after `layers` affine layers (ReLU applied unless it is
    /// the output layer).
    fn forward_to(&self, x: &Tensor, layers: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let mut out = Vec::with_capacity(x.rows() * self.widths[layers]);
        let mut start = 0;
        while start < x.rows() {
            let end = (start + EVAL_CHUNK).min(x.rows());
            let mut h = x.slice_rows(start, end)?;
            for l in 0..layers {
                h = h.matmul(&self.params[2 * l].value)?.add_row(&self.params[2 * l + 1].value)?;
                if l + 1 < self.depth() {
                    h = h.relu();
                }
            }
            out.extend_from_slice(h.data());
            start = end;
        }
        Tensor::new(vec![x.rows(), self.widths[layers]], out)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_to(x, self.depth())
    }

    /// Softmax class probabilities, one row per input row.
    pub fn forward_probs(&self, x: &Tensor) -> Result<Tensor> {
        self.logits(x)?.softmax_rows()
    }

    /// Post-ReLU activations of hidden layer `layer_index` (1-based; the
    /// penultimate layer is `depth() - 1`).
    pub fn hidden(&self, x: &Tensor, layer_index: usize) -> Result<Tensor> {
        if layer_index == 0 || layer_index >= self.depth() {
            bail!(Config, "hidden layer index {} outside 1..={}", layer_index, self.depth().saturating_sub(1));
        }
        self.forward_to(x, layer_index)
    }

    /// Puts every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp { vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect() }
    }

    /// Adds the tape gradients of a bound copy into `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundMlp) -> Result<()> {
        if bound.vars.len() != self.params.len() {
            bail!(Contract, "bound model has {} vars for {} params", bound.vars.len(), self.params.len());
        }
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            let Some(g) = tape.grad(v) else { continue };
            match &mut p.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => p.grad = Some(Tensor::new(p.value.shape().to_vec(), g.to_vec())?),
            }
        }
        Ok(())
    }
}

/// Parameters of a model placed on a tape for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    vars: Vec<Var>,
}

impl BoundMlp {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Logits on the tape. `dropout_mask`, when given, multiplies the last
    /// hidden activations (already scaled by `1/(1-rate)`).
    pub fn logits(&self, tape: &mut Tape, x: Var, dropout_mask: Option<Tensor>) -> Result<Var> {
        let depth = self.vars.len() / 2;
        let mut h = x;
        for l in 0..depth {
            if l + 1 == depth {
                if let Some(mask) = dropout_mask.clone() {
                    let m = tape.constant(mask);
                    h = tape.mul(h, m)?;
                }
            }
            h = tape.matmul(h, self.vars[2 * l])?;
            h = tape.add_row(h, self.vars[2 * l + 1])?;
            if l + 1 < depth {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn probs(&self, tape: &mut Tape, x: Var, dropout_mask: Option<Tensor>) -> Result<Var> {
        let logits = self.logits(tape, x, dropout_mask)?;
        tape.softmax_rows(logits)
    }
}

/// Two classifiers of identical architecture with separate parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierPair {
    pub f1: MlpClassifier,
    pub f2: MlpClassifier,
}

impl ClassifierPair {
    pub fn new(f1: MlpClassifier, f2: MlpClassifier) -> Result<Self> {
        if f1.widths() != f2.widths() {
            bail!(Config, "pair architectures differ: {:?} vs {:?}", f1.widths(), f2.widths());
        }
        Ok(Self { f1, f2 })
    }

    pub fn widths(&self) -> &[usize] {
        self.f1.widths()
    }

    pub fn num_classes(&self) -> usize {
        self.f1.num_classes()
    }

    pub fn nets(&self) -> [&MlpClassifier; 2] {
        [&self.f1, &self.f2]
    }

    /// Averaged probabilities `(p1 + p2) / 2`.
    pub fn fused_probs(&self, x: &Tensor) -> Result<Tensor> {
        let p1 = self.f1.forward_probs(x)?;
        let p2 = self.f2.forward_probs(x)?;
        Ok(p1.add(&p2)?.scale(0.5))
    }
}

/// He-uniform pair; each network draws from its own sub-stream of `seed`.
pub fn init_pair(widths: &[usize], seed: u64) -> Result<ClassifierPair> {
    let f1 = MlpClassifier::he_uniform(widths, &mut rng::stream(seed, "init", 1))?;
    let f2 = MlpClassifier::he_uniform(widths, &mut rng::stream(seed, "init", 2))?;
    ClassifierPair::new(f1, f2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_is_uniform() {
        let m = MlpClassifier::zeros(&[3, 4, 5]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 9.0]]).unwrap();
        let p = m.forward_probs(&x).unwrap();
        assert_eq!(p.shape(), &[2, 5]);
        for v in p.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn single_layer_identity_gives_softmax_of_input() {
        let mut m = MlpClassifier::zeros(&[3, 3]).unwrap();
        m.params_mut()[0].value =
            Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        let p = m.forward_probs(&x).unwrap();
        let e = libm::exp(1.0);
        let expect = [1.0 / (2.0 + e), e / (2.0 + e), 1.0 / (2.0 + e)];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let m = MlpClassifier::zeros(&[3, 2]).unwrap();
        let x = Tensor::zeros(vec![4, 2]);
        assert!(matches!(m.forward_probs(&x), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn init_pair_contracts() {
        let a = init_pair(&[2, 16, 5], 11).unwrap();
        let b = init_pair(&[2, 16, 5], 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.f1.params()[0].value, a.f2.params()[0].value);
        assert!(a.f1.params()[1].value.data().iter().all(|&v| v == 0.0));
        let x = Tensor::zeros(vec![7, 2]);
        assert_eq!(a.f1.forward_probs(&x).unwrap().shape(), &[7, 5]);
        let bound = libm::sqrt(6.0 / 2.0);
        assert!(a.f1.params()[0].value.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn init_pair_rejects_bad_widths() {
        assert!(matches!(init_pair(&[2, 0, 5], 1), Err(crate::Error::Config(_))));
        assert!(matches!(init_pair(&[2], 1), Err(crate::Error::Config(_))));
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let pair = init_pair(&[3, 6, 4], 5).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, -0.4, 2.0], vec![1.5, 0.3, -0.7]]).unwrap();
        let mut tape = Tape::new();
        let b = pair.f1.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let p = b.probs(&mut tape, xv, None).unwrap();
        assert_eq!(tape.value(p), &pair.f1.forward_probs(&x).unwrap());
    }

    #[test]
    fn hidden_layer_bounds() {
        let pair = init_pair(&[2, 8, 8, 3], 1).unwrap();
        let x = Tensor::zeros(vec![4, 2]);
        assert_eq!(pair.f1.hidden(&x, 2).unwrap().shape(), &[4, 8]);
        assert!(pair.f1.hidden(&x, 0).is_err());
        assert!(pair.f1.hidden(&x, 3).is_err());
    }
}
