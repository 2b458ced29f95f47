//! Three-phase schedule: source pretraining, weight estimation on the target,
//! and weighted, inconsistency-reduced adaptation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{paired_batches, DomainDataset, PdaTask};
use crate::error::{bail, Error, Result};
use crate::eval::{evaluate, MetricsRecord, EVAL_CHUNK};
use crate::losses::{
    cross_entropy, estimate_weights, inconsistency_loss, total_loss, weighted_cross_entropy, ClassWeights,
};
use crate::nn::{init_pair, BoundMlp, ClassifierPair, MlpClassifier};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    /// Source-only pretraining epochs.
    pub n1_epochs: usize,
    /// Adaptation epochs.
    pub n3_epochs: usize,
    /// Re-estimate the weights before every `phase2_every`-th adaptation epoch.
    pub phase2_every: usize,
    /// Rows drawn from each domain per step.
    pub batch_per_domain: usize,
    pub optimizer: OptimizerConfig,
    /// Clear optimizer moments when adaptation starts.
    pub reset_optimizer: bool,
    /// Lower bound applied to the estimated weights before use.
    pub weight_floor: f64,
    /// Dropout rate on the last hidden layer during training.
    pub dropout: Option<f64>,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            n1_epochs: 10,
            n3_epochs: 20,
            phase2_every: 1,
            batch_per_domain: 128,
            optimizer: OptimizerConfig::adam(1e-3),
            reset_optimizer: true,
            weight_floor: 0.0,
            dropout: None,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.phase2_every == 0 {
            bail!(Config, "phase2_every must be at least 1");
        }
        if self.batch_per_domain == 0 {
            bail!(Config, "batch_per_domain must be positive");
        }
        if self.weight_floor.is_nan() || self.weight_floor < 0.0 || self.weight_floor.is_infinite() {
            bail!(Config, "weight_floor must be finite and nonnegative");
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                bail!(Config, "dropout rate {} outside [0, 1)", p);
            }
        }
        self.optimizer.validate()
    }
}

/// The full method and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodVariant {
    Twins,
    /// Source cross-entropy only, for all `n1 + n3` epochs.
    SourceOnly,
    /// Weighted source loss without the target inconsistency term.
    NoInconsistency,
    /// Inconsistency term with uniform source weights.
    NoWeighting,
}

impl MethodVariant {
    pub const ALL: [MethodVariant; 4] =
        [MethodVariant::Twins, MethodVariant::SourceOnly, MethodVariant::NoInconsistency, MethodVariant::NoWeighting];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodVariant::Twins => "twins",
            MethodVariant::SourceOnly => "source_only",
            MethodVariant::NoInconsistency => "no_inconsistency",
            MethodVariant::NoWeighting => "no_weighting",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }

    fn uses_weights(self) -> bool {
        matches!(self, MethodVariant::Twins | MethodVariant::NoInconsistency)
    }

    fn uses_inconsistency(self) -> bool {
        matches!(self, MethodVariant::Twins | MethodVariant::NoWeighting)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Adapt,
}

impl Phase {
    /// 1 for pretraining, 3 for adaptation.
    pub fn number(self) -> u8 {
        match self {
            Phase::Pretrain => 1,
            Phase::Adapt => 3,
        }
    }
}

/// Mean per-step losses over one epoch. `lt` is the target inconsistency; it
/// is measured even when it is not optimised, and zero during pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub ls1: f64,
    pub ls2: f64,
    pub lt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based across the whole run.
    pub epoch: usize,
    pub phase: Phase,
    pub losses: EpochLosses,
    /// Weights used for the source losses during this epoch.
    pub weights: Vec<f64>,
    pub metrics: MetricsRecord,
}

/// Where and why a run stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub aborted: Option<AbortRecord>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Metrics after the first adaptation epoch.
    pub fn first_adapt(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.phase == Phase::Adapt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub pair: ClassifierPair,
    pub log: TrainLog,
}

/// Points at which a run hands its current pair to the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    AfterPretrain,
    Final,
}

/// One optimizer per network plus the global step count that drives the
/// annealed learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PairOptimizer {
    opts: [Optimizer; 2],
    step: u64,
    total_steps: u64,
}

impl PairOptimizer {
    pub fn new(config: OptimizerConfig, total_steps: u64) -> Self {
        Self { opts: [Optimizer::new(config), Optimizer::new(config)], step: 0, total_steps: total_steps.max(1) }
    }

    pub fn reset_moments(&mut self) {
        self.opts.iter_mut().for_each(Optimizer::reset);
    }

    pub fn optimizers(&self) -> &[Optimizer; 2] {
        &self.opts
    }

    fn step(&mut self, pair: &mut ClassifierPair) -> Result<()> {
        let p = self.step as f64 / self.total_steps as f64;
        for (opt, net) in self.opts.iter_mut().zip([&mut pair.f1, &mut pair.f2]) {
            opt.set_progress(p);
            opt.step(net.params_mut())?;
        }
        self.step += 1;
        Ok(())
    }
}

fn dropout_mask(rate: Option<f64>, rows: usize, width: usize, rng: &mut Rng) -> Option<Tensor> {
    let rate = rate.filter(|&r| r > 0.0)?;
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * width).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
    Some(Tensor::new(alloc::vec![rows, width], data).expect("positive dims"))
}

fn last_hidden(net: &MlpClassifier) -> usize {
    let w = net.widths();
    w[w.len() - 2]
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if !v.is_finite() {
        bail!(Numeric, "non-finite {} = {}", name, v);
    }
    Ok(v)
}

struct StepLosses {
    ls1: f64,
    ls2: f64,
    lt: f64,
}

fn probs_on_tape(
    tape: &mut Tape,
    bound: &BoundMlp,
    net: &MlpClassifier,
    x: crate::autodiff::Var,
    rows: usize,
    dropout: Option<f64>,
    rng: &mut Rng,
) -> Result<crate::autodiff::Var> {
    let mask = dropout_mask(dropout, rows, last_hidden(net), rng);
    bound.probs(tape, x, mask)
}

/// One gradient step on both networks. `target` is `None` during pretraining.
#[allow(clippy::too_many_arguments)]
fn train_step(
    pair: &mut ClassifierPair,
    opt: &mut PairOptimizer,
    xs: Tensor,
    ys: &[usize],
    target: Option<(Tensor, bool)>,
    w: Option<&ClassWeights>,
    dropout: Option<f64>,
    rng: &mut Rng,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let b1 = pair.f1.bind(&mut tape);
    let b2 = pair.f2.bind(&mut tape);
    let rows = xs.rows();
    let xs = tape.constant(xs);
    let ps1 = probs_on_tape(&mut tape, &b1, &pair.f1, xs, rows, dropout, rng)?;
    let ps2 = probs_on_tape(&mut tape, &b2, &pair.f2, xs, rows, dropout, rng)?;
    let (ls1, ls2) = match w {
        Some(w) => (weighted_cross_entropy(&mut tape, ps1, ys, w)?, weighted_cross_entropy(&mut tape, ps2, ys, w)?),
        None => (cross_entropy(&mut tape, ps1, ys)?, cross_entropy(&mut tape, ps2, ys)?),
    };
    let (loss, lt) = match target {
        Some((xt, optimise)) => {
            let rows = xt.rows();
            let xt = tape.constant(xt);
            let pt1 = probs_on_tape(&mut tape, &b1, &pair.f1, xt, rows, dropout, rng)?;
            let pt2 = probs_on_tape(&mut tape, &b2, &pair.f2, xt, rows, dropout, rng)?;
            let lt = inconsistency_loss(&mut tape, pt1, pt2)?;
            let loss = if optimise { total_loss(&mut tape, ls1, ls2, lt)? } else { tape.add(ls1, ls2)? };
            (loss, Some(lt))
        }
        None => (tape.add(ls1, ls2)?, None),
    };
    let out = StepLosses {
        ls1: finite("ls1", tape.value(ls1).item()?)?,
        ls2: finite("ls2", tape.value(ls2).item()?)?,
        lt: match lt {
            Some(v) => finite("lt", tape.value(v).item()?)?,
            None => 0.0,
        },
    };
    tape.backward(loss)?;
    pair.f1.accumulate_grads(&tape, &b1)?;
    pair.f2.accumulate_grads(&tape, &b2)?;
    opt.step(pair)?;
    Ok(out)
}

fn mean_losses(sum: StepLosses, steps: usize) -> EpochLosses {
    let n = steps.max(1) as f64;
    EpochLosses { ls1: sum.ls1 / n, ls2: sum.ls2 / n, lt: sum.lt / n }
}

fn source_steps(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// One epoch of source-only training for both networks. Batches come from
/// the source alone; `epoch` selects the shuffle.
pub fn phase1_epoch(
    pair: &mut ClassifierPair,
    opt: &mut PairOptimizer,
    source: &DomainDataset,
    schedule: &TrainSchedule,
    epoch: u64,
) -> Result<EpochLosses> {
    let labels = source.require_labels()?;
    if schedule.batch_per_domain > source.len() {
        bail!(Config, "batch_per_domain {} exceeds source size {}", schedule.batch_per_domain, source.len());
    }
    let mut order: Vec<usize> = (0..source.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng::stream(schedule.seed, "shuffle/source", epoch));
    let mut drop_rng = rng::stream(schedule.seed, "dropout", epoch);
    let mut sum = StepLosses { ls1: 0.0, ls2: 0.0, lt: 0.0 };
    let mut steps = 0;
    for idx in order.chunks(schedule.batch_per_domain) {
        let xs = source.features().select_rows(idx)?;
        let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let s = train_step(pair, opt, xs, &ys, None, None, schedule.dropout, &mut drop_rng)?;
        sum.ls1 += s.ls1;
        sum.ls2 += s.ls2;
        steps += 1;
    }
    Ok(mean_losses(sum, steps))
}

/// Source-only pretraining for `n1_epochs` with a fresh optimizer. Returns
/// the per-epoch losses.
pub fn phase1_pretrain(
    pair: &mut ClassifierPair,
    source: &DomainDataset,
    schedule: &TrainSchedule,
) -> Result<Vec<EpochLosses>> {
    schedule.validate()?;
    let steps = (schedule.n1_epochs * source_steps(source.len(), schedule.batch_per_domain)) as u64;
    let mut opt = PairOptimizer::new(schedule.optimizer, steps);
    (0..schedule.n1_epochs).map(|e| phase1_epoch(pair, &mut opt, source, schedule, e as u64)).collect()
}

/// Class weights from both networks' predictions on every target training
/// row. Parameters are only read.
pub fn phase2_estimate(
    pair: &ClassifierPair,
    target: &DomainDataset,
    schedule: &TrainSchedule,
) -> Result<ClassWeights> {
    Ok(estimate_weights(pair, target.features(), EVAL_CHUNK)?.with_floor(schedule.weight_floor))
}

/// One adaptation epoch: weighted source losses on both networks plus the
/// target inconsistency, back-propagated through both. Which terms are
/// optimised depends on `variant`; pass uniform weights to disable weighting.
#[allow(clippy::too_many_arguments)]
pub fn phase3_epoch(
    pair: &mut ClassifierPair,
    opt: &mut PairOptimizer,
    source: &DomainDataset,
    target: &DomainDataset,
    w: &ClassWeights,
    variant: MethodVariant,
    schedule: &TrainSchedule,
    epoch: u64,
) -> Result<EpochLosses> {
    let optimise_lt = variant.uses_inconsistency();
    let mut drop_rng = rng::stream(schedule.seed, "dropout", epoch);
    let mut sum = StepLosses { ls1: 0.0, ls2: 0.0, lt: 0.0 };
    let mut steps = 0;
    for batch in paired_batches(source, target, schedule.batch_per_domain, schedule.seed, epoch)? {
        let s = train_step(
            pair,
            opt,
            batch.xs,
            &batch.ys,
            Some((batch.xt, optimise_lt)),
            Some(w),
            schedule.dropout,
            &mut drop_rng,
        )?;
        sum.ls1 += s.ls1;
        sum.ls2 += s.ls2;
        sum.lt += s.lt;
        steps += 1;
    }
    Ok(mean_losses(sum, steps))
}

fn check_task(pair: &ClassifierPair, task: &PdaTask) -> Result<()> {
    if pair.widths()[0] != task.dim() {
        bail!(Config, "model input width {} but task has {} features", pair.widths()[0], task.dim());
    }
    if pair.num_classes() != task.num_classes() {
        bail!(Config, "model has {} outputs but task has {} classes", pair.num_classes(), task.num_classes());
    }
    Ok(())
}

/// Trains `variant` on `task` from `init` (or a fresh pair drawn from the
/// schedule seed) and logs one record per epoch. With `n1_epochs = 0` a
/// supplied `init` is used as the pretrained pair.
pub fn run(
    variant: MethodVariant,
    task: &PdaTask,
    widths: &[usize],
    schedule: &TrainSchedule,
    init: Option<ClassifierPair>,
) -> Result<TrainOutcome> {
    run_with_hook(variant, task, widths, schedule, init, &mut |_, _| Ok(()))
}

/// [`run`] that also calls `hook` after pretraining and at the end, e.g. to
/// write checkpoints. A non-finite loss stops training and is reported in
/// [`TrainLog::aborted`]; the returned pair is the last finite one.
pub fn run_with_hook(
    variant: MethodVariant,
    task: &PdaTask,
    widths: &[usize],
    schedule: &TrainSchedule,
    init: Option<ClassifierPair>,
    hook: &mut dyn FnMut(Boundary, &ClassifierPair) -> Result<()>,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    let mut pair = match init {
        Some(p) if p.widths() == widths => p,
        Some(p) => bail!(Config, "initial pair widths {:?} differ from {:?}", p.widths(), widths),
        None => init_pair(widths, schedule.seed)?,
    };
    check_task(&pair, task)?;
    let source = &task.source_train;
    let target = task.target_train.unlabeled();
    let k = task.num_classes();
    let per_epoch = source_steps(source.len(), schedule.batch_per_domain);
    let total_epochs = schedule.n1_epochs + schedule.n3_epochs;
    let mut opt = PairOptimizer::new(schedule.optimizer, (total_epochs * per_epoch) as u64);
    let mut log = TrainLog::default();

    let (pretrain_epochs, adapt_epochs) = match variant {
        MethodVariant::SourceOnly => (total_epochs, 0),
        _ => (schedule.n1_epochs, schedule.n3_epochs),
    };
    let uniform = ClassWeights::uniform(k);

    for e in 0..pretrain_epochs {
        let epoch = e + 1;
        match phase1_epoch(&mut pair, &mut opt, source, schedule, e as u64) {
            Ok(losses) => log.records.push(EpochRecord {
                epoch,
                phase: Phase::Pretrain,
                losses,
                weights: uniform.as_slice().to_vec(),
                metrics: evaluate(&pair, task)?,
            }),
            Err(Error::Numeric(message)) => {
                log.aborted = Some(AbortRecord { epoch, phase: Phase::Pretrain, message });
                return Ok(TrainOutcome { pair, log });
            }
            Err(e) => return Err(e),
        }
    }
    if variant != MethodVariant::SourceOnly {
        hook(Boundary::AfterPretrain, &pair)?;
        if schedule.reset_optimizer {
            opt.reset_moments();
        }
    }

    let mut w = uniform.clone();
    let mut before = pair.clone();
    for j in 0..adapt_epochs {
        let epoch = pretrain_epochs + j + 1;
        if variant.uses_weights() && j % schedule.phase2_every == 0 {
            w = match phase2_estimate(&pair, &target, schedule) {
                Ok(w) => w,
                Err(Error::Numeric(message)) => {
                    log.aborted = Some(AbortRecord { epoch, phase: Phase::Adapt, message });
                    return Ok(TrainOutcome { pair, log });
                }
                Err(e) => return Err(e),
            };
        }
        before.clone_from(&pair);
        match phase3_epoch(&mut pair, &mut opt, source, &target, &w, variant, schedule, epoch as u64 - 1) {
            Ok(losses) => log.records.push(EpochRecord {
                epoch,
                phase: Phase::Adapt,
                losses,
                weights: w.as_slice().to_vec(),
                metrics: evaluate(&pair, task)?,
            }),
            Err(Error::Numeric(message)) => {
                log.aborted =
                    Some(AbortRecord { epoch, phase: Phase::Adapt, message: format!("{message} during adaptation") });
                return Ok(TrainOutcome { pair: before, log });
            }
            Err(e) => return Err(e),
        }
    }
    hook(Boundary::Final, &pair)?;
    Ok(TrainOutcome { pair, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, PdaTaskSpec};

    fn tiny() -> (PdaTask, TrainSchedule) {
        let spec = PdaTaskSpec { train_per_class: 20, test_per_class: 10, seed: 2, ..PdaTaskSpec::default() };
        let schedule =
            TrainSchedule { n1_epochs: 2, n3_epochs: 2, batch_per_domain: 32, seed: 5, ..TrainSchedule::default() };
        (gen_blobs(&spec).unwrap(), schedule)
    }

    #[test]
    fn run_is_bit_reproducible() {
        let (task, s) = tiny();
        let a = run(MethodVariant::Twins, &task, &[2, 8, 10], &s, None).unwrap();
        let b = run(MethodVariant::Twins, &task, &[2, 8, 10], &s, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log.records.len(), 4);
        assert_eq!(a.log.records.iter().map(|r| r.phase.number()).collect::<Vec<_>>(), [1, 1, 3, 3]);
    }

    #[test]
    fn phase2_does_not_touch_params() {
        let (task, s) = tiny();
        let pair = init_pair(&[2, 8, 10], 1).unwrap();
        let copy = pair.clone();
        let w = phase2_estimate(&pair, &task.target_train, &s).unwrap();
        assert_eq!(pair, copy);
        assert!((w.sum() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn source_only_never_adapts() {
        let (task, s) = tiny();
        let out = run(MethodVariant::SourceOnly, &task, &[2, 8, 10], &s, None).unwrap();
        assert_eq!(out.log.records.len(), 4);
        assert!(out.log.records.iter().all(|r| r.phase == Phase::Pretrain && r.losses.lt == 0.0));
    }

    #[test]
    fn pretrained_init_skips_phase_one() {
        let (task, s) = tiny();
        let mut pair = init_pair(&[2, 8, 10], 3).unwrap();
        phase1_pretrain(&mut pair, &task.source_train, &s).unwrap();
        let s0 = TrainSchedule { n1_epochs: 0, ..s };
        let mut seen = Vec::new();
        let out = run_with_hook(MethodVariant::Twins, &task, &[2, 8, 10], &s0, Some(pair.clone()), &mut |b, p| {
            seen.push((b, p.clone()));
            Ok(())
        })
        .unwrap();
        assert_eq!(out.log.records.len(), 2);
        assert_eq!(seen[0], (Boundary::AfterPretrain, pair));
        assert_eq!(seen[1].0, Boundary::Final);
    }

    #[test]
    fn adaptation_updates_both_nets() {
        let (task, s) = tiny();
        let mut pair = init_pair(&[2, 8, 10], 3).unwrap();
        let before = pair.clone();
        let mut opt = PairOptimizer::new(s.optimizer, 10);
        let w = ClassWeights::uniform(10);
        let target = task.target_train.unlabeled();
        phase3_epoch(&mut pair, &mut opt, &task.source_train, &target, &w, MethodVariant::Twins, &s, 0).unwrap();
        assert_ne!(pair.f1, before.f1);
        assert_ne!(pair.f2, before.f2);
    }

    #[test]
    fn divergent_training_is_aborted_with_a_record() {
        let (task, mut s) = tiny();
        s.optimizer = OptimizerConfig::Sgd { lr0: 1e200, alpha: 0.0, gamma: 0.0, momentum: 0.0, weight_decay: 0.0 };
        let out = run(MethodVariant::Twins, &task, &[2, 8, 10], &s, None).unwrap();
        let abort = out.log.aborted.expect("aborted");
        assert!(!abort.message.is_empty());
        assert!(out.log.records.len() < 4);
    }

    #[test]
    fn schedule_validation() {
        let s = TrainSchedule { phase2_every: 0, ..TrainSchedule::default() };
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let s = TrainSchedule { dropout: Some(1.0), ..TrainSchedule::default() };
        assert!(s.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in MethodVariant::ALL {
            assert_eq!(MethodVariant::parse(v.as_str()), Some(v));
        }
    }
}
