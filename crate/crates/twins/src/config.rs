//! Experiment configuration, read from and written to TOML.
//!
//! Every error names the dotted path of the offending field, e.g.
//! `schedule.phase2_every`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use twins_core::data::PdaTaskSpec;
use twins_core::optim::OptimizerConfig;
use twins_core::trainer::{MethodVariant, TrainSchedule};

use crate::error::{Error, Result};

/// One IDX image file and its label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxFiles {
    pub images: PathBuf,
    pub labels: PathBuf,
}

/// A task read from IDX files. The target keeps classes `0..target_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxTaskConfig {
    pub source_train: IdxFiles,
    pub source_test: IdxFiles,
    pub target_train: IdxFiles,
    pub target_test: IdxFiles,
    #[serde(default = "default_idx_classes")]
    pub num_classes: usize,
    pub target_classes: usize,
}

fn default_idx_classes() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    Blobs(PdaTaskSpec),
    Idx(IdxTaskConfig),
}

impl TaskConfig {
    pub fn num_classes(&self) -> usize {
        match self {
            TaskConfig::Blobs(s) => s.num_classes,
            TaskConfig::Idx(c) => c.num_classes,
        }
    }

    pub fn target_classes(&self) -> usize {
        match self {
            TaskConfig::Blobs(s) => s.target_classes,
            TaskConfig::Idx(c) => c.target_classes,
        }
    }
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Blobs(PdaTaskSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output widths come from the task.
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Target class counts visited by the sweep.
    pub class_counts: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { class_counts: vec![3, 5, 7, 10] }
    }
}

/// Seeds replace both `task.seed` and `schedule.seed`: every run draws its
/// data, initialisation and shuffles from named streams of one root seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub variants: Vec<MethodVariant>,
    pub seeds: Vec<u64>,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            variants: vec![MethodVariant::Twins],
            seeds: vec![0, 1, 2, 3, 4],
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            schedule: TrainSchedule::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn check(ok: bool, field: &str, message: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, message))
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml_str(&text)?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    /// Every IDX file named by the task must exist.
    pub fn check_paths(&self) -> Result<()> {
        if let TaskConfig::Idx(c) = &self.task {
            for (name, files) in [
                ("source_train", &c.source_train),
                ("source_test", &c.source_test),
                ("target_train", &c.target_train),
                ("target_test", &c.target_test),
            ] {
                for (kind, path) in [("images", &files.images), ("labels", &files.labels)] {
                    check(path.is_file(), &format!("task.{name}.{kind}"), format!("no such file: {}", path.display()))?;
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        check(!self.variants.is_empty(), "variants", "at least one variant is required")?;
        check(!self.seeds.is_empty(), "seeds", "at least one seed is required")?;
        check(!self.output_dir.as_os_str().is_empty(), "output_dir", "must not be empty")?;
        let k = self.task.num_classes();
        match &self.task {
            TaskConfig::Blobs(s) => {
                check(s.num_classes >= 2, "task.num_classes", "need at least two classes")?;
                check((1..=k).contains(&s.target_classes), "task.target_classes", format!("must lie in 1..={k}"))?;
                check(s.dim >= 2, "task.dim", "need at least two dimensions")?;
                check(s.train_per_class >= 2, "task.train_per_class", "need at least two rows per class")?;
                check(s.test_per_class >= 2, "task.test_per_class", "need at least two rows per class")?;
                check(positive(s.radius), "task.radius", "must be positive")?;
                check(s.class_std >= 0.0 && s.class_std.is_finite(), "task.class_std", "must be nonnegative")?;
                check(s.shift.noise >= 0.0 && s.shift.noise.is_finite(), "task.shift.noise", "must be nonnegative")?;
                check(s.shift.rotation_deg.is_finite(), "task.shift.rotation_deg", "must be finite")?;
                check(
                    s.shift.translation.is_empty() || s.shift.translation.len() == s.dim,
                    "task.shift.translation",
                    format!("needs 0 or {} entries", s.dim),
                )?;
            }
            TaskConfig::Idx(c) => {
                check((2..=256).contains(&c.num_classes), "task.num_classes", "must lie in 2..=256")?;
                check((1..=k).contains(&c.target_classes), "task.target_classes", format!("must lie in 1..={k}"))?;
            }
        }
        for (i, &h) in self.model.hidden.iter().enumerate() {
            check(h > 0, &format!("model.hidden[{i}]"), "widths must be positive")?;
        }
        for (i, &n) in self.sweep.class_counts.iter().enumerate() {
            check((1..=k).contains(&n), &format!("sweep.class_counts[{i}]"), format!("must lie in 1..={k}"))?;
        }
        let s = &self.schedule;
        check(s.phase2_every >= 1, "schedule.phase2_every", "must be at least 1")?;
        check(s.batch_per_domain >= 1, "schedule.batch_per_domain", "must be at least 1")?;
        check(s.weight_floor >= 0.0 && s.weight_floor.is_finite(), "schedule.weight_floor", "must be nonnegative")?;
        if let Some(p) = s.dropout {
            check((0.0..1.0).contains(&p), "schedule.dropout", "must lie in [0, 1)")?;
        }
        match s.optimizer {
            OptimizerConfig::Adam { lr, beta1, beta2, eps, weight_decay } => {
                check(positive(lr), "schedule.optimizer.lr", "must be positive")?;
                check((0.0..1.0).contains(&beta1), "schedule.optimizer.beta1", "must lie in [0, 1)")?;
                check((0.0..1.0).contains(&beta2), "schedule.optimizer.beta2", "must lie in [0, 1)")?;
                check(positive(eps), "schedule.optimizer.eps", "must be positive")?;
                check(weight_decay >= 0.0, "schedule.optimizer.weight_decay", "must be nonnegative")?;
            }
            OptimizerConfig::Sgd { lr0, alpha, gamma, momentum, weight_decay } => {
                check(positive(lr0), "schedule.optimizer.lr0", "must be positive")?;
                check(alpha >= 0.0, "schedule.optimizer.alpha", "must be nonnegative")?;
                check(gamma >= 0.0, "schedule.optimizer.gamma", "must be nonnegative")?;
                check((0.0..1.0).contains(&momentum), "schedule.optimizer.momentum", "must lie in [0, 1)")?;
                check(weight_decay >= 0.0, "schedule.optimizer.weight_decay", "must be nonnegative")?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(text: &str) -> String {
        match ExperimentConfig::from_toml_str(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn idx_task_round_trips() {
        let files = |p: &str| IdxFiles { images: format!("{p}-images").into(), labels: format!("{p}-labels").into() };
        let cfg = ExperimentConfig {
            task: TaskConfig::Idx(IdxTaskConfig {
                source_train: files("a"),
                source_test: files("b"),
                target_train: files("c"),
                target_test: files("d"),
                num_classes: 10,
                target_classes: 5,
            }),
            schedule: TrainSchedule {
                dropout: Some(0.5),
                optimizer: OptimizerConfig::annealed_sgd(),
                ..TrainSchedule::default()
            },
            ..ExperimentConfig::default()
        };
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        let dir = std::env::temp_dir().join(format!("twins-config-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("exp.toml");
        fs::write(&path, &text).unwrap();
        match ExperimentConfig::load(&path) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "task.source_train.images"),
            other => panic!("expected a missing-file error, got {other:?}"),
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of("[schedule]\nphase2_every = 0\n"), "schedule.phase2_every");
        assert_eq!(field_of("[schedule]\nbatch_per_domain = \"many\"\n"), "schedule.batch_per_domain");
        assert_eq!(field_of("[task]\nkind = \"blobs\"\ntarget_classes = 11\n"), "task.target_classes");
        assert_eq!(field_of("[sweep]\nclass_counts = [3, 50]\n"), "sweep.class_counts[1]");
        assert_eq!(field_of("[model]\nhidden = [64, 0]\n"), "model.hidden[1]");
        assert_eq!(field_of("variants = [\"nope\"]\n"), "variants[0]");
        assert_eq!(field_of("seeds = []\n"), "seeds");
        assert!(field_of("[schedule]\nbogus = 1\n").starts_with("schedule"));
        assert_eq!(field_of("[schedule.optimizer]\nkind = \"adam\"\nlr = -1.0\nbeta1 = 0.9\nbeta2 = 0.999\neps = 1e-8\nweight_decay = 0.0\n"), "schedule.optimizer.lr");
    }
}
