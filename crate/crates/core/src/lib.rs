//! Two weighted, inconsistency-reduced classifiers for partial domain adaptation.
//!
//! The crate is `no_std` and only needs `alloc`. It carries everything that is
//! pure computation: a small define-by-run reverse-mode autodiff engine, the
//! MLP classifier pair and its optimizers, the weighted / inconsistency losses,
//! synthetic partial-shift tasks, the three-phase training schedule and the
//! evaluation metrics. File formats, IDX ingestion and the CLI live in the
//! `twins` crate.
//!
//! ```
//! use twins_core::data::{gen_blobs, PdaTaskSpec};
//! use twins_core::trainer::{run, MethodVariant, TrainSchedule};
//!
//! let mut spec = PdaTaskSpec::default();
//! spec.train_per_class = 20;
//! spec.test_per_class = 10;
//! let task = gen_blobs(&spec).unwrap();
//! let mut schedule = TrainSchedule::default();
//! schedule.n1_epochs = 1;
//! schedule.n3_epochs = 1;
//! schedule.batch_per_domain = 32;
//! let out = run(MethodVariant::Twins, &task, &[2, 16, 10], &schedule, None).unwrap();
//! assert_eq!(out.log.records.len(), 2);
//! ```
#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
