//! Warmup-locked stochastic optimizer selection and a paired-seed benchmark
//! harness.
//!
//! A run trains a small classifier for a fixed number of epochs. In
//! `roulette` mode the first epochs use one optimizer, after which each epoch
//! draws its update rule uniformly from a pool, with reward tracking and
//! failure-driven replacement. In `simple` mode one optimizer is used
//! throughout. Suites pair both modes seed by seed and report mean, 95% CI,
//! paired t-tests and time-to-target milestones.

pub mod config;
pub mod controller;
pub mod error;
pub mod harness;
pub mod optim;
pub mod param;
pub mod stats;
pub mod suite;
pub mod tasks;

pub use controller::{CompatibilityTable, ControllerEvent, RouletteConfig, RouletteController};
pub use error::{Error, Result};
pub use harness::{run_training, EpochRecord, Mode, RunConfig, RunOutcome, RunSummary};
pub use optim::{Hyper, LrVector, OptimizerId, OptimizerPool, OptimizerSlot};
pub use param::{GradientVector, ParameterVector, RngStream};
pub use suite::{run_paired_suite, SuiteConfig, SuiteOutputs};
