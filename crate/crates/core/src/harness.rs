//! Epoch-level training loop, per-epoch run log, and first-hit milestones.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::controller::{usage_entropy, CompatibilityTable, RouletteConfig, RouletteController};
pub use crate::controller::{CatastrophicCause, ControllerEvent};
use crate::error::{Error, Result};
use crate::optim::{Hyper, LrVector, OptimizerId, OptimizerPool};
use crate::param::{clip_global_norm, RngStream};
use crate::tasks::{epoch_batches, make_gaussian_blobs, Batch, Dataset, MlpModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Roulette,
    Simple,
}

impl Mode {
    pub const BOTH: [Mode; 2] = [Mode::Roulette, Mode::Simple];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Roulette => "roulette",
            Mode::Simple => "simple",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "roulette" => Ok(Mode::Roulette),
            "simple" => Ok(Mode::Simple),
            other => Err(Error::invalid(format!(
                "unknown mode `{other}` (expected roulette or simple)"
            ))),
        }
    }
}

/// How `cumulative_seconds` is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// Multiply-adds performed, at a nominal 1e9 per second. Reproducible.
    #[default]
    Virtual,
    /// Elapsed wall time of the training and evaluation work.
    Wall,
}

/// Synthetic blob classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    pub class_separation: f64,
    pub hidden: usize,
    pub test_fraction: f64,
    pub val_fraction: f64,
    /// Seed for data generation and splitting; shared by every run.
    pub data_seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            samples: 8000,
            features: 32,
            classes: 8,
            class_separation: 3.0,
            hidden: 64,
            test_fraction: 0.2,
            val_fraction: 0.1,
            data_seed: 42,
        }
    }
}

impl TaskConfig {
    pub fn build(&self) -> Result<Dataset> {
        make_gaussian_blobs(
            self.data_seed,
            self.samples,
            self.features,
            self.classes,
            self.class_separation,
        )?
        .with_split(self.test_fraction, self.val_fraction)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub simple_optimizer: OptimizerId,
    pub max_epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub roulette: RouletteConfig,
    pub lrs: LrVector,
    pub hypers: BTreeMap<OptimizerId, Hyper>,
    pub clip_max_norm: f64,
    pub milestone_targets: Vec<f64>,
    pub task: TaskConfig,
    pub clock: ClockMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Roulette,
            simple_optimizer: OptimizerId::Adamw,
            max_epochs: 100,
            batch_size: 128,
            seed: 2746317213,
            roulette: RouletteConfig::default(),
            lrs: LrVector::default(),
            hypers: BTreeMap::new(),
            clip_max_norm: 2.0,
            milestone_targets: vec![0.6, 0.7, 0.75, 0.8],
            task: TaskConfig::default(),
            clock: ClockMode::Virtual,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.roulette.validate()?;
        if !self.simple_optimizer.has_update_rule() {
            return Err(Error::config(
                "run.simple_optimizer",
                format!("`{}` has no update rule", self.simple_optimizer),
            ));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("run.max_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("run.batch_size", "must be at least 1"));
        }
        if !(self.clip_max_norm > 0.0 && self.clip_max_norm.is_finite()) {
            return Err(Error::config(
                "run.clip_max_norm",
                "must be positive and finite",
            ));
        }
        if let Some(t) = self
            .milestone_targets
            .iter()
            .find(|t| !(0.0..=1.0).contains(*t))
        {
            return Err(Error::config(
                "milestones.targets",
                format!("target {t} outside [0, 1]"),
            ));
        }
        Ok(())
    }
}

/// One line of `epochs.log`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub optimizer_id: OptimizerId,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub effective_lr: f64,
    pub reward: Option<f64>,
    pub strategy_entropy: f64,
    pub events: Vec<ControllerEvent>,
    pub cumulative_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilestoneResult {
    pub target: f64,
    pub reached: bool,
    pub first_epoch: Option<u32>,
    pub first_seconds: Option<f64>,
}

/// Earliest epoch whose validation accuracy reaches `target`.
pub fn first_hit(records: &[EpochRecord], target: f64) -> MilestoneResult {
    match records.iter().find(|r| r.val_acc >= target) {
        Some(r) => MilestoneResult {
            target,
            reached: true,
            first_epoch: Some(r.epoch),
            first_seconds: Some(r.cumulative_seconds),
        },
        None => MilestoneResult {
            target,
            reached: false,
            first_epoch: None,
            first_seconds: None,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Speedup {
    pub value: f64,
    /// The baseline never reached the target, so the budget stands in for it.
    pub lower_bound: bool,
}

/// Time-to-target ratio `baseline / roulette`, using the epoch budget when the
/// baseline never got there. Absent when roulette did not reach the target.
pub fn budget_capped_speedup(
    roulette_first_epoch: Option<f64>,
    baseline_first_epoch: Option<f64>,
    budget_epochs: u32,
) -> Option<Speedup> {
    let r = roulette_first_epoch.filter(|&r| r > 0.0)?;
    Some(match baseline_first_epoch {
        Some(b) => Speedup {
            value: b / r,
            lower_bound: false,
        },
        None => Speedup {
            value: f64::from(budget_epochs) / r,
            lower_bound: true,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub max_epochs: u32,
    pub epochs_completed: u32,
    pub final_train_loss: f64,
    pub final_train_acc: f64,
    pub final_val_loss: f64,
    pub final_val_acc: f64,
    pub best_val_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub duration_seconds: f64,
    pub milestones: Vec<MilestoneResult>,
    /// Diagnostic when the run stopped early on a numerical failure.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub log: Vec<EpochRecord>,
    pub summary: RunSummary,
}

enum Clock {
    Wall(Instant),
    Virtual { macs: u64 },
}

impl Clock {
    fn new(mode: ClockMode) -> Self {
        match mode {
            ClockMode::Wall => Clock::Wall(Instant::now()),
            ClockMode::Virtual => Clock::Virtual { macs: 0 },
        }
    }

    fn charge(&mut self, macs: u64) {
        if let Clock::Virtual { macs: total } = self {
            *total += macs;
        }
    }

    fn seconds(&self) -> f64 {
        match self {
            Clock::Wall(start) => start.elapsed().as_secs_f64(),
            Clock::Virtual { macs } => *macs as f64 * 1e-9,
        }
    }
}

fn is_numerical(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite { .. } | Error::NumericalFailure { .. } | Error::NonFiniteActivation
    )
}

/// Stateful epoch loop for one run.
pub struct Trainer<'a> {
    config: RunConfig,
    data: &'a Dataset,
    model: MlpModel,
    pool: OptimizerPool,
    controller: Option<RouletteController>,
    val_batch: Batch,
    clock: Clock,
    epoch: u32,
    records: Vec<EpochRecord>,
    failure: Option<String>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let model = MlpModel::init(
            data.dim(),
            config.task.hidden,
            data.classes(),
            &mut RngStream::new(config.seed, "init"),
        );
        let pool = OptimizerPool::new(config.lrs.clone(), config.hypers.clone());
        let controller = match config.mode {
            Mode::Roulette => Some(RouletteController::new(
                config.roulette.clone(),
                CompatibilityTable::default(),
                config.seed,
            )?),
            Mode::Simple => None,
        };
        let val_batch = data.gather(&data.split.val);
        let clock = Clock::new(config.clock);
        Ok(Self {
            config,
            data,
            model,
            pool,
            controller,
            val_batch,
            clock,
            epoch: 0,
            records: Vec::new(),
            failure: None,
        })
    }

    pub fn pool(&self) -> &OptimizerPool {
        &self.pool
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn controller(&self) -> Option<&RouletteController> {
        self.controller.as_ref()
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn finished(&self) -> bool {
        self.failure.is_some() || self.epoch >= self.config.max_epochs
    }

    /// Runs one epoch. `observe` sees the epoch's batch order before training.
    /// Returns `false` once the run is over.
    pub fn run_epoch(&mut self, observe: &mut dyn FnMut(u32, &[Vec<usize>])) -> Result<bool> {
        if self.finished() {
            return Ok(false);
        }
        self.epoch += 1;
        let epoch = self.epoch;

        let (optimizer, mut events) = match self.controller.as_mut() {
            Some(c) => {
                let plan = c.begin_epoch()?;
                (plan.optimizer, plan.events)
            }
            None => (self.config.simple_optimizer, Vec::new()),
        };
        let base_lr = self.pool.base_lr(optimizer);
        let lr = self
            .controller
            .as_ref()
            .map_or(base_lr, |c| c.epoch_lr(optimizer, base_lr));
        self.pool.slot_mut(optimizer)?.set_effective_lr(lr)?;

        let batches = epoch_batches(
            self.config.seed,
            epoch,
            &self.data.split.train,
            self.config.batch_size,
        );
        observe(epoch, &batches);

        let step_cost = 3 * self.model.forward_cost();
        let mut loss_sum = 0.0;
        let mut hits = 0.0;
        let mut rows = 0usize;
        let mut usage = [0u64; OptimizerId::ALL.len()];
        let mut numerical: Option<String> = None;
        for idx in &batches {
            let batch = self.data.gather(idx);
            self.clock.charge(step_cost * batch.len() as u64);
            let step = self
                .model
                .forward_backward(&batch)
                .and_then(|(loss, acc, grad)| {
                    let grad = clip_global_norm(grad, self.config.clip_max_norm)?;
                    self.pool
                        .slot_mut(optimizer)?
                        .apply_update(&mut self.model.params, &grad)?;
                    Ok((loss, acc))
                });
            match step {
                Ok((loss, acc)) => {
                    loss_sum += loss * batch.len() as f64;
                    hits += acc * batch.len() as f64;
                    rows += batch.len();
                    usage[optimizer as usize] += 1;
                }
                Err(e) if is_numerical(&e) => {
                    numerical = Some(format!("epoch {epoch}: {e}"));
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        self.clock
            .charge(self.model.forward_cost() * self.val_batch.len() as u64);
        let val = match self.model.evaluate(&self.val_batch) {
            Ok(v) => v,
            Err(e) if is_numerical(&e) => {
                self.failure = Some(format!("epoch {epoch}: validation: {e}"));
                return Ok(false);
            }
            Err(e) => return Err(e),
        };

        let mut reward = None;
        match (self.controller.as_mut(), numerical.as_ref()) {
            (None, Some(msg)) => {
                self.failure = Some(msg.clone());
            }
            (Some(c), _) => match c.end_epoch(val.accuracy, numerical.is_some(), &mut self.pool) {
                Ok(fb) => {
                    reward = fb.reward;
                    events.extend(fb.events);
                }
                Err(e) if is_numerical(&e) => {
                    self.failure = numerical.clone().or_else(|| Some(e.to_string()));
                }
                Err(e) => return Err(e),
            },
            (None, None) => {}
        }

        let cumulative_seconds = self.clock.seconds();
        let (train_loss, train_acc) = if rows > 0 {
            (loss_sum / rows as f64, hits / rows as f64)
        } else {
            (f64::NAN, f64::NAN)
        };
        self.records.push(EpochRecord {
            epoch,
            optimizer_id: optimizer,
            train_loss,
            train_acc,
            val_loss: val.loss,
            val_acc: val.accuracy,
            effective_lr: lr,
            reward,
            strategy_entropy: usage_entropy(&usage),
            events,
            cumulative_seconds,
        });
        Ok(!self.finished())
    }

    pub fn finish(mut self) -> Result<RunOutcome> {
        let test_batch = self.data.gather(&self.data.split.test);
        let (test_loss, test_acc) = if test_batch.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            match self.model.evaluate(&test_batch) {
                Ok(t) => (t.loss, t.accuracy),
                Err(e) if is_numerical(&e) => {
                    self.failure
                        .get_or_insert_with(|| format!("test evaluation: {e}"));
                    (f64::NAN, f64::NAN)
                }
                Err(e) => return Err(e),
            }
        };
        let last = self.records.last();
        let summary = RunSummary {
            mode: self.config.mode,
            seed: self.config.seed,
            max_epochs: self.config.max_epochs,
            epochs_completed: self.records.len() as u32,
            final_train_loss: last.map_or(f64::NAN, |r| r.train_loss),
            final_train_acc: last.map_or(f64::NAN, |r| r.train_acc),
            final_val_loss: last.map_or(f64::NAN, |r| r.val_loss),
            final_val_acc: last.map_or(f64::NAN, |r| r.val_acc),
            best_val_acc: self
                .records
                .iter()
                .map(|r| r.val_acc)
                .fold(f64::NAN, f64::max),
            test_loss,
            test_acc,
            duration_seconds: last.map_or(0.0, |r| r.cumulative_seconds),
            milestones: self
                .config
                .milestone_targets
                .iter()
                .map(|&t| first_hit(&self.records, t))
                .collect(),
            failure: self.failure,
        };
        Ok(RunOutcome {
            log: self.records,
            summary,
        })
    }
}

/// Trains one run to completion on a prepared dataset.
pub fn run_training_on(
    config: &RunConfig,
    data: &Dataset,
    observe: &mut dyn FnMut(u32, &[Vec<usize>]),
) -> Result<RunOutcome> {
    let mut trainer = Trainer::new(config.clone(), data)?;
    while trainer.run_epoch(observe)? {}
    trainer.finish()
}

/// Builds the configured task and trains one run.
pub fn run_training(config: &RunConfig) -> Result<RunOutcome> {
    let data = config.task.build()?;
    run_training_on(config, &data, &mut |_, _| {})
}

pub const EPOCH_LOG: &str = "epochs.log";
pub const SUMMARY_FILE: &str = "summary.json";

/// Writes `epochs.log` (one JSON object per line) and `summary.json`.
pub fn write_run(dir: &Path, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join(EPOCH_LOG);
    let mut buf = Vec::new();
    for rec in &outcome.log {
        serde_json::to_writer(&mut buf, rec).map_err(|e| Error::Parse {
            path: log_path.clone(),
            reason: e.to_string(),
        })?;
        buf.push(b'\n');
    }
    fs::File::create(&log_path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(&log_path, e))?;

    let summary_path = dir.join(SUMMARY_FILE);
    let mut json = serde_json::to_vec_pretty(&outcome.summary).map_err(|e| Error::Parse {
        path: summary_path.clone(),
        reason: e.to_string(),
    })?;
    json.push(b'\n');
    fs::write(&summary_path, json).map_err(|e| Error::io(&summary_path, e))
}

pub fn read_run(dir: &Path) -> Result<RunOutcome> {
    let log_path = dir.join(EPOCH_LOG);
    let text = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let log = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: log_path.clone(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect::<Result<Vec<EpochRecord>>>()?;
    let summary_path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let summary = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: summary_path.clone(),
        reason: e.to_string(),
    })?;
    Ok(RunOutcome { log, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: u32, val_acc: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            optimizer_id: OptimizerId::Adamw,
            train_loss: 0.0,
            train_acc: 0.0,
            val_loss: 0.0,
            val_acc,
            effective_lr: 1e-3,
            reward: None,
            strategy_entropy: 0.0,
            events: vec![],
            cumulative_seconds: f64::from(epoch) * 1.5,
        }
    }

    fn trace(values: &[f64]) -> Vec<EpochRecord> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| record(i as u32 + 1, v))
            .collect()
    }

    #[test]
    fn first_hit_examples() {
        let recs = trace(&[0.2, 0.5, 0.66, 0.7]);
        let hit = first_hit(&recs, 0.65);
        assert_eq!(hit.first_epoch, Some(3));
        assert_eq!(hit.first_seconds, Some(4.5));
        let miss = first_hit(&recs, 0.9);
        assert!(!miss.reached && miss.first_epoch.is_none() && miss.first_seconds.is_none());
        assert_eq!(first_hit(&recs, 0.0).first_epoch, Some(1));
    }

    #[test]
    fn speedup_examples() {
        let s = budget_capped_speedup(Some(18.8), None, 100).unwrap();
        assert!((s.value - 5.319_148_936).abs() < 1e-6 && s.lower_bound);
        let s = budget_capped_speedup(Some(25.7), Some(77.0), 100).unwrap();
        assert!((s.value - 2.996_108_949).abs() < 1e-6 && !s.lower_bound);
        assert_eq!(
            budget_capped_speedup(Some(20.0), Some(20.0), 100)
                .unwrap()
                .value,
            1.0
        );
        assert!(budget_capped_speedup(None, Some(20.0), 100).is_none());
    }

    fn small_config(mode: Mode) -> RunConfig {
        RunConfig {
            mode,
            max_epochs: 8,
            batch_size: 64,
            seed: 11,
            task: TaskConfig {
                samples: 600,
                features: 6,
                classes: 3,
                hidden: 8,
                ..TaskConfig::default()
            },
            roulette: RouletteConfig {
                warmup_epochs: 3,
                ..RouletteConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn simple_mode_uses_one_optimizer() {
        let out = run_training(&small_config(Mode::Simple)).unwrap();
        assert_eq!(out.log.len(), 8);
        assert!(out
            .log
            .iter()
            .all(|r| r.optimizer_id == OptimizerId::Adamw && r.reward.is_none()));
        assert!(out.log.iter().all(|r| r.events.is_empty()));
    }

    #[test]
    fn roulette_mode_locks_then_switches() {
        let out = run_training(&small_config(Mode::Roulette)).unwrap();
        for r in &out.log {
            if r.epoch <= 3 {
                assert_eq!(r.optimizer_id, OptimizerId::Sgd);
                assert!(r.reward.is_none());
            } else {
                assert_ne!(r.optimizer_id, OptimizerId::Sgd);
                assert!(r.reward.unwrap().abs() <= 1.0);
            }
            assert_eq!(r.strategy_entropy, 0.0);
        }
        for w in out.log.windows(2) {
            assert!(w[1].cumulative_seconds >= w[0].cumulative_seconds);
        }
        // first roulette epoch takes over from sgd: high -> low family scaling
        let first = &out.log[3];
        assert_eq!(
            first.effective_lr,
            LrVector::default().get(first.optimizer_id) * 0.01
        );
    }

    #[test]
    fn runs_are_reproducible() {
        let a = run_training(&small_config(Mode::Roulette)).unwrap();
        let b = run_training(&small_config(Mode::Roulette)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unselected_slots_are_frozen() {
        let config = small_config(Mode::Roulette);
        let data = config.task.build().unwrap();
        let mut trainer = Trainer::new(config, &data).unwrap();
        let mut noop = |_: u32, _: &[Vec<usize>]| {};
        while trainer.records().len() < 5 {
            trainer.run_epoch(&mut noop).unwrap();
        }
        let before = trainer.pool().clone();
        trainer.run_epoch(&mut noop).unwrap();
        let used = trainer.records().last().unwrap().optimizer_id;
        for slot in before.slots() {
            if slot.id() != used {
                assert_eq!(Some(slot), trainer.pool().get(slot.id()));
            }
        }
    }

    #[test]
    fn run_files_round_trip() {
        let out = run_training(&small_config(Mode::Roulette)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &out).unwrap();
        let back = read_run(dir.path()).unwrap();
        assert_eq!(back, out);
        let first_line = fs::read_to_string(dir.path().join(EPOCH_LOG)).unwrap();
        let first_line = first_line.lines().next().unwrap();
        for key in [
            "epoch",
            "optimizer_id",
            "train_loss",
            "train_acc",
            "val_loss",
            "val_acc",
            "effective_lr",
            "reward",
            "strategy_entropy",
            "events",
            "cumulative_seconds",
        ] {
            assert!(first_line.contains(&format!("\"{key}\":")), "{key}");
        }
    }

    #[test]
    fn simple_mode_stops_on_numerical_failure() {
        let mut config = small_config(Mode::Simple);
        config.simple_optimizer = OptimizerId::Sgd;
        config.lrs.set(OptimizerId::Sgd, 1e300).unwrap();
        let out = run_training(&config).unwrap();
        assert!(out.summary.failure.is_some());
        assert!(out.log.len() < 8);
    }

    #[test]
    fn milestones_are_monotone() {
        let mut config = small_config(Mode::Simple);
        config.milestone_targets = vec![0.3, 0.5, 0.7, 0.9];
        let out = run_training(&config).unwrap();
        let epochs: Vec<u32> = out
            .summary
            .milestones
            .iter()
            .filter_map(|m| m.first_epoch)
            .collect();
        assert!(epochs.windows(2).all(|w| w[0] <= w[1]));
    }
}
