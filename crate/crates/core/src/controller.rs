//! Warmup-locked, then uniformly random, per-epoch optimizer selection.
//!
//! The controller owns the selection state only. Optimizer slots live in an
//! [`OptimizerPool`] that the controller touches when it swaps a failing
//! optimizer out (momentum transfer and transition learning rate).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{OptimizerId, OptimizerPool};
use crate::param::{uniform_choice, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Roulette,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SwitchGranularity {
    #[default]
    Epoch,
}

impl<'de> Deserialize<'de> for SwitchGranularity {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        match s.as_str() {
            "epoch" => Ok(SwitchGranularity::Epoch),
            other => Err(serde::de::Error::custom(format!(
                "switch_granularity `{other}`: only epoch supported"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouletteConfig {
    pub warmup_epochs: u32,
    pub warmup_optimizer: OptimizerId,
    pub dropafter_warmup: bool,
    pub switch_granularity: SwitchGranularity,
    /// Selection happens every this many roulette epochs.
    pub switch_every_steps: u32,
    pub switch_probability: f64,
    pub avoid_repeat: bool,
    pub failure_threshold: f64,
    pub consecutive_failure_limit: u32,
    pub catastrophic_drop: f64,
    pub grace_period_epochs: u32,
    pub momentum_transfer_scale: f64,
    pub plateau_mode: bool,
    pub plateau_window: u32,
    pub plateau_slope_threshold: f64,
    pub pool: Vec<OptimizerId>,
    pub backup_candidates: Vec<OptimizerId>,
}

impl Default for RouletteConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 17,
            warmup_optimizer: OptimizerId::Sgd,
            dropafter_warmup: true,
            switch_granularity: SwitchGranularity::Epoch,
            switch_every_steps: 1,
            switch_probability: 1.0,
            avoid_repeat: true,
            failure_threshold: -0.15,
            consecutive_failure_limit: 3,
            catastrophic_drop: 0.3,
            grace_period_epochs: 5,
            momentum_transfer_scale: 0.5,
            plateau_mode: false,
            plateau_window: 5,
            plateau_slope_threshold: 1e-3,
            pool: OptimizerId::DEFAULT_POOL.to_vec(),
            backup_candidates: vec![OptimizerId::Nadam, OptimizerId::Adamw, OptimizerId::Adam],
        }
    }
}

impl RouletteConfig {
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("roulette.{k}");
        if self.pool.is_empty() {
            return Err(Error::config(
                key("pool"),
                "must list at least one optimizer",
            ));
        }
        for (i, id) in self.pool.iter().enumerate() {
            if self.pool[..i].contains(id) {
                return Err(Error::config(
                    key("pool"),
                    format!("duplicate optimizer `{id}`"),
                ));
            }
            if !id.has_update_rule() {
                return Err(Error::config(
                    key("pool"),
                    format!("`{id}` has no update rule"),
                ));
            }
        }
        if let Some(id) = self
            .backup_candidates
            .iter()
            .find(|id| !id.has_update_rule())
        {
            return Err(Error::config(
                key("backup_candidates"),
                format!("`{id}` has no update rule"),
            ));
        }
        if !self.pool.contains(&self.warmup_optimizer) {
            return Err(Error::config(
                key("warmup_optimizer"),
                format!("`{}` is not in the pool", self.warmup_optimizer),
            ));
        }
        if !(0.0..=1.0).contains(&self.switch_probability) {
            return Err(Error::config(
                key("switch_probability"),
                "must lie in [0, 1]",
            ));
        }
        if self.switch_every_steps == 0 {
            return Err(Error::config(
                key("switch_every_steps"),
                "must be at least 1",
            ));
        }
        if self.consecutive_failure_limit == 0 {
            return Err(Error::config(
                key("consecutive_failure_limit"),
                "must be at least 1",
            ));
        }
        if !self.failure_threshold.is_finite() {
            return Err(Error::config(key("failure_threshold"), "must be finite"));
        }
        if !(self.catastrophic_drop >= 0.0) {
            return Err(Error::config(
                key("catastrophic_drop"),
                "must be non-negative",
            ));
        }
        if !self.momentum_transfer_scale.is_finite() {
            return Err(Error::config(
                key("momentum_transfer_scale"),
                "must be finite",
            ));
        }
        if self.plateau_window < 2 {
            return Err(Error::config(key("plateau_window"), "must be at least 2"));
        }
        if !self.plateau_slope_threshold.is_finite() {
            return Err(Error::config(
                key("plateau_slope_threshold"),
                "must be finite",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrFamily {
    HighLr,
    LowLr,
}

/// Learning-rate rules for switching between optimizer families.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityTable {
    pub family: BTreeMap<OptimizerId, LrFamily>,
    pub from_high_to_low: f64,
    pub from_low_to_high: f64,
    pub lr_caps: BTreeMap<OptimizerId, f64>,
    pub lr_overrides: BTreeMap<OptimizerId, f64>,
}

impl Default for CompatibilityTable {
    fn default() -> Self {
        use OptimizerId::*;
        let family = OptimizerId::ALL
            .into_iter()
            .map(|id| {
                let fam = match id {
                    Sgd | Adahessian => LrFamily::HighLr,
                    _ => LrFamily::LowLr,
                };
                (id, fam)
            })
            .collect();
        Self {
            family,
            from_high_to_low: 0.01,
            from_low_to_high: 10.0,
            lr_caps: BTreeMap::from([(Lion, 3e-4)]),
            lr_overrides: BTreeMap::from([(Adahessian, 0.15)]),
        }
    }
}

/// Learning rate for `to` when it takes over from `from`.
pub fn scaled_lr_on_transition(
    from: OptimizerId,
    to: OptimizerId,
    table: &CompatibilityTable,
    to_base_lr: f64,
) -> f64 {
    let mut lr = match (table.family.get(&from), table.family.get(&to)) {
        (Some(LrFamily::HighLr), Some(LrFamily::LowLr)) => to_base_lr * table.from_high_to_low,
        (Some(LrFamily::LowLr), Some(LrFamily::HighLr)) => to_base_lr * table.from_low_to_high,
        _ => to_base_lr,
    };
    if let Some(&fixed) = table.lr_overrides.get(&to) {
        lr = fixed;
    }
    if let Some(&cap) = table.lr_caps.get(&to) {
        lr = lr.min(cap);
    }
    lr
}

/// Why a catastrophic event fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatastrophicCause {
    ValidationDrop,
    NumericalFailure,
}

/// Structured run-log events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControllerEvent {
    Select {
        optimizer: OptimizerId,
        candidates: Vec<OptimizerId>,
        fallback_used: bool,
    },
    WarmupEnd {
        epoch: u32,
        dropped: Option<OptimizerId>,
    },
    FailureLimit {
        optimizer: OptimizerId,
        consecutive: u32,
    },
    Catastrophic {
        optimizer: OptimizerId,
        cause: CatastrophicCause,
    },
    Replace {
        from: OptimizerId,
        to: OptimizerId,
        effective_lr: f64,
        momentum_transferred: bool,
    },
    PoolExhausted {
        optimizer: OptimizerId,
    },
}

impl ControllerEvent {
    pub fn is_failure(&self) -> bool {
        matches!(
            self,
            ControllerEvent::FailureLimit { .. } | ControllerEvent::Catastrophic { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    pub chosen: OptimizerId,
    pub candidate_set_used: Vec<OptimizerId>,
    pub fallback_used: bool,
    pub strategy_entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub phase: Phase,
    /// Index of the epoch in progress (1-based); 0 before the first epoch.
    pub epoch: u32,
    pub configured_pool: Vec<OptimizerId>,
    pub active_set: Vec<OptimizerId>,
    pub blocked_set: Vec<OptimizerId>,
    pub current: OptimizerId,
    /// Optimizer that ran the previous epoch.
    pub previous: Option<OptimizerId>,
    pub last_val_acc_per_opt: BTreeMap<OptimizerId, f64>,
    pub global_last_val_acc: Option<f64>,
    pub best_val_acc: Option<f64>,
    pub consecutive_failures: u32,
    pub grace_remaining: u32,
    pub backup_candidates: Vec<OptimizerId>,
    /// Set by a replacement: the next epoch runs the replacement directly.
    pub pending_replacement: bool,
    /// Roulette epochs started so far.
    pub roulette_epochs: u32,
    pub val_history: Vec<f64>,
}

impl ControllerState {
    pub fn new(config: &RouletteConfig) -> Self {
        Self {
            phase: Phase::Warmup,
            epoch: 0,
            configured_pool: config.pool.clone(),
            active_set: config.pool.clone(),
            blocked_set: Vec::new(),
            current: config.warmup_optimizer,
            previous: None,
            last_val_acc_per_opt: BTreeMap::new(),
            global_last_val_acc: None,
            best_val_acc: None,
            consecutive_failures: 0,
            grace_remaining: 0,
            backup_candidates: config.backup_candidates.clone(),
            pending_replacement: false,
            roulette_epochs: 0,
            val_history: Vec::new(),
        }
    }

    fn observe(&mut self, val_acc: f64) {
        self.val_history.push(val_acc);
        self.global_last_val_acc = Some(val_acc);
        self.best_val_acc = Some(self.best_val_acc.map_or(val_acc, |b| b.max(val_acc)));
        self.previous = Some(self.current);
    }
}

/// `active \ blocked`, falling back to `pool \ blocked` when that is empty.
/// Returns the set and whether the fallback was used.
pub fn candidate_set(state: &ControllerState) -> Result<(Vec<OptimizerId>, bool)> {
    let primary: Vec<_> = state
        .active_set
        .iter()
        .copied()
        .filter(|id| !state.blocked_set.contains(id))
        .collect();
    if !primary.is_empty() {
        return Ok((primary, false));
    }
    let fallback: Vec<_> = state
        .configured_pool
        .iter()
        .copied()
        .filter(|id| !state.blocked_set.contains(id))
        .collect();
    if fallback.is_empty() {
        return Err(Error::CandidatesExhausted);
    }
    Ok((fallback, true))
}

pub fn apply_avoid_repeat(
    candidates: &[OptimizerId],
    previous: Option<OptimizerId>,
    avoid_repeat: bool,
) -> Vec<OptimizerId> {
    match previous {
        Some(prev) if avoid_repeat && candidates.len() > 1 => candidates
            .iter()
            .copied()
            .filter(|&id| id != prev)
            .collect(),
        _ => candidates.to_vec(),
    }
}

/// Entropy (nats) of a within-epoch usage histogram.
pub fn usage_entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    // a one-hot histogram gives -1*ln(1) = -0.0
    h.max(0.0)
}

/// Picks the optimizer for the roulette epoch about to start.
pub fn select_optimizer(
    state: &mut ControllerState,
    config: &RouletteConfig,
    rng: &mut RngStream,
) -> Result<SelectionOutcome> {
    if state.phase != Phase::Roulette {
        return Err(Error::invalid("select_optimizer called during warmup"));
    }
    let ran_last = state.previous;
    state.roulette_epochs += 1;

    let (candidates, fallback_used) = candidate_set(state)?;
    let current_eligible = candidates.contains(&state.current);

    let keep_current = if state.pending_replacement {
        state.pending_replacement = false;
        true
    } else if !current_eligible {
        false
    } else if !(state.roulette_epochs - 1).is_multiple_of(config.switch_every_steps) {
        true
    } else if config.switch_probability >= 1.0 {
        false
    } else if config.switch_probability <= 0.0 {
        true
    } else {
        rng.next_f64() >= config.switch_probability
    };

    let (chosen, used) = if keep_current {
        (state.current, vec![state.current])
    } else {
        let reduced = apply_avoid_repeat(&candidates, ran_last, config.avoid_repeat);
        (uniform_choice(rng, &reduced)?, reduced)
    };

    if !state.active_set.contains(&chosen) {
        state.active_set.push(chosen);
    }
    state.current = chosen;
    Ok(SelectionOutcome {
        chosen,
        candidate_set_used: used,
        fallback_used: fallback_used && !keep_current,
        strategy_entropy: usage_entropy(&[1]),
    })
}

pub fn warmup_step(_state: &ControllerState, config: &RouletteConfig) -> OptimizerId {
    config.warmup_optimizer
}

/// Least-squares slope of `values` against `0, 1, 2, ...`.
pub fn least_squares_slope(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = values.iter().sum::<f64>() / n;
    let (num, den) = values
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(num, den), (i, y)| {
            let dx = i as f64 - x_mean;
            (num + dx * (y - y_mean), den + dx * dx)
        });
    num / den
}

/// Whether warmup should end after the epoch just completed.
pub fn warmup_complete(state: &ControllerState, config: &RouletteConfig) -> bool {
    if state.epoch >= config.warmup_epochs {
        return true;
    }
    let window = config.plateau_window as usize;
    config.plateau_mode
        && state.val_history.len() >= window
        && least_squares_slope(&state.val_history[state.val_history.len() - window..])
            < config.plateau_slope_threshold
}

/// Moves into the roulette phase, dropping the warmup optimizer if configured.
pub fn end_warmup(
    state: &mut ControllerState,
    config: &RouletteConfig,
    val_acc: Option<f64>,
) -> ControllerEvent {
    state.phase = Phase::Roulette;
    let mut dropped = None;
    if config.dropafter_warmup {
        let w = config.warmup_optimizer;
        state.active_set.retain(|&id| id != w);
        if !state.blocked_set.contains(&w) {
            state.blocked_set.push(w);
        }
        dropped = Some(w);
    }
    if let Some(v) = val_acc {
        state.global_last_val_acc = Some(v);
    }
    state.grace_remaining = config.grace_period_epochs;
    state.consecutive_failures = 0;
    ControllerEvent::WarmupEnd {
        epoch: state.epoch,
        dropped,
    }
}

/// `0.7 * local improvement + 0.3 * global improvement`, clipped to `[-1, 1]`.
/// Missing history contributes zero.
pub fn compute_reward(
    val_acc: f64,
    last_for_current: Option<f64>,
    global_last: Option<f64>,
) -> f64 {
    let local = last_for_current.map_or(0.0, |last| val_acc - last);
    let global = global_last.map_or(0.0, |last| val_acc - last);
    (0.7 * local + 0.3 * global).clamp(-1.0, 1.0)
}

/// Failure bookkeeping for an already computed reward. Failure events are
/// suppressed while a grace period is running.
pub fn register_reward(
    state: &mut ControllerState,
    config: &RouletteConfig,
    reward: f64,
    val_acc: f64,
) -> Vec<ControllerEvent> {
    let optimizer = state.current;
    state.last_val_acc_per_opt.insert(optimizer, val_acc);
    state.observe(val_acc);

    if state.grace_remaining > 0 {
        state.grace_remaining -= 1;
        state.consecutive_failures = 0;
        return Vec::new();
    }

    let mut events = Vec::new();
    if reward < config.failure_threshold {
        state.consecutive_failures += 1;
    } else {
        state.consecutive_failures = 0;
    }
    if state.consecutive_failures >= config.consecutive_failure_limit {
        events.push(ControllerEvent::FailureLimit {
            optimizer,
            consecutive: state.consecutive_failures,
        });
        state.consecutive_failures = 0;
    }
    let best = state.best_val_acc.unwrap_or(val_acc);
    if best - val_acc > config.catastrophic_drop {
        events.push(ControllerEvent::Catastrophic {
            optimizer,
            cause: CatastrophicCause::ValidationDrop,
        });
    }
    events
}

/// Computes the epoch reward for `state.current` and applies failure rules.
pub fn register_epoch_result(
    state: &mut ControllerState,
    config: &RouletteConfig,
    val_acc: f64,
) -> (f64, Vec<ControllerEvent>) {
    let reward = compute_reward(
        val_acc,
        state.last_val_acc_per_opt.get(&state.current).copied(),
        state.global_last_val_acc,
    );
    let events = register_reward(state, config, reward, val_acc);
    (reward, events)
}

/// Swaps the current optimizer for the first eligible backup candidate.
///
/// A backup is eligible when it is not active and is not the failing
/// optimizer. Listed ids may re-enter from the blocked set.
pub fn replace_optimizer(
    state: &mut ControllerState,
    config: &RouletteConfig,
    table: &CompatibilityTable,
    pool: &mut OptimizerPool,
) -> Result<Vec<ControllerEvent>> {
    let failing = state.current;
    let Some(replacement) = state
        .backup_candidates
        .iter()
        .copied()
        .find(|&id| id != failing && !state.active_set.contains(&id))
    else {
        return Ok(vec![ControllerEvent::PoolExhausted { optimizer: failing }]);
    };

    state.active_set.retain(|&id| id != failing);
    if !state.blocked_set.contains(&failing) {
        state.blocked_set.push(failing);
    }
    state.blocked_set.retain(|&id| id != replacement);
    state.active_set.push(replacement);
    state.current = replacement;
    state.pending_replacement = true;
    state.grace_remaining = config.grace_period_epochs;
    state.consecutive_failures = 0;

    let momentum_transferred =
        pool.transfer_momentum(failing, replacement, config.momentum_transfer_scale)?;
    let effective_lr =
        scaled_lr_on_transition(failing, replacement, table, pool.base_lr(replacement));
    pool.slot_mut(replacement)?.set_effective_lr(effective_lr)?;
    Ok(vec![ControllerEvent::Replace {
        from: failing,
        to: replacement,
        effective_lr,
        momentum_transferred,
    }])
}

/// What the harness needs to run one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochPlan {
    pub optimizer: OptimizerId,
    pub phase: Phase,
    pub events: Vec<ControllerEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochFeedback {
    pub reward: Option<f64>,
    pub events: Vec<ControllerEvent>,
}

/// Epoch-loop driver bundling state, config, transition table and the
/// selection random stream.
#[derive(Debug, Clone)]
pub struct RouletteController {
    state: ControllerState,
    config: RouletteConfig,
    table: CompatibilityTable,
    rng: RngStream,
}

impl RouletteController {
    pub fn new(config: RouletteConfig, table: CompatibilityTable, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut state = ControllerState::new(&config);
        if config.warmup_epochs == 0 {
            end_warmup(&mut state, &config, None);
        }
        Ok(Self {
            state,
            config,
            table,
            rng: RngStream::new(seed, "selection"),
        })
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn config(&self) -> &RouletteConfig {
        &self.config
    }

    pub fn begin_epoch(&mut self) -> Result<EpochPlan> {
        self.state.epoch += 1;
        match self.state.phase {
            Phase::Warmup => {
                let optimizer = warmup_step(&self.state, &self.config);
                self.state.current = optimizer;
                Ok(EpochPlan {
                    optimizer,
                    phase: Phase::Warmup,
                    events: Vec::new(),
                })
            }
            Phase::Roulette => {
                let outcome = select_optimizer(&mut self.state, &self.config, &mut self.rng)?;
                Ok(EpochPlan {
                    optimizer: outcome.chosen,
                    phase: Phase::Roulette,
                    events: vec![ControllerEvent::Select {
                        optimizer: outcome.chosen,
                        candidates: outcome.candidate_set_used,
                        fallback_used: outcome.fallback_used,
                    }],
                })
            }
        }
    }

    /// Learning rate for `optimizer` this epoch, scaled when it takes over
    /// from a different optimizer.
    pub fn epoch_lr(&self, optimizer: OptimizerId, base_lr: f64) -> f64 {
        match self.state.previous {
            Some(prev) if prev != optimizer => {
                scaled_lr_on_transition(prev, optimizer, &self.table, base_lr)
            }
            _ => base_lr,
        }
    }

    /// Feeds back the epoch's validation accuracy. `numerical_failure`
    /// marks an epoch aborted by a non-finite update, which is handled as a
    /// catastrophic event regardless of grace.
    pub fn end_epoch(
        &mut self,
        val_acc: f64,
        numerical_failure: bool,
        pool: &mut OptimizerPool,
    ) -> Result<EpochFeedback> {
        match self.state.phase {
            Phase::Warmup => {
                if numerical_failure {
                    return Err(Error::NumericalFailure {
                        optimizer: self.state.current,
                        index: 0,
                    });
                }
                self.state.observe(val_acc);
                let mut events = Vec::new();
                if warmup_complete(&self.state, &self.config) {
                    events.push(end_warmup(&mut self.state, &self.config, Some(val_acc)));
                }
                Ok(EpochFeedback {
                    reward: None,
                    events,
                })
            }
            Phase::Roulette if numerical_failure => {
                let optimizer = self.state.current;
                self.state.last_val_acc_per_opt.insert(optimizer, val_acc);
                self.state.observe(val_acc);
                let mut events = vec![ControllerEvent::Catastrophic {
                    optimizer,
                    cause: CatastrophicCause::NumericalFailure,
                }];
                events.extend(replace_optimizer(
                    &mut self.state,
                    &self.config,
                    &self.table,
                    pool,
                )?);
                Ok(EpochFeedback {
                    reward: None,
                    events,
                })
            }
            Phase::Roulette => {
                let (reward, mut events) =
                    register_epoch_result(&mut self.state, &self.config, val_acc);
                if events.iter().any(ControllerEvent::is_failure) {
                    events.extend(replace_optimizer(
                        &mut self.state,
                        &self.config,
                        &self.table,
                        pool,
                    )?);
                }
                Ok(EpochFeedback {
                    reward: Some(reward),
                    events,
                })
            }
        }
    }
}
