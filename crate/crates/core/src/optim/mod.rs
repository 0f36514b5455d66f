//! The pooled first-order update rules.
//!
//! Every rule is a stateful map `(g, state) -> delta` applied as
//! `theta <- theta - lr * phi(g, state)`. A slot keeps its state for the whole
//! run; nothing is reset when the controller stops selecting it.

mod lookahead;
mod rules;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use lookahead::{lookahead_wrap, Lookahead};

use crate::error::{Error, Result};
use crate::param::{GradientVector, ParameterVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerId {
    Sgd,
    Nadam,
    Adam,
    Adamw,
    Ranger,
    Adan,
    Lion,
    Radam,
    /// Present only for the learning-rate override table; there is no update rule.
    Adahessian,
}

impl OptimizerId {
    pub const ALL: [OptimizerId; 9] = [
        OptimizerId::Sgd,
        OptimizerId::Nadam,
        OptimizerId::Adam,
        OptimizerId::Adamw,
        OptimizerId::Ranger,
        OptimizerId::Adan,
        OptimizerId::Lion,
        OptimizerId::Radam,
        OptimizerId::Adahessian,
    ];

    /// The seven-member default pool, in configuration order.
    pub const DEFAULT_POOL: [OptimizerId; 7] = [
        OptimizerId::Sgd,
        OptimizerId::Nadam,
        OptimizerId::Adam,
        OptimizerId::Adamw,
        OptimizerId::Ranger,
        OptimizerId::Adan,
        OptimizerId::Lion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerId::Sgd => "sgd",
            OptimizerId::Nadam => "nadam",
            OptimizerId::Adam => "adam",
            OptimizerId::Adamw => "adamw",
            OptimizerId::Ranger => "ranger",
            OptimizerId::Adan => "adan",
            OptimizerId::Lion => "lion",
            OptimizerId::Radam => "radam",
            OptimizerId::Adahessian => "adahessian",
        }
    }

    pub fn has_update_rule(self) -> bool {
        self != OptimizerId::Adahessian
    }
}

impl fmt::Display for OptimizerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown optimizer id `{s}`")))
    }
}

/// Scalar hyperparameters. Fields a rule does not use are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub beta1: f64,
    pub beta2: f64,
    /// Adan only.
    pub beta3: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// SGD heavy-ball momentum.
    pub momentum: f64,
    /// Nadam momentum schedule decay.
    pub momentum_decay: f64,
    pub lookahead_k: u32,
    pub lookahead_alpha: f64,
}

impl Hyper {
    pub fn defaults(id: OptimizerId) -> Self {
        let base = Hyper {
            beta1: 0.9,
            beta2: 0.999,
            beta3: 0.0,
            eps: 1e-8,
            weight_decay: 0.0,
            momentum: 0.0,
            momentum_decay: 4e-3,
            lookahead_k: 6,
            lookahead_alpha: 0.5,
        };
        match id {
            OptimizerId::Sgd => Hyper {
                momentum: 0.9,
                ..base
            },
            OptimizerId::Lion => Hyper {
                beta1: 0.9,
                beta2: 0.99,
                ..base
            },
            OptimizerId::Adan => Hyper {
                beta1: 0.98,
                beta2: 0.92,
                beta3: 0.99,
                ..base
            },
            _ => base,
        }
    }
}

/// Base learning rate per optimizer id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrVector(BTreeMap<OptimizerId, f64>);

impl Default for LrVector {
    fn default() -> Self {
        use OptimizerId::*;
        LrVector(BTreeMap::from([
            (Sgd, 0.1),
            (Nadam, 1e-3),
            (Adam, 1e-3),
            (Adamw, 1e-3),
            (Ranger, 7e-4),
            (Adan, 1.2e-4),
            (Lion, 1e-5),
            (Radam, 1e-3),
            (Adahessian, 0.15),
        ]))
    }
}

impl LrVector {
    pub fn get(&self, id: OptimizerId) -> f64 {
        self.0[&id]
    }

    pub fn set(&mut self, id: OptimizerId, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(
                format!("optimizers.{id}.lr"),
                format!("must be positive and finite, got {lr}"),
            ));
        }
        self.0.insert(id, lr);
        Ok(())
    }
}

/// One pooled update rule with its persistent state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSlot {
    id: OptimizerId,
    pub base_lr: f64,
    effective_lr: f64,
    step_count: u64,
    pub hyper: Hyper,
    /// SGD momentum buffer, Adam-family / RAdam / Lion / Adan `m`.
    pub(crate) first_moment: Option<Vec<f64>>,
    /// Squared-gradient accumulator (Adam family, RAdam, Adan `n`).
    pub(crate) second_moment: Option<Vec<f64>>,
    /// Adan previous gradient.
    pub(crate) prev_grad: Option<Vec<f64>>,
    /// Adan gradient-difference moment.
    pub(crate) diff_moment: Option<Vec<f64>>,
    /// Nadam running product of momentum coefficients.
    pub(crate) mu_product: f64,
    pub(crate) lookahead: Option<Lookahead>,
}

impl OptimizerSlot {
    /// Builds a fresh slot. `ranger` is RAdam wrapped by Lookahead with the
    /// slot's `lookahead_k` / `lookahead_alpha`.
    pub fn new(id: OptimizerId, base_lr: f64, hyper: Hyper) -> Result<Self> {
        if !id.has_update_rule() {
            return Err(Error::UnsupportedOptimizer(id));
        }
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::invalid(format!(
                "{id}: base lr must be positive, got {base_lr}"
            )));
        }
        let slot = OptimizerSlot {
            id,
            base_lr,
            effective_lr: base_lr,
            step_count: 0,
            hyper,
            first_moment: None,
            second_moment: None,
            prev_grad: None,
            diff_moment: None,
            mu_product: 1.0,
            lookahead: None,
        };
        if id == OptimizerId::Ranger {
            let (k, alpha) = (hyper.lookahead_k, hyper.lookahead_alpha);
            return lookahead_wrap(slot, k, alpha);
        }
        Ok(slot)
    }

    pub fn with_defaults(id: OptimizerId) -> Result<Self> {
        Self::new(id, LrVector::default().get(id), Hyper::defaults(id))
    }

    pub fn id(&self) -> OptimizerId {
        self.id
    }

    pub fn effective_lr(&self) -> f64 {
        self.effective_lr
    }

    pub fn set_effective_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!(
                "{}: effective lr must be positive, got {lr}",
                self.id
            )));
        }
        self.effective_lr = lr;
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> Option<&[f64]> {
        self.first_moment.as_deref()
    }

    pub fn second_moment(&self) -> Option<&[f64]> {
        self.second_moment.as_deref()
    }

    pub fn lookahead(&self) -> Option<&Lookahead> {
        self.lookahead.as_ref()
    }

    /// One optimization step: `theta <- theta - lr * phi(g, state)`.
    ///
    /// On a non-finite result `theta` is left untouched and a
    /// [`Error::NumericalFailure`] is returned; the slot's own state has
    /// already advanced by then.
    pub fn apply_update(&mut self, theta: &mut ParameterVector, g: &GradientVector) -> Result<()> {
        if theta.len() != g.len() {
            return Err(Error::invalid(format!(
                "gradient length {} does not match parameter length {}",
                g.len(),
                theta.len()
            )));
        }
        if let Some(buf) = self.first_moment.as_ref().or(self.second_moment.as_ref()) {
            if buf.len() != theta.len() {
                return Err(Error::invalid(format!(
                    "{}: state length {} does not match parameter length {}",
                    self.id,
                    buf.len(),
                    theta.len()
                )));
            }
        }

        let mut next = theta.as_slice().to_vec();
        if let Some(la) = self.lookahead.as_mut() {
            la.ensure_slow(&next);
        }
        self.step_count += 1;
        let g = g.as_slice();
        match self.id {
            OptimizerId::Sgd => rules::sgd(self, &mut next, g),
            OptimizerId::Adam => rules::adam(self, &mut next, g, false),
            OptimizerId::Adamw => rules::adam(self, &mut next, g, true),
            OptimizerId::Nadam => rules::nadam(self, &mut next, g),
            OptimizerId::Lion => rules::lion(self, &mut next, g),
            OptimizerId::Adan => rules::adan(self, &mut next, g),
            OptimizerId::Radam | OptimizerId::Ranger => rules::radam(self, &mut next, g),
            OptimizerId::Adahessian => return Err(Error::UnsupportedOptimizer(self.id)),
        }
        if let Some(la) = self.lookahead.as_mut() {
            la.after_inner_step(&mut next);
        }

        if let Some(index) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure {
                optimizer: self.id,
                index,
            });
        }
        theta.as_mut_slice().copy_from_slice(&next);
        Ok(())
    }

    /// Zeroes squared-gradient accumulators. Step count is kept.
    pub fn reset_second_moments(&mut self) {
        if let Some(v) = self.second_moment.as_mut() {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Multiplies first-moment-like buffers (`m`, Adan's difference moment).
    pub fn scale_first_moments(&mut self, factor: f64) {
        for buf in [self.first_moment.as_mut(), self.diff_moment.as_mut()]
            .into_iter()
            .flatten()
        {
            buf.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Seeds this slot's first moment with `scale` times the outgoing slot's
    /// and clears this slot's second moments. Missing or mismatched buffers
    /// are skipped. Returns whether a buffer was transferred.
    pub fn receive_momentum(&mut self, outgoing: &OptimizerSlot, scale: f64) -> bool {
        let transferred = match (outgoing.first_moment.as_ref(), self.first_moment.as_ref()) {
            (Some(src), Some(dst)) if src.len() != dst.len() => false,
            (Some(src), _) => {
                self.first_moment = Some(src.iter().map(|x| x * scale).collect());
                true
            }
            (None, _) => false,
        };
        self.reset_second_moments();
        transferred
    }
}

/// Lazily populated set of slots for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerPool {
    lrs: LrVector,
    hypers: BTreeMap<OptimizerId, Hyper>,
    slots: BTreeMap<OptimizerId, OptimizerSlot>,
}

impl OptimizerPool {
    pub fn new(lrs: LrVector, hypers: BTreeMap<OptimizerId, Hyper>) -> Self {
        Self {
            lrs,
            hypers,
            slots: BTreeMap::new(),
        }
    }

    pub fn base_lr(&self, id: OptimizerId) -> f64 {
        self.lrs.get(id)
    }

    pub fn hyper(&self, id: OptimizerId) -> Hyper {
        self.hypers
            .get(&id)
            .copied()
            .unwrap_or_else(|| Hyper::defaults(id))
    }

    pub fn get(&self, id: OptimizerId) -> Option<&OptimizerSlot> {
        self.slots.get(&id)
    }

    pub fn slot_mut(&mut self, id: OptimizerId) -> Result<&mut OptimizerSlot> {
        if !self.slots.contains_key(&id) {
            let slot = OptimizerSlot::new(id, self.base_lr(id), self.hyper(id))?;
            self.slots.insert(id, slot);
        }
        Ok(self.slots.get_mut(&id).expect("inserted above"))
    }

    /// Momentum transfer from `from` into `to`.
    pub fn transfer_momentum(
        &mut self,
        from: OptimizerId,
        to: OptimizerId,
        scale: f64,
    ) -> Result<bool> {
        if from == to {
            return Ok(false);
        }
        self.slot_mut(to)?;
        let Some(outgoing) = self.slots.get(&from).cloned() else {
            self.slots
                .get_mut(&to)
                .expect("created")
                .reset_second_moments();
            return Ok(false);
        };
        Ok(self
            .slots
            .get_mut(&to)
            .expect("created")
            .receive_momentum(&outgoing, scale))
    }

    pub fn slots(&self) -> impl Iterator<Item = &OptimizerSlot> {
        self.slots.values()
    }
}
