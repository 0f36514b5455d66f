use crate::error::{Error, Result};

use super::OptimizerSlot;

/// Slow-weight state of a Lookahead wrapper.
#[derive(Debug, Clone, PartialEq)]
pub struct Lookahead {
    pub k: u32,
    pub alpha: f64,
    slow: Option<Vec<f64>>,
    inner_steps: u64,
}

impl Lookahead {
    pub fn slow_weights(&self) -> Option<&[f64]> {
        self.slow.as_deref()
    }

    pub fn inner_steps(&self) -> u64 {
        self.inner_steps
    }

    pub(super) fn ensure_slow(&mut self, theta: &[f64]) {
        if self.slow.is_none() {
            self.slow = Some(theta.to_vec());
        }
    }

    /// Every `k` inner steps: `slow += alpha * (fast - slow)`, then `fast = slow`.
    pub(super) fn after_inner_step(&mut self, fast: &mut [f64]) {
        self.inner_steps += 1;
        if !self.inner_steps.is_multiple_of(u64::from(self.k)) {
            return;
        }
        let slow = self.slow.get_or_insert_with(|| fast.to_vec());
        for (s, f) in slow.iter_mut().zip(fast.iter_mut()) {
            *s += self.alpha * (*f - *s);
            *f = *s;
        }
    }
}

/// Wraps `inner` so that its trajectory is pulled back toward slow weights
/// every `k` steps.
pub fn lookahead_wrap(mut inner: OptimizerSlot, k: u32, alpha: f64) -> Result<OptimizerSlot> {
    if k == 0 {
        return Err(Error::invalid("lookahead k must be at least 1"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!(
            "lookahead alpha must lie in (0, 1], got {alpha}"
        )));
    }
    inner.lookahead = Some(Lookahead {
        k,
        alpha,
        slow: None,
        inner_steps: 0,
    });
    Ok(inner)
}
