use super::{Hyper, OptimizerSlot};

fn zeros_if_absent(buf: &mut Option<Vec<f64>>, n: usize) -> &mut Vec<f64> {
    buf.get_or_insert_with(|| vec![0.0; n])
}

/// Heavy-ball SGD with coupled weight decay. The momentum buffer starts as
/// the first gradient.
pub(super) fn sgd(slot: &mut OptimizerSlot, theta: &mut [f64], g: &[f64]) {
    let lr = slot.effective_lr;
    let Hyper {
        momentum,
        weight_decay,
        ..
    } = slot.hyper;
    if momentum == 0.0 {
        for (p, &gi) in theta.iter_mut().zip(g) {
            *p -= lr * (gi + weight_decay * *p);
        }
        return;
    }
    match slot.first_moment.as_mut() {
        None => {
            let buf: Vec<f64> = theta
                .iter()
                .zip(g)
                .map(|(&p, &gi)| gi + weight_decay * p)
                .collect();
            for (p, b) in theta.iter_mut().zip(&buf) {
                *p -= lr * b;
            }
            slot.first_moment = Some(buf);
        }
        Some(buf) => {
            for ((p, b), &gi) in theta.iter_mut().zip(buf.iter_mut()).zip(g) {
                *b = momentum * *b + gi + weight_decay * *p;
                *p -= lr * *b;
            }
        }
    }
}

/// Adam, or AdamW when `decoupled` (decay applied to theta before the step).
pub(super) fn adam(slot: &mut OptimizerSlot, theta: &mut [f64], g: &[f64], decoupled: bool) {
    let n = theta.len();
    let lr = slot.effective_lr;
    let h = slot.hyper;
    let t = slot.step_count as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2_sqrt = (1.0 - h.beta2.powi(t)).sqrt();
    let step_size = lr / bc1;

    let m = zeros_if_absent(&mut slot.first_moment, n);
    let v = zeros_if_absent(&mut slot.second_moment, n);
    for i in 0..n {
        let gi = if decoupled {
            theta[i] *= 1.0 - lr * h.weight_decay;
            g[i]
        } else {
            g[i] + h.weight_decay * theta[i]
        };
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
        let denom = v[i].sqrt() / bc2_sqrt + h.eps;
        theta[i] -= step_size * m[i] / denom;
    }
}

/// Nadam with the `0.96^(t * momentum_decay)` momentum schedule.
pub(super) fn nadam(slot: &mut OptimizerSlot, theta: &mut [f64], g: &[f64]) {
    let n = theta.len();
    let lr = slot.effective_lr;
    let h = slot.hyper;
    let t = slot.step_count as f64;
    let bc2 = 1.0 - h.beta2.powf(t);
    let mu = h.beta1 * (1.0 - 0.5 * 0.96f64.powf(t * h.momentum_decay));
    let mu_next = h.beta1 * (1.0 - 0.5 * 0.96f64.powf((t + 1.0) * h.momentum_decay));
    slot.mu_product *= mu;
    let mu_product = slot.mu_product;
    let grad_coef = lr * (1.0 - mu) / (1.0 - mu_product);
    let moment_coef = lr * mu_next / (1.0 - mu_product * mu_next);

    let m = zeros_if_absent(&mut slot.first_moment, n);
    let v = zeros_if_absent(&mut slot.second_moment, n);
    for i in 0..n {
        let gi = g[i] + h.weight_decay * theta[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
        let denom = (v[i] / bc2).sqrt() + h.eps;
        theta[i] -= grad_coef * gi / denom + moment_coef * m[i] / denom;
    }
}

/// Sign of the interpolated moment; decoupled decay.
pub(super) fn lion(slot: &mut OptimizerSlot, theta: &mut [f64], g: &[f64]) {
    let n = theta.len();
    let lr = slot.effective_lr;
    let h = slot.hyper;
    let m = zeros_if_absent(&mut slot.first_moment, n);
    for i in 0..n {
        let c = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        let sign = if c > 0.0 {
            1.0
        } else if c < 0.0 {
            -1.0
        } else {
            0.0
        };
        theta[i] = theta[i] * (1.0 - lr * h.weight_decay) - lr * sign;
        m[i] = h.beta2 * m[i] + (1.0 - h.beta2) * g[i];
    }
}

/// Adan: gradient moment, gradient-difference moment, and a second moment of
/// the Nesterov-corrected gradient. Decay is applied proximally afterwards.
pub(super) fn adan(slot: &mut OptimizerSlot, theta: &mut [f64], g: &[f64]) {
    let n = theta.len();
    let lr = slot.effective_lr;
    let h = slot.hyper;
    let t = slot.step_count as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let bc3_sqrt = (1.0 - h.beta3.powi(t)).sqrt();
    let step_size = lr / bc1;
    let step_size_diff = lr * h.beta2 / bc2;

    let prev = slot.prev_grad.get_or_insert_with(|| g.to_vec());
    let diffs: Vec<f64> = g.iter().zip(prev.iter()).map(|(a, b)| a - b).collect();
    prev.copy_from_slice(g);

    let m = zeros_if_absent(&mut slot.first_moment, n);
    let d = zeros_if_absent(&mut slot.diff_moment, n);
    let v = zeros_if_absent(&mut slot.second_moment, n);
    for i in 0..n {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        d[i] = h.beta2 * d[i] + (1.0 - h.beta2) * diffs[i];
        let corrected = g[i] + h.beta2 * diffs[i];
        v[i] = h.beta3 * v[i] + (1.0 - h.beta3) * corrected * corrected;
        let denom = v[i].sqrt() / bc3_sqrt + h.eps;
        theta[i] -= step_size * m[i] / denom + step_size_diff * d[i] / denom;
        theta[i] /= 1.0 + lr * h.weight_decay;
    }
}

/// Rectified Adam; plain bias-corrected momentum while the variance
/// rectification term is undefined (`rho_t <= 5`).
pub(super) fn radam(slot: &mut OptimizerSlot, theta: &mut [f64], g: &[f64]) {
    let n = theta.len();
    let lr = slot.effective_lr;
    let h = slot.hyper;
    let t = slot.step_count as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let rho_inf = 2.0 / (1.0 - h.beta2) - 1.0;
    let rho_t = rho_inf - 2.0 * t as f64 * h.beta2.powi(t) / bc2;
    let rect = (rho_t > 5.0).then(|| {
        ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
            .sqrt()
    });

    let m = zeros_if_absent(&mut slot.first_moment, n);
    let v = zeros_if_absent(&mut slot.second_moment, n);
    for i in 0..n {
        let gi = g[i] + h.weight_decay * theta[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
        let m_hat = m[i] / bc1;
        theta[i] -= match rect {
            Some(r) => lr * m_hat * r * bc2.sqrt() / (v[i].sqrt() + h.eps),
            None => lr * m_hat,
        };
    }
}
