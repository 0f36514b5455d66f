//! Scalar reference implementations of the update rules, written
//! independently of the library: one parameter, plain loops, no shared code.

#![allow(dead_code)]

use roulette_core::optim::{Hyper, OptimizerId, OptimizerSlot};
use roulette_core::param::{GradientVector, ParameterVector};

/// Gradient of `0.5 * a * theta^2`.
pub fn quad_grad(a: f64, theta: f64) -> f64 {
    a * theta
}

pub struct RefSgd {
    pub lr: f64,
    pub momentum: f64,
    pub wd: f64,
    buf: Option<f64>,
}

impl RefSgd {
    pub fn new(lr: f64, momentum: f64, wd: f64) -> Self {
        Self {
            lr,
            momentum,
            wd,
            buf: None,
        }
    }

    pub fn step(&mut self, theta: f64, g: f64) -> f64 {
        let d = g + self.wd * theta;
        let b = match self.buf {
            None => d,
            Some(b) => self.momentum * b + d,
        };
        self.buf = Some(b);
        theta - self.lr * b
    }
}

pub struct RefAdam {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub wd: f64,
    pub decoupled: bool,
    m: f64,
    v: f64,
    t: i32,
}

impl RefAdam {
    pub fn new(lr: f64, b1: f64, b2: f64, eps: f64, wd: f64, decoupled: bool) -> Self {
        Self {
            lr,
            b1,
            b2,
            eps,
            wd,
            decoupled,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    pub fn step(&mut self, mut theta: f64, mut g: f64) -> f64 {
        self.t += 1;
        if self.decoupled {
            theta -= self.lr * self.wd * theta;
        } else {
            g += self.wd * theta;
        }
        self.m = self.b1 * self.m + (1.0 - self.b1) * g;
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g;
        let m_hat = self.m / (1.0 - self.b1.powi(self.t));
        let v_hat = self.v / (1.0 - self.b2.powi(self.t));
        theta - self.lr * m_hat / (v_hat.sqrt() + self.eps)
    }
}

pub struct RefNadam {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub wd: f64,
    pub psi: f64,
    m: f64,
    v: f64,
    t: i32,
    mus: Vec<f64>,
}

impl RefNadam {
    pub fn new(lr: f64, b1: f64, b2: f64, eps: f64, wd: f64, psi: f64) -> Self {
        Self {
            lr,
            b1,
            b2,
            eps,
            wd,
            psi,
            m: 0.0,
            v: 0.0,
            t: 0,
            mus: Vec::new(),
        }
    }

    fn mu(&self, t: i32) -> f64 {
        self.b1 * (1.0 - 0.5 * 0.96f64.powf(f64::from(t) * self.psi))
    }

    pub fn step(&mut self, theta: f64, g: f64) -> f64 {
        self.t += 1;
        let g = g + self.wd * theta;
        let mu_t = self.mu(self.t);
        let mu_next = self.mu(self.t + 1);
        self.mus.push(mu_t);
        let prod_t: f64 = self.mus.iter().product();
        let prod_next = prod_t * mu_next;
        self.m = self.b1 * self.m + (1.0 - self.b1) * g;
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g;
        let m_hat = mu_next * self.m / (1.0 - prod_next) + (1.0 - mu_t) * g / (1.0 - prod_t);
        let v_hat = self.v / (1.0 - self.b2.powi(self.t));
        theta - self.lr * m_hat / (v_hat.sqrt() + self.eps)
    }
}

pub struct RefLion {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub wd: f64,
    m: f64,
}

impl RefLion {
    pub fn new(lr: f64, b1: f64, b2: f64, wd: f64) -> Self {
        Self {
            lr,
            b1,
            b2,
            wd,
            m: 0.0,
        }
    }

    pub fn step(&mut self, theta: f64, g: f64) -> f64 {
        let c = self.b1 * self.m + (1.0 - self.b1) * g;
        let s = if c == 0.0 { 0.0 } else { c.signum() };
        self.m = self.b2 * self.m + (1.0 - self.b2) * g;
        theta - self.lr * (s + self.wd * theta)
    }
}

pub struct RefAdan {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub eps: f64,
    pub wd: f64,
    m: f64,
    d: f64,
    n: f64,
    prev: Option<f64>,
    t: i32,
}

impl RefAdan {
    pub fn new(lr: f64, b1: f64, b2: f64, b3: f64, eps: f64, wd: f64) -> Self {
        Self {
            lr,
            b1,
            b2,
            b3,
            eps,
            wd,
            m: 0.0,
            d: 0.0,
            n: 0.0,
            prev: None,
            t: 0,
        }
    }

    pub fn step(&mut self, theta: f64, g: f64) -> f64 {
        self.t += 1;
        let diff = g - self.prev.unwrap_or(g);
        self.prev = Some(g);
        self.m = self.b1 * self.m + (1.0 - self.b1) * g;
        self.d = self.b2 * self.d + (1.0 - self.b2) * diff;
        let u = g + self.b2 * diff;
        self.n = self.b3 * self.n + (1.0 - self.b3) * u * u;
        let m_hat = self.m / (1.0 - self.b1.powi(self.t));
        let d_hat = self.d / (1.0 - self.b2.powi(self.t));
        let n_hat_sqrt = self.n.sqrt() / (1.0 - self.b3.powi(self.t)).sqrt();
        let eta = self.lr / (n_hat_sqrt + self.eps);
        (theta - eta * (m_hat + self.b2 * d_hat)) / (1.0 + self.lr * self.wd)
    }
}

pub struct RefRadam {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub wd: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl RefRadam {
    pub fn new(lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> Self {
        Self {
            lr,
            b1,
            b2,
            eps,
            wd,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    pub fn step(&mut self, theta: f64, g: f64) -> f64 {
        self.t += 1;
        let t = f64::from(self.t);
        let g = g + self.wd * theta;
        self.m = self.b1 * self.m + (1.0 - self.b1) * g;
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g;
        let m_hat = self.m / (1.0 - self.b1.powf(t));
        let rho_inf = 2.0 / (1.0 - self.b2) - 1.0;
        let b2t = self.b2.powf(t);
        let rho = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
        if rho > 5.0 {
            let r = ((rho - 4.0) * (rho - 2.0) * rho_inf
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
                .sqrt();
            // eps is added to sqrt(v) before bias correction
            let adaptive = (1.0 - b2t).sqrt() / (self.v.sqrt() + self.eps);
            theta - self.lr * m_hat * r * adaptive
        } else {
            theta - self.lr * m_hat
        }
    }
}

/// RAdam inner steps with a slow copy pulled toward the fast weights every
/// `k` steps.
pub struct RefRanger {
    inner: RefRadam,
    k: u32,
    alpha: f64,
    slow: Option<f64>,
    count: u32,
}

impl RefRanger {
    pub fn new(inner: RefRadam, k: u32, alpha: f64) -> Self {
        Self {
            inner,
            k,
            alpha,
            slow: None,
            count: 0,
        }
    }

    pub fn step(&mut self, theta: f64, g: f64) -> f64 {
        let slow = *self.slow.get_or_insert(theta);
        let fast = self.inner.step(theta, g);
        self.count += 1;
        if self.count.is_multiple_of(self.k) {
            let s = slow + self.alpha * (fast - slow);
            self.slow = Some(s);
            s
        } else {
            fast
        }
    }
}

/// Reference stepper for any rule with an update in the library.
pub enum Reference {
    Sgd(RefSgd),
    Adam(RefAdam),
    Nadam(RefNadam),
    Lion(RefLion),
    Adan(RefAdan),
    Radam(RefRadam),
    Ranger(RefRanger),
}

impl Reference {
    pub fn new(id: OptimizerId, lr: f64, h: &Hyper) -> Self {
        match id {
            OptimizerId::Sgd => Reference::Sgd(RefSgd::new(lr, h.momentum, h.weight_decay)),
            OptimizerId::Adam => Reference::Adam(RefAdam::new(
                lr,
                h.beta1,
                h.beta2,
                h.eps,
                h.weight_decay,
                false,
            )),
            OptimizerId::Adamw => Reference::Adam(RefAdam::new(
                lr,
                h.beta1,
                h.beta2,
                h.eps,
                h.weight_decay,
                true,
            )),
            OptimizerId::Nadam => Reference::Nadam(RefNadam::new(
                lr,
                h.beta1,
                h.beta2,
                h.eps,
                h.weight_decay,
                h.momentum_decay,
            )),
            OptimizerId::Lion => {
                Reference::Lion(RefLion::new(lr, h.beta1, h.beta2, h.weight_decay))
            }
            OptimizerId::Adan => Reference::Adan(RefAdan::new(
                lr,
                h.beta1,
                h.beta2,
                h.beta3,
                h.eps,
                h.weight_decay,
            )),
            OptimizerId::Radam => {
                Reference::Radam(RefRadam::new(lr, h.beta1, h.beta2, h.eps, h.weight_decay))
            }
            OptimizerId::Ranger => Reference::Ranger(RefRanger::new(
                RefRadam::new(lr, h.beta1, h.beta2, h.eps, h.weight_decay),
                h.lookahead_k,
                h.lookahead_alpha,
            )),
            OptimizerId::Adahessian => panic!("no reference for adahessian"),
        }
    }

    pub fn step(&mut self, theta: f64, g: f64) -> f64 {
        match self {
            Reference::Sgd(r) => r.step(theta, g),
            Reference::Adam(r) => r.step(theta, g),
            Reference::Nadam(r) => r.step(theta, g),
            Reference::Lion(r) => r.step(theta, g),
            Reference::Adan(r) => r.step(theta, g),
            Reference::Radam(r) => r.step(theta, g),
            Reference::Ranger(r) => r.step(theta, g),
        }
    }
}

/// Runs the library slot on `0.5 * a * theta^2` from `theta0`.
pub fn library_trajectory(
    id: OptimizerId,
    lr: f64,
    h: Hyper,
    a: f64,
    theta0: f64,
    steps: usize,
) -> Vec<f64> {
    let mut slot = OptimizerSlot::new(id, lr, h).expect("slot");
    let mut theta = ParameterVector::flat(vec![theta0]);
    (0..steps)
        .map(|_| {
            let g = GradientVector::flat(vec![quad_grad(a, theta.as_slice()[0])]);
            slot.apply_update(&mut theta, &g).expect("finite update");
            theta.as_slice()[0]
        })
        .collect()
}

pub fn reference_trajectory(
    id: OptimizerId,
    lr: f64,
    h: &Hyper,
    a: f64,
    theta0: f64,
    steps: usize,
) -> Vec<f64> {
    let mut r = Reference::new(id, lr, h);
    let mut theta = theta0;
    (0..steps)
        .map(|_| {
            theta = r.step(theta, quad_grad(a, theta));
            theta
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Frozen trajectories from an independent tensor-library run on
/// `0.5 * theta^2`, `theta0 = 1`, default hyperparameters unless noted.
pub const FROZEN_SGD_LR_0_1: [f64; 10] = [
    0.9,
    0.72,
    0.486,
    0.2268,
    -0.029159999999999978,
    -0.25660799999999995,
    -0.43565039999999994,
    -0.55322352,
    -0.603716976,
    -0.5887893888,
];
pub const FROZEN_ADAM: [f64; 10] = [
    0.99900000001,
    0.9980000262238367,
    0.9970000960801475,
    0.9960002269457763,
    0.9950004360774127,
    0.994000740584183,
    0.9930011573914689,
    0.9920017032062174,
    0.9910023944839782,
    0.990003247397883,
];
/// weight decay 0.01
pub const FROZEN_ADAMW_WD_0_01: [f64; 10] = [
    0.99899000001,
    0.9979800365872719,
    0.9969701273454019,
    0.9959602898252821,
    0.9949505414563626,
    0.9939408995188657,
    0.992931381107241,
    0.9919220030951267,
    0.9909127821020562,
    0.9899037344621269,
];
pub const FROZEN_NADAM: [f64; 10] = [
    0.9989435482322091,
    0.9981602308380144,
    0.9974285511323943,
    0.9966982079393893,
    0.995953105812035,
    0.9951881523423479,
    0.9944024682748446,
    0.9935968572259951,
    0.9927727557566113,
    0.9919317809615265,
];
pub const FROZEN_RADAM: [f64; 10] = [
    0.999,
    0.9980005263157895,
    0.9970015962322781,
    0.9960032269185484,
    0.9950054353896862,
    0.9949796221345396,
    0.9949468953946644,
    0.9949081731829598,
    0.9948640881161588,
    0.9948151133792342,
];
/// RAdam lr 0.1 inside Lookahead(k = 6, alpha = 0.5), 12 steps.
pub const FROZEN_RANGER_LR_0_1: [f64; 12] = [
    0.9,
    0.8052631578947369,
    0.7157700524373665,
    0.6314866300895146,
    0.552364195101898,
    0.77496048960966,
    0.7718306625823438,
    0.7680999550102459,
    0.7638296132161579,
    0.7590669334272298,
    0.7538501800370522,
    0.7615859134556169,
];
