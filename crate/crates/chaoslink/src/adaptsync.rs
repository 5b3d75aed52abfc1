//! Adaptive master–slave synchronization: error, control law, gradient
//! parameter adaptation and the controlled receiver.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    theta_to_q, DynamicsError, DynamicsParams, FxField, IntegratorConfig, RealState, StateVec, COEF_FRAC,
    COEF_R_FRAC, MAX_THETA, THETA_FRAC,
};
use crate::fxp::{div_round_even, FxpFormat, FxpSample, SatCounter};

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("controller gains must be positive, got {0:?}")]
    NonPositiveGain([i32; 3]),
    #[error("adaptation rates must be positive and finite, got {0:?}")]
    BadGamma(Vec<f64>),
    #[error("expected {expected} adaptation rates or initial estimates, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("error trace never settles within tolerance")]
pub struct NotSettled;

/// Feedback gains as raw counts at the signal scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerGains {
    k: [FxpSample; 3],
}

impl ControllerGains {
    pub fn new(k1: i32, k2: i32, k3: i32) -> Result<Self, SyncError> {
        if k1 <= 0 || k2 <= 0 || k3 <= 0 {
            return Err(SyncError::NonPositiveGain([k1, k2, k3]));
        }
        Ok(Self { k: [FxpSample(k1), FxpSample(k2), FxpSample(k3)] })
    }

    /// `(2, 1, 3) * scale`.
    pub fn standard(fmt: &FxpFormat) -> Self {
        let s = fmt.scale as i32;
        Self::new(2 * s, s, 3 * s).expect("positive scale")
    }

    pub fn raw(&self) -> [i32; 3] {
        self.k.map(|k| k.0)
    }
}

pub type ControlSignal = [FxpSample; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    /// Parameter-estimate integrators, `theta_hat * 2^32`.
    pub adapt_accum: Vec<i64>,
    pub gamma: Vec<f64>,
    pub receiver: StateVec,
}

impl ControllerState {
    pub fn theta_hat(&self) -> Vec<f64> {
        self.adapt_accum.iter().map(|&a| a as f64 / (1u64 << THETA_FRAC) as f64).collect()
    }
}

/// `e = rx - tx_out`, componentwise and saturating.
pub fn sync_error(tx_out: &StateVec, rx: &StateVec, fmt: &FxpFormat, sat: &mut SatCounter) -> StateVec {
    std::array::from_fn(|i| fmt.sat_sub(rx[i], tx_out[i], sat))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyncConfig {
    pub gamma: Vec<f64>,
    /// Initial estimates of adapted parameters; known ones start at their true value.
    pub theta0: Vec<f64>,
    /// Word length of the control signal (same scale as the state).
    pub control_bits: u32,
}

impl SyncConfig {
    pub fn for_params(p: &DynamicsParams) -> Self {
        Self { gamma: vec![1.0; p.n_params()], theta0: vec![0.0; p.n_params()], control_bits: 24 }
    }
}

/// Fixed-point receiver: control law, adaptation and Euler update.
#[derive(Debug, Clone)]
pub struct Synchronizer {
    pub params: DynamicsParams,
    pub field: FxField,
    pub gains: ControllerGains,
    pub control_fmt: FxpFormat,
    pub cfg: SyncConfig,
    hg_q: Vec<i128>,
    adapt_den: i128,
    theta_lim: i64,
}

impl Synchronizer {
    pub fn new(
        params: &DynamicsParams,
        fmt: FxpFormat,
        icfg: &IntegratorConfig,
        gains: ControllerGains,
        cfg: SyncConfig,
    ) -> Result<Self, SyncError> {
        let n = params.n_params();
        for len in [cfg.gamma.len(), cfg.theta0.len()] {
            if len != n {
                return Err(SyncError::ShapeMismatch { expected: n, got: len });
            }
        }
        if cfg.gamma.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(SyncError::BadGamma(cfg.gamma.clone()));
        }
        let field = FxField::new(params, fmt, icfg)?;
        let control_fmt = FxpFormat::new(cfg.control_bits, fmt.scale)
            .map_err(|_| DynamicsError::BadIntegrator(format!("control_bits = {}", cfg.control_bits)))?;
        let hg_q = cfg
            .gamma
            .iter()
            .map(|g| (icfg.h * g * (1u128 << COEF_FRAC) as f64).round_ties_even() as i128)
            .collect();
        // theta_q = h*gamma*phi*e: (2^COEF_FRAC) (2^COEF_R_FRAC scale^dmax) (scale) -> 2^THETA_FRAC
        let adapt_den = (1i128 << (COEF_FRAC + COEF_R_FRAC - THETA_FRAC)) * field.scale_pow() * (fmt.scale as i128).pow(2);
        Ok(Self {
            params: params.clone(),
            field,
            gains,
            control_fmt,
            cfg,
            hg_q,
            adapt_den,
            theta_lim: (MAX_THETA * (1u64 << THETA_FRAC) as f64) as i64,
        })
    }

    pub fn fmt(&self) -> FxpFormat {
        self.field.fmt
    }

    pub fn init_state(&self, rx0: StateVec) -> ControllerState {
        let true_q = theta_to_q(&self.params.theta);
        let est_q = theta_to_q(&self.cfg.theta0);
        let adapt_accum = (0..self.params.n_params())
            .map(|p| if self.params.known[p] { true_q[p] } else { est_q[p] })
            .collect();
        ControllerState { adapt_accum, gamma: self.cfg.gamma.clone(), receiver: rx0 }
    }

    /// `u = f(r; theta_hat) - f(rx; theta_hat) - K e`, with the received signal
    /// reconstructed as `r = rx - e`.
    pub fn control(&self, e: &StateVec, rx: &StateVec, cs: &ControllerState, sat: &mut SatCounter) -> ControlSignal {
        let r: StateVec = std::array::from_fn(|i| FxpSample(rx[i].0 - e[i].0));
        self.control_with(&r, e, rx, cs, sat)
    }

    /// Control law given the received vector itself; exact even when `e` saturated.
    fn control_with(&self, r: &StateVec, e: &StateVec, rx: &StateVec, cs: &ControllerState, sat: &mut SatCounter) -> ControlSignal {
        let fr = self.field.numer(r, &cs.adapt_accum, false);
        let fs = self.field.numer(rx, &cs.adapt_accum, false);
        let fmt = self.fmt();
        std::array::from_fn(|i| {
            let comp = self.field.round(fr[i] - fs[i]);
            let fb = div_round_even(self.gains.k[i].0 as i128 * e[i].0 as i128, fmt.scale as i128);
            self.control_fmt.saturate(comp - fb, sat)
        })
    }

    /// `theta_hat <- theta_hat - h Gamma phi(r)^T e` for adapted parameters,
    /// with the regressor taken at the received signal `r`. This is the
    /// choice for which the control law gives `dV/dt = -e^T K e` exactly.
    pub fn adapt_step(&self, e: &StateVec, r: &StateVec, cs: &mut ControllerState) {
        let phi = self.field.regressor_numer(r, self.params.n_params());
        for (p, row) in phi.iter().enumerate() {
            if self.params.known[p] {
                continue;
            }
            let s: i128 = (0..3).map(|i| row[i] * e[i].0 as i128).sum();
            let d = div_round_even(self.hg_q[p] * s, self.adapt_den) as i64;
            cs.adapt_accum[p] = (cs.adapt_accum[p] - d).clamp(-self.theta_lim, self.theta_lim);
        }
    }

    /// `rx <- rx + h (f(rx; theta_hat) + u)`, one rounding per component.
    pub fn receiver_step(&self, rx: &StateVec, u: &ControlSignal, cs: &ControllerState, sat: &mut SatCounter) -> StateVec {
        let n = self.field.numer(rx, &cs.adapt_accum, true);
        let fmt = self.fmt();
        std::array::from_fn(|i| {
            let inc = self.field.round(n[i] + self.field.h_numer(u[i].0 as i64));
            fmt.saturate(rx[i].0 as i128 + inc, sat)
        })
    }

    /// One system sample: consumes the received vector, advances the receiver
    /// and returns the error measured before the update.
    pub fn step(&self, cs: &mut ControllerState, received: &StateVec, sat: &mut SatCounter) -> StateVec {
        let rx = cs.receiver;
        let e = sync_error(received, &rx, &self.fmt(), sat);
        let u = self.control_with(received, &e, &rx, cs, sat);
        let next = self.receiver_step(&rx, &u, cs, sat);
        self.adapt_step(&e, received, cs);
        cs.receiver = next;
        e
    }
}

#[derive(Debug, Clone)]
pub struct SyncRun {
    pub errors: Vec<StateVec>,
    pub state: ControllerState,
    pub saturations: u64,
}

/// Free transmitter driving the receiver through an ideal channel for `n` steps.
pub fn run_unmodulated(sync: &Synchronizer, tx0: StateVec, rx0: StateVec, n: usize) -> SyncRun {
    let theta_q = theta_to_q(&sync.params.theta);
    let mut sat = SatCounter::new();
    let mut cs = sync.init_state(rx0);
    let mut w = tx0;
    let mut errors = Vec::with_capacity(n);
    for _ in 0..n {
        errors.push(sync.step(&mut cs, &w, &mut sat));
        w = sync.field.euler_step(&w, &theta_q, &mut sat);
    }
    SyncRun { errors, state: cs, saturations: sat.events }
}

/// First index after which every component stays within `±tol`.
pub fn settling_time(trace: &[StateVec], tol: i32) -> Result<usize, NotSettled> {
    let idx = match trace.iter().rposition(|e| e.iter().any(|v| v.0.abs() > tol)) {
        None => 0,
        Some(i) => i + 1,
    };
    if idx >= trace.len() && !trace.is_empty() {
        return Err(NotSettled);
    }
    Ok(idx)
}

pub fn write_error_csv<W: Write>(w: W, trace: &[StateVec]) -> Result<(), SyncError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["step", "e1", "e2", "e3"])?;
    for (n, e) in trace.iter().enumerate() {
        wr.write_record([n.to_string(), e[0].0.to_string(), e[1].0.to_string(), e[2].0.to_string()])?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Real-arithmetic counterpart of [`Synchronizer`], in analog units.
#[derive(Debug, Clone)]
pub struct RefLoop {
    pub params: DynamicsParams,
    pub k: [f64; 3],
    pub gamma: Vec<f64>,
    pub h: f64,
    pub tx: RealState,
    pub rx: RealState,
    pub theta_hat: Vec<f64>,
}

impl RefLoop {
    pub fn new(sync: &Synchronizer, tx0: RealState, rx0: RealState) -> Self {
        let p = &sync.params;
        let scale = sync.fmt().scale as f64;
        let theta_hat = (0..p.n_params()).map(|i| if p.known[i] { p.theta[i] } else { sync.cfg.theta0[i] }).collect();
        Self {
            params: p.clone(),
            k: sync.gains.raw().map(|k| k as f64 / scale),
            gamma: sync.cfg.gamma.clone(),
            h: sync.field.h,
            tx: tx0,
            rx: rx0,
            theta_hat,
        }
    }

    pub fn error(&self) -> RealState {
        std::array::from_fn(|i| self.rx[i] - self.tx[i])
    }

    /// `V = e.e/2 + sum(theta_err^2 / gamma)/2` over adapted parameters.
    pub fn lyapunov(&self) -> f64 {
        let e = self.error();
        let ve: f64 = e.iter().map(|v| v * v).sum::<f64>() / 2.0;
        let vt: f64 = (0..self.params.n_params())
            .filter(|&p| !self.params.known[p])
            .map(|p| (self.theta_hat[p] - self.params.theta[p]).powi(2) / self.gamma[p])
            .sum::<f64>()
            / 2.0;
        ve + vt
    }

    pub fn step(&mut self) {
        let p = &self.params;
        let e = self.error();
        let fr = p.derivative_with(&self.tx, &self.theta_hat);
        let fs = p.derivative_with(&self.rx, &self.theta_hat);
        let u: RealState = std::array::from_fn(|i| fr[i] - fs[i] - self.k[i] * e[i]);
        let phi = p.regressor(&self.tx);
        let tx_next = p.euler_step_ref(&self.tx, self.h);
        for i in 0..3 {
            self.rx[i] += self.h * (fs[i] + u[i]);
        }
        for (q, row) in phi.iter().enumerate() {
            if !p.known[q] {
                self.theta_hat[q] -= self.h * self.gamma[q] * (0..3).map(|i| row[i] * e[i]).sum::<f64>();
            }
        }
        self.tx = tx_next;
    }
}
