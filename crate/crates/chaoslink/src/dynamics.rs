//! Polynomial 3-D vector fields and the forward-Euler integrator, with a
//! bit-accurate fixed-point path and an `f64` reference path.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fxp::{div_round_even, FxpFormat, FxpSample, SatCounter};

pub type StateVec = [FxpSample; 3];
pub type RealState = [f64; 3];

/// Fractional bits of the `coefficient × h` constants.
pub(crate) const COEF_FRAC: u32 = 48;
/// Fractional bits of parameter values and adaptation integrators.
pub const THETA_FRAC: u32 = 32;
/// Fractional bits of regressor coefficients.
pub(crate) const COEF_R_FRAC: u32 = 24;
/// Magnitude limits keeping every fixed-point intermediate inside `i128`.
pub const MAX_COEF: f64 = 16.0;
pub const MAX_THETA: f64 = 64.0;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("term {0}: equation index out of range")]
    BadEquation(usize),
    #[error("term {0}: parameter index out of range")]
    BadParam(usize),
    #[error("term {0}: total degree {1} exceeds the fixed-point limit of 2")]
    DegreeTooHigh(usize, u32),
    #[error("term {0}: coefficient magnitude exceeds {MAX_COEF}")]
    CoefTooLarge(usize),
    #[error("parameter {0}: magnitude exceeds {MAX_THETA}")]
    ThetaTooLarge(usize),
    #[error("attractor bound {0} does not fit the fixed-point range")]
    BoundTooLarge(f64),
    #[error("invalid integrator config: {0}")]
    BadIntegrator(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One monomial of the vector field: `coef * theta[param] * x^a y^b z^c` in
/// equation `eq` (a parameter-free term when `param` is `None`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub eq: usize,
    pub coef: f64,
    pub param: Option<usize>,
    pub exp: [u8; 3],
}

impl Term {
    fn degree(&self) -> u32 {
        self.exp.iter().map(|&e| e as u32).sum()
    }

    fn mono(&self, s: &RealState) -> f64 {
        (0..3).map(|i| s[i].powi(self.exp[i] as i32)).product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub name: String,
    pub terms: Vec<Term>,
    pub theta: Vec<f64>,
    pub param_names: Vec<String>,
    /// Parameters the receiver is assumed to know (never adapted).
    pub known: Vec<bool>,
    pub attractor_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub h: f64,
    pub system_rate_hz: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { h: 0.001, system_rate_hz: 450e6 }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(DynamicsError::BadIntegrator(format!("h = {}", self.h)));
        }
        if !(self.system_rate_hz > 0.0 && self.system_rate_hz.is_finite()) {
            return Err(DynamicsError::BadIntegrator(format!("system_rate_hz = {}", self.system_rate_hz)));
        }
        Ok(())
    }
}

/// Lorenz system with time rescaled by `time_scale` and states divided by
/// `amp_scale`. `sigma` and `rho` are marked adaptable, `beta` known.
pub fn scaled_lorenz(sigma: f64, rho: f64, beta: f64, time_scale: f64, amp_scale: f64) -> DynamicsParams {
    let (ts, c) = (time_scale, amp_scale);
    let t = |eq, coef, param, exp| Term { eq, coef, param, exp };
    DynamicsParams {
        name: format!("lorenz(sigma={sigma},rho={rho},beta={beta:.6},time_scale={ts},amp_scale={c})"),
        terms: vec![
            t(0, 1.0, Some(0), [0, 1, 0]),
            t(0, -1.0, Some(0), [1, 0, 0]),
            t(1, 1.0, Some(1), [1, 0, 0]),
            t(1, -ts, None, [0, 1, 0]),
            t(1, -ts * c, None, [1, 0, 1]),
            t(2, ts * c, None, [1, 1, 0]),
            t(2, -1.0, Some(2), [0, 0, 1]),
        ],
        theta: vec![sigma * ts, rho * ts, beta * ts],
        param_names: vec!["sigma".into(), "rho".into(), "beta".into()],
        known: vec![false, false, true],
        // z peaks near 1.8 rho on the attractor; x and y stay well below that.
        attractor_bound: 1.85 * rho / c,
    }
}

/// The shipped default: Lorenz (10, 40, 8/3), time scale 0.6, amplitude 1/8.
///
/// At 16 bits and h = 0.001 the classic rho = 28 orbit decays into a
/// rounding-sustained cycle around an equilibrium within a few thousand
/// steps; rho = 40 keeps the foci unstable enough for the quantized map to
/// stay on a long pseudo-chaotic orbit.
pub fn default_system() -> DynamicsParams {
    scaled_lorenz(10.0, 40.0, 8.0 / 3.0, 0.6, 8.0)
}

impl DynamicsParams {
    pub fn validate(&self, fmt: &FxpFormat) -> Result<(), DynamicsError> {
        for (i, t) in self.terms.iter().enumerate() {
            if t.eq > 2 {
                return Err(DynamicsError::BadEquation(i));
            }
            if matches!(t.param, Some(p) if p >= self.theta.len()) {
                return Err(DynamicsError::BadParam(i));
            }
            if t.degree() > 2 {
                return Err(DynamicsError::DegreeTooHigh(i, t.degree()));
            }
            if !(t.coef.abs() <= MAX_COEF) {
                return Err(DynamicsError::CoefTooLarge(i));
            }
        }
        if let Some(i) = self.theta.iter().position(|t| !(t.abs() <= MAX_THETA)) {
            return Err(DynamicsError::ThetaTooLarge(i));
        }
        if self.attractor_bound * fmt.scale as f64 > fmt.max_raw() as f64 {
            return Err(DynamicsError::BoundTooLarge(self.attractor_bound));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    /// f(s; theta) for an arbitrary parameter vector.
    pub fn derivative_with(&self, s: &RealState, theta: &[f64]) -> RealState {
        let mut d = [0.0; 3];
        for t in &self.terms {
            let p = t.param.map_or(1.0, |p| theta[p]);
            d[t.eq] += t.coef * p * t.mono(s);
        }
        d
    }

    pub fn derivative(&self, s: &RealState) -> RealState {
        self.derivative_with(s, &self.theta)
    }

    /// Regressor: `f(s; theta) = phi(s) * theta + known(s)`; returned as rows per equation.
    pub fn regressor(&self, s: &RealState) -> Vec<[f64; 3]> {
        let mut phi = vec![[0.0; 3]; self.n_params()];
        for t in &self.terms {
            if let Some(p) = t.param {
                phi[p][t.eq] += t.coef * t.mono(s);
            }
        }
        phi
    }

    pub fn euler_step_ref(&self, s: &RealState, h: f64) -> RealState {
        let d = self.derivative(s);
        [s[0] + h * d[0], s[1] + h * d[1], s[2] + h * d[2]]
    }

    pub fn simulate_ref(&self, s0: RealState, h: f64, n: usize) -> Vec<RealState> {
        let mut out = Vec::with_capacity(n + 1);
        out.push(s0);
        let mut s = s0;
        for _ in 0..n {
            s = self.euler_step_ref(&s, h);
            out.push(s);
        }
        out
    }
}

#[derive(Debug, Clone)]
struct QTerm {
    eq: usize,
    param: Option<usize>,
    exp: [u8; 3],
    /// Multiplier bringing this term to the common denominator.
    pad: i128,
    coef_h: i128,
    coef: i128,
    coef_r: i128,
}

/// Fixed-point evaluation of a [`DynamicsParams`] vector field. Every
/// `coefficient × h` product is quantized once at construction; each Euler
/// step then rounds exactly once per component.
#[derive(Debug, Clone)]
pub struct FxField {
    pub fmt: FxpFormat,
    pub h: f64,
    terms: Vec<QTerm>,
    h_q: i128,
    /// `2^(COEF_FRAC+THETA_FRAC) * scale^(dmax-1)`
    den: i128,
    scale_pow: i128,
}

fn q(v: f64, frac: u32) -> i128 {
    (v * (1u128 << frac) as f64).round_ties_even() as i128
}

pub fn theta_to_q(theta: &[f64]) -> Vec<i64> {
    theta.iter().map(|&t| q(t, THETA_FRAC) as i64).collect()
}

impl FxField {
    pub fn new(p: &DynamicsParams, fmt: FxpFormat, cfg: &IntegratorConfig) -> Result<Self, DynamicsError> {
        p.validate(&fmt)?;
        cfg.validate()?;
        let dmax = p.terms.iter().map(Term::degree).max().unwrap_or(1).max(1);
        let sf = fmt.scale as i128;
        let terms = p
            .terms
            .iter()
            .map(|t| QTerm {
                eq: t.eq,
                param: t.param,
                exp: t.exp,
                // raw increment = coef*h*theta*prod(raw^e) / scale^(deg-1)
                pad: sf.pow(dmax - t.degree()),
                coef_h: q(t.coef * cfg.h, COEF_FRAC),
                coef: q(t.coef, COEF_FRAC),
                coef_r: q(t.coef, COEF_R_FRAC),
            })
            .collect();
        Ok(Self {
            fmt,
            h: cfg.h,
            terms,
            h_q: q(cfg.h, COEF_FRAC),
            den: (1i128 << (COEF_FRAC + THETA_FRAC)) * sf.pow(dmax - 1),
            scale_pow: sf.pow(dmax - 1),
        })
    }

    /// Numerators of `f(s; theta)` (times `h` if `with_h`) over [`Self::den`].
    pub(crate) fn numer(&self, s: &StateVec, theta_q: &[i64], with_h: bool) -> [i128; 3] {
        let mut acc = [0i128; 3];
        for t in &self.terms {
            let mut m: i128 = t.pad;
            for i in 0..3 {
                for _ in 0..t.exp[i] {
                    m *= s[i].0 as i128;
                }
            }
            let th = t.param.map_or(1i128 << THETA_FRAC, |p| theta_q[p] as i128);
            let c = if with_h { t.coef_h } else { t.coef };
            acc[t.eq] += c * th * m;
        }
        acc
    }

    /// Numerator of `h * u` for a raw count `u` at the signal scale.
    pub(crate) fn h_numer(&self, u: i64) -> i128 {
        self.h_q * (1i128 << THETA_FRAC) * self.scale_pow * u as i128
    }

    /// Numerators of the regressor `phi(s)` entries, one `[eq]` row per
    /// parameter, over `2^COEF_R_FRAC * scale^dmax`.
    pub(crate) fn regressor_numer(&self, s: &StateVec, n_params: usize) -> Vec<[i128; 3]> {
        let mut phi = vec![[0i128; 3]; n_params];
        for t in &self.terms {
            if let Some(p) = t.param {
                let mut m: i128 = t.pad;
                for i in 0..3 {
                    for _ in 0..t.exp[i] {
                        m *= s[i].0 as i128;
                    }
                }
                phi[p][t.eq] += t.coef_r * m;
            }
        }
        phi
    }

    pub(crate) fn scale_pow(&self) -> i128 {
        self.scale_pow
    }

    pub(crate) fn round(&self, numer: i128) -> i128 {
        div_round_even(numer, self.den)
    }

    pub fn euler_step(&self, s: &StateVec, theta_q: &[i64], sat: &mut SatCounter) -> StateVec {
        let n = self.numer(s, theta_q, true);
        std::array::from_fn(|i| self.fmt.saturate(s[i].0 as i128 + self.round(n[i]), sat))
    }

    pub fn simulate(&self, s0: StateVec, theta: &[f64], n: usize) -> Trajectory {
        let theta_q = theta_to_q(theta);
        let mut sat = SatCounter::new();
        let mut states = Vec::with_capacity(n + 1);
        states.push(s0);
        let mut s = s0;
        for _ in 0..n {
            s = self.euler_step(&s, &theta_q, &mut sat);
            states.push(s);
        }
        Trajectory { states, saturations: sat.events }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<StateVec>,
    pub saturations: u64,
}

impl Trajectory {
    pub fn write_csv<W: Write>(&self, w: W, fmt: &FxpFormat) -> Result<(), DynamicsError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["step", "x_raw", "y_raw", "z_raw", "x", "y", "z"])?;
        for (n, s) in self.states.iter().enumerate() {
            let mut rec = vec![n.to_string()];
            rec.extend(s.iter().map(|v| v.0.to_string()));
            rec.extend(s.iter().map(|&v| fmt.dequantize(v).to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Largest Lyapunov exponent (per unit of integration time) from two reference
/// trajectories started `d0` apart, renormalized every `renorm` steps.
pub fn lyapunov_estimate(p: &DynamicsParams, s0: RealState, h: f64, steps: usize, d0: f64, renorm: usize) -> f64 {
    let mut a = s0;
    let mut b = [s0[0] + d0, s0[1], s0[2]];
    let mut log_sum = 0.0;
    let mut blocks = 0usize;
    for n in 1..=steps {
        a = p.euler_step_ref(&a, h);
        b = p.euler_step_ref(&b, h);
        if n % renorm == 0 {
            let d = ((0..3).map(|i| (b[i] - a[i]).powi(2)).sum::<f64>()).sqrt();
            log_sum += (d / d0).ln();
            blocks += 1;
            for i in 0..3 {
                b[i] = a[i] + (b[i] - a[i]) * d0 / d;
            }
        }
    }
    log_sum / (blocks * renorm) as f64 / h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(v: [i32; 3]) -> StateVec {
        v.map(FxpSample)
    }

    #[test]
    fn reference_point_matches_unscaled_lorenz() {
        // Unscaled Lorenz at (8,8,8): (0, 40*8-8-64, 64-64/3) = (0, 248, 128/3);
        // rescaling multiplies by time_scale / amp_scale = 0.075.
        let d = default_system().derivative(&[1.0, 1.0, 1.0]);
        let want = [0.0, 18.6, 3.2];
        for i in 0..3 {
            assert!((d[i] - want[i]).abs() < 1e-12, "{d:?}");
        }
    }

    #[test]
    fn equilibria_have_zero_derivative() {
        let p = default_system();
        assert_eq!(p.derivative(&[0.0; 3]), [0.0; 3]);
        let (b, r, c) = (8.0 / 3.0, 40.0_f64, 8.0);
        let xe = (b * (r - 1.0)).sqrt() / c;
        let d = p.derivative(&[xe, xe, (r - 1.0) / c]);
        assert!(d.iter().all(|v| v.abs() < 1e-12), "{d:?}");
    }

    #[test]
    fn regressor_reconstructs_field() {
        let p = default_system();
        let s = [0.3, -1.2, 2.5];
        let phi = p.regressor(&s);
        let zero_theta = vec![0.0; 3];
        let known = p.derivative_with(&s, &zero_theta);
        let full = p.derivative(&s);
        for i in 0..3 {
            let lin: f64 = (0..3).map(|k| phi[k][i] * p.theta[k]).sum();
            assert!((known[i] + lin - full[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn default_fits_range() {
        let p = default_system();
        assert!(p.attractor_bound * 3107.0 <= 32767.0);
        p.validate(&FxpFormat::default()).unwrap();
    }

    #[test]
    fn rejects_cubic_terms() {
        let mut p = default_system();
        p.terms.push(Term { eq: 0, coef: 1.0, param: None, exp: [3, 0, 0] });
        assert!(matches!(p.validate(&FxpFormat::default()), Err(DynamicsError::DegreeTooHigh(7, 3))));
    }

    #[test]
    fn zero_field_is_identity() {
        let p = DynamicsParams {
            name: "zero".into(),
            terms: vec![],
            theta: vec![],
            param_names: vec![],
            known: vec![],
            attractor_bound: 1.0,
        };
        let f = FxField::new(&p, FxpFormat::default(), &IntegratorConfig::default()).unwrap();
        let s = raw([1032, -3107, 0]);
        assert_eq!(f.euler_step(&s, &[], &mut SatCounter::new()), s);
    }

    #[test]
    fn decay_single_step() {
        let p = DynamicsParams {
            name: "decay".into(),
            terms: vec![Term { eq: 0, coef: -1.0, param: None, exp: [1, 0, 0] }],
            theta: vec![],
            param_names: vec![],
            known: vec![],
            attractor_bound: 1.0,
        };
        assert_eq!(p.euler_step_ref(&[1.0, 0.0, 0.0], 0.001)[0], 0.999);
        let f = FxField::new(&p, FxpFormat::default(), &IntegratorConfig::default()).unwrap();
        // 3107 * 0.999 = 3103.893 -> 3104
        let s = f.euler_step(&raw([3107, 0, 0]), &[], &mut SatCounter::new());
        assert_eq!(s[0].0, 3104);
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let p = default_system();
        let f = FxField::new(&p, FxpFormat::default(), &IntegratorConfig::default()).unwrap();
        let t = f.simulate(raw([1032, -3107, 0]), &p.theta, 0);
        assert_eq!(t.states, vec![raw([1032, -3107, 0])]);
    }

    #[test]
    fn trajectory_csv_header() {
        let p = default_system();
        let fmt = FxpFormat::default();
        let f = FxField::new(&p, fmt, &IntegratorConfig::default()).unwrap();
        let t = f.simulate(raw([1032, -3107, 0]), &p.theta, 2);
        let mut buf = Vec::new();
        t.write_csv(&mut buf, &fmt).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,x_raw,y_raw,z_raw,x,y,z"));
        assert!(lines.next().unwrap().starts_with("0,1032,-3107,0,"));
        assert_eq!(text.lines().count(), 4);
    }
}
