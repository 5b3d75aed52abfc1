//! Additive white Gaussian noise channel parameterized by Eb/N0 and a dBm
//! power level.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::StateVec;
use crate::fxp::{FxpFormat, FxpSample, SatCounter};

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("signal power must be positive, got {0}")]
    NonPositivePower(f64),
    #[error("invalid channel rate: bit_rate={bit_rate_hz}, system_rate={system_rate_hz}")]
    BadRate { bit_rate_hz: f64, system_rate_hz: f64 },
    #[error("derived noise sigma must be positive in awgn mode, got {0}")]
    ZeroSigma(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    Ideal,
    Awgn,
}

/// How Eb/N0 and the dBm figure combine into a noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaRule {
    /// The dBm figure is the reference signal power Eb/N0 is quoted against.
    Reference,
    /// Eb/N0 against the measured signal power, floored at the dBm noise power.
    MeasuredFloor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub ebn0_db: f64,
    pub noise_power_dbm: f64,
    pub bit_rate_hz: f64,
    pub system_rate_hz: f64,
    pub seed: u64,
    pub mode: ChannelMode,
    pub rule: SigmaRule,
}

impl ChannelConfig {
    pub fn ideal() -> Self {
        Self {
            ebn0_db: f64::INFINITY,
            noise_power_dbm: f64::NEG_INFINITY,
            bit_rate_hz: 1e6,
            system_rate_hz: 450e6,
            seed: 0,
            mode: ChannelMode::Ideal,
            rule: SigmaRule::Reference,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    None,
    Ebn0,
    Floor,
}

impl fmt::Display for Binding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Binding::None => "none",
            Binding::Ebn0 => "ebn0",
            Binding::Floor => "floor",
        })
    }
}

/// 10^((p - 30) / 10): dBm to watts, with 1 analog unit^2 taken as 1 W.
pub fn dbm_to_power(p_dbm: f64) -> f64 {
    10f64.powf((p_dbm - 30.0) / 10.0)
}

/// Variance from Eb/N0 against signal power `p`: `(p / Rb) / 10^(ebn0/10) * fs / 2`.
fn ebn0_variance(p: f64, cfg: &ChannelConfig) -> f64 {
    p / cfg.bit_rate_hz / 10f64.powf(cfg.ebn0_db / 10.0) * cfg.system_rate_hz / 2.0
}

#[derive(Debug, Clone)]
pub struct NoiseModel {
    pub sigma: f64,
    pub binding: Binding,
    rng: ChaCha8Rng,
}

impl NoiseModel {
    pub fn new(sigma: f64, seed: u64, binding: Binding) -> Self {
        Self { sigma, binding, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn draw(&mut self) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        self.sigma * z
    }

    pub fn apply(&mut self, s: FxpSample, fmt: &FxpFormat, sat: &mut SatCounter) -> FxpSample {
        if self.sigma == 0.0 {
            return s;
        }
        let v = fmt.dequantize(s) + self.draw();
        fmt.quantize(v, sat)
    }

    /// Noise on all three transmitted components.
    pub fn apply_vec(&mut self, s: &StateVec, fmt: &FxpFormat, sat: &mut SatCounter) -> StateVec {
        std::array::from_fn(|i| self.apply(s[i], fmt, sat))
    }
}

fn check_rates(cfg: &ChannelConfig) -> Result<(), ChannelError> {
    if !(cfg.bit_rate_hz > 0.0 && cfg.system_rate_hz > 0.0) {
        return Err(ChannelError::BadRate { bit_rate_hz: cfg.bit_rate_hz, system_rate_hz: cfg.system_rate_hz });
    }
    Ok(())
}

/// Eb/N0 sets the variance against the measured signal power; the dBm noise
/// power acts as a floor.
pub fn derive_sigma(cfg: &ChannelConfig, measured_signal_power: f64) -> Result<NoiseModel, ChannelError> {
    if !(measured_signal_power > 0.0) {
        return Err(ChannelError::NonPositivePower(measured_signal_power));
    }
    check_rates(cfg)?;
    if cfg.mode == ChannelMode::Ideal {
        return Ok(NoiseModel::new(0.0, cfg.seed, Binding::None));
    }
    let from_ebn0 = ebn0_variance(measured_signal_power, cfg);
    let floor = dbm_to_power(cfg.noise_power_dbm);
    let (var, binding) = if floor > from_ebn0 { (floor, Binding::Floor) } else { (from_ebn0, Binding::Ebn0) };
    finish(var.sqrt(), cfg, binding)
}

/// Eb/N0 quoted against a reference signal power of `noise_power_dbm`.
pub fn reference_sigma(cfg: &ChannelConfig) -> Result<NoiseModel, ChannelError> {
    check_rates(cfg)?;
    if cfg.mode == ChannelMode::Ideal {
        return Ok(NoiseModel::new(0.0, cfg.seed, Binding::None));
    }
    let var = ebn0_variance(dbm_to_power(cfg.noise_power_dbm), cfg);
    finish(var.sqrt(), cfg, Binding::Ebn0)
}

fn finish(sigma: f64, cfg: &ChannelConfig, binding: Binding) -> Result<NoiseModel, ChannelError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(ChannelError::ZeroSigma(sigma));
    }
    Ok(NoiseModel::new(sigma, cfg.seed, binding))
}

pub fn noise_model(cfg: &ChannelConfig, measured_signal_power: f64) -> Result<NoiseModel, ChannelError> {
    match cfg.rule {
        SigmaRule::Reference => reference_sigma(cfg),
        SigmaRule::MeasuredFloor => derive_sigma(cfg, measured_signal_power),
    }
}

pub fn awgn_apply(stream: &[FxpSample], nm: &mut NoiseModel, fmt: &FxpFormat, sat: &mut SatCounter) -> Vec<FxpSample> {
    stream.iter().map(|&s| nm.apply(s, fmt, sat)).collect()
}
