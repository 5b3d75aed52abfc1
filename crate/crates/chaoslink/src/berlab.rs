//! End-to-end link assembly and the Monte Carlo BER harness.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptsync::{run_unmodulated, settling_time, ControllerGains, NotSettled, SyncConfig, SyncError, Synchronizer};
use crate::channel::{noise_model, Binding, ChannelConfig, ChannelError, ChannelMode, NoiseModel, SigmaRule};
use crate::dynamics::{default_system, theta_to_q, DynamicsParams, IntegratorConfig, StateVec};
use crate::fxp::{FxpFormat, FxpSample, SatCounter};
use crate::modem::{
    bit_signal, calibrate_delay, correlation, demodulate_bits, fit_gain, make_sine, modulate, recover_waveform, rms, rms_error,
    DetectorConfig, Equalizer, ModemError, SmootherConfig,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum BerError {
    #[error("bit count must be positive")]
    ZeroBits,
    #[error("invalid sweep config: {0}")]
    BadSweep(String),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Modem(#[from] ModemError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("config serialization: {0}")]
    Echo(#[from] toml::ser::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BerError + '_ {
    move |source| BerError::Io { path: path.to_path_buf(), source }
}

/// Every setting of the transmitter, receiver and detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub fmt: FxpFormat,
    pub integrator: IntegratorConfig,
    pub dynamics: DynamicsParams,
    pub gains: [i32; 3],
    pub sync: SyncConfig,
    pub tx0: [i32; 3],
    pub rx0: [i32; 3],
    pub settle_tol: i32,
    /// Length of the unmodulated calibration run.
    pub calib_steps: usize,
    /// Derive the detector delay from the calibration run.
    pub auto_delay: bool,
    pub detector: DetectorConfig,
    pub bit_period: usize,
    pub bit_amplitude: f64,
    pub sigma_rule: SigmaRule,
}

/// Equalizer matching the z-channel error response of `p` under gain `k3`
/// (raw counts), if the z equation has a linear self-term.
pub fn loop_equalizer(p: &DynamicsParams, k3: i32, fmt: &FxpFormat, h: f64) -> Option<Equalizer> {
    let b: f64 = -p
        .terms
        .iter()
        .filter(|t| t.eq == 2 && t.exp == [0, 0, 1])
        .map(|t| t.coef * t.param.map_or(1.0, |i| p.theta[i]))
        .sum::<f64>();
    let k = k3 as f64 / fmt.scale as f64;
    (b > 0.0 && b < k).then_some(Equalizer { k, b, h })
}

impl Default for LinkConfig {
    fn default() -> Self {
        let fmt = FxpFormat::default();
        let integrator = IntegratorConfig::default();
        let dynamics = default_system();
        let gains = ControllerGains::standard(&fmt).raw();
        let bit_period = 450;
        let detector = DetectorConfig {
            refractory: bit_period / 2,
            equalizer: loop_equalizer(&dynamics, gains[2], &fmt, integrator.h),
            // e3 carries the message inverted, so a rising bit edge pulls the statistic down.
            edge_polarity: Some(-1.0),
            ..DetectorConfig::default()
        };
        Self {
            sync: SyncConfig::for_params(&dynamics),
            fmt,
            integrator,
            dynamics,
            gains,
            tx0: [1032, -3107, 0],
            rx0: [0, -4660, 1553],
            settle_tol: 10,
            calib_steps: 400_000,
            auto_delay: true,
            detector,
            bit_period,
            bit_amplitude: 1.0,
            sigma_rule: SigmaRule::Reference,
        }
    }
}

/// A calibrated link: receiver, settling time and detector delay.
#[derive(Debug, Clone)]
pub struct Link {
    pub cfg: LinkConfig,
    pub sync: Synchronizer,
    pub settling: Result<usize, NotSettled>,
    pub detector: DetectorConfig,
    pub signal_power: f64,
}

#[derive(Debug, Clone)]
pub struct LinkRun {
    pub e3: Vec<FxpSample>,
    pub errors_tail: StateVec,
    pub theta_hat: Vec<f64>,
    pub saturations: u64,
}

impl Link {
    pub fn new(cfg: LinkConfig) -> Result<Self, BerError> {
        let gains = ControllerGains::new(cfg.gains[0], cfg.gains[1], cfg.gains[2])?;
        let sync = Synchronizer::new(&cfg.dynamics, cfg.fmt, &cfg.integrator, gains, cfg.sync.clone())?;
        cfg.detector.validate()?;
        let calib = run_unmodulated(&sync, cfg.tx0.map(FxpSample), cfg.rx0.map(FxpSample), cfg.calib_steps);
        let settling = settling_time(&calib.errors, cfg.settle_tol);
        let mut detector = cfg.detector.clone();
        if cfg.auto_delay {
            detector.delay_d = calibrate_delay(*settling.as_ref().unwrap_or(&cfg.calib_steps));
        }
        let signal_power = free_run_power(&sync, cfg.tx0.map(FxpSample), cfg.calib_steps);
        Ok(Self { cfg, sync, settling, detector, signal_power })
    }

    pub fn fmt(&self) -> FxpFormat {
        self.cfg.fmt
    }

    pub fn bit_rate_hz(&self) -> f64 {
        self.cfg.integrator.system_rate_hz / self.cfg.bit_period as f64
    }

    /// Transmit `info(n)` (analog, masked onto z) through `noise` for `n` samples.
    pub fn run(&self, info: impl Fn(usize) -> f64, n: usize, mut noise: Option<&mut NoiseModel>) -> LinkRun {
        let fmt = self.fmt();
        let theta_q = theta_to_q(&self.cfg.dynamics.theta);
        let mut sat = SatCounter::new();
        let mut cs = self.sync.init_state(self.cfg.rx0.map(FxpSample));
        let mut w = self.cfg.tx0.map(FxpSample);
        let mut e3 = Vec::with_capacity(n);
        let mut last = [FxpSample::ZERO; 3];
        for k in 0..n {
            let m = fmt.quantize(info(k), &mut sat);
            let tx = [w[0], w[1], modulate(w[2], m, &fmt, &mut sat)];
            let r = match noise.as_deref_mut() {
                Some(nm) => nm.apply_vec(&tx, &fmt, &mut sat),
                None => tx,
            };
            last = self.sync.step(&mut cs, &r, &mut sat);
            e3.push(last[2]);
            w = self.sync.field.euler_step(&w, &theta_q, &mut sat);
        }
        LinkRun { e3, errors_tail: last, theta_hat: cs.theta_hat(), saturations: sat.events }
    }

    /// Channel for one grid cell; cells whose noise variance is zero under the
    /// configured rule (infinite Eb/N0 and/or no noise power) are ideal.
    pub fn channel(&self, ebn0_db: f64, noise_dbm: f64, seed: u64) -> ChannelConfig {
        let (no_ebn0, no_floor) = (ebn0_db == f64::INFINITY, noise_dbm == f64::NEG_INFINITY);
        let silent = match self.cfg.sigma_rule {
            SigmaRule::Reference => no_ebn0 || no_floor,
            SigmaRule::MeasuredFloor => no_ebn0 && no_floor,
        };
        ChannelConfig {
            ebn0_db,
            noise_power_dbm: noise_dbm,
            bit_rate_hz: self.bit_rate_hz(),
            system_rate_hz: self.cfg.integrator.system_rate_hz,
            seed,
            mode: if silent { ChannelMode::Ideal } else { ChannelMode::Awgn },
            rule: self.cfg.sigma_rule,
        }
    }
}

/// Mean per-component power of the free-running transmitter (analog units).
fn free_run_power(sync: &Synchronizer, tx0: StateVec, n: usize) -> f64 {
    let fmt = sync.fmt();
    let t = sync.field.simulate(tx0, &sync.params.theta, n.max(1));
    let sum: f64 = t.states.iter().flat_map(|s| s.iter()).map(|&v| fmt.dequantize(v).powi(2)).sum();
    sum / (3 * t.states.len()) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialOutcome {
    pub errors: u64,
    pub bits: u64,
    pub invalid: bool,
    pub binding: Binding,
}

/// Modulate, add noise, synchronize and demodulate one message.
pub fn run_trial(link: &Link, channel: &ChannelConfig, message: &[u8]) -> Result<TrialOutcome, BerError> {
    let binding = match channel.mode {
        ChannelMode::Ideal => Binding::None,
        ChannelMode::Awgn => noise_model(channel, link.signal_power)?.binding,
    };
    let Ok(settling) = link.settling else {
        return Ok(TrialOutcome { errors: 0, bits: 0, invalid: true, binding });
    };
    let bits = recover_message(link, channel, message, settling)?;
    let errors = bits.iter().zip(message).filter(|(a, b)| a != b).count() as u64;
    Ok(TrialOutcome { errors, bits: message.len() as u64, invalid: false, binding })
}

/// The bits the receiver recovers for `message` sent through `channel`.
pub fn recover_message(link: &Link, channel: &ChannelConfig, message: &[u8], settling: usize) -> Result<Vec<u8>, BerError> {
    let mut noise = match channel.mode {
        ChannelMode::Ideal => None,
        ChannelMode::Awgn => Some(noise_model(channel, link.signal_power)?),
    };
    let d = link.detector.delay_d;
    let t = link.cfg.bit_period;
    let info = bit_signal(message, link.cfg.bit_amplitude, t, d, link.cfg.integrator.system_rate_hz);
    let n = d + message.len() * t;
    let run = link.run(|k| info.at(k), n, noise.as_mut());
    Ok(demodulate_bits(&run.e3, &link.detector, t, message.len(), settling, link.fmt())?)
}

/// A sine transmitted after the detector delay, recovered by exponential
/// smoothing. The first `training` samples are known to the receiver and
/// fix the output gain by least squares; metrics cover the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformConfig {
    pub freq_hz: f64,
    pub amplitude: f64,
    pub resolution_bits: u32,
    pub rate_hz: f64,
    pub samples: usize,
    pub training: usize,
    pub smoother: SmootherConfig,
}

impl Default for WaveformConfig {
    fn default() -> Self {
        Self {
            freq_hz: 50e3,
            amplitude: 0.5,
            resolution_bits: 16,
            rate_hz: 450e6,
            samples: 200_000,
            training: 40_000,
            smoother: SmootherConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveformResult {
    /// Gain-corrected recovery, one value per sample after the delay.
    pub recovered: Vec<f64>,
    /// The information signal as transmitted.
    pub original: Vec<f64>,
    pub gain: f64,
    pub rms_error: f64,
    pub correlation: f64,
    /// RMS of the unit-magnitude-gain recovery over RMS of the original.
    pub amplitude_ratio: f64,
}

pub fn run_waveform(link: &Link, wc: &WaveformConfig) -> Result<WaveformResult, BerError> {
    if wc.training >= wc.samples {
        return Err(BerError::BadSweep(format!("training {} must be shorter than samples {}", wc.training, wc.samples)));
    }
    if link.settling.is_err() {
        return Err(BerError::Modem(ModemError::Unsettled { delay: link.detector.delay_d, settling: link.cfg.calib_steps }));
    }
    let d = link.detector.delay_d;
    let sys = link.cfg.integrator.system_rate_hz;
    let sine = make_sine(wc.freq_hz, wc.amplitude, wc.resolution_bits, wc.rate_hz, sys, wc.samples)?;
    let run = link.run(|k| if k < d { 0.0 } else { sine.at(k - d) }, d + wc.samples, None);
    let unit = SmootherConfig { gain: 1.0, ..wc.smoother };
    let raw = recover_waveform(&run.e3, &unit, d, &link.fmt())?;
    let original: Vec<f64> = (0..wc.samples).map(|k| sine.at(k)).collect();
    let t = wc.training;
    let gain = if t > 0 { fit_gain(&raw[..t], &original[..t]) } else { wc.smoother.gain };
    let recovered: Vec<f64> = raw.iter().map(|v| v * gain).collect();
    let (rec, orig) = (&recovered[t..], &original[t..]);
    let orig_rms = rms(orig);
    Ok(WaveformResult {
        rms_error: rms_error(rec, orig),
        correlation: correlation(rec, orig),
        amplitude_ratio: if orig_rms > 0.0 { rms(&raw[t..]) / orig_rms } else { 0.0 },
        recovered,
        original,
        gain,
    })
}

pub fn compute_ber(errors: u64, bits: u64) -> Result<f64, BerError> {
    if bits == 0 {
        return Err(BerError::ZeroBits);
    }
    Ok(errors as f64 / bits as f64)
}

/// SplitMix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one work unit: SplitMix64 chained over
/// `(master, noise index, ebn0 index, trial, stream)`.
pub fn cell_seed(master: u64, noise_idx: usize, ebn0_idx: usize, trial: usize, stream: u64) -> u64 {
    [noise_idx as u64, ebn0_idx as u64, trial as u64, stream].iter().fold(splitmix(master), |acc, &v| splitmix(acc ^ v))
}

pub fn random_message(seed: u64, n: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..2u8)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub ebn0_grid: Vec<f64>,
    pub noise_powers_dbm: Vec<f64>,
    pub bits_per_trial: usize,
    pub trials_per_point: usize,
    pub master_seed: u64,
    pub link: LinkConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ebn0_grid: (0..=35).map(f64::from).collect(),
            noise_powers_dbm: vec![10.0, 20.0, 30.0, 40.0],
            bits_per_trial: 2000,
            trials_per_point: 1,
            master_seed: 1,
            link: LinkConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), BerError> {
        if self.bits_per_trial < 100 {
            return Err(BerError::BadSweep(format!("bits_per_trial = {} < 100", self.bits_per_trial)));
        }
        if self.trials_per_point == 0 {
            return Err(BerError::BadSweep("trials_per_point = 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerPoint {
    pub ebn0_db: f64,
    pub noise_dbm: f64,
    pub bits: u64,
    pub errors: u64,
    pub ber: f64,
    pub invalid_trials: u64,
    pub binding_constraint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BerReport {
    pub points: Vec<BerPoint>,
    pub settling: Option<usize>,
    pub delay_d: usize,
    /// Header lines (without the comment marker) echoing the resolved config.
    pub echo: Vec<String>,
}

impl BerReport {
    /// Points of one noise level, in ascending Eb/N0.
    pub fn curve(&self, noise_dbm: f64) -> Vec<&BerPoint> {
        self.points.iter().filter(|p| p.noise_dbm == noise_dbm).collect()
    }
}

pub fn sweep(cfg: &SweepConfig) -> Result<BerReport, BerError> {
    cfg.validate()?;
    let link = Link::new(cfg.link.clone())?;
    let units: Vec<(usize, usize, usize)> = (0..cfg.noise_powers_dbm.len())
        .flat_map(|a| (0..cfg.ebn0_grid.len()).flat_map(move |b| (0..cfg.trials_per_point).map(move |t| (a, b, t))))
        .collect();
    let outcomes: Vec<TrialOutcome> = units
        .par_iter()
        .map(|&(a, b, t)| {
            let msg = random_message(cell_seed(cfg.master_seed, a, b, t, 0), cfg.bits_per_trial);
            let ch = link.channel(cfg.ebn0_grid[b], cfg.noise_powers_dbm[a], cell_seed(cfg.master_seed, a, b, t, 1));
            run_trial(&link, &ch, &msg)
        })
        .collect::<Result<_, _>>()?;
    let mut points = Vec::new();
    for (chunk, &(a, b, _)) in outcomes.chunks(cfg.trials_per_point).zip(units.iter().step_by(cfg.trials_per_point)) {
        let bits: u64 = chunk.iter().map(|o| o.bits).sum();
        let errors: u64 = chunk.iter().map(|o| o.errors).sum();
        points.push(BerPoint {
            ebn0_db: cfg.ebn0_grid[b],
            noise_dbm: cfg.noise_powers_dbm[a],
            bits,
            errors,
            ber: if bits > 0 { compute_ber(errors, bits)? } else { 0.0 },
            invalid_trials: chunk.iter().filter(|o| o.invalid).count() as u64,
            binding_constraint: chunk[0].binding.to_string(),
        });
    }
    points.sort_by(|p, q| p.noise_dbm.total_cmp(&q.noise_dbm).then(p.ebn0_db.total_cmp(&q.ebn0_db)));
    let mut echo = vec![format!("chaoslink {VERSION} bersweep")];
    match link.settling {
        Ok(s) => echo.push(format!("settling_steps = {s}")),
        Err(_) => echo.push("settling_steps = none".into()),
    }
    echo.push(format!("delay_d = {}", link.detector.delay_d));
    echo.extend(toml::to_string(cfg)?.lines().map(str::to_owned));
    Ok(BerReport { points, settling: link.settling.ok(), delay_d: link.detector.delay_d, echo })
}

pub const CSV_HEADER: &str = "ebn0_db,noise_dbm,bits,errors,ber,invalid_trials,binding_constraint";

pub fn write_report_to<W: Write>(r: &BerReport, mut w: W) -> std::io::Result<()> {
    for line in &r.echo {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "{CSV_HEADER}")?;
    for p in &r.points {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            p.ebn0_db, p.noise_dbm, p.bits, p.errors, p.ber, p.invalid_trials, p.binding_constraint
        )?;
    }
    w.flush()
}

pub fn write_report(r: &BerReport, path: &Path) -> Result<(), BerError> {
    let f = File::create(path).map_err(io_err(path))?;
    write_report_to(r, BufWriter::new(f)).map_err(io_err(path))
}

pub fn read_report(path: &Path) -> Result<Vec<BerPoint>, BerError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut data = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        if !line.starts_with('#') {
            data.push_str(&line);
            data.push('\n');
        }
    }
    let mut rd = csv::Reader::from_reader(data.as_bytes());
    rd.deserialize()
        .collect::<Result<Vec<BerPoint>, _>>()
        .map_err(|e| BerError::Parse { path: path.to_path_buf(), msg: e.to_string() })
}

/// BER vs Eb/N0 on a log axis, one polyline per noise level. Zero-BER
/// points are drawn at the axis floor.
pub fn write_svg(r: &BerReport, path: &Path) -> Result<(), BerError> {
    let (w, h, m) = (640.0, 420.0, 50.0);
    let floor = -5.0_f64;
    let xs: Vec<f64> = r.points.iter().map(|p| p.ebn0_db).filter(|x| x.is_finite()).collect();
    let (x0, x1) = xs.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |x: f64| m + (x - x0) / span * (w - 2.0 * m);
    let py = |ber: f64| {
        let l = if ber > 0.0 { ber.log10().max(floor) } else { floor };
        m + (-l) / (-floor) * (h - 2.0 * m)
    };
    let colors = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];
    let mut levels: Vec<f64> = r.points.iter().map(|p| p.noise_dbm).collect();
    levels.dedup();
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\" font-size=\"12\">Eb/N0 (dB)</text>\n\
         <text x=\"12\" y=\"{cy}\" font-size=\"12\" transform=\"rotate(-90 12 {cy})\">BER (log10)</text>\n",
        b = h - m,
        r = w - m,
        cx = w / 2.0,
        ty = h - 12.0,
        cy = h / 2.0,
    );
    for d in 0..=(-floor as i32) {
        let y = m + d as f64 / -floor * (h - 2.0 * m);
        s += &format!("<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">-{d}</text>\n", m - 4.0, y + 3.0);
    }
    for (i, lvl) in levels.iter().enumerate() {
        let pts: Vec<String> = r
            .points
            .iter()
            .filter(|p| p.noise_dbm == *lvl && p.ebn0_db.is_finite())
            .map(|p| format!("{:.1},{:.1}", px(p.ebn0_db), py(p.ber)))
            .collect();
        let c = colors[i % colors.len()];
        s += &format!("<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\" points=\"{}\"/>\n", pts.join(" "));
        s += &format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{c}\">{lvl} dBm</text>\n",
            w - m - 60.0,
            m + 14.0 * (i as f64 + 1.0)
        );
    }
    s += "</svg>\n";
    std::fs::write(path, s).map_err(io_err(path))
}
