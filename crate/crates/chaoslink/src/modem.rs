//! Chaotic masking of the transmitter's z channel, the edge-counting bit
//! demodulator and exponential-smoothing waveform recovery.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fxp::{FxpFormat, FxpSample, SatCounter};

#[derive(Debug, Error)]
pub enum ModemError {
    #[error("signal frequency {freq_hz} Hz exceeds its sampling rate {rate_hz} Hz")]
    FreqAboveRate { freq_hz: f64, rate_hz: f64 },
    #[error("source rate {rate_hz} Hz exceeds the system rate {system_rate_hz} Hz")]
    RateAboveSystem { rate_hz: f64, system_rate_hz: f64 },
    #[error("invalid signal parameter: {0}")]
    BadParam(String),
    #[error("detector delay {delay} is shorter than the settling time {settling}")]
    Unsettled { delay: usize, settling: usize },
    #[error("invalid detector config: {0}")]
    BadDetector(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Additive masking: `wz + m`, saturating.
pub fn modulate(wz: FxpSample, info: FxpSample, fmt: &FxpFormat, sat: &mut SatCounter) -> FxpSample {
    fmt.sat_add(wz, info, sat)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    Bitstream,
    Waveform,
}

/// An information signal: source-rate samples, each held for `hold` system samples.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoSignal {
    pub kind: SignalKind,
    pub source: Vec<f64>,
    pub rate_hz: f64,
    pub hold: usize,
    pub resolution_bits: u32,
    pub amplitude: f64,
}

impl InfoSignal {
    /// Value at system sample `n` (zero past the end).
    pub fn at(&self, n: usize) -> f64 {
        self.source.get(n / self.hold).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.source.len() * self.hold
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

/// Quantize `v` in `[-amplitude, amplitude]` to a symmetric grid of `bits` bits.
pub fn quantize_level(v: f64, amplitude: f64, bits: u32) -> f64 {
    if amplitude == 0.0 {
        return 0.0;
    }
    if bits == 1 {
        return if v >= 0.0 { amplitude } else { -amplitude };
    }
    let n = ((1u64 << (bits - 1)) - 1) as f64;
    (v / amplitude * n).round_ties_even().clamp(-n, n) * amplitude / n
}

/// Zero-phase sine sampled at `rate_hz`, quantized to `resolution_bits` and
/// sample-and-held up to `system_rate_hz`, covering `n_system` samples.
pub fn make_sine(
    freq_hz: f64,
    amplitude: f64,
    resolution_bits: u32,
    rate_hz: f64,
    system_rate_hz: f64,
    n_system: usize,
) -> Result<InfoSignal, ModemError> {
    if !(freq_hz >= 0.0 && rate_hz > 0.0 && amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(ModemError::BadParam(format!("freq={freq_hz}, rate={rate_hz}, amplitude={amplitude}")));
    }
    if !(1..=32).contains(&resolution_bits) {
        return Err(ModemError::BadParam(format!("resolution_bits={resolution_bits}")));
    }
    if freq_hz > rate_hz {
        return Err(ModemError::FreqAboveRate { freq_hz, rate_hz });
    }
    if rate_hz > system_rate_hz {
        return Err(ModemError::RateAboveSystem { rate_hz, system_rate_hz });
    }
    let ratio = system_rate_hz / rate_hz;
    let hold = ratio.round() as usize;
    if (ratio - hold as f64).abs() > 1e-9 {
        return Err(ModemError::BadParam(format!("system rate is not an integer multiple of {rate_hz} Hz")));
    }
    let n_src = n_system.div_ceil(hold);
    let w = 2.0 * std::f64::consts::PI * freq_hz / rate_hz;
    let source = (0..n_src)
        .map(|k| quantize_level(amplitude * (w * k as f64).sin(), amplitude, resolution_bits))
        .collect();
    Ok(InfoSignal { kind: SignalKind::Waveform, source, rate_hz, hold, resolution_bits, amplitude })
}

/// Bipolar bit signal: `+amplitude` for 1, `-amplitude` for 0, each bit held
/// `bit_period` samples, after `preamble` samples idling at the 0 level.
pub fn bit_signal(bits: &[u8], amplitude: f64, bit_period: usize, preamble: usize, system_rate_hz: f64) -> InfoSignal {
    // A held signal with hold = 1 keeps `at` trivial for arbitrary preambles.
    let mut source = Vec::with_capacity(preamble + bits.len() * bit_period);
    source.extend(std::iter::repeat_n(-amplitude, preamble));
    for &b in bits {
        let v = if b != 0 { amplitude } else { -amplitude };
        source.extend(std::iter::repeat_n(v, bit_period));
    }
    InfoSignal {
        kind: SignalKind::Bitstream,
        source,
        rate_hz: system_rate_hz / bit_period as f64,
        hold: 1,
        resolution_bits: 1,
        amplitude,
    }
}

/// Inverse of the loop's z-channel response `-(s + b) / (s + k)`: turns the
/// error transient back into a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equalizer {
    pub k: f64,
    pub b: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub delay_d: usize,
    pub a_threshold: f64,
    pub refractory: usize,
    /// Half-length of the edge detector's window pair; 1 is a plain difference.
    pub window: usize,
    /// Re-arm once the edge statistic drops below `a_threshold * rearm_ratio`.
    pub rearm_ratio: f64,
    pub initial_parity: u8,
    pub equalizer: Option<Equalizer>,
    /// Sign of the edge statistic on a 0 -> 1 transition. When set, F1 only
    /// accepts edges alternating in sign, since transitions of a binary
    /// signal alternate in direction; an edge repeating the previous
    /// direction cannot be a transition.
    pub edge_polarity: Option<f64>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            delay_d: 0,
            a_threshold: 0.5,
            refractory: 225,
            window: 300,
            rearm_ratio: 0.5,
            initial_parity: 0,
            equalizer: None,
            edge_polarity: None,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), ModemError> {
        if !(self.a_threshold > 0.0) {
            return Err(ModemError::BadDetector(format!("a_threshold = {}", self.a_threshold)));
        }
        if self.refractory < 1 || self.window < 1 {
            return Err(ModemError::BadDetector("refractory and window must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rearm_ratio) {
            return Err(ModemError::BadDetector(format!("rearm_ratio = {}", self.rearm_ratio)));
        }
        if self.initial_parity > 1 {
            return Err(ModemError::BadDetector("initial_parity must be 0 or 1".into()));
        }
        if self.edge_polarity.is_some_and(|p| p != 1.0 && p != -1.0) {
            return Err(ModemError::BadDetector("edge_polarity must be 1 or -1".into()));
        }
        Ok(())
    }

    /// Samples between a transition and the centre of the edge statistic's response.
    pub fn group_delay(&self) -> usize {
        self.window / 2
    }
}

/// Delay D plus 10% margin over a measured settling time.
pub fn calibrate_delay(settling: usize) -> usize {
    settling + settling.div_ceil(10)
}

/// Streaming state of the edge detector (F1) and mod-2 decision (E_c, M, F2).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    pub edge_count: u64,
    pub holdoff: usize,
    pub last_bit: u8,
    pub memory: u8,
    armed: bool,
    /// Sign of the last accepted edge.
    last_sign: f64,
    seen: usize,
    eq_v: f64,
    window: VecDeque<f64>,
    sum_new: f64,
    sum_old: f64,
}

impl DetectorState {
    pub fn new(cfg: &DetectorConfig) -> Self {
        Self {
            edge_count: cfg.initial_parity as u64,
            holdoff: 0,
            last_bit: cfg.initial_parity,
            memory: cfg.initial_parity,
            armed: true,
            // The level implied by the initial parity was reached by the
            // opposite transition.
            last_sign: cfg.edge_polarity.map_or(0.0, |p| if cfg.initial_parity == 1 { p } else { -p }),
            seen: 0,
            eq_v: 0.0,
            window: VecDeque::with_capacity(2 * cfg.window),
            sum_new: 0.0,
            sum_old: 0.0,
        }
    }
}

/// E_c / M / F2: count the pulse, emit the parity registered on the previous sample.
pub fn decide_bit(pulse: bool, st: &mut DetectorState) -> u8 {
    if pulse {
        st.edge_count += 1;
    }
    let out = st.memory;
    st.memory = (st.edge_count % 2) as u8;
    st.last_bit = out;
    out
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub st: DetectorState,
    pub fmt: FxpFormat,
}

impl Detector {
    pub fn new(cfg: DetectorConfig, fmt: FxpFormat) -> Result<Self, ModemError> {
        cfg.validate()?;
        let st = DetectorState::new(&cfg);
        Ok(Self { cfg, st, fmt })
    }

    /// Edge statistic: half the difference between the means of the newest
    /// and the preceding `window` samples (of the equalized error).
    fn edge_stat(&mut self, e3: FxpSample) -> Option<f64> {
        let mut x = self.fmt.dequantize(e3);
        if let Some(eq) = self.cfg.equalizer {
            let v = self.st.eq_v;
            self.st.eq_v = v + eq.h * (x - eq.b * v);
            x += (eq.k - eq.b) * v;
        }
        let l = self.cfg.window;
        let st = &mut self.st;
        st.window.push_back(x);
        st.sum_new += x;
        if st.window.len() > l {
            let mid = st.window[st.window.len() - 1 - l];
            st.sum_new -= mid;
            st.sum_old += mid;
        }
        if st.window.len() > 2 * l {
            st.sum_old -= st.window.pop_front().expect("nonempty");
        }
        (st.window.len() == 2 * l).then(|| (st.sum_new - st.sum_old) / (2 * l) as f64)
    }

    /// F1 on the edge statistic `y`.
    fn trigger(&mut self, y: f64) -> bool {
        let thr = self.cfg.a_threshold;
        let above = y.abs() > thr;
        let st = &mut self.st;
        if st.holdoff > 0 {
            st.holdoff -= 1;
        }
        let mut pulse = false;
        let direction_ok = self.cfg.edge_polarity.is_none() || y.signum() != st.last_sign;
        if above && st.armed && st.holdoff == 0 && direction_ok {
            pulse = true;
            st.holdoff = self.cfg.refractory;
            st.last_sign = y.signum();
        }
        if y.abs() < thr * self.cfg.rearm_ratio {
            st.armed = true;
        }
        if above {
            st.armed = false;
        }
        pulse
    }

    /// Process one raw sample; returns `(pulse, bit)`. The filters run on
    /// every sample; edges are only marked from `delay_d` on.
    pub fn push(&mut self, e3: FxpSample) -> (bool, u8) {
        let n = self.st.seen;
        self.st.seen += 1;
        let y = self.edge_stat(e3);
        if n < self.cfg.delay_d {
            return (false, self.st.last_bit);
        }
        let pulse = y.is_some_and(|y| self.trigger(y));
        (pulse, decide_bit(pulse, &mut self.st))
    }
}

/// F1 alone over a stream; returns the pulse train.
pub fn detect_edges(e3: &[FxpSample], cfg: &DetectorConfig, fmt: FxpFormat) -> Result<Vec<bool>, ModemError> {
    let mut d = Detector::new(cfg.clone(), fmt)?;
    Ok(e3.iter().map(|&s| d.push(s).0).collect())
}

/// Full demodulator: the message starts at `delay_d`; each bit is read at its
/// midpoint, shifted by the edge statistic's group delay.
pub fn demodulate_bits(
    e3: &[FxpSample],
    cfg: &DetectorConfig,
    bit_period: usize,
    n_bits: usize,
    settling: usize,
    fmt: FxpFormat,
) -> Result<Vec<u8>, ModemError> {
    if cfg.delay_d < settling {
        return Err(ModemError::Unsettled { delay: cfg.delay_d, settling });
    }
    if bit_period == 0 {
        return Err(ModemError::BadParam("bit_period = 0".into()));
    }
    let mut d = Detector::new(cfg.clone(), fmt)?;
    let decisions: Vec<u8> = e3.iter().map(|&s| d.push(s).1).collect();
    let offset = bit_period / 2 + cfg.group_delay();
    // Sampling instants past the end of the stream hold the last decision.
    let out = (0..n_bits)
        .map(|k| decisions.get(cfg.delay_d + k * bit_period + offset).copied().unwrap_or(d.st.last_bit))
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmootherConfig {
    pub alpha: f64,
    pub gain: f64,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        // e3 carries the information with inverted sign.
        Self { alpha: 0.01, gain: -1.0 }
    }
}

/// `y_n = alpha x_n + (1 - alpha) y_(n-1)`, scaled by `gain`, from `delay_d` on.
pub fn recover_waveform(e3: &[FxpSample], cfg: &SmootherConfig, delay_d: usize, fmt: &FxpFormat) -> Result<Vec<f64>, ModemError> {
    if !(cfg.alpha > 0.0 && cfg.alpha <= 1.0) {
        return Err(ModemError::BadParam(format!("alpha = {}", cfg.alpha)));
    }
    let mut y = 0.0;
    Ok(e3
        .iter()
        .skip(delay_d)
        .map(|&s| {
            y = cfg.alpha * fmt.dequantize(s) + (1.0 - cfg.alpha) * y;
            cfg.gain * y
        })
        .collect())
}

/// Least-squares gain mapping `recovered` onto `reference`.
pub fn fit_gain(recovered: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = recovered.iter().zip(reference).map(|(r, o)| r * o).sum();
    let den: f64 = recovered.iter().map(|r| r * r).sum();
    if den > 0.0 {
        num / den
    } else {
        1.0
    }
}

pub fn rms_error(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()).max(1);
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64).sqrt()
}

pub fn rms(a: &[f64]) -> f64 {
    (a.iter().map(|x| x * x).sum::<f64>() / a.len().max(1) as f64).sqrt()
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let sab: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let saa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let sbb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    sab / (saa * sbb).sqrt()
}

pub fn write_bits<W: Write>(mut w: W, bits: &[u8]) -> std::io::Result<()> {
    let s: String = bits.iter().map(|&b| if b != 0 { '1' } else { '0' }).collect();
    writeln!(w, "{s}")
}

pub fn write_waveform_csv<W: Write>(w: W, recovered: &[f64], original: &[f64]) -> Result<(), ModemError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["step", "recovered", "original"])?;
    for (n, (r, o)) in recovered.iter().zip(original).enumerate() {
        // `+ 0.0` folds negative zero so it prints as "0".
        wr.write_record([n.to_string(), (r + 0.0).to_string(), (o + 0.0).to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmt() -> FxpFormat {
        FxpFormat::default()
    }

    fn plain(refractory: usize) -> DetectorConfig {
        DetectorConfig { window: 1, refractory, ..DetectorConfig::default() }
    }

    #[test]
    fn modulate_examples() {
        let mut sat = SatCounter::new();
        assert_eq!(modulate(FxpSample(777), FxpSample(0), &fmt(), &mut sat), FxpSample(777));
        let m = fmt().quantize(0.5, &mut sat);
        assert_eq!(modulate(FxpSample(0), m, &fmt(), &mut sat), FxpSample(1554));
    }

    #[test]
    fn constant_error_gives_no_pulses() {
        let s = vec![FxpSample(5000); 2000];
        let p = detect_edges(&s, &plain(450), fmt()).unwrap();
        assert!(p.iter().all(|&x| !x));
    }

    #[test]
    fn burst_collapses_to_one_pulse() {
        let mut s = vec![FxpSample(0); 1000];
        for v in &mut s[100..103] {
            *v = FxpSample(6000);
        }
        let p = detect_edges(&s, &plain(450), fmt()).unwrap();
        assert_eq!(p.iter().filter(|&&x| x).count(), 1);
    }

    #[test]
    fn decide_bit_parity() {
        let mut st = DetectorState::new(&DetectorConfig::default());
        assert_eq!(decide_bit(false, &mut st), 0);
        assert_eq!(decide_bit(true, &mut st), 0); // M delays by one sample
        assert_eq!(decide_bit(false, &mut st), 1);
        assert_eq!(decide_bit(true, &mut st), 1);
        assert_eq!(decide_bit(false, &mut st), 0);
        assert_eq!(st.edge_count, 2);
    }

    #[test]
    fn initial_parity_is_respected() {
        let cfg = DetectorConfig { initial_parity: 1, ..DetectorConfig::default() };
        let mut st = DetectorState::new(&cfg);
        assert_eq!(decide_bit(false, &mut st), 1);
    }

    #[test]
    fn delay_gates_detection() {
        let mut s = vec![FxpSample(0); 400];
        for v in &mut s[100..] {
            *v = FxpSample(6000);
        }
        let cfg = DetectorConfig { delay_d: 200, ..plain(10) };
        assert!(detect_edges(&s, &cfg, fmt()).unwrap().iter().all(|&x| !x));
    }

    #[test]
    fn unsettled_delay_is_rejected() {
        let cfg = DetectorConfig { delay_d: 10, ..DetectorConfig::default() };
        assert!(matches!(
            demodulate_bits(&[], &cfg, 450, 0, 11, fmt()),
            Err(ModemError::Unsettled { delay: 10, settling: 11 })
        ));
    }

    #[test]
    fn ideal_steps_demodulate() {
        // Direct bipolar steps (no loop): e3 = -m.
        let bits = [1u8, 1, 0, 1, 0, 0, 0, 1, 1, 0];
        let sig = bit_signal(&bits, 1.0, 450, 1000, 450e6);
        let mut sat = SatCounter::new();
        let e3: Vec<_> = (0..sig.len()).map(|n| fmt().quantize(-sig.at(n), &mut sat)).collect();
        let cfg = DetectorConfig { delay_d: 1000, ..DetectorConfig::default() };
        let out = demodulate_bits(&e3, &cfg, 450, bits.len(), 0, fmt()).unwrap();
        assert_eq!(out, bits);
    }

    #[test]
    fn sine_basics() {
        let s = make_sine(50e3, 0.5, 16, 4.5e6, 450e6, 18_000).unwrap();
        assert_eq!(s.at(0), 0.0);
        assert_eq!(s.hold, 100);
        assert_eq!(s.source.len(), 180);
        assert_eq!(s.source[0..90], s.source[90..180]);
        assert_eq!(s.at(99), s.at(0));
        assert_ne!(s.at(100), s.at(0));
        assert!(make_sine(5e6, 0.5, 16, 4.5e6, 450e6, 10).is_err());
        let one = make_sine(50e3, 0.5, 1, 4.5e6, 450e6, 9000).unwrap();
        assert!(one.source.iter().all(|&v| v == 0.5 || v == -0.5));
    }

    #[test]
    fn smoother_identity_and_convergence() {
        let e: Vec<_> = [3107, -1554, 42].map(FxpSample).to_vec();
        let id = recover_waveform(&e, &SmootherConfig { alpha: 1.0, gain: 1.0 }, 0, &fmt()).unwrap();
        assert_eq!(id, vec![1.0, -1554.0 / 3107.0, 42.0 / 3107.0]);
        let c = vec![FxpSample(3107); 3000];
        let y = recover_waveform(&c, &SmootherConfig { alpha: 0.01, gain: 2.0 }, 0, &fmt()).unwrap();
        // 1 - 0.99^n after n samples
        assert!((y[2999] - 2.0 * (1.0 - 0.99f64.powi(3000))).abs() < 1e-12);
        assert!(recover_waveform(&c, &SmootherConfig { alpha: 0.0, gain: 1.0 }, 0, &fmt()).is_err());
    }

    #[test]
    fn bit_dump_format() {
        let mut buf = Vec::new();
        write_bits(&mut buf, &[0, 1, 1, 0]).unwrap();
        assert_eq!(buf, b"0110\n");
    }
}
