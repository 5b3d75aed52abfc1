use chaoslink::channel::{awgn_apply, derive_sigma, reference_sigma, Binding, ChannelConfig, ChannelMode, NoiseModel, SigmaRule};
use chaoslink::fxp::{FxpFormat, FxpSample, SatCounter};

const N: usize = 1_000_000;

/// Sample mean, variance and excess kurtosis.
fn moments(x: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    (mean, m2, m4 / (m2 * m2) - 3.0)
}

#[test]
fn raw_draws_are_gaussian() {
    let sigma = 1.5;
    let mut nm = NoiseModel::new(sigma, 2024, Binding::Ebn0);
    let x: Vec<f64> = (0..N).map(|_| nm.draw()).collect();
    let (mean, var, kurt) = moments(&x);
    println!("mean {mean:.2e}, var/target {:.4}, excess kurtosis {kurt:.4}", var / (sigma * sigma));
    assert!((var / (sigma * sigma) - 1.0).abs() <= 0.01);
    assert!(kurt.abs() <= 0.05);
    assert!(mean.abs() <= 3.0 * sigma / (N as f64).sqrt());
}

#[test]
fn channel_noise_statistics_after_requantization() {
    let fmt = FxpFormat::default();
    let mut sat = SatCounter::new();
    let sigma = 0.5;
    let input: Vec<_> = (0..N).map(|k| FxpSample((k as i32 % 4001) - 2000)).collect();
    let out = awgn_apply(&input, &mut NoiseModel::new(sigma, 77, Binding::Ebn0), &fmt, &mut sat);
    assert_eq!(sat.events, 0);
    let diff: Vec<f64> = out.iter().zip(&input).map(|(o, i)| fmt.dequantize(*o) - fmt.dequantize(*i)).collect();
    let (mean, var, kurt) = moments(&diff);
    // Requantization adds a uniform error of variance 1/(12 s^2), about 1e-8.
    assert!((var / (sigma * sigma) - 1.0).abs() <= 0.01, "var {var}");
    assert!(kurt.abs() <= 0.05);
    assert!(mean.abs() <= 3.0 * sigma / (N as f64).sqrt());
}

#[test]
fn ideal_mode_is_exact_passthrough() {
    let fmt = FxpFormat::default();
    let mut sat = SatCounter::new();
    let all: Vec<_> = (-32767..=32767).map(FxpSample).collect();
    let mut nm = reference_sigma(&ChannelConfig::ideal()).unwrap();
    assert_eq!(awgn_apply(&all, &mut nm, &fmt, &mut sat), all);
    let mut nm = derive_sigma(&ChannelConfig::ideal(), 1.0).unwrap();
    assert_eq!(awgn_apply(&all, &mut nm, &fmt, &mut sat), all);
    assert_eq!(sat.events, 0);
}

#[test]
fn identical_seed_identical_output() {
    let fmt = FxpFormat::default();
    let mut sat = SatCounter::new();
    let input = vec![FxpSample(-1234); 10_000];
    let cfg = ChannelConfig { mode: ChannelMode::Awgn, ebn0_db: 10.0, noise_power_dbm: 20.0, seed: 5, ..ChannelConfig::ideal() };
    let a = awgn_apply(&input, &mut reference_sigma(&cfg).unwrap(), &fmt, &mut sat);
    let b = awgn_apply(&input, &mut reference_sigma(&cfg).unwrap(), &fmt, &mut sat);
    assert_eq!(a, b);
}

#[test]
fn sigma_rules() {
    let cfg = ChannelConfig {
        mode: ChannelMode::Awgn,
        ebn0_db: 20.0,
        noise_power_dbm: 30.0,
        bit_rate_hz: 1e6,
        system_rate_hz: 4.5e8,
        ..ChannelConfig::ideal()
    };
    // (1e-6 / 100) * (4.5e8 / 2) = 2.25
    assert!((reference_sigma(&cfg).unwrap().sigma.powi(2) - 2.25).abs() < 1e-12);
    let floor = ChannelConfig { rule: SigmaRule::MeasuredFloor, ebn0_db: 60.0, ..cfg };
    let nm = derive_sigma(&floor, 1.0).unwrap();
    assert_eq!(nm.binding, Binding::Floor);
    assert!((nm.sigma.powi(2) - 1.0).abs() < 1e-12);
    let bad_rate = ChannelConfig { bit_rate_hz: 0.0, ..cfg };
    assert!(reference_sigma(&bad_rate).is_err());
}
