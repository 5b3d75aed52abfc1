use chaoslink::fxp::{BitWord, FxpError, FxpFormat, FxpSample, SatCounter};
use proptest::prelude::*;

fn fmt() -> FxpFormat {
    FxpFormat::default()
}

/// Independent encoder: sign flag then the magnitude as a 15-digit binary string.
fn encode_oracle(raw: i32) -> String {
    format!("{}{:015b}", if raw >= 0 { '1' } else { '0' }, raw.unsigned_abs())
}

#[test]
fn initial_condition_words() {
    let f = fmt();
    for (raw, word) in [(1032, "1000010000001000"), (-3107, "0000110000100011"), (0, "1000000000000000")] {
        assert_eq!(f.to_bitword(FxpSample(raw)).to_string(), word);
        assert_eq!(f.from_bitword(&word.parse().unwrap()).unwrap(), FxpSample(raw));
    }
}

#[test]
fn decoder_edge_words() {
    let f = fmt();
    let dec = |s: &str| f.from_bitword(&s.parse::<BitWord>().unwrap());
    assert_eq!(dec("0000000000000000").unwrap(), FxpSample(0));
    assert_eq!(dec("1111111111111111").unwrap(), FxpSample(32767));
    assert_eq!(dec("0111111111111111").unwrap(), FxpSample(-32767));
    assert_eq!(dec("101").unwrap_err(), FxpError::WrongLength { got: 3, expected: 16 });
    assert_eq!("10x".parse::<BitWord>().unwrap_err(), FxpError::BadChar('x'));
}

#[test]
fn scalar_examples() {
    let f = fmt();
    let mut sat = SatCounter::new();
    assert_eq!(f.quantize(100.0, &mut sat), FxpSample(32767));
    assert_eq!(f.quantize(-100.0, &mut sat), FxpSample(-32767));
    assert_eq!(sat.events, 2);
    assert_eq!(f.dequantize(FxpSample(-3107)), -1.0);
    assert_eq!(f.dequantize(FxpSample(1032)), 1032.0 / 3107.0);
    assert_eq!(f.sat_add(FxpSample(32000), FxpSample(1000), &mut sat), FxpSample(32767));
    assert_eq!(f.sat_add(FxpSample(-32000), FxpSample(-1000), &mut sat), FxpSample(-32767));
    assert_eq!(f.sat_add(FxpSample(1032), FxpSample(-1032), &mut sat), FxpSample(0));
    assert_eq!(f.mul_scaled(FxpSample(3107), FxpSample(3107), &mut sat), FxpSample(3107));
    assert_eq!(f.mul_scaled(FxpSample(6214), FxpSample(-3107), &mut sat), FxpSample(-6214));
    assert_eq!(sat.events, 4);
}

#[test]
fn invalid_formats_rejected() {
    assert!(FxpFormat::new(1, 3107).is_err());
    assert!(FxpFormat::new(16, 0).is_err());
    assert_eq!(FxpFormat::new(8, 31).unwrap().max_raw(), 127);
}

proptest! {
    #[test]
    fn bitword_matches_oracle_and_round_trips(raw in -32767i32..=32767) {
        let f = fmt();
        let w = f.to_bitword(FxpSample(raw));
        prop_assert_eq!(w.to_string(), encode_oracle(raw));
        prop_assert_eq!(f.from_bitword(&w).unwrap(), FxpSample(raw));
    }

    #[test]
    fn quantization_error_at_most_half_count(v in -10.54f64..10.54) {
        let f = fmt();
        let mut sat = SatCounter::new();
        let q = f.quantize(v, &mut sat);
        prop_assert_eq!(sat.events, 0);
        // One rounding ulp of slack for the final subtraction in f64.
        prop_assert!((f.dequantize(q) - v).abs() <= 0.5 / 3107.0 + 1e-15);
    }

    #[test]
    fn sat_add_monotone_and_in_range(a in -32767i32..=32767, b in -32767i32..=32767, d in 0i32..2000) {
        let f = fmt();
        let mut sat = SatCounter::new();
        let a2 = (a + d).min(32767);
        let lo = f.sat_add(FxpSample(a), FxpSample(b), &mut sat);
        let hi = f.sat_add(FxpSample(a2), FxpSample(b), &mut sat);
        prop_assert!(lo <= hi);
        prop_assert!(hi.0.abs() <= 32767);
        prop_assert_eq!(f.sat_add(FxpSample(a), FxpSample(b), &mut sat), f.sat_add(FxpSample(b), FxpSample(a), &mut sat));
    }

    #[test]
    fn mul_scaled_matches_float_oracle(a in -32767i32..=32767, b in -32767i32..=32767) {
        let f = fmt();
        let mut sat = SatCounter::new();
        // |a b| < 2^31 is exact in f64 and an odd scale never produces a tie.
        let want = ((a as f64 * b as f64) / 3107.0).round().clamp(-32767.0, 32767.0) as i32;
        prop_assert_eq!(f.mul_scaled(FxpSample(a), FxpSample(b), &mut sat), FxpSample(want));
    }

    #[test]
    fn saturation_counted_exactly_when_clipped(a in -32767i32..=32767, b in -32767i32..=32767) {
        let f = fmt();
        let mut sat = SatCounter::new();
        f.sat_add(FxpSample(a), FxpSample(b), &mut sat);
        prop_assert_eq!(sat.events, u64::from((a + b).abs() > 32767));
    }
}
