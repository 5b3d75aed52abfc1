//! Fixed-point arithmetic: quantization, saturating ops and the sign-magnitude
//! bit-word codec used for on-link samples.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FxpError {
    #[error("invalid format: word_bits={word_bits}, scale={scale}")]
    InvalidFormat { word_bits: u32, scale: i64 },
    #[error("bit word has {got} bits, expected {expected}")]
    WrongLength { got: usize, expected: usize },
    #[error("bit word contains non-binary character {0:?}")]
    BadChar(char),
}

/// Word length and scaling factor of a fixed-point signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FxpFormat {
    pub word_bits: u32,
    pub scale: i64,
}

impl Default for FxpFormat {
    fn default() -> Self {
        Self { word_bits: 16, scale: 3107 }
    }
}

/// A raw fixed-point count. Always within the symmetric range of its format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct FxpSample(pub i32);

impl FxpSample {
    pub const ZERO: FxpSample = FxpSample(0);

    pub fn raw(self) -> i32 {
        self.0
    }
}

/// Counts saturation events within one simulation context.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SatCounter {
    pub events: u64,
}

impl SatCounter {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Round half to even on an exact rational `num / den` (`den > 0`).
pub fn div_round_even(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
    }
}

impl FxpFormat {
    pub fn new(word_bits: u32, scale: i64) -> Result<Self, FxpError> {
        if !(2..=32).contains(&word_bits) || scale < 1 {
            return Err(FxpError::InvalidFormat { word_bits, scale });
        }
        Ok(Self { word_bits, scale })
    }

    /// Largest representable magnitude, 2^(word_bits-1) - 1.
    pub fn max_raw(&self) -> i64 {
        (1i64 << (self.word_bits - 1)) - 1
    }

    pub fn max_value(&self) -> f64 {
        self.max_raw() as f64 / self.scale as f64
    }

    /// Clamp a wide count into range, recording a saturation event if clipped.
    pub fn saturate(&self, raw: i128, sat: &mut SatCounter) -> FxpSample {
        let m = self.max_raw() as i128;
        if raw > m {
            sat.events += 1;
            FxpSample(m as i32)
        } else if raw < -m {
            sat.events += 1;
            FxpSample(-m as i32)
        } else {
            FxpSample(raw as i32)
        }
    }

    pub fn quantize(&self, value: f64, sat: &mut SatCounter) -> FxpSample {
        debug_assert!(value.is_finite());
        let scaled = value * self.scale as f64;
        let m = self.max_raw() as f64;
        if scaled > m {
            sat.events += 1;
            return FxpSample(m as i32);
        }
        if scaled < -m {
            sat.events += 1;
            return FxpSample(-m as i32);
        }
        FxpSample(scaled.round_ties_even() as i32)
    }

    pub fn dequantize(&self, s: FxpSample) -> f64 {
        s.0 as f64 / self.scale as f64
    }

    pub fn sat_add(&self, a: FxpSample, b: FxpSample, sat: &mut SatCounter) -> FxpSample {
        self.saturate(a.0 as i128 + b.0 as i128, sat)
    }

    pub fn sat_sub(&self, a: FxpSample, b: FxpSample, sat: &mut SatCounter) -> FxpSample {
        self.saturate(a.0 as i128 - b.0 as i128, sat)
    }

    /// Product of two scaled values, rescaled by 1/scale with a single rounding.
    pub fn mul_scaled(&self, a: FxpSample, b: FxpSample, sat: &mut SatCounter) -> FxpSample {
        let p = a.0 as i128 * b.0 as i128;
        self.saturate(div_round_even(p, self.scale as i128), sat)
    }

    pub fn to_bitword(&self, s: FxpSample) -> BitWord {
        let n = self.word_bits as usize;
        let mag = s.0.unsigned_abs();
        let mut bits = Vec::with_capacity(n);
        bits.push(s.0 >= 0);
        for i in (0..n - 1).rev() {
            bits.push((mag >> i) & 1 == 1);
        }
        BitWord { bits }
    }

    pub fn from_bitword(&self, b: &BitWord) -> Result<FxpSample, FxpError> {
        let n = self.word_bits as usize;
        if b.bits.len() != n {
            return Err(FxpError::WrongLength { got: b.bits.len(), expected: n });
        }
        let mag = b.bits[1..].iter().fold(0i64, |acc, &bit| (acc << 1) | bit as i64);
        // All-ones magnitude (2^(n-1)-1) is the largest code, so no clamp needed.
        let raw = if b.bits[0] { mag } else { -mag };
        Ok(FxpSample(raw as i32))
    }
}

/// Sign-magnitude word, MSB first. The MSB is 1 for non-negative values.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitWord {
    pub bits: Vec<bool>,
}

impl fmt::Display for BitWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for BitWord {
    type Err = FxpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(FxpError::BadChar(other)),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BitWord { bits })
    }
}
