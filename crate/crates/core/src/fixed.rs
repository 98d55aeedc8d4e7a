//! Dynamic fixed-point formats.
//!
//! A [`QFormat`] is a signed two's-complement width plus a fraction length.
//! The real value of a raw code is `raw * 2^-frac_bits`, so every format is a
//! power-of-two scale and conversions between formats are pure shifts.
//! Fraction lengths are allowed to be negative or to exceed `total_bits - 1`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest fraction length any format may carry.
pub const MIN_FRAC_BITS: i32 = -64;
/// Largest fraction length any format may carry.
pub const MAX_FRAC_BITS: i32 = 64;

/// Signed dynamic fixed-point format descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QFormat {
    total_bits: u8,
    frac_bits: i32,
}

impl QFormat {
    pub fn new(total_bits: u8, frac_bits: i32) -> Result<Self> {
        if !matches!(total_bits, 8 | 16 | 32) {
            return Err(Error::Format(format!("total_bits must be 8, 16 or 32, got {total_bits}")));
        }
        if !(MIN_FRAC_BITS..=MAX_FRAC_BITS).contains(&frac_bits) {
            return Err(Error::Format(format!(
                "frac_bits {frac_bits} outside [{MIN_FRAC_BITS}, {MAX_FRAC_BITS}]"
            )));
        }
        Ok(Self { total_bits, frac_bits })
    }

    /// 8-bit parameter format.
    pub fn q8(frac_bits: i32) -> Result<Self> {
        Self::new(8, frac_bits)
    }

    /// 16-bit feature-map format.
    pub fn q16(frac_bits: i32) -> Result<Self> {
        Self::new(16, frac_bits)
    }

    pub fn total_bits(&self) -> u8 {
        self.total_bits
    }

    pub fn frac_bits(&self) -> i32 {
        self.frac_bits
    }

    pub fn min_raw(&self) -> i64 {
        -(1i64 << (self.total_bits - 1))
    }

    pub fn max_raw(&self) -> i64 {
        (1i64 << (self.total_bits - 1)) - 1
    }

    /// Value of one least-significant bit.
    pub fn step(&self) -> f64 {
        pow2(-self.frac_bits)
    }

    /// Largest representable magnitude on the positive side.
    pub fn max_value(&self) -> f64 {
        self.max_raw() as f64 * self.step()
    }

    /// Rounds `x * 2^frac_bits` half away from zero and saturates to the raw
    /// range. NaN maps to zero.
    pub fn quantize(&self, x: f64) -> i64 {
        if x.is_nan() {
            return 0;
        }
        let scaled = (x * pow2(self.frac_bits)).round();
        if scaled >= self.max_raw() as f64 {
            self.max_raw()
        } else if scaled <= self.min_raw() as f64 {
            self.min_raw()
        } else {
            scaled as i64
        }
    }

    /// True when `round(x * 2^frac_bits)` falls outside the raw range.
    pub fn saturates(&self, x: f64) -> bool {
        let scaled = (x * pow2(self.frac_bits)).round();
        scaled > self.max_raw() as f64 || scaled < self.min_raw() as f64
    }

    pub fn dequantize(&self, raw: i64) -> Result<f64> {
        if raw < self.min_raw() || raw > self.max_raw() {
            return Err(Error::RawOutOfRange { raw, bits: self.total_bits });
        }
        Ok(self.to_real(raw))
    }

    /// Unchecked dequantization for raws already known to be in range.
    #[inline]
    pub fn to_real(&self, raw: i64) -> f64 {
        raw as f64 * pow2(-self.frac_bits)
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}.{}", self.total_bits, self.frac_bits)
    }
}

/// Exact `2^e` for the exponent range formats use.
#[inline]
pub fn pow2(e: i32) -> f64 {
    f64::powi(2.0, e)
}

/// Free-function form of [`QFormat::quantize`].
pub fn quantize_value(x: f64, fmt: QFormat) -> i64 {
    fmt.quantize(x)
}

/// Free-function form of [`QFormat::dequantize`].
pub fn dequantize(raw: i64, fmt: QFormat) -> Result<f64> {
    fmt.dequantize(raw)
}

/// Moves an integer held at scale `2^-from_frac` to scale `2^-to_frac`.
///
/// Widening is an exact left shift; narrowing is an arithmetic right shift
/// rounding half away from zero. Results that leave the `i64` range are
/// clamped, which is only reachable through absurd shift distances.
pub fn rescale(value: i64, from_frac: i32, to_frac: i32) -> i64 {
    let shift = to_frac - from_frac;
    if value == 0 || shift == 0 {
        return value;
    }
    if shift > 0 {
        if shift >= 63 {
            return if value > 0 { i64::MAX } else { i64::MIN };
        }
        let wide = (value as i128) << shift;
        return wide.clamp(i64::MIN as i128, i64::MAX as i128) as i64;
    }
    let d = (-shift) as u32;
    if d > 120 {
        return 0;
    }
    let mag = (value as i128).unsigned_abs();
    let rounded = ((mag + (1u128 << (d - 1))) >> d) as i128;
    (if value < 0 { -rounded } else { rounded }) as i64
}

#[inline]
pub fn saturate_i16(v: i64) -> i16 {
    v.clamp(i16::MIN as i64, i16::MAX as i64) as i16
}
