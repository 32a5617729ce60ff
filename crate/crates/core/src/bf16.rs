//! Bit-exact bfloat16 values.
//!
//! A [`Bf16`] is a raw 16-bit pattern: 1 sign bit, 8 exponent bits and 7
//! mantissa bits. Equality and hashing are bitwise, so two NaNs with different
//! payloads are different values and `+0 != -0`. All conversions from wider
//! formats round to nearest with ties to even.

use std::fmt;

use serde::{Deserialize, Serialize};

/// A bfloat16 value compared by bit pattern.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Bf16(u16);

impl Bf16 {
    pub const ZERO: Bf16 = Bf16(0x0000);
    pub const NEG_ZERO: Bf16 = Bf16(0x8000);
    pub const ONE: Bf16 = Bf16(0x3F80);
    pub const INFINITY: Bf16 = Bf16(0x7F80);
    pub const NEG_INFINITY: Bf16 = Bf16(0xFF80);
    /// Canonical quiet NaN: positive sign, mantissa MSB set, zero payload.
    pub const NAN: Bf16 = Bf16(0x7FC0);
    /// Smallest positive subnormal, 2^-133.
    pub const MIN_POSITIVE_SUBNORMAL: Bf16 = Bf16(0x0001);
    /// Largest finite value.
    pub const MAX: Bf16 = Bf16(0x7F7F);

    pub const fn from_bits(bits: u16) -> Self {
        Bf16(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    pub fn to_le_bytes(self) -> [u8; 2] {
        self.0.to_le_bytes()
    }

    pub fn from_le_bytes(bytes: [u8; 2]) -> Self {
        Bf16(u16::from_le_bytes(bytes))
    }

    /// Rounds an `f64` to the nearest bfloat16, ties to even.
    ///
    /// Values beyond the finite range saturate to the signed infinity and any
    /// NaN maps to [`Bf16::NAN`].
    pub fn from_f64(x: f64) -> Self {
        if x.is_nan() {
            return Self::NAN;
        }
        // Narrow to f32 with round-to-odd, then round-to-nearest-even into
        // 16 bits. Round-to-odd with 16 spare bits makes the second rounding
        // produce the correctly rounded result.
        Self::from_f32_bits(f64_to_f32_round_odd(x).to_bits())
    }

    /// Rounds an `f32` to the nearest bfloat16, ties to even.
    pub fn from_f32(x: f32) -> Self {
        if x.is_nan() {
            return Self::NAN;
        }
        Self::from_f32_bits(x.to_bits())
    }

    fn from_f32_bits(bits: u32) -> Self {
        let lsb = (bits >> 16) & 1;
        let rounded = bits.wrapping_add(0x7FFF + lsb);
        Bf16((rounded >> 16) as u16)
    }

    /// Exact widening conversion.
    pub fn to_f32(self) -> f32 {
        f32::from_bits((self.0 as u32) << 16)
    }

    /// Exact widening conversion.
    pub fn to_f64(self) -> f64 {
        self.to_f32() as f64
    }

    pub fn is_nan(self) -> bool {
        (self.0 & 0x7F80) == 0x7F80 && (self.0 & 0x007F) != 0
    }

    pub fn is_finite(self) -> bool {
        (self.0 & 0x7F80) != 0x7F80
    }

    pub fn abs(self) -> Self {
        Bf16(self.0 & 0x7FFF)
    }

    /// Distance to the next representable value away from zero, i.e. the
    /// spacing of the BF16 grid at this magnitude. `None` for non-finite
    /// values.
    pub fn gap_above(self) -> Option<f64> {
        if !self.is_finite() {
            return None;
        }
        let mag = self.abs();
        let next = Bf16(mag.0 + 1);
        Some(next.to_f64() - mag.to_f64())
    }
}

/// Converts to f32 truncating toward zero and setting the lowest mantissa bit
/// when the conversion was inexact.
fn f64_to_f32_round_odd(x: f64) -> f32 {
    if x.is_infinite() || x == 0.0 {
        return x as f32;
    }
    let mut f = x as f32;
    if f.is_infinite() {
        f = f32::MAX.copysign(x as f32);
    } else if (f as f64).abs() > x.abs() {
        // step one ulp toward zero
        f = f32::from_bits(f.to_bits() - 1);
    }
    if f as f64 != x {
        f = f32::from_bits(f.to_bits() | 1);
    }
    f
}

/// Rounds a wide real to BF16, round-to-nearest ties-to-even.
pub fn round_to_bf16(x: f64) -> Bf16 {
    Bf16::from_f64(x)
}

impl fmt::Debug for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bf16({:#06x} = {})", self.0, self.to_f32())
    }
}

impl fmt::Display for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

impl From<Bf16> for f64 {
    fn from(v: Bf16) -> f64 {
        v.to_f64()
    }
}
