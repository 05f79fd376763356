//! Software emulation of reduced floating-point formats.
//!
//! Every value in the crate is carried as an `f64`. A [`PrecisionFormat`]
//! only describes the rounding and overflow behaviour applied at operation
//! boundaries, which keeps results bit-reproducible on any host.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A floating-point format used as a precision level.
///
/// The derived ordering is the width ordering `Fp16 < Tf32 < Fp32 < Fp64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionFormat {
    Fp16,
    Tf32,
    Fp32,
    Fp64,
}

impl PrecisionFormat {
    pub const ALL: [PrecisionFormat; 4] = [Self::Fp16, Self::Tf32, Self::Fp32, Self::Fp64];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fp16 => "fp16",
            Self::Tf32 => "tf32",
            Self::Fp32 => "fp32",
            Self::Fp64 => "fp64",
        }
    }

    pub fn exponent_bits(self) -> u32 {
        match self {
            Self::Fp16 => 5,
            Self::Tf32 | Self::Fp32 => 8,
            Self::Fp64 => 11,
        }
    }

    /// Explicitly stored fraction bits (the implicit leading one is not counted).
    pub fn mantissa_bits(self) -> u32 {
        match self {
            Self::Fp16 | Self::Tf32 => 10,
            Self::Fp32 => 23,
            Self::Fp64 => 52,
        }
    }

    /// Bytes per stored element. TF32 lives in 32-bit containers.
    pub fn storage_bytes(self) -> u64 {
        match self {
            Self::Fp16 => 2,
            Self::Tf32 | Self::Fp32 => 4,
            Self::Fp64 => 8,
        }
    }

    /// Format used for running partial sums of reductions computed at `self`.
    pub fn accumulation(self) -> PrecisionFormat {
        match self {
            Self::Tf32 => Self::Fp32,
            other => other,
        }
    }

    fn max_exponent(self) -> i32 {
        (1 << (self.exponent_bits() - 1)) - 1
    }

    fn min_normal_exponent(self) -> i32 {
        1 - self.max_exponent()
    }

    /// Largest finite magnitude.
    pub fn max_finite(self) -> f64 {
        match self {
            Self::Fp16 => 65504.0,
            Self::Tf32 => (2.0 - 2f64.powi(-10)) * 2f64.powi(127),
            Self::Fp32 => f32::MAX as f64,
            Self::Fp64 => f64::MAX,
        }
    }

    /// Smallest positive normal magnitude.
    pub fn min_positive_normal(self) -> f64 {
        2f64.powi(self.min_normal_exponent())
    }

    /// Unit roundoff (half the spacing between 1 and the next value).
    pub fn unit_roundoff(self) -> f64 {
        2f64.powi(-(self.mantissa_bits() as i32) - 1)
    }
}

impl fmt::Display for PrecisionFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrecisionFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp16" => Ok(Self::Fp16),
            "tf32" => Ok(Self::Tf32),
            "fp32" => Ok(Self::Fp32),
            "fp64" => Ok(Self::Fp64),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }
}

/// Round `x` to the nearest value representable in `fmt` (ties to even).
///
/// Magnitudes beyond the format's range become infinities, values below the
/// normal range are rounded on the subnormal grid, NaN passes through.
pub fn round_to_format(x: f64, fmt: PrecisionFormat) -> f64 {
    match fmt {
        PrecisionFormat::Fp64 => return x,
        PrecisionFormat::Fp32 => return x as f32 as f64,
        _ => {}
    }
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    // Every format here has a narrower exponent range than f64 subnormals,
    // so `x` is either a normal f64 or far below the target's grid.
    let biased = ((x.to_bits() >> 52) & 0x7ff) as i32;
    let exponent = if biased == 0 { -1023 } else { biased - 1023 };
    let grid_exponent = exponent.max(fmt.min_normal_exponent()) - fmt.mantissa_bits() as i32;
    let quantum = pow2(grid_exponent);
    let rounded = (x * pow2(-grid_exponent)).round_ties_even() * quantum;
    if rounded.abs() > fmt.max_finite() {
        f64::INFINITY.copysign(x)
    } else {
        rounded
    }
}

/// `2^e` for exponents in the normal f64 range.
fn pow2(e: i32) -> f64 {
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// Round a whole slice in place.
pub fn round_slice(values: &mut [f64], fmt: PrecisionFormat) {
    if fmt == PrecisionFormat::Fp64 {
        return;
    }
    for v in values {
        *v = round_to_format(*v, fmt);
    }
}

/// Number of elements of a shape. The empty shape is a scalar.
pub fn element_count(shape: &[usize]) -> Result<u64> {
    shape.iter().try_fold(1u64, |acc, &e| {
        if e == 0 {
            return Err(Error::ZeroExtent(shape.to_vec()));
        }
        acc.checked_mul(e as u64)
            .ok_or_else(|| Error::ByteCountOverflow(shape.to_vec()))
    })
}

/// Bytes needed to store a tensor of `shape` in `fmt`.
pub fn bytes_of(shape: &[usize], fmt: PrecisionFormat) -> Result<u64> {
    element_count(shape)?
        .checked_mul(fmt.storage_bytes())
        .ok_or_else(|| Error::ByteCountOverflow(shape.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use PrecisionFormat::*;

    #[test]
    fn format_parameters() {
        let table: Vec<_> = PrecisionFormat::ALL
            .iter()
            .map(|f| (f.exponent_bits(), f.mantissa_bits(), f.storage_bytes()))
            .collect();
        assert_eq!(table, vec![(5, 10, 2), (8, 10, 4), (8, 23, 4), (11, 52, 8)]);
        assert!(Fp16 < Tf32 && Tf32 < Fp32 && Fp32 < Fp64);
        assert_eq!(Fp16.max_finite(), 65504.0);
        assert_eq!(Fp32.max_finite(), f32::MAX as f64);
        assert_eq!(Tf32.accumulation(), Fp32);
        assert_eq!(Fp16.accumulation(), Fp16);
    }

    #[test]
    fn names_round_trip() {
        for f in PrecisionFormat::ALL {
            assert_eq!(f.name().parse::<PrecisionFormat>().unwrap(), f);
            assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{}\"", f.name()));
        }
        assert!("bf16".parse::<PrecisionFormat>().is_err());
    }

    #[test]
    fn rounding_examples() {
        assert_eq!(round_to_format(1.0, Fp16), 1.0);
        assert_eq!(round_to_format(70000.0, Fp16), f64::INFINITY);
        assert_eq!(round_to_format(-70000.0, Fp16), f64::NEG_INFINITY);
        assert_eq!(round_to_format(1.0 / 3.0, Fp16), 0.333251953125);
        assert_eq!(round_to_format(1.0 / 3.0, Fp64), 1.0 / 3.0);
        assert!(round_to_format(f64::NAN, Fp16).is_nan());
        assert_eq!(round_to_format(65504.0, Fp16), 65504.0);
        // halfway between 65504 and 65536 ties to the even neighbour, which overflows
        assert_eq!(round_to_format(65520.0, Fp16), f64::INFINITY);
        assert_eq!(round_to_format(65519.99, Fp16), 65504.0);
    }

    #[test]
    fn fp16_subnormals_are_gradual() {
        let tiny = 2f64.powi(-24);
        assert_eq!(round_to_format(tiny, Fp16), tiny);
        assert_eq!(round_to_format(3.0 * tiny, Fp16), 3.0 * tiny);
        // half of the smallest subnormal ties to zero, slightly more rounds up
        assert_eq!(round_to_format(tiny / 2.0, Fp16), 0.0);
        assert_eq!(round_to_format(tiny * 0.5000001, Fp16), tiny);
        assert_eq!(round_to_format(1e-300, Fp32), 0.0);
        assert_eq!(round_to_format(1e-300, Fp64), 1e-300);
    }

    #[test]
    fn tf32_keeps_fp32_range() {
        assert_eq!(round_to_format(1e38, Tf32), round_to_format(1e38, Tf32).abs());
        assert!(round_to_format(1e38, Tf32).is_finite());
        assert_eq!(round_to_format(1.0 + 2f64.powi(-11), Tf32), 1.0);
        assert_eq!(round_to_format(1.0 + 3.0 * 2f64.powi(-11), Tf32), 1.0 + 2f64.powi(-9));
    }

    #[test]
    fn byte_counts() {
        assert_eq!(bytes_of(&[2, 3, 4], Fp64).unwrap(), 192);
        assert_eq!(bytes_of(&[500, 100_000, 9], Fp64).unwrap(), 3_600_000_000);
        assert_eq!(bytes_of(&[1], Fp16).unwrap(), 2);
        assert_eq!(bytes_of(&[], Fp32).unwrap(), 4);
        assert!(matches!(
            bytes_of(&[usize::MAX, usize::MAX], Fp64),
            Err(Error::ByteCountOverflow(_))
        ));
        assert!(matches!(bytes_of(&[usize::MAX / 2, 4], Fp64), Err(Error::ByteCountOverflow(_))));
        assert!(matches!(bytes_of(&[3, 0], Fp64), Err(Error::ZeroExtent(_))));
    }
}
