use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{FromPrimitive, ToPrimitive, Zero};

use crate::error::{Error, Result};

/// Default fractional bits of the fixed-point encoding.
pub const DEFAULT_SCALE_BITS: u32 = 40;

/// Signed real encoded as a residue mod `n` at scale `2^scale_bits`.
///
/// `[0, n/3)` holds non-negative values, `(2n/3, n)` holds negatives as
/// `n − |v|`; the middle third is never produced by a valid computation and
/// decodes to [`Error::BandOverflow`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedPoint {
    pub mantissa: BigUint,
    pub scale_bits: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Band {
    Positive,
    Negative,
    Overflow,
}

fn band(m: &BigUint, n: &BigUint) -> Band {
    let third = n / 3u32;
    if m < &third {
        Band::Positive
    } else if m > &(n - &third) && m < n {
        Band::Negative
    } else {
        Band::Overflow
    }
}

impl FixedPoint {
    pub fn encode(value: f64, scale_bits: u32, n: &BigUint) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite("fixed-point encode"));
        }
        let scaled = BigInt::from_f64((value * 2f64.powi(scale_bits as i32)).round())
            .ok_or(Error::NonFinite("fixed-point encode"))?;
        let (sign, magnitude) = scaled.into_parts();
        if magnitude >= n / 3u32 {
            return Err(Error::BandOverflow);
        }
        let mantissa = if sign == Sign::Minus && !magnitude.is_zero() {
            n - magnitude
        } else {
            magnitude
        };
        Ok(Self {
            mantissa,
            scale_bits,
        })
    }

    /// Signed integer value of the mantissa, before applying the scale.
    pub fn signed_mantissa(&self, n: &BigUint) -> Result<BigInt> {
        match band(&self.mantissa, n) {
            Band::Positive => Ok(BigInt::from(self.mantissa.clone())),
            Band::Negative => Ok(-BigInt::from(n - &self.mantissa)),
            Band::Overflow => Err(Error::BandOverflow),
        }
    }

    pub fn decode(&self, n: &BigUint) -> Result<f64> {
        let v = self
            .signed_mantissa(n)?
            .to_f64()
            .ok_or(Error::NonFinite("fixed-point decode"))?;
        Ok(v / 2f64.powi(self.scale_bits as i32))
    }

    pub fn is_negative(&self, n: &BigUint) -> bool {
        band(&self.mantissa, n) == Band::Negative
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn modulus() -> BigUint {
        // Any odd modulus works for the encoding; a 512-bit one mirrors test keys.
        (BigUint::from(1u32) << 511u32) + 12345u32
    }

    #[test]
    fn zero() {
        let n = modulus();
        let fp = FixedPoint::encode(0.0, 40, &n).unwrap();
        assert!(fp.mantissa.is_zero());
        assert_eq!(fp.decode(&n).unwrap(), 0.0);
        let fp = FixedPoint::encode(-0.0, 40, &n).unwrap();
        assert!(fp.mantissa.is_zero());
    }

    #[test]
    fn negative_dyadic_value() {
        let n = modulus();
        let fp = FixedPoint::encode(-1.5, 40, &n).unwrap();
        let expected = &n - BigUint::from(3u64 << 39);
        assert_eq!(fp.mantissa, expected);
        assert_eq!(fp.decode(&n).unwrap(), -1.5);
    }

    #[test]
    fn roundtrip_error_bound() {
        let n = modulus();
        let mut r = rng::seeded(9);
        for _ in 0..1000 {
            let v: f64 = r.gen_range(-10.0..10.0);
            let back = FixedPoint::encode(v, 40, &n).unwrap().decode(&n).unwrap();
            assert!((back - v).abs() <= 2f64.powi(-40), "{v} -> {back}");
        }
    }

    #[test]
    fn overflow_detected() {
        let n = BigUint::from(1_000_003u32);
        // n/3 ≈ 333334; scale 0 keeps it simple.
        assert!(FixedPoint::encode(333_000.0, 0, &n).is_ok());
        assert!(matches!(FixedPoint::encode(400_000.0, 0, &n), Err(Error::BandOverflow)));
        assert!(matches!(FixedPoint::encode(-400_000.0, 0, &n), Err(Error::BandOverflow)));
        let middle = FixedPoint {
            mantissa: BigUint::from(500_000u32),
            scale_bits: 0,
        };
        assert!(matches!(middle.decode(&n), Err(Error::BandOverflow)));
    }

    #[test]
    fn non_finite_rejected() {
        let n = modulus();
        assert!(FixedPoint::encode(f64::NAN, 40, &n).is_err());
        assert!(FixedPoint::encode(f64::INFINITY, 40, &n).is_err());
    }
}
