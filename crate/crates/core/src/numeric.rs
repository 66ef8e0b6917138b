//! Shared numeric primitives: half-integers, log-space helpers for big
//! rationals, and error-compensated float sums used by the divisor scans.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use serde::{Deserialize, Serialize};
use std::fmt;

/// A half-integer stored as its double, so `HalfInt(3)` is 3/2.
///
/// Spin indices on SU(2) live in (1/2)Z; keeping twice the value as an `i64`
/// makes equality and ordering exact.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HalfInt(pub i64);

impl HalfInt {
    pub const ZERO: HalfInt = HalfInt(0);

    pub fn from_int(n: i64) -> Self {
        HalfInt(2 * n)
    }

    /// Twice the value (always an integer).
    pub fn doubled(self) -> i64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 2.0
    }

    pub fn is_integer(self) -> bool {
        self.0 % 2 == 0
    }

    pub fn abs(self) -> Self {
        HalfInt(self.0.abs())
    }

    /// Exact value as a big rational (n/2).
    pub fn to_rational(self) -> BigRational {
        BigRational::new(BigInt::from(self.0), BigInt::from(2))
    }
}

impl std::ops::Add for HalfInt {
    type Output = HalfInt;
    fn add(self, rhs: HalfInt) -> HalfInt {
        HalfInt(self.0 + rhs.0)
    }
}

impl std::ops::Neg for HalfInt {
    type Output = HalfInt;
    fn neg(self) -> HalfInt {
        HalfInt(-self.0)
    }
}

impl fmt::Debug for HalfInt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self)
    }
}

impl fmt::Display for HalfInt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 % 2 == 0 {
            write!(f, "{}", self.0 / 2)
        } else {
            write!(f, "{}/2", self.0)
        }
    }
}

/// Natural log of |n| for a big integer, accurate to ~1 ulp of f64.
///
/// Works at any magnitude: the value is reconstructed from the top 64 bits
/// of the mantissa plus the bit length, so integers with millions of digits
/// are fine.
pub fn ln_bigint(n: &BigInt) -> f64 {
    let n = n.magnitude();
    if n.is_zero() {
        return f64::NEG_INFINITY;
    }
    let bits = n.bits();
    if bits <= 63 {
        let v: u64 = n.try_into().expect("fits in u64");
        return (v as f64).ln();
    }
    // n = m * 2^shift with m holding the top 63 bits.
    let shift = bits - 63;
    let m: u64 = (n >> shift).try_into().expect("63 bits");
    (m as f64).ln() + (shift as f64) * std::f64::consts::LN_2
}

/// Natural log of |r| for a big rational; `-inf` at zero.
pub fn ln_rational(r: &BigRational) -> f64 {
    if r.is_zero() {
        return f64::NEG_INFINITY;
    }
    ln_bigint(r.numer()) - ln_bigint(r.denom())
}

/// Rounds a big rational to the nearest f64, including values far outside
/// the f64 exponent range (mapped to 0 or ±inf).
pub fn rational_to_f64(r: &BigRational) -> f64 {
    if r.is_zero() {
        return 0.0;
    }
    let sign = if r.is_negative() { -1.0 } else { 1.0 };
    let lg = ln_rational(r);
    if lg > 709.0 {
        return sign * f64::INFINITY;
    }
    if lg < -709.0 {
        // Reconstructing via exp keeps a graceful underflow.
        return sign * lg.exp();
    }
    let nb = r.numer().magnitude().bits() as i64;
    let db = r.denom().magnitude().bits() as i64;
    // Scale so the quotient of the shifted parts carries ~80 significant bits.
    let scale = nb - db - 80;
    let (num, den) = if scale >= 0 {
        (r.numer().magnitude() >> scale as u64, r.denom().magnitude().clone())
    } else {
        (r.numer().magnitude() << (-scale) as u64, r.denom().magnitude().clone())
    };
    let q = &num / &den;
    let q: f64 = {
        let bits = q.bits();
        if bits <= 63 {
            u64::try_from(&q).map(|v| v as f64).unwrap_or(f64::MAX)
        } else {
            let sh = bits - 63;
            let top: u64 = (&q >> sh).try_into().expect("63 bits");
            (top as f64) * 2f64.powi(sh as i32)
        }
    };
    sign * q * 2f64.powi(scale as i32)
}

/// ln(k!): exact summed table below 256, Stirling series above.
///
/// Relative error stays below ~1e-14 over the full range, which is enough
/// for every log-space fit in the crate.
pub fn ln_factorial(k: u64) -> f64 {
    const TABLE_LEN: usize = 256;
    static SMALL: std::sync::OnceLock<Vec<f64>> = std::sync::OnceLock::new();
    if (k as usize) < TABLE_LEN {
        let table = SMALL.get_or_init(|| {
            let mut t = vec![0.0f64; TABLE_LEN];
            let mut acc = 0.0f64;
            for (i, slot) in t.iter_mut().enumerate() {
                if i > 0 {
                    acc += (i as f64).ln();
                }
                *slot = acc;
            }
            t
        });
        return table[k as usize];
    }
    let x = k as f64 + 1.0;
    // Stirling with three correction terms.
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln()
        + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 / 1260.0))
}

/// A double-double value `hi + lo` with |lo| <= ulp(hi)/2.
///
/// Used on the divisor fast path: roughly 31 significant decimal digits,
/// which resolves every divisor the desk-scale scans can reach before the
/// exact rational fallback takes over.
#[derive(Clone, Copy, Debug)]
pub struct TwoFloat {
    pub hi: f64,
    pub lo: f64,
}

impl TwoFloat {
    pub fn new(hi: f64, lo: f64) -> Self {
        let (s, e) = two_sum(hi, lo);
        TwoFloat { hi: s, lo: e }
    }

    pub fn from_f64(x: f64) -> Self {
        TwoFloat { hi: x, lo: 0.0 }
    }

    /// Conversion from an exact rational, splitting into leading and
    /// residual parts so the pair carries ~2x53 bits of the value.
    pub fn from_rational(r: &BigRational) -> Self {
        let hi = rational_to_f64(r);
        if !hi.is_finite() {
            return TwoFloat { hi, lo: 0.0 };
        }
        let hi_r = BigRational::from_float(hi).unwrap_or_else(BigRational::zero);
        let residual = r - hi_r;
        TwoFloat::new(hi, rational_to_f64(&residual))
    }

    pub fn add_f64(self, x: f64) -> Self {
        let (s, e) = two_sum(self.hi, x);
        TwoFloat::new(s, e + self.lo)
    }

    pub fn scale_int(self, n: i64) -> Self {
        let nf = n as f64;
        let (p, e) = two_prod(self.hi, nf);
        TwoFloat::new(p, e + self.lo * nf)
    }

    pub fn value(self) -> f64 {
        self.hi + self.lo
    }

    pub fn abs_value(self) -> f64 {
        self.value().abs()
    }
}

/// Knuth's error-free transformation of a sum.
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

/// Error-free product via FMA.
#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let err = a.mul_add(b, -p);
    (p, err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use num_traits::One;

    #[test]
    fn ln_bigint_matches_f64_in_range() {
        for v in [1u64, 2, 10, 12345, 1 << 40] {
            let got = ln_bigint(&BigInt::from(v));
            assert!((got - (v as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ln_bigint_huge() {
        // ln(10^500) = 500 ln 10
        let n = BigInt::from(10u32).pow(500);
        let got = ln_bigint(&n);
        let want = 500.0 * 10f64.ln();
        assert!((got / want - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rational_to_f64_roundtrip() {
        let r = BigRational::new(BigInt::from(355), BigInt::from(113));
        assert!((rational_to_f64(&r) - 355.0 / 113.0).abs() < 1e-15);
        let tiny = BigRational::new(BigInt::one(), BigInt::from(10u32).pow(40));
        assert!((rational_to_f64(&tiny) - 1e-40).abs() < 1e-52);
    }

    #[test]
    fn ln_factorial_against_sum() {
        let mut acc = 0.0;
        for k in 1..2000u64 {
            acc += (k as f64).ln();
            let got = ln_factorial(k);
            assert!(
                (got - acc).abs() <= 1e-10 * acc.max(1.0),
                "k={k} got={got} want={acc}"
            );
        }
    }

    #[test]
    fn two_float_resolves_tiny_offsets() {
        // 1/3 * 3 - 1 should be ~1e-32, far below f64 resolution.
        let third = BigRational::new(BigInt::one(), BigInt::from(3));
        let t = TwoFloat::from_rational(&third).scale_int(3).add_f64(-1.0);
        assert!(t.abs_value() < 1e-30);
    }

    #[test]
    fn half_int_display_and_ops() {
        assert_eq!(HalfInt(3).to_string(), "3/2");
        assert_eq!(HalfInt::from_int(-2).to_string(), "-2");
        assert_eq!((HalfInt(1) + HalfInt(1)).doubled(), 2);
        assert!(HalfInt(1) < HalfInt(2));
    }
}
