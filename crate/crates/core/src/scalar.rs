//! Numeric abstraction shared by the simulator and the solvers.
//!
//! Everything that accumulates progress, cost, or utility is generic over
//! [`Scalar`]. `f64` is the fast path used by the harness; [`Exact`]
//! (arbitrary-precision rationals) is used wherever two independent routes
//! must agree bit-for-bit.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, ToPrimitive, Zero};

/// Exact rational arithmetic.
pub type Exact = BigRational;

pub trait Scalar:
    Clone
    + Debug
    + PartialOrd
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn zero() -> Self;
    fn one() -> Self;
    /// Lift a model parameter. For rationals this is the exact value of the
    /// shortest decimal that round-trips to `x`, so `0.3` becomes `3/10`.
    fn from_f64(x: f64) -> Self;
    fn from_u32(n: u32) -> Self;
    fn to_f64(&self) -> f64;
    /// Slack allowed when testing `progress >= workload`.
    fn completion_tolerance() -> Self;

    fn max_of(a: Self, b: Self) -> Self {
        if b > a {
            b
        } else {
            a
        }
    }

    fn min_of(a: Self, b: Self) -> Self {
        if b < a {
            b
        } else {
            a
        }
    }
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn from_u32(n: u32) -> Self {
        n as f64
    }
    fn to_f64(&self) -> f64 {
        *self
    }
    fn completion_tolerance() -> Self {
        1e-9
    }
}

impl Scalar for BigRational {
    fn zero() -> Self {
        Zero::zero()
    }
    fn one() -> Self {
        One::one()
    }
    fn from_f64(x: f64) -> Self {
        decimal_rational(x)
    }
    fn from_u32(n: u32) -> Self {
        BigRational::from_integer(BigInt::from(n))
    }
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
    fn completion_tolerance() -> Self {
        Zero::zero()
    }
}

/// Rust's `Display` for `f64` prints the shortest round-tripping decimal and
/// never switches to exponent notation, so parsing it back yields a short
/// exact fraction.
fn decimal_rational(x: f64) -> BigRational {
    assert!(x.is_finite(), "cannot lift non-finite value {x} to a rational");
    let text = format!("{x}");
    let (negative, digits) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text.as_str()),
    };
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    let mut numer: BigInt = format!("{int_part}{frac_part}")
        .parse()
        .expect("f64 display is a decimal literal");
    if negative {
        numer = -numer;
    }
    let denom = num::pow(BigInt::from(10u32), frac_part.len());
    BigRational::new(numer, denom)
}
