//! Scalar abstraction and the engine's own transcendental functions.
//!
//! Only IEEE-754 `+ - * /`, `sqrt`, `floor` and bit manipulation are used
//! below. Platform `libm` routines (`exp`, `ln`, `sin`, `cos`) are not
//! guaranteed to round identically across targets, so they are never called
//! on the numeric path. No fused multiply-add anywhere.
//!
//! All routines evaluate in `f64`; the `f32` entry points round the `f64`
//! result once, which keeps them within one ulp of the correctly rounded
//! value.

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Floating-point element type of a tensor.
///
/// Implemented for `f32` (production path) and `f64` (gradient-check
/// shadow mode).
pub trait Real:
    Copy
    + Send
    + Sync
    + Debug
    + Display
    + PartialEq
    + PartialOrd
    + Default
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const NEG_INFINITY: Self;
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn det_exp(self) -> Self;
    fn det_ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    #[inline]
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    #[inline]
    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const NEG_INFINITY: Self = f32::NEG_INFINITY;
    const DTYPE: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn det_exp(self) -> Self {
        exp_f64(self as f64) as f32
    }
    #[inline]
    fn det_ln(self) -> Self {
        ln_f64(self as f64) as f32
    }
    #[inline]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const NEG_INFINITY: Self = f64::NEG_INFINITY;
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn det_exp(self) -> Self {
        exp_f64(self)
    }
    #[inline]
    fn det_ln(self) -> Self {
        ln_f64(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

// ln 2 split so that k * LN2_HI is exact for |k| < 2^20.
const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-01;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
const LOG2_E: f64 = std::f64::consts::LOG2_E;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

// pi/2 split for Cody-Waite reduction.
const PIO2_HI: f64 = 1.570_796_326_734_125_614_17;
const PIO2_LO: f64 = 6.077_100_506_506_192_249_3e-11;
const TWO_OVER_PI: f64 = std::f64::consts::FRAC_2_PI;

/// 2^k as an f64, for k in the normal exponent range.
#[inline]
fn pow2(k: i64) -> f64 {
    debug_assert!((-1022..=1023).contains(&k));
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// Round half away from zero, using only floor.
#[inline]
fn round_nearest(v: f64) -> f64 {
    if v >= 0.0 {
        (v + 0.5).floor()
    } else {
        -((-v + 0.5).floor())
    }
}

/// Deterministic natural exponential.
///
/// `x = k ln2 + r`, `|r| <= ln2 / 2`; `e^r` by a degree-13 Taylor
/// polynomial in Horner form (truncation error below 1e-17), then scaled by
/// `2^k` through the exponent bits.
pub fn exp_f64(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    if x > 709.782_712_893_384 {
        return f64::INFINITY;
    }
    if x < -745.133_219_101_941_1 {
        return 0.0;
    }
    let k = round_nearest(x * LOG2_E);
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Horner evaluation of sum r^n / n!, n = 0..=13.
    let mut p = 1.0 / 6_227_020_800.0; // 1/13!
    const INV_FACT: [f64; 13] = [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ];
    for c in INV_FACT {
        p = p * r + c;
    }
    let k = k as i64;
    if k > 1023 {
        p * pow2(1023) * pow2(k - 1023)
    } else if k < -1022 {
        p * pow2(-1022) * pow2(k + 1022)
    } else {
        p * pow2(k)
    }
}

/// Deterministic natural logarithm.
///
/// `x = m 2^e` with `m` in `[sqrt(1/2), sqrt(2))`; `ln m = 2 atanh(s)`,
/// `s = (m-1)/(m+1)`, via the odd series up to `s^27`. Non-positive input
/// gives `-inf` (zero) or NaN (negative); callers that need an error check
/// the domain first.
pub fn ln_f64(x: f64) -> f64 {
    if x.is_nan() || x < 0.0 {
        return f64::NAN;
    }
    if x == 0.0 {
        return f64::NEG_INFINITY;
    }
    if x.is_infinite() {
        return x;
    }
    let mut bits = x.to_bits();
    let mut e: i64 = 0;
    if (bits >> 52) == 0 {
        // subnormal: scale by 2^54
        bits = (x * pow2(54)).to_bits();
        e -= 54;
    }
    e += ((bits >> 52) & 0x7ff) as i64 - 1023;
    let mut m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | 0x3ff0_0000_0000_0000);
    if m > SQRT_2 {
        m *= 0.5;
        e += 1;
    }
    let s = (m - 1.0) / (m + 1.0);
    let s2 = s * s;
    // sum_{j=0}^{13} s2^j / (2j+1), Horner from the top.
    let mut p = 1.0 / 27.0;
    let mut j = 13;
    while j > 0 {
        j -= 1;
        p = p * s2 + 1.0 / (2 * j + 1) as f64;
    }
    let ln_m = 2.0 * s * p;
    let ef = e as f64;
    ef * LN2_HI + (ln_m + ef * LN2_LO)
}

fn sin_kernel(r: f64) -> f64 {
    // r - r^3/3! + ... up to r^19, |r| <= pi/4
    let r2 = r * r;
    let mut p = -1.0 / 121_645_100_408_832_000.0; // -1/19!
    const C: [f64; 9] = [
        1.0 / 355_687_428_096_000.0,  // 1/17!
        -1.0 / 1_307_674_368_000.0,   // -1/15!
        1.0 / 6_227_020_800.0,        // 1/13!
        -1.0 / 39_916_800.0,          // -1/11!
        1.0 / 362_880.0,              // 1/9!
        -1.0 / 5_040.0,               // -1/7!
        1.0 / 120.0,                  // 1/5!
        -1.0 / 6.0,                   // -1/3!
        1.0,
    ];
    for c in C {
        p = p * r2 + c;
    }
    p * r
}

fn cos_kernel(r: f64) -> f64 {
    // 1 - r^2/2! + r^4/4! - ... up to r^18, |r| <= pi/4
    let r2 = r * r;
    let mut p = -1.0 / 6_402_373_705_728_000.0; // -1/18!
    const C: [f64; 9] = [
        1.0 / 20_922_789_888_000.0, // 1/16!
        -1.0 / 87_178_291_200.0,    // -1/14!
        1.0 / 479_001_600.0,        // 1/12!
        -1.0 / 3_628_800.0,         // -1/10!
        1.0 / 40_320.0,             // 1/8!
        -1.0 / 720.0,               // -1/6!
        1.0 / 24.0,                 // 1/4!
        -0.5,                       // -1/2!
        1.0,
    ];
    for c in C {
        p = p * r2 + c;
    }
    p
}

/// Deterministic `(sin x, cos x)` for moderate arguments (|x| < 2^20).
pub fn sin_cos_f64(x: f64) -> (f64, f64) {
    let k = round_nearest(x * TWO_OVER_PI);
    let r = (x - k * PIO2_HI) - k * PIO2_LO;
    let (s, c) = (sin_kernel(r), cos_kernel(r));
    match (k as i64).rem_euclid(4) {
        0 => (s, c),
        1 => (c, -s),
        2 => (-s, -c),
        _ => (-c, s),
    }
}
