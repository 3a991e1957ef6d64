//! Scalar backends for lattice masses.
//!
//! Two implementations of [`Mass`] exist: `f64`, with compensated sums and a
//! gather-form convolution, and `BigRational`, which is exact and serves as
//! the ground-truth oracle. Exact convolution of long vectors goes through
//! Kronecker substitution: the numerators (over a common denominator) are
//! packed into one big integer, multiplied once, and unpacked.
//!
//! Exact arithmetic is practical for supports up to a few thousand atoms and
//! `m ≤ 4`; denominators grow like `D^(m^n)` under iteration.

use std::fmt;

use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{Num, One, Signed, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DrError, Result};
use crate::numeric::{fmt_f64, NeumaierSum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Backend {
    #[serde(rename = "f64")]
    F64,
    #[serde(rename = "rational")]
    Rational,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backend::F64 => f.write_str("f64"),
            Backend::Rational => f.write_str("rational"),
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = DrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" | "float" => Ok(Backend::F64),
            "rational" | "exact" => Ok(Backend::Rational),
            other => Err(DrError::Parse(format!(
                "unknown backend '{other}' (expected f64 or rational)"
            ))),
        }
    }
}

/// Support length at which kernels switch strategy: parallel gather for
/// floats, Kronecker packing for exact integers.
pub const DEFAULT_CROSSOVER: usize = 256;

/// Masses below this are flushed to the origin by float evolution.
pub const FLOAT_FLUSH_THRESHOLD: f64 = 1e-320;

/// Tolerance on the total mass of a float law.
pub const FLOAT_MASS_TOL: f64 = 1e-12;

pub trait Mass:
    Num + Clone + PartialOrd + fmt::Debug + Send + Sync + 'static
{
    const BACKEND: Backend;

    fn from_u64(n: u64) -> Self;

    fn from_ratio(num: u64, den: u64) -> Self {
        Self::from_u64(num) / Self::from_u64(den)
    }

    fn to_f64(&self) -> f64;

    /// Exact value of a finite float.
    fn from_f64(x: f64) -> Result<Self>;

    /// Decimal (`f64`) or `num/den` (rational) rendering, lossless.
    fn render(&self) -> String;

    /// Parses `"0.25"`, `"1/4"` or an integer. Decimals are exact in the
    /// rational backend.
    fn parse_mass(s: &str) -> Result<Self>;

    fn total<I: IntoIterator<Item = Self>>(iter: I) -> Self;

    fn convolve(a: &[Self], b: &[Self], crossover: usize) -> Vec<Self>;

    fn square(a: &[Self], crossover: usize) -> Vec<Self> {
        Self::convolve(a, a, crossover)
    }

    /// Divides out roundoff drift of the total mass. Exact backends do nothing.
    fn renormalize(_probs: &mut [Self]) {}

    fn is_unit_total(sum: &Self) -> bool;

    /// `probs[k] · base^k` for each k. Errors when a term is not representable.
    fn tilt(probs: &[Self], base: &Self) -> Result<Vec<Self>>;

    fn is_finite(&self) -> bool {
        true
    }

    /// Float evolution flushes masses below this; exact backends never flush.
    fn flush_threshold() -> Option<Self> {
        None
    }

    fn powu(&self, e: u32) -> Self {
        num_traits::pow(self.clone(), e as usize)
    }

    fn max_of(a: Self, b: Self) -> Self {
        if a >= b {
            a
        } else {
            b
        }
    }

    fn abs_of(&self) -> Self {
        if *self < Self::zero() {
            Self::zero() - self.clone()
        } else {
            self.clone()
        }
    }
}

// ---------------------------------------------------------------- f64 ----

#[inline]
fn exponent_of(x: f64) -> i32 {
    if x == 0.0 {
        i32::MIN / 2
    } else {
        let e = ((x.to_bits() >> 52) & 0x7ff) as i32;
        if e == 0 {
            // subnormal
            -1023 - (x.to_bits() & ((1u64 << 52) - 1)).leading_zeros() as i32 + 12
        } else {
            e - 1023
        }
    }
}

/// Products whose binary exponent falls below this are skipped: they lie
/// under the float flush threshold and would otherwise take the slow
/// subnormal path.
const MIN_PRODUCT_EXP: i32 = -1063;

fn convolve_f64(a: &[f64], b: &[f64], crossover: usize, symmetric: bool) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let n = a.len() + b.len() - 1;
    let nz: Vec<usize> = (0..a.len()).filter(|&i| a[i] != 0.0).collect();
    let ea: Vec<i32> = a.iter().map(|&x| exponent_of(x)).collect();
    let eb: Vec<i32> = b.iter().map(|&x| exponent_of(x)).collect();
    let lb = b.len();
    let cell = |k: usize| -> f64 {
        let lo = (k + 1).saturating_sub(lb);
        let start = nz.partition_point(|&i| i < lo);
        let mut acc = NeumaierSum::new();
        for &i in &nz[start..] {
            if i > k {
                break;
            }
            let j = k - i;
            if symmetric && i > j {
                break;
            }
            if ea[i] + eb[j] < MIN_PRODUCT_EXP {
                continue;
            }
            let prod = a[i] * b[j];
            if symmetric && i < j {
                acc.add(2.0 * prod);
            } else {
                acc.add(prod);
            }
        }
        acc.value()
    };
    if n >= crossover {
        (0..n).into_par_iter().map(cell).collect()
    } else {
        (0..n).map(cell).collect()
    }
}

impl Mass for f64 {
    const BACKEND: Backend = Backend::F64;

    fn from_u64(n: u64) -> Self {
        n as f64
    }

    fn to_f64(&self) -> f64 {
        *self
    }

    fn from_f64(x: f64) -> Result<Self> {
        if x.is_finite() {
            Ok(x)
        } else {
            Err(DrError::range(format!("{x} is not finite")))
        }
    }

    fn render(&self) -> String {
        fmt_f64(*self)
    }

    fn parse_mass(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n: f64 = n
                .trim()
                .parse()
                .map_err(|_| DrError::Parse(format!("bad numerator in '{s}'")))?;
            let d: f64 = d
                .trim()
                .parse()
                .map_err(|_| DrError::Parse(format!("bad denominator in '{s}'")))?;
            if d == 0.0 {
                return Err(DrError::Parse(format!("zero denominator in '{s}'")));
            }
            return Ok(n / d);
        }
        s.parse::<f64>()
            .map_err(|_| DrError::Parse(format!("not a number: '{s}'")))
    }

    fn total<I: IntoIterator<Item = Self>>(iter: I) -> Self {
        iter.into_iter().collect::<NeumaierSum>().value()
    }

    fn convolve(a: &[Self], b: &[Self], crossover: usize) -> Vec<Self> {
        convolve_f64(a, b, crossover, false)
    }

    fn square(a: &[Self], crossover: usize) -> Vec<Self> {
        convolve_f64(a, a, crossover, true)
    }

    fn renormalize(probs: &mut [Self]) {
        let s = Self::total(probs.iter().copied());
        if s > 0.0 && s != 1.0 {
            for p in probs.iter_mut() {
                *p /= s;
            }
        }
    }

    fn is_unit_total(sum: &Self) -> bool {
        (sum - 1.0).abs() <= FLOAT_MASS_TOL
    }

    fn tilt(probs: &[Self], base: &Self) -> Result<Vec<Self>> {
        let base = *base;
        if !(base > 0.0) || !base.is_finite() {
            return Err(DrError::domain(format!("tilt base must be positive, got {base}")));
        }
        let ln_base = base.ln();
        let mut pw = 1.0f64;
        let mut out = Vec::with_capacity(probs.len());
        for (k, &p) in probs.iter().enumerate() {
            if k > 0 {
                pw *= base;
            }
            let term = if p == 0.0 {
                0.0
            } else if pw.is_finite() && pw > 0.0 {
                p * pw
            } else {
                (p.ln() + k as f64 * ln_base).exp()
            };
            if !term.is_finite() {
                return Err(DrError::range(format!(
                    "mass·{base}^{k} overflows f64; use the rational backend or a smaller support"
                )));
            }
            out.push(term);
        }
        Ok(out)
    }

    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }

    fn flush_threshold() -> Option<Self> {
        Some(FLOAT_FLUSH_THRESHOLD)
    }
}

// ----------------------------------------------------------- rational ----

/// Rewrites nonnegative rationals over their least common denominator.
fn common_denominator(v: &[BigRational]) -> (Vec<BigUint>, BigUint) {
    let mut den = BigInt::one();
    for x in v {
        if !x.is_zero() {
            den = den.lcm(x.denom());
        }
    }
    let nums = v
        .iter()
        .map(|x| {
            if x.is_zero() {
                BigUint::zero()
            } else {
                let scaled = x.numer() * (&den / x.denom());
                scaled.to_biguint().expect("masses are nonnegative")
            }
        })
        .collect();
    (nums, den.to_biguint().expect("denominators are positive"))
}

fn schoolbook_int(a: &[BigUint], b: &[BigUint]) -> Vec<BigUint> {
    let mut out = vec![BigUint::zero(); a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        if x.is_zero() {
            continue;
        }
        for (j, y) in b.iter().enumerate() {
            if !y.is_zero() {
                out[i + j] += x * y;
            }
        }
    }
    out
}

fn pack(v: &[BigUint], words: usize) -> BigUint {
    let mut digits = vec![0u32; v.len() * words];
    for (i, x) in v.iter().enumerate() {
        let d = x.to_u32_digits();
        digits[i * words..i * words + d.len()].copy_from_slice(&d);
    }
    BigUint::new(digits)
}

/// Exact integer convolution by packing each vector into a single integer
/// with slots wide enough that no carry crosses a slot boundary.
fn kronecker_int(a: &[BigUint], b: &[BigUint], same: bool) -> Vec<BigUint> {
    let max_bits = |v: &[BigUint]| v.iter().map(|x| x.bits()).max().unwrap_or(0);
    let terms = a.len().min(b.len()) as u64;
    let guard = 64 - terms.leading_zeros() as u64 + 1;
    let bits = max_bits(a) + max_bits(b) + guard;
    let words = bits.div_ceil(32) as usize;
    let pa = pack(a, words);
    let prod = if same { &pa * &pa } else { &pa * &pack(b, words) };
    let digits = prod.to_u32_digits();
    let n = a.len() + b.len() - 1;
    (0..n)
        .map(|k| {
            let lo = (k * words).min(digits.len());
            let hi = ((k + 1) * words).min(digits.len());
            BigUint::from_slice(&digits[lo..hi])
        })
        .collect()
}

fn convolve_rational(a: &[BigRational], b: &[BigRational], crossover: usize, same: bool) -> Vec<BigRational> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let (na, da) = common_denominator(a);
    let (nb, db) = if same {
        (na.clone(), da.clone())
    } else {
        common_denominator(b)
    };
    let n = a.len() + b.len() - 1;
    let nums = if a.len().min(b.len()) < 16 || n < crossover {
        schoolbook_int(&na, &nb)
    } else {
        kronecker_int(&na, &nb, same)
    };
    let den = BigInt::from_biguint(Sign::Plus, da * db);
    nums.into_par_iter()
        .map(|c| BigRational::new(BigInt::from_biguint(Sign::Plus, c), den.clone()))
        .collect()
}

fn parse_decimal_exact(s: &str) -> Option<BigRational> {
    let (mantissa, exp) = match s.find(['e', 'E']) {
        Some(pos) => (&s[..pos], s[pos + 1..].parse::<i32>().ok()?),
        None => (s, 0),
    };
    let (neg, mantissa) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int_part, frac_part) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    let digits = format!("{int_part}{frac_part}");
    let num = BigInt::parse_bytes(if digits.is_empty() { b"0" } else { digits.as_bytes() }, 10)?;
    let scale = exp - frac_part.len() as i32;
    let ten = BigInt::from(10u32);
    let mut r = if scale >= 0 {
        BigRational::from_integer(num * num_traits::pow(ten, scale as usize))
    } else {
        BigRational::new(num, num_traits::pow(ten, (-scale) as usize))
    };
    if neg {
        r = -r;
    }
    Some(r)
}

impl Mass for BigRational {
    const BACKEND: Backend = Backend::Rational;

    fn from_u64(n: u64) -> Self {
        BigRational::from_integer(BigInt::from(n))
    }

    fn from_f64(x: f64) -> Result<Self> {
        <BigRational as num_traits::FromPrimitive>::from_f64(x).ok_or_else(|| DrError::range(format!("{x} is not finite")))
    }

    fn to_f64(&self) -> f64 {
        if let Some(v) = ToPrimitive::to_f64(self) {
            if v.is_finite() && (v != 0.0 || self.is_zero()) {
                return v;
            }
        }
        // Ratio of huge integers: compare bit lengths first.
        let n = self.numer().abs();
        let d = self.denom().clone();
        let shift = n.bits() as i64 - d.bits() as i64;
        let (n, d) = if shift > 0 {
            (n, d << (shift as usize))
        } else {
            (n << ((-shift) as usize), d)
        };
        let base = ToPrimitive::to_f64(&BigRational::new(n, d)).unwrap_or(f64::NAN);
        let v = base * 2f64.powi(shift.clamp(i32::MIN as i64, i32::MAX as i64) as i32);
        if self.is_negative() {
            -v
        } else {
            v
        }
    }

    fn render(&self) -> String {
        self.to_string()
    }

    fn parse_mass(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n = BigInt::from_str_radix(n.trim(), 10)
                .map_err(|_| DrError::Parse(format!("bad numerator in '{s}'")))?;
            let d = BigInt::from_str_radix(d.trim(), 10)
                .map_err(|_| DrError::Parse(format!("bad denominator in '{s}'")))?;
            if d.is_zero() {
                return Err(DrError::Parse(format!("zero denominator in '{s}'")));
            }
            return Ok(BigRational::new(n, d));
        }
        parse_decimal_exact(s).ok_or_else(|| DrError::Parse(format!("not an exact decimal: '{s}'")))
    }

    fn total<I: IntoIterator<Item = Self>>(iter: I) -> Self {
        iter.into_iter().fold(BigRational::zero(), |acc, x| acc + x)
    }

    fn convolve(a: &[Self], b: &[Self], crossover: usize) -> Vec<Self> {
        convolve_rational(a, b, crossover, false)
    }

    fn square(a: &[Self], crossover: usize) -> Vec<Self> {
        convolve_rational(a, a, crossover, true)
    }

    fn is_unit_total(sum: &Self) -> bool {
        sum.is_one()
    }

    fn tilt(probs: &[Self], base: &Self) -> Result<Vec<Self>> {
        if !base.is_positive() {
            return Err(DrError::domain("tilt base must be positive"));
        }
        let mut pw = BigRational::one();
        let mut out = Vec::with_capacity(probs.len());
        for (k, p) in probs.iter().enumerate() {
            if k > 0 {
                pw = &pw * base;
            }
            out.push(p * &pw);
        }
        Ok(out)
    }
}
