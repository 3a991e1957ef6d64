//! Finite-support laws on the nonnegative integers and the one-step map
//! `X' = (X_1 + … + X_m − 1)^+`.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{DrError, Result};
use crate::mass::{Backend, Mass, DEFAULT_CROSSOVER};

/// Largest support bound any operation may produce unless told otherwise.
pub const DEFAULT_HARD_CAP: usize = 1 << 23;

/// Branching arity `m ≥ 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Arity(u32);

impl Arity {
    pub fn new(m: u32) -> Result<Self> {
        if m < 2 {
            return Err(DrError::domain(format!("arity must be at least 2, got {m}")));
        }
        Ok(Arity(m))
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn as_usize(self) -> usize {
        self.0 as usize
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64
    }

    pub fn mass<T: Mass>(self) -> T {
        T::from_u64(self.0 as u64)
    }
}

impl TryFrom<u32> for Arity {
    type Error = DrError;

    fn try_from(m: u32) -> Result<Self> {
        Arity::new(m)
    }
}

impl From<Arity> for u32 {
    fn from(a: Arity) -> u32 {
        a.0
    }
}

impl fmt::Display for Arity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A probability law on `{0, …, K}` stored densely. The last stored mass is
/// nonzero unless the law is the point mass at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Dist<T> {
    probs: Vec<T>,
}

fn trim_trailing<T: Mass>(probs: &mut Vec<T>) {
    while probs.len() > 1 && probs.last().is_some_and(|p| p.is_zero()) {
        probs.pop();
    }
    if probs.is_empty() {
        probs.push(T::one());
    }
}

impl<T: Mass> Dist<T> {
    /// Validates nonnegativity and unit total mass, then canonicalizes.
    pub fn new(mut probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(DrError::validation("law has no masses"));
        }
        for (k, p) in probs.iter().enumerate() {
            if !p.is_finite() || *p < T::zero() {
                return Err(DrError::validation(format!(
                    "mass at {k} is not a nonnegative number: {}",
                    p.render()
                )));
            }
        }
        let total = T::total(probs.iter().cloned());
        if !T::is_unit_total(&total) {
            return Err(DrError::validation(format!(
                "masses sum to {} instead of 1",
                total.render()
            )));
        }
        trim_trailing(&mut probs);
        Ok(Dist { probs })
    }

    /// Canonicalizes without checking the total; for internal results whose
    /// mass is conserved by construction.
    pub(crate) fn from_vec_unchecked(mut probs: Vec<T>) -> Self {
        trim_trailing(&mut probs);
        Dist { probs }
    }

    pub fn dirac(k: usize) -> Self {
        let mut probs = vec![T::zero(); k + 1];
        probs[k] = T::one();
        Dist { probs }
    }

    /// Law with the given `(point, mass)` atoms; masses must sum to 1.
    pub fn from_atoms(atoms: &[(usize, T)]) -> Result<Self> {
        let top = atoms.iter().map(|(k, _)| *k).max().unwrap_or(0);
        let mut probs = vec![T::zero(); top + 1];
        for (k, p) in atoms {
            probs[*k] = probs[*k].clone() + p.clone();
        }
        Dist::new(probs)
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<T> {
        self.probs
    }

    /// Largest point of the support (0 for the point mass at 0).
    pub fn support_bound(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn mass_at(&self, k: usize) -> T {
        self.probs.get(k).cloned().unwrap_or_else(T::zero)
    }

    pub fn total_mass(&self) -> T {
        T::total(self.probs.iter().cloned())
    }

    pub fn is_zero_dirac(&self) -> bool {
        self.probs.len() == 1
    }

    pub fn expectation(&self) -> T {
        T::total(
            self.probs
                .iter()
                .enumerate()
                .skip(1)
                .filter(|(_, p)| !p.is_zero())
                .map(|(k, p)| T::from_u64(k as u64) * p.clone()),
        )
    }

    /// `P(X ≥ k)`.
    pub fn tail_from(&self, k: usize) -> T {
        T::total(self.probs.iter().skip(k).cloned())
    }

    /// Cumulative distribution `P(X ≤ k)` for k = 0..=K.
    pub fn cdf(&self) -> Vec<T> {
        let mut acc = T::zero();
        self.probs
            .iter()
            .map(|p| {
                acc = acc.clone() + p.clone();
                acc.clone()
            })
            .collect()
    }

    pub fn to_f64_dist(&self) -> Dist<f64> {
        Dist {
            probs: self.probs.iter().map(|p| p.to_f64()).collect(),
        }
    }

    /// Moves every mass below `threshold` to the origin. Returns the lost
    /// expectation. A no-op for backends without a flush threshold.
    pub fn flush_small(&self) -> (Dist<T>, T) {
        let Some(threshold) = T::flush_threshold() else {
            return (self.clone(), T::zero());
        };
        let mut probs = self.probs.clone();
        let mut moved = Vec::new();
        let mut lost = Vec::new();
        for (k, p) in probs.iter_mut().enumerate().skip(1) {
            if !p.is_zero() && *p < threshold {
                moved.push(p.clone());
                lost.push(T::from_u64(k as u64) * p.clone());
                *p = T::zero();
            }
        }
        if moved.is_empty() {
            return (self.clone(), T::zero());
        }
        probs[0] = probs[0].clone() + T::total(moved);
        (Dist::from_vec_unchecked(probs), T::total(lost))
    }
}

impl Dist<BigRational> {
    pub fn from_fractions(atoms: &[(usize, i64, i64)]) -> Result<Self> {
        let atoms: Vec<(usize, BigRational)> = atoms
            .iter()
            .map(|&(k, n, d)| (k, BigRational::new(BigInt::from(n), BigInt::from(d))))
            .collect();
        Dist::from_atoms(&atoms)
    }
}

impl Dist<f64> {
    /// Exact rational image of a float law (each f64 is a dyadic rational).
    pub fn to_exact(&self) -> Dist<BigRational> {
        let probs = self
            .probs
            .iter()
            .map(|&p| BigRational::from_float(p).unwrap_or_else(BigRational::zero))
            .collect();
        Dist::from_vec_unchecked(probs)
    }
}

/// Model parameters: arity, mixing weight and the positive part of the
/// initial law.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec<T> {
    m: Arity,
    p: T,
    star: Dist<T>,
}

/// Checks that a law lives on `{1, 2, …}` and charges `{2, 3, …}`.
pub fn validate_star<T: Mass>(star: &Dist<T>) -> Result<()> {
    if !star.mass_at(0).is_zero() {
        return Err(DrError::validation(format!(
            "star law must have no mass at 0 (found {})",
            star.mass_at(0).render()
        )));
    }
    if star.support_bound() < 2 || star.tail_from(2).is_zero() {
        return Err(DrError::validation(
            "star law must put positive mass on values ≥ 2",
        ));
    }
    Ok(())
}

impl<T: Mass> SystemSpec<T> {
    pub fn new(m: Arity, p: T, star: Dist<T>) -> Result<Self> {
        if p < T::zero() || p > T::one() || !p.is_finite() {
            return Err(DrError::validation(format!(
                "mixing weight must lie in [0, 1], got {}",
                p.render()
            )));
        }
        validate_star(&star)?;
        Ok(SystemSpec { m, p, star })
    }

    pub fn m(&self) -> Arity {
        self.m
    }

    pub fn p(&self) -> &T {
        &self.p
    }

    pub fn star(&self) -> &Dist<T> {
        &self.star
    }

    pub fn with_p(&self, p: T) -> Result<Self> {
        SystemSpec::new(self.m, p, self.star.clone())
    }
}

/// `(1 − p) δ_0 + p · star`.
pub fn mix<T: Mass>(spec: &SystemSpec<T>) -> Dist<T> {
    mix_law(spec.star(), spec.p())
}

/// Mixture of the point mass at 0 with an arbitrary law (no star checks).
pub fn mix_law<T: Mass>(law: &Dist<T>, p: &T) -> Dist<T> {
    let mut probs: Vec<T> = law.probs().iter().map(|x| p.clone() * x.clone()).collect();
    probs[0] = probs[0].clone() + (T::one() - p.clone());
    Dist::from_vec_unchecked(probs)
}

fn check_capacity(support: usize, m: Arity, hard_cap: usize) -> Result<()> {
    match support.checked_mul(m.as_usize()) {
        Some(k) if k <= hard_cap => Ok(()),
        _ => Err(DrError::capacity(format!(
            "m-fold sum of a law supported up to {support} exceeds the support cap {hard_cap}"
        ))),
    }
}

/// Law of the sum of `m` independent copies. Never truncates.
pub fn convolve_power<T: Mass>(d: &Dist<T>, m: Arity, hard_cap: usize) -> Result<Dist<T>> {
    check_capacity(d.support_bound(), m, hard_cap)?;
    Ok(Dist::from_vec_unchecked(power_vec(d.probs(), m.get())))
}

/// m-fold self-convolution of a mass vector by binary exponentiation.
pub(crate) fn power_vec<T: Mass>(a: &[T], m: u32) -> Vec<T> {
    let trim = |mut v: Vec<T>| {
        trim_trailing(&mut v);
        v
    };
    let mut result: Option<Vec<T>> = None;
    let mut base = a.to_vec();
    let mut e = m;
    loop {
        if e & 1 == 1 {
            result = Some(match result {
                None => base.clone(),
                Some(r) => trim(T::convolve(&r, &base, DEFAULT_CROSSOVER)),
            });
        }
        e >>= 1;
        if e == 0 {
            break;
        }
        base = trim(T::square(&base, DEFAULT_CROSSOVER));
    }
    result.expect("m ≥ 1")
}

/// One application of the map. Float results are renormalized to unit mass.
pub fn dr_step<T: Mass>(d: &Dist<T>, m: Arity, hard_cap: usize) -> Result<Dist<T>> {
    let conv = convolve_power(d, m, hard_cap)?.into_probs();
    Ok(Dist::from_vec_unchecked(shift_down(conv)))
}

/// `(S − 1)^+` applied to a law of S given as masses.
pub(crate) fn shift_down<T: Mass>(conv: Vec<T>) -> Vec<T> {
    let mut it = conv.into_iter();
    let c0 = it.next().unwrap_or_else(T::zero);
    let c1 = it.next().unwrap_or_else(T::zero);
    let mut out = Vec::with_capacity(it.len() + 1);
    out.push(c0 + c1);
    out.extend(it);
    T::renormalize(&mut out);
    out
}

/// `E(s^X)` by Horner evaluation.
pub fn pgf<T: Mass>(d: &Dist<T>, s: &T) -> T {
    d.probs()
        .iter()
        .rev()
        .fold(T::zero(), |acc, p| acc * s.clone() + p.clone())
}

/// r-th derivative of the generating function at `s`:
/// `Σ_k k(k−1)…(k−r+1) d(k) s^{k−r}`.
pub fn pgf_derivative<T: Mass>(d: &Dist<T>, r: usize, s: &T) -> T {
    let coeffs: Vec<T> = d
        .probs()
        .iter()
        .enumerate()
        .skip(r)
        .map(|(k, p)| {
            let falling: u64 = (0..r as u64).map(|i| k as u64 - i).product();
            T::from_u64(falling) * p.clone()
        })
        .collect();
    coeffs
        .iter()
        .rev()
        .fold(T::zero(), |acc, c| acc * s.clone() + c.clone())
}

/// `Σ_k d(k) k^j base^k` for `j ≤ 3`.
pub fn weighted_moment<T: Mass>(d: &Dist<T>, j: u32, base: &T) -> Result<T> {
    if j > 3 {
        return Err(DrError::domain(format!("moment order must be 0..=3, got {j}")));
    }
    let tilted = T::tilt(d.probs(), base)?;
    Ok(moment_of_tilted(&tilted, j))
}

pub(crate) fn moment_of_tilted<T: Mass>(tilted: &[T], j: u32) -> T {
    T::total(
        tilted
            .iter()
            .enumerate()
            .filter(|(k, w)| !w.is_zero() && (j == 0 || *k > 0))
            .map(|(k, w)| T::from_u64((k as u64).pow(j)) * w.clone()),
    )
}

/// `E(X^j m^X)` for j = 0..3 and the criticality gap.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentPanel<T> {
    pub h: T,
    pub h1: T,
    pub h2: T,
    pub h3: T,
    pub delta: T,
}

impl<T: Mass> MomentPanel<T> {
    /// `(m − 1)·h1 − h`.
    pub fn gap(h: &T, h1: &T, m: Arity) -> T {
        T::from_u64(m.get() as u64 - 1) * h1.clone() - h.clone()
    }
}

pub fn moment_panel<T: Mass>(d: &Dist<T>, m: Arity) -> Result<MomentPanel<T>> {
    let tilted = T::tilt(d.probs(), &m.mass())?;
    let h = moment_of_tilted(&tilted, 0);
    let h1 = moment_of_tilted(&tilted, 1);
    let h2 = moment_of_tilted(&tilted, 2);
    let h3 = moment_of_tilted(&tilted, 3);
    let delta = MomentPanel::gap(&h, &h1, m);
    Ok(MomentPanel {
        h,
        h1,
        h2,
        h3,
        delta,
    })
}

/// The criticality gap alone.
pub fn criticality_gap<T: Mass>(d: &Dist<T>, m: Arity) -> Result<T> {
    let tilted = T::tilt(d.probs(), &m.mass())?;
    Ok(MomentPanel::gap(
        &moment_of_tilted(&tilted, 0),
        &moment_of_tilted(&tilted, 1),
        m,
    ))
}

/// Moves all mass above `cap` to 0, giving a stochastic minorant. Returns the
/// new law and the expectation removed.
pub fn truncate_down<T: Mass>(d: &Dist<T>, cap: usize) -> (Dist<T>, T) {
    if d.support_bound() <= cap {
        return (d.clone(), T::zero());
    }
    let probs = d.probs();
    let moved = T::total(probs[cap + 1..].iter().cloned());
    let lost = T::total(
        probs
            .iter()
            .enumerate()
            .skip(cap + 1)
            .map(|(k, p)| T::from_u64(k as u64) * p.clone()),
    );
    let mut kept = probs[..=cap].to_vec();
    kept[0] = kept[0].clone() + moved;
    (Dist::from_vec_unchecked(kept), lost)
}

// ------------------------------------------------------------ storage ----

/// A law in either backend, as read from or written to JSON.
#[derive(Debug, Clone, PartialEq)]
pub enum LatticeDist {
    F64(Dist<f64>),
    Rational(Dist<BigRational>),
}

impl LatticeDist {
    pub fn backend(&self) -> Backend {
        match self {
            LatticeDist::F64(_) => Backend::F64,
            LatticeDist::Rational(_) => Backend::Rational,
        }
    }

    pub fn to_f64(&self) -> Dist<f64> {
        match self {
            LatticeDist::F64(d) => d.clone(),
            LatticeDist::Rational(d) => d.to_f64_dist(),
        }
    }

    /// Exact view; float masses become their dyadic rational values.
    pub fn to_exact(&self) -> Dist<BigRational> {
        match self {
            LatticeDist::F64(d) => d.to_exact(),
            LatticeDist::Rational(d) => d.clone(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DrError::Parse(format!("law JSON: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("law serialization cannot fail")
    }
}

impl From<Dist<f64>> for LatticeDist {
    fn from(d: Dist<f64>) -> Self {
        LatticeDist::F64(d)
    }
}

impl From<Dist<BigRational>> for LatticeDist {
    fn from(d: Dist<BigRational>) -> Self {
        LatticeDist::Rational(d)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LawDoc {
    probs: Vec<serde_json::Value>,
    backend: Backend,
}

fn rational_string(x: &BigRational) -> String {
    format!("{}/{}", x.numer(), x.denom())
}

impl Serialize for LatticeDist {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let doc = match self {
            LatticeDist::F64(d) => LawDoc {
                probs: d.probs().iter().map(|&p| serde_json::json!(p)).collect(),
                backend: Backend::F64,
            },
            LatticeDist::Rational(d) => LawDoc {
                probs: d
                    .probs()
                    .iter()
                    .map(|p| serde_json::Value::String(rational_string(p)))
                    .collect(),
                backend: Backend::Rational,
            },
        };
        doc.serialize(ser)
    }
}

fn parse_entry<T: Mass>(k: usize, v: &serde_json::Value) -> Result<T> {
    match v {
        serde_json::Value::String(s) => T::parse_mass(s),
        serde_json::Value::Number(n) => match T::BACKEND {
            Backend::F64 => Ok(T::parse_mass(&n.to_string())?),
            // Plain JSON numbers go through their decimal text, so "0.2" is 1/5.
            Backend::Rational => T::parse_mass(&n.to_string()),
        },
        other => Err(DrError::Parse(format!("probs[{k}]: expected number or string, got {other}"))),
    }
    .map_err(|e| DrError::Parse(format!("probs[{k}]: {e}")))
}

fn parse_probs<T: Mass>(values: &[serde_json::Value]) -> Result<Dist<T>> {
    let probs = values
        .iter()
        .enumerate()
        .map(|(k, v)| parse_entry::<T>(k, v))
        .collect::<Result<Vec<T>>>()?;
    Dist::new(probs)
}

impl<'de> Deserialize<'de> for LatticeDist {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let doc = LawDoc::deserialize(de)?;
        let law = match doc.backend {
            Backend::F64 => parse_probs::<f64>(&doc.probs).map(LatticeDist::F64),
            Backend::Rational => parse_probs::<BigRational>(&doc.probs).map(LatticeDist::Rational),
        };
        law.map_err(D::Error::custom)
    }
}

/// Shorthand used throughout the tests: a law from `(point, num, den)` atoms.
pub fn rational_law(atoms: &[(usize, i64, i64)]) -> Dist<BigRational> {
    Dist::from_fractions(atoms).expect("valid law")
}

/// Shorthand for an exact rational `num/den`.
pub fn ratio(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}
