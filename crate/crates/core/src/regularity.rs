//! Regularity functionals of a law `ζ` with respect to a growth exponent β:
//! `Λ = E(ζ³ m^ζ)`, `Ξ_k = E[(ζ∧k)² ((m−1)ζ − 1) m^ζ]`, and the largest
//! `χ ∈ (0, 1]` with `Ξ_k ≥ χ min{Λ, k^β}` for every `k ≥ 1`.

use rayon::prelude::*;
use serde::Serialize;

use crate::criticality::{PowerTailLaw, RhoMode, TruncatedFamily};
use crate::dist::{moment_of_tilted, Arity, Dist};
use crate::error::{DrError, Result};
use crate::mass::Mass;

fn xi_tilted<T: Mass>(tilted: &[T], m: Arity, k: usize) -> T {
    let mm1 = T::from_u64(m.get() as u64 - 1);
    T::total(tilted.iter().enumerate().skip(1).filter(|(_, w)| !w.is_zero()).map(|(j, w)| {
        let c = j.min(k) as u64;
        let kernel = mm1.clone() * T::from_u64(j as u64) - T::one();
        T::from_u64(c * c) * kernel * w.clone()
    }))
}

pub fn xi_k<T: Mass>(zeta: &Dist<T>, m: Arity, k: usize) -> Result<T> {
    if k == 0 {
        return Err(DrError::domain("Ξ_k needs k ≥ 1"));
    }
    Ok(xi_tilted(&T::tilt(zeta.probs(), &m.mass())?, m, k))
}

/// `E(ζ³ m^ζ)`.
pub fn lambda<T: Mass>(zeta: &Dist<T>, m: Arity) -> Result<T> {
    Ok(moment_of_tilted(&T::tilt(zeta.probs(), &m.mass())?, 3))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularityReport<T> {
    pub m: Arity,
    pub beta: f64,
    pub lambda: T,
    /// `Ξ_k` for k = 1..=K with K the support bound (at least 1); constant
    /// beyond K.
    pub xi: Vec<T>,
    pub chi_best: T,
    /// The k attaining `chi_best`; `None` when the bound is set by the
    /// saturated regime `min{Λ, k^β} = Λ`.
    pub binding_k: Option<usize>,
}

impl<T: Mass> RegularityReport<T> {
    pub fn xi_at(&self, k: usize) -> T {
        self.xi[k.clamp(1, self.xi.len()) - 1].clone()
    }

    /// `min{Λ, n^β}`.
    pub fn lambda_n(&self, n: u64) -> f64 {
        self.lambda.to_f64().min((n as f64).powf(self.beta))
    }
}

fn growth<T: Mass>(k: usize, beta: f64) -> Result<T> {
    if beta.fract() == 0.0 {
        Ok(T::from_u64(k as u64).powu(beta as u32))
    } else {
        T::from_f64((k as f64).powf(beta))
    }
}

/// Report from tilted weights `P(ζ = j) m^j` (entry 0 unused).
pub fn regularity_from_tilted<T: Mass>(tilted: &[T], m: Arity, beta: f64) -> Result<RegularityReport<T>> {
    if !(0.0..=2.0).contains(&beta) {
        return Err(DrError::domain(format!("β must lie in [0, 2], got {beta}")));
    }
    let lam = moment_of_tilted(tilted, 3);
    let top = tilted.len().saturating_sub(1).max(1);
    let xi: Vec<T> = (1..=top).map(|k| xi_tilted(tilted, m, k)).collect();

    // k ≤ K scanned directly; beyond K, Ξ_k is frozen while min{Λ, k^β}
    // increases to Λ, which it reaches at a finite k when β > 0.
    let mut best: Option<(T, Option<usize>)> = None;
    let mut offer = |ratio: T, at: Option<usize>| {
        if best.as_ref().map_or(true, |(b, _)| ratio < *b) {
            best = Some((ratio, at));
        }
    };
    for (i, x) in xi.iter().enumerate() {
        let k = i + 1;
        let g = growth::<T>(k, beta)?;
        let cap = if lam < g { lam.clone() } else { g };
        if cap.is_zero() {
            continue;
        }
        offer(x.clone() / cap, Some(k));
    }
    let saturated = xi[top - 1].clone();
    if !lam.is_zero() {
        let cap = if beta == 0.0 {
            if lam < T::one() {
                lam.clone()
            } else {
                T::one()
            }
        } else {
            lam.clone()
        };
        offer(saturated / cap, None);
    }
    let (chi, binding_k) = match best {
        Some((c, _)) if c <= T::zero() => (T::zero(), None),
        Some((c, at)) if c < T::one() => (c, at),
        Some((_, at)) => (T::one(), at),
        None => (T::zero(), None),
    };
    Ok(RegularityReport {
        m,
        beta,
        lambda: lam,
        xi,
        chi_best: chi,
        binding_k,
    })
}

pub fn regularity_report<T: Mass>(zeta: &Dist<T>, m: Arity, beta: f64) -> Result<RegularityReport<T>> {
    regularity_from_tilted(&T::tilt(zeta.probs(), &m.mass())?, m, beta)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularityRow {
    pub level: usize,
    pub p_m: f64,
    pub chi_best: f64,
    pub lambda: f64,
    /// Truncation level too close to the smallest support point for the
    /// family to resemble its tail.
    pub pre_asymptotic: bool,
}

/// `chi_best` at `β = 4 − α` of the critical truncated mixtures, one row
/// per truncation level.
pub fn truncated_regularity_scan(star: &PowerTailLaw, levels: &[usize], rho: RhoMode) -> Result<Vec<RegularityRow>> {
    let alpha = star.alpha();
    if !(2.0..=4.0).contains(&alpha) {
        return Err(DrError::domain(format!("the scan needs α ∈ [2, 4], got {alpha}")));
    }
    let beta = 4.0 - alpha;
    levels
        .par_iter()
        .map(|&level| {
            let fam = TruncatedFamily::new(star, level, rho)?;
            let rep = regularity_from_tilted(&fam.mixed_tilted(), star.m(), beta)?;
            Ok(RegularityRow {
                level,
                p_m: fam.p_m,
                chi_best: rep.chi_best,
                lambda: rep.lambda,
                pre_asymptotic: level < 2 * (fam.ell0 + 1),
            })
        })
        .collect()
}
