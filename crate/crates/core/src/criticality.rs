//! The critical mixing weight, power-tail star laws, and tail-truncated
//! families recalibrated to exact criticality.

use serde::{Deserialize, Serialize};

use crate::dist::{mix_law, validate_star, Arity, Dist};
use crate::error::{DrError, Result};
use crate::mass::Mass;
use crate::numeric::{compensated_sum, NeumaierSum};

/// `E{[(m−1)X − 1] m^X}` for a law given by tilted weights `w_k = P(X=k)·m^k`.
fn gap_coefficient_tilted<T: Mass>(tilted: &[T], m: Arity) -> T {
    let coef = m.mass::<T>() - T::one();
    T::total(tilted.iter().enumerate().filter(|(_, w)| !w.is_zero()).map(|(k, w)| {
        (coef.clone() * T::from_u64(k as u64) - T::one()) * w.clone()
    }))
}

/// `E{[(m−1)X* − 1] m^{X*}}`.
pub fn star_gap_coefficient<T: Mass>(star: &Dist<T>, m: Arity) -> Result<T> {
    let tilted = T::tilt(star.probs(), &m.mass())?;
    Ok(gap_coefficient_tilted(&tilted, m))
}

/// The mixing weight at which the mixed law has zero criticality gap.
pub fn critical_p<T: Mass>(star: &Dist<T>, m: Arity) -> Result<T> {
    validate_star(star)?;
    let c = star_gap_coefficient(star, m)?;
    Ok(T::one() / (T::one() + c))
}

/// Criticality gap of `(1−p)δ_0 + p·star`, which is `p(c + 1) − 1`.
pub fn delta_at<T: Mass>(star: &Dist<T>, m: Arity, p: &T) -> Result<T> {
    validate_star(star)?;
    if *p < T::zero() || *p > T::one() {
        return Err(DrError::domain(format!("p must lie in [0, 1], got {}", p.render())));
    }
    let c = star_gap_coefficient(star, m)?;
    Ok(p.clone() * (c + T::one()) - T::one())
}

/// How the atom at the smallest support point is treated by a truncated family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum RhoMode {
    /// Keep the atom.
    Keep,
    /// Send the atom to 0.
    Zero,
    /// Send it to 0 with probability `q`; `None` means `q = M^{−(α−2)}`.
    Randomized { q: Option<f64> },
}

impl std::str::FromStr for RhoMode {
    type Err = DrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keep" => Ok(RhoMode::Keep),
            "zero" => Ok(RhoMode::Zero),
            "randomized" => Ok(RhoMode::Randomized { q: None }),
            other => match other.strip_prefix("randomized:") {
                Some(q) => {
                    let q: f64 = q
                        .parse()
                        .map_err(|_| DrError::Parse(format!("bad randomization weight '{q}'")))?;
                    Ok(RhoMode::Randomized { q: Some(q) })
                }
                None => Err(DrError::Parse(format!(
                    "unknown rho mode '{other}' (keep, zero, randomized[:q])"
                ))),
            },
        }
    }
}

/// Probability of sending the smallest atom to 0.
fn rho_zero_weight(mode: RhoMode, level: usize, alpha: Option<f64>) -> Result<f64> {
    let q = match mode {
        RhoMode::Keep => 0.0,
        RhoMode::Zero => 1.0,
        RhoMode::Randomized { q: Some(q) } => q,
        RhoMode::Randomized { q: None } => {
            let alpha = alpha.ok_or_else(|| {
                DrError::validation("randomized mode needs an explicit q for laws without a tail index")
            })?;
            if alpha <= 2.0 {
                0.0
            } else {
                (level as f64).powf(-(alpha - 2.0))
            }
        }
    };
    if !(0.0..=1.0).contains(&q) {
        return Err(DrError::domain(format!("randomization weight must be in [0, 1], got {q}")));
    }
    Ok(q)
}

/// Tail-truncated version of a finite star law, in any backend.
///
/// Returns the law of `ϱ·1{X*=ℓ0} + X*·1{ℓ0 < X* ≤ M}` (its missing mass sits
/// at 0) together with its critical weight. `q` is the probability that ϱ = 0.
pub fn truncate_star<T: Mass>(star: &Dist<T>, m: Arity, level: usize, q: &T) -> Result<(Dist<T>, T)> {
    validate_star(star)?;
    let ell0 = (1..=star.support_bound())
        .find(|&k| !star.mass_at(k).is_zero())
        .expect("validated star has support");
    if level <= ell0 {
        return Err(DrError::domain(format!(
            "truncation level {level} must exceed the smallest support point {ell0}"
        )));
    }
    let top = level.min(star.support_bound());
    let mut probs = vec![T::zero(); top + 1];
    let p_ell0 = star.mass_at(ell0);
    probs[ell0] = (T::one() - q.clone()) * p_ell0.clone();
    for (k, slot) in probs.iter_mut().enumerate().take(top + 1).skip(ell0 + 1) {
        *slot = star.mass_at(k);
    }
    probs[0] = star.tail_from(level + 1) + q.clone() * p_ell0;
    let law = Dist::new(probs)?;
    let tilted = T::tilt(law.probs(), &m.mass())?;
    let c = gap_coefficient_tilted(&tilted, m);
    Ok((law, T::one() / (T::one() + c)))
}

/// `Σ_{k≥1} k^{−s}` for `s > 1`: direct sum to `N` plus an Euler–Maclaurin tail.
fn zeta(s: f64) -> f64 {
    const N: usize = 20_000;
    let mut acc: NeumaierSum = (1..=N).map(|k| (k as f64).powf(-s)).collect();
    let n = N as f64;
    acc.add(n.powf(1.0 - s) / (s - 1.0));
    acc.add(-0.5 * n.powf(-s));
    acc.add(s * n.powf(-s - 1.0) / 12.0);
    acc.add(-s * (s + 1.0) * (s + 2.0) * n.powf(-s - 3.0) / 720.0);
    acc.value()
}

/// Star law with `P(k) = m^{−k} k^{−α} / Z` on `1..=K_max`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerTailLaw {
    m: Arity,
    alpha: f64,
    z: f64,
    k_max: usize,
    /// ln of the mass the infinite law puts above `K_max`, relative to `Z`.
    tail_ln: f64,
}

impl PowerTailLaw {
    pub fn new(m: Arity, alpha: f64, k_max: usize) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(DrError::validation(format!("tail index must be finite and ≥ 0, got {alpha}")));
        }
        if k_max < 2 {
            return Err(DrError::validation("power-tail support cap must be at least 2"));
        }
        let ln_m = m.as_f64().ln();
        let mut acc = NeumaierSum::new();
        for k in 1..=k_max {
            let term = (-(k as f64) * ln_m - alpha * (k as f64).ln()).exp();
            acc.add(term);
            if term < 1e-20 * acc.value() {
                break;
            }
        }
        let z = acc.value();
        let kf = k_max as f64;
        // geometric bound on Σ_{k>K} m^{−k} k^{−α}
        let tail_ln = -(kf + 1.0) * ln_m - alpha * (kf + 1.0).ln() - (1.0 - 1.0 / m.as_f64()).ln() - z.ln();
        Ok(PowerTailLaw {
            m,
            alpha,
            z,
            k_max,
            tail_ln,
        })
    }

    pub fn m(&self) -> Arity {
        self.m
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// Normalization `c0 = 1/Z`.
    pub fn c0(&self) -> f64 {
        1.0 / self.z
    }

    /// Upper bound on the natural log of the mass beyond `K_max`.
    pub fn tail_mass_ln(&self) -> f64 {
        self.tail_ln
    }

    /// `P(k)·m^k = k^{−α}/Z`, representable far beyond where `P(k)` underflows.
    pub fn tilted(&self, k: usize) -> f64 {
        if k == 0 || k > self.k_max {
            0.0
        } else {
            (-self.alpha * (k as f64).ln()).exp() / self.z
        }
    }

    pub fn prob(&self, k: usize) -> f64 {
        if k == 0 || k > self.k_max {
            0.0
        } else {
            (-(k as f64) * self.m.as_f64().ln() - self.alpha * (k as f64).ln() - self.z.ln()).exp()
        }
    }

    /// `P(X* > level)`.
    pub fn tail_above(&self, level: usize) -> f64 {
        compensated_sum(
            (level + 1..=self.k_max)
                .map(|k| self.prob(k))
                .take_while(|&p| p > 0.0),
        )
    }

    /// Dense float law. Masses below the float flush threshold are moved to 0;
    /// the returned value is the expectation removed that way.
    pub fn law(&self) -> (Dist<f64>, f64) {
        let mut probs = vec![0.0];
        for k in 1..=self.k_max {
            let p = self.prob(k);
            if p == 0.0 {
                break;
            }
            probs.push(p);
        }
        let total = compensated_sum(probs.iter().copied());
        let mut lost = NeumaierSum::new();
        for k in probs.len()..=self.k_max.min(probs.len() + 4000) {
            lost.add(k as f64 * self.prob(k));
        }
        probs[0] = (1.0 - total).max(0.0);
        let d = Dist::from_vec_unchecked(probs);
        let (d, flushed) = d.flush_small();
        (d, lost.value() + flushed)
    }

    /// Critical weight of the untruncated law. Zero when `α ≤ 2`, where
    /// `E(X* m^{X*})` diverges.
    pub fn critical_p(&self) -> f64 {
        if self.alpha <= 2.0 {
            return 0.0;
        }
        let c = ((self.m.as_f64() - 1.0) * zeta(self.alpha - 1.0) - zeta(self.alpha)) * self.c0();
        1.0 / (1.0 + c)
    }
}

/// A tail-truncated power-tail star law recalibrated to criticality.
#[derive(Debug, Clone, Serialize)]
pub struct TruncatedFamily {
    pub level: usize,
    pub ell0: usize,
    pub rho_mode: RhoMode,
    /// Probability that the atom at `ell0` is sent to 0.
    pub q: f64,
    /// `P(X^{(M)} = k)·m^k` for k = 0..=M (entry 0 is the mass at 0).
    pub tilted: Vec<f64>,
    pub p_m: f64,
    pub a_m: f64,
    m: Arity,
}

impl TruncatedFamily {
    pub fn new(star: &PowerTailLaw, level: usize, rho_mode: RhoMode) -> Result<Self> {
        let ell0 = 1;
        if level <= ell0 {
            return Err(DrError::domain(format!(
                "truncation level {level} must exceed the smallest support point {ell0}"
            )));
        }
        let m = star.m();
        let mf = m.as_f64();
        let q = rho_zero_weight(rho_mode, level, Some(star.alpha()))?;
        let top = level.min(star.k_max());
        let mut tilted = vec![0.0; top + 1];
        let p_ell0 = star.prob(ell0);
        tilted[ell0] = (1.0 - q) * star.tilted(ell0);
        for (k, w) in tilted.iter_mut().enumerate().skip(ell0 + 1) {
            *w = star.tilted(k);
        }
        tilted[0] = star.tail_above(level) + q * p_ell0;
        let c = gap_coefficient_tilted(&tilted, m);
        let kernel = ((mf - 1.0) * ell0 as f64 - 1.0) * mf.powi(ell0 as i32) + 1.0;
        Ok(TruncatedFamily {
            level,
            ell0,
            rho_mode,
            q,
            tilted,
            p_m: 1.0 / (1.0 + c),
            a_m: q * kernel * p_ell0,
            m,
        })
    }

    /// Tilted weights of the critical mixture `(1−p_M)δ_0 + p_M·X^{(M)}`.
    pub fn mixed_tilted(&self) -> Vec<f64> {
        let mut w: Vec<f64> = self.tilted.iter().map(|x| self.p_m * x).collect();
        w[0] += 1.0 - self.p_m;
        w
    }

    /// Dense float law of `X^{(M)}`, flushed; returns the expectation removed.
    pub fn law(&self) -> (Dist<f64>, f64) {
        let ln_m = self.m.as_f64().ln();
        let mut probs: Vec<f64> = self
            .tilted
            .iter()
            .enumerate()
            .map(|(k, &w)| if k == 0 { w } else { (w.ln() - k as f64 * ln_m).exp() })
            .collect();
        let total = compensated_sum(probs.iter().copied());
        probs[0] += 1.0 - total;
        let lost = compensated_sum(
            self.tilted
                .iter()
                .enumerate()
                .zip(&probs)
                .filter(|((k, w), p)| *k > 0 && **w > 0.0 && **p == 0.0)
                .map(|((k, w), _)| (w.ln() - k as f64 * ln_m + (k as f64).ln()).exp()),
        );
        let (d, flushed) = Dist::from_vec_unchecked(probs).flush_small();
        (d, lost + flushed)
    }

    /// Criticality gap of the mixture at `p_M`; zero up to roundoff.
    pub fn mixed_gap(&self) -> f64 {
        let w = self.mixed_tilted();
        gap_coefficient_tilted(&w, self.m)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PmRow {
    pub level: usize,
    pub p_m: f64,
    pub gap: f64,
    pub scaled_gap: f64,
}

/// `p_M` along increasing truncation levels with the gap to `p_c` rescaled
/// by its predicted order: `M^{α−2}` for `α > 2`, `(m−1)c0·ln M` at `α = 2`.
pub fn pm_asymptotics_scan(star: &PowerTailLaw, levels: &[usize], rho_mode: RhoMode) -> Result<Vec<PmRow>> {
    use rayon::prelude::*;
    let alpha = star.alpha();
    if alpha < 2.0 {
        return Err(DrError::domain(format!("the p_M scan needs α ≥ 2, got {alpha}")));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DrError::validation("truncation levels must be strictly increasing"));
    }
    let p_c = star.critical_p();
    let mf = star.m().as_f64();
    levels
        .par_iter()
        .map(|&level| {
            let fam = TruncatedFamily::new(star, level, rho_mode)?;
            let gap = fam.p_m - p_c;
            let scaled_gap = if alpha > 2.0 {
                gap * (level as f64).powf(alpha - 2.0)
            } else {
                fam.p_m * (mf - 1.0) * star.c0() * (level as f64).ln()
            };
            Ok(PmRow {
                level,
                p_m: fam.p_m,
                gap,
                scaled_gap,
            })
        })
        .collect()
}

/// Mixed law at `p_M` for a finite star in any backend; used by exact checks.
pub fn critical_truncated_mixture<T: Mass>(star: &Dist<T>, m: Arity, level: usize, q: &T) -> Result<Dist<T>> {
    let (law, p) = truncate_star(star, m, level, q)?;
    Ok(mix_law(&law, &p))
}
