//! Two-sided enclosures of the free energy `lim E(X_n)/m^n`, scans above the
//! critical point, and the log-log exponent regression.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criticality::critical_p;
use crate::dist::{mix, Dist, SystemSpec, DEFAULT_HARD_CAP};
use crate::error::{DrError, Result};
use crate::evolution::{Evolver, TruncationPolicy};
use crate::mass::Mass;
use crate::numeric::{linear_fit, LogReal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeStatus {
    Pinched,
    BudgetLimited,
    IterationLimited,
}

impl std::fmt::Display for FeStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeStatus::Pinched => "pinched",
            FeStatus::BudgetLimited => "budget-limited",
            FeStatus::IterationLimited => "iteration-limited",
        })
    }
}

/// Rigorous enclosure `lower ≤ F ≤ upper`, kept in log scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FreeEnergyBounds {
    pub lower: LogReal,
    pub upper: LogReal,
    pub n_used: usize,
    /// `Σ_i ΔE_i / m^i` over the run.
    pub ledger_cost: LogReal,
    pub status: FeStatus,
}

impl FreeEnergyBounds {
    pub fn is_pinched(&self) -> bool {
        self.status == FeStatus::Pinched
    }

    /// ln of the geometric midpoint; `None` when the lower bound is 0.
    pub fn midpoint_ln(&self) -> Option<f64> {
        (!self.lower.is_zero()).then(|| 0.5 * (self.lower.ln() + self.upper.ln()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreeEnergyOptions {
    /// Target `(upper − lower)/upper`.
    pub tol_rel: f64,
    /// For systems that are not supercritical: stop once `upper ≤ tol_abs`.
    pub tol_abs: f64,
    pub n_max: usize,
    /// Total truncation budget `Σ ΔE_i/m^i`.
    pub budget: f64,
    pub hard_cap: usize,
}

impl Default for FreeEnergyOptions {
    fn default() -> Self {
        FreeEnergyOptions {
            tol_rel: 1e-3,
            tol_abs: 1e-3,
            n_max: 5000,
            budget: 1e-300,
            hard_cap: DEFAULT_HARD_CAP,
        }
    }
}

impl FreeEnergyOptions {
    pub fn with_tol(mut self, tol_rel: f64) -> Self {
        self.tol_rel = tol_rel;
        self
    }

    pub fn with_n_max(mut self, n_max: usize) -> Self {
        self.n_max = n_max;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol_rel > 0.0) {
            return Err(DrError::validation(format!("tol_rel must be positive, got {}", self.tol_rel)));
        }
        if !(self.tol_abs >= 0.0) || !(self.budget >= 0.0) {
            return Err(DrError::validation("tol_abs and budget must be nonnegative"));
        }
        Ok(())
    }
}

/// Running sandwich over a trajectory; shared by [`free_energy`] and tests.
#[derive(Debug, Clone)]
pub struct Sandwich {
    ln_m: f64,
    inv_m1: f64,
    pub lower: LogReal,
    /// `min_n E(X_n)/m^n`, before adding the ledger cost.
    pub upper_trace: LogReal,
    pub cost: LogReal,
}

impl Sandwich {
    pub fn new(m: f64) -> Self {
        Sandwich {
            ln_m: m.ln(),
            inv_m1: 1.0 / (m - 1.0),
            lower: LogReal::ZERO,
            upper_trace: LogReal::from_ln(f64::INFINITY),
            cost: LogReal::ZERO,
        }
    }

    /// Folds in generation `n` with expectation `e` and ledger cost `cost`.
    pub fn push(&mut self, n: usize, e: f64, cost: LogReal) {
        let scale = n as f64 * self.ln_m;
        self.cost = self.cost.add(cost);
        self.upper_trace = self.upper_trace.min(LogReal::from_ln(LogReal::from_value(e).ln() - scale));
        let lifted = e - self.inv_m1;
        if lifted > 0.0 {
            self.lower = self.lower.max(LogReal::from_ln(lifted.ln() - scale));
        }
    }

    pub fn upper(&self) -> LogReal {
        self.upper_trace.add(self.cost)
    }

    pub fn relative_gap(&self) -> f64 {
        let up = self.upper();
        if up.is_zero() {
            return 0.0;
        }
        1.0 - (self.lower.ln() - up.ln()).exp()
    }
}

/// Encloses the free energy of the system by iterating a minorant trajectory
/// with a priced truncation ledger.
pub fn free_energy<T: Mass>(spec: &SystemSpec<T>, opts: &FreeEnergyOptions) -> Result<FreeEnergyBounds> {
    opts.validate()?;
    let m = spec.m();
    let d0 = mix(spec);
    let supercritical = crate::dist::criticality_gap(&d0, m)?.to_f64() > 1e-12;
    let policy = TruncationPolicy::budgeted(opts.budget).with_hard_cap(opts.hard_cap);
    let (mut ev, rec) = Evolver::start(&d0, m, policy)?;
    let mut sw = Sandwich::new(m.as_f64());
    sw.push(0, rec.expectation.to_f64(), rec.cost);
    let mut forced = rec.forced;
    let finish = |sw: &Sandwich, n: usize, status| FreeEnergyBounds {
        lower: sw.lower,
        upper: sw.upper(),
        n_used: n,
        ledger_cost: sw.cost,
        status,
    };
    loop {
        let n = ev.generation();
        let upper = sw.upper();
        if !sw.lower.is_zero() && sw.relative_gap() <= opts.tol_rel {
            return Ok(finish(&sw, n, FeStatus::Pinched));
        }
        if !supercritical && upper.value() <= opts.tol_abs {
            return Ok(finish(&sw, n, FeStatus::Pinched));
        }
        if upper.is_zero() {
            return Ok(finish(&sw, n, FeStatus::Pinched));
        }
        if forced && sw.cost.ln() > upper.ln() + opts.tol_rel.ln() {
            return Ok(finish(&sw, n, FeStatus::BudgetLimited));
        }
        if n >= opts.n_max {
            let status = if forced {
                FeStatus::BudgetLimited
            } else {
                FeStatus::IterationLimited
            };
            return Ok(finish(&sw, n, status));
        }
        let rec = ev.advance()?;
        forced |= rec.forced;
        sw.push(rec.n, rec.expectation.to_f64(), rec.cost);
    }
}

/// Free-energy enclosures at `p = p_c + ε` for each ε (float backend).
pub fn epsilon_scan(
    star: &Dist<f64>,
    m: crate::dist::Arity,
    epsilons: &[f64],
    opts: &FreeEnergyOptions,
) -> Result<Vec<(f64, FreeEnergyBounds)>> {
    let p_c = critical_p(star, m)?;
    epsilons
        .par_iter()
        .map(|&eps| {
            if !(eps > 0.0) {
                return Err(DrError::domain(format!("ε must be positive, got {eps}")));
            }
            let mut p = p_c + eps;
            if p > 1.0 {
                if p - 1.0 > 1e-12 {
                    return Err(DrError::domain(format!("p_c + ε = {p} exceeds 1")));
                }
                p = 1.0;
            }
            let spec = SystemSpec::new(m, p, star.clone())?;
            Ok((eps, free_energy(&spec, opts)?))
        })
        .collect()
}

/// `n` points spaced evenly in log scale from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo) || n == 0 {
        return Err(DrError::validation(format!("bad log grid {lo}..{hi} with {n} points")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct FitPoint {
    pub epsilon: f64,
    pub ln_f_lower: f64,
    pub ln_f_upper: f64,
}

/// Slope of `ln ln(1/F)` against `ln(1/ε)`.
#[derive(Debug, Clone, Serialize)]
pub struct ExponentFit {
    pub points: Vec<FitPoint>,
    pub nu_hat: f64,
    pub intercept: f64,
    /// Regression standard error of the slope.
    pub ci: f64,
    /// Half-width of the slope range swept by moving each point inside its enclosure.
    pub enclosure_halfwidth: f64,
    pub window: (f64, f64),
}

pub fn fit_exponent(scan: &[(f64, FreeEnergyBounds)]) -> Result<ExponentFit> {
    let points: Vec<FitPoint> = scan
        .iter()
        .filter(|(eps, b)| *eps > 0.0 && b.is_pinched() && !b.lower.is_zero() && b.upper.ln() < -1.0)
        .map(|(eps, b)| FitPoint {
            epsilon: *eps,
            ln_f_lower: b.lower.ln(),
            ln_f_upper: b.upper.ln(),
        })
        .collect();
    if points.len() < 4 {
        return Err(DrError::Fit(format!(
            "need at least 4 pinched points with F < 1/e, have {}",
            points.len()
        )));
    }
    let x: Vec<f64> = points.iter().map(|p| -p.epsilon.ln()).collect();
    let y: Vec<f64> = points
        .iter()
        .map(|p| (-0.5 * (p.ln_f_lower + p.ln_f_upper)).ln())
        .collect();
    let (nu_hat, intercept, ci) =
        linear_fit(&x, &y).ok_or_else(|| DrError::Fit("degenerate ε grid".into()))?;
    let mean_x = x.iter().sum::<f64>() / x.len() as f64;
    let sxx: f64 = x.iter().map(|xi| (xi - mean_x).powi(2)).sum();
    let enclosure_halfwidth = points
        .iter()
        .zip(&x)
        .map(|(p, xi)| {
            let spread = (-p.ln_f_lower).ln() - (-p.ln_f_upper).ln();
            ((xi - mean_x) / sxx).abs() * spread / 2.0
        })
        .sum();
    let lo = points.iter().map(|p| p.epsilon).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.epsilon).fold(0.0, f64::max);
    Ok(ExponentFit {
        points,
        nu_hat,
        intercept,
        ci,
        enclosure_halfwidth,
        window: (lo, hi),
    })
}
