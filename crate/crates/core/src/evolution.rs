//! Iterating the map under a truncation policy, and the diagnostic sequences
//! attached to a trajectory (criticality gap, Θ, φ and the third-order
//! combination `𝒟`).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dist::{
    dr_step, moment_of_tilted, pgf, pgf_derivative, truncate_down, Arity, Dist,
    MomentPanel, DEFAULT_HARD_CAP,
};
use crate::error::{DrError, Result};
use crate::mass::Mass;
use crate::numeric::{compensated_sum, LogReal};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TruncationMode {
    None,
    FixedCap { cap: usize },
    /// Total allowed `Σ_i ΔE_i / m^i` over the run.
    Budgeted { total_budget: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    pub mode: TruncationMode,
    pub hard_cap: usize,
}

impl TruncationPolicy {
    pub fn none() -> Self {
        TruncationPolicy {
            mode: TruncationMode::None,
            hard_cap: DEFAULT_HARD_CAP,
        }
    }

    pub fn fixed_cap(cap: usize) -> Self {
        TruncationPolicy {
            mode: TruncationMode::FixedCap { cap },
            hard_cap: DEFAULT_HARD_CAP,
        }
    }

    pub fn budgeted(total_budget: f64) -> Self {
        TruncationPolicy {
            mode: TruncationMode::Budgeted { total_budget },
            hard_cap: DEFAULT_HARD_CAP,
        }
    }

    pub fn with_hard_cap(mut self, hard_cap: usize) -> Self {
        self.hard_cap = hard_cap;
        self
    }

    pub fn validate(&self, m: Arity) -> Result<()> {
        if self.hard_cap < 1 {
            return Err(DrError::validation("hard_cap must be at least 1"));
        }
        match self.mode {
            TruncationMode::Budgeted { total_budget } if !(total_budget >= 0.0) => Err(
                DrError::validation(format!("total_budget must be ≥ 0, got {total_budget}")),
            ),
            TruncationMode::FixedCap { cap } if cap.saturating_mul(m.as_usize()) > self.hard_cap => {
                Err(DrError::validation(format!(
                    "fixed cap {cap} times m = {m} exceeds hard_cap {}",
                    self.hard_cap
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.mode, TruncationMode::None)
    }
}

/// Per-generation summary emitted by [`Evolver`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<T> {
    pub n: usize,
    pub expectation: T,
    pub p0: T,
    /// `None` when `E(m^X)` is not representable in the backend.
    pub delta: Option<T>,
    pub h_m: Option<T>,
    /// Expectation removed at this generation (policy cut plus float flush).
    pub lost: T,
    /// `lost / m^n`.
    pub cost: LogReal,
    /// The policy had to cut beyond its budget to respect `hard_cap`.
    pub forced: bool,
}

/// Step-by-step iteration that keeps only the current law.
#[derive(Debug, Clone)]
pub struct Evolver<T> {
    m: Arity,
    policy: TruncationPolicy,
    law: Dist<T>,
    n: usize,
    remaining_budget: f64,
}

impl<T: Mass> Evolver<T> {
    /// Applies the policy to `d0` and returns the generation-0 record.
    pub fn start(d0: &Dist<T>, m: Arity, policy: TruncationPolicy) -> Result<(Self, StepRecord<T>)> {
        policy.validate(m)?;
        let remaining_budget = match policy.mode {
            TruncationMode::Budgeted { total_budget } => total_budget,
            _ => 0.0,
        };
        let mut ev = Evolver {
            m,
            policy,
            law: d0.clone(),
            n: 0,
            remaining_budget,
        };
        let rec = ev.settle()?;
        Ok((ev, rec))
    }

    pub fn law(&self) -> &Dist<T> {
        &self.law
    }

    pub fn generation(&self) -> usize {
        self.n
    }

    pub fn advance(&mut self) -> Result<StepRecord<T>> {
        self.law = dr_step(&self.law, self.m, self.policy.hard_cap)?;
        self.n += 1;
        self.settle()
    }

    /// Flushes, applies the policy cut to the current law, and summarizes it.
    fn settle(&mut self) -> Result<StepRecord<T>> {
        let (flushed, mut lost) = self.law.flush_small();
        let mut law = flushed;
        let mut forced = false;
        let m = self.m.as_usize();
        let ln_m = self.m.as_f64().ln();
        match self.policy.mode {
            TruncationMode::None => {}
            TruncationMode::FixedCap { cap } => {
                let (cut, l) = truncate_down(&law, cap);
                law = cut;
                lost = lost + l;
            }
            TruncationMode::Budgeted { .. } => {
                let allowance_ln = self.remaining_budget.ln()
                    + ((self.m.as_f64() - 1.0) / self.m.as_f64()).ln()
                    + self.n as f64 * ln_m;
                let allowed = allowance_ln.min(700.0).exp();
                let mut cap = largest_affordable_cut(law.probs(), allowed);
                let room = self.policy.hard_cap / m;
                if cap > room {
                    cap = room;
                    forced = true;
                }
                let (cut, l) = truncate_down(&law, cap);
                law = cut;
                let spent = (l.to_f64().ln() - self.n as f64 * ln_m).exp();
                if spent.is_finite() {
                    self.remaining_budget = (self.remaining_budget - spent).max(0.0);
                }
                lost = lost + l;
            }
        }
        self.law = law;
        let cost = LogReal::from_ln(lost.to_f64().ln() - self.n as f64 * ln_m);
        let (delta, h_m) = match T::tilt(self.law.probs(), &self.m.mass()) {
            Ok(tilted) => {
                let h = moment_of_tilted(&tilted, 0);
                let h1 = moment_of_tilted(&tilted, 1);
                let d = MomentPanel::gap(&h, &h1, self.m);
                if d.is_finite() && h.is_finite() {
                    (Some(d), Some(h))
                } else {
                    (None, None)
                }
            }
            Err(_) => (None, None),
        };
        Ok(StepRecord {
            n: self.n,
            expectation: self.law.expectation(),
            p0: self.law.mass_at(0),
            delta,
            h_m,
            lost,
            cost,
            forced,
        })
    }
}

/// Smallest cap whose removed tail expectation `Σ_{k>cap} k·d(k)` fits in
/// `allowed`.
fn largest_affordable_cut<T: Mass>(probs: &[T], allowed: f64) -> usize {
    let mut cap = probs.len() - 1;
    let mut acc = 0.0f64;
    let mut comp = 0.0f64;
    while cap > 0 {
        let term = cap as f64 * probs[cap].to_f64();
        // Neumaier step, inlined to keep the running value
        let t = acc + term;
        if acc.abs() >= term.abs() {
            comp += (acc - t) + term;
        } else {
            comp += (term - t) + acc;
        }
        if t + comp > allowed {
            break;
        }
        acc = t;
        cap -= 1;
    }
    cap
}

/// A full trajectory `X_0, …, X_n` with its per-generation summaries.
#[derive(Debug, Clone)]
pub struct EvolutionTrace<T> {
    pub m: Arity,
    pub policy: TruncationPolicy,
    pub laws: Vec<Dist<T>>,
    pub deltas: Vec<Option<T>>,
    pub h_m: Vec<Option<T>>,
    pub expectations: Vec<T>,
    pub p0s: Vec<T>,
    pub ledger: Vec<T>,
    pub forced_cut: bool,
    /// The initial law charges no value ≥ 2, so the system dies out trivially.
    pub trivial_system: bool,
}

pub fn evolve<T: Mass>(d0: &Dist<T>, m: Arity, n: usize, policy: TruncationPolicy) -> Result<EvolutionTrace<T>> {
    let (mut ev, rec0) = Evolver::start(d0, m, policy)?;
    let mut trace = EvolutionTrace {
        m,
        policy,
        laws: Vec::with_capacity(n + 1),
        deltas: Vec::with_capacity(n + 1),
        h_m: Vec::with_capacity(n + 1),
        expectations: Vec::with_capacity(n + 1),
        p0s: Vec::with_capacity(n + 1),
        ledger: Vec::with_capacity(n + 1),
        forced_cut: false,
        trivial_system: d0.tail_from(2).is_zero(),
    };
    trace.push(ev.law().clone(), rec0);
    for _ in 0..n {
        let rec = ev.advance()?;
        trace.push(ev.law().clone(), rec);
    }
    Ok(trace)
}

impl<T: Mass> EvolutionTrace<T> {
    fn push(&mut self, law: Dist<T>, rec: StepRecord<T>) {
        self.laws.push(law);
        self.deltas.push(rec.delta);
        self.h_m.push(rec.h_m);
        self.expectations.push(rec.expectation);
        self.p0s.push(rec.p0);
        self.ledger.push(rec.lost);
        self.forced_cut |= rec.forced;
    }

    pub fn generations(&self) -> usize {
        self.laws.len() - 1
    }

    /// `Σ_i ΔE_i / m^i`.
    pub fn ledger_cost(&self) -> f64 {
        let ln_m = self.m.as_f64().ln();
        compensated_sum(
            self.ledger
                .iter()
                .enumerate()
                .map(|(i, l)| (l.to_f64().ln() - i as f64 * ln_m).exp()),
        )
    }

    /// CSV with columns `n,E,P0,delta,H_m,ledger`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,E,P0,delta,H_m,ledger\n");
        let opt = |x: &Option<T>| x.as_ref().map_or_else(|| "NaN".to_string(), |v| v.render());
        for i in 0..self.laws.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                i,
                self.expectations[i].render(),
                self.p0s[i].render(),
                opt(&self.deltas[i]),
                opt(&self.h_m[i]),
                self.ledger[i].render()
            );
        }
        out
    }
}

/// Largest relative residual of `δ_{n+1} = H_n(m)^{m−1} δ_n` along an
/// untruncated trace.
pub fn delta_check<T: Mass>(trace: &EvolutionTrace<T>) -> Result<T> {
    if !trace.policy.is_exact() {
        return Err(DrError::precondition(
            "the gap recursion is exact only on traces evolved without truncation",
        ));
    }
    let floor = T::parse_mass("1e-300")?;
    let e = trace.m.get() - 1;
    let mut worst = T::zero();
    for i in 0..trace.generations() {
        let (Some(d), Some(h), Some(next)) = (&trace.deltas[i], &trace.h_m[i], &trace.deltas[i + 1])
        else {
            return Err(DrError::range(format!(
                "E(m^X) at generation {} is not representable in this backend",
                i + 1
            )));
        };
        let predicted = h.powu(e) * d.clone();
        let resid = (next.clone() - predicted).abs_of();
        let scale = T::max_of(next.abs_of(), floor.clone());
        worst = T::max_of(worst, resid / scale);
    }
    Ok(worst)
}

fn check_theta_domain<T: Mass>(m: Arity, s: &T) -> Result<()> {
    if *s < T::zero() || *s >= m.mass::<T>() {
        return Err(DrError::domain(format!(
            "Θ needs 0 ≤ s < m = {m}, got s = {}",
            s.render()
        )));
    }
    Ok(())
}

/// Θ(s) through the expectation form
/// `E{m^X [(m−1)X−1] (1−t)² Σ_{j<X} (j+1) t^j} + (delta − δ(d))`, `t = s/m`.
///
/// The correction term vanishes when `delta` is the law's own gap; other
/// values reproduce the derivative form with that constant.
pub fn theta<T: Mass>(d: &Dist<T>, m: Arity, s: &T, delta: &T) -> Result<T> {
    check_theta_domain(m, s)?;
    let mm: T = m.mass();
    let t = s.clone() / mm.clone();
    let one_minus_t = T::one() - t.clone();
    let tilted = T::tilt(d.probs(), &mm)?;
    let coef = mm.clone() - T::one();
    let mut partial = T::zero();
    let mut t_pow = T::one();
    let mut terms = Vec::with_capacity(tilted.len());
    for (k, w) in tilted.iter().enumerate().skip(1) {
        partial = partial + T::from_u64(k as u64) * t_pow.clone();
        t_pow = t_pow * t.clone();
        if w.is_zero() {
            continue;
        }
        let factor = coef.clone() * T::from_u64(k as u64) - T::one();
        terms.push(w.clone() * factor * partial.clone());
    }
    let body = T::total(terms) * one_minus_t.clone() * one_minus_t;
    let own = MomentPanel::gap(&moment_of_tilted(&tilted, 0), &moment_of_tilted(&tilted, 1), m);
    let value = body + (delta.clone() - own);
    if !value.is_finite() {
        return Err(DrError::range("Θ is not representable in this backend"));
    }
    Ok(value)
}

/// Θ(s) through the derivative form; cancels badly near `s = m`.
pub fn theta_derivative<T: Mass>(d: &Dist<T>, m: Arity, s: &T, delta: &T) -> Result<T> {
    check_theta_domain(m, s)?;
    let mm: T = m.mass();
    let h = pgf(d, s);
    let h1 = pgf_derivative(d, 1, s);
    let h2 = pgf_derivative(d, 2, s);
    let two = T::from_u64(2);
    let first = h - s.clone() * (s.clone() - T::one()) * h1.clone();
    let weight = (mm.clone() - T::one()) * (mm.clone() - s.clone()) / mm;
    let second = two * s.clone() * h1 + s.clone() * s.clone() * h2;
    Ok(first - weight * second + delta.clone())
}

/// φ(s) = `(m−1) s H'(s) − H(s)`.
pub fn phi<T: Mass>(d: &Dist<T>, m: Arity, s: &T) -> Result<T> {
    if *s <= T::zero() {
        return Err(DrError::domain("φ needs s > 0"));
    }
    let value = (m.mass::<T>() - T::one()) * s.clone() * pgf_derivative(d, 1, s) - pgf(d, s);
    if !value.is_finite() {
        return Err(DrError::range("φ is not representable in this backend"));
    }
    Ok(value)
}

/// `m(m−1)G'''(m) + (4m−5)G''(m) + 2(m−2)/(m²(m−1))·G(m)`.
pub fn script_d<T: Mass>(d: &Dist<T>, m: Arity) -> Result<T> {
    let mm: T = m.mass();
    let m1 = mm.clone() - T::one();
    let g = pgf(d, &mm);
    let g2 = pgf_derivative(d, 2, &mm);
    let g3 = pgf_derivative(d, 3, &mm);
    let c2 = T::from_u64(4) * mm.clone() - T::from_u64(5);
    let c0 = T::from_u64(2) * (mm.clone() - T::from_u64(2)) / (mm.clone() * mm.clone() * m1.clone());
    let value = mm * m1 * g3 + c2 * g2 + c0 * g;
    if !value.is_finite() {
        return Err(DrError::range("𝒟 is not representable in this backend; use the rational backend"));
    }
    Ok(value)
}

/// `ln 3 − ln(m)/(m−1)`: the largest θ with `m^{1/(m−1)} e^θ ≤ 3`.
pub fn default_horizon_threshold(m: Arity) -> f64 {
    3f64.ln() - m.as_f64().ln() / (m.as_f64() - 1.0)
}

/// First generation whose gap exceeds `threshold`, if any.
pub fn detect_horizon<T: Mass>(trace: &EvolutionTrace<T>, threshold: f64) -> Option<usize> {
    trace
        .deltas
        .iter()
        .position(|d| d.as_ref().is_some_and(|v| v.to_f64() > threshold))
}
