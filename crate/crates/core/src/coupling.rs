//! Monotone coupling of a dominating system `X` with a system `Y` on one tree,
//! and the inequality that bounds `E(X)` below by open-path counts of `Y`.

use rayon::prelude::*;
use serde_json::json;

use crate::dist::{Arity, Dist};
use crate::error::{DrError, Result};
use crate::evolution::{evolve, TruncationPolicy};
use crate::mass::Mass;
use crate::rng::{stream, LatticeSampler, SampleRng};
use crate::tree_mc::{
    check_cost, joint_law, mc_functional, NodeSample, OpenPathIndicator, TreeSampleStats, DEFAULT_COST_GUARD,
    DEFAULT_JOINT_CAP,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSpec<T> {
    x0: Dist<T>,
    y0: Dist<T>,
    z_law: Dist<T>,
}

impl<T: Mass> CouplingSpec<T> {
    pub fn x0(&self) -> &Dist<T> {
        &self.x0
    }

    pub fn y0(&self) -> &Dist<T> {
        &self.y0
    }

    /// Law of the value an `X` leaf takes where the `Y` leaf is 0.
    pub fn z_law(&self) -> &Dist<T> {
        &self.z_law
    }
}

/// Builds the coupling `X = Y + Z·1{Y = 0}` with `Z` independent of `Y`.
pub fn make_coupling<T: Mass>(x0: &Dist<T>, y0: &Dist<T>) -> Result<CouplingSpec<T>> {
    let y_zero = y0.mass_at(0);
    if y_zero <= T::zero() {
        return Err(DrError::validation("the dominated law needs positive mass at 0"));
    }
    let top = x0.support_bound().max(y0.support_bound());
    let offending: Vec<usize> = (1..=top).filter(|&k| x0.mass_at(k) < y0.mass_at(k)).collect();
    if !offending.is_empty() {
        let list: Vec<String> = offending.iter().map(|k| k.to_string()).collect();
        return Err(DrError::validation(format!(
            "dominance fails at k = {}",
            list.join(", ")
        )));
    }
    let mut z = Vec::with_capacity(top + 1);
    z.push(x0.mass_at(0) / y_zero.clone());
    for k in 1..=top {
        z.push((x0.mass_at(k) - y0.mass_at(k)) / y_zero.clone());
    }
    Ok(CouplingSpec {
        x0: x0.clone(),
        y0: y0.clone(),
        z_law: Dist::new(z)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CoupledSample {
    pub x: u64,
    pub y: NodeSample,
    /// Nodes where `X < Y`; the coupling guarantees none.
    pub violations: u64,
}

struct CoupledSamplers {
    y: LatticeSampler,
    z: LatticeSampler,
}

fn coupled_node(s: &CoupledSamplers, m: u32, depth: u32, rng: &mut SampleRng) -> CoupledSample {
    if depth == 0 {
        let y = s.y.sample(rng);
        let z = s.z.sample(rng);
        let x = if y == 0 { z } else { y };
        return CoupledSample {
            x,
            y: NodeSample::leaf(y),
            violations: 0,
        };
    }
    let mut xsum = 0u64;
    let mut violations = 0u64;
    let mut kids = [NodeSample::default(); 8];
    let mut spill = Vec::new();
    for i in 0..m as usize {
        let c = coupled_node(s, m, depth - 1, rng);
        xsum += c.x;
        violations += c.violations;
        if i < kids.len() {
            kids[i] = c.y;
        } else {
            spill.push(c.y);
        }
    }
    let y = NodeSample::combine(kids.iter().take(m as usize).copied().chain(spill));
    let x = xsum.saturating_sub(1);
    violations += (x < y.y) as u64;
    debug_assert!(x >= y.y, "coupling lost dominance");
    CoupledSample { x, y, violations }
}

/// One coupled tree drawn from the stream `(seed, 0)`.
pub fn sample_coupled_tree<T: Mass>(cs: &CouplingSpec<T>, m: Arity, depth: u32, seed: u64) -> Result<CoupledSample> {
    check_cost(m, depth, DEFAULT_COST_GUARD)?;
    let samplers = CoupledSamplers {
        y: LatticeSampler::new(&cs.y0),
        z: LatticeSampler::new(&cs.z_law),
    };
    Ok(coupled_node(&samplers, m.get(), depth, &mut stream(seed, 0)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominanceReport {
    pub n_trees: u64,
    pub depth: u32,
    pub violations: u64,
    pub mean_x: f64,
    pub mean_y: f64,
}

/// Samples `n_trees` coupled trees and counts nodes where dominance fails.
pub fn dominance_run<T: Mass>(
    cs: &CouplingSpec<T>,
    m: Arity,
    depth: u32,
    n_trees: u64,
    seed: u64,
) -> Result<DominanceReport> {
    check_cost(m, depth, DEFAULT_COST_GUARD)?;
    let samplers = CoupledSamplers {
        y: LatticeSampler::new(&cs.y0),
        z: LatticeSampler::new(&cs.z_law),
    };
    let (violations, sx, sy) = (0..n_trees)
        .into_par_iter()
        .map(|i| {
            let c = coupled_node(&samplers, m.get(), depth, &mut stream(seed, i));
            (c.violations, c.x as u128, c.y.y as u128)
        })
        .reduce(|| (0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    Ok(DominanceReport {
        n_trees,
        depth,
        violations,
        mean_x: sx as f64 / n_trees as f64,
        mean_y: sy as f64 / n_trees as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BridgeMode {
    Exact,
    MonteCarlo { n_samples: u64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeParams {
    pub n: u32,
    pub k: u32,
    pub l: u32,
    pub r: f64,
}

#[derive(Debug, Clone)]
pub struct BridgeReport<T> {
    pub params: BridgeParams,
    pub eta: T,
    /// `E(X_{n+k+l})` from an untruncated evolution of `x0`.
    pub lhs: T,
    /// `m^{k+l} η/2`.
    pub factor: T,
    /// Exact right side (exact mode).
    pub rhs_exact: Option<T>,
    pub mc: Option<TreeSampleStats>,
    /// Value the left side is compared against: the exact right side, or
    /// the Monte Carlo estimate plus three standard errors.
    pub rhs_upper: f64,
    pub holds: bool,
}

impl<T: Mass> BridgeReport<T> {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "n": self.params.n,
            "k": self.params.k,
            "l": self.params.l,
            "r": self.params.r,
            "eta": self.eta.render(),
            "lhs": self.lhs.render(),
            "factor": self.factor.render(),
            "rhs_exact": self.rhs_exact.as_ref().map(|v| v.render()),
            "rhs_estimate": self.mc.as_ref().map(|s| self.factor.to_f64() * s.means[0]),
            "rhs_std_error": self.mc.as_ref().map(|s| self.factor.to_f64() * s.std_error(0)),
            "rhs_upper": self.rhs_upper,
            "holds": self.holds,
        })
    }
}

fn check_hypotheses<T: Mass>(cs: &CouplingSpec<T>, eta: &T, l: u32, r: f64) -> Result<()> {
    if *eta <= T::zero() {
        return Err(DrError::precondition("η must be positive"));
    }
    if !(r >= 0.0) {
        return Err(DrError::precondition("r must be nonnegative"));
    }
    let gain = cs.x0.expectation() - cs.y0.expectation();
    let needed = eta.clone() * cs.y0.mass_at(0);
    // Float expectations carry rounding; let a boundary case through.
    let slack = match T::BACKEND {
        crate::mass::Backend::F64 => T::from_f64(1e-12 * needed.to_f64())?,
        crate::mass::Backend::Rational => T::zero(),
    };
    if gain.clone() + slack < needed {
        return Err(DrError::precondition(format!(
            "E(x0 − y0) = {} is below η·P(y0 = 0) = {}",
            gain.render(),
            (eta.clone() * cs.y0.mass_at(0)).render()
        )));
    }
    if l as f64 > r * eta.to_f64() / 2.0 {
        return Err(DrError::precondition(format!(
            "l = {l} exceeds r·η/2 = {}",
            r * eta.to_f64() / 2.0
        )));
    }
    Ok(())
}

/// Checks `E(X_{n+k+l}) ≥ (m^{k+l} η / 2) E[N 1{N ≥ r} 1{Y_n = k}]`, where `N`
/// counts open paths of `Y` from zero-valued leaves.
pub fn bridge_check<T: Mass>(
    cs: &CouplingSpec<T>,
    m: Arity,
    params: BridgeParams,
    eta: &T,
    mode: BridgeMode,
) -> Result<BridgeReport<T>> {
    let BridgeParams { n, k, l, r } = params;
    check_hypotheses(cs, eta, l, r)?;
    let horizon = (n + k + l) as usize;
    let trace = evolve(&cs.x0, m, horizon, TruncationPolicy::none())?;
    let lhs = trace.expectations[horizon].clone();
    let factor = m.mass::<T>().powu(k + l) * eta.clone() / T::from_u64(2);
    match mode {
        BridgeMode::Exact => {
            let law = joint_law(&cs.y0, m, n, DEFAULT_JOINT_CAP)?;
            let rhs = factor.clone() * law.indicator_mean(r, k as usize);
            Ok(BridgeReport {
                params,
                eta: eta.clone(),
                holds: lhs >= rhs,
                rhs_upper: rhs.to_f64(),
                lhs,
                factor,
                rhs_exact: Some(rhs),
                mc: None,
            })
        }
        BridgeMode::MonteCarlo { n_samples, seed } => {
            let f = OpenPathIndicator { r, k: k as u64 };
            let stats = mc_functional(&cs.y0, m, n, n_samples, &f, seed)?;
            let upper = factor.to_f64() * (stats.means[0] + 3.0 * stats.std_error(0));
            Ok(BridgeReport {
                params,
                eta: eta.clone(),
                holds: lhs.to_f64() >= upper,
                rhs_upper: upper,
                lhs,
                factor,
                rhs_exact: None,
                mc: Some(stats),
            })
        }
    }
}

/// Exact verdicts at every admissible grid point: `n ≤ n_max`, `k ≤ k_max`,
/// each `r`, and every integer `l ≤ rη/2`. One evolution of `x0` and one
/// joint law per `n` serve the whole grid.
pub fn bridge_grid<T: Mass>(
    cs: &CouplingSpec<T>,
    m: Arity,
    eta: &T,
    n_max: u32,
    k_max: u32,
    rs: &[f64],
) -> Result<Vec<BridgeReport<T>>> {
    let l_of = |r: f64| (r * eta.to_f64() / 2.0).floor() as u32;
    for &r in rs {
        check_hypotheses(cs, eta, l_of(r), r)?;
    }
    let l_max = rs.iter().map(|&r| l_of(r)).max().unwrap_or(0);
    let trace = evolve(&cs.x0, m, (n_max + k_max + l_max) as usize, TruncationPolicy::none())?;
    let laws = (0..=n_max)
        .into_par_iter()
        .map(|n| joint_law(&cs.y0, m, n, DEFAULT_JOINT_CAP))
        .collect::<Result<Vec<_>>>()?;
    let half_eta = eta.clone() / T::from_u64(2);
    let mut out = Vec::new();
    for (n, law) in laws.iter().enumerate() {
        for k in 0..=k_max {
            for &r in rs {
                let core = law.indicator_mean(r, k as usize);
                for l in 0..=l_of(r) {
                    let factor = m.mass::<T>().powu(k + l) * half_eta.clone();
                    let rhs = factor.clone() * core.clone();
                    let lhs = trace.expectations[n + (k + l) as usize].clone();
                    out.push(BridgeReport {
                        params: BridgeParams { n: n as u32, k, l, r },
                        eta: eta.clone(),
                        holds: lhs >= rhs,
                        rhs_upper: rhs.to_f64(),
                        lhs,
                        factor,
                        rhs_exact: Some(rhs),
                        mc: None,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{ratio, rational_law};
    use num_rational::BigRational;
    use proptest::prelude::*;

    fn two() -> Arity {
        Arity::new(2).unwrap()
    }

    fn pair() -> CouplingSpec<BigRational> {
        make_coupling(
            &rational_law(&[(0, 3, 4), (2, 1, 4)]),
            &rational_law(&[(0, 4, 5), (2, 1, 5)]),
        )
        .unwrap()
    }

    #[test]
    fn coupling_examples() {
        let y0 = rational_law(&[(0, 4, 5), (2, 1, 5)]);
        let same = make_coupling(&y0, &y0).unwrap();
        assert_eq!(same.z_law(), &Dist::dirac(0));

        let cs = pair();
        assert_eq!(cs.z_law().mass_at(2), ratio(1, 16));
        assert_eq!(cs.z_law().mass_at(0), ratio(15, 16));
        let lhs = cs.z_law().expectation() * cs.y0().mass_at(0);
        assert_eq!(lhs, cs.x0().expectation() - cs.y0().expectation());
        assert_eq!(lhs, ratio(1, 10));
    }

    #[test]
    fn dominance_failure_lists_indices() {
        let x0 = rational_law(&[(0, 1, 2), (1, 1, 4), (3, 1, 4)]);
        let y0 = rational_law(&[(0, 1, 4), (1, 1, 2), (2, 1, 4)]);
        match make_coupling(&x0, &y0) {
            Err(DrError::Validation(msg)) => assert!(msg.contains("1, 2"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let no_zero = rational_law(&[(2, 1, 1)]);
        assert!(make_coupling(&no_zero, &no_zero).is_err());
    }

    #[test]
    fn pushforward_marginals_are_exact() {
        let cs = pair();
        let (y0, z) = (cs.y0(), cs.z_law());
        for k in 0..=2usize {
            let from_zero = y0.mass_at(0) * z.mass_at(k);
            let x_mass = if k == 0 { from_zero } else { from_zero + y0.mass_at(k) };
            assert_eq!(x_mass, cs.x0().mass_at(k));
        }
    }

    #[test]
    fn identical_laws_give_identical_roots() {
        let y0 = rational_law(&[(0, 4, 5), (2, 1, 5)]);
        let cs = make_coupling(&y0, &y0).unwrap();
        for seed in 0..50 {
            let s = sample_coupled_tree(&cs, two(), 5, seed).unwrap();
            assert_eq!(s.x, s.y.y);
        }
    }

    #[test]
    fn leaf_marginals_and_conditional_identity() {
        let cs = pair();
        let samplers = CoupledSamplers {
            y: LatticeSampler::new(cs.y0()),
            z: LatticeSampler::new(cs.z_law()),
        };
        let n = 100_000u64;
        let (mut x2, mut y0, mut diff_given_zero, mut agree_pos, mut pos) = (0u64, 0u64, 0u64, 0u64, 0u64);
        for i in 0..n {
            let c = coupled_node(&samplers, 2, 0, &mut stream(4, i));
            x2 += (c.x == 2) as u64;
            if c.y.y == 0 {
                y0 += 1;
                diff_given_zero += c.x;
            } else {
                pos += 1;
                agree_pos += (c.x == c.y.y) as u64;
            }
        }
        assert_eq!(agree_pos, pos);
        let fx2 = x2 as f64 / n as f64;
        assert!((fx2 - 0.25).abs() < 4.0 * (0.25f64 * 0.75 / n as f64).sqrt());
        let fy0 = y0 as f64 / n as f64;
        assert!((fy0 - 0.8).abs() < 4.0 * (0.16f64 / n as f64).sqrt());
        // E(X − Y | Y = 0)·P(Y = 0) = E(X − Y) = 1/10
        let est = diff_given_zero as f64 / n as f64;
        assert!((est - 0.1).abs() < 0.01, "{est}");
    }

    #[test]
    fn bridge_examples() {
        let cs = pair();
        let p = BridgeParams { n: 4, k: 1, l: 0, r: 4.0 };
        let rep = bridge_check(&cs, two(), p, &ratio(1, 8), BridgeMode::Exact).unwrap();
        assert!(rep.holds);

        assert!(matches!(
            bridge_check(&cs, two(), p, &ratio(1, 4), BridgeMode::Exact),
            Err(DrError::Precondition(_))
        ));
        let too_long = BridgeParams { l: 1, r: 8.0, ..p };
        assert!(matches!(
            bridge_check(&cs, two(), too_long, &ratio(1, 8), BridgeMode::Exact),
            Err(DrError::Precondition(_))
        ));

        let zero = BridgeParams { n: 3, k: 0, l: 0, r: 0.0 };
        let rep = bridge_check(&cs, two(), zero, &ratio(1, 8), BridgeMode::Exact).unwrap();
        let law = joint_law(cs.y0(), two(), 3, DEFAULT_JOINT_CAP).unwrap();
        let direct = law.expect(|k, j| if k == 0 { ratio(j as i64, 16) } else { ratio(0, 1) });
        assert_eq!(rep.rhs_exact.unwrap(), direct);

        let mc = bridge_check(
            &cs.clone(),
            two(),
            p,
            &ratio(1, 8),
            BridgeMode::MonteCarlo { n_samples: 20_000, seed: 3 },
        )
        .unwrap();
        assert!(mc.holds);
        assert!(mc.to_json()["rhs_estimate"].is_number());
    }

    #[test]
    fn grid_agrees_with_single_checks() {
        let cs = pair();
        let eta = ratio(1, 8);
        let grid = bridge_grid(&cs, two(), &eta, 3, 2, &[0.0, 8.0, 16.0]).unwrap();
        assert_eq!(grid.len(), 4 * 3 * (1 + 1 + 2));
        assert!(grid.iter().all(|r| r.holds));
        for rep in grid.iter().step_by(5) {
            let single = bridge_check(&cs, two(), rep.params, &eta, BridgeMode::Exact).unwrap();
            assert_eq!(single.rhs_exact, rep.rhs_exact);
            assert_eq!(single.lhs, rep.lhs);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn coupled_trees_never_violate(
            y in prop::collection::vec(1u32..6, 2..5),
            extra in prop::collection::vec(0u32..4, 2..5),
            depth in 0u32..7,
            seed in any::<u64>(),
        ) {
            // y0 ∝ y, x0 moves some of y0's mass at 0 onto positive values
            let total: u32 = y.iter().sum::<u32>() * 2;
            let y0: Vec<f64> = y.iter().map(|&v| v as f64 * 2.0 / total as f64).collect();
            let shift: f64 = y0[0] / 2.0;
            let extra_total: u32 = extra.iter().sum::<u32>().max(1);
            let mut x0 = y0.clone();
            x0[0] -= shift;
            for (i, &e) in extra.iter().enumerate() {
                let k = 1 + i;
                if k >= x0.len() { x0.resize(k + 1, 0.0); }
                x0[k] += shift * e as f64 / extra_total as f64;
            }
            if extra.iter().all(|&e| e == 0) { x0[0] += shift; }
            let cs = make_coupling(&Dist::new(x0).unwrap(), &Dist::new(y0).unwrap()).unwrap();
            let s = sample_coupled_tree(&cs, two(), depth, seed).unwrap();
            prop_assert_eq!(s.violations, 0);
            prop_assert!(s.x >= s.y.y);
            prop_assert!(s.y.n_open_zero <= s.y.n_open_total);
            prop_assert!(s.y.n_open_total <= 1u64 << depth);
        }
    }
}
