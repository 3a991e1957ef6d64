//! Monte Carlo over the m-ary hierarchical tree with open-path counts, and
//! the exact joint law of the root value and the zero-rooted open-path count.
//!
//! A leaf carries `(y, 1{y=0}, 1)`. An internal node with child sum `S`
//! carries `(S − 1, Σ zero-rooted, Σ total)` when `S ≥ 1` and `(0, 0, 0)`
//! otherwise: a path stays open only through parents whose children sum to
//! at least 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::dist::{power_vec, Arity, Dist};
use crate::error::{DrError, Result};
use crate::evolution::{evolve, TruncationPolicy};
use crate::mass::Mass;
use crate::rng::{stream, LatticeSampler, SampleRng};

/// Largest tree size (`m^depth` leaves) a single sample may have by default.
pub const DEFAULT_COST_GUARD: u64 = 1 << 30;

/// Largest `m^n` accepted by [`joint_law`] by default.
pub const DEFAULT_JOINT_CAP: u64 = 4096;

/// Samples per work unit; fixed so results do not depend on the thread count.
const CHUNK: u64 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct NodeSample {
    pub y: u64,
    /// Open paths starting from leaves that carry 0.
    pub n_open_zero: u64,
    pub n_open_total: u64,
}

impl NodeSample {
    #[inline]
    pub fn leaf(y: u64) -> Self {
        NodeSample {
            y,
            n_open_zero: (y == 0) as u64,
            n_open_total: 1,
        }
    }

    /// Combines the children of one internal node.
    #[inline]
    pub fn combine(children: impl Iterator<Item = NodeSample>) -> Self {
        let (mut sum, mut nz, mut nt) = (0u64, 0u64, 0u64);
        for c in children {
            sum += c.y;
            nz += c.n_open_zero;
            nt += c.n_open_total;
        }
        if sum >= 1 {
            NodeSample {
                y: sum - 1,
                n_open_zero: nz,
                n_open_total: nt,
            }
        } else {
            NodeSample::default()
        }
    }
}

pub(crate) fn check_cost(m: Arity, depth: u32, guard: u64) -> Result<()> {
    match (m.get() as u64).checked_pow(depth) {
        Some(leaves) if leaves <= guard => Ok(()),
        _ => Err(DrError::capacity(format!(
            "a tree of depth {depth} with arity {m} exceeds the cost guard of {guard} leaves"
        ))),
    }
}

/// Depth-first sample of one tree; memory is O(depth).
pub fn sample_node(leaf: &LatticeSampler, m: u32, depth: u32, rng: &mut SampleRng) -> NodeSample {
    if depth == 0 {
        return NodeSample::leaf(leaf.sample(rng));
    }
    if depth == 1 {
        return NodeSample::combine((0..m).map(|_| NodeSample::leaf(leaf.sample(rng))));
    }
    NodeSample::combine((0..m).map(|_| sample_node(leaf, m, depth - 1, rng)))
}

/// Root sample of one tree drawn from the stream `(seed, 0)`.
pub fn sample_tree<T: Mass>(y0: &Dist<T>, m: Arity, depth: u32, seed: u64) -> Result<NodeSample> {
    check_cost(m, depth, DEFAULT_COST_GUARD)?;
    let sampler = LatticeSampler::new(y0);
    Ok(sample_node(&sampler, m.get(), depth, &mut stream(seed, 0)))
}

/// A real-valued functional (or a vector of them) of a root sample.
pub trait TreeFunctional: Send + Sync {
    /// Canonical name, reparsable by [`FunctionalRegistry::parse`].
    fn name(&self) -> String;

    fn labels(&self) -> Vec<String>;

    fn eval(&self, s: &NodeSample, m: u32, out: &mut [f64]);

    /// Exact expectation under a joint law of `(Y, N^{(0)})`, when the
    /// functional does not involve the total open-path count.
    fn exact_mean(&self, law: &JointLaw<f64>) -> Option<Vec<f64>>;
}

/// `m^Y (1 + Y) N^{(0)}`.
#[derive(Debug, Clone, Copy)]
pub struct ProductWeight;

impl TreeFunctional for ProductWeight {
    fn name(&self) -> String {
        "product_weight".into()
    }

    fn labels(&self) -> Vec<String> {
        vec!["product_weight".into()]
    }

    fn eval(&self, s: &NodeSample, m: u32, out: &mut [f64]) {
        out[0] = if s.n_open_zero == 0 {
            0.0
        } else {
            (m as f64).powi(s.y as i32) * (1.0 + s.y as f64) * s.n_open_zero as f64
        };
    }

    fn exact_mean(&self, law: &JointLaw<f64>) -> Option<Vec<f64>> {
        Some(vec![law.product_weight_mean()])
    }
}

/// `N^{(0)} 1{N^{(0)} ≥ r} 1{Y = k}`.
#[derive(Debug, Clone, Copy)]
pub struct OpenPathIndicator {
    pub r: f64,
    pub k: u64,
}

impl TreeFunctional for OpenPathIndicator {
    fn name(&self) -> String {
        format!("indicator:r={},k={}", self.r, self.k)
    }

    fn labels(&self) -> Vec<String> {
        vec![self.name()]
    }

    fn eval(&self, s: &NodeSample, _m: u32, out: &mut [f64]) {
        let n = s.n_open_zero as f64;
        out[0] = if s.y == self.k && n >= self.r { n } else { 0.0 };
    }

    fn exact_mean(&self, law: &JointLaw<f64>) -> Option<Vec<f64>> {
        Some(vec![law.indicator_mean(self.r, self.k as usize)])
    }
}

/// First and second moments of `Y`, `N^{(0)}` and `N^#`.
#[derive(Debug, Clone, Copy)]
pub struct RawMoments;

impl TreeFunctional for RawMoments {
    fn name(&self) -> String {
        "moments".into()
    }

    fn labels(&self) -> Vec<String> {
        ["y", "y2", "n_open_zero", "n_open_zero2", "n_open_total", "n_open_total2"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn eval(&self, s: &NodeSample, _m: u32, out: &mut [f64]) {
        let (y, z, t) = (s.y as f64, s.n_open_zero as f64, s.n_open_total as f64);
        out.copy_from_slice(&[y, y * y, z, z * z, t, t * t]);
    }

    fn exact_mean(&self, _law: &JointLaw<f64>) -> Option<Vec<f64>> {
        None
    }
}

type FunctionalCtor = fn(&BTreeMap<String, String>) -> Result<Box<dyn TreeFunctional>>;

/// Tree functionals registered by name; selected at runtime from strings
/// like `indicator:r=4,k=1`.
pub struct FunctionalRegistry {
    ctors: BTreeMap<&'static str, FunctionalCtor>,
}

fn no_params(name: &str, params: &BTreeMap<String, String>) -> Result<()> {
    match params.keys().next() {
        Some(k) => Err(DrError::validation(format!("functional '{name}' takes no parameter '{k}'"))),
        None => Ok(()),
    }
}

impl Default for FunctionalRegistry {
    fn default() -> Self {
        let mut reg = FunctionalRegistry {
            ctors: BTreeMap::new(),
        };
        reg.register("product_weight", |p| {
            no_params("product_weight", p)?;
            Ok(Box::new(ProductWeight))
        });
        reg.register("indicator", |p| {
            let mut r = 0.0;
            let mut k = 0u64;
            for (key, v) in p {
                match key.as_str() {
                    "r" => {
                        r = v.parse().map_err(|_| DrError::Parse(format!("indicator: bad r '{v}'")))?;
                        if !(r >= 0.0) {
                            return Err(DrError::validation("indicator: r must be ≥ 0"));
                        }
                    }
                    "k" => k = v.parse().map_err(|_| DrError::Parse(format!("indicator: bad k '{v}'")))?,
                    other => return Err(DrError::validation(format!("indicator: unknown parameter '{other}'"))),
                }
            }
            Ok(Box::new(OpenPathIndicator { r, k }))
        });
        reg.register("moments", |p| {
            no_params("moments", p)?;
            Ok(Box::new(RawMoments))
        });
        reg
    }
}

impl FunctionalRegistry {
    pub fn register(&mut self, name: &'static str, ctor: FunctionalCtor) {
        self.ctors.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.ctors.keys().copied().collect()
    }

    /// Parses `name` or `name:key=value,key=value`.
    pub fn parse(&self, spec: &str) -> Result<Box<dyn TreeFunctional>> {
        let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
        let ctor = self.ctors.get(name.trim()).ok_or_else(|| {
            DrError::validation(format!(
                "unknown functional '{name}' (known: {})",
                self.names().join(", ")
            ))
        })?;
        let mut params = BTreeMap::new();
        for pair in rest.split(',').filter(|s| !s.trim().is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| DrError::Parse(format!("expected key=value, got '{pair}'")))?;
            params.insert(k.trim().to_string(), v.trim().to_string());
        }
        ctor(&params)
    }
}

/// Welford accumulator with Chan's pairwise merge.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(width: usize) -> Self {
        MomentAccumulator {
            count: 0,
            mean: vec![0.0; width],
            m2: vec![0.0; width],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for (i, &v) in x.iter().enumerate() {
            let d = v - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (v - self.mean[i]);
        }
    }

    pub fn merge(mut self, other: &MomentAccumulator) -> Self {
        if other.count == 0 {
            return self;
        }
        if self.count == 0 {
            return other.clone();
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.count += other.count;
        self
    }

    /// Unbiased sample variances.
    pub fn variances(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![0.0; self.mean.len()];
        }
        self.m2.iter().map(|v| v / (self.count - 1) as f64).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TreeSampleStats {
    pub functional: String,
    pub labels: Vec<String>,
    pub m: u32,
    pub depth: u32,
    pub n_samples: u64,
    pub seed: u64,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// `1.96 · sd / √n`.
    pub ci_halfwidths: Vec<f64>,
}

impl TreeSampleStats {
    pub fn from_accumulator(
        acc: &MomentAccumulator,
        functional: &dyn TreeFunctional,
        m: Arity,
        depth: u32,
        seed: u64,
    ) -> Self {
        let variances = acc.variances();
        let n = acc.count as f64;
        TreeSampleStats {
            functional: functional.name(),
            labels: functional.labels(),
            m: m.get(),
            depth,
            n_samples: acc.count,
            seed,
            means: acc.mean.clone(),
            ci_halfwidths: variances.iter().map(|v| 1.96 * v.sqrt() / n.sqrt()).collect(),
            variances,
        }
    }

    /// Standard error of the i-th mean.
    pub fn std_error(&self, i: usize) -> f64 {
        (self.variances[i] / self.n_samples as f64).sqrt()
    }
}

/// Runs `body(sample_index, rng, acc)` for every sample in fixed-size chunks
/// and merges chunk accumulators in index order.
pub(crate) fn chunked_samples<F>(n_samples: u64, width: usize, seed: u64, body: F) -> MomentAccumulator
where
    F: Fn(&mut SampleRng, &mut MomentAccumulator) + Sync,
{
    let chunks = n_samples.div_ceil(CHUNK);
    let parts: Vec<MomentAccumulator> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = MomentAccumulator::new(width);
            for i in c * CHUNK..((c + 1) * CHUNK).min(n_samples) {
                let mut rng = stream(seed, i);
                body(&mut rng, &mut acc);
            }
            acc
        })
        .collect();
    parts
        .iter()
        .fold(MomentAccumulator::new(width), |acc, p| acc.merge(p))
}

/// Streaming mean and variance of `functional` over independent trees.
pub fn mc_functional<T: Mass>(
    y0: &Dist<T>,
    m: Arity,
    depth: u32,
    n_samples: u64,
    functional: &dyn TreeFunctional,
    seed: u64,
) -> Result<TreeSampleStats> {
    if n_samples == 0 {
        return Err(DrError::validation("n_samples must be at least 1"));
    }
    check_cost(m, depth, DEFAULT_COST_GUARD)?;
    let sampler = LatticeSampler::new(y0);
    let width = functional.labels().len();
    let mm = m.get();
    let acc = chunked_samples(n_samples, width, seed, |rng, acc| {
        let s = sample_node(&sampler, mm, depth, rng);
        let mut out = vec![0.0; width];
        functional.eval(&s, mm, &mut out);
        acc.push(&out);
    });
    Ok(TreeSampleStats::from_accumulator(&acc, functional, m, depth, seed))
}

/// Exact law of `(Y_n, N_n^{(0)})` as a dense grid `q[k][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLaw<T> {
    pub m: Arity,
    pub n: u32,
    /// Grid width: `j` ranges over `0..=j_max` with `j_max = m^n`.
    pub j_max: usize,
    grid: Vec<T>,
}

impl<T: Mass> JointLaw<T> {
    pub fn k_max(&self) -> usize {
        self.grid.len() / (self.j_max + 1) - 1
    }

    pub fn mass(&self, k: usize, j: usize) -> T {
        if j > self.j_max {
            return T::zero();
        }
        self.grid
            .get(k * (self.j_max + 1) + j)
            .cloned()
            .unwrap_or_else(T::zero)
    }

    fn entries(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let w = self.j_max + 1;
        self.grid
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_zero())
            .map(move |(i, v)| (i / w, i % w, v))
    }

    pub fn total_mass(&self) -> T {
        T::total(self.grid.iter().cloned())
    }

    pub fn y_marginal(&self) -> Dist<T> {
        let w = self.j_max + 1;
        let probs = self
            .grid
            .chunks(w)
            .map(|row| T::total(row.iter().cloned()))
            .collect();
        Dist::from_vec_unchecked(probs)
    }

    /// `Σ_{k,j} j s^k q[k][j]`.
    pub fn open_path_pgf(&self, s: &T) -> T {
        T::total(
            self.entries()
                .map(|(k, j, v)| T::from_u64(j as u64) * s.powu(k as u32) * v.clone()),
        )
    }

    /// `E f(Y, N^{(0)})`.
    pub fn expect(&self, f: impl Fn(usize, usize) -> T) -> T {
        T::total(self.entries().map(|(k, j, v)| f(k, j) * v.clone()))
    }

    /// `E[m^Y (1 + Y) N^{(0)}]`.
    pub fn product_weight_mean(&self) -> T {
        let mm: T = self.m.mass();
        T::total(self.entries().map(|(k, j, v)| {
            mm.powu(k as u32) * T::from_u64(1 + k as u64) * T::from_u64(j as u64) * v.clone()
        }))
    }

    /// `E[N^{(0)} 1{N^{(0)} ≥ r} 1{Y = k}]`.
    pub fn indicator_mean(&self, r: f64, k: usize) -> T {
        T::total(
            self.entries()
                .filter(|(kk, j, _)| *kk == k && (*j as f64) >= r)
                .map(|(_, j, v)| T::from_u64(j as u64) * v.clone()),
        )
    }

    /// `P(N^{(0)} ≥ 1, Y = 0)`.
    pub fn open_at_zero(&self) -> T {
        T::total(
            self.entries()
                .filter(|(k, j, _)| *k == 0 && *j >= 1)
                .map(|(_, _, v)| v.clone()),
        )
    }

    pub fn to_f64(&self) -> JointLaw<f64> {
        JointLaw {
            m: self.m,
            n: self.n,
            j_max: self.j_max,
            grid: self.grid.iter().map(|v| v.to_f64()).collect(),
        }
    }

    /// CSV triples `k,j,mass` over the nonzero cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,j,mass\n");
        for (k, j, v) in self.entries() {
            let _ = writeln!(out, "{k},{j},{}", v.render());
        }
        out
    }
}

/// Grid widths from which the float backend switches to the spectral power.
const SPECTRAL_MIN_STRIDE: usize = 513;

fn poly_mul(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::default(); a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (o, y) in out[i..].iter_mut().zip(b) {
            *o += x * y;
        }
    }
    out
}

/// Float m-fold power of a joint grid. Each Y-row is transformed along the
/// N axis on its own, rows are combined per frequency and transformed back,
/// so every output row keeps precision relative to its own peak.
fn spectral_power(grid: &[f64], width: usize, m: u32, next_j: usize) -> Vec<f64> {
    let len = (next_j + 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let spectra: Vec<Vec<Complex64>> = grid
        .par_chunks(width)
        .map(|row| {
            let mut buf: Vec<Complex64> = row.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            buf.resize(len, Complex64::default());
            fwd.process(&mut buf);
            buf
        })
        .collect();
    // real input: only half the frequencies are independent
    let half: Vec<Vec<Complex64>> = (0..=len / 2)
        .into_par_iter()
        .map(|w| {
            let col: Vec<Complex64> = spectra.iter().map(|s| s[w]).collect();
            (1..m).fold(col.clone(), |acc, _| poly_mul(&acc, &col))
        })
        .collect();
    drop(spectra);
    let rows_out = half[0].len();
    let floor = f64::EPSILON * len as f64;
    let rows: Vec<Vec<f64>> = (0..rows_out)
        .into_par_iter()
        .map(|k| {
            let mut buf: Vec<Complex64> = (0..len)
                .map(|w| if w <= len / 2 { half[w][k] } else { half[len - w][k].conj() })
                .collect();
            inv.process(&mut buf);
            let row: Vec<f64> = buf[..=next_j].iter().map(|c| c.re / len as f64).collect();
            let peak = row.iter().fold(0.0f64, |a, &b| a.max(b));
            row.into_iter()
                .map(|v| if v > peak * floor { v } else { 0.0 })
                .collect()
        })
        .collect();
    rows.concat()
}

/// Exact joint law after `n` generations, by m-fold two-dimensional
/// convolution of `(Y, N)` pairs followed by the shift/collapse rule.
pub fn joint_law<T: Mass>(y0: &Dist<T>, m: Arity, n: u32, cap: u64) -> Result<JointLaw<T>> {
    let mm = m.get() as u64;
    match mm.checked_pow(n) {
        Some(leaves) if leaves <= cap => {}
        _ => {
            return Err(DrError::capacity(format!(
                "joint law needs m^n ≤ {cap}, got m = {m}, n = {n}"
            )))
        }
    }
    // generation 0: N = 1{Y = 0}
    let mut j_max = 1usize;
    let mut grid = vec![T::zero(); (y0.support_bound() + 1) * 2];
    for (k, p) in y0.probs().iter().enumerate() {
        grid[k * 2 + usize::from(k == 0)] = p.clone();
    }
    for _ in 0..n {
        let next_j = j_max * m.as_usize();
        let stride = next_j + 1;
        let rows = grid.len() / (j_max + 1);
        let mut flat = vec![T::zero(); rows * stride];
        for (i, v) in grid.iter().enumerate() {
            flat[(i / (j_max + 1)) * stride + i % (j_max + 1)] = v.clone();
        }
        let conv = match (&flat as &dyn std::any::Any).downcast_ref::<Vec<f64>>() {
            Some(f) if stride >= SPECTRAL_MIN_STRIDE => {
                let widened: Vec<f64> = spectral_power(f, stride, m.get(), next_j);
                let boxed: Box<dyn std::any::Any> = Box::new(widened);
                *boxed.downcast::<Vec<T>>().expect("backend is f64")
            }
            _ => power_vec(&flat, m.get()),
        };
        let out_rows = conv.len().div_ceil(stride).max(1);
        let mut next = vec![T::zero(); out_rows * stride];
        for (idx, v) in conv.into_iter().enumerate() {
            if v.is_zero() {
                continue;
            }
            let (ksum, jsum) = (idx / stride, idx % stride);
            let target = if ksum >= 1 { (ksum - 1) * stride + jsum } else { 0 };
            next[target] = next[target].clone() + v;
        }
        while next.len() > stride && next[next.len() - stride..].iter().all(|v| v.is_zero()) {
            next.truncate(next.len() - stride);
        }
        grid = next;
        j_max = next_j;
    }
    Ok(JointLaw { m, n, j_max, grid })
}

#[derive(Debug, Clone, Serialize)]
pub enum ProductMode {
    Exact,
    MonteCarlo { n_samples: u64, seed: u64 },
}

/// Both sides of `E[m^{Y_n}(1+Y_n)N_n^{(0)}] = P(Y_0=0) ∏_{k<n} E(m^{Y_k})^{m−1}`.
#[derive(Debug, Clone)]
pub struct ProductReport<T> {
    pub n: u32,
    pub rhs: T,
    /// Exact left side (exact mode).
    pub lhs: Option<T>,
    /// `|lhs − rhs| / |rhs|` (exact mode).
    pub deviation: Option<T>,
    pub mc: Option<TreeSampleStats>,
    /// `(estimate − rhs) / standard error` (Monte Carlo mode).
    pub z_score: Option<f64>,
}

/// Right side of the product identity from an untruncated evolution.
pub fn product_rhs<T: Mass>(y0: &Dist<T>, m: Arity, n: u32) -> Result<T> {
    let trace = evolve(y0, m, n.saturating_sub(1) as usize, TruncationPolicy::none())?;
    let mut rhs = y0.mass_at(0);
    for i in 0..n as usize {
        let h = trace.h_m[i]
            .clone()
            .ok_or_else(|| DrError::range("E(m^Y) overflowed; use the rational backend"))?;
        rhs = rhs * h.powu(m.get() - 1);
    }
    Ok(rhs)
}

pub fn product_formula_check<T: Mass>(y0: &Dist<T>, m: Arity, n: u32, mode: &ProductMode) -> Result<ProductReport<T>> {
    let panel = crate::dist::moment_panel(y0, m)?;
    let tol = if T::BACKEND == crate::mass::Backend::F64 { 1e-12 } else { 0.0 };
    if panel.delta.to_f64().abs() > tol || (tol == 0.0 && !panel.delta.is_zero()) {
        return Err(DrError::precondition(format!(
            "the product identity needs a critical law; this one has gap {}",
            panel.delta.render()
        )));
    }
    let rhs = product_rhs(y0, m, n)?;
    match mode {
        ProductMode::Exact => {
            let law = joint_law(y0, m, n, DEFAULT_JOINT_CAP)?;
            let lhs = law.product_weight_mean();
            let deviation = (lhs.clone() - rhs.clone()).abs_of() / rhs.abs_of();
            Ok(ProductReport {
                n,
                rhs,
                lhs: Some(lhs),
                deviation: Some(deviation),
                mc: None,
                z_score: None,
            })
        }
        ProductMode::MonteCarlo { n_samples, seed } => {
            let stats = mc_functional(y0, m, n, *n_samples, &ProductWeight, *seed)?;
            let z = (stats.means[0] - rhs.to_f64()) / stats.std_error(0);
            Ok(ProductReport {
                n,
                rhs,
                lhs: None,
                deviation: None,
                mc: Some(stats),
                z_score: Some(z),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{ratio, rational_law};
    use num_rational::BigRational;
    use num_traits::{One, Zero};
    use proptest::prelude::*;

    fn two() -> Arity {
        Arity::new(2).unwrap()
    }

    fn critical() -> Dist<BigRational> {
        rational_law(&[(0, 4, 5), (2, 1, 5)])
    }

    #[test]
    fn dead_leaves() {
        for depth in 1..6 {
            let s = sample_tree(&Dist::<f64>::dirac(0), two(), depth, 9).unwrap();
            assert_eq!(s, NodeSample::default());
        }
        assert_eq!(
            sample_tree(&Dist::<f64>::dirac(0), two(), 0, 9).unwrap(),
            NodeSample::leaf(0)
        );
    }

    #[test]
    fn unit_leaves_depth_one() {
        let s = sample_tree(&Dist::<f64>::dirac(1), two(), 1, 1).unwrap();
        assert_eq!(
            s,
            NodeSample {
                y: 1,
                n_open_zero: 0,
                n_open_total: 2
            }
        );
    }

    #[test]
    fn combine_rule_enumeration() {
        let l = NodeSample::leaf;
        assert_eq!(NodeSample::combine([l(0), l(0)].into_iter()), NodeSample::default());
        let mixed = NodeSample {
            y: 0,
            n_open_zero: 1,
            n_open_total: 2,
        };
        assert_eq!(NodeSample::combine([l(0), l(1)].into_iter()), mixed);
        assert_eq!(NodeSample::combine([l(1), l(0)].into_iter()), mixed);
        assert_eq!(
            NodeSample::combine([l(1), l(1)].into_iter()),
            NodeSample {
                y: 1,
                n_open_zero: 0,
                n_open_total: 2
            }
        );
    }

    #[test]
    fn cost_guard() {
        assert!(matches!(
            sample_tree(&Dist::<f64>::dirac(0), two(), 31, 0),
            Err(DrError::Capacity(_))
        ));
    }

    #[test]
    fn registry_parsing() {
        let reg = FunctionalRegistry::default();
        assert_eq!(reg.parse("product_weight").unwrap().name(), "product_weight");
        assert_eq!(reg.parse("indicator:r=4,k=1").unwrap().name(), "indicator:r=4,k=1");
        assert_eq!(reg.parse("moments").unwrap().labels().len(), 6);
        assert!(reg.parse("nope").is_err());
        assert!(reg.parse("indicator:z=1").is_err());
        assert!(reg.parse("product_weight:r=1").is_err());
    }

    #[test]
    fn mc_examples() {
        let y0 = critical().to_f64_dist();
        let st = mc_functional(&y0, two(), 1, 200_000, &ProductWeight, 42).unwrap();
        assert!((st.means[0] - 32.0 / 25.0).abs() <= 4.0 * st.std_error(0));
        let ci = 1.96 * st.variances[0].sqrt() / (st.n_samples as f64).sqrt();
        assert_eq!(st.ci_halfwidths[0], ci);

        let zero = mc_functional(&Dist::<f64>::dirac(0), two(), 3, 1000, &RawMoments, 1).unwrap();
        assert!(zero.means.iter().all(|&v| v == 0.0));
        assert!(zero.variances.iter().all(|&v| v == 0.0));

        let coin = Dist::new(vec![0.5, 0.5]).unwrap();
        let st = mc_functional(&coin, two(), 1, 100_000, &OpenPathIndicator { r: 1.0, k: 0 }, 5).unwrap();
        assert!((st.means[0] - 0.5).abs() <= 4.0 * st.std_error(0));
    }

    #[test]
    fn mc_is_independent_of_thread_count() {
        let y0 = critical().to_f64_dist();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| mc_functional(&y0, two(), 4, 5000, &RawMoments, 11).unwrap())
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.means, b.means);
        assert_eq!(a.variances, b.variances);
    }

    #[test]
    fn joint_law_examples() {
        let z = joint_law(&Dist::<BigRational>::dirac(0), two(), 3, DEFAULT_JOINT_CAP).unwrap();
        assert!(z.mass(0, 0).is_one());
        let q = joint_law(&critical(), two(), 1, DEFAULT_JOINT_CAP).unwrap();
        assert_eq!(q.mass(0, 0), ratio(16, 25));
        assert_eq!(q.mass(1, 1), ratio(8, 25));
        assert_eq!(q.mass(3, 0), ratio(1, 25));
        assert!(q.total_mass().is_one());
        assert_eq!(q.product_weight_mean(), ratio(32, 25));
        assert!(matches!(
            joint_law(&critical(), two(), 13, DEFAULT_JOINT_CAP),
            Err(DrError::Capacity(_))
        ));
        assert_eq!(q.to_csv().lines().next(), Some("k,j,mass"));
    }

    #[test]
    fn product_identity_small_n() {
        for n in 0..=3 {
            let r = product_formula_check(&critical(), two(), n, &ProductMode::Exact).unwrap();
            assert!(r.deviation.unwrap().is_zero());
            if n == 0 {
                assert_eq!(r.rhs, ratio(4, 5));
            }
            if n == 1 {
                assert_eq!(r.lhs.unwrap(), ratio(32, 25));
            }
        }
        let off = rational_law(&[(0, 1, 2), (1, 1, 2)]);
        assert!(matches!(
            product_formula_check(&off, two(), 1, &ProductMode::Exact),
            Err(DrError::Precondition(_))
        ));
    }

    #[test]
    fn off_critical_counterexample() {
        // the identity fails off criticality: 1/2 versus 3/4 at depth 1
        let off = rational_law(&[(0, 1, 2), (1, 1, 2)]);
        let q = joint_law(&off, two(), 1, DEFAULT_JOINT_CAP).unwrap();
        assert_eq!(q.product_weight_mean(), ratio(1, 2));
        assert_eq!(product_rhs(&off, two(), 1).unwrap(), ratio(3, 4));
    }

    #[test]
    fn moment_merge_is_exact_for_split_data() {
        let data: Vec<f64> = (0..100).map(|i| (i as f64).sin() * 10.0).collect();
        let mut whole = MomentAccumulator::new(1);
        data.iter().for_each(|x| whole.push(&[*x]));
        let mut a = MomentAccumulator::new(1);
        let mut b = MomentAccumulator::new(1);
        data[..37].iter().for_each(|x| a.push(&[*x]));
        data[37..].iter().for_each(|x| b.push(&[*x]));
        let merged = a.merge(&b);
        assert!((merged.mean[0] - whole.mean[0]).abs() < 1e-12);
        assert!((merged.m2[0] - whole.m2[0]).abs() < 1e-9);
    }

    fn arb_critical() -> impl Strategy<Value = Dist<BigRational>> {
        prop::collection::vec(0u32..5, 2..5).prop_filter_map("needs mass ≥ 2", |w| {
            let total: u32 = w.iter().sum();
            if total == 0 || w[1..].iter().all(|&x| x == 0) {
                return None;
            }
            let mut star = vec![BigRational::zero()];
            star.extend(w.iter().map(|&x| ratio(x as i64, total as i64)));
            let star = Dist::new(star).ok()?;
            let p = crate::criticality::critical_p(&star, Arity::new(2).unwrap()).ok()?;
            Some(crate::dist::mix_law(&star, &p))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn joint_law_invariants(y0 in arb_critical(), n in 1u32..5) {
            let m = two();
            let q = joint_law(&y0, m, n, DEFAULT_JOINT_CAP).unwrap();
            let prev = joint_law(&y0, m, n - 1, DEFAULT_JOINT_CAP).unwrap();
            let trace = evolve(&y0, m, n as usize, TruncationPolicy::none()).unwrap();
            prop_assert!(q.total_mass().is_one());
            prop_assert_eq!(q.y_marginal(), trace.laws[n as usize].clone());
            // open-path recursion at s = m
            let mm: BigRational = m.mass();
            let g = trace.h_m[n as usize - 1].clone().unwrap();
            let g0 = trace.p0s[n as usize - 1].clone();
            let lhs = q.open_path_pgf(&mm);
            let rhs = prev.open_path_pgf(&mm) * g - prev.open_path_pgf(&BigRational::zero()) * g0;
            prop_assert_eq!(lhs, rhs);
            // root bound
            let tail_prev = BigRational::one() - trace.p0s[n as usize - 1].clone();
            prop_assert!(q.open_at_zero() <= ratio(2, 1) * tail_prev);
        }
    }
}
