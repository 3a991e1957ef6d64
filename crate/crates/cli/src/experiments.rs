//! Runtime registry of experiments. Each entry reads its parameters from a
//! [`RunConfig`] and returns named text artifacts; the runner decides where
//! they go.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_rational::BigRational;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use dr_core::coupling::{bridge_check, make_coupling, BridgeMode, BridgeParams};
use dr_core::criticality::{critical_p, pm_asymptotics_scan, RhoMode};
use dr_core::dist::mix;
use dr_core::evolution::{evolve, TruncationPolicy};
use dr_core::free_energy::{
    epsilon_scan, fit_exponent, free_energy, log_grid, FeStatus, FreeEnergyBounds, FreeEnergyOptions,
};
use dr_core::numeric::{fmt_f64, LogReal};
use dr_core::regularity::{regularity_report, truncated_regularity_scan};
use dr_core::tree_mc::{joint_law, mc_functional, FunctionalRegistry, DEFAULT_JOINT_CAP};
use dr_core::{Backend, DrError, Mass, Result, SystemSpec};

use crate::config::{LawSource, RunConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

impl Artifact {
    fn new(name: &str, contents: String) -> Self {
        Artifact {
            name: name.to_string(),
            contents,
        }
    }

    fn json(name: &str, value: &serde_json::Value) -> Self {
        let mut text = serde_json::to_string_pretty(value).expect("JSON values always serialize");
        text.push('\n');
        Self::new(name, text)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    /// Printed on stdout; when absent the first artifact is printed instead.
    pub summary: Option<String>,
    pub artifacts: Vec<Artifact>,
}

pub trait Experiment: Send + Sync {
    fn name(&self) -> &'static str;
    fn about(&self) -> &'static str;
    fn run(&self, cfg: &RunConfig) -> Result<Outcome>;
}

/// An experiment backed by a plain function.
struct FnExperiment {
    name: &'static str,
    about: &'static str,
    body: fn(&RunConfig) -> Result<Outcome>,
}

impl Experiment for FnExperiment {
    fn name(&self) -> &'static str {
        self.name
    }

    fn about(&self) -> &'static str {
        self.about
    }

    fn run(&self, cfg: &RunConfig) -> Result<Outcome> {
        (self.body)(cfg)
    }
}

pub struct Registry {
    entries: BTreeMap<&'static str, Box<dyn Experiment>>,
}

impl Default for Registry {
    fn default() -> Self {
        let mut reg = Registry {
            entries: BTreeMap::new(),
        };
        let builtin: [(&'static str, &'static str, fn(&RunConfig) -> Result<Outcome>); 9] = [
            ("critical", "critical mixing weight of a star law", run_critical),
            ("iterate", "iterate the map and trace E, P0, the gap and H_m", run_iterate),
            ("free-energy", "rigorous free-energy enclosure at one p", run_free_energy),
            ("scan", "free-energy enclosures along p = p_c + ε", run_scan),
            ("fit", "exponent fit from a scan CSV", run_fit),
            ("tree", "Monte Carlo or exact tree functionals", run_tree),
            ("bridge", "coupled-bridge inequality check", run_bridge),
            ("regularity", "regularity report, or a truncation scan", run_regularity),
            ("pm-scan", "critical weights of truncated power-tail stars", run_pm_scan),
        ];
        for (name, about, body) in builtin {
            reg.register(Box::new(FnExperiment { name, about, body }));
        }
        reg
    }
}

impl Registry {
    pub fn register(&mut self, exp: Box<dyn Experiment>) {
        self.entries.insert(exp.name(), exp);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Experiment> {
        self.entries.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            DrError::validation(format!(
                "unknown experiment '{name}' (known: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn Experiment> {
        self.entries.values().map(|b| b.as_ref())
    }
}

macro_rules! on_backend {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.model.backend {
            Backend::F64 => $f::<f64>($($arg),*),
            Backend::Rational => $f::<BigRational>($($arg),*),
        }
    };
}

fn params<P: DeserializeOwned>(cfg: &RunConfig) -> Result<P> {
    serde_json::from_value(cfg.params.clone())
        .map_err(|e| DrError::validation(format!("params for '{}': {e}", cfg.experiment)))
}

fn spec<T: Mass>(cfg: &RunConfig) -> Result<SystemSpec<T>> {
    let m = cfg.arity()?;
    SystemSpec::new(m, cfg.p::<T>()?, cfg.star_source()?.star::<T>(m)?)
}

fn bounds_json(b: &FreeEnergyBounds) -> serde_json::Value {
    json!({
        "F_lower": b.lower.value(),
        "F_upper": b.upper.value(),
        "ln_F_lower": finite_or_null(b.lower.ln()),
        "ln_F_upper": finite_or_null(b.upper.ln()),
        "n_used": b.n_used,
        "ledger_cost": b.ledger_cost.value(),
        "status": b.status,
    })
}

fn finite_or_null(x: f64) -> serde_json::Value {
    if x.is_finite() {
        json!(x)
    } else {
        serde_json::Value::Null
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoParams {}

fn run_critical(cfg: &RunConfig) -> Result<Outcome> {
    let _: NoParams = params(cfg)?;
    on_backend!(cfg, critical(cfg))
}

fn critical<T: Mass>(cfg: &RunConfig) -> Result<Outcome> {
    let m = cfg.arity()?;
    let p_c = critical_p(&cfg.star_source()?.star::<T>(m)?, m)?.render();
    let doc = json!({ "m": m.get(), "backend": cfg.model.backend, "p_c": p_c });
    Ok(Outcome {
        summary: Some(p_c),
        artifacts: vec![Artifact::json("critical.json", &doc)],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterateParams {
    pub n: usize,
    /// Fixed support cap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<usize>,
    /// Total truncation budget over the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_cap: Option<usize>,
}

impl IterateParams {
    fn policy(&self) -> Result<TruncationPolicy> {
        let policy = match (self.cap, self.budget) {
            (Some(_), Some(_)) => return Err(DrError::validation("give either cap or budget, not both")),
            (Some(cap), None) => TruncationPolicy::fixed_cap(cap),
            (None, Some(budget)) => TruncationPolicy::budgeted(budget),
            (None, None) => TruncationPolicy::none(),
        };
        Ok(match self.hard_cap {
            Some(h) => policy.with_hard_cap(h),
            None => policy,
        })
    }
}

fn run_iterate(cfg: &RunConfig) -> Result<Outcome> {
    on_backend!(cfg, iterate(cfg))
}

fn iterate<T: Mass>(cfg: &RunConfig) -> Result<Outcome> {
    let par: IterateParams = params(cfg)?;
    let spec = spec::<T>(cfg)?;
    let trace = evolve(&mix(&spec), spec.m(), par.n, par.policy()?)?;
    Ok(Outcome {
        summary: None,
        artifacts: vec![Artifact::new("trace.csv", trace.to_csv())],
    })
}

fn run_free_energy(cfg: &RunConfig) -> Result<Outcome> {
    on_backend!(cfg, free_energy_run(cfg))
}

fn free_energy_run<T: Mass>(cfg: &RunConfig) -> Result<Outcome> {
    let opts: FreeEnergyOptions = params(cfg)?;
    let spec = spec::<T>(cfg)?;
    let bounds = free_energy(&spec, &opts)?;
    let mut doc = bounds_json(&bounds);
    doc["p"] = json!(spec.p().render());
    Ok(Outcome {
        summary: None,
        artifacts: vec![Artifact::json("free_energy.json", &doc)],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanParams {
    /// `log:lo:hi:count` or a comma-separated list.
    pub eps_grid: String,
    #[serde(default)]
    pub fit: bool,
    #[serde(default)]
    pub options: FreeEnergyOptions,
}

pub fn parse_eps_grid(s: &str) -> Result<Vec<f64>> {
    let num = |v: &str| {
        v.trim()
            .parse::<f64>()
            .map_err(|_| DrError::validation(format!("eps grid: bad number '{v}'")))
    };
    if let Some(rest) = s.strip_prefix("log:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            return Err(DrError::validation(format!("eps grid '{s}' should read log:lo:hi:count")));
        }
        let count = parts[2]
            .trim()
            .parse()
            .map_err(|_| DrError::validation(format!("eps grid: bad count '{}'", parts[2])))?;
        log_grid(num(parts[0])?, num(parts[1])?, count)
    } else {
        s.split(',').map(num).collect()
    }
}

const SCAN_HEADER: &str = "epsilon,F_lower,F_upper,ln_F_lower,ln_F_upper,n_used,status";

fn run_scan(cfg: &RunConfig) -> Result<Outcome> {
    let par: ScanParams = params(cfg)?;
    if cfg.model.backend != Backend::F64 {
        return Err(DrError::validation("scan runs on the f64 backend only"));
    }
    let m = cfg.arity()?;
    let star = cfg.star_source()?.star::<f64>(m)?;
    let scan = epsilon_scan(&star, m, &parse_eps_grid(&par.eps_grid)?, &par.options)?;
    let mut csv = format!("{SCAN_HEADER}\n");
    for (eps, b) in &scan {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            fmt_f64(*eps),
            fmt_f64(b.lower.value()),
            fmt_f64(b.upper.value()),
            fmt_f64(b.lower.ln()),
            fmt_f64(b.upper.ln()),
            b.n_used,
            b.status
        );
    }
    let mut artifacts = vec![Artifact::new("scan.csv", csv)];
    if par.fit {
        let fit = fit_exponent(&scan)?;
        artifacts.push(Artifact::json("fit.json", &serde_json::to_value(&fit).map_err(json_err)?));
    }
    Ok(Outcome {
        summary: None,
        artifacts,
    })
}

fn json_err(e: serde_json::Error) -> DrError {
    DrError::Parse(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitParams {
    /// Scan CSV as written by the `scan` experiment.
    pub scan: String,
}

#[derive(Debug, Deserialize)]
struct ScanRow {
    epsilon: f64,
    #[serde(rename = "ln_F_lower")]
    ln_lower: f64,
    #[serde(rename = "ln_F_upper")]
    ln_upper: f64,
    n_used: usize,
    status: String,
}

pub fn read_scan(text: &str) -> Result<Vec<(f64, FreeEnergyBounds)>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    reader
        .deserialize::<ScanRow>()
        .enumerate()
        .map(|(i, row)| {
            let row = row.map_err(|e| DrError::Parse(format!("scan CSV row {}: {e}", i + 1)))?;
            let status: FeStatus = serde_json::from_value(json!(row.status))
                .map_err(|_| DrError::Parse(format!("scan CSV row {}: unknown status '{}'", i + 1, row.status)))?;
            Ok((
                row.epsilon,
                FreeEnergyBounds {
                    lower: LogReal::from_ln(row.ln_lower),
                    upper: LogReal::from_ln(row.ln_upper),
                    n_used: row.n_used,
                    ledger_cost: LogReal::ZERO,
                    status,
                },
            ))
        })
        .collect()
}

fn run_fit(cfg: &RunConfig) -> Result<Outcome> {
    let par: FitParams = params(cfg)?;
    let path = par.scan.strip_prefix("file:").unwrap_or(&par.scan);
    let scan = read_scan(&std::fs::read_to_string(path)?)?;
    let fit = fit_exponent(&scan)?;
    Ok(Outcome {
        summary: None,
        artifacts: vec![Artifact::json("fit.json", &serde_json::to_value(&fit).map_err(json_err)?)],
    })
}

fn default_functional() -> String {
    "product_weight".to_string()
}

fn default_joint_cap() -> u64 {
    DEFAULT_JOINT_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeParams {
    /// Leaf law source.
    pub y0: String,
    pub depth: u32,
    /// Monte Carlo sample count; 0 evaluates the functional on the exact joint law.
    #[serde(default)]
    pub samples: u64,
    #[serde(default = "default_functional")]
    pub functional: String,
    /// Also write the exact joint law of (root value, open paths from zero leaves).
    #[serde(default)]
    pub joint: bool,
    #[serde(default = "default_joint_cap")]
    pub joint_cap: u64,
}

fn run_tree(cfg: &RunConfig) -> Result<Outcome> {
    on_backend!(cfg, tree(cfg))
}

fn tree<T: Mass>(cfg: &RunConfig) -> Result<Outcome> {
    let par: TreeParams = params(cfg)?;
    let m = cfg.arity()?;
    let y0 = LawSource::parse(&par.y0)?.law::<T>(m)?;
    let functional = FunctionalRegistry::default().parse(&par.functional)?;
    let mut artifacts = Vec::new();
    let exact = par.samples == 0;
    let law = if exact || par.joint {
        Some(joint_law(&y0, m, par.depth, par.joint_cap)?)
    } else {
        None
    };
    if exact {
        let law = law.as_ref().expect("computed above");
        let means = functional.exact_mean(&law.to_f64()).ok_or_else(|| {
            DrError::validation(format!("functional '{}' has no exact evaluation; set samples", functional.name()))
        })?;
        let doc = json!({
            "functional": functional.name(),
            "labels": functional.labels(),
            "m": m.get(),
            "depth": par.depth,
            "exact": true,
            "means": means,
        });
        artifacts.push(Artifact::json("tree.json", &doc));
    } else {
        let stats = mc_functional(&y0, m, par.depth, par.samples, functional.as_ref(), cfg.seed)?;
        artifacts.push(Artifact::json("tree.json", &serde_json::to_value(&stats).map_err(json_err)?));
    }
    if par.joint {
        artifacts.push(Artifact::new("joint.csv", law.expect("computed above").to_csv()));
    }
    Ok(Outcome {
        summary: None,
        artifacts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeRunParams {
    pub x0: String,
    pub y0: String,
    pub n: u32,
    pub k: u32,
    #[serde(default)]
    pub l: u32,
    pub r: f64,
    pub eta: String,
    /// 0 computes the right side exactly.
    #[serde(default)]
    pub samples: u64,
}

fn run_bridge(cfg: &RunConfig) -> Result<Outcome> {
    on_backend!(cfg, bridge(cfg))
}

fn bridge<T: Mass>(cfg: &RunConfig) -> Result<Outcome> {
    let par: BridgeRunParams = params(cfg)?;
    let m = cfg.arity()?;
    let cs = make_coupling(
        &LawSource::parse(&par.x0)?.law::<T>(m)?,
        &LawSource::parse(&par.y0)?.law::<T>(m)?,
    )?;
    let eta = T::parse_mass(&par.eta).map_err(|e| DrError::validation(format!("eta: {e}")))?;
    let mode = match par.samples {
        0 => BridgeMode::Exact,
        n_samples => BridgeMode::MonteCarlo {
            n_samples,
            seed: cfg.seed,
        },
    };
    let bridge_params = BridgeParams {
        n: par.n,
        k: par.k,
        l: par.l,
        r: par.r,
    };
    let report = bridge_check(&cs, m, bridge_params, &eta, mode)?;
    Ok(Outcome {
        summary: None,
        artifacts: vec![Artifact::json("bridge.json", &report.to_json())],
    })
}

fn default_rho() -> RhoMode {
    RhoMode::Randomized { q: None }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularityParams {
    /// Law to report on. Without it, `levels` selects a scan over truncations
    /// of the model's power-tail star.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<usize>>,
    #[serde(default = "default_rho")]
    pub rho: RhoMode,
}

fn run_regularity(cfg: &RunConfig) -> Result<Outcome> {
    let par: RegularityParams = params(cfg)?;
    match (&par.zeta, &par.levels) {
        (Some(_), None) => on_backend!(cfg, regularity(cfg, &par)),
        (None, Some(levels)) => regularity_scan(cfg, levels, par.rho, par.beta),
        _ => Err(DrError::validation("regularity needs exactly one of zeta or levels")),
    }
}

fn regularity<T: Mass>(cfg: &RunConfig, par: &RegularityParams) -> Result<Outcome> {
    let m = cfg.arity()?;
    let zeta = LawSource::parse(par.zeta.as_deref().expect("checked by caller"))?.law::<T>(m)?;
    let rep = regularity_report(&zeta, m, par.beta.unwrap_or(0.0))?;
    let doc = json!({
        "m": m.get(),
        "beta": rep.beta,
        "lambda": rep.lambda.render(),
        "xi": rep.xi.iter().map(Mass::render).collect::<Vec<_>>(),
        "chi_best": rep.chi_best.render(),
        "binding_k": rep.binding_k,
    });
    Ok(Outcome {
        summary: None,
        artifacts: vec![Artifact::json("regularity.json", &doc)],
    })
}

fn regularity_scan(cfg: &RunConfig, levels: &[usize], rho: RhoMode, beta: Option<f64>) -> Result<Outcome> {
    if beta.is_some() {
        return Err(DrError::validation("a truncation scan takes β = 4 − α from the star; drop beta"));
    }
    let m = cfg.arity()?;
    let rows = truncated_regularity_scan(&cfg.star_source()?.power_tail(m)?, levels, rho)?;
    let mut csv = String::from("M,p_M,chi_best,Lambda,pre_asymptotic\n");
    for r in rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.level,
            fmt_f64(r.p_m),
            fmt_f64(r.chi_best),
            fmt_f64(r.lambda),
            r.pre_asymptotic
        );
    }
    Ok(Outcome {
        summary: None,
        artifacts: vec![Artifact::new("regularity_scan.csv", csv)],
    })
}

fn default_pm_rho() -> RhoMode {
    RhoMode::Keep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmScanParams {
    pub levels: Vec<usize>,
    #[serde(default = "default_pm_rho")]
    pub rho: RhoMode,
}

fn run_pm_scan(cfg: &RunConfig) -> Result<Outcome> {
    let par: PmScanParams = params(cfg)?;
    let m = cfg.arity()?;
    let rows = pm_asymptotics_scan(&cfg.star_source()?.power_tail(m)?, &par.levels, par.rho)?;
    let mut csv = String::from("M,p_M,gap,scaled_gap\n");
    for r in rows {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            r.level,
            fmt_f64(r.p_m),
            fmt_f64(r.gap),
            fmt_f64(r.scaled_gap)
        );
    }
    Ok(Outcome {
        summary: None,
        artifacts: vec![Artifact::new("pm_scan.csv", csv)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(text: &str) -> RunConfig {
        RunConfig::from_json(text).unwrap()
    }

    #[test]
    fn registry_lists_every_experiment() {
        let reg = Registry::default();
        assert_eq!(reg.names().len(), 9);
        assert!(reg.get("scan").is_ok());
        assert!(matches!(reg.get("plot"), Err(DrError::Validation(_))));
    }

    #[test]
    fn critical_in_both_backends() {
        let reg = Registry::default();
        let float = config(r#"{"experiment":"critical","model":{"m":2,"star":"delta:2"}}"#);
        assert_eq!(reg.get("critical").unwrap().run(&float).unwrap().summary.unwrap(), "0.2");
        let exact =
            config(r#"{"experiment":"critical","model":{"m":2,"star":"delta:2","backend":"rational"}}"#);
        assert_eq!(reg.get("critical").unwrap().run(&exact).unwrap().summary.unwrap(), "1/5");
    }

    #[test]
    fn unknown_params_rejected() {
        let cfg = config(r#"{"experiment":"iterate","model":{"m":2,"star":"delta:2","p":"0.2"},"params":{"n":3,"depth":1}}"#);
        assert!(matches!(run_iterate(&cfg), Err(DrError::Validation(_))));
    }

    #[test]
    fn eps_grid_forms() {
        assert_eq!(parse_eps_grid("0.1, 0.2").unwrap(), vec![0.1, 0.2]);
        let g = parse_eps_grid("log:1e-3:1e-1:3").unwrap();
        assert_eq!(g.len(), 3);
        assert!((g[1] - 1e-2).abs() < 1e-15);
        assert!(parse_eps_grid("log:1e-3:1e-1").is_err());
    }

    #[test]
    fn scan_csv_round_trips_through_fit_reader() {
        let cfg = config(
            r#"{"experiment":"scan","model":{"m":2,"star":"delta:2"},
                "params":{"eps_grid":"log:1e-2:1e-1:4","options":{"tol_rel":0.05}}}"#,
        );
        let out = run_scan(&cfg).unwrap();
        let rows = read_scan(&out.artifacts[0].contents).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|(_, b)| b.is_pinched() && b.lower <= b.upper));
    }

    #[test]
    fn regularity_needs_one_mode() {
        let both = config(
            r#"{"experiment":"regularity","model":{"m":2,"star":"geom-mtail:alpha=3"},
                "params":{"zeta":"probs:0.8,0,0.2","levels":[16]}}"#,
        );
        assert!(run_regularity(&both).is_err());
        let exact = config(
            r#"{"experiment":"regularity","model":{"m":2,"backend":"rational"},"params":{"zeta":"probs:4/5,0,1/5"}}"#,
        );
        let out = run_regularity(&exact).unwrap();
        let doc: serde_json::Value = serde_json::from_str(&out.artifacts[0].contents).unwrap();
        assert_eq!(doc["chi_best"], "4/5");
        assert_eq!(doc["lambda"], "32/5");
    }
}
