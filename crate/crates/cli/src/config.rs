//! The declarative run document. Command-line flags are compiled into this
//! same structure, so every run goes through one validation path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dr_core::criticality::PowerTailLaw;
use dr_core::{Arity, Backend, Dist, DrError, LatticeDist, Mass, Result};

pub const DEFAULT_TAIL_CAP: usize = 50_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Registered experiment name.
    pub experiment: String,
    pub model: ModelConfig,
    /// Experiment parameters; each experiment rejects keys it does not know.
    #[serde(default = "empty_object")]
    pub params: serde_json::Value,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub seed: u64,
}

fn empty_object() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub m: u32,
    /// Star law source: `delta:K`, `geom-mtail:alpha=A,cap=K`, `file:law.json`
    /// or `probs:p0,p1,…`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub star: Option<String>,
    /// Mixing weight, as a decimal or `num/den`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<String>,
    #[serde(default = "default_backend")]
    pub backend: Backend,
}

fn default_backend() -> Backend {
    Backend::F64
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Artifacts and a manifest go here; without it the main artifact is
    /// printed to stdout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DrError::Parse(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Rewrites file references as `file:` paths anchored at the config's
    /// directory.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |s: &mut String| {
            let rest = match s.strip_prefix("file:") {
                Some(rest) => rest,
                None if s.ends_with(".json") || s.ends_with(".csv") => s.as_str(),
                None => return,
            };
            let p = Path::new(rest);
            *s = if p.is_relative() {
                format!("file:{}", base.join(p).display())
            } else {
                format!("file:{rest}")
            };
        };
        if let Some(star) = self.model.star.as_mut() {
            fix(star);
        }
        if let serde_json::Value::Object(map) = &mut self.params {
            for v in map.values_mut() {
                if let serde_json::Value::String(s) = v {
                    fix(s);
                }
            }
        }
        if let Some(dir) = self.output.dir.as_mut() {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
    }

    /// Every `file:` reference must exist before anything runs.
    pub fn check_files(&self) -> Result<()> {
        let mut refs: Vec<&str> = self.model.star.iter().map(String::as_str).collect();
        if let serde_json::Value::Object(map) = &self.params {
            refs.extend(map.values().filter_map(|v| v.as_str()));
        }
        for r in refs {
            if let Some(path) = r.strip_prefix("file:") {
                if !Path::new(path).is_file() {
                    return Err(DrError::Io(std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!("referenced file '{path}' not found"),
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn arity(&self) -> Result<Arity> {
        Arity::new(self.model.m)
    }

    pub fn star_source(&self) -> Result<LawSource> {
        let s = self
            .model
            .star
            .as_deref()
            .ok_or_else(|| DrError::validation("model.star is required for this experiment"))?;
        LawSource::parse(s)
    }

    pub fn p<T: Mass>(&self) -> Result<T> {
        let s = self
            .model
            .p
            .as_deref()
            .ok_or_else(|| DrError::validation("model.p is required for this experiment"))?;
        T::parse_mass(s).map_err(|e| DrError::validation(format!("model.p: {e}")))
    }
}

/// Where a law comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum LawSource {
    Delta(usize),
    PowerTail { alpha: f64, cap: usize },
    File(PathBuf),
    Probs(Vec<String>),
}

impl LawSource {
    /// A bare path ending in `.json` is read as `file:`.
    pub fn parse(s: &str) -> Result<Self> {
        if s.ends_with(".json") && !s.starts_with("file:") {
            return Self::parse(&format!("file:{s}"));
        }
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| DrError::validation(format!("law source '{s}' needs a 'kind:' prefix")))?;
        match kind {
            "delta" => rest
                .trim()
                .parse()
                .map(LawSource::Delta)
                .map_err(|_| DrError::validation(format!("delta: bad point '{rest}'"))),
            "geom-mtail" => {
                let (mut alpha, mut cap) = (None, DEFAULT_TAIL_CAP);
                for pair in rest.split(',') {
                    let (key, v) = pair
                        .split_once('=')
                        .ok_or_else(|| DrError::validation(format!("geom-mtail: expected key=value, got '{pair}'")))?;
                    match key.trim() {
                        "alpha" => {
                            alpha = Some(v.trim().parse::<f64>().map_err(|_| {
                                DrError::validation(format!("geom-mtail: bad alpha '{v}'"))
                            })?)
                        }
                        "cap" => {
                            cap = v
                                .trim()
                                .parse()
                                .map_err(|_| DrError::validation(format!("geom-mtail: bad cap '{v}'")))?
                        }
                        other => return Err(DrError::validation(format!("geom-mtail: unknown key '{other}'"))),
                    }
                }
                let alpha = alpha.ok_or_else(|| DrError::validation("geom-mtail: alpha is required"))?;
                Ok(LawSource::PowerTail { alpha, cap })
            }
            "file" => {
                let path = PathBuf::from(rest);
                if !path.is_file() {
                    return Err(DrError::Io(std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!("law file '{rest}' not found"),
                    )));
                }
                Ok(LawSource::File(path))
            }
            "probs" => Ok(LawSource::Probs(rest.split(',').map(|v| v.trim().to_string()).collect())),
            other => Err(DrError::validation(format!(
                "unknown law source '{other}' (expected delta, geom-mtail, file or probs)"
            ))),
        }
    }

    pub fn power_tail(&self, m: Arity) -> Result<PowerTailLaw> {
        match self {
            LawSource::PowerTail { alpha, cap } => PowerTailLaw::new(m, *alpha, *cap),
            _ => Err(DrError::validation("this experiment needs a geom-mtail star")),
        }
    }

    /// Any law on the nonnegative integers.
    pub fn law<T: Mass>(&self, m: Arity) -> Result<Dist<T>> {
        match self {
            LawSource::Delta(k) => Ok(Dist::dirac(*k)),
            LawSource::PowerTail { .. } => {
                let (law, _) = self.power_tail(m)?.law();
                from_f64_law(&law)
            }
            LawSource::File(path) => {
                let text = std::fs::read_to_string(path)?;
                let doc = LatticeDist::from_json(&text)
                    .map_err(|e| DrError::validation(format!("{}: {e}", path.display())))?;
                match T::BACKEND {
                    Backend::F64 => from_f64_law(&doc.to_f64()),
                    Backend::Rational => {
                        let exact = doc.to_exact();
                        let probs = exact
                            .probs()
                            .iter()
                            .map(|q| T::parse_mass(&format!("{}/{}", q.numer(), q.denom())))
                            .collect::<Result<Vec<T>>>()?;
                        Dist::new(probs)
                    }
                }
            }
            LawSource::Probs(items) => {
                let probs = items
                    .iter()
                    .enumerate()
                    .map(|(k, v)| {
                        T::parse_mass(v).map_err(|e| DrError::validation(format!("probs[{k}]: {e}")))
                    })
                    .collect::<Result<Vec<T>>>()?;
                Dist::new(probs)
            }
        }
    }

    /// A star law: no mass at 0 and some mass on values ≥ 2. A power-tail
    /// source is conditioned on being positive.
    pub fn star<T: Mass>(&self, m: Arity) -> Result<Dist<T>> {
        let law = match self {
            LawSource::PowerTail { .. } => {
                let (law, _) = self.power_tail(m)?.law();
                let positive = 1.0 - law.mass_at(0);
                let mut probs: Vec<f64> = law.probs().iter().map(|p| p / positive).collect();
                probs[0] = 0.0;
                from_f64_law(&Dist::new(probs)?)?
            }
            _ => self.law(m)?,
        };
        dr_core::dist::validate_star(&law)?;
        Ok(law)
    }
}

fn from_f64_law<T: Mass>(law: &Dist<f64>) -> Result<Dist<T>> {
    let probs = law
        .probs()
        .iter()
        .map(|&p| T::from_f64(p))
        .collect::<Result<Vec<T>>>()?;
    Dist::new(probs)
}
