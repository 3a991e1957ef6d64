use std::fs;
use std::time::Instant;

use serde_json::json;

use dr_core::{DrError, Result};

use crate::config::RunConfig;
use crate::experiments::Registry;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_ECHO: &str = "config.json";

/// Runs a validated config and returns what should go to stdout.
pub fn execute(cfg: &RunConfig, registry: &Registry) -> Result<String> {
    cfg.check_files()?;
    let experiment = registry.get(&cfg.experiment)?;
    let started = Instant::now();
    let outcome = experiment.run(cfg)?;
    let wall = started.elapsed().as_secs_f64();

    let Some(dir) = &cfg.output.dir else {
        if outcome.artifacts.len() > 1 {
            eprintln!(
                "note: {} further artifact(s) not shown; pass --out to keep them",
                outcome.artifacts.len() - 1
            );
        }
        return Ok(outcome
            .summary
            .map(|s| s + "\n")
            .or_else(|| outcome.artifacts.into_iter().next().map(|a| a.contents))
            .unwrap_or_default());
    };

    fs::create_dir_all(dir)?;
    for artifact in &outcome.artifacts {
        fs::write(dir.join(&artifact.name), &artifact.contents)?;
    }
    let echo = serde_json::to_string_pretty(cfg).map_err(|e| DrError::Parse(e.to_string()))?;
    fs::write(dir.join(CONFIG_ECHO), echo + "\n")?;
    let manifest = json!({
        "tool": "dr",
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "config": cfg,
        "artifacts": outcome.artifacts.iter().map(|a| a.name.as_str()).collect::<Vec<_>>(),
        "wall_time_s": wall,
        "rerun": format!("dr run --config {}", dir.join(CONFIG_ECHO).display()),
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| DrError::Parse(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text + "\n")?;
    Ok(outcome.summary.map(|s| s + "\n").unwrap_or_default())
}

/// 1 for bad input, 2 when a numeric bound is exceeded, 3 for I/O.
pub fn exit_code(err: &DrError) -> i32 {
    match err {
        DrError::Capacity(_) | DrError::Range(_) => 2,
        DrError::Io(_) => 3,
        DrError::Validation(_)
        | DrError::Domain(_)
        | DrError::Precondition(_)
        | DrError::Fit(_)
        | DrError::Parse(_) => 1,
    }
}

pub fn error_kind(err: &DrError) -> &'static str {
    match err {
        DrError::Validation(_) => "validation",
        DrError::Domain(_) => "domain",
        DrError::Precondition(_) => "precondition",
        DrError::Capacity(_) => "capacity",
        DrError::Range(_) => "range",
        DrError::Fit(_) => "fit",
        DrError::Parse(_) => "parse",
        DrError::Io(_) => "io",
    }
}

/// One JSON object per failure on stderr.
pub fn diagnostic(err: &DrError) -> String {
    json!({ "error": error_kind(err), "exit_code": exit_code(err), "message": err.to_string() }).to_string()
}
