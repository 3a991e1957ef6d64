//! `dr`: command-line front end. Every subcommand compiles its flags into a
//! [`RunConfig`] document and hands it to the same runner as `dr run`.

mod config;
mod experiments;
mod runner;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dr_core::criticality::RhoMode;
use dr_core::free_energy::FreeEnergyOptions;
use dr_core::{Backend, DrError, Result};

use config::{ModelConfig, OutputConfig, RunConfig};
use experiments::{
    BridgeRunParams, FitParams, IterateParams, NoParams, PmScanParams, Registry, RegularityParams, ScanParams,
    TreeParams,
};

#[derive(Parser)]
#[command(name = "dr", version, about = "Numerical laboratory for the max-plus recursive model")]
struct Cli {
    /// Directory for artifacts and the run manifest.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (DR_WORKERS takes precedence).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Arity of the tree.
    #[arg(long, default_value_t = 2)]
    m: u32,
    /// delta:K, geom-mtail:alpha=A,cap=K, file:law.json or probs:p0,p1,...
    #[arg(long)]
    star: Option<String>,
    /// Mixing weight (decimal or num/den).
    #[arg(long)]
    p: Option<String>,
    #[arg(long, default_value = "f64")]
    backend: Backend,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FeArgs {
    /// Target relative width of the enclosure.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    tol_abs: Option<f64>,
    #[arg(long)]
    n_max: Option<usize>,
    /// Total truncation budget.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    hard_cap: Option<usize>,
}

impl FeArgs {
    fn options(&self) -> FreeEnergyOptions {
        let mut opts = FreeEnergyOptions::default();
        if let Some(v) = self.tol {
            opts.tol_rel = v;
        }
        if let Some(v) = self.tol_abs {
            opts.tol_abs = v;
        }
        if let Some(v) = self.n_max {
            opts.n_max = v;
        }
        if let Some(v) = self.budget {
            opts.budget = v;
        }
        if let Some(v) = self.hard_cap {
            opts.hard_cap = v;
        }
        opts
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the critical mixing weight.
    Critical {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Iterate the map and emit a per-generation CSV.
    Iterate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long)]
        hard_cap: Option<usize>,
    },
    /// Free-energy enclosure at one mixing weight.
    FreeEnergy {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        fe: FeArgs,
    },
    /// Free-energy enclosures along p = p_c + ε.
    Scan {
        #[command(flatten)]
        model: ModelArgs,
        /// log:lo:hi:count or a comma-separated list.
        #[arg(long)]
        eps_grid: String,
        /// Also fit the exponent.
        #[arg(long)]
        fit: bool,
        #[command(flatten)]
        fe: FeArgs,
    },
    /// Exponent fit from a scan CSV.
    Fit {
        #[arg(long)]
        scan: PathBuf,
    },
    /// Tree functionals by Monte Carlo, or exactly with --samples 0.
    Tree {
        #[command(flatten)]
        model: ModelArgs,
        /// Leaf law.
        #[arg(long)]
        y0: String,
        #[arg(long)]
        depth: u32,
        #[arg(long, default_value = "0", value_parser = parse_count)]
        samples: u64,
        /// product_weight, indicator:r=R,k=K or moments.
        #[arg(long, default_value = "product_weight")]
        functional: String,
        /// Write the exact joint law as CSV.
        #[arg(long)]
        joint: bool,
    },
    /// Check the coupled-bridge inequality.
    Bridge {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        x0: String,
        #[arg(long)]
        y0: String,
        #[arg(long)]
        n: u32,
        #[arg(long)]
        k: u32,
        #[arg(long, default_value_t = 0)]
        l: u32,
        #[arg(long)]
        r: f64,
        #[arg(long)]
        eta: String,
        /// 0 evaluates the right side exactly.
        #[arg(long, default_value = "0", value_parser = parse_count)]
        samples: u64,
    },
    /// Regularity report of a law, or a scan over truncation levels.
    Regularity {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        zeta: Option<String>,
        #[arg(long)]
        beta: Option<f64>,
        /// Comma-separated truncation levels; scans the model's power-tail star.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<usize>>,
        /// keep, zero, randomized or randomized:q.
        #[arg(long, default_value = "randomized")]
        rho: RhoMode,
    },
    /// Critical weights of truncated power-tail stars.
    PmScan {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<usize>,
        #[arg(long, default_value = "keep")]
        rho: RhoMode,
    },
    /// Run a JSON config document.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// List registered experiments.
    List,
}

/// Accepts `1000000` as well as `1e6`.
fn parse_count(s: &str) -> std::result::Result<u64, String> {
    if let Ok(n) = s.parse::<u64>() {
        return Ok(n);
    }
    match s.parse::<f64>() {
        Ok(x) if x >= 0.0 && x.fract() == 0.0 && x < 2f64.powi(63) => Ok(x as u64),
        _ => Err(format!("'{s}' is not a nonnegative integer count")),
    }
}

fn document<P: Serialize>(experiment: &str, model: ModelArgs, params: &P) -> Result<RunConfig> {
    Ok(RunConfig {
        experiment: experiment.to_string(),
        model: ModelConfig {
            m: model.m,
            star: model.star,
            p: model.p,
            backend: model.backend,
        },
        params: serde_json::to_value(params).map_err(|e| DrError::Parse(e.to_string()))?,
        output: OutputConfig::default(),
        seed: model.seed,
    })
}

fn default_model() -> ModelArgs {
    ModelArgs {
        m: 2,
        star: None,
        p: None,
        backend: Backend::F64,
        seed: 0,
    }
}

fn compile(command: Command, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = match command {
        Command::Critical { model } => document("critical", model, &NoParams {})?,
        Command::Iterate {
            model,
            n,
            cap,
            budget,
            hard_cap,
        } => document("iterate", model, &IterateParams { n, cap, budget, hard_cap })?,
        Command::FreeEnergy { model, fe } => document("free-energy", model, &fe.options())?,
        Command::Scan {
            model,
            eps_grid,
            fit,
            fe,
        } => document(
            "scan",
            model,
            &ScanParams {
                eps_grid,
                fit,
                options: fe.options(),
            },
        )?,
        Command::Fit { scan } => document(
            "fit",
            default_model(),
            &FitParams {
                scan: format!("file:{}", scan.display()),
            },
        )?,
        Command::Tree {
            model,
            y0,
            depth,
            samples,
            functional,
            joint,
        } => document(
            "tree",
            model,
            &TreeParams {
                y0,
                depth,
                samples,
                functional,
                joint,
                joint_cap: dr_core::tree_mc::DEFAULT_JOINT_CAP,
            },
        )?,
        Command::Bridge {
            model,
            x0,
            y0,
            n,
            k,
            l,
            r,
            eta,
            samples,
        } => document(
            "bridge",
            model,
            &BridgeRunParams {
                x0,
                y0,
                n,
                k,
                l,
                r,
                eta,
                samples,
            },
        )?,
        Command::Regularity {
            model,
            zeta,
            beta,
            levels,
            rho,
        } => document("regularity", model, &RegularityParams { zeta, beta, levels, rho })?,
        Command::PmScan { model, levels, rho } => document("pm-scan", model, &PmScanParams { levels, rho })?,
        Command::Run { config } => {
            let mut cfg = RunConfig::load(&config)?;
            if out.is_some() {
                cfg.output.dir = out;
            }
            return Ok(cfg);
        }
        Command::List => unreachable!("handled before compilation"),
    };
    cfg.output.dir = out;
    cfg.resolve_paths(&std::env::current_dir()?);
    Ok(cfg)
}

fn init_workers(flag: Option<usize>) -> Result<()> {
    let from_env = match std::env::var("DR_WORKERS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .map_err(|_| DrError::validation(format!("DR_WORKERS must be a positive integer, got '{v}'")))?,
        ),
        Err(_) => None,
    };
    if let Some(n) = from_env.or(flag) {
        if n == 0 {
            return Err(DrError::validation("worker count must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| DrError::validation(format!("worker pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let registry = Registry::default();
    if matches!(cli.command, Command::List) {
        for exp in registry.iter() {
            println!("{:<12} {}", exp.name(), exp.about());
        }
        return ExitCode::SUCCESS;
    }
    let result = init_workers(cli.workers)
        .and_then(|()| compile(cli.command, cli.out))
        .and_then(|cfg| runner::execute(&cfg, &registry));
    match result {
        Ok(stdout) => {
            let mut lock = std::io::stdout().lock();
            if lock.write_all(stdout.as_bytes()).and_then(|()| lock.flush()).is_err() {
                return ExitCode::from(3);
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", runner::diagnostic(&err));
            ExitCode::from(runner::exit_code(&err) as u8)
        }
    }
}
