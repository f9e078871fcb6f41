//! Command-line front end for the flux laboratory.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage error, 3 numeric guard
//! tripped (pair budget, grid budget, or quadrature failure).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fluxlab::accept::AcceptanceSuite;
use fluxlab::cli::{self, Method, RunConfig, SolutionKind};
use fluxlab::error::FluxError;

#[derive(Parser)]
#[command(name = "labcli", version, about = "Shell-to-shell energy flux laboratory")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Plain-text key=value config file applied before flag overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    eps: Option<f64>,
    /// First shell index.
    #[arg(long, global = true)]
    n: Option<i32>,
    /// Last shell index.
    #[arg(long, global = true)]
    n_max: Option<i32>,
    /// Cutoff shell(s), comma separated.
    #[arg(long = "q", global = true, value_delimiter = ',')]
    q_list: Option<Vec<i32>>,
    /// Window half-width; 0 = full truncation-exact window.
    #[arg(long, global = true)]
    h: Option<f64>,
    /// exact-grid | monte-carlo
    #[arg(long, global = true)]
    method: Option<String>,
    /// glued | projected | shear
    #[arg(long, global = true)]
    solution: Option<String>,
    #[arg(long, global = true)]
    mc_samples: Option<usize>,
    #[arg(long, global = true)]
    quad_tol: Option<f64>,
    /// Worker threads; 0 = library default.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory for report bundles.
    #[arg(long = "out", global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    pair_cap: Option<u128>,
    #[arg(long, global = true)]
    skip_tol: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Dump one single-shell building block (coefficients + geometry).
    Block,
    /// Single-shell flux against the leading-order predictor.
    FluxTable,
    /// Ledger and jump tables for the glued cascade solution.
    Glue,
    /// Ledger and jump tables for the revealed-cube solution.
    Project,
    /// Ledger and jump tables for the decaying shear solution.
    Shear,
    /// Cutoff energy ledgers over the configured window.
    Ledger,
    /// Transfer/defect jump rows over the configured window.
    Jump,
    /// Space-time norm report for the glued solution.
    Norms,
    /// Run the acceptance checks.
    Verify {
        /// all | quick | a comma-separated list of criterion numbers
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Compare two written report bundles (ignores timing fields).
    Diff { dir_a: PathBuf, dir_b: PathBuf },
}

fn build_config(o: &Overrides) -> Result<RunConfig, FluxError> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::parse(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(v) = o.dim {
        cfg.dim = v;
    }
    if let Some(v) = o.beta {
        cfg.beta = v;
    }
    if let Some(v) = o.eps {
        cfg.eps = v;
    }
    if let Some(v) = o.n {
        cfg.n = v;
    }
    if let Some(v) = o.n_max {
        cfg.n_max = v;
    }
    if let Some(v) = &o.q_list {
        cfg.q_list = v.clone();
    }
    if let Some(v) = o.h {
        cfg.h = v;
    }
    if let Some(v) = &o.method {
        cfg.method = Method::parse(v)?;
    }
    if let Some(v) = &o.solution {
        cfg.solution = SolutionKind::parse(v)?;
    }
    if let Some(v) = o.mc_samples {
        cfg.mc_samples = v;
    }
    if let Some(v) = o.quad_tol {
        cfg.quad_tol = v;
    }
    if let Some(v) = o.workers {
        cfg.workers = v;
    }
    if let Some(v) = &o.out_dir {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.pair_cap {
        cfg.pair_cap = v;
    }
    if let Some(v) = o.skip_tol {
        cfg.skip_tol = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code_for(err: &FluxError) -> ExitCode {
    match err {
        FluxError::PairBudgetExceeded { .. }
        | FluxError::GridBudgetExceeded { .. }
        | FluxError::QuadratureFailure { .. } => ExitCode::from(3),
        FluxError::Config(_) | FluxError::InvalidParameter { .. } | FluxError::Io(_) => {
            ExitCode::from(2)
        }
        _ => ExitCode::from(1),
    }
}

fn run_bundle(
    cfg: &RunConfig,
    build: impl FnOnce(&RunConfig) -> Result<cli::ReportBundle, FluxError>,
) -> Result<(), FluxError> {
    let bundle = build(cfg)?;
    bundle.write_to(&cfg.out_dir)?;
    println!("wrote {} file(s) + manifest.json to {}", bundle.files.len(), cfg.out_dir.display());
    Ok(())
}

fn run_verify(cfg: &RunConfig, suite: &str) -> Result<bool, FluxError> {
    if suite == "quick" {
        for line in cli::quick_suite(cfg)? {
            println!("{line}");
        }
        return Ok(true);
    }
    let accept = AcceptanceSuite::new(cfg.triad_opts(), cfg.seed);
    let indices: Vec<usize> = if suite == "all" {
        (1..=12).collect()
    } else {
        let mut out = Vec::new();
        for part in suite.split(',').filter(|s| !s.is_empty()) {
            let i: usize = part.trim().parse().map_err(|_| {
                FluxError::Config(format!("invalid suite `{suite}`: expected all, quick, or numbers"))
            })?;
            if !(1..=12).contains(&i) {
                return Err(FluxError::Config(format!("criterion {i} out of range 1..=12")));
            }
            out.push(i);
        }
        out
    };
    let mut all_pass = true;
    for i in indices {
        let outcome = accept.run(i);
        println!("{}", outcome.line());
        all_pass &= outcome.passed;
    }
    Ok(all_pass)
}

fn dispatch(cli: Cli) -> Result<bool, FluxError> {
    if let Command::Diff { dir_a, dir_b } = &cli.command {
        let diffs = cli::diff_bundles(dir_a, dir_b)?;
        if diffs.is_empty() {
            println!("bundles identical");
            return Ok(true);
        }
        for d in &diffs {
            println!("{d}");
        }
        return Ok(false);
    }
    let cfg = build_config(&cli.overrides)?;
    let pool = cli::thread_pool(&cfg)?;
    pool.install(|| match &cli.command {
        Command::Block => run_bundle(&cfg, cli::cmd_block).map(|_| true),
        Command::FluxTable => run_bundle(&cfg, cli::cmd_flux_table).map(|_| true),
        Command::Glue => {
            run_bundle(&cfg, |c| cli::cmd_solution_tables(c, SolutionKind::Glued)).map(|_| true)
        }
        Command::Project => {
            run_bundle(&cfg, |c| cli::cmd_solution_tables(c, SolutionKind::Projected)).map(|_| true)
        }
        Command::Shear => {
            run_bundle(&cfg, |c| cli::cmd_solution_tables(c, SolutionKind::Shear)).map(|_| true)
        }
        Command::Ledger => run_bundle(&cfg, cli::cmd_ledger).map(|_| true),
        Command::Jump => run_bundle(&cfg, cli::cmd_jump).map(|_| true),
        Command::Norms => run_bundle(&cfg, cli::cmd_norms).map(|_| true),
        Command::Verify { suite } => run_verify(&cfg, suite),
        Command::Diff { .. } => unreachable!("handled above"),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
