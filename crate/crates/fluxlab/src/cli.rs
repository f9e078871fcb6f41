//! Configuration-driven experiment runner and report emitter.
//!
//! Everything here is a pure function of (config, seed): the emitted CSV
//! bytes are identical across worker counts and repeated runs.  The manifest
//! records parameters, versions, file hashes, and timings; timings are
//! excluded from bundle comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{FluxError, Result};
use crate::flux::TriadOpts;
use crate::profile::LpProfile;
use crate::solutions::{
    build_glued_solution, build_projected_solution, build_shear_solution, spacetime_norms_glued,
    GluedSolution, NormSpec, ProjectedSolution, ShearSolution, Solution,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ExactGrid,
    MonteCarlo,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "exact-grid" => Ok(Method::ExactGrid),
            "monte-carlo" => Ok(Method::MonteCarlo),
            other => Err(FluxError::Config(format!(
                "method must be `exact-grid` or `monte-carlo`, got `{other}`"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::ExactGrid => "exact-grid",
            Method::MonteCarlo => "monte-carlo",
        }
    }
}

/// Which constructed solution a generic subcommand operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolutionKind {
    Glued,
    Projected,
    Shear,
}

impl SolutionKind {
    pub fn parse(s: &str) -> Result<SolutionKind> {
        match s {
            "glued" => Ok(SolutionKind::Glued),
            "projected" => Ok(SolutionKind::Projected),
            "shear" => Ok(SolutionKind::Shear),
            other => Err(FluxError::Config(format!(
                "solution must be `glued`, `projected` or `shear`, got `{other}`"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SolutionKind::Glued => "glued",
            SolutionKind::Projected => "projected",
            SolutionKind::Shear => "shear",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dim: usize,
    pub beta: f64,
    pub eps: f64,
    /// First shell index of the glued cascade.
    pub n: i32,
    /// Last shell index (glued) / top cube shell (projected).
    pub n_max: i32,
    pub q_list: Vec<i32>,
    /// Half-width of the flux window; 0 means the full truncation-exact window.
    pub h: f64,
    pub method: Method,
    pub solution: SolutionKind,
    pub mc_samples: usize,
    pub quad_tol: f64,
    /// 0 means the library default thread pool size.
    pub workers: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub pair_cap: u128,
    pub skip_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dim: 3,
            beta: 2.0,
            eps: 0.1,
            n: 4,
            n_max: 5,
            q_list: vec![4, 5],
            h: 0.0,
            method: Method::ExactGrid,
            solution: SolutionKind::Glued,
            mc_samples: 20_000,
            quad_tol: 1e-9,
            workers: 0,
            out_dir: PathBuf::from("out"),
            seed: 7,
            pair_cap: TriadOpts::default().pair_cap,
            skip_tol: TriadOpts::default().skip_tol,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        fn bad(name: &str, detail: String) -> FluxError {
            FluxError::InvalidParameter { name: name.to_string(), detail }
        }
        if self.dim < 3 {
            return Err(bad("dim", format!("need dim >= 3, got {}", self.dim)));
        }
        if !(self.beta >= 1.0 && self.beta <= 4.0) {
            return Err(bad("beta", format!("need 1 <= beta <= 4, got {}", self.beta)));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(bad("eps", format!("need 0 < eps < 1, got {}", self.eps)));
        }
        if self.n < 0 || self.n_max < self.n {
            return Err(bad("n_max", format!("need 0 <= n <= n_max, got n={} n_max={}", self.n, self.n_max)));
        }
        if self.q_list.is_empty() {
            return Err(bad("q_list", "must not be empty".into()));
        }
        if !(self.h >= 0.0) {
            return Err(bad("h", format!("need h >= 0, got {}", self.h)));
        }
        if self.mc_samples == 0 {
            return Err(bad("mc_samples", "must be positive".into()));
        }
        if !(self.quad_tol > 0.0 && self.quad_tol < 1e-2) {
            return Err(bad("quad_tol", format!("need 0 < quad_tol < 1e-2, got {}", self.quad_tol)));
        }
        if self.skip_tol < 0.0 {
            return Err(bad("skip_tol", "must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn triad_opts(&self) -> TriadOpts {
        TriadOpts {
            pair_cap: self.pair_cap,
            skip_tol: self.skip_tol,
            ..TriadOpts::default()
        }
    }

    /// Applies one `key=value` assignment; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse::<T>().map_err(|_| {
                FluxError::Config(format!("invalid value `{v}` for key `{key}`"))
            })
        }
        match key {
            "schema_version" => {
                let v: u32 = num(key, value)?;
                if v != SCHEMA_VERSION {
                    return Err(FluxError::Config(format!(
                        "schema_version {v} unsupported (expected {SCHEMA_VERSION})"
                    )));
                }
            }
            "dim" => self.dim = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "n" => self.n = num(key, value)?,
            "n_max" => self.n_max = num(key, value)?,
            "q_list" => {
                let mut qs = Vec::new();
                for part in value.split(',').filter(|s| !s.is_empty()) {
                    qs.push(num::<i32>(key, part.trim())?);
                }
                self.q_list = qs;
            }
            "h" => self.h = num(key, value)?,
            "method" => self.method = Method::parse(value)?,
            "solution" => self.solution = SolutionKind::parse(value)?,
            "mc_samples" => self.mc_samples = num(key, value)?,
            "quad_tol" => self.quad_tol = num(key, value)?,
            "workers" => self.workers = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = num(key, value)?,
            "pair_cap" => self.pair_cap = num(key, value)?,
            "skip_tol" => self.skip_tol = num(key, value)?,
            other => {
                return Err(FluxError::Config(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    /// Parses a plain-text `key=value` config (comments start with `#`).
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                FluxError::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn as_json(&self) -> Value {
        json!({
            "schema_version": SCHEMA_VERSION,
            "dim": self.dim,
            "beta": self.beta,
            "eps": self.eps,
            "n": self.n,
            "n_max": self.n_max,
            "q_list": self.q_list,
            "h": self.h,
            "method": self.method.as_str(),
            "solution": self.solution.as_str(),
            "mc_samples": self.mc_samples,
            "quad_tol": self.quad_tol,
            "workers": self.workers,
            "seed": self.seed,
            "pair_cap": self.pair_cap.to_string(),
            "skip_tol": self.skip_tol,
        })
    }
}

/// Builds a thread pool of the configured size (or the library default).
pub fn thread_pool(cfg: &RunConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| FluxError::Config(format!("thread pool: {e}")))
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

fn fmt17(x: f64) -> String {
    format!("{x:.17e}")
}

pub const FLUX_HEADER: &str =
    "q,lambda_q,flux,flux_predictor,ratio,pi_q,phi_q,sum,target_jump,residual,h";

#[derive(Debug, Clone)]
pub struct FluxTableRow {
    pub q: i32,
    pub lambda_q: f64,
    pub flux: f64,
    pub flux_predictor: f64,
    pub ratio: f64,
    pub pi_q: f64,
    pub phi_q: f64,
    pub sum: f64,
    pub target_jump: f64,
    pub residual: f64,
    pub h: f64,
}

pub fn flux_table_csv(rows: &[FluxTableRow]) -> String {
    let mut out = String::from(FLUX_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.q,
            fmt17(r.lambda_q),
            fmt17(r.flux),
            fmt17(r.flux_predictor),
            fmt17(r.ratio),
            fmt17(r.pi_q),
            fmt17(r.phi_q),
            fmt17(r.sum),
            fmt17(r.target_jump),
            fmt17(r.residual),
            fmt17(r.h),
        );
    }
    out
}

pub const LEDGER_HEADER: &str =
    "q,t0,t1,kinetic_start,kinetic_end,dissipation,work,pi_q,phi_q,residual,valid";

pub fn ledger_table_csv(rows: &[crate::flux::FluxLedger]) -> String {
    let mut out = String::from(LEDGER_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.q,
            fmt17(r.t0),
            fmt17(r.t1),
            fmt17(r.kinetic_start),
            fmt17(r.kinetic_end),
            fmt17(r.dissipation),
            fmt17(r.work),
            fmt17(r.pi_q),
            fmt17(r.phi_q),
            fmt17(r.residual),
            r.valid,
        );
    }
    out
}

pub const JUMP_HEADER: &str = "q,pi_q,phi_q,sum,target_jump";

pub fn jump_table_csv(rows: &[crate::flux::JumpRow]) -> String {
    let mut out = String::from(JUMP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.q,
            fmt17(r.pi_q),
            fmt17(r.phi_q),
            fmt17(r.sum),
            fmt17(r.target_jump),
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Report bundles
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ReportBundle {
    pub config: RunConfig,
    /// File name -> bytes; written alongside manifest.json.
    pub files: BTreeMap<String, Vec<u8>>,
    /// Wall-clock seconds per stage (excluded from diffs).
    pub timings: BTreeMap<String, f64>,
    pub complete: bool,
}

impl ReportBundle {
    pub fn new(config: RunConfig) -> ReportBundle {
        ReportBundle { config, files: BTreeMap::new(), timings: BTreeMap::new(), complete: true }
    }

    pub fn add_file(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.insert(name.to_string(), bytes);
    }

    pub fn manifest(&self) -> Value {
        let mut hashes = serde_json::Map::new();
        for (name, bytes) in &self.files {
            let mut hasher = Sha256::new();
            hasher.update(bytes);
            hashes.insert(name.clone(), json!(format!("{:x}", hasher.finalize())));
        }
        json!({
            "schema_version": SCHEMA_VERSION,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "config": self.config.as_json(),
            "files": Value::Object(hashes),
            "timing": self.timings,
            "complete": self.complete,
        })
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            std::fs::write(dir.join(name), bytes)?;
        }
        let manifest = serde_json::to_string_pretty(&self.manifest())
            .map_err(|e| FluxError::Config(format!("manifest: {e}")))?;
        std::fs::write(dir.join("manifest.json"), manifest)?;
        Ok(())
    }
}

/// Compares two written bundles by manifest, ignoring timing fields.
/// Returns a list of human-readable differences (empty = identical).
pub fn diff_bundles(dir_a: &Path, dir_b: &Path) -> Result<Vec<String>> {
    let read = |dir: &Path| -> Result<Value> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        serde_json::from_str(&text)
            .map_err(|e| FluxError::Config(format!("{}: bad manifest: {e}", dir.display())))
    };
    let mut a = read(dir_a)?;
    let mut b = read(dir_b)?;
    for m in [&mut a, &mut b] {
        if let Some(obj) = m.as_object_mut() {
            obj.remove("timing");
            obj.remove("tool_version");
        }
    }
    let mut diffs = Vec::new();
    compare_json("", &a, &b, &mut diffs);
    Ok(diffs)
}

fn compare_json(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            for key in ma.keys().chain(mb.keys().filter(|k| !ma.contains_key(*k))) {
                let sub = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                match (ma.get(key), mb.get(key)) {
                    (Some(va), Some(vb)) => compare_json(&sub, va, vb, out),
                    (Some(_), None) => out.push(format!("{sub}: only in first")),
                    (None, Some(_)) => out.push(format!("{sub}: only in second")),
                    (None, None) => unreachable!(),
                }
            }
        }
        _ => {
            if a != b {
                out.push(format!("{path}: {a} != {b}"));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Sub-command implementations (library side)
// ---------------------------------------------------------------------------

fn build_glued(cfg: &RunConfig) -> Result<GluedSolution> {
    build_glued_solution(cfg.eps, cfg.dim, cfg.n, cfg.n_max, cfg.triad_opts(), cfg.quad_tol)
}

fn build_projected(cfg: &RunConfig) -> Result<ProjectedSolution> {
    build_projected_solution(cfg.eps, cfg.dim, cfg.n_max, cfg.triad_opts(), cfg.quad_tol)
}

fn build_shear(cfg: &RunConfig) -> Result<ShearSolution> {
    // beta here plays the timescale-decay role and must exceed 2; lift the
    // config value if it is at the boundary.
    let beta_shear = cfg.beta.max(2.0 + cfg.eps);
    build_shear_solution(beta_shear, 1.0, cfg.n_max, vec![0, 0, 1], vec![1.0, 0.0, 0.0], cfg.quad_tol)
}

fn window_of(sol: &dyn Solution, h: f64) -> (f64, f64) {
    let (ta, _) = sol.time_domain();
    let t1 = sol.window_end();
    let t0 = if h > 0.0 { (t1 - h).max(ta) } else { ta };
    (t0, t1)
}

/// Flux table of the glued cascade: raw single-shell flux against the
/// leading-order predictor, plus windowed transfer/defect terms and the
/// ledger residual.
pub fn glued_flux_rows(cfg: &RunConfig) -> Result<Vec<FluxTableRow>> {
    let sol = build_glued(cfg)?;
    let (t0, t1) = window_of(&sol, cfg.h);
    let mut rows = Vec::new();
    for &q in &cfg.q_list {
        if q < cfg.n || q > cfg.n_max {
            return Err(FluxError::InvalidParameter {
                name: "q_list".into(),
                detail: format!("q = {q} outside the shell range [{}, {}]", cfg.n, cfg.n_max),
            });
        }
        let flux = sol.shell_flux_raw(q, q)?;
        let pred = sol.shell_flux_predicted(q);
        let led = sol.ledger(q, t0, t1)?;
        rows.push(FluxTableRow {
            q,
            lambda_q: crate::lambda(q),
            flux,
            flux_predictor: pred,
            ratio: flux / pred,
            pi_q: led.pi_q,
            phi_q: led.phi_q,
            sum: led.pi_q + led.phi_q,
            target_jump: -0.5,
            residual: led.residual,
            h: t1 - t0,
        });
    }
    Ok(rows)
}

fn ledger_rows(sol: &dyn Solution, cfg: &RunConfig) -> Result<Vec<crate::flux::FluxLedger>> {
    let (t0, t1) = window_of(sol, cfg.h);
    cfg.q_list.iter().map(|&q| sol.ledger(q, t0, t1)).collect()
}

fn jump_rows(sol: &dyn Solution, cfg: &RunConfig, target: f64) -> Result<Vec<crate::flux::JumpRow>> {
    let (t0, t1) = window_of(sol, cfg.h);
    sol.jump_table(&cfg.q_list, t0, t1, target)
}

fn solution_of(cfg: &RunConfig) -> Result<Box<dyn Solution>> {
    Ok(match cfg.solution {
        SolutionKind::Glued => Box::new(build_glued(cfg)?),
        SolutionKind::Projected => Box::new(build_projected(cfg)?),
        SolutionKind::Shear => Box::new(build_shear(cfg)?),
    })
}

fn target_jump_of(kind: SolutionKind) -> f64 {
    match kind {
        SolutionKind::Glued | SolutionKind::Shear => -0.5,
        SolutionKind::Projected => 0.0,
    }
}

/// `flux-table`: glued per-shell flux table.
pub fn cmd_flux_table(cfg: &RunConfig) -> Result<ReportBundle> {
    let start = std::time::Instant::now();
    let rows = glued_flux_rows(cfg)?;
    let mut bundle = ReportBundle::new(cfg.clone());
    bundle.add_file("flux_table.csv", flux_table_csv(&rows).into_bytes());
    bundle.timings.insert("flux_table".into(), start.elapsed().as_secs_f64());
    Ok(bundle)
}

/// `block`: dump the single-shell building-block fields for each q in q_list.
pub fn cmd_block(cfg: &RunConfig) -> Result<ReportBundle> {
    let start = std::time::Instant::now();
    let mut bundle = ReportBundle::new(cfg.clone());
    std::fs::create_dir_all(&cfg.out_dir)?;
    for &n in &cfg.q_list {
        let (field, geo) = crate::blocks::build_wn(cfg.dim, cfg.beta, n)?;
        let spectral = field.to_spectral(50_000_000)?;
        let dump_path = cfg.out_dir.join(format!("w_{n}.field.tmp"));
        spectral.write_dump(&dump_path)?;
        let buf = std::fs::read(&dump_path)?;
        std::fs::remove_file(&dump_path)?;
        bundle.add_file(&format!("w_{n}.field"), buf);
        let meta = json!({
            "n": n,
            "lambda": geo.lambda,
            "mu": geo.mu,
            "m": geo.m,
            "a_count": geo.a_count,
            "b_count": geo.b_count,
            "c_count": geo.c_count,
            "l2_norm": field.l2_norm(),
            "mode_count": field.mode_count(),
        });
        bundle.add_file(&format!("w_{n}.json"), serde_json::to_vec_pretty(&meta).expect("json"));
    }
    bundle.timings.insert("block".into(), start.elapsed().as_secs_f64());
    Ok(bundle)
}

/// `glue` / `project` / `shear`: ledger and jump tables for one solution.
pub fn cmd_solution_tables(cfg: &RunConfig, kind: SolutionKind) -> Result<ReportBundle> {
    let start = std::time::Instant::now();
    let mut cfg = cfg.clone();
    cfg.solution = kind;
    let sol = solution_of(&cfg)?;
    let leds = ledger_rows(sol.as_ref(), &cfg)?;
    let jumps = jump_rows(sol.as_ref(), &cfg, target_jump_of(kind))?;
    let mut bundle = ReportBundle::new(cfg.clone());
    bundle.add_file("ledger_table.csv", ledger_table_csv(&leds).into_bytes());
    bundle.add_file("jump_table.csv", jump_table_csv(&jumps).into_bytes());
    bundle.timings.insert(kind.as_str().into(), start.elapsed().as_secs_f64());
    Ok(bundle)
}

/// `ledger` / `jump`: tables for the configured solution only.
pub fn cmd_ledger(cfg: &RunConfig) -> Result<ReportBundle> {
    let start = std::time::Instant::now();
    let sol = solution_of(cfg)?;
    let leds = ledger_rows(sol.as_ref(), cfg)?;
    let mut bundle = ReportBundle::new(cfg.clone());
    bundle.add_file("ledger_table.csv", ledger_table_csv(&leds).into_bytes());
    bundle.timings.insert("ledger".into(), start.elapsed().as_secs_f64());
    Ok(bundle)
}

pub fn cmd_jump(cfg: &RunConfig) -> Result<ReportBundle> {
    let start = std::time::Instant::now();
    let sol = solution_of(cfg)?;
    let jumps = jump_rows(sol.as_ref(), cfg, target_jump_of(cfg.solution))?;
    let mut bundle = ReportBundle::new(cfg.clone());
    bundle.add_file("jump_table.csv", jump_table_csv(&jumps).into_bytes());
    bundle.timings.insert("jump".into(), start.elapsed().as_secs_f64());
    Ok(bundle)
}

/// `norms`: space-time norm report for the glued cascade.
pub fn cmd_norms(cfg: &RunConfig) -> Result<ReportBundle> {
    let start = std::time::Instant::now();
    let sol = build_glued(cfg)?;
    let spec = NormSpec {
        mc_samples: cfg.mc_samples,
        seed: cfg.seed,
        ..NormSpec::default()
    };
    let rep = spacetime_norms_glued(&sol, &spec)?;
    let mut bundle = ReportBundle::new(cfg.clone());
    let body = json!({
        "besov_l3": rep.besov_l3,
        "lp_lq": rep.lp_lq,
        "force_norm": rep.force_norm,
        "mc_rel_err": rep.mc_rel_err,
        "exact": rep.exact,
        "besov_s": spec.besov_s,
        "lp": spec.lp,
        "lq": spec.lq,
        "force_p": spec.force_p,
    });
    bundle.add_file(
        "norms.json",
        serde_json::to_vec_pretty(&body).expect("json"),
    );
    bundle.timings.insert("norms".into(), start.elapsed().as_secs_f64());
    Ok(bundle)
}

/// Sanity check on an off-shell zero: exercised by `verify --suite quick`.
pub fn quick_suite(cfg: &RunConfig) -> Result<Vec<String>> {
    let chi = LpProfile::new();
    let (field, _) = crate::blocks::build_wn(cfg.dim, cfg.beta, cfg.n)?;
    let mut lines = Vec::new();
    let on = crate::flux::shell_flux_blocks(&field, &chi, cfg.n, 16, &cfg.triad_opts())?;
    lines.push(format!("on-shell flux at n={}: {:.6e}", cfg.n, on.value));
    let far = crate::flux::shell_flux_blocks(&field, &chi, cfg.n + 3, 16, &cfg.triad_opts())?;
    lines.push(format!("off-shell flux at q=n+3: {:.6e} (exact zero expected)", far.value));
    if far.value != 0.0 {
        return Err(FluxError::Malformed(format!(
            "off-shell flux should be exactly zero, got {:.6e}",
            far.value
        )));
    }
    Ok(lines)
}
