//! Command-line front end: load a problem file, run solvers, write artifacts.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use switchbox::fd_solver::{cache_key, obstacle_violation, residuals, solve_fd, FdOptions, FdScheme, Grid, ValueField};
use switchbox::model::validate_problem;
use switchbox::picard_mc::{solve_mc, McOptions};
use switchbox::sde_sim::simulate;
use switchbox::strategy::{extract_policy, write_traces_csv, DEFAULT_TIE_TOL};
use switchbox::tree_oracle::{build_chain, solve_dp, GoldenRecord};
use switchbox::verify::{compare_with_field, strategy_evidence, CompareConfig, Comparison, Report, Thresholds, CODE_VERSION};
use switchbox::{Error, SwitchingProblem};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "SWITCHBOX_THREADS";

#[derive(Parser)]
#[command(name = "switchbox", version, about = "Finite-horizon optimal switching: value functions, strategies, checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample-check the problem's standing assumptions.
    Validate(Opts),
    /// Finite-difference value field (CSV and binary cache).
    SolveFd(Opts),
    /// Iterated regression Snell envelopes on simulated paths.
    SolveMc(Opts),
    /// Trinomial-chain dynamic programming reference (k = 1).
    Oracle(Opts),
    /// Forward-simulate the policy read off the FD field.
    Simulate(Opts),
    /// Run every check and write the report.
    Verify(Opts),
    /// solve-fd, solve-mc, oracle, simulate and verify end to end.
    Compare(Opts),
}

#[derive(Args, Clone, Serialize)]
struct Opts {
    /// Problem file (the `.toml` suffix may be left out).
    problem: PathBuf,
    /// FD space nodes, per dimension: NX[,NY].
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    /// Time steps: FD levels, MC path steps for solve-mc, chain levels for oracle.
    #[arg(long)]
    steps: Option<usize>,
    /// Regression paths (solve-mc) or strategy paths (simulate).
    #[arg(long)]
    paths: Option<usize>,
    /// Path time steps where a subcommand also simulates next to an FD solve.
    #[arg(long)]
    path_steps: Option<usize>,
    /// Fresh strategy paths in verify and compare.
    #[arg(long)]
    strategy_paths: Option<usize>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Cauchy tolerance of the Picard iteration.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value = "switchbox-out")]
    out: PathBuf,
    #[arg(long, default_value = "implicit")]
    scheme: FdScheme,
    /// Total degree of the regression basis.
    #[arg(long)]
    degree: Option<usize>,
    /// Validation sample count.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Skip the residual refinement grids in verify and compare.
    #[arg(long)]
    no_residual: bool,
}

/// Everything that determines a run's outputs, embedded in every artifact.
#[derive(Serialize)]
struct RunConfig<'a> {
    subcommand: &'a str,
    #[serde(flatten)]
    opts: &'a Opts,
    /// Solver settings after defaults are filled in.
    resolved: &'a CompareConfig,
}

fn fail(kind: &str, msg: impl std::fmt::Display) -> CliError {
    CliError {
        kind: kind.to_string(),
        message: msg.to_string(),
        code: if matches!(kind, "argument" | "problem" | "io") { 2 } else { 3 },
    }
}

struct CliError {
    kind: String,
    message: String,
    code: i32,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match e {
            Error::Expr(_) | Error::Structural(_) | Error::ProblemFile(_) => "problem",
            Error::InvalidArgument(_) => "argument",
            Error::Io(_) => "io",
            _ => "solver",
        };
        let message = match e {
            Error::Io(m) | Error::InvalidArgument(m) => m,
            e => e.to_string(),
        };
        fail(kind, message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        fail("io", e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Runs the CLI on `args` (program name first) and returns the exit code.
/// Failures print one line `error: <kind>: <message>` to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("error: usage: {first}");
            return 2;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {}: {}", e.kind, e.message);
        return e.code;
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind, e.message.replace('\n', " "));
            e.code
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| fail("argument", format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Validate(o) => cmd_validate(&o),
        Command::SolveFd(o) => cmd_solve_fd(&o),
        Command::SolveMc(o) => cmd_solve_mc(&o),
        Command::Oracle(o) => cmd_oracle(&o),
        Command::Simulate(o) => cmd_simulate(&o),
        Command::Verify(o) => cmd_verify(&o, false),
        Command::Compare(o) => cmd_verify(&o, true),
    }
}

fn load_problem(path: &Path) -> CliResult<SwitchingProblem> {
    let with_ext = path.with_extension("toml");
    let path = if path.exists() || !with_ext.exists() { path } else { with_ext.as_path() };
    Ok(SwitchingProblem::load(path)?)
}

struct Ctx<'a> {
    sub: &'a str,
    opts: &'a Opts,
    p: SwitchingProblem,
    th: Thresholds,
    cfg: CompareConfig,
}

impl<'a> Ctx<'a> {
    fn new(sub: &'a str, opts: &'a Opts) -> CliResult<Ctx<'a>> {
        let p = load_problem(&opts.problem)?;
        let th = Thresholds::builtin();
        let mut cfg = CompareConfig::for_problem(&p, &th);
        if let Some(g) = &opts.grid {
            if g.len() != p.dim() {
                return Err(fail("argument", format!("--grid needs {} sizes, got {}", p.dim(), g.len())));
            }
            cfg.grid = g.clone();
        }
        cfg.steps = opts.steps.unwrap_or(cfg.steps);
        cfg.paths = opts.paths.unwrap_or(cfg.paths);
        cfg.path_steps = opts.path_steps.unwrap_or(cfg.path_steps);
        cfg.strategy_paths = opts.strategy_paths.unwrap_or(cfg.strategy_paths);
        cfg.seed = opts.seed;
        cfg.tol = opts.tol.unwrap_or(cfg.tol);
        cfg.degree = opts.degree.unwrap_or(cfg.degree);
        cfg.scheme = opts.scheme;
        cfg.residual = !opts.no_residual;
        match sub {
            "solve-mc" => cfg.path_steps = opts.steps.or(opts.path_steps).unwrap_or(cfg.path_steps),
            "oracle" => cfg.oracle_levels = opts.steps.unwrap_or(cfg.oracle_levels),
            "simulate" => cfg.strategy_paths = opts.paths.unwrap_or(cfg.strategy_paths),
            _ => {}
        }
        fs::create_dir_all(&opts.out)?;
        Ok(Ctx { sub, opts, p, th, cfg })
    }

    fn run_config(&self) -> serde_json::Value {
        serde_json::to_value(RunConfig {
            subcommand: self.sub,
            opts: self.opts,
            resolved: &self.cfg,
        })
        .expect("run config serializes")
    }

    /// JSON artifact with the standard header fields.
    fn write_json(&self, name: &str, kind: &str, body: serde_json::Value) -> CliResult<()> {
        let mut doc = json!({
            "schema": format!("switchbox.{kind}/1"),
            "problem": { "name": self.p.name, "hash": self.p.hash() },
            "run": self.run_config(),
            "code_version": CODE_VERSION,
        });
        if let (Some(d), serde_json::Value::Object(b)) = (doc.as_object_mut(), body) {
            d.extend(b);
        }
        let mut text = serde_json::to_string_pretty(&doc).expect("artifact serializes");
        text.push('\n');
        fs::write(self.opts.out.join(name), text)?;
        Ok(())
    }

    /// CSV artifact: `#` header lines with problem hash, code version and
    /// run config, then the table.
    fn write_csv(&self, name: &str, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> CliResult<()> {
        let mut w = BufWriter::new(fs::File::create(self.opts.out.join(name))?);
        writeln!(w, "# problem_hash {}", self.p.hash())?;
        writeln!(w, "# code_version {CODE_VERSION}")?;
        writeln!(w, "# run {}", self.run_config())?;
        body(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn grid(&self) -> CliResult<Grid> {
        Ok(Grid::for_problem(&self.p, &self.cfg.grid, self.cfg.steps)?)
    }

    fn cache_path(&self, grid: &Grid) -> PathBuf {
        self.opts.out.join("cache").join(format!("{}.svf", cache_key(&self.p, grid, self.cfg.scheme)))
    }

    /// The FD field from the cache when present, else solved and cached.
    fn value_field(&self) -> CliResult<ValueField> {
        let grid = self.grid()?;
        let path = self.cache_path(&grid);
        if let Ok(v) = ValueField::read_cache(&path) {
            if v.grid == grid && v.problem_hash == self.p.hash() && v.scheme == self.cfg.scheme {
                return Ok(v);
            }
        }
        let v = solve_fd(
            &self.p,
            &grid,
            &FdOptions {
                scheme: self.cfg.scheme,
                ..FdOptions::default()
            },
        )?;
        fs::create_dir_all(path.parent().expect("cache dir"))?;
        v.write_cache(&path)?;
        Ok(v)
    }
}

fn cmd_validate(o: &Opts) -> CliResult<()> {
    let ctx = Ctx::new("validate", o)?;
    let r = validate_problem(&ctx.p, o.samples, o.seed)?;
    ctx.write_json("validation.json", "validation", json!({ "ok": r.ok(), "report": r }))?;
    println!("validate {}: {} violations", ctx.p.name, r.violations.len());
    if r.ok() {
        Ok(())
    } else {
        let first = &r.violations[0];
        Err(CliError {
            kind: "validation".into(),
            message: format!("{} violations, first {:?} at t = {}, x = {:?}", r.violations.len(), first.kind, first.t, first.x),
            code: 1,
        })
    }
}

fn cmd_solve_fd(o: &Opts) -> CliResult<()> {
    let ctx = Ctx::new("solve-fd", o)?;
    let v = ctx.value_field()?;
    ctx.write_csv("value_field.csv", |w| v.write_csv(w))?;
    let roots: Vec<f64> = (0..ctx.p.modes).map(|i| v.interpolate(i, 0.0, &ctx.p.x0)).collect();
    let resid = residuals(&v, &ctx.p, ctx.th.fd.slack_tol)?;
    ctx.write_json(
        "fd_summary.json",
        "fd",
        json!({
            "values": roots,
            "obstacle_violation": obstacle_violation(&v, &ctx.p)?,
            "residual": resid,
            "cache": ctx.cache_path(&v.grid),
        }),
    )?;
    println!("solve-fd {}: v(t0, x0) = {:?}", ctx.p.name, roots);
    Ok(())
}

fn cmd_solve_mc(o: &Opts) -> CliResult<()> {
    let ctx = Ctx::new("solve-mc", o)?;
    let c = &ctx.cfg;
    let e = simulate(&ctx.p, 0.0, &ctx.p.x0, c.paths, c.path_steps, c.seed)?;
    let sol = solve_mc(&ctx.p, &e, c.tol, c.max_iterations, &McOptions { degree: c.degree })?;
    ctx.write_csv("mc_iterates.csv", |w| sol.write_csv(w))?;
    ctx.write_json(
        "mc_summary.json",
        "mc",
        json!({
            "converged": sol.converged,
            "iterations": sol.last.n,
            "mean": sol.last.mean,
            "standard_error": sol.last.standard_error,
            "basis": sol.last.basis,
            "fallback_slices": sol.last.fallbacks,
            "warnings": sol.last.warnings,
            "history": sol.history,
        }),
    )?;
    println!("solve-mc {}: mean {:?} se {:?} after {} iterations", ctx.p.name, sol.last.mean, sol.last.standard_error, sol.last.n);
    if !sol.converged {
        return Err(CliError {
            kind: "not_converged".into(),
            message: format!("Picard iteration not within tol {} after {} iterations", c.tol, sol.history.len()),
            code: 1,
        });
    }
    Ok(())
}

fn cmd_oracle(o: &Opts) -> CliResult<()> {
    let ctx = Ctx::new("oracle", o)?;
    let levels = ctx.cfg.oracle_levels;
    let oracle = solve_dp(&build_chain(&ctx.p, levels)?, &ctx.p)?;
    let golden = GoldenRecord {
        problem_hash: ctx.p.hash(),
        n_levels: levels,
        roots: oracle.roots(),
    };
    fs::write(o.out.join("oracle.txt"), golden.to_text())?;
    ctx.write_json(
        "oracle.json",
        "oracle",
        json!({ "levels": levels, "values": oracle.roots(), "max_switch_passes": oracle.max_switch_passes }),
    )?;
    println!("oracle {}: {:?} at {levels} levels", ctx.p.name, oracle.roots());
    Ok(())
}

fn cmd_simulate(o: &Opts) -> CliResult<()> {
    let ctx = Ctx::new("simulate", o)?;
    let v = ctx.value_field()?;
    let policy = extract_policy(&v, &ctx.p, DEFAULT_TIE_TOL)?;
    let c = &ctx.cfg;
    let s = strategy_evidence(&v, &policy, &ctx.p, c.strategy_paths, c.path_steps, c.seed + 1, &ctx.th)?;
    write_strategy(&ctx, &s)?;
    println!(
        "simulate {}: mean {:.6} se {:.6}, {} truncated",
        ctx.p.name, s.run.summary.mean, s.run.summary.standard_error, s.run.summary.truncated
    );
    Ok(())
}

fn write_strategy(ctx: &Ctx, s: &switchbox::verify::StrategyEvidence) -> CliResult<()> {
    ctx.write_csv("traces.csv", |w| write_traces_csv(&s.run, ctx.p.horizon, w))?;
    ctx.write_json(
        "strategy_summary.json",
        "strategy",
        json!({
            "summary": s.run.summary,
            "tail": s.tail,
            "dpp": s.dpp,
            "random_best_mean": s.random.best_mean,
            "profit_identity_gap": s.profit_gap,
            "churn_paths": s.churn,
        }),
    )
}

fn cmd_verify(o: &Opts, full: bool) -> CliResult<()> {
    let sub = if full { "compare" } else { "verify" };
    let ctx = Ctx::new(sub, o)?;
    let v = ctx.value_field()?;
    let cmp: Comparison = compare_with_field(&ctx.p, &ctx.cfg, &ctx.th, ctx.run_config(), Some(v))?;
    if full {
        ctx.write_csv("value_field.csv", |w| cmp.fd.write_csv(w))?;
        ctx.write_csv("mc_iterates.csv", |w| cmp.mc.write_csv(w))?;
        if let Some(oracle) = &cmp.oracle {
            ctx.write_json("oracle.json", "oracle", json!({ "levels": ctx.cfg.oracle_levels, "values": oracle.roots() }))?;
        }
        if let Some(s) = &cmp.strategy {
            write_strategy(&ctx, s)?;
        }
    }
    write_report(&o.out, &cmp.report)?;
    for v in &cmp.report.values {
        println!(
            "{} mode {}: fd {} mc {} oracle {}",
            ctx.p.name,
            v.mode,
            fmt_opt(v.fd),
            fmt_opt(v.mc),
            fmt_opt(v.oracle)
        );
    }
    let failures = cmp.report.failures();
    if failures.is_empty() {
        println!("{} checks, all pass", cmp.report.checks.len());
        Ok(())
    } else {
        let names: Vec<&str> = failures.iter().map(|c| c.name.as_str()).collect();
        Err(CliError {
            kind: "checks_failed".into(),
            message: names.join(","),
            code: 1,
        })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.6}"))
}

fn write_report(out: &Path, r: &Report) -> CliResult<()> {
    fs::write(out.join("report.json"), r.to_json())?;
    Ok(())
}
