//! Cross-solver verification: named checks with measured values and
//! thresholds, collected into a JSON report.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd_solver::{obstacle_violation, residuals, solve_fd, FdOptions, FdScheme, Grid, ResidualReport, ValueField};
use crate::model::SwitchingProblem;
use crate::picard_mc::{solve_mc, McOptions, McSolution};
use crate::sde_sim::simulate;
use crate::strategy::{
    check_dpp_with, churn_paths, extract_policy, profit_identity_gap, random_strategies, simulate_strategy,
    switch_statistics_with, Action, DppReport, PolicyField, RandomStrategyReport, StrategyRun, TailReport,
    DEFAULT_TIE_TOL,
};
use crate::tree_oracle::{build_chain, solve_dp, OracleValue};

pub const REPORT_SCHEMA: &str = "switchbox.report/1";
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

const THRESHOLDS: &str = include_str!("../thresholds.toml");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueThresholds {
    pub fd_abs: f64,
    pub mc_se_mult: f64,
    pub mc_abs: f64,
    pub oracle_abs: f64,
    pub oracle_doubling: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PicardThresholds {
    pub tol: f64,
    pub max_iterations: usize,
    pub monotone_se_mult: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FdThresholds {
    pub obstacle_slack: f64,
    pub slack_tol: f64,
    pub residual_max: f64,
    pub residual_floor: f64,
    pub symmetry_fd_mult: f64,
    pub continuity_ratio: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ResidualGrid {
    pub space: usize,
    pub time: usize,
    pub refined_space: usize,
    pub refined_time: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyThresholds {
    pub se_mult: f64,
    pub abs: f64,
    pub random_count: usize,
    pub random_se_mult: f64,
    pub tail_rse_mult: f64,
    pub tail_min_traces: usize,
    pub max_truncated_share: f64,
    pub profit_identity: f64,
    pub dpp_se_mult: f64,
    pub dpp_abs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuntimeThresholds {
    pub identical_modes_seconds: f64,
}

/// Every limit a check compares against, from the versioned thresholds file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Thresholds {
    pub version: u32,
    pub values: ValueThresholds,
    pub picard: PicardThresholds,
    pub fd: FdThresholds,
    pub residual: BTreeMap<String, ResidualGrid>,
    pub strategy: StrategyThresholds,
    pub runtime: RuntimeThresholds,
}

impl Thresholds {
    /// The thresholds shipped with the library.
    pub fn builtin() -> Thresholds {
        Thresholds::from_toml_str(THRESHOLDS).expect("bundled thresholds parse")
    }

    pub fn from_toml_str(text: &str) -> Result<Thresholds> {
        let th: Thresholds = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("thresholds: {e}")))?;
        if !th.residual.contains_key("default") {
            return Err(Error::InvalidArgument("thresholds: missing [residual.default]".into()));
        }
        Ok(th)
    }

    /// Residual grids for a problem, by name with a default fallback.
    pub fn residual_grid(&self, problem: &str) -> ResidualGrid {
        self.residual.get(problem).unwrap_or(&self.residual["default"]).to_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub measured: Option<f64>,
    pub threshold: Option<f64>,
    /// Which solver, grid or ensemble the numbers come from.
    pub provenance: String,
}

impl Check {
    /// Passes iff `measured <= threshold` (NaN fails).
    pub fn at_most(name: impl Into<String>, measured: f64, threshold: f64, provenance: impl Into<String>) -> Check {
        Check {
            name: name.into(),
            status: if measured <= threshold { Status::Pass } else { Status::Fail },
            measured: Some(measured),
            threshold: Some(threshold),
            provenance: provenance.into(),
        }
    }

    pub fn skipped(name: impl Into<String>, reason: impl Into<String>) -> Check {
        Check {
            name: name.into(),
            status: Status::Skipped,
            measured: None,
            threshold: None,
            provenance: reason.into(),
        }
    }

    pub fn failed(name: impl Into<String>, reason: impl Into<String>) -> Check {
        Check {
            name: name.into(),
            status: Status::Fail,
            measured: None,
            threshold: None,
            provenance: reason.into(),
        }
    }

    fn ratio(&self) -> f64 {
        match (self.measured, self.threshold) {
            (Some(m), Some(t)) if t > 0.0 => m / t,
            (Some(m), Some(_)) if m > 0.0 => f64::INFINITY,
            (Some(_), Some(_)) => 0.0,
            _ => f64::INFINITY,
        }
    }
}

/// Folds several checks into one: it passes iff none fails, and carries the
/// numbers of the failing check, or else of the one closest to its threshold.
pub fn aggregate(name: &str, checks: &[Check]) -> Check {
    let ran: Vec<&Check> = checks.iter().filter(|c| c.status != Status::Skipped).collect();
    if ran.is_empty() {
        return Check::skipped(name, "no underlying check ran");
    }
    let failing = ran.iter().any(|c| c.status == Status::Fail);
    let worst = ran
        .iter()
        .filter(|c| !failing || c.status == Status::Fail)
        .max_by(|a, b| a.ratio().total_cmp(&b.ratio()))
        .expect("nonempty");
    Check {
        name: name.to_string(),
        status: if failing { Status::Fail } else { Status::Pass },
        measured: worst.measured,
        threshold: worst.threshold,
        provenance: format!("{} of {} checks, binding {}: {}", ran.len(), checks.len(), worst.name, worst.provenance),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProblemInfo {
    pub name: String,
    pub hash: String,
}

/// Values at `(t0, x0)` per mode, one-based.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeValues {
    pub mode: usize,
    pub fd: Option<f64>,
    pub mc: Option<f64>,
    pub mc_standard_error: Option<f64>,
    pub oracle: Option<f64>,
    pub strategy: Option<f64>,
    pub strategy_standard_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema: String,
    pub problem: ProblemInfo,
    pub run: serde_json::Value,
    pub code_version: String,
    pub values: Vec<ModeValues>,
    pub checks: Vec<Check>,
    pub overall_pass: bool,
}

impl Report {
    pub fn new(p: &SwitchingProblem, run: serde_json::Value, values: Vec<ModeValues>, checks: Vec<Check>) -> Report {
        let overall_pass = checks.iter().all(|c| c.status != Status::Fail);
        Report {
            schema: REPORT_SCHEMA.to_string(),
            problem: ProblemInfo {
                name: p.name.clone(),
                hash: p.hash(),
            },
            run,
            code_version: CODE_VERSION.to_string(),
            values,
            checks,
            overall_pass,
        }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Checks whose name equals `prefix` or starts with `prefix.`.
    pub fn checks_named(&self, prefix: &str) -> Vec<Check> {
        self.checks
            .iter()
            .filter(|c| c.name == prefix || c.name.strip_prefix(prefix).is_some_and(|r| r.starts_with('.')))
            .cloned()
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| c.status == Status::Fail).collect()
    }
}

/// A forward simulation of the extracted policy and what was measured on it.
#[derive(Debug, Clone)]
pub struct StrategyEvidence {
    pub run: StrategyRun,
    pub random: RandomStrategyReport,
    pub tail: Option<TailReport>,
    pub dpp: Vec<DppReport>,
    pub profit_gap: f64,
    pub churn: usize,
    pub ensemble_seed: u64,
}

/// Whatever solver output is at hand; missing pieces make their checks skip.
#[derive(Debug, Clone, Copy, Default)]
pub struct Evidence<'a> {
    pub fd: Option<&'a ValueField>,
    /// Further converged fields whose obstacle inequality is swept too.
    pub other_fields: &'a [&'a ValueField],
    pub mc: Option<&'a McSolution>,
    pub oracle: Option<&'a OracleValue>,
    pub oracle_doubled: Option<&'a OracleValue>,
    pub residual: Option<(&'a ResidualReport, &'a ResidualReport)>,
    pub strategy: Option<&'a StrategyEvidence>,
    /// Reason the strategy simulation did not produce evidence.
    pub strategy_error: Option<&'a str>,
}

fn fd_label(v: &ValueField) -> String {
    let sizes: Vec<String> = v.grid.n_space.iter().map(|n| n.to_string()).collect();
    format!("fd {:?} {}x{}", v.scheme, sizes.join("x"), v.grid.n_time).to_lowercase()
}

fn mc_label(mc: &McSolution) -> String {
    format!(
        "mc {} paths x {} steps, seed {}, iterate {}",
        mc.last.n_paths, mc.last.n_steps, mc.last.ensemble_seed, mc.last.n
    )
}

fn oracle_label(o: &OracleValue) -> String {
    format!("oracle {} levels", o.chain.n_levels)
}

fn fd_root(v: &ValueField, p: &SwitchingProblem, mode: usize) -> f64 {
    v.interpolate(mode, 0.0, &p.x0)
}

/// Largest change of the value within a parabolic neighbourhood of size
/// `delta` around `(0, x0)`, over modes.
fn local_oscillation(v: &ValueField, p: &SwitchingProblem, delta: f64) -> f64 {
    let t = (delta * delta).min(p.horizon);
    let mut worst = 0.0f64;
    for i in 0..p.modes {
        let centre = fd_root(v, p, i);
        for d in 0..p.dim() {
            for s in [-1.0, 1.0] {
                let mut x = p.x0.clone();
                x[d] += s * delta;
                for tt in [0.0, t] {
                    worst = worst.max((v.interpolate(i, tt, &x) - centre).abs());
                }
            }
        }
    }
    worst
}

/// Largest `|v_1(t, x) - v_2(t, -x)|` over levels and nodes whose mirror
/// image lies in the box (two modes).
pub fn mirror_asymmetry(v: &ValueField) -> f64 {
    let g = &v.grid;
    let mut worst = 0.0f64;
    for level in 0..=g.n_time {
        for node in 0..g.n_nodes() {
            let x = g.coords(node);
            let mirrored: Vec<f64> = x.iter().map(|c| -c).collect();
            if !g.contains(&mirrored) {
                continue;
            }
            let a = v.value(0, level, node);
            let b = v.interpolate_level(1, level, &mirrored);
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Assembles every check the evidence supports, in a fixed order.
pub fn cross_check(p: &SwitchingProblem, ev: &Evidence, th: &Thresholds) -> Vec<Check> {
    let mut out = Vec::new();
    let m = p.modes;
    let vt = &th.values;

    // Solver agreement at (t0, x0).
    for i in 0..m {
        let name = format!("fd_vs_oracle.mode{}", i + 1);
        match (ev.fd, ev.oracle) {
            (Some(v), Some(o)) => out.push(Check::at_most(
                name,
                (fd_root(v, p, i) - o.root(i)).abs(),
                vt.fd_abs,
                format!("{}; {}", fd_label(v), oracle_label(o)),
            )),
            _ => out.push(Check::skipped(name, "needs an FD field and the oracle (k = 1)")),
        }
    }
    for i in 0..m {
        let name = format!("mc_vs_oracle.mode{}", i + 1);
        match (ev.mc, ev.oracle) {
            (Some(mc), Some(o)) => out.push(Check::at_most(
                name,
                (mc.last.mean[i] - o.root(i)).abs(),
                vt.mc_se_mult * mc.last.standard_error[i] + vt.mc_abs,
                format!("{}; {}", mc_label(mc), oracle_label(o)),
            )),
            _ => out.push(Check::skipped(name, "needs an MC solution and the oracle (k = 1)")),
        }
    }
    for i in 0..m {
        let name = format!("fd_vs_mc.mode{}", i + 1);
        match (ev.fd, ev.mc) {
            (Some(v), Some(mc)) => out.push(Check::at_most(
                name,
                (fd_root(v, p, i) - mc.last.mean[i]).abs(),
                vt.mc_se_mult * mc.last.standard_error[i] + vt.mc_abs + vt.fd_abs,
                format!("{}; {}", fd_label(v), mc_label(mc)),
            )),
            _ => out.push(Check::skipped(name, "needs an FD field and an MC solution")),
        }
    }
    match (ev.oracle, ev.oracle_doubled) {
        (Some(a), Some(b)) => {
            let d = (0..m).map(|i| (a.root(i) - b.root(i)).abs()).fold(0.0, f64::max);
            out.push(Check::at_most(
                "oracle_level_doubling",
                d,
                vt.oracle_doubling,
                format!("{} vs {}", oracle_label(a), oracle_label(b)),
            ));
        }
        _ => out.push(Check::skipped("oracle_level_doubling", "needs oracles at L and 2L levels")),
    }

    // Value field structure.
    match ev.fd {
        Some(v) => {
            let mut fields = vec![v];
            fields.extend(ev.other_fields.iter().copied());
            let labels: Vec<String> = fields.iter().map(|f| fd_label(f)).collect();
            let swept: Result<Vec<f64>> = fields.iter().map(|f| obstacle_violation(f, p)).collect();
            out.push(match swept {
                Ok(w) => Check::at_most(
                    "obstacle_inequality",
                    w.into_iter().fold(0.0, f64::max),
                    th.fd.obstacle_slack,
                    labels.join(", "),
                ),
                Err(e) => Check::failed("obstacle_inequality", e.to_string()),
            });
        }
        None => out.push(Check::skipped("obstacle_inequality", "needs an FD field")),
    }
    match ev.residual {
        Some((coarse, fine)) => {
            out.push(Check::at_most(
                "complementarity_residual",
                coarse.max_abs,
                th.fd.residual_max,
                match &coarse.location {
                    Some(l) => format!("worst at mode {}, level {}, node {}, t = {}, x = {:?}", l.mode + 1, l.level, l.node, l.t, l.x),
                    None => "no interior node swept".to_string(),
                },
            ));
            out.push(Check::at_most(
                "complementarity_refinement",
                fine.max_abs,
                coarse.max_abs.max(th.fd.residual_floor),
                "refined residual (dx/2, dt/8) against the residual grid, or the round-off floor",
            ));
        }
        None => {
            out.push(Check::skipped("complementarity_residual", "residual grids not solved"));
            out.push(Check::skipped("complementarity_refinement", "residual grids not solved"));
        }
    }
    match ev.fd {
        Some(v) => {
            let delta = 4.0 * (0..p.dim()).map(|d| v.grid.dx(d)).fold(0.0, f64::max);
            let near = local_oscillation(v, p, delta);
            let far = local_oscillation(v, p, 2.0 * delta);
            let measured = if far > 0.0 { near / far } else { 0.0 };
            out.push(Check::at_most(
                "continuity_probe",
                measured,
                th.fd.continuity_ratio,
                format!("oscillation at delta = {delta:.4} over oscillation at 2 delta ({near:.3e} / {far:.3e}); {}", fd_label(v)),
            ));
        }
        None => out.push(Check::skipped("continuity_probe", "needs an FD field")),
    }

    // Picard iteration.
    match ev.mc {
        Some(mc) => {
            let n = mc.last.n;
            out.push(if mc.converged {
                Check::at_most(
                    "picard_converged",
                    n as f64,
                    th.picard.max_iterations as f64,
                    format!("iterations to Cauchy tol {}; {}", mc.tol, mc_label(mc)),
                )
            } else {
                Check::failed("picard_converged", format!("no convergence within {} iterations", mc.history.len()))
            });
            let mut worst: Option<(f64, f64, String)> = None;
            for w in mc.history.windows(2) {
                for i in 0..m {
                    let drop = w[0].mean[i] - w[1].mean[i];
                    let allowed = th.picard.monotone_se_mult * w[0].standard_error[i].max(w[1].standard_error[i]);
                    if worst.as_ref().map_or(true, |(d, a, _)| drop - allowed > d - a) {
                        worst = Some((drop, allowed, format!("mode {}, iterate {} to {}", i + 1, w[0].n, w[1].n)));
                    }
                }
            }
            out.push(match worst {
                Some((drop, allowed, at)) => Check::at_most(
                    "picard_monotone",
                    drop,
                    allowed,
                    format!("largest decrease of the iterate mean, {at}; {}", mc_label(mc)),
                ),
                None => Check::at_most("picard_monotone", 0.0, 0.0, format!("a single iterate, nothing to compare; {}", mc_label(mc))),
            });
        }
        None => {
            out.push(Check::skipped("picard_converged", "needs an MC solution"));
            out.push(Check::skipped("picard_monotone", "needs an MC solution"));
        }
    }

    // Strategy.
    let st = &th.strategy;
    const STRATEGY_CHECKS: [&str; 8] = [
        "strategy_optimality",
        "random_strategy_domination",
        "switch_count_tail",
        "dpp.n1",
        "dpp.n3",
        "profit_identity",
        "no_churn",
        "truncated_paths",
    ];
    match (ev.strategy, ev.fd) {
        (Some(s), Some(v)) => {
            let sum = &s.run.summary;
            let label = format!("policy from {}, {} fresh paths, seed {}", fd_label(v), sum.n_paths, s.ensemble_seed);
            let value = fd_root(v, p, sum.initial_mode);
            out.push(Check::at_most(
                "strategy_optimality",
                (sum.mean - value).abs(),
                st.se_mult * sum.standard_error + st.abs,
                format!("simulated mean {:.6} vs v_{}(t0, x0) = {value:.6}; {label}", sum.mean, sum.initial_mode + 1),
            ));
            out.push(Check::at_most(
                "random_strategy_domination",
                s.random.best_mean - sum.mean,
                st.random_se_mult * sum.standard_error,
                format!("best of {} random open-loop strategies (#{}) minus the policy mean; {label}", s.random.count, s.random.best_index),
            ));
            out.push(match &s.tail {
                Some(t) => {
                    let worst = t
                        .rows
                        .iter()
                        .filter(|r| r.n >= 2)
                        .map(|r| if r.allowed > 0.0 { r.n_times_p / r.allowed } else if r.n_times_p > 0.0 { f64::INFINITY } else { 0.0 })
                        .fold(0.0, f64::max);
                    Check::at_most(
                        "switch_count_tail",
                        worst,
                        1.0,
                        format!("max over n >= 2 of n P[tau_n < T] / allowed, fitted C = {:.4}; {label}", t.fitted_c),
                    )
                }
                None => Check::skipped("switch_count_tail", format!("fewer than {} traces", st.tail_min_traces)),
            });
            for n in [1, 3] {
                let name = format!("dpp.n{n}");
                match s.dpp.iter().find(|d| d.n == n) {
                    Some(d) => out.push(Check::at_most(
                        name,
                        (d.estimate - d.value).abs(),
                        st.dpp_se_mult * d.standard_error + st.dpp_abs,
                        format!("{:.1}% of paths reach switch {n}; {label}", 100.0 * d.reached),
                    )),
                    None => out.push(Check::skipped(name, "not computed")),
                }
            }
            out.push(Check::at_most("profit_identity", s.profit_gap, st.profit_identity, format!("largest per-trace recomputation gap; {label}")));
            out.push(Check::at_most("no_churn", s.churn as f64, 0.0, format!("traces undoing a switch at the same time; {label}")));
            out.push(Check::at_most(
                "truncated_paths",
                sum.truncated as f64 / sum.n_paths as f64,
                st.max_truncated_share,
                format!("share of paths leaving the box; {label}"),
            ));
        }
        _ => {
            for name in STRATEGY_CHECKS {
                out.push(match ev.strategy_error {
                    Some(e) => Check::failed(name, format!("strategy simulation failed: {e}")),
                    None => Check::skipped(name, "needs an FD field and a strategy simulation"),
                });
            }
        }
    }
    out
}

/// Settings of a full comparison run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    /// Space nodes per dimension of the main FD grid.
    pub grid: Vec<usize>,
    /// Time steps of the main FD grid.
    pub steps: usize,
    pub scheme: FdScheme,
    /// Regression paths and their time steps.
    pub paths: usize,
    pub path_steps: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iterations: usize,
    pub degree: usize,
    /// Fresh paths for the strategy simulation (seeded `seed + 1`).
    pub strategy_paths: usize,
    pub oracle_levels: usize,
    /// Solve the residual grids from the thresholds file.
    pub residual: bool,
}

impl CompareConfig {
    pub fn for_problem(p: &SwitchingProblem, th: &Thresholds) -> CompareConfig {
        CompareConfig {
            grid: vec![if p.dim() == 1 { 200 } else { 50 }; p.dim()],
            steps: 400,
            scheme: FdScheme::Implicit,
            paths: 50_000,
            path_steps: 100,
            seed: 7,
            tol: th.picard.tol,
            max_iterations: th.picard.max_iterations,
            degree: McOptions::default().degree,
            strategy_paths: 20_000,
            oracle_levels: 2000,
            residual: true,
        }
    }
}

/// Everything a comparison produced.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub report: Report,
    pub fd: ValueField,
    pub policy: PolicyField,
    pub mc: McSolution,
    pub oracle: Option<OracleValue>,
    pub strategy: Option<StrategyEvidence>,
}

fn fd_options(scheme: FdScheme) -> FdOptions {
    FdOptions {
        scheme,
        ..FdOptions::default()
    }
}

/// Simulates the policy on fresh paths and measures it.
pub fn strategy_evidence(
    v: &ValueField,
    policy: &PolicyField,
    p: &SwitchingProblem,
    paths: usize,
    steps: usize,
    seed: u64,
    th: &Thresholds,
) -> Result<StrategyEvidence> {
    let e = simulate(p, 0.0, &p.x0, paths, steps, seed)?;
    let high = fd_root(v, p, p.initial_mode);
    let run = simulate_strategy(policy, &e, p, p.initial_mode, Some(high))?;
    let st = &th.strategy;
    let tail = if run.traces.len() >= st.tail_min_traces {
        Some(switch_statistics_with(&run.traces, p.horizon, st.tail_rse_mult)?)
    } else {
        None
    };
    let dpp = [1, 3].iter().map(|&n| check_dpp_with(v, p, policy, &e, n)).collect::<Result<Vec<_>>>()?;
    Ok(StrategyEvidence {
        profit_gap: profit_identity_gap(&run, &e, p)?,
        churn: churn_paths(&run.traces).len(),
        random: random_strategies(&e, p, st.random_count, seed)?,
        tail,
        dpp,
        run,
        ensemble_seed: seed,
    })
}

/// FD, regression MC, oracle (k = 1), residual grids and a strategy
/// simulation, then [`cross_check`]. `run` is embedded in the report.
pub fn compare(p: &SwitchingProblem, cfg: &CompareConfig, th: &Thresholds, run: serde_json::Value) -> Result<Comparison> {
    compare_with_field(p, cfg, th, run, None)
}

/// [`compare`] reusing an already solved main FD field.
pub fn compare_with_field(
    p: &SwitchingProblem,
    cfg: &CompareConfig,
    th: &Thresholds,
    run: serde_json::Value,
    cached: Option<ValueField>,
) -> Result<Comparison> {
    let grid = Grid::for_problem(p, &cfg.grid, cfg.steps)?;
    let fd = match cached {
        Some(v) if v.grid == grid && v.problem_hash == p.hash() && v.scheme == cfg.scheme => v,
        _ => solve_fd(p, &grid, &fd_options(cfg.scheme))?,
    };
    let mut extra_fields = Vec::new();
    let residual = if cfg.residual {
        let rg = th.residual_grid(&p.name);
        let mut reports = Vec::new();
        for (space, time) in [(rg.space, rg.time), (rg.refined_space, rg.refined_time)] {
            let g = Grid::for_problem(p, &vec![space; p.dim()], time)?;
            let v = solve_fd(p, &g, &FdOptions::default())?;
            reports.push(residuals(&v, p, th.fd.slack_tol)?);
            extra_fields.push(v);
        }
        let fine = reports.pop().expect("two reports");
        Some((reports.pop().expect("two reports"), fine))
    } else {
        None
    };

    let e = simulate(p, 0.0, &p.x0, cfg.paths, cfg.path_steps, cfg.seed)?;
    let mc = solve_mc(p, &e, cfg.tol, cfg.max_iterations, &McOptions { degree: cfg.degree })?;
    drop(e);

    let (oracle, oracle_doubled) = if p.dim() == 1 {
        let a = solve_dp(&build_chain(p, cfg.oracle_levels)?, p)?;
        let b = solve_dp(&build_chain(p, 2 * cfg.oracle_levels)?, p)?;
        (Some(a), Some(b))
    } else {
        (None, None)
    };

    let policy = extract_policy(&fd, p, DEFAULT_TIE_TOL)?;
    let (strategy, strategy_error) =
        match strategy_evidence(&fd, &policy, p, cfg.strategy_paths, cfg.path_steps, cfg.seed + 1, th) {
            Ok(s) => (Some(s), None),
            Err(e @ Error::TooManyTruncated { .. }) => (None, Some(e.to_string())),
            Err(e) => return Err(e),
        };

    let others: Vec<&ValueField> = extra_fields.iter().collect();
    let ev = Evidence {
        fd: Some(&fd),
        other_fields: &others,
        mc: Some(&mc),
        oracle: oracle.as_ref(),
        oracle_doubled: oracle_doubled.as_ref(),
        residual: residual.as_ref().map(|(a, b)| (a, b)),
        strategy: strategy.as_ref(),
        strategy_error: strategy_error.as_deref(),
    };
    let checks = cross_check(p, &ev, th);
    let values = (0..p.modes)
        .map(|i| {
            let sim = strategy.as_ref().filter(|s| s.run.summary.initial_mode == i).map(|s| &s.run.summary);
            ModeValues {
                mode: i + 1,
                fd: Some(fd_root(&fd, p, i)),
                mc: Some(mc.last.mean[i]),
                mc_standard_error: Some(mc.last.standard_error[i]),
                oracle: oracle.as_ref().map(|o| o.root(i)),
                strategy: sim.map(|s| s.mean),
                strategy_standard_error: sim.map(|s| s.standard_error),
            }
        })
        .collect();
    Ok(Comparison {
        report: Report::new(p, run, values, checks),
        fd,
        policy,
        mc,
        oracle,
        strategy,
    })
}

/// Every solver's value at `(t0, x0)` against a closed form.
pub fn closed_form_checks(cmp: &Comparison, expected: &[f64], th: &Thresholds) -> Vec<Check> {
    let vt = &th.values;
    let mut out = Vec::new();
    for (v, &want) in cmp.report.values.iter().zip(expected) {
        if let Some(fd) = v.fd {
            out.push(Check::at_most(format!("closed_form.fd.mode{}", v.mode), (fd - want).abs(), vt.fd_abs, fd_label(&cmp.fd)));
        }
        if let (Some(mc), Some(se)) = (v.mc, v.mc_standard_error) {
            // Rounding slack for zero-variance payoffs, where 2 SE is 0.
            out.push(Check::at_most(
                format!("closed_form.mc.mode{}", v.mode),
                (mc - want).abs(),
                vt.mc_se_mult * se + vt.oracle_abs,
                mc_label(&cmp.mc),
            ));
        }
        if let Some(o) = v.oracle {
            let label = cmp.oracle.as_ref().map(oracle_label).unwrap_or_default();
            out.push(Check::at_most(format!("closed_form.oracle.mode{}", v.mode), (o - want).abs(), vt.oracle_abs, label));
        }
    }
    out
}

/// Whether the policy in `mode` switches at `(t0, x0)`: measured 0 if so.
pub fn switches_at_start(cmp: &Comparison, p: &SwitchingProblem, mode: usize, to: usize) -> Check {
    let action = cmp.policy.lookup(mode, 0.0, &p.x0);
    Check::at_most(
        format!("policy_at_start.mode{}", mode + 1),
        if action == Some(Action::SwitchTo(to)) { 0.0 } else { 1.0 },
        0.0,
        format!("action {action:?} at (t0, x0); {}", fd_label(&cmp.fd)),
    )
}

pub fn symmetry_check(v: &ValueField, th: &Thresholds) -> Check {
    Check::at_most(
        "mirror_symmetry",
        mirror_asymmetry(v),
        th.fd.symmetry_fd_mult * th.values.fd_abs,
        format!("max |v_1(t, x) - v_2(t, -x)|; {}", fd_label(v)),
    )
}

/// Runs `compare` once per thread count and reports how many report bytes
/// differ from the first run.
pub fn determinism_check(p: &SwitchingProblem, cfg: &CompareConfig, th: &Thresholds, threads: &[usize]) -> Result<Check> {
    let mut first: Option<String> = None;
    let mut differing = 0usize;
    for &n in threads {
        let json = with_threads(n, || compare(p, cfg, th, serde_json::to_value(cfg).expect("config serializes")))?
            .report
            .to_json();
        match &first {
            None => first = Some(json),
            Some(f) => differing += f.bytes().zip(json.bytes()).filter(|(a, b)| a != b).count() + f.len().abs_diff(json.len()),
        }
    }
    Ok(Check::at_most(
        "determinism",
        differing as f64,
        0.0,
        format!("report bytes differing across thread counts {threads:?}, seed {}", cfg.seed),
    ))
}

/// Runs `f` on a pool with `n` threads (inline without the parallel feature).
pub fn with_threads<R: Send>(n: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool")
            .install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        f()
    }
}

/// Solver runs behind the acceptance criteria.
pub struct AcceptanceRun {
    pub identical_modes: Comparison,
    pub identical_modes_seconds: f64,
    pub deterministic: Comparison,
    pub benchmark: Comparison,
    pub gbm_power_plant: Comparison,
}

/// One acceptance criterion as a single named check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Criterion {
    pub id: u8,
    pub check: Check,
}

impl AcceptanceRun {
    pub fn compute(th: &Thresholds) -> Result<AcceptanceRun> {
        use crate::fixtures;
        let run = |p: &SwitchingProblem| {
            let cfg = CompareConfig::for_problem(p, th);
            compare(p, &cfg, th, serde_json::to_value(&cfg).expect("config serializes"))
        };
        let start = Instant::now();
        let identical_modes = run(&fixtures::identical_modes())?;
        let identical_modes_seconds = start.elapsed().as_secs_f64();
        Ok(AcceptanceRun {
            identical_modes,
            identical_modes_seconds,
            deterministic: run(&fixtures::deterministic())?,
            benchmark: run(&fixtures::benchmark())?,
            gbm_power_plant: run(&fixtures::gbm_power_plant())?,
        })
    }

    fn all(&self) -> [&Comparison; 4] {
        [&self.identical_modes, &self.deterministic, &self.benchmark, &self.gbm_power_plant]
    }

    /// Criteria 1 to 12 except the thread-count determinism criterion (11),
    /// which needs separate runs; see [`determinism_check`].
    pub fn criteria(&self, th: &Thresholds) -> Vec<Criterion> {
        use crate::fixtures;
        let bench = &self.benchmark.report;
        let pick = |r: &Report, names: &[&str]| -> Vec<Check> { names.iter().flat_map(|n| r.checks_named(n)).collect() };
        let mut c1 = closed_form_checks(&self.identical_modes, &[1.0, 1.0], th);
        c1.push(Check::at_most(
            "runtime_seconds",
            self.identical_modes_seconds,
            th.runtime.identical_modes_seconds,
            "all solvers on identical_modes",
        ));
        let mut c2 = closed_form_checks(&self.deterministic, &[1.0, 0.9], th);
        c2.push(switches_at_start(&self.deterministic, &fixtures::deterministic(), 1, 0));
        let c6: Vec<Check> = self.all().iter().flat_map(|c| c.report.checks_named("obstacle_inequality")).collect();
        let c12 = pick(
            &self.gbm_power_plant.report,
            &[
                "complementarity_residual",
                "complementarity_refinement",
                "obstacle_inequality",
                "strategy_optimality",
                "random_strategy_domination",
                "switch_count_tail",
                "dpp",
            ],
        );
        let list: Vec<(u8, &str, Vec<Check>)> = vec![
            (1, "identical_modes_closed_form", c1),
            (2, "deterministic_closed_form", c2),
            (3, "oracle_equivalence", pick(bench, &["fd_vs_oracle", "mc_vs_oracle", "oracle_level_doubling"])),
            (4, "monotone_picard", pick(bench, &["picard_monotone", "picard_converged"])),
            (5, "complementarity_residual", pick(bench, &["complementarity_residual", "complementarity_refinement"])),
            (6, "obstacle_inequality", c6),
            (7, "strategy_optimality", pick(bench, &["strategy_optimality", "random_strategy_domination"])),
            (8, "switch_count_tail", pick(bench, &["switch_count_tail"])),
            (9, "dynamic_programming_principle", pick(bench, &["dpp"])),
            (10, "mirror_symmetry", vec![symmetry_check(&self.benchmark.fd, th)]),
            (12, "x_dependent_costs", c12),
        ];
        list.into_iter()
            .map(|(id, name, checks)| Criterion {
                id,
                check: aggregate(name, &checks),
            })
            .collect()
    }
}
