//! Optimal switching strategies read off a value field, and their forward
//! simulation.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fd_solver::{Grid, ValueField};
use crate::model::SwitchingProblem;
use crate::par;
use crate::sde_sim::PathEnsemble;
pub use crate::tree_oracle::Action;

/// Default tolerance for "value equals obstacle".
pub const DEFAULT_TIE_TOL: f64 = 1e-8 + 10.0 * 1e-12;

/// Largest share of truncated paths a strategy run accepts.
pub const MAX_TRUNCATED_SHARE: f64 = 0.05;

/// Action per mode and grid node.
#[derive(Debug, Clone)]
pub struct PolicyField {
    pub modes: usize,
    pub grid: Grid,
    pub tie_tol: f64,
    pub problem_hash: String,
    /// `[mode][level][node]`
    actions: Vec<Action>,
}

impl PolicyField {
    fn idx(&self, mode: usize, level: usize, node: usize) -> usize {
        (mode * (self.grid.n_time + 1) + level) * self.grid.n_nodes() + node
    }

    pub fn action(&self, mode: usize, level: usize, node: usize) -> Action {
        self.actions[self.idx(mode, level, node)]
    }

    /// Action at `(t, x)` by nearest node and level; `None` outside the box.
    pub fn lookup(&self, mode: usize, t: f64, x: &[f64]) -> Option<Action> {
        let node = self.grid.nearest_node(x)?;
        Some(self.action(mode, self.grid.nearest_level(t), node))
    }

    /// Largest x at `level` where `mode` switches (k = 1 only).
    pub fn switch_boundary(&self, mode: usize, level: usize) -> Option<f64> {
        assert_eq!(self.grid.dim(), 1, "switch boundary is defined for k = 1");
        (0..self.grid.n_nodes())
            .rev()
            .find(|&n| self.action(mode, level, n) != Action::Continue)
            .map(|n| self.grid.coord(0, n))
    }

    /// Share of nodes at `level` where `mode` continues.
    pub fn continue_share(&self, mode: usize, level: usize) -> f64 {
        let n = self.grid.n_nodes();
        (0..n).filter(|&k| self.action(mode, level, k) == Action::Continue).count() as f64 / n as f64
    }
}

/// Switch where `v_i <= obstacle_i + tie_tol`, to the smallest index attaining
/// the obstacle; continue elsewhere. The terminal level always continues.
pub fn extract_policy(v: &ValueField, p: &SwitchingProblem, tie_tol: f64) -> Result<PolicyField> {
    if v.modes != p.modes {
        return Err(Error::InvalidArgument("value field and problem disagree on the mode count".into()));
    }
    let g = &v.grid;
    let (m, n) = (p.modes, g.n_nodes());
    let mut actions = vec![Action::Continue; m * (g.n_time + 1) * n];
    let mut costs = vec![0.0; m * m];
    for level in 0..g.n_time {
        let t = g.time(level);
        for node in 0..n {
            let x = g.coords(node);
            for i in 0..m {
                for k in (0..m).filter(|&k| k != i) {
                    costs[i * m + k] = p.cost_at(i, k, t, &x)?;
                }
            }
            for i in 0..m {
                let mut best: Option<(usize, f64)> = None;
                for k in (0..m).filter(|&k| k != i) {
                    let o = v.value(k, level, node) - costs[i * m + k];
                    if best.map_or(true, |(_, b)| o > b) {
                        best = Some((k, o));
                    }
                }
                let (k, obstacle) = best.expect("at least two modes");
                if v.value(i, level, node) <= obstacle + tie_tol {
                    actions[(i * (g.n_time + 1) + level) * n + node] = Action::SwitchTo(k);
                }
            }
        }
    }
    Ok(PolicyField {
        modes: m,
        grid: g.clone(),
        tie_tol,
        problem_hash: v.problem_hash.clone(),
        actions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Switch {
    /// 1-based switch number along the path.
    pub n: usize,
    pub step: usize,
    pub tau: f64,
    /// Zero-based modes.
    pub from: usize,
    pub to: usize,
    /// Running profit minus costs up to and including this switch.
    pub profit_to_date: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyTrace {
    pub path: usize,
    pub switches: Vec<Switch>,
    pub profit: f64,
    pub final_mode: usize,
    /// The path left the grid box; the mode was frozen from then on.
    pub truncated: bool,
}

/// Replays a fixed switch schedule along one path: accrues `psi` with the
/// left-point rule and pays each cost at its step. Used both as the profit
/// checker and to value open-loop strategies.
pub fn replay_profit(
    e: &PathEnsemble,
    p: &SwitchingProblem,
    path: usize,
    initial_mode: usize,
    schedule: &[(usize, usize)],
) -> Result<f64> {
    let times = e.times();
    let mut mode = initial_mode;
    let mut profit = 0.0;
    let mut next = 0;
    for step in 0..e.n_steps {
        let (t, x) = (times[step], e.state(path, step));
        while next < schedule.len() && schedule[next].0 == step {
            let to = schedule[next].1;
            profit -= p.cost_at(mode, to, t, x)?;
            mode = to;
            next += 1;
        }
        profit += p.psi_at(mode, t, x)? * (times[step + 1] - t);
    }
    Ok(profit)
}

/// Recomputes a trace's profit from the raw path and its switch list.
pub fn recompute_profit(trace: &StrategyTrace, e: &PathEnsemble, p: &SwitchingProblem, initial_mode: usize) -> Result<f64> {
    let schedule: Vec<(usize, usize)> = trace.switches.iter().map(|s| (s.step, s.to)).collect();
    replay_profit(e, p, trace.path, initial_mode, &schedule)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategySummary {
    pub n_paths: usize,
    pub initial_mode: usize,
    pub mean: f64,
    pub standard_error: f64,
    pub truncated: usize,
    pub mean_switches: f64,
    pub max_switches: usize,
    /// Value the policy was derived from (biased high for regression values).
    pub high: Option<f64>,
    /// Simulated mean profit of the policy (biased low).
    pub low: f64,
}

#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub traces: Vec<StrategyTrace>,
    pub summary: StrategySummary,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn follow_policy(
    policy: &PolicyField,
    e: &PathEnsemble,
    p: &SwitchingProblem,
    path: usize,
    initial_mode: usize,
    stop_after: Option<usize>,
) -> Result<StrategyTrace> {
    let times = e.times();
    let mut trace = StrategyTrace {
        path,
        switches: Vec::new(),
        profit: 0.0,
        final_mode: initial_mode,
        truncated: false,
    };
    let mut mode = initial_mode;
    for step in 0..e.n_steps {
        let (t, x) = (times[step], e.state(path, step));
        let mut chain = 0;
        while !trace.truncated && stop_after.map_or(true, |n| trace.switches.len() < n) {
            match policy.lookup(mode, t, x) {
                None => trace.truncated = true,
                Some(Action::Continue) => break,
                Some(Action::SwitchTo(to)) => {
                    chain += 1;
                    if chain >= p.modes {
                        return Err(Error::InvalidArgument(format!(
                            "policy cycles through all modes at path {path}, t = {t}"
                        )));
                    }
                    trace.profit -= p.cost_at(mode, to, t, x)?;
                    trace.switches.push(Switch {
                        n: trace.switches.len() + 1,
                        step,
                        tau: t,
                        from: mode,
                        to,
                        profit_to_date: trace.profit,
                    });
                    mode = to;
                }
            }
        }
        if stop_after.is_some_and(|n| trace.switches.len() >= n) && trace.switches.last().is_some_and(|s| s.step == step) {
            trace.final_mode = mode;
            return Ok(trace);
        }
        trace.profit += p.psi_at(mode, t, x)? * (times[step + 1] - t);
    }
    trace.final_mode = mode;
    Ok(trace)
}

/// Runs the policy forward on every path from `(t0, x0, initial_mode)`.
/// `high` is the value the policy came from, reported next to the simulated mean.
pub fn simulate_strategy(
    policy: &PolicyField,
    e: &PathEnsemble,
    p: &SwitchingProblem,
    initial_mode: usize,
    high: Option<f64>,
) -> Result<StrategyRun> {
    if initial_mode >= p.modes {
        return Err(Error::InvalidArgument(format!("initial mode {} out of range", initial_mode + 1)));
    }
    let traces: Vec<Result<StrategyTrace>> =
        par::map_range(e.n_paths, |path| follow_policy(policy, e, p, path, initial_mode, None));
    let traces = traces.into_iter().collect::<Result<Vec<_>>>()?;
    let truncated = traces.iter().filter(|t| t.truncated).count();
    if truncated as f64 > MAX_TRUNCATED_SHARE * e.n_paths as f64 {
        return Err(Error::TooManyTruncated {
            truncated,
            total: e.n_paths,
        });
    }
    let profits: Vec<f64> = traces.iter().map(|t| t.profit).collect();
    let (mean, standard_error) = mean_and_se(&profits);
    let counts: Vec<usize> = traces.iter().map(|t| t.switches.len()).collect();
    let summary = StrategySummary {
        n_paths: e.n_paths,
        initial_mode,
        mean,
        standard_error,
        truncated,
        mean_switches: counts.iter().sum::<usize>() as f64 / e.n_paths as f64,
        max_switches: counts.iter().copied().max().unwrap_or(0),
        high,
        low: mean,
    };
    Ok(StrategyRun { traces, summary })
}

/// Largest gap between a trace's reported profit and its recomputation.
pub fn profit_identity_gap(run: &StrategyRun, e: &PathEnsemble, p: &SwitchingProblem) -> Result<f64> {
    let mut worst = 0.0f64;
    for tr in &run.traces {
        let again = recompute_profit(tr, e, p, run.summary.initial_mode)?;
        worst = worst.max((again - tr.profit).abs());
    }
    Ok(worst)
}

/// Paths with a switch `i -> j` immediately undone by `j -> i` at the same time.
pub fn churn_paths(traces: &[StrategyTrace]) -> Vec<usize> {
    traces
        .iter()
        .filter(|t| {
            t.switches
                .windows(2)
                .any(|w| w[0].step == w[1].step && w[0].from == w[1].to && w[0].to == w[1].from)
        })
        .map(|t| t.path)
        .collect()
}

/// Trace CSV: one row per switch, then a closing row per path with `n = 0`,
/// `tau = T`, `from_mode = to_mode =` the final mode and the total profit.
pub fn write_traces_csv<W: Write>(run: &StrategyRun, horizon: f64, mut w: W) -> std::io::Result<()> {
    writeln!(w, "path,n,tau,from_mode,to_mode,profit_to_date")?;
    for tr in &run.traces {
        for s in &tr.switches {
            writeln!(w, "{},{},{},{},{},{:.10e}", tr.path, s.n, s.tau, s.from + 1, s.to + 1, s.profit_to_date)?;
        }
        writeln!(w, "{},0,{},{},{},{:.10e}", tr.path, horizon, tr.final_mode + 1, tr.final_mode + 1, tr.profit)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailRow {
    pub n: usize,
    pub p_hat: f64,
    pub standard_error: f64,
    pub n_times_p: f64,
    /// Largest value `n P` may take under the surrogate bound.
    pub allowed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailReport {
    pub n_traces: usize,
    pub rows: Vec<TailRow>,
    /// max over n <= 2 of n P[tau_n < T].
    pub reference: f64,
    /// Smallest C with P[tau_n < T] <= C / n for every observed n.
    pub fitted_c: f64,
    pub bounded: bool,
}

/// Minimum number of traces for [`switch_statistics`].
pub const MIN_TAIL_TRACES: usize = 10_000;

/// Empirical `P[tau_n < T]` and the surrogate `n P <= reference (1 + 3 rse)`.
pub fn switch_statistics(traces: &[StrategyTrace], horizon: f64) -> Result<TailReport> {
    switch_statistics_with(traces, horizon, 3.0)
}

/// [`switch_statistics`] with the relative standard error multiplier given.
pub fn switch_statistics_with(traces: &[StrategyTrace], horizon: f64, rse_mult: f64) -> Result<TailReport> {
    let total = traces.len();
    if total < MIN_TAIL_TRACES {
        return Err(Error::InvalidArgument(format!(
            "switch statistics need at least {MIN_TAIL_TRACES} traces, got {total}"
        )));
    }
    let n_max = traces
        .iter()
        .map(|t| t.switches.iter().filter(|s| s.tau < horizon).count())
        .max()
        .unwrap_or(0);
    let mut rows = Vec::with_capacity(n_max.max(2));
    for n in 1..=n_max.max(2) {
        let hits = traces
            .iter()
            .filter(|t| t.switches.get(n - 1).is_some_and(|s| s.tau < horizon))
            .count();
        let p_hat = hits as f64 / total as f64;
        rows.push(TailRow {
            n,
            p_hat,
            standard_error: (p_hat * (1.0 - p_hat) / total as f64).sqrt(),
            n_times_p: n as f64 * p_hat,
            allowed: 0.0,
        });
    }
    let reference = rows[..2].iter().map(|r| r.n_times_p).fold(0.0, f64::max);
    let mut bounded = true;
    for r in rows.iter_mut() {
        let rse = if r.p_hat > 0.0 { r.standard_error / r.p_hat } else { 0.0 };
        r.allowed = reference * (1.0 + rse_mult * rse);
        if r.n >= 2 && r.n_times_p > r.allowed {
            bounded = false;
        }
    }
    let fitted_c = rows.iter().map(|r| r.n_times_p).fold(0.0, f64::max);
    Ok(TailReport {
        n_traces: total,
        rows,
        reference,
        fitted_c,
        bounded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DppReport {
    pub n: usize,
    /// `v_{initial}(t0, x0)` from the field.
    pub value: f64,
    pub estimate: f64,
    pub standard_error: f64,
    /// Share of paths whose n-th switch happened before T.
    pub reached: f64,
}

/// Profit of the policy up to its n-th switch plus the field's value there
/// (or the full profit if fewer than n switches happen before T), averaged.
pub fn check_dpp(v: &ValueField, p: &SwitchingProblem, e: &PathEnsemble, n: usize) -> Result<DppReport> {
    check_dpp_with(v, p, &extract_policy(v, p, DEFAULT_TIE_TOL)?, e, n)
}

/// [`check_dpp`] for an already extracted policy.
pub fn check_dpp_with(
    v: &ValueField,
    p: &SwitchingProblem,
    policy: &PolicyField,
    e: &PathEnsemble,
    n: usize,
) -> Result<DppReport> {
    if n == 0 {
        return Err(Error::InvalidArgument("check_dpp needs n >= 1".into()));
    }
    let i0 = p.initial_mode;
    let parts: Vec<Result<(f64, bool)>> = par::map_range(e.n_paths, |path| {
        let tr = follow_policy(policy, e, p, path, i0, Some(n))?;
        match tr.switches.get(n - 1) {
            Some(s) => {
                let x = e.state(path, s.step);
                Ok((tr.profit + v.interpolate(s.to, s.tau, x), true))
            }
            None => Ok((tr.profit, false)),
        }
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let samples: Vec<f64> = parts.iter().map(|x| x.0).collect();
    let (estimate, standard_error) = mean_and_se(&samples);
    Ok(DppReport {
        n,
        value: v.interpolate(i0, e.t0, &e.x0),
        estimate,
        standard_error,
        reached: parts.iter().filter(|x| x.1).count() as f64 / e.n_paths as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RandomStrategyReport {
    pub count: usize,
    pub best_mean: f64,
    pub best_index: usize,
    pub means: Vec<f64>,
}

/// Values `count` random open-loop strategies on the ensemble. Each draws up to
/// four switch steps uniformly on the grid and a uniformly random new mode at
/// each.
pub fn random_strategies(e: &PathEnsemble, p: &SwitchingProblem, count: usize, seed: u64) -> Result<RandomStrategyReport> {
    let mut means = Vec::with_capacity(count);
    for s in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64);
        let n_switches = rng.gen_range(0..=4usize);
        let mut steps: Vec<usize> = (0..n_switches).map(|_| rng.gen_range(0..e.n_steps)).collect();
        steps.sort_unstable();
        let mut mode = p.initial_mode;
        let mut schedule = Vec::with_capacity(n_switches);
        for step in steps {
            let mut to = rng.gen_range(0..p.modes - 1);
            if to >= mode {
                to += 1;
            }
            schedule.push((step, to));
            mode = to;
        }
        let profits: Vec<Result<f64>> =
            par::map_range(e.n_paths, |path| replay_profit(e, p, path, p.initial_mode, &schedule));
        let profits = profits.into_iter().collect::<Result<Vec<_>>>()?;
        means.push(mean_and_se(&profits).0);
    }
    let (best_index, best_mean) = means
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |a, (i, m)| if m > a.1 { (i, m) } else { a });
    Ok(RandomStrategyReport {
        count,
        best_mean,
        best_index,
        means,
    })
}
