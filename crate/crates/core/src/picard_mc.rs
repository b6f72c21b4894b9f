//! Regression Monte Carlo for the iterated optimal stopping scheme.
//!
//! Iterate 0 is, per mode, the optimal stopping of the running profit with a
//! zero reward for quitting. Iterate `n` stops into the best neighbouring mode
//! of iterate `n - 1`, net of the switching cost, and so allows at most `n`
//! switches. Conditional expectations are least-squares fits of realized
//! one-step-ahead cash flows on polynomials in the standardized state
//! (Longstaff-Schwartz). Values at `t0` are path averages of realized cash
//! flows, so every estimate comes with a standard error.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::GramFactor;
use crate::model::SwitchingProblem;
use crate::par;
use crate::sde_sim::PathEnsemble;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McOptions {
    /// Total degree of the polynomial regression basis.
    pub degree: usize,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions { degree: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasisDescriptor {
    pub family: String,
    pub degree: usize,
    pub dim: usize,
    pub terms: usize,
}

impl BasisDescriptor {
    fn monomials(dim: usize, degree: usize) -> Self {
        BasisDescriptor {
            family: "monomials in the per-slice standardized state".into(),
            degree,
            dim,
            terms: exponents(dim, degree).len(),
        }
    }
}

/// One iterate of the scheme on a fixed ensemble.
#[derive(Debug, Clone)]
pub struct SnellIterate {
    pub n: usize,
    pub modes: usize,
    pub n_paths: usize,
    pub n_steps: usize,
    pub ensemble_seed: u64,
    /// Fitted values `max(obstacle, continuation)`, `[mode][step][path]`.
    y: Vec<f64>,
    /// Realized cash flow from each step on, `[mode][step][path]`.
    realized: Vec<f64>,
    pub mean: Vec<f64>,
    pub standard_error: Vec<f64>,
    pub basis: BasisDescriptor,
    /// Slices whose fit fell back to a lower degree.
    pub fallbacks: usize,
    pub warnings: Vec<String>,
}

impl SnellIterate {
    pub fn y(&self, mode: usize, path: usize, step: usize) -> f64 {
        self.y[(mode * (self.n_steps + 1) + step) * self.n_paths + path]
    }

    fn y_slice(&self, mode: usize, step: usize) -> &[f64] {
        let o = (mode * (self.n_steps + 1) + step) * self.n_paths;
        &self.y[o..o + self.n_paths]
    }

    fn realized_slice(&self, mode: usize, step: usize) -> &[f64] {
        let o = (mode * (self.n_steps + 1) + step) * self.n_paths;
        &self.realized[o..o + self.n_paths]
    }

    /// Realized cash flow from `t0` per path.
    pub fn cash_flows(&self, mode: usize) -> &[f64] {
        self.realized_slice(mode, 0)
    }

    pub fn summary(&self) -> IterateSummary {
        IterateSummary {
            n: self.n,
            mean: self.mean.clone(),
            standard_error: self.standard_error.clone(),
        }
    }

    /// Per-path dump with columns `mode, path, step, y`.
    pub fn write_paths_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "mode,path,step,y")?;
        for mode in 0..self.modes {
            for path in 0..self.n_paths {
                for step in 0..=self.n_steps {
                    writeln!(w, "{},{},{},{:e}", mode + 1, path, step, self.y(mode, path, step))?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterateSummary {
    pub n: usize,
    pub mean: Vec<f64>,
    pub standard_error: Vec<f64>,
}

/// Outcome of [`solve_mc`]: the last iterate and the trace of all iterates.
#[derive(Debug, Clone)]
pub struct McSolution {
    pub last: SnellIterate,
    pub history: Vec<IterateSummary>,
    pub converged: bool,
    pub tol: f64,
}

impl McSolution {
    /// Iterate trace with columns `iteration, mode, mean, standard_error`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write_history_csv(&self.history, &mut w)
    }
}

pub fn write_history_csv<W: Write>(history: &[IterateSummary], mut w: W) -> std::io::Result<()> {
    writeln!(w, "iteration,mode,mean,standard_error")?;
    for it in history {
        for (i, (m, s)) in it.mean.iter().zip(&it.standard_error).enumerate() {
            writeln!(w, "{},{},{:.10e},{:.10e}", it.n, i + 1, m, s)?;
        }
    }
    Ok(())
}

/// Payoff and cost samples along the ensemble plus the per-slice regression
/// bases, shared by all iterates.
struct Tables {
    /// States in slice order, `[step][path][dim]`.
    xs: Vec<f64>,
    dim: usize,
    n_paths: usize,
    /// `[mode][step][path]`
    psi: Vec<f64>,
    /// `costs[i][k]`: constant, or index into `cost_samples`.
    costs: Vec<Vec<CostSource>>,
    /// `[table][step][path]`
    cost_samples: Vec<Vec<f64>>,
    bases: Vec<SliceBasis>,
}

#[derive(Debug, Clone, Copy)]
enum CostSource {
    None,
    Const(f64),
    Table(usize),
}

impl Tables {
    fn build(e: &PathEnsemble, p: &SwitchingProblem, degree: usize) -> Result<Tables> {
        let (np, ns, m, k) = (e.n_paths, e.n_steps, p.modes, e.dim);
        let times = e.times();
        let mut xs = vec![0.0; (ns + 1) * np * k];
        for path in 0..np {
            for step in 0..=ns {
                xs[(step * np + path) * k..][..k].copy_from_slice(e.state(path, step));
            }
        }
        let sample = |f: &dyn Fn(f64, &[f64]) -> Result<f64>| -> Result<Vec<f64>> {
            let mut out = vec![0.0; (ns + 1) * np];
            for step in 0..=ns {
                for path in 0..np {
                    out[step * np + path] = f(times[step], &xs[(step * np + path) * k..][..k])?;
                }
            }
            Ok(out)
        };
        let mut psi = Vec::with_capacity(m * (ns + 1) * np);
        for i in 0..m {
            let expr = &p.psi[i];
            match expr.as_const() {
                Some(c) => psi.extend(std::iter::repeat(c).take((ns + 1) * np)),
                None => psi.extend(sample(&|t, x| Ok(expr.eval(t, x)?))?),
            }
        }
        let mut seen: Vec<String> = Vec::new();
        let mut cost_samples = Vec::new();
        let mut costs = vec![vec![CostSource::None; m]; m];
        for i in 0..m {
            for k in 0..m {
                let Some(expr) = &p.cost[i][k] else { continue };
                costs[i][k] = if let Some(c) = expr.as_const() {
                    CostSource::Const(c)
                } else {
                    let key = expr.to_string();
                    let idx = match seen.iter().position(|s| *s == key) {
                        Some(idx) => idx,
                        None => {
                            seen.push(key);
                            cost_samples.push(sample(&|t, x| Ok(expr.eval(t, x)?))?);
                            cost_samples.len() - 1
                        }
                    };
                    CostSource::Table(idx)
                };
            }
        }
        let bases = par::map_range(ns, |step| SliceBasis::new(&xs[step * np * k..(step + 1) * np * k], k, degree));
        Ok(Tables {
            xs,
            dim: k,
            n_paths: np,
            psi,
            costs,
            cost_samples,
            bases,
        })
    }

    fn cost(&self, i: usize, k: usize, idx: usize) -> f64 {
        match self.costs[i][k] {
            CostSource::Const(c) => c,
            CostSource::Table(t) => self.cost_samples[t][idx],
            CostSource::None => unreachable!("no cost on the diagonal"),
        }
    }

    fn slice(&self, step: usize) -> &[f64] {
        let w = self.n_paths * self.dim;
        &self.xs[step * w..(step + 1) * w]
    }

    fn fallbacks(&self, degree: usize) -> usize {
        self.bases.iter().filter(|b| b.spread && b.degree < degree).count()
    }
}

/// Exponent vectors of all monomials of total degree `<= degree`, graded.
fn exponents(dim: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for total in 0..=degree {
        let mut cur = vec![0; dim];
        fill_exponents(&mut out, &mut cur, 0, total);
    }
    out
}

fn fill_exponents(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, d: usize, left: usize) {
    if d + 1 == cur.len() {
        cur[d] = left;
        out.push(cur.clone());
        return;
    }
    for e in (0..=left).rev() {
        cur[d] = e;
        fill_exponents(out, cur, d + 1, left - e);
    }
}

/// Regression basis at one time slice: monomials in the standardized state,
/// with the Gram matrix factored once.
struct SliceBasis {
    center: Vec<f64>,
    scale: Vec<f64>,
    degree: usize,
    exps: Vec<Vec<usize>>,
    /// `None` means a constant fit (the slice has no spread).
    factor: Option<GramFactor>,
    spread: bool,
}

impl SliceBasis {
    /// `xs` holds the states of one slice, `[path][dim]`.
    fn new(xs: &[f64], k: usize, degree: usize) -> SliceBasis {
        let np = xs.len() / k;
        let mut center = vec![0.0; k];
        let mut scale = vec![0.0; k];
        for d in 0..k {
            let mean = (0..np).map(|p| xs[p * k + d]).sum::<f64>() / np as f64;
            let var = (0..np).map(|p| (xs[p * k + d] - mean).powi(2)).sum::<f64>() / np as f64;
            center[d] = mean;
            scale[d] = var.sqrt();
        }
        let tiny = 1e-12 * (1.0 + center.iter().map(|c| c.abs()).sum::<f64>());
        let spread = np >= 2 && scale.iter().any(|&s| s > tiny);
        for s in scale.iter_mut() {
            if *s <= tiny {
                *s = 0.0;
            }
        }
        let mut basis = SliceBasis {
            center,
            scale,
            degree: 0,
            exps: vec![vec![0; k]],
            factor: None,
            spread,
        };
        if !spread {
            basis.degree = degree;
            return basis;
        }
        let (mut row, mut pw) = (Vec::new(), Vec::new());
        for deg in (1..=degree).rev() {
            basis.exps = exponents(k, deg);
            basis.degree = deg;
            let cols = basis.exps.len();
            if cols > np {
                continue;
            }
            let mut gram = vec![0.0; cols * cols];
            for p in 0..np {
                basis.row(&xs[p * k..(p + 1) * k], &mut row, &mut pw);
                for a in 0..cols {
                    for b in a..cols {
                        gram[a * cols + b] += row[a] * row[b];
                    }
                }
            }
            for a in 0..cols {
                for b in 0..a {
                    gram[a * cols + b] = gram[b * cols + a];
                }
            }
            if let Some(f) = GramFactor::new(&gram, cols) {
                basis.factor = Some(f);
                basis.degree = deg;
                return basis;
            }
        }
        basis.exps = vec![vec![0; k]];
        basis.degree = 0;
        basis
    }

    fn row(&self, x: &[f64], out: &mut Vec<f64>, pw: &mut Vec<f64>) {
        out.clear();
        let k = x.len();
        if k == 1 {
            let z = if self.scale[0] > 0.0 { (x[0] - self.center[0]) / self.scale[0] } else { 0.0 };
            let mut v = 1.0;
            for _ in 0..self.exps.len() {
                out.push(v);
                v *= z;
            }
            return;
        }
        let width = self.degree + 1;
        pw.clear();
        pw.resize(k * width, 1.0);
        for d in 0..k {
            let z = if self.scale[d] > 0.0 { (x[d] - self.center[d]) / self.scale[d] } else { 0.0 };
            for j in 1..width {
                pw[d * width + j] = pw[d * width + j - 1] * z;
            }
        }
        for ex in &self.exps {
            out.push((0..k).map(|d| pw[d * width + ex[d]]).product());
        }
    }

    /// Fitted conditional expectation of `target` given the state, per path.
    fn fit(&self, xs: &[f64], target: &[f64], out: &mut [f64]) {
        let np = target.len();
        let k = xs.len() / np;
        let Some(factor) = &self.factor else {
            let mean = target.iter().sum::<f64>() / np as f64;
            out.iter_mut().for_each(|o| *o = mean);
            return;
        };
        let cols = self.exps.len();
        let mut rows = Vec::with_capacity(np * cols);
        let (mut row, mut pw) = (Vec::with_capacity(cols), Vec::new());
        let mut rhs = vec![0.0; cols];
        for p in 0..np {
            self.row(&xs[p * k..(p + 1) * k], &mut row, &mut pw);
            for c in 0..cols {
                rhs[c] += row[c] * target[p];
            }
            rows.extend_from_slice(&row);
        }
        let beta = factor.solve(&rhs);
        for p in 0..np {
            out[p] = rows[p * cols..(p + 1) * cols].iter().zip(&beta).map(|(a, b)| a * b).sum();
        }
    }
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

struct ModePass {
    y: Vec<f64>,
    realized: Vec<f64>,
}

/// Backward stopping recursion for one mode. Decisions compare fitted values;
/// the cash flow carried backwards is the realized one, so regression error
/// affects only the policy and never accumulates in the estimate.
fn stopping_pass(e: &PathEnsemble, tables: &Tables, modes: usize, mode: usize, prev: Option<&SnellIterate>) -> ModePass {
    let (np, ns) = (e.n_paths, e.n_steps);
    let times = e.times();
    let mut y = vec![0.0; (ns + 1) * np];
    let mut realized = vec![0.0; (ns + 1) * np];
    let mut target = vec![0.0; np];
    let mut fitted = vec![0.0; np];
    for step in (0..ns).rev() {
        let dt = times[step + 1] - times[step];
        let psi = &tables.psi[(mode * (ns + 1) + step) * np..][..np];
        {
            let next = &realized[(step + 1) * np..(step + 2) * np];
            for p in 0..np {
                target[p] = psi[p] * dt + next[p];
            }
        }
        tables.bases[step].fit(tables.slice(step), &target, &mut fitted);
        let (y_row, cf_row) = (&mut y[step * np..(step + 1) * np], &mut realized[step * np..(step + 1) * np]);
        for p in 0..np {
            let (stop_fit, stop_cash) = match prev {
                None => (0.0, 0.0),
                Some(prev) => {
                    let mut best = (f64::NEG_INFINITY, 0.0);
                    for k in (0..modes).filter(|&k| k != mode) {
                        let g = tables.cost(mode, k, step * np + p);
                        let v = prev.y_slice(k, step)[p] - g;
                        if v > best.0 {
                            best = (v, prev.realized_slice(k, step)[p] - g);
                        }
                    }
                    best
                }
            };
            if stop_fit > fitted[p] {
                y_row[p] = stop_fit;
                cf_row[p] = stop_cash;
            } else {
                y_row[p] = fitted[p];
                cf_row[p] = target[p];
            }
        }
    }
    ModePass { y, realized }
}

fn envelope(e: &PathEnsemble, p: &SwitchingProblem, tables: &Tables, prev: Option<&SnellIterate>, opts: &McOptions) -> SnellIterate {
    let m = p.modes;
    let passes = par::map_range(m, |i| stopping_pass(e, tables, m, i, prev));
    let mut it = SnellIterate {
        n: prev.map_or(0, |q| q.n + 1),
        modes: m,
        n_paths: e.n_paths,
        n_steps: e.n_steps,
        ensemble_seed: e.seed,
        y: Vec::with_capacity(m * (e.n_steps + 1) * e.n_paths),
        realized: Vec::with_capacity(m * (e.n_steps + 1) * e.n_paths),
        mean: Vec::with_capacity(m),
        standard_error: Vec::with_capacity(m),
        basis: BasisDescriptor::monomials(e.dim, opts.degree),
        fallbacks: tables.fallbacks(opts.degree),
        warnings: Vec::new(),
    };
    for pass in passes {
        let (mean, se) = mean_and_se(&pass.realized[..e.n_paths]);
        it.mean.push(mean);
        it.standard_error.push(se);
        it.y.extend(pass.y);
        it.realized.extend(pass.realized);
    }
    if it.fallbacks > 0 {
        it.warnings.push(format!(
            "{} regression slices were rank deficient and used a lower degree",
            it.fallbacks
        ));
    }
    it
}

fn check_ensemble(e: &PathEnsemble, p: &SwitchingProblem, opts: &McOptions) -> Result<()> {
    if e.dim != p.dim() {
        return Err(Error::InvalidArgument(format!(
            "ensemble has dimension {}, problem has {}",
            e.dim,
            p.dim()
        )));
    }
    if (e.horizon() - p.horizon).abs() > 1e-12 {
        return Err(Error::InvalidArgument("ensemble does not end at the problem horizon".into()));
    }
    if opts.degree > 12 {
        return Err(Error::InvalidArgument(format!("regression degree {} is too large", opts.degree)));
    }
    Ok(())
}

/// Iterate 0: optimal stopping of the running profit, quitting pays 0.
pub fn snell_stage0(e: &PathEnsemble, p: &SwitchingProblem, opts: &McOptions) -> Result<SnellIterate> {
    check_ensemble(e, p, opts)?;
    let tables = Tables::build(e, p, opts.degree)?;
    Ok(envelope(e, p, &tables, None, opts))
}

/// Next iterate: stopping at an interior grid time pays the best switch into
/// `prev`, stopping at the horizon pays 0.
pub fn picard_step(prev: &SnellIterate, e: &PathEnsemble, p: &SwitchingProblem, opts: &McOptions) -> Result<SnellIterate> {
    check_ensemble(e, p, opts)?;
    if prev.n_paths != e.n_paths || prev.n_steps != e.n_steps || prev.ensemble_seed != e.seed || prev.modes != p.modes {
        return Err(Error::InvalidArgument("previous iterate was built on a different ensemble".into()));
    }
    let tables = Tables::build(e, p, opts.degree)?;
    Ok(envelope(e, p, &tables, Some(prev), opts))
}

/// Iterates until the largest change of a mode's mean value at `t0` drops below
/// `tol`, counting from an implicit all-zero iterate before iterate 0. Runs at
/// most `n_max` Picard steps after iterate 0.
pub fn solve_mc(p: &SwitchingProblem, e: &PathEnsemble, tol: f64, n_max: usize, opts: &McOptions) -> Result<McSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    if n_max == 0 {
        return Err(Error::InvalidArgument("n_max must be at least 1".into()));
    }
    check_ensemble(e, p, opts)?;
    let tables = Tables::build(e, p, opts.degree)?;
    let mut cur = envelope(e, p, &tables, None, opts);
    let mut history = vec![cur.summary()];
    let change = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let mut converged = change(&cur.mean, &vec![0.0; p.modes]) < tol;
    while !converged && cur.n < n_max {
        let next = envelope(e, p, &tables, Some(&cur), opts);
        converged = change(&next.mean, &cur.mean) < tol;
        history.push(next.summary());
        cur = next;
    }
    Ok(McSolution {
        last: cur,
        history,
        converged,
        tol,
    })
}

/// Monte Carlo estimate of `E[int_t0^T max_i |psi_i(s, X_s)| ds]` with its
/// standard error, the uniform upper bound on every iterate.
pub fn profit_bound(e: &PathEnsemble, p: &SwitchingProblem) -> Result<(f64, f64)> {
    let times = e.times();
    let mut per_path = vec![0.0; e.n_paths];
    for (path, total) in per_path.iter_mut().enumerate() {
        for step in 0..e.n_steps {
            let (t, x) = (times[step], e.state(path, step));
            let mut best = 0.0f64;
            for i in 0..p.modes {
                best = best.max(p.psi_at(i, t, x)?.abs());
            }
            *total += best * (times[step + 1] - t);
        }
    }
    Ok(mean_and_se(&per_path))
}
