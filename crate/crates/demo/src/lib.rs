//! Browser demo: the two-mode Brownian benchmark with adjustable switching
//! cost and volatility. Results cross the wasm boundary as JSON strings.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use switchbox::fd_solver::{solve_fd, FdOptions, Grid};
use switchbox::sde_sim::simulate;
use switchbox::strategy::{extract_policy, simulate_strategy, DEFAULT_TIE_TOL};
use switchbox::tree_oracle::{build_chain, solve_dp};
use switchbox::SwitchingProblem;

type DemoResult<T> = Result<T, String>;

fn problem(cost: f64, sigma: f64) -> DemoResult<SwitchingProblem> {
    if !(cost > 0.0 && sigma > 0.0) {
        return Err("cost and sigma must be positive".into());
    }
    let text = format!(
        r#"
name = "demo"
dimension = 1
modes = 2
horizon = 1.0
alpha = {cost}
x0 = [0.0]
psi = ["x1", "0 - x1"]
[diffusion]
drift = ["0"]
volatility = [["{sigma}"]]
[switching_cost]
"1->2" = "{cost}"
"2->1" = "{cost}"
[growth]
gamma = 1.0
[validation]
box = [[-3.0, 3.0]]
"#
    );
    SwitchingProblem::from_toml_str(&text).map_err(err)
}

fn err(e: switchbox::Error) -> String {
    e.to_string()
}

fn js<T>(r: DemoResult<T>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[derive(Serialize)]
struct Curves {
    x: Vec<f64>,
    /// Value of each mode at t = 0 over `x`.
    values: [Vec<f64>; 2],
    t: Vec<f64>,
    /// Edge of each mode's switching region over `t` (null where it never switches).
    boundaries: [Vec<Option<f64>>; 2],
    v0: [f64; 2],
}

/// FD value curves at t = 0 and switching boundaries over time.
#[wasm_bindgen]
pub fn value_curves(cost: f64, sigma: f64) -> Result<String, JsError> {
    js(curves_json(cost, sigma))
}

pub fn curves_json(cost: f64, sigma: f64) -> DemoResult<String> {
    let p = problem(cost, sigma)?;
    let grid = Grid::for_problem(&p, &[160], 320).map_err(err)?;
    let v = solve_fd(&p, &grid, &FdOptions::default()).map_err(err)?;
    let policy = extract_policy(&v, &p, DEFAULT_TIE_TOL).map_err(err)?;
    let n = grid.n_nodes();
    let levels: Vec<usize> = (0..grid.n_time).step_by(4).collect();
    // Mode 1 switches below its boundary, mode 2 above.
    let lower_edge = |level: usize| {
        (0..n)
            .find(|&k| policy.action(1, level, k) != switchbox::strategy::Action::Continue)
            .map(|k| grid.coord(0, k))
    };
    let curves = Curves {
        x: (0..n).map(|k| grid.coord(0, k)).collect(),
        values: [v.level(0, 0).to_vec(), v.level(1, 0).to_vec()],
        t: levels.iter().map(|&l| grid.time(l)).collect(),
        boundaries: [
            levels.iter().map(|&l| policy.switch_boundary(0, l)).collect(),
            levels.iter().map(|&l| lower_edge(l)).collect(),
        ],
        v0: [v.interpolate(0, 0.0, &p.x0), v.interpolate(1, 0.0, &p.x0)],
    };
    Ok(serde_json::to_string(&curves).expect("curves serialize"))
}

#[derive(Serialize)]
struct SimPath {
    x: Vec<f64>,
    /// One-based mode held over each step.
    mode: Vec<usize>,
    profit: f64,
}

#[derive(Serialize)]
struct Simulation {
    t: Vec<f64>,
    paths: Vec<SimPath>,
    mean: f64,
    standard_error: f64,
    n_paths: usize,
}

/// Runs the optimal policy on `n_paths` paths; returns the first `shown` of them.
#[wasm_bindgen]
pub fn simulate_policy(cost: f64, sigma: f64, n_paths: usize, shown: usize, seed: u64) -> Result<String, JsError> {
    js(simulation_json(cost, sigma, n_paths, shown, seed))
}

pub fn simulation_json(cost: f64, sigma: f64, n_paths: usize, shown: usize, seed: u64) -> DemoResult<String> {
    let p = problem(cost, sigma)?;
    let grid = Grid::for_problem(&p, &[160], 320).map_err(err)?;
    let v = solve_fd(&p, &grid, &FdOptions::default()).map_err(err)?;
    let policy = extract_policy(&v, &p, DEFAULT_TIE_TOL).map_err(err)?;
    let steps = 80;
    let e = simulate(&p, 0.0, &p.x0, n_paths.max(2), steps, seed).map_err(err)?;
    let run = simulate_strategy(&policy, &e, &p, 0, None).map_err(err)?;
    let paths = run
        .traces
        .iter()
        .take(shown)
        .map(|tr| {
            let mut mode = vec![1; steps];
            for s in &tr.switches {
                mode[s.step..].iter_mut().for_each(|m| *m = s.to + 1);
            }
            SimPath {
                x: (0..=steps).map(|k| e.state(tr.path, k)[0]).collect(),
                mode,
                profit: tr.profit,
            }
        })
        .collect();
    let sim = Simulation {
        t: e.times().to_vec(),
        paths,
        mean: run.summary.mean,
        standard_error: run.summary.standard_error,
        n_paths: e.n_paths,
    };
    Ok(serde_json::to_string(&sim).expect("simulation serializes"))
}

/// Trinomial-chain value of mode 1 at (0, 0).
#[wasm_bindgen]
pub fn oracle_value(cost: f64, sigma: f64, levels: usize) -> Result<f64, JsError> {
    js(oracle_root(cost, sigma, levels))
}

pub fn oracle_root(cost: f64, sigma: f64, levels: usize) -> DemoResult<f64> {
    let p = problem(cost, sigma)?;
    let chain = build_chain(&p, levels.clamp(10, 4000)).map_err(err)?;
    Ok(solve_dp(&chain, &p).map_err(err)?.root(0))
}
