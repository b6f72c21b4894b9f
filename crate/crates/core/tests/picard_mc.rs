mod common;

use switchbox::fixtures;
use switchbox::picard_mc::*;
use switchbox::sde_sim::simulate;
use switchbox::tree_oracle::{build_chain, solve_dp};
use switchbox::SwitchingProblem;

fn opts() -> McOptions {
    McOptions::default()
}

#[test]
fn positive_constant_payoff_never_stops() {
    let p = fixtures::identical_modes();
    let e = simulate(&p, 0.0, &p.x0, 2_000, 50, 1).unwrap();
    let s0 = snell_stage0(&e, &p, &opts()).unwrap();
    for i in 0..2 {
        assert!((s0.mean[i] - 1.0).abs() <= 2.0 * s0.standard_error[i] + 1e-12);
    }
    let s1 = picard_step(&s0, &e, &p, &opts()).unwrap();
    assert!((s1.mean[0] - s0.mean[0]).abs() <= 2.0 * s0.standard_error[0] + 1e-12);
    let sol = solve_mc(&p, &e, 1e-3, 10, &opts()).unwrap();
    assert!(sol.converged);
    assert_eq!(sol.last.n, 1);
}

#[test]
fn stage0_matches_single_mode_stopping_oracle() {
    // Quitting is a switch into a zero-profit mode that can never be left.
    let p = SwitchingProblem::from_toml_str(
        r#"
name = "stopping"
dimension = 1
modes = 2
horizon = 1.0
alpha = 1e-9
x0 = [0.0]
psi = ["x1", "0"]
[diffusion]
drift = ["0"]
volatility = [["1"]]
[switching_cost]
"1->2" = "1e-9"
"2->1" = "1e6"
[growth]
gamma = 1.0
[validation]
box = [[-4.0, 4.0]]
"#,
    )
    .unwrap();
    let oracle = solve_dp(&build_chain(&p, 2000).unwrap(), &p).unwrap().root(0) + 1e-9;
    let e = simulate(&p, 0.0, &p.x0, 20_000, 100, 3).unwrap();
    let s0 = snell_stage0(&e, &p, &opts()).unwrap();
    let d = (s0.mean[0] - oracle).abs();
    assert!(d <= 2.0 * s0.standard_error[0] + 1e-2, "mc {} oracle {oracle}", s0.mean[0]);
}

#[test]
fn benchmark_iterates_are_monotone_and_match_oracle() {
    let p = fixtures::benchmark();
    let golden = common::golden_benchmark();
    let e = simulate(&p, 0.0, &p.x0, 20_000, 100, 5).unwrap();
    let sol = solve_mc(&p, &e, 1e-3, 20, &opts()).unwrap();
    assert!(sol.converged && sol.last.n <= 20);
    for w in sol.history.windows(2) {
        for i in 0..2 {
            assert!(w[1].mean[i] >= w[0].mean[i] - 2.0 * w[0].standard_error[i], "{:?}", sol.history);
        }
    }
    let (bound, bound_se) = profit_bound(&e, &p).unwrap();
    for i in 0..2 {
        let se = sol.last.standard_error[i];
        assert!((sol.last.mean[i] - golden.roots[i]).abs() <= 2.0 * se + 1e-2);
        assert!(sol.last.mean[i] <= bound + 2.0 * bound_se);
    }
}

#[test]
fn prohibitive_costs_disable_switching() {
    let p = fixtures::benchmark_scaled_costs(100.0);
    let e = simulate(&p, 0.0, &p.x0, 20_000, 50, 2).unwrap();
    let s0 = snell_stage0(&e, &p, &opts()).unwrap();
    let s1 = picard_step(&s0, &e, &p, &opts()).unwrap();
    let s2 = picard_step(&s1, &e, &p, &opts()).unwrap();
    // With switching ruled out the stopping rule never fires, so the estimate
    // is the plain running profit along each path.
    let times = e.times();
    let plain: Vec<f64> = (0..e.n_paths)
        .map(|path| (0..e.n_steps).map(|s| e.state(path, s)[0] * (times[s + 1] - times[s])).sum())
        .collect();
    for (a, b) in s1.cash_flows(0).iter().zip(&plain) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((s2.mean[0] - s1.mean[0]).abs() < 1e-12);
    assert!(s1.mean[0].abs() <= 2.0 * s1.standard_error[0] + 1e-12);
    assert!(s0.mean[0] > 0.15);
}

#[test]
fn per_iterate_trace_csv_has_one_row_per_mode() {
    let p = fixtures::deterministic();
    let e = simulate(&p, 0.0, &p.x0, 10, 20, 1).unwrap();
    let sol = solve_mc(&p, &e, 1e-3, 5, &opts()).unwrap();
    assert!((sol.last.mean[0] - 1.0).abs() < 1e-2 && (sol.last.mean[1] - 0.9).abs() < 1e-2);
    let mut buf = Vec::new();
    sol.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "iteration,mode,mean,standard_error");
    assert_eq!(text.lines().count(), 1 + 2 * sol.history.len());
}

#[test]
fn same_seed_reproduces_bitwise() {
    let p = fixtures::gbm_power_plant();
    let run = || {
        let e = simulate(&p, 0.0, &p.x0, 3_000, 40, 11).unwrap();
        solve_mc(&p, &e, 1e-3, 10, &opts()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.last.fallbacks, b.last.fallbacks);
}
