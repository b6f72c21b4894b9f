mod common;

use switchbox::fd_solver::{solve_fd, FdOptions, Grid, ValueField};
use switchbox::fixtures;
use switchbox::sde_sim::simulate;
use switchbox::strategy::*;
use switchbox::tree_oracle::{build_chain, solve_dp};
use switchbox::SwitchingProblem;

fn solved(p: &SwitchingProblem, n_space: usize, n_time: usize) -> (ValueField, PolicyField) {
    let g = Grid::for_problem(p, &[n_space], n_time).unwrap();
    let v = solve_fd(p, &g, &FdOptions::default()).unwrap();
    let pol = extract_policy(&v, p, DEFAULT_TIE_TOL).unwrap();
    (v, pol)
}

#[test]
fn identical_modes_never_switch() {
    let p = fixtures::identical_modes();
    let (_, pol) = solved(&p, 100, 100);
    let e = simulate(&p, 0.0, &p.x0, 2_000, 50, 2).unwrap();
    let run = simulate_strategy(&pol, &e, &p, p.initial_mode, None).unwrap();
    assert!(run.traces.iter().all(|t| t.switches.is_empty()));
    assert!((run.summary.mean - 1.0).abs() < 1e-12);
}

#[test]
fn deterministic_switches_once_at_start() {
    let p = fixtures::deterministic();
    let (_, pol) = solved(&p, 100, 400);
    let e = simulate(&p, 0.0, &p.x0, 10, 100, 2).unwrap();
    let run = simulate_strategy(&pol, &e, &p, p.initial_mode, None).unwrap();
    for t in &run.traces {
        assert_eq!(t.switches.len(), 1);
        let s = t.switches[0];
        assert_eq!((s.tau, s.from, s.to), (0.0, 1, 0));
        assert!((t.profit - 0.9).abs() < 1e-9);
    }
    let mut csv = Vec::new();
    write_traces_csv(&run, p.horizon, &mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "path,n,tau,from_mode,to_mode,profit_to_date");
    assert!(lines[1].starts_with("0,1,0,2,1,"));
    assert!(lines[2].starts_with("0,0,1,1,1,"));
    assert_eq!(lines.len(), 1 + 2 * 10);
}

#[test]
fn benchmark_strategy_earns_the_oracle_value() {
    let p = fixtures::benchmark();
    let golden = common::golden_benchmark();
    let (v, pol) = solved(&p, 200, 400);
    let e = simulate(&p, 0.0, &p.x0, 20_000, 100, 11).unwrap();
    let run = simulate_strategy(&pol, &e, &p, 0, Some(v.interpolate(0, 0.0, &p.x0))).unwrap();
    let s = &run.summary;
    assert!((s.mean - golden.roots[0]).abs() <= 2.0 * s.standard_error + 1e-2, "{s:?}");
    assert!(profit_identity_gap(&run, &e, &p).unwrap() < 1e-9);
    assert!(churn_paths(&run.traces).is_empty());
    let tail = switch_statistics(&run.traces, p.horizon).unwrap();
    assert!(tail.bounded, "{tail:?}");

    let random = random_strategies(&e, &p, 100, 3).unwrap();
    assert!(random.best_mean <= s.mean + 2.0 * s.standard_error);
}

#[test]
fn prohibitive_costs_stop_switching() {
    let p = fixtures::benchmark_scaled_costs(100.0);
    let (_, pol) = solved(&p, 200, 400);
    let e = simulate(&p, 0.0, &p.x0, 10_000, 100, 4).unwrap();
    let run = simulate_strategy(&pol, &e, &p, 0, None).unwrap();
    let tail = switch_statistics(&run.traces, p.horizon).unwrap();
    assert!(tail.rows.iter().all(|r| r.p_hat == 0.0));
}

#[test]
fn dynamic_programming_principle_holds() {
    let p = fixtures::benchmark();
    let (v, pol) = solved(&p, 200, 400);
    let e = simulate(&p, 0.0, &p.x0, 20_000, 100, 12).unwrap();
    for n in [1, 3] {
        let r = check_dpp_with(&v, &p, &pol, &e, n).unwrap();
        assert!((r.estimate - r.value).abs() <= 2.0 * r.standard_error + 1e-2, "{r:?}");
    }
}

#[test]
fn zero_payoff_dpp_is_zero() {
    let p = common::two_mode("0", "1", ["0", "0"], "0.1");
    let g = Grid::for_problem(&p, &[60], 60).unwrap();
    let v = solve_fd(&p, &g, &FdOptions::default()).unwrap();
    let e = simulate(&p, 0.0, &p.x0, 500, 30, 9).unwrap();
    let r = check_dpp(&v, &p, &e, 1).unwrap();
    assert_eq!((r.value, r.estimate, r.reached), (0.0, 0.0, 0.0));
}

#[test]
fn switch_boundary_matches_oracle() {
    let p = fixtures::benchmark();
    let (v, pol) = solved(&p, 200, 400);
    let oracle = solve_dp(&build_chain(&p, 2000).unwrap(), &p).unwrap();
    let dx = v.grid.dx(0);
    // the lattice only fans out over the box after a few hundred levels
    for (fd_level, tree_level) in [(100, 500), (200, 1000), (300, 1500)] {
        let a = pol.switch_boundary(0, fd_level).unwrap();
        let b = oracle.switch_boundary(0, tree_level).unwrap();
        assert!((a - b).abs() <= 3.0 * dx, "level {fd_level}: fd {a} tree {b}");
        // mode 2 switches above the mirrored boundary
        let lowest = (0..v.grid.n_nodes())
            .find(|&k| pol.action(1, fd_level, k) != Action::Continue)
            .map(|k| v.grid.coord(0, k))
            .unwrap();
        assert!((lowest + a).abs() <= 2.0 * dx);
    }
}

#[test]
fn tail_statistics_need_enough_traces() {
    let p = fixtures::benchmark();
    let (_, pol) = solved(&p, 100, 100);
    let e = simulate(&p, 0.0, &p.x0, 100, 20, 1).unwrap();
    let run = simulate_strategy(&pol, &e, &p, 0, None).unwrap();
    assert!(switch_statistics(&run.traces, p.horizon).is_err());
}

#[test]
fn benchmark_boundary_moves_monotonically_in_time() {
    let p = fixtures::benchmark();
    let (v, pol) = solved(&p, 200, 400);
    let dx = v.grid.dx(0);
    let bounds: Vec<f64> = (0..v.grid.n_time).filter_map(|l| pol.switch_boundary(0, l)).collect();
    assert!(bounds.len() > 300);
    // Switching pays less as the horizon nears, so the region shrinks.
    for w in bounds.windows(2) {
        assert!(w[1] <= w[0] + dx, "{w:?}");
    }
    assert!(bounds[0] > bounds[bounds.len() - 1]);
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn traces_are_well_formed(cost in 0.02f64..0.5, drift in -0.5f64..0.5, seed in 0u64..1000) {
            let p = common::two_mode(&format!("{drift}"), "1", ["x1", "0 - x1"], &format!("{cost}"));
            let (_, pol) = solved(&p, 80, 100);
            let e = simulate(&p, 0.0, &p.x0, 300, 50, seed).unwrap();
            let run = match simulate_strategy(&pol, &e, &p, 0, None) {
                Ok(r) => r,
                Err(switchbox::Error::TooManyTruncated { .. }) => return Ok(()),
                Err(err) => panic!("{err}"),
            };
            prop_assert!(profit_identity_gap(&run, &e, &p).unwrap() == 0.0);
            prop_assert!(churn_paths(&run.traces).is_empty());
            for t in &run.traces {
                let mut mode = 0;
                let mut last = 0.0;
                for (k, s) in t.switches.iter().enumerate() {
                    prop_assert_eq!(s.n, k + 1);
                    prop_assert!(s.tau >= last && s.tau < p.horizon);
                    prop_assert!(s.from == mode && s.to != mode);
                    mode = s.to;
                    last = s.tau;
                }
                prop_assert_eq!(t.final_mode, mode);
            }
        }
    }
}
