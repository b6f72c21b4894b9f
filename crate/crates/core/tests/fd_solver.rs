mod common;

use proptest::prelude::*;
use switchbox::fd_solver::*;
use switchbox::fixtures;
use switchbox::SwitchingProblem;

fn solve(p: &SwitchingProblem, nx: usize, nt: usize) -> ValueField {
    let g = Grid::for_problem(p, &[nx], nt).unwrap();
    solve_fd(p, &g, &FdOptions::default()).unwrap()
}

#[test]
fn deterministic_problem_matches_hand_values() {
    let p = fixtures::deterministic();
    let v = solve(&p, 201, 400);
    assert!((v.interpolate(0, 0.0, &[1.0]) - 1.0).abs() < 1e-2);
    assert!((v.interpolate(1, 0.0, &[1.0]) - 0.9).abs() < 1e-2);
}

#[test]
fn benchmark_agrees_with_golden_oracle() {
    let p = fixtures::benchmark();
    let golden = common::golden_benchmark();
    assert_eq!(golden.problem_hash, p.hash());
    let v = solve(&p, 200, 400);
    for i in 0..2 {
        let d = (v.interpolate(i, 0.0, &[0.0]) - golden.roots[i]).abs();
        assert!(d <= 1e-2, "mode {i}: {d}");
    }
    assert!(obstacle_violation(&v, &p).unwrap() <= 1e-10);
}

#[test]
fn benchmark_is_mirror_symmetric() {
    let p = fixtures::benchmark();
    let v = solve(&p, 200, 400);
    let g = &v.grid;
    let n = g.n_nodes();
    let mut worst = 0.0f64;
    for level in 0..=g.n_time {
        for node in 0..n {
            assert!((g.coords(node)[0] + g.coords(n - 1 - node)[0]).abs() < 1e-12);
            worst = worst.max((v.value(0, level, node) - v.value(1, level, n - 1 - node)).abs());
        }
    }
    assert!(worst <= 1e-10, "{worst}");
}

#[test]
fn explicit_and_implicit_agree_on_stable_grid() {
    let p = fixtures::benchmark();
    let g = Grid::for_problem(&p, &[81], 400).unwrap();
    let bound = g.stability_bound(&p, 0.0).unwrap();
    assert!(g.dt() <= bound);
    let imp = solve_fd(&p, &g, &FdOptions::default()).unwrap();
    let exp = solve_fd(&p, &g, &FdOptions { scheme: FdScheme::Explicit, ..Default::default() }).unwrap();
    let tol = 10.0 * g.dt().max(g.dx(0) * g.dx(0));
    let diff = imp.max_abs_diff(&exp);
    assert!(diff <= tol, "{diff} > {tol}");
}

#[test]
fn mode_order_does_not_matter() {
    let p = fixtures::gbm_power_plant();
    let g = Grid::for_problem(&p, &[120], 300).unwrap();
    let asc = solve_fd(&p, &g, &FdOptions::default()).unwrap();
    let desc = solve_fd(&p, &g, &FdOptions { mode_order: ModeOrder::Descending, ..Default::default() }).unwrap();
    let diff = asc.max_abs_diff(&desc);
    assert!(diff <= 1e-9, "{diff}");
}

#[test]
fn refinement_differences_shrink() {
    let p = fixtures::benchmark();
    let v: Vec<f64> = [(50, 100), (100, 400), (200, 1600)]
        .iter()
        .map(|&(nx, nt)| solve(&p, nx, nt).interpolate(0, 0.0, &[0.0]))
        .collect();
    assert!((v[2] - v[1]).abs() < (v[1] - v[0]).abs(), "{v:?}");
}

#[test]
fn injected_defect_is_located() {
    let p = fixtures::benchmark();
    let mut v = solve(&p, 80, 400);
    let node = v.grid.nearest_node(&[0.3]).unwrap();
    let level = 137;
    let before = v.value(0, level, node);
    v.set(0, level, node, before + 0.1);
    let r = residuals(&v, &p, 1e-8).unwrap();
    let loc = r.location.unwrap();
    assert_eq!((loc.mode, loc.node), (0, node));
    assert!(loc.level == level || loc.level + 1 == level);
    assert!(r.max_abs > 1.0);
}

#[test]
fn residual_on_benchmark_shrinks_under_parabolic_refinement() {
    let p = fixtures::benchmark();
    let coarse = residuals(&solve(&p, 80, 2000), &p, 1e-8).unwrap();
    let fine = residuals(&solve(&p, 160, 16000), &p, 1e-8).unwrap();
    assert!(coarse.max_abs <= 5e-2, "{}", coarse.max_abs);
    assert!(fine.max_abs < coarse.max_abs);
    assert!(coarse.continuation_nodes > 0 && coarse.switching_nodes > 0);
}

#[test]
fn two_dimensional_solve_reduces_to_one_dimension() {
    let p1 = fixtures::benchmark();
    let p2 = SwitchingProblem::from_toml_str(
        r#"
name = "bench2d"
dimension = 2
brownian_dimension = 2
modes = 2
horizon = 1.0
alpha = 0.1
x0 = [0.0, 0.0]
psi = ["x1", "0 - x1"]
[diffusion]
drift = ["0", "0"]
volatility = [["1", "0"], ["0.5", "0.8660254037844386"]]
[switching_cost]
"1->2" = "0.1"
"2->1" = "0.1"
[growth]
gamma = 1.0
[validation]
box = [[-4.0, 4.0], [-4.0, 4.0]]
"#,
    )
    .unwrap();
    let g2 = Grid::for_problem(&p2, &[61, 21], 120).unwrap();
    let cov = p2.diffusion.covariance_at(0.0, &[0.0, 0.0]).unwrap();
    let (l0, l1) = switchbox::linalg::sym2_eigenvalues(cov[0], cov[1], cov[3]);
    assert!((l0 - 0.5).abs() < 1e-12 && (l1 - 1.5).abs() < 1e-12);
    let v2 = solve_fd(&p2, &g2, &FdOptions::default()).unwrap();
    let g1 = Grid::new(vec![g2.bounds[0]], vec![61], 120, 1.0).unwrap();
    let v1 = solve_fd(&p1, &g1, &FdOptions::default()).unwrap();
    let mut worst = 0.0f64;
    for node in 0..g2.n_nodes() {
        let idx = g2.multi_index(node);
        worst = worst.max((v2.value(0, 0, node) - v1.value(0, 0, idx[0])).abs());
    }
    assert!(worst < 1e-9, "{worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn raising_a_payoff_never_lowers_any_value(bump in 0.0f64..0.5, slope in 0.0f64..1.0, mode in 0usize..2) {
        let base = common::two_mode("0", "1", ["x1", "0 - x1"], "0.1");
        let mut psi = ["x1".to_string(), "0 - x1".to_string()];
        psi[mode] = format!("{} + {bump} + {slope}*abs(x1)", psi[mode]);
        let raised = common::two_mode("0", "1", [&psi[0], &psi[1]], "0.1");
        let g = Grid::for_problem(&base, &[41], 40).unwrap();
        let a = solve_fd(&base, &g, &FdOptions::default()).unwrap();
        let b = solve_fd(&raised, &g, &FdOptions::default()).unwrap();
        // Face values are linear extrapolations and carry no comparison guarantee.
        let interior = g.interior_nodes();
        for m in 0..2 {
            for level in 0..=g.n_time {
                for &n in &interior {
                    prop_assert!(b.value(m, level, n) >= a.value(m, level, n) - 1e-12);
                }
            }
        }
    }
}
