mod common;

use switchbox::sde_sim::*;
use switchbox::SwitchingProblem;

fn gbm(mu: f64, sigma: f64) -> SwitchingProblem {
    SwitchingProblem::from_toml_str(&format!(
        r#"
name = "gbm"
dimension = 1
modes = 2
horizon = 1.0
alpha = 0.1
x0 = [1.0]
psi = ["x1", "0"]
[diffusion]
drift = ["{mu}*x1"]
volatility = [["{sigma}*x1"]]
[switching_cost]
"1->2" = "0.1"
"2->1" = "0.1"
[growth]
gamma = 1.0
[validation]
box = [[0.1, 4.0]]
"#
    ))
    .unwrap()
}

#[test]
fn brownian_terminal_law() {
    let p = common::two_mode("0", "1", ["0", "0"], "0.1");
    let n = 100_000;
    let e = simulate(&p, 0.0, &[0.0], n, 10, 11).unwrap();
    let xs: Vec<f64> = (0..n).map(|i| e.state(i, 10)[0]).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "{mean}");
    assert!((var - 1.0).abs() < 0.05, "{var}");
}

#[test]
fn constant_ensemble_moment_is_exact() {
    let p = common::two_mode("0", "0", ["0", "0"], "0.1");
    let e = simulate(&p, 0.0, &[1.0], 50, 20, 3).unwrap();
    let m = moment_check(&e, 2).unwrap();
    assert_eq!(m.estimate, 1.0);
    assert_eq!(m.standard_error, 0.0);
    assert!(moment_check(&e, 3).is_err());
}

#[test]
fn sup_moment_matches_dense_reference() {
    let p = common::two_mode("0", "1", ["0", "0"], "0.1");
    let coarse = moment_check(&simulate(&p, 0.0, &[0.0], 20_000, 100, 5).unwrap(), 2).unwrap();
    let dense = moment_check(&simulate(&p, 0.0, &[0.0], 20_000, 1000, 6).unwrap(), 2).unwrap();
    let rel = (coarse.estimate - dense.estimate).abs() / dense.estimate;
    assert!(rel < 0.10, "coarse {} dense {}", coarse.estimate, dense.estimate);
    // Doob: E sup |B|^2 <= 4 E B_1^2.
    assert!(dense.estimate <= 4.0 + 3.0 * dense.standard_error);
    for q in [4, 8] {
        let m = moment_check(&simulate(&p, 0.0, &[0.0], 5_000, 100, 5).unwrap(), q).unwrap();
        assert!(m.implied_constant.is_finite() && m.implied_constant > 0.0);
    }
}

#[test]
fn euler_strong_error_halves_like_root_two() {
    let (mu, sigma) = (0.05, 0.4);
    let p = gbm(mu, sigma);
    let n_paths = 20_000;
    let strong = |n_steps: usize, seed: u64| -> f64 {
        let e = simulate(&p, 0.0, &[1.0], n_paths, n_steps, seed).unwrap();
        let dt = 1.0 / n_steps as f64;
        let mut total = 0.0;
        for path in 0..n_paths {
            let w: f64 = (0..n_steps).map(|s| standard_normals(seed, path, s, 1)[0]).sum::<f64>() * dt.sqrt();
            let exact = ((mu - 0.5 * sigma * sigma) + sigma * w).exp();
            total += (e.state(path, n_steps)[0] - exact).abs();
        }
        total / n_paths as f64
    };
    let ratio = strong(32, 1) / strong(64, 2);
    assert!((ratio - 2f64.sqrt()).abs() < 0.15, "{ratio}");
}

#[test]
fn continuity_modulus_grows_with_distance() {
    let p = common::two_mode("0", "1", ["0", "0"], "0.1");
    let base = simulate(&p, 0.0, &[0.0], 2_000, 50, 9).unwrap();
    let near = simulate(&p, 0.0, &[0.1], 2_000, 50, 9).unwrap();
    let far = simulate(&p, 0.0, &[0.5], 2_000, 50, 9).unwrap();
    let a = continuity_check(&base, &near, 2).unwrap();
    let b = continuity_check(&base, &far, 2).unwrap();
    // Same noise and additive volatility: the gap is the initial offset.
    assert!((a.estimate - 0.01).abs() < 1e-12 && (b.estimate - 0.25).abs() < 1e-12);
    assert!((a.distance - 0.1).abs() < 1e-15);
}
