mod common;

use switchbox::fd_solver::{residuals, solve_fd, FdOptions, Grid};
use switchbox::fixtures;
use switchbox::verify::*;

fn small(p: &switchbox::SwitchingProblem, th: &Thresholds) -> CompareConfig {
    CompareConfig {
        paths: 4_000,
        path_steps: 50,
        strategy_paths: 10_000,
        oracle_levels: 500,
        residual: false,
        ..CompareConfig::for_problem(p, th)
    }
}

#[test]
fn zero_problem_passes_with_zero_measurements() {
    let th = Thresholds::builtin();
    let p = common::two_mode("0", "1", ["0", "0"], "0.1");
    let cfg = CompareConfig {
        residual: true,
        ..small(&p, &th)
    };
    let cmp = compare(&p, &cfg, &th, serde_json::Value::Null).unwrap();
    assert!(cmp.report.overall_pass, "{:#?}", cmp.report.failures());
    for c in &cmp.report.checks {
        assert_eq!(c.status, Status::Pass, "{c:?}");
        // These count iterations and box exits, not deviations.
        if !["picard_converged", "truncated_paths"].contains(&c.name.as_str()) {
            assert!(c.measured.unwrap().abs() < 1e-12, "{c:?}");
        }
    }
}

#[test]
fn injected_defect_fails_complementarity_and_names_the_node() {
    let th = Thresholds::builtin();
    let p = fixtures::benchmark();
    let mut v = solve_fd(&p, &Grid::for_problem(&p, &[80], 400).unwrap(), &FdOptions::default()).unwrap();
    let node = v.grid.nearest_node(&[0.3]).unwrap();
    v.set(1, 137, node, v.value(1, 137, node) + 0.1);
    let r = residuals(&v, &p, th.fd.slack_tol).unwrap();
    let ev = Evidence {
        fd: Some(&v),
        residual: Some((&r, &r)),
        ..Evidence::default()
    };
    let checks = cross_check(&p, &ev, &th);
    let c = checks.iter().find(|c| c.name == "complementarity_residual").unwrap();
    assert_eq!(c.status, Status::Fail);
    assert!(c.provenance.contains(&format!("mode 2, level 13")) && c.provenance.contains(&format!("node {node}")), "{}", c.provenance);
    // Missing solvers skip rather than fail.
    let mc = checks.iter().find(|c| c.name == "picard_monotone").unwrap();
    assert_eq!(mc.status, Status::Skipped);
}

#[test]
fn report_json_has_stable_fields() {
    let th = Thresholds::builtin();
    let p = fixtures::deterministic();
    let cmp = compare(&p, &small(&p, &th), &th, serde_json::json!({"seed": 7})).unwrap();
    let v: serde_json::Value = serde_json::from_str(&cmp.report.to_json()).unwrap();
    for key in ["schema", "problem", "run", "code_version", "values", "checks", "overall_pass"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    for key in ["name", "status", "measured", "threshold", "provenance"] {
        assert!(v["checks"][0].get(key).is_some(), "{key}");
    }
    assert_eq!(v["problem"]["hash"], p.hash());
    assert!(cmp.report.overall_pass, "{:#?}", cmp.report.failures());
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let th = Thresholds::builtin();
    let p = fixtures::benchmark();
    let c = determinism_check(&p, &small(&p, &th), &th, &[1, 2, 3]).unwrap();
    assert_eq!(c.status, Status::Pass, "{c:?}");
}
