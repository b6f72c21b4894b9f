//! Sample-based checks of the standing assumptions on a problem's coefficients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::problem::SwitchingProblem;
use crate::error::{Error, Result};
use crate::linalg::min_eigenvalue_sym;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    CostFloor,
    CoefficientGrowth,
    DiffusionGrowth,
    NotPositiveSemidefinite,
    DomainError,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub t: f64,
    pub x: Vec<f64>,
    pub detail: String,
    pub measured: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub seed: u64,
    /// Smallest sampled g_ij over all i != j.
    pub min_cost: f64,
    /// Largest sampled (|psi_i| + |g_ij|) / (1 + |x|^gamma).
    pub implied_growth_constant: f64,
    /// Largest sampled (|b| + |sigma|) / (1 + |x|).
    pub implied_diffusion_constant: f64,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn radical_inverse(mut n: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while n > 0 {
        r += (n % base) as f64 * f;
        n /= base;
        f *= inv;
    }
    r
}

const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// Randomly shifted Halton points in `[0,1)^dim`.
fn halton_points(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>()).collect();
    (0..count)
        .map(|n| {
            (0..dim)
                .map(|d| {
                    let base = PRIMES[d % PRIMES.len()] + 40 * (d / PRIMES.len()) as u64;
                    (radical_inverse(n as u64 + 1, base) + shift[d]).fract()
                })
                .collect()
        })
        .collect()
}

pub fn validate_problem(p: &SwitchingProblem, samples: usize, seed: u64) -> Result<ValidationReport> {
    p.check_structure()?;
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be at least 1".into()));
    }
    let k = p.dim();
    let d = p.diffusion.brownian_dim;
    let mut report = ValidationReport {
        samples,
        seed,
        min_cost: f64::INFINITY,
        implied_growth_constant: 0.0,
        implied_diffusion_constant: 0.0,
        violations: Vec::new(),
    };
    let mut sig = vec![0.0; k * d];
    let mut drift = vec![0.0; k];
    for u in halton_points(samples, 1 + k, seed) {
        let t = u[0] * p.horizon;
        let x: Vec<f64> = (0..k)
            .map(|i| {
                let (lo, hi) = p.validation_box[i];
                lo + u[i + 1] * (hi - lo)
            })
            .collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut push = |kind, detail: String, measured, bound| {
            report.violations.push(Violation {
                kind,
                t,
                x: x.clone(),
                detail,
                measured,
                bound,
            })
        };

        let mut psi = Vec::with_capacity(p.modes);
        for i in 0..p.modes {
            match p.psi[i].eval(t, &x) {
                Ok(v) => psi.push(v),
                Err(e) => {
                    push(ViolationKind::DomainError, format!("psi_{}: {e}", i + 1), f64::NAN, f64::NAN);
                    psi.push(f64::NAN);
                }
            }
        }
        let growth_scale = 1.0 + norm.powf(p.growth_gamma);
        for i in 0..p.modes {
            for j in (0..p.modes).filter(|&j| j != i) {
                let g = match p.cost[i][j].as_ref().unwrap().eval(t, &x) {
                    Ok(g) => g,
                    Err(e) => {
                        push(
                            ViolationKind::DomainError,
                            format!("g_{}{}: {e}", i + 1, j + 1),
                            f64::NAN,
                            f64::NAN,
                        );
                        continue;
                    }
                };
                report.min_cost = report.min_cost.min(g);
                if g < p.alpha {
                    push(
                        ViolationKind::CostFloor,
                        format!("g_{}{} below alpha", i + 1, j + 1),
                        g,
                        p.alpha,
                    );
                }
                if psi[i].is_nan() {
                    continue;
                }
                let lhs = psi[i].abs() + g.abs();
                report.implied_growth_constant = report.implied_growth_constant.max(lhs / growth_scale);
                if let Some(c) = p.growth_constant {
                    if lhs > c * growth_scale {
                        push(
                            ViolationKind::CoefficientGrowth,
                            format!("|psi_{}| + |g_{}{}| exceeds C(1+|x|^gamma)", i + 1, i + 1, j + 1),
                            lhs,
                            c * growth_scale,
                        );
                    }
                }
            }
        }

        let coeffs = p
            .diffusion
            .drift_at(t, &x, &mut drift)
            .and_then(|_| p.diffusion.vol_at(t, &x, &mut sig));
        if let Err(e) = coeffs {
            push(ViolationKind::DomainError, format!("diffusion: {e}"), f64::NAN, f64::NAN);
            continue;
        }
        let lhs = drift.iter().map(|v| v * v).sum::<f64>().sqrt()
            + sig.iter().map(|v| v * v).sum::<f64>().sqrt();
        report.implied_diffusion_constant = report.implied_diffusion_constant.max(lhs / (1.0 + norm));
        if let Some(c) = p.diffusion.growth_constant {
            if lhs > c * (1.0 + norm) {
                push(
                    ViolationKind::DiffusionGrowth,
                    "|b| + |sigma| exceeds C(1+|x|)".into(),
                    lhs,
                    c * (1.0 + norm),
                );
            }
        }
        let mut cov = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                cov[i * k + j] = (0..d).map(|c| sig[i * d + c] * sig[j * d + c]).sum();
            }
        }
        let scale = cov.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let lam = min_eigenvalue_sym(&cov, k);
        if lam < -1e-12 * scale.max(1.0) {
            push(
                ViolationKind::NotPositiveSemidefinite,
                "sigma sigma^T has a negative eigenvalue".into(),
                lam,
                0.0,
            );
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::problem::SwitchingProblem;

    fn two_mode(cost12: &str) -> SwitchingProblem {
        SwitchingProblem::from_toml_str(&format!(
            r#"
name = "v"
dimension = 1
modes = 2
horizon = 1.0
alpha = 0.5
x0 = [0.0]
psi = ["x1", "0 - x1"]
[diffusion]
drift = [0]
volatility = [[1]]
growth_constant = 2.0
[switching_cost]
"1->2" = "{cost12}"
"2->1" = 0.5
[growth]
gamma = 1.0
constant = 2.0
[validation]
box = [[-3.0, 3.0]]
"#
        ))
        .unwrap()
    }

    #[test]
    fn constant_cost_at_floor_has_no_violations() {
        let r = validate_problem(&two_mode("0.5"), 500, 1).unwrap();
        assert!(r.ok(), "{:?}", r.violations.first());
        assert_eq!(r.min_cost, 0.5);
    }

    #[test]
    fn decaying_cost_violates_floor_for_positive_time() {
        let r = validate_problem(&two_mode("0.5 - t"), 200, 3).unwrap();
        let floor: Vec<_> = r
            .violations
            .iter()
            .filter(|v| v.kind == ViolationKind::CostFloor)
            .collect();
        assert!(!floor.is_empty());
        assert!(floor.iter().all(|v| v.t > 0.0 && v.measured < 0.5));
    }

    #[test]
    fn growth_violation_reports_witness() {
        let mut p = two_mode("0.5");
        p.growth_constant = Some(0.6);
        let r = validate_problem(&p, 300, 9).unwrap();
        let w = r
            .violations
            .iter()
            .find(|v| v.kind == ViolationKind::CoefficientGrowth)
            .expect("expected a growth violation");
        assert!(w.measured > w.bound);
        assert!(r.implied_growth_constant > 0.6);
    }

    #[test]
    fn single_mode_is_rejected_outright() {
        let mut p = two_mode("0.5");
        p.modes = 1;
        p.psi.truncate(1);
        p.cost = vec![vec![None]];
        assert!(matches!(validate_problem(&p, 10, 0), Err(Error::Structural(_))));
    }

    #[test]
    fn same_seed_is_bit_reproducible() {
        let p = two_mode("0.5 - 0.3*t");
        let a = validate_problem(&p, 400, 42).unwrap();
        let b = validate_problem(&p, 400, 42).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = validate_problem(&p, 400, 43).unwrap();
        assert_ne!(a.violations.first().map(|v| v.t), c.violations.first().map(|v| v.t));
    }

    #[test]
    fn halton_points_cover_unit_box() {
        let pts = halton_points(1000, 2, 5);
        for d in 0..2 {
            let mean = pts.iter().map(|p| p[d]).sum::<f64>() / 1000.0;
            assert!((mean - 0.5).abs() < 0.01);
            assert!(pts.iter().all(|p| (0.0..1.0).contains(&p[d])));
        }
    }
}
