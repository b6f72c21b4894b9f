//! Euler–Maruyama simulation of the state diffusion
//! `dX_s = b(s, X_s) ds + sigma(s, X_s) dB_s`, started at `(t0, x0)` and frozen
//! at `x0` for `s <= t0`.
//!
//! Gaussian increments come from a ChaCha8 stream per path, positioned by step,
//! so any `(seed, path, step)` increment can be regenerated in isolation and
//! generation order does not matter.

use std::io::Write;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::SwitchingProblem;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
}

/// Seeded batch of simulated trajectories on a uniform grid from `t0` to `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub n_paths: usize,
    pub n_steps: usize,
    pub dim: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub t0: f64,
    pub x0: Vec<f64>,
    times: Vec<f64>,
    /// `[path][step][component]`
    states: Vec<f64>,
}

fn u64_to_open01(v: u64) -> f64 {
    ((v >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Per-path normal generator. Each step consumes exactly `ceil(d/2)` pairs.
pub struct NoiseStream {
    rng: ChaCha8Rng,
    d: usize,
}

impl NoiseStream {
    pub fn new(seed: u64, path: usize, d: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path as u64);
        NoiseStream { rng, d }
    }

    fn words_per_step(&self) -> u128 {
        // two u64 (four 32-bit words) per Box–Muller pair
        4 * self.d.div_ceil(2) as u128
    }

    pub fn seek(&mut self, step: usize) {
        self.rng.set_word_pos(step as u128 * self.words_per_step());
    }

    /// Standard normals for the next step.
    pub fn next_normals(&mut self, out: &mut [f64]) {
        let mut i = 0;
        while i < self.d {
            let u1 = u64_to_open01(self.rng.next_u64());
            let u2 = u64_to_open01(self.rng.next_u64());
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
            out[i] = r * c;
            if i + 1 < self.d {
                out[i + 1] = r * s;
            }
            i += 2;
        }
    }
}

/// Standard normals of `(seed, path, step)` regenerated in isolation.
pub fn standard_normals(seed: u64, path: usize, step: usize, d: usize) -> Vec<f64> {
    let mut s = NoiseStream::new(seed, path, d);
    s.seek(step);
    let mut out = vec![0.0; d];
    s.next_normals(&mut out);
    out
}

impl PathEnsemble {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * (self.n_steps + 1) + step) * self.dim;
        &self.states[o..o + self.dim]
    }

    pub fn path(&self, path: usize) -> &[f64] {
        let len = (self.n_steps + 1) * self.dim;
        &self.states[path * len..(path + 1) * len]
    }

    /// State at an arbitrary time: `x0` up to `t0`, then the most recent grid value.
    pub fn state_at_time(&self, path: usize, s: f64) -> &[f64] {
        if s <= self.t0 {
            return &self.x0;
        }
        let dt = self.dt();
        let step = (((s - self.t0) / dt) + 1e-9).floor() as usize;
        self.state(path, step.min(self.n_steps))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "path,step,time")?;
        for c in 0..self.dim {
            write!(w, ",x{}", c + 1)?;
        }
        writeln!(w)?;
        for p in 0..self.n_paths {
            for (s, t) in self.times.iter().enumerate() {
                write!(w, "{p},{s},{t}")?;
                for v in self.state(p, s) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

pub fn simulate(
    p: &SwitchingProblem,
    t0: f64,
    x0: &[f64],
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    let horizon = p.horizon;
    if !(0.0..horizon).contains(&t0) {
        return Err(Error::InvalidArgument(format!("t0 = {t0} outside [0, {horizon})")));
    }
    if n_paths == 0 || n_steps == 0 {
        return Err(Error::InvalidArgument("n_paths and n_steps must be positive".into()));
    }
    let k = p.dim();
    if x0.len() != k {
        return Err(Error::InvalidArgument(format!("x0 has {} components, expected {k}", x0.len())));
    }
    let d = p.diffusion.brownian_dim;
    let dt = (horizon - t0) / n_steps as f64;
    let times: Vec<f64> = (0..=n_steps)
        .map(|s| if s == n_steps { horizon } else { t0 + s as f64 * dt })
        .collect();
    let sqdt = dt.sqrt();
    let row = (n_steps + 1) * k;
    let mut states = vec![0.0; n_paths * row];
    let det = p.diffusion.is_deterministic();
    let errors = std::sync::Mutex::new(Vec::<(usize, usize, crate::model::ExprError)>::new());

    par::for_each_chunk(&mut states, row, |path, out| {
        let mut noise = NoiseStream::new(seed, path, d);
        let mut z = vec![0.0; d];
        let mut b = vec![0.0; k];
        let mut s = vec![0.0; k * d];
        out[..k].copy_from_slice(x0);
        for step in 0..n_steps {
            let (cur, next) = out[step * k..(step + 2) * k].split_at_mut(k);
            let t = times[step];
            let coeffs = p
                .diffusion
                .drift_at(t, cur, &mut b)
                .and_then(|_| p.diffusion.vol_at(t, cur, &mut s));
            if let Err(e) = coeffs {
                errors.lock().unwrap().push((path, step, e));
                return;
            }
            if !det {
                noise.next_normals(&mut z);
            }
            for r in 0..k {
                let mut dx = b[r] * dt;
                if !det {
                    for c in 0..d {
                        dx += s[r * d + c] * z[c] * sqdt;
                    }
                }
                next[r] = cur[r] + dx;
            }
        }
    });
    let mut errors = errors.into_inner().unwrap();
    errors.sort_by_key(|e| (e.0, e.1));
    if let Some((path, step, source)) = errors.into_iter().next() {
        return Err(Error::Simulation { path, step, source });
    }
    Ok(PathEnsemble {
        n_paths,
        n_steps,
        dim: k,
        seed,
        scheme: Scheme::Euler,
        t0,
        x0: x0.to_vec(),
        times,
        states,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentReport {
    pub q: u32,
    /// Empirical E[sup_s |X_s|^q] over the grid.
    pub estimate: f64,
    pub standard_error: f64,
    /// estimate / (1 + |x0|^q)
    pub implied_constant: f64,
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

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn moment_check(e: &PathEnsemble, q: u32) -> Result<MomentReport> {
    if ![2, 4, 8].contains(&q) {
        return Err(Error::InvalidArgument(format!("moment order {q} not in {{2, 4, 8}}")));
    }
    let sups: Vec<f64> = (0..e.n_paths)
        .map(|p| {
            (0..=e.n_steps)
                .map(|s| norm(e.state(p, s)).powi(q as i32))
                .fold(0.0, f64::max)
        })
        .collect();
    let (estimate, standard_error) = mean_and_se(&sups);
    Ok(MomentReport {
        q,
        estimate,
        standard_error,
        implied_constant: estimate / (1.0 + norm(&e.x0).powi(q as i32)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuityReport {
    pub q: u32,
    /// Empirical E[sup_s |X^{t,x}_s - X^{t',x'}_s|^q].
    pub estimate: f64,
    pub standard_error: f64,
    /// |t - t'| + |x - x'|
    pub distance: f64,
}

/// Compares two ensembles path by path on the union of their time grids.
pub fn continuity_check(a: &PathEnsemble, b: &PathEnsemble, q: u32) -> Result<ContinuityReport> {
    if a.n_paths != b.n_paths || a.dim != b.dim {
        return Err(Error::InvalidArgument("ensembles must have matching size and dimension".into()));
    }
    let mut grid: Vec<f64> = a.times().iter().chain(b.times()).copied().collect();
    grid.push(0.0);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let sups: Vec<f64> = (0..a.n_paths)
        .map(|p| {
            grid.iter()
                .map(|&s| {
                    let (xa, xb) = (a.state_at_time(p, s), b.state_at_time(p, s));
                    let d: Vec<f64> = xa.iter().zip(xb).map(|(u, v)| u - v).collect();
                    norm(&d).powi(q as i32)
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let (estimate, standard_error) = mean_and_se(&sups);
    let dx: Vec<f64> = a.x0.iter().zip(&b.x0).map(|(u, v)| u - v).collect();
    Ok(ContinuityReport {
        q,
        estimate,
        standard_error,
        distance: (a.t0 - b.t0).abs() + norm(&dx),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::problem_1d;

    #[test]
    fn degenerate_sde_stays_constant() {
        let p = problem_1d("0", "0", ["1", "1"], "0.5", 1.0);
        let e = simulate(&p, 0.0, &[1.0], 10, 20, 3).unwrap();
        for path in 0..10 {
            assert!(e.path(path).iter().all(|&v| v == 1.0));
        }
        let m = moment_check(&e, 2).unwrap();
        assert_eq!(m.estimate, 1.0);
    }

    #[test]
    fn pure_drift_integrates_ode() {
        let p = problem_1d("1", "0", ["1", "1"], "0.5", 1.0);
        let e = simulate(&p, 0.0, &[0.0], 3, 64, 3).unwrap();
        assert!((e.state(0, 64)[0] - 1.0).abs() < 1.0 / 64.0);
        assert_eq!(*e.times().last().unwrap(), 1.0);
    }

    #[test]
    fn increments_reproduce_in_isolation() {
        let mut s = NoiseStream::new(11, 5, 3);
        let mut z = vec![0.0; 3];
        for step in 0..4 {
            s.next_normals(&mut z);
            assert_eq!(z, standard_normals(11, 5, step, 3));
        }
    }

    #[test]
    fn same_seed_is_bit_identical_and_subset_reproducible() {
        let p = problem_1d("0.1*x1", "0.3", ["1", "1"], "0.5", 1.0);
        let a = simulate(&p, 0.2, &[0.5], 40, 16, 99).unwrap();
        let b = simulate(&p, 0.2, &[0.5], 40, 16, 99).unwrap();
        assert_eq!(a, b);
        let small = simulate(&p, 0.2, &[0.5], 7, 16, 99).unwrap();
        assert_eq!(small.path(6), a.path(6));
        let other = simulate(&p, 0.2, &[0.5], 40, 16, 100).unwrap();
        assert_ne!(other.path(0), a.path(0));
    }

    #[test]
    fn frozen_before_start() {
        let p = problem_1d("0", "1", ["1", "1"], "0.5", 1.0);
        let e = simulate(&p, 0.5, &[2.0], 5, 10, 1).unwrap();
        for path in 0..5 {
            assert_eq!(e.state_at_time(path, 0.0), &[2.0]);
            assert_eq!(e.state_at_time(path, 0.5), &[2.0]);
            assert_eq!(e.state(path, 0), &[2.0]);
        }
        assert!(e.times().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn rejects_bad_arguments_and_reports_domain_errors() {
        let p = problem_1d("0", "1", ["1", "1"], "0.5", 1.0);
        assert!(simulate(&p, 1.0, &[0.0], 5, 10, 1).is_err());
        assert!(simulate(&p, 0.0, &[0.0], 0, 10, 1).is_err());
        let bad = problem_1d("log(x1)", "0", ["1", "1"], "0.5", 1.0);
        match simulate(&bad, 0.0, &[-1.0], 4, 10, 1) {
            Err(Error::Simulation { path: 0, step: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identical_inputs_have_zero_continuity_modulus() {
        let p = problem_1d("0", "1", ["1", "1"], "0.5", 1.0);
        let a = simulate(&p, 0.0, &[0.3], 200, 20, 5).unwrap();
        let b = simulate(&p, 0.0, &[0.3], 200, 20, 5).unwrap();
        let c = continuity_check(&a, &b, 2).unwrap();
        assert_eq!((c.estimate, c.distance), (0.0, 0.0));
        let shifted = simulate(&p, 0.0, &[0.4], 200, 20, 5).unwrap();
        let c = continuity_check(&a, &shifted, 2).unwrap();
        // additive noise: the difference is exactly the initial offset
        assert!((c.estimate - 0.01).abs() < 1e-12);
    }
}
