//! Exact backward induction on a recombining trinomial chain (k = 1).
//!
//! The chain matches the local mean `b dt` and variance `sigma^2 dt` of the
//! diffusion at every node. Mode decisions are enumerated exactly: at each
//! node, switches happen before stepping, and chains of switches at one node
//! are resolved to their fixed point.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::SwitchingProblem;

/// Trinomial lattice `x0 + j dx` restricted to the reachable cone and to a box.
#[derive(Debug, Clone)]
pub struct ChainApprox {
    pub n_levels: usize,
    pub dt: f64,
    pub dx: f64,
    pub x0: f64,
    pub horizon: f64,
    /// Lowest and highest node offsets permitted by the box.
    pub j_min: i64,
    pub j_max: i64,
    offsets: Vec<usize>,
    /// `[down, mid, up]` per node, level-major.
    probs: Vec<[f64; 3]>,
}

impl ChainApprox {
    /// Node offsets `lo..=hi` present at `level`.
    pub fn level_range(&self, level: usize) -> (i64, i64) {
        let n = level as i64;
        ((-n).max(self.j_min), n.min(self.j_max))
    }

    pub fn level_len(&self, level: usize) -> usize {
        let (lo, hi) = self.level_range(level);
        (hi - lo + 1) as usize
    }

    pub fn x(&self, j: i64) -> f64 {
        self.x0 + j as f64 * self.dx
    }

    pub fn time(&self, level: usize) -> f64 {
        if level == self.n_levels {
            self.horizon
        } else {
            level as f64 * self.dt
        }
    }

    /// `[down, mid, up]` transition probabilities out of node `j` at `level`.
    pub fn probabilities(&self, level: usize, j: i64) -> [f64; 3] {
        let (lo, _) = self.level_range(level);
        self.probs[self.offsets[level] + (j - lo) as usize]
    }
}

/// Box used by the oracle: the declared domain, or twice the solver box.
pub fn oracle_box(p: &SwitchingProblem) -> Result<(f64, f64)> {
    let (lo, hi) = p.computational_box()?[0];
    if p.domain.is_some() {
        return Ok((lo, hi));
    }
    let x0 = p.x0[0];
    Ok((x0 - 2.0 * (x0 - lo), x0 + 2.0 * (hi - x0)))
}

/// Builds the lattice with `dx = sigma_max sqrt(3 dt)`, where `sigma_max` is the
/// largest volatility sampled over the box and horizon.
pub fn build_chain(p: &SwitchingProblem, n_levels: usize) -> Result<ChainApprox> {
    if p.dim() != 1 {
        return Err(Error::Unsupported(format!(
            "the trinomial oracle needs k = 1, got k = {}",
            p.dim()
        )));
    }
    if n_levels == 0 {
        return Err(Error::InvalidArgument("n_levels must be positive".into()));
    }
    let (lo, hi) = oracle_box(p)?;
    let x0 = p.x0[0];
    let dt = p.horizon / n_levels as f64;
    let var_at = |t: f64, x: f64| -> Result<f64> { Ok(p.diffusion.covariance_at(t, &[x])?[0]) };
    let mut drift = [0.0];
    let (mut var_max, mut b_max) = (0.0f64, 0.0f64);
    for ti in 0..=20 {
        let t = p.horizon * ti as f64 / 20.0;
        for xi in 0..=2000 {
            let x = lo + (hi - lo) * xi as f64 / 2000.0;
            var_max = var_max.max(var_at(t, x)?);
            p.diffusion.drift_at(t, &[x], &mut drift)?;
            b_max = b_max.max(drift[0].abs());
        }
    }
    let dx = if var_max > 0.0 {
        (3.0 * var_max * dt).sqrt()
    } else {
        (b_max * dt).max((hi - lo) / 400.0)
    };
    let j_min = -(((x0 - lo) / dx).floor() as i64);
    let j_max = ((hi - x0) / dx).floor() as i64;
    let mut chain = ChainApprox {
        n_levels,
        dt,
        dx,
        x0,
        horizon: p.horizon,
        j_min,
        j_max,
        offsets: Vec::with_capacity(n_levels),
        probs: Vec::new(),
    };
    for level in 0..n_levels {
        chain.offsets.push(chain.probs.len());
        let t = chain.time(level);
        let (a, b) = chain.level_range(level);
        for j in a..=b {
            let x = chain.x(j);
            let var = var_at(t, x)?;
            p.diffusion.drift_at(t, &[x], &mut drift)?;
            let mean = drift[0] * dt;
            let second = (var * dt + mean * mean) / (dx * dx);
            let skew = mean / dx;
            let probs = [0.5 * (second - skew), 1.0 - second, 0.5 * (second + skew)];
            if probs.iter().any(|&q| !(-1e-12..=1.0 + 1e-12).contains(&q)) {
                return Err(Error::InfeasibleChain { level, x, probs });
            }
            chain.probs.push(probs.map(|q| q.clamp(0.0, 1.0)));
        }
    }
    Ok(chain)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "action", content = "to")]
pub enum Action {
    Continue,
    /// Zero-based target mode.
    SwitchTo(usize),
}

/// Mode values and optimal actions on the lattice.
#[derive(Debug, Clone)]
pub struct OracleValue {
    pub modes: usize,
    pub chain: ChainApprox,
    /// `[level][mode][node]` flattened with per-level offsets.
    values: Vec<f64>,
    actions: Vec<Action>,
    level_offsets: Vec<usize>,
    /// Largest number of same-node switch passes that changed a value.
    pub max_switch_passes: usize,
}

impl OracleValue {
    fn idx(&self, mode: usize, level: usize, j: i64) -> usize {
        let (lo, _) = self.chain.level_range(level);
        self.level_offsets[level] + mode * self.chain.level_len(level) + (j - lo) as usize
    }

    pub fn value(&self, mode: usize, level: usize, j: i64) -> f64 {
        self.values[self.idx(mode, level, j)]
    }

    pub fn action(&self, mode: usize, level: usize, j: i64) -> Action {
        self.actions[self.idx(mode, level, j)]
    }

    pub fn root(&self, mode: usize) -> f64 {
        self.value(mode, 0, 0)
    }

    pub fn roots(&self) -> Vec<f64> {
        (0..self.modes).map(|i| self.root(i)).collect()
    }

    /// Largest x at `level` where `mode` switches (None if it never does).
    pub fn switch_boundary(&self, mode: usize, level: usize) -> Option<f64> {
        let (lo, hi) = self.chain.level_range(level);
        (lo..=hi)
            .rev()
            .find(|&j| self.action(mode, level, j) != Action::Continue)
            .map(|j| self.chain.x(j))
    }
}

pub fn solve_dp(chain: &ChainApprox, p: &SwitchingProblem) -> Result<OracleValue> {
    let m = p.modes;
    let mut level_offsets = Vec::with_capacity(chain.n_levels + 1);
    let mut total = 0;
    for level in 0..=chain.n_levels {
        level_offsets.push(total);
        total += m * chain.level_len(level);
    }
    let mut out = OracleValue {
        modes: m,
        chain: chain.clone(),
        values: vec![0.0; total],
        actions: vec![Action::Continue; total],
        level_offsets,
        max_switch_passes: 0,
    };
    let dt = chain.dt;
    for level in (0..chain.n_levels).rev() {
        let t = chain.time(level);
        let (lo, hi) = chain.level_range(level);
        let (nlo, nhi) = chain.level_range(level + 1);
        let mut cont = vec![0.0; m];
        let mut cur = vec![0.0; m];
        let mut new = vec![0.0; m];
        let mut cost = vec![0.0; m * m];
        for j in lo..=hi {
            let x = [chain.x(j)];
            let pr = chain.probabilities(level, j);
            for i in 0..m {
                let next = |jj: i64| out.value(i, level + 1, jj.clamp(nlo, nhi));
                let expect = pr[0] * next(j - 1) + pr[1] * next(j) + pr[2] * next(j + 1);
                cont[i] = p.psi_at(i, t, &x)? * dt + expect;
                for k in (0..m).filter(|&k| k != i) {
                    cost[i * m + k] = p.cost_at(i, k, t, &x)?;
                }
            }
            cur.copy_from_slice(&cont);
            let mut passes = 0;
            loop {
                for i in 0..m {
                    new[i] = (0..m)
                        .filter(|&k| k != i)
                        .map(|k| cur[k] - cost[i * m + k])
                        .fold(cont[i], f64::max);
                }
                if new == cur {
                    break;
                }
                passes += 1;
                assert!(
                    passes < m,
                    "same-node switching did not settle in {} passes; costs must be positive",
                    m - 1
                );
                cur.copy_from_slice(&new);
            }
            out.max_switch_passes = out.max_switch_passes.max(passes);
            for i in 0..m {
                let idx = out.idx(i, level, j);
                out.values[idx] = cur[i];
                if cur[i] > cont[i] {
                    let target = (0..m)
                        .filter(|&k| k != i)
                        .max_by(|&a, &b| {
                            (cur[a] - cost[i * m + a])
                                .total_cmp(&(cur[b] - cost[i * m + b]))
                                .then(b.cmp(&a))
                        })
                        .unwrap();
                    out.actions[idx] = Action::SwitchTo(target);
                }
            }
        }
    }
    Ok(out)
}

/// Reference values stored in a plain-text golden file.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldenRecord {
    pub problem_hash: String,
    pub n_levels: usize,
    pub roots: Vec<f64>,
}

impl GoldenRecord {
    pub fn to_text(&self) -> String {
        let mut s = format!("problem_hash {}\nn_levels {}\n", self.problem_hash, self.n_levels);
        for (i, v) in self.roots.iter().enumerate() {
            s.push_str(&format!("mode {} {:.6}\n", i + 1, v));
        }
        s
    }

    pub fn parse(text: &str) -> Result<GoldenRecord> {
        let bad = |line: &str| Error::Io(format!("malformed golden line `{line}`"));
        let mut rec = GoldenRecord {
            problem_hash: String::new(),
            n_levels: 0,
            roots: Vec::new(),
        };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["problem_hash", h] => rec.problem_hash = h.to_string(),
                ["n_levels", n] => rec.n_levels = n.parse().map_err(|_| bad(line))?,
                ["mode", i, v] => {
                    let i: usize = i.parse().map_err(|_| bad(line))?;
                    if i != rec.roots.len() + 1 {
                        return Err(bad(line));
                    }
                    rec.roots.push(v.parse().map_err(|_| bad(line))?);
                }
                _ => return Err(bad(line)),
            }
        }
        Ok(rec)
    }
}
