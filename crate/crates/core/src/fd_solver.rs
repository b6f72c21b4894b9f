//! Backward finite-difference solver for the coupled obstacle system on a
//! truncated box in one or two space dimensions.
//!
//! Each time level takes an unconstrained step per mode (explicit, or implicit
//! with a banded LU solve) and then projects onto the inter-connected obstacles
//! `v_i >= max_{j != i} (v_j - g_ij)` until the projection is a fixed point.
//! Faces use linear extrapolation from the two nearest interior nodes, so the
//! unknowns are the interior nodes only.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue_sym, BandedLu, BandedMatrix};
use crate::model::SwitchingProblem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub bounds: Vec<(f64, f64)>,
    /// Node counts per dimension, faces included.
    pub n_space: Vec<usize>,
    pub n_time: usize,
    pub horizon: f64,
}

impl Grid {
    pub fn new(bounds: Vec<(f64, f64)>, n_space: Vec<usize>, n_time: usize, horizon: f64) -> Result<Grid> {
        let k = bounds.len();
        if k == 0 || k > 2 {
            return Err(Error::Unsupported(format!("finite differences need k in {{1, 2}}, got {k}")));
        }
        if n_space.len() != k {
            return Err(Error::InvalidArgument("one node count per dimension is required".into()));
        }
        if n_space.iter().any(|&n| n < 5) {
            return Err(Error::InvalidArgument("at least 5 nodes per dimension are required".into()));
        }
        if n_time == 0 || !(horizon > 0.0) {
            return Err(Error::InvalidArgument("need n_time >= 1 and a positive horizon".into()));
        }
        if bounds.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::InvalidArgument("grid bounds need lo < hi".into()));
        }
        Ok(Grid {
            bounds,
            n_space,
            n_time,
            horizon,
        })
    }

    /// Grid over the problem's computational box. `x0` must lie strictly inside.
    pub fn for_problem(p: &SwitchingProblem, n_space: &[usize], n_time: usize) -> Result<Grid> {
        let grid = Grid::new(p.computational_box()?, n_space.to_vec(), n_time, p.horizon)?;
        for (d, (&x, &(lo, hi))) in p.x0.iter().zip(&grid.bounds).enumerate() {
            if !(lo < x && x < hi) {
                return Err(Error::InvalidArgument(format!(
                    "x0[{}] = {x} is not strictly inside [{lo}, {hi}]",
                    d + 1
                )));
            }
        }
        Ok(grid)
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_time as f64
    }

    pub fn dx(&self, d: usize) -> f64 {
        let (lo, hi) = self.bounds[d];
        (hi - lo) / (self.n_space[d] - 1) as f64
    }

    pub fn time(&self, level: usize) -> f64 {
        if level == self.n_time {
            self.horizon
        } else {
            level as f64 * self.dt()
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_space.iter().product()
    }

    /// Multi-index of a flat node index (first dimension fastest).
    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        let mut rest = node;
        self.n_space
            .iter()
            .map(|&n| {
                let i = rest % n;
                rest /= n;
                i
            })
            .collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.n_space)
            .rev()
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn coord(&self, d: usize, i: usize) -> f64 {
        let (lo, hi) = self.bounds[d];
        if i == self.n_space[d] - 1 {
            hi
        } else {
            lo + i as f64 * self.dx(d)
        }
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        self.multi_index(node)
            .iter()
            .enumerate()
            .map(|(d, &i)| self.coord(d, i))
            .collect()
    }

    pub fn is_interior(&self, node: usize) -> bool {
        self.multi_index(node)
            .iter()
            .zip(&self.n_space)
            .all(|(&i, &n)| i > 0 && i < n - 1)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.bounds)
            .all(|(&v, &(lo, hi))| lo <= v && v <= hi)
    }

    /// Nearest grid node, or `None` outside the box.
    pub fn nearest_node(&self, x: &[f64]) -> Option<usize> {
        if !self.contains(x) {
            return None;
        }
        let idx: Vec<usize> = x
            .iter()
            .enumerate()
            .map(|(d, &v)| {
                let r = ((v - self.bounds[d].0) / self.dx(d)).round() as usize;
                r.min(self.n_space[d] - 1)
            })
            .collect();
        Some(self.flat_index(&idx))
    }

    /// Nearest time level.
    pub fn nearest_level(&self, t: f64) -> usize {
        ((t / self.dt()).round().max(0.0) as usize).min(self.n_time)
    }

    /// Interior nodes in flat order; position in this list is the unknown index.
    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&n| self.is_interior(n)).collect()
    }

    /// Expresses any node as a combination of interior nodes (identity for
    /// interior nodes, linear extrapolation across faces and corners).
    pub fn extrapolation(&self, node: usize) -> Vec<(usize, f64)> {
        let idx = self.multi_index(node);
        let mut combo: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 1.0)];
        for (d, &i) in idx.iter().enumerate() {
            let n = self.n_space[d];
            let weights: Vec<(usize, f64)> = if i == 0 {
                vec![(1, 2.0), (2, -1.0)]
            } else if i == n - 1 {
                vec![(n - 2, 2.0), (n - 3, -1.0)]
            } else {
                vec![(i, 1.0)]
            };
            combo = combo
                .into_iter()
                .flat_map(|(pre, w)| {
                    weights.iter().map(move |&(j, c)| {
                        let mut p = pre.clone();
                        p.push(j);
                        (p, w * c)
                    })
                })
                .collect();
        }
        combo
            .into_iter()
            .map(|(mi, w)| (self.flat_index(&mi), w))
            .collect()
    }

    /// Fills face nodes of a level from its interior values.
    pub fn fill_faces(&self, level: &mut [f64]) {
        for node in 0..self.n_nodes() {
            if !self.is_interior(node) {
                level[node] = self
                    .extrapolation(node)
                    .iter()
                    .map(|&(j, w)| w * level[j])
                    .sum();
            }
        }
    }

    /// Largest dt for which the explicit scheme is stable on this grid at time `t`:
    /// `dx^2 / (k max|sigma sigma^T| + dx max|b|)`.
    pub fn stability_bound(&self, p: &SwitchingProblem, t: f64) -> Result<f64> {
        let k = self.dim();
        let dx = (0..k).map(|d| self.dx(d)).fold(f64::INFINITY, f64::min);
        let (mut amax, mut bmax) = (0.0f64, 0.0f64);
        let mut b = vec![0.0; k];
        for node in 0..self.n_nodes() {
            let x = self.coords(node);
            let a = p.diffusion.covariance_at(t, &x)?;
            amax = a.iter().fold(amax, |m, v| m.max(v.abs()));
            p.diffusion.drift_at(t, &x, &mut b)?;
            bmax = b.iter().fold(bmax, |m, v| m.max(v.abs()));
        }
        let denom = k as f64 * amax + dx * bmax;
        Ok(if denom == 0.0 { f64::INFINITY } else { dx * dx / denom })
    }
}

/// Generator discretization at one time: one row per interior node, with
/// entries that may reference face nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorStencil {
    pub rows: Vec<StencilRow>,
    /// Nodes where the cross-derivative stencil loses diagonal dominance.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StencilRow {
    pub node: usize,
    pub entries: Vec<(usize, f64)>,
}

fn push_entry(entries: &mut Vec<(usize, f64)>, node: usize, c: f64) {
    if c == 0.0 {
        return;
    }
    match entries.iter_mut().find(|e| e.0 == node) {
        Some(e) => e.1 += c,
        None => entries.push((node, c)),
    }
}

/// Central second differences for the diffusion part, upwind first differences
/// for the drift, and the 4-point stencil for the mixed derivative.
pub fn discretize_generator(p: &SwitchingProblem, grid: &Grid, t: f64) -> Result<OperatorStencil> {
    let k = grid.dim();
    if p.dim() != k {
        return Err(Error::InvalidArgument(format!("grid has dimension {k}, problem {}", p.dim())));
    }
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let mut b = vec![0.0; k];
    for node in grid.interior_nodes() {
        let x = grid.coords(node);
        let idx = grid.multi_index(node);
        let a = p.diffusion.covariance_at(t, &x)?;
        let lam = min_eigenvalue_sym(&a, k);
        let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if lam < -1e-12 * scale {
            return Err(Error::NotPsd {
                location: x,
                eigenvalue: lam,
            });
        }
        p.diffusion.drift_at(t, &x, &mut b)?;
        let mut entries = Vec::with_capacity(1 + 2 * k + 4);
        let shifted = |d: usize, delta: isize| {
            let mut j = idx.clone();
            j[d] = (j[d] as isize + delta) as usize;
            grid.flat_index(&j)
        };
        for d in 0..k {
            let h = grid.dx(d);
            let diff = 0.5 * a[d * k + d] / (h * h);
            push_entry(&mut entries, shifted(d, -1), diff);
            push_entry(&mut entries, node, -2.0 * diff);
            push_entry(&mut entries, shifted(d, 1), diff);
            if b[d] > 0.0 {
                push_entry(&mut entries, shifted(d, 1), b[d] / h);
                push_entry(&mut entries, node, -b[d] / h);
            } else if b[d] < 0.0 {
                push_entry(&mut entries, node, b[d] / h);
                push_entry(&mut entries, shifted(d, -1), -b[d] / h);
            }
        }
        if k == 2 && a[1] != 0.0 {
            let (hx, hy) = (grid.dx(0), grid.dx(1));
            let c = a[1] / (4.0 * hx * hy);
            for (sx, sy, sign) in [(1, 1, 1.0), (1, -1, -1.0), (-1, 1, -1.0), (-1, -1, 1.0)] {
                let j = [(idx[0] as isize + sx) as usize, (idx[1] as isize + sy) as usize];
                push_entry(&mut entries, grid.flat_index(&j), sign * c);
            }
            if a[1].abs() / (hx * hy) > (a[0] / (hx * hx)).min(a[3] / (hy * hy)) {
                warnings.push(format!(
                    "cross-derivative dominates at x = {x:?}: stencil is not monotone"
                ));
            }
        }
        entries.sort_by_key(|e| e.0);
        rows.push(StencilRow { node, entries });
    }
    Ok(OperatorStencil { rows, warnings })
}

/// Stencil rewritten over interior unknowns only (faces substituted).
#[derive(Debug, Clone)]
struct ResolvedStencil {
    /// unknown index -> entries over unknown indices
    rows: Vec<Vec<(usize, f64)>>,
}

impl ResolvedStencil {
    fn new(stencil: &OperatorStencil, grid: &Grid, unknown_of: &[usize]) -> Self {
        let rows = stencil
            .rows
            .iter()
            .map(|row| {
                let mut out = Vec::new();
                for &(node, c) in &row.entries {
                    if grid.is_interior(node) {
                        push_entry(&mut out, unknown_of[node], c);
                    } else {
                        for (j, w) in grid.extrapolation(node) {
                            push_entry(&mut out, unknown_of[j], c * w);
                        }
                    }
                }
                out.sort_by_key(|e| e.0);
                out
            })
            .collect();
        ResolvedStencil { rows }
    }

    /// `A u` over interior unknowns.
    fn apply(&self, u: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().map(|&(j, c)| c * u[j]).sum();
        }
    }

    fn implicit_matrix(&self, dt: f64) -> std::result::Result<BandedLu, String> {
        let n = self.rows.len();
        let band = self
            .rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&(j, _)| i.abs_diff(j)))
            .max()
            .unwrap_or(0);
        let mut m = BandedMatrix::zeros(n, band, band);
        for (i, row) in self.rows.iter().enumerate() {
            m.add(i, i, 1.0);
            for &(j, c) in row {
                m.add(i, j, -dt * c);
            }
        }
        m.factorize()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdScheme {
    Explicit,
    Implicit,
}

impl std::str::FromStr for FdScheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "explicit" => Ok(FdScheme::Explicit),
            "implicit" => Ok(FdScheme::Implicit),
            _ => Err(format!("unknown scheme `{s}` (expected explicit|implicit)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeOrder {
    Ascending,
    Descending,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdOptions {
    pub scheme: FdScheme,
    pub tol_policy: f64,
    pub max_policy_iters: usize,
    pub mode_order: ModeOrder,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            scheme: FdScheme::Implicit,
            tol_policy: 1e-12,
            max_policy_iters: 50,
            mode_order: ModeOrder::Ascending,
        }
    }
}

/// The m value surfaces on the space-time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    pub modes: usize,
    pub grid: Grid,
    pub problem_hash: String,
    pub scheme: FdScheme,
    /// `[mode][level][node]`
    values: Vec<f64>,
    /// Largest number of projection passes used at any level.
    pub max_passes: usize,
}

impl ValueField {
    fn offset(&self, mode: usize, level: usize) -> usize {
        (mode * (self.grid.n_time + 1) + level) * self.grid.n_nodes()
    }

    pub fn level(&self, mode: usize, level: usize) -> &[f64] {
        let o = self.offset(mode, level);
        &self.values[o..o + self.grid.n_nodes()]
    }

    pub fn level_mut(&mut self, mode: usize, level: usize) -> &mut [f64] {
        let o = self.offset(mode, level);
        let n = self.grid.n_nodes();
        &mut self.values[o..o + n]
    }

    /// All values, `[mode][level][node]`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Largest absolute difference to another field on the same grid.
    pub fn max_abs_diff(&self, other: &ValueField) -> f64 {
        assert_eq!(self.values.len(), other.values.len(), "fields on different grids");
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn value(&self, mode: usize, level: usize, node: usize) -> f64 {
        self.values[self.offset(mode, level) + node]
    }

    pub fn set(&mut self, mode: usize, level: usize, node: usize, v: f64) {
        let o = self.offset(mode, level);
        self.values[o + node] = v;
    }

    /// Multilinear interpolation in space at a fixed level (clamped to the box).
    pub fn interpolate_level(&self, mode: usize, level: usize, x: &[f64]) -> f64 {
        let g = &self.grid;
        let k = g.dim();
        let mut base = Vec::with_capacity(k);
        let mut frac = Vec::with_capacity(k);
        for d in 0..k {
            let s = ((x[d] - g.bounds[d].0) / g.dx(d)).clamp(0.0, (g.n_space[d] - 1) as f64);
            let i = (s.floor() as usize).min(g.n_space[d] - 2);
            base.push(i);
            frac.push(s - i as f64);
        }
        let lv = self.level(mode, level);
        let mut acc = 0.0;
        for corner in 0..(1usize << k) {
            let mut w = 1.0;
            let mut idx = base.clone();
            for d in 0..k {
                if corner >> d & 1 == 1 {
                    idx[d] += 1;
                    w *= frac[d];
                } else {
                    w *= 1.0 - frac[d];
                }
            }
            if w != 0.0 {
                acc += w * lv[g.flat_index(&idx)];
            }
        }
        acc
    }

    /// Value at an arbitrary `(t, x)`: linear in time, multilinear in space.
    pub fn interpolate(&self, mode: usize, t: f64, x: &[f64]) -> f64 {
        let s = (t / self.grid.dt()).clamp(0.0, self.grid.n_time as f64);
        let l = (s.floor() as usize).min(self.grid.n_time - 1);
        let w = s - l as f64;
        let a = self.interpolate_level(mode, l, x);
        if w == 0.0 {
            return a;
        }
        (1.0 - w) * a + w * self.interpolate_level(mode, l + 1, x)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let k = self.grid.dim();
        write!(w, "mode,time_index")?;
        for d in 0..k {
            write!(w, ",space_index{}", d + 1)?;
        }
        write!(w, ",t")?;
        for d in 0..k {
            write!(w, ",x{}", d + 1)?;
        }
        writeln!(w, ",v")?;
        for mode in 0..self.modes {
            for level in 0..=self.grid.n_time {
                let t = self.grid.time(level);
                for node in 0..self.grid.n_nodes() {
                    write!(w, "{},{level}", mode + 1)?;
                    for i in self.grid.multi_index(node) {
                        write!(w, ",{i}")?;
                    }
                    write!(w, ",{t}")?;
                    for x in self.grid.coords(node) {
                        write!(w, ",{x}")?;
                    }
                    writeln!(w, ",{}", self.value(mode, level, node))?;
                }
            }
        }
        Ok(())
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&CacheHeader {
            modes: self.modes,
            grid: self.grid.clone(),
            problem_hash: self.problem_hash.clone(),
            scheme: self.scheme,
            max_passes: self.max_passes,
        })
        .expect("cache header serializes");
        let mut buf = Vec::with_capacity(16 + header.len() + 8 * self.values.len());
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn read_cache(path: &Path) -> Result<ValueField> {
        let io = |e: std::io::Error| Error::Io(format!("{}: {e}", path.display()));
        let mut f = std::fs::File::open(path).map_err(io)?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(io)?;
        let bad = || Error::Io(format!("{}: not a value-field cache", path.display()));
        if buf.len() < 16 || &buf[..8] != CACHE_MAGIC {
            return Err(bad());
        }
        let hlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let header: CacheHeader = serde_json::from_slice(buf.get(16..16 + hlen).ok_or_else(bad)?)
            .map_err(|_| bad())?;
        let body = &buf[16 + hlen..];
        let expected = header.modes * (header.grid.n_time + 1) * header.grid.n_nodes();
        if body.len() != 8 * expected {
            return Err(bad());
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(ValueField {
            modes: header.modes,
            grid: header.grid,
            problem_hash: header.problem_hash,
            scheme: header.scheme,
            values,
            max_passes: header.max_passes,
        })
    }
}

const CACHE_MAGIC: &[u8; 8] = b"SBVFLD01";

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    modes: usize,
    grid: Grid,
    problem_hash: String,
    scheme: FdScheme,
    max_passes: usize,
}

/// Key for the binary cache: hash of problem, grid and scheme.
pub fn cache_key(p: &SwitchingProblem, grid: &Grid, scheme: FdScheme) -> String {
    let mut h = Sha256::new();
    h.update(p.hash().as_bytes());
    h.update(serde_json::to_vec(grid).expect("grid serializes"));
    h.update(serde_json::to_vec(&scheme).expect("scheme serializes"));
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn coefficients_depend_on_time(p: &SwitchingProblem) -> bool {
    p.diffusion.drift.iter().any(|e| e.uses_time())
        || p.diffusion.vol.iter().flatten().any(|e| e.uses_time())
}

/// Per-level table of switching costs `g_ij(t, x)` at every node, `[i][j][node]`.
fn cost_table(p: &SwitchingProblem, grid: &Grid, t: f64) -> Result<Vec<f64>> {
    let (m, n) = (p.modes, grid.n_nodes());
    let mut out = vec![0.0; m * m * n];
    for node in 0..n {
        let x = grid.coords(node);
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    out[(i * m + j) * n + node] = p.cost_at(i, j, t, &x)?;
                }
            }
        }
    }
    Ok(out)
}

/// Projects `levels` (one slice per mode) onto the obstacles until a fixed point.
/// Returns the number of passes.
fn project(
    levels: &mut [Vec<f64>],
    costs: &[f64],
    order: ModeOrder,
    tol: f64,
    max_iters: usize,
    level: usize,
) -> Result<usize> {
    let m = levels.len();
    let n = levels[0].len();
    let modes: Vec<usize> = match order {
        ModeOrder::Ascending => (0..m).collect(),
        ModeOrder::Descending => (0..m).rev().collect(),
    };
    for pass in 1..=max_iters {
        let mut change = 0.0f64;
        for &i in &modes {
            for node in 0..n {
                let mut obstacle = f64::NEG_INFINITY;
                for (j, lv) in levels.iter().enumerate() {
                    if j != i {
                        obstacle = obstacle.max(lv[node] - costs[(i * m + j) * n + node]);
                    }
                }
                let v = &mut levels[i][node];
                if obstacle > *v {
                    change = change.max(obstacle - *v);
                    *v = obstacle;
                }
            }
        }
        if change <= tol {
            return Ok(pass);
        }
        if pass == max_iters {
            return Err(Error::PolicyIteration {
                level,
                iters: max_iters,
                residual: change,
            });
        }
    }
    unreachable!("max_iters >= 1")
}

pub fn solve_fd(p: &SwitchingProblem, grid: &Grid, opts: &FdOptions) -> Result<ValueField> {
    if opts.max_policy_iters == 0 {
        return Err(Error::InvalidArgument("max_policy_iters must be positive".into()));
    }
    let (m, n) = (p.modes, grid.n_nodes());
    let dt = grid.dt();
    let interior = grid.interior_nodes();
    let mut unknown_of = vec![usize::MAX; n];
    for (u, &node) in interior.iter().enumerate() {
        unknown_of[node] = u;
    }
    let time_dependent = coefficients_depend_on_time(p);
    let mut field = ValueField {
        modes: m,
        grid: grid.clone(),
        problem_hash: p.hash(),
        scheme: opts.scheme,
        values: vec![0.0; m * (grid.n_time + 1) * n],
        max_passes: 0,
    };
    let coords: Vec<Vec<f64>> = (0..n).map(|node| grid.coords(node)).collect();

    let mut cached: Option<(ResolvedStencil, Option<BandedLu>)> = None;
    let mut next: Vec<Vec<f64>> = vec![vec![0.0; interior.len()]; m];
    let mut au = vec![0.0; interior.len()];
    for level in (0..grid.n_time).rev() {
        let t = grid.time(level);
        if time_dependent || cached.is_none() {
            if opts.scheme == FdScheme::Explicit {
                let bound = grid.stability_bound(p, t)?;
                if dt > bound {
                    return Err(Error::Unstable { dt, bound });
                }
            }
            let stencil = discretize_generator(p, grid, t)?;
            let resolved = ResolvedStencil::new(&stencil, grid, &unknown_of);
            let lu = match opts.scheme {
                FdScheme::Implicit => Some(
                    resolved
                        .implicit_matrix(dt)
                        .map_err(|reason| Error::LinearSolve { level, reason })?,
                ),
                FdScheme::Explicit => None,
            };
            cached = Some((resolved, lu));
        }
        let (resolved, lu) = cached.as_ref().unwrap();
        let mut levels: Vec<Vec<f64>> = Vec::with_capacity(m);
        for (i, u) in next.iter().enumerate() {
            let mut step: Vec<f64> = interior
                .iter()
                .map(|&node| p.psi_at(i, t, &coords[node]).map(|psi| dt * psi))
                .collect::<Result<_>>()?;
            match lu {
                Some(lu) => {
                    for (s, v) in step.iter_mut().zip(u) {
                        *s += v;
                    }
                    lu.solve_in_place(&mut step);
                }
                None => {
                    resolved.apply(u, &mut au);
                    for ((s, v), a) in step.iter_mut().zip(u).zip(&au) {
                        *s += v + dt * a;
                    }
                }
            }
            if step.iter().any(|v| !v.is_finite()) {
                return Err(Error::LinearSolve {
                    level,
                    reason: "non-finite values".into(),
                });
            }
            let mut full = vec![0.0; n];
            for (&node, v) in interior.iter().zip(&step) {
                full[node] = *v;
            }
            grid.fill_faces(&mut full);
            levels.push(full);
        }
        let costs = cost_table(p, grid, t)?;
        let passes = project(
            &mut levels,
            &costs,
            opts.mode_order,
            opts.tol_policy,
            opts.max_policy_iters,
            level,
        )?;
        field.max_passes = field.max_passes.max(passes);
        for (i, lv) in levels.into_iter().enumerate() {
            for (u, &node) in next[i].iter_mut().zip(&interior) {
                *u = lv[node];
            }
            field.level_mut(i, level).copy_from_slice(&lv);
        }
    }
    Ok(field)
}

/// Largest violation of `v_i >= max_{j != i}(v_j - g_ij)` over all nodes and
/// levels (0 when the inequality holds everywhere).
pub fn obstacle_violation(v: &ValueField, p: &SwitchingProblem) -> Result<f64> {
    let g = &v.grid;
    let mut worst = 0.0f64;
    for level in 0..=g.n_time {
        let t = g.time(level);
        let costs = cost_table(p, g, t)?;
        let n = g.n_nodes();
        for i in 0..v.modes {
            for node in 0..n {
                for j in (0..v.modes).filter(|&j| j != i) {
                    let ob = v.value(j, level, node) - costs[(i * v.modes + j) * n + node];
                    worst = worst.max(ob - v.value(i, level, node));
                }
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeLocation {
    pub mode: usize,
    pub level: usize,
    pub node: usize,
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub max_abs: f64,
    pub location: Option<NodeLocation>,
    pub continuation_nodes: usize,
    pub switching_nodes: usize,
    /// Per-dimension bounds of the swept region.
    pub region: Vec<(f64, f64)>,
}

/// Discrete complementarity residual
/// `min(v_i - obstacle_i, -dv_i/dt - A v_i - psi_i)` on interior nodes of the
/// inner half of the box, at every level below the horizon.
///
/// The time derivative is the forward difference to the next level and `A` is
/// taken at that next level, the explicit-step convention. Near a moving
/// switching boundary the projected schemes carry a splitting error of order
/// `dt / dx^2`, so the residual shrinks under refinements that also shrink
/// that ratio.
pub fn residuals(v: &ValueField, p: &SwitchingProblem, slack_tol: f64) -> Result<ResidualReport> {
    let g = &v.grid;
    let n = g.n_nodes();
    let interior = g.interior_nodes();
    let mut unknown_of = vec![usize::MAX; n];
    for (u, &node) in interior.iter().enumerate() {
        unknown_of[node] = u;
    }
    let inner: Vec<(f64, f64)> = g
        .bounds
        .iter()
        .map(|&(lo, hi)| {
            let (mid, q) = (0.5 * (lo + hi), 0.25 * (hi - lo));
            (mid - q, mid + q)
        })
        .collect();
    let checked: Vec<usize> = (0..interior.len())
        .filter(|&u| {
            g.coords(interior[u])
                .iter()
                .zip(&inner)
                .all(|(x, &(lo, hi))| *x >= lo - 1e-12 && *x <= hi + 1e-12)
        })
        .collect();
    let dt = g.dt();
    let mut report = ResidualReport {
        max_abs: 0.0,
        location: None,
        continuation_nodes: 0,
        switching_nodes: 0,
        region: inner,
    };
    let mut a_next = vec![0.0; interior.len()];
    let gather = |mode: usize, level: usize| -> Vec<f64> {
        let lv = v.level(mode, level);
        interior.iter().map(|&node| lv[node]).collect()
    };
    let mut s_next = ResolvedStencil::new(&discretize_generator(p, g, g.time(g.n_time))?, g, &unknown_of);
    let frozen = !coefficients_depend_on_time(p);
    for level in (0..g.n_time).rev() {
        let t = g.time(level);
        if !frozen && level + 1 < g.n_time {
            s_next = ResolvedStencil::new(&discretize_generator(p, g, g.time(level + 1))?, g, &unknown_of);
        }
        let costs = cost_table(p, g, t)?;
        for i in 0..v.modes {
            let (u_now, u_next) = (gather(i, level), gather(i, level + 1));
            s_next.apply(&u_next, &mut a_next);
            for &u in &checked {
                let node = interior[u];
                let x = g.coords(node);
                let obstacle = (0..v.modes)
                    .filter(|&j| j != i)
                    .map(|j| v.value(j, level, node) - costs[(i * v.modes + j) * n + node])
                    .fold(f64::NEG_INFINITY, f64::max);
                let slack = u_now[u] - obstacle;
                let pde = -(u_next[u] - u_now[u]) / dt - a_next[u] - p.psi_at(i, t, &x)?;
                if slack > slack_tol {
                    report.continuation_nodes += 1;
                } else {
                    report.switching_nodes += 1;
                }
                let r = slack.min(pde).abs();
                if r > report.max_abs {
                    report.max_abs = r;
                    report.location = Some(NodeLocation {
                        mode: i,
                        level,
                        node,
                        t,
                        x,
                    });
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::problem_1d;

    #[test]
    fn heat_stencil_interior_row() {
        let p = problem_1d("0", "1", ["0", "0"], "0.5", 1.0);
        let g = Grid::new(vec![(-1.0, 1.0)], vec![11], 10, 1.0).unwrap();
        let s = discretize_generator(&p, &g, 0.0).unwrap();
        let row = s.rows.iter().find(|r| r.node == 5).unwrap();
        let h2 = g.dx(0) * g.dx(0);
        let expect = [(4, 0.5 / h2), (5, -1.0 / h2), (6, 0.5 / h2)];
        assert_eq!(row.entries.len(), 3);
        for ((n, c), (en, ec)) in row.entries.iter().zip(expect) {
            assert_eq!(*n, en);
            assert!((c - ec).abs() < 1e-9);
        }
    }

    #[test]
    fn drift_is_upwinded_by_sign() {
        let g = Grid::new(vec![(-1.0, 1.0)], vec![11], 10, 1.0).unwrap();
        let h = g.dx(0);
        let fwd = discretize_generator(&problem_1d("1", "0", ["0", "0"], "0.5", 1.0), &g, 0.0).unwrap();
        let row = &fwd.rows[3];
        assert_eq!(row.entries.len(), 2);
        assert!((row.entries[0].1 + 1.0 / h).abs() < 1e-9 && row.entries[0].0 == row.node);
        assert!((row.entries[1].1 - 1.0 / h).abs() < 1e-9 && row.entries[1].0 == row.node + 1);
        let bwd = discretize_generator(&problem_1d("-1", "0", ["0", "0"], "0.5", 1.0), &g, 0.0).unwrap();
        let row = &bwd.rows[3];
        assert_eq!(row.entries[0].0, row.node - 1);
        assert!((row.entries[0].1 - 1.0 / h).abs() < 1e-9);
    }

    #[test]
    fn face_extrapolation_is_linear() {
        let g = Grid::new(vec![(0.0, 1.0), (0.0, 2.0)], vec![6, 7], 4, 1.0).unwrap();
        let mut lv: Vec<f64> = (0..g.n_nodes())
            .map(|n| {
                let x = g.coords(n);
                if g.is_interior(n) {
                    1.0 + 2.0 * x[0] - 3.0 * x[1] + 0.5 * x[0] * x[1]
                } else {
                    f64::NAN
                }
            })
            .collect();
        g.fill_faces(&mut lv);
        for n in 0..g.n_nodes() {
            let x = g.coords(n);
            let exact = 1.0 + 2.0 * x[0] - 3.0 * x[1] + 0.5 * x[0] * x[1];
            assert!((lv[n] - exact).abs() < 1e-12, "node {n}");
        }
    }

    #[test]
    fn zero_data_gives_zero_field() {
        let p = problem_1d("0", "1", ["0", "0"], "0.5", 1.0);
        let g = Grid::for_problem(&p, &[41], 40).unwrap();
        for scheme in [FdScheme::Implicit, FdScheme::Explicit] {
            let opts = FdOptions { scheme, ..Default::default() };
            let v = solve_fd(&p, &g, &opts).unwrap();
            assert!(v.values.iter().all(|&x| x == 0.0));
            let r = residuals(&v, &p, 1e-8).unwrap();
            assert_eq!(r.max_abs, 0.0);
        }
    }

    #[test]
    fn identical_modes_never_switch() {
        let p = problem_1d("0", "1", ["1", "1"], "0.5", 1.0);
        let g = Grid::for_problem(&p, &[81], 100).unwrap();
        let v = solve_fd(&p, &g, &FdOptions::default()).unwrap();
        for node in 0..g.n_nodes() {
            assert!((v.value(0, 0, node) - 1.0).abs() < 1e-2);
            assert!((v.value(1, 0, node) - 1.0).abs() < 1e-2);
        }
        assert!(v.level(0, g.n_time).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn explicit_stability_is_checked() {
        let p = problem_1d("0", "1", ["1", "1"], "0.5", 1.0);
        let g = Grid::for_problem(&p, &[201], 50).unwrap();
        let opts = FdOptions {
            scheme: FdScheme::Explicit,
            ..Default::default()
        };
        assert!(matches!(solve_fd(&p, &g, &opts), Err(Error::Unstable { .. })));
    }

    #[test]
    fn policy_iteration_budget_is_enforced() {
        let p = problem_1d("0", "1", ["x1", "0 - x1"], "0.1", 1.0);
        let g = Grid::for_problem(&p, &[41], 40).unwrap();
        let opts = FdOptions {
            max_policy_iters: 1,
            ..Default::default()
        };
        assert!(matches!(solve_fd(&p, &g, &opts), Err(Error::PolicyIteration { .. })));
    }

    #[test]
    fn cache_round_trips() {
        let p = problem_1d("0", "1", ["x1", "0 - x1"], "0.1", 1.0);
        let g = Grid::for_problem(&p, &[21], 10).unwrap();
        let v = solve_fd(&p, &g, &FdOptions::default()).unwrap();
        let dir = std::env::temp_dir().join(format!("switchbox-cache-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("field.bin");
        v.write_cache(&path).unwrap();
        assert_eq!(ValueField::read_cache(&path).unwrap(), v);
        std::fs::write(&path, b"garbage").unwrap();
        assert!(ValueField::read_cache(&path).is_err());
        let _ = std::fs::remove_dir_all(dir);
    }

    #[test]
    fn interpolation_reproduces_nodes() {
        let p = problem_1d("0", "1", ["x1", "0 - x1"], "0.1", 1.0);
        let g = Grid::for_problem(&p, &[21], 10).unwrap();
        let v = solve_fd(&p, &g, &FdOptions::default()).unwrap();
        for node in [3, 10, 17] {
            let x = g.coords(node);
            assert!((v.interpolate(0, g.time(4), &x) - v.value(0, 4, node)).abs() < 1e-12);
        }
        let mid = 0.5 * (g.coords(3)[0] + g.coords(4)[0]);
        let lin = 0.5 * (v.value(1, 2, 3) + v.value(1, 2, 4));
        assert!((v.interpolate(1, g.time(2), &[mid]) - lin).abs() < 1e-12);
    }
}
