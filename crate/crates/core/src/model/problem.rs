use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::expr::{CoeffExpr, ExprError};
use crate::error::{Error, Result};

/// Drift `b` (k entries) and volatility `sigma` (k x d) of the controlled-free state process.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSpec {
    pub dim: usize,
    pub brownian_dim: usize,
    pub drift: Vec<CoeffExpr>,
    /// Row-major, `vol[r][c]` multiplies the c-th Brownian increment in component r.
    pub vol: Vec<Vec<CoeffExpr>>,
    /// Declared C in `|b| + |sigma| <= C (1 + |x|)`, checked by sampling.
    pub growth_constant: Option<f64>,
}

impl DiffusionSpec {
    pub fn drift_at(&self, t: f64, x: &[f64], out: &mut [f64]) -> std::result::Result<(), ExprError> {
        for (o, b) in out.iter_mut().zip(&self.drift) {
            *o = b.eval(t, x)?;
        }
        Ok(())
    }

    /// Fills `out` (k*d, row-major) with sigma(t, x).
    pub fn vol_at(&self, t: f64, x: &[f64], out: &mut [f64]) -> std::result::Result<(), ExprError> {
        let d = self.brownian_dim;
        for (r, row) in self.vol.iter().enumerate() {
            for (c, s) in row.iter().enumerate() {
                out[r * d + c] = s.eval(t, x)?;
            }
        }
        Ok(())
    }

    /// sigma sigma^T at (t, x), k*k row-major.
    pub fn covariance_at(&self, t: f64, x: &[f64]) -> std::result::Result<Vec<f64>, ExprError> {
        let (k, d) = (self.dim, self.brownian_dim);
        let mut s = vec![0.0; k * d];
        self.vol_at(t, x, &mut s)?;
        let mut a = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                a[i * k + j] = (0..d).map(|c| s[i * d + c] * s[j * d + c]).sum();
            }
        }
        Ok(a)
    }

    pub fn is_deterministic(&self) -> bool {
        self.vol.iter().flatten().all(|s| s.as_const() == Some(0.0))
    }
}

/// An m-mode optimal switching problem on `[0, T] x R^k` with zero terminal value.
///
/// Modes are zero-based internally; files and reports use 1-based labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingProblem {
    pub name: String,
    pub modes: usize,
    pub diffusion: DiffusionSpec,
    pub psi: Vec<CoeffExpr>,
    /// `cost[i][j]` is the cost of switching i -> j; `None` exactly on the diagonal.
    pub cost: Vec<Vec<Option<CoeffExpr>>>,
    pub alpha: f64,
    pub horizon: f64,
    pub growth_gamma: f64,
    /// Declared C in `|psi_i| + |g_ij| <= C (1 + |x|^gamma)`.
    pub growth_constant: Option<f64>,
    pub x0: Vec<f64>,
    pub initial_mode: usize,
    pub validation_box: Vec<(f64, f64)>,
    /// Truncated computational box for grid solvers; derived from x0 and sigma when absent.
    pub domain: Option<Vec<(f64, f64)>>,
}

impl SwitchingProblem {
    pub fn dim(&self) -> usize {
        self.diffusion.dim
    }

    pub fn psi_at(&self, mode: usize, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.psi[mode].eval(t, x)?)
    }

    pub fn cost_at(&self, from: usize, to: usize, t: f64, x: &[f64]) -> Result<f64> {
        let g = self.cost[from][to]
            .as_ref()
            .expect("switching cost requested on the diagonal");
        Ok(g.eval(t, x)?)
    }

    /// Structural checks that reject a problem outright.
    pub fn check_structure(&self) -> Result<()> {
        let k = self.diffusion.dim;
        let structural = |msg: String| Err(Error::Structural(msg));
        if self.modes < 2 {
            return structural(format!(
                "at least two modes are required, got {}",
                self.modes
            ));
        }
        if k == 0 || self.diffusion.brownian_dim == 0 {
            return structural("state and Brownian dimensions must be positive".into());
        }
        if self.diffusion.drift.len() != k {
            return structural(format!("drift has {} entries, expected {k}", self.diffusion.drift.len()));
        }
        if self.diffusion.vol.len() != k
            || self
                .diffusion
                .vol
                .iter()
                .any(|r| r.len() != self.diffusion.brownian_dim)
        {
            return structural(format!(
                "volatility must be a {k} x {} matrix",
                self.diffusion.brownian_dim
            ));
        }
        if self.psi.len() != self.modes {
            return structural(format!(
                "{} profit rates given for {} modes",
                self.psi.len(),
                self.modes
            ));
        }
        if self.cost.len() != self.modes || self.cost.iter().any(|r| r.len() != self.modes) {
            return structural("switching cost table has the wrong shape".into());
        }
        for i in 0..self.modes {
            for j in 0..self.modes {
                match (&self.cost[i][j], i == j) {
                    (Some(_), true) => {
                        return structural(format!(
                            "diagonal switching cost {}->{} is not allowed",
                            i + 1,
                            j + 1
                        ))
                    }
                    (None, false) => {
                        return structural(format!("missing switching cost {}->{}", i + 1, j + 1))
                    }
                    _ => {}
                }
            }
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return structural(format!("cost floor alpha must be positive, got {}", self.alpha));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return structural(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.initial_mode >= self.modes {
            return structural(format!(
                "initial mode {} outside 1..={}",
                self.initial_mode + 1,
                self.modes
            ));
        }
        if self.x0.len() != k {
            return structural(format!("x0 has {} entries, expected {k}", self.x0.len()));
        }
        if self.validation_box.len() != k || self.validation_box.iter().any(|(lo, hi)| !(lo < hi)) {
            return structural("validation box must give lo < hi for every dimension".into());
        }
        if let Some(dom) = &self.domain {
            if dom.len() != k || dom.iter().any(|(lo, hi)| !(lo < hi)) {
                return structural("domain must give lo < hi for every dimension".into());
            }
        }
        let all = self
            .psi
            .iter()
            .chain(self.cost.iter().flatten().flatten())
            .chain(&self.diffusion.drift)
            .chain(self.diffusion.vol.iter().flatten());
        for e in all {
            if e.required_dim() > k {
                return structural(format!("`{e}` refers to x{} but dimension is {k}", e.required_dim()));
            }
        }
        Ok(())
    }

    /// Box used by the grid solvers. When no domain is declared, each face sits
    /// four diffusion standard deviations (over the horizon) plus the drift
    /// excursion away from x0.
    pub fn computational_box(&self) -> Result<Vec<(f64, f64)>> {
        if let Some(d) = &self.domain {
            return Ok(d.clone());
        }
        let k = self.dim();
        let cov = self.diffusion.covariance_at(0.0, &self.x0)?;
        let mut drift = vec![0.0; k];
        self.diffusion.drift_at(0.0, &self.x0, &mut drift)?;
        Ok((0..k)
            .map(|i| {
                let sd = (cov[i * k + i] * self.horizon).sqrt();
                let mut half = 4.0 * sd + drift[i].abs() * self.horizon;
                if half == 0.0 {
                    half = self.x0[i].abs().max(1.0);
                }
                (self.x0[i] - half, self.x0[i] + half)
            })
            .collect())
    }

    /// Stable content hash over the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_file().to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ProblemFile =
            toml::from_str(text).map_err(|e| Error::ProblemFile(e.to_string()))?;
        file.into_problem()
    }

    /// Reads a problem file; a path without extension also tries `<path>.toml`.
    pub fn load(path: &Path) -> Result<Self> {
        let resolved = if path.is_file() {
            path.to_path_buf()
        } else {
            path.with_extension("toml")
        };
        let text = std::fs::read_to_string(&resolved)
            .map_err(|e| Error::Io(format!("{}: {e}", resolved.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_file(&self) -> ProblemFile {
        let text = |e: &CoeffExpr| CoeffSpec::Expr(e.to_string());
        let mut cost = BTreeMap::new();
        for (i, row) in self.cost.iter().enumerate() {
            for (j, g) in row.iter().enumerate() {
                if let Some(g) = g {
                    cost.insert(format!("{}->{}", i + 1, j + 1), text(g));
                }
            }
        }
        ProblemFile {
            name: self.name.clone(),
            dimension: self.dim(),
            brownian_dimension: self.diffusion.brownian_dim,
            modes: self.modes,
            horizon: self.horizon,
            alpha: self.alpha,
            x0: self.x0.clone(),
            initial_mode: self.initial_mode + 1,
            diffusion: DiffusionFile {
                drift: self.diffusion.drift.iter().map(text).collect(),
                volatility: self
                    .diffusion
                    .vol
                    .iter()
                    .map(|r| r.iter().map(text).collect())
                    .collect(),
                growth_constant: self.diffusion.growth_constant,
            },
            psi: self.psi.iter().map(text).collect(),
            switching_cost: cost,
            growth: GrowthFile {
                gamma: self.growth_gamma,
                constant: self.growth_constant,
            },
            validation: ValidationFile {
                r#box: self.validation_box.iter().map(|&(a, b)| [a, b]).collect(),
            },
            domain: self
                .domain
                .as_ref()
                .map(|d| d.iter().map(|&(a, b)| [a, b]).collect()),
        }
    }
}

// ---- on-disk format ----

/// A coefficient in a problem file: a number, a DSL string, or a named family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoeffSpec {
    Number(f64),
    Expr(String),
    Family(FamilySpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    Constant {
        value: f64,
    },
    /// `intercept + sum_i slope[i] * x_{i+1} + time_slope * t`
    Affine {
        #[serde(default)]
        intercept: f64,
        #[serde(default)]
        slope: Vec<f64>,
        #[serde(default)]
        time_slope: f64,
    },
    /// `rate * x_component` (geometric Brownian motion style coefficient)
    Geometric {
        rate: f64,
        #[serde(default = "one")]
        component: usize,
    },
}

fn one() -> usize {
    1
}

impl CoeffSpec {
    pub fn to_expr(&self) -> std::result::Result<CoeffExpr, ExprError> {
        match self {
            CoeffSpec::Number(v) => Ok(CoeffExpr::constant(*v)),
            CoeffSpec::Expr(s) => CoeffExpr::parse(s),
            CoeffSpec::Family(f) => CoeffExpr::parse(&f.to_source()),
        }
    }
}

impl FamilySpec {
    fn to_source(&self) -> String {
        match self {
            FamilySpec::Constant { value } => fmt_num(*value),
            FamilySpec::Affine {
                intercept,
                slope,
                time_slope,
            } => {
                let mut s = fmt_num(*intercept);
                for (i, c) in slope.iter().enumerate() {
                    if *c != 0.0 {
                        s.push_str(&format!(" + {} * x{}", fmt_num(*c), i + 1));
                    }
                }
                if *time_slope != 0.0 {
                    s.push_str(&format!(" + {} * t", fmt_num(*time_slope)));
                }
                s
            }
            FamilySpec::Geometric { rate, component } => {
                format!("{} * x{component}", fmt_num(*rate))
            }
        }
    }
}

fn fmt_num(v: f64) -> String {
    if v < 0.0 {
        format!("(0 - {})", -v)
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub name: String,
    pub dimension: usize,
    #[serde(default = "one")]
    pub brownian_dimension: usize,
    pub modes: usize,
    pub horizon: f64,
    pub alpha: f64,
    pub x0: Vec<f64>,
    #[serde(default = "one")]
    pub initial_mode: usize,
    pub psi: Vec<CoeffSpec>,
    pub diffusion: DiffusionFile,
    /// Keys are `"i->j"` with 1-based modes.
    pub switching_cost: BTreeMap<String, CoeffSpec>,
    pub growth: GrowthFile,
    pub validation: ValidationFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionFile {
    pub drift: Vec<CoeffSpec>,
    pub volatility: Vec<Vec<CoeffSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth_constant: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthFile {
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationFile {
    pub r#box: Vec<[f64; 2]>,
}

impl ProblemFile {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("problem file always serializes")
    }

    pub fn into_problem(self) -> Result<SwitchingProblem> {
        let m = self.modes;
        let conv = |what: String, c: &CoeffSpec| {
            c.to_expr()
                .map_err(|e| Error::ProblemFile(format!("{what}: {e}")))
        };
        let psi = self
            .psi
            .iter()
            .enumerate()
            .map(|(i, c)| conv(format!("psi[{}]", i + 1), c))
            .collect::<Result<Vec<_>>>()?;
        let mut cost: Vec<Vec<Option<CoeffExpr>>> = vec![vec![None; m]; m];
        for (key, spec) in &self.switching_cost {
            let (i, j) = parse_pair(key).ok_or_else(|| {
                Error::ProblemFile(format!("switching_cost key `{key}` is not of the form \"i->j\""))
            })?;
            if i == 0 || j == 0 || i > m || j > m {
                return Err(Error::Structural(format!(
                    "switching_cost `{key}` names a mode outside 1..={m}"
                )));
            }
            if i == j {
                return Err(Error::Structural(format!(
                    "diagonal switching cost `{key}` is not allowed"
                )));
            }
            cost[i - 1][j - 1] = Some(conv(format!("switching_cost {key}"), spec)?);
        }
        let drift = self
            .diffusion
            .drift
            .iter()
            .enumerate()
            .map(|(i, c)| conv(format!("drift[{}]", i + 1), c))
            .collect::<Result<Vec<_>>>()?;
        let vol = self
            .diffusion
            .volatility
            .iter()
            .enumerate()
            .map(|(r, row)| {
                row.iter()
                    .enumerate()
                    .map(|(c, s)| conv(format!("volatility[{}][{}]", r + 1, c + 1), s))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        if self.initial_mode == 0 {
            return Err(Error::Structural("initial_mode is 1-based".into()));
        }
        let problem = SwitchingProblem {
            name: self.name,
            modes: m,
            diffusion: DiffusionSpec {
                dim: self.dimension,
                brownian_dim: self.brownian_dimension,
                drift,
                vol,
                growth_constant: self.diffusion.growth_constant,
            },
            psi,
            cost,
            alpha: self.alpha,
            horizon: self.horizon,
            growth_gamma: self.growth.gamma,
            growth_constant: self.growth.constant,
            x0: self.x0,
            initial_mode: self.initial_mode - 1,
            validation_box: self.validation.r#box.iter().map(|b| (b[0], b[1])).collect(),
            domain: self.domain.map(|d| d.iter().map(|b| (b[0], b[1])).collect()),
        };
        problem.check_structure()?;
        Ok(problem)
    }
}

fn parse_pair(key: &str) -> Option<(usize, usize)> {
    let (a, b) = key.split_once("->")?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_MODE: &str = r#"
name = "demo"
dimension = 1
modes = 2
horizon = 1.0
alpha = 0.5
x0 = [0.0]
psi = ["x1", { family = "affine", intercept = 1.0, slope = [-2.0] }]

[diffusion]
drift = [0]
volatility = [[{ family = "constant", value = 1.0 }]]

[switching_cost]
"1->2" = 0.5
"2->1" = "0.5 + 0.1*abs(x1)"

[growth]
gamma = 1.0
constant = 3.0

[validation]
box = [[-3.0, 3.0]]
"#;

    #[test]
    fn parses_problem_file() {
        let p = SwitchingProblem::from_toml_str(TWO_MODE).unwrap();
        assert_eq!(p.modes, 2);
        assert_eq!(p.initial_mode, 0);
        assert_eq!(p.psi_at(1, 0.0, &[2.0]).unwrap(), -3.0);
        assert_eq!(p.cost_at(1, 0, 0.0, &[-1.0]).unwrap(), 0.6);
        assert!(p.cost[0][0].is_none());
    }

    #[test]
    fn canonical_form_round_trips() {
        let p = SwitchingProblem::from_toml_str(TWO_MODE).unwrap();
        let text = p.to_file().to_toml();
        let q = SwitchingProblem::from_toml_str(&text).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.hash(), q.hash());
    }

    #[test]
    fn rejects_single_mode_and_diagonal_cost() {
        let single = TWO_MODE
            .replace("modes = 2", "modes = 1")
            .replace(r#""2->1" = "0.5 + 0.1*abs(x1)""#, "");
        let single = single.replace(r#""1->2" = 0.5"#, "");
        assert!(matches!(
            SwitchingProblem::from_toml_str(&single),
            Err(Error::Structural(_))
        ));
        let diag = TWO_MODE.replace(r#""1->2" = 0.5"#, "\"1->2\" = 0.5\n\"1->1\" = 0.0");
        assert!(matches!(
            SwitchingProblem::from_toml_str(&diag),
            Err(Error::Structural(_))
        ));
        let missing = TWO_MODE.replace(r#""1->2" = 0.5"#, "");
        assert!(matches!(
            SwitchingProblem::from_toml_str(&missing),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn rejects_bad_expressions_and_dimensions() {
        let bad = TWO_MODE.replace(r#"psi = ["x1""#, r#"psi = ["x1 +""#);
        assert!(matches!(
            SwitchingProblem::from_toml_str(&bad),
            Err(Error::ProblemFile(_))
        ));
        let dim = TWO_MODE.replace(r#"psi = ["x1""#, r#"psi = ["x2""#);
        assert!(matches!(
            SwitchingProblem::from_toml_str(&dim),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn default_box_is_four_standard_deviations() {
        let p = SwitchingProblem::from_toml_str(TWO_MODE).unwrap();
        assert_eq!(p.computational_box().unwrap(), vec![(-4.0, 4.0)]);
    }
}
