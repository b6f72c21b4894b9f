//! Small dense and banded linear algebra used by the solvers.

use nalgebra::{DMatrix, DVector};

/// Smallest eigenvalue of a symmetric n x n row-major matrix.
pub fn min_eigenvalue_sym(a: &[f64], n: usize) -> f64 {
    match n {
        0 => 0.0,
        1 => a[0],
        2 => sym2_eigenvalues(a[0], a[1], a[3]).0,
        _ => {
            let m = DMatrix::from_row_slice(n, n, a);
            m.symmetric_eigenvalues().min()
        }
    }
}

/// Eigenvalues (ascending) of `[[a, b], [b, c]]`.
pub fn sym2_eigenvalues(a: f64, b: f64, c: f64) -> (f64, f64) {
    let mean = 0.5 * (a + c);
    let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    (mean - r, mean + r)
}

/// Banded matrix in row-compressed form: row `i` stores columns
/// `i - lower ..= i + upper`.
#[derive(Debug, Clone)]
pub struct BandedMatrix {
    pub n: usize,
    pub lower: usize,
    pub upper: usize,
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, lower: usize, upper: usize) -> Self {
        BandedMatrix {
            n,
            lower,
            upper,
            data: vec![0.0; n * (lower + upper + 1)],
        }
    }

    fn width(&self) -> usize {
        self.lower + self.upper + 1
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.lower >= i && j <= i + self.upper);
        i * self.width() + (j + self.lower - i)
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.lower < i || j > i + self.upper {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// In-place LU without pivoting. Fails on a (near) zero pivot.
    pub fn factorize(mut self) -> Result<BandedLu, String> {
        let (n, lo, up) = (self.n, self.lower, self.upper);
        for k in 0..n {
            let pivot = self.data[self.idx(k, k)];
            if !(pivot.abs() > 1e-300) || !pivot.is_finite() {
                return Err(format!("zero pivot in row {k}"));
            }
            let row_end = (k + lo).min(n - 1);
            let col_end = (k + up).min(n - 1);
            for i in k + 1..=row_end {
                let ik = self.idx(i, k);
                let factor = self.data[ik] / pivot;
                self.data[ik] = factor;
                if factor == 0.0 {
                    continue;
                }
                for j in k + 1..=col_end {
                    let kj = self.data[self.idx(k, j)];
                    let ij = self.idx(i, j);
                    self.data[ij] -= factor * kj;
                }
            }
        }
        Ok(BandedLu { m: self })
    }
}

#[derive(Debug, Clone)]
pub struct BandedLu {
    m: BandedMatrix,
}

impl BandedLu {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let m = &self.m;
        let n = m.n;
        for i in 0..n {
            let start = i.saturating_sub(m.lower);
            let mut s = b[i];
            for j in start..i {
                s -= m.data[m.idx(i, j)] * b[j];
            }
            b[i] = s;
        }
        for i in (0..n).rev() {
            let end = (i + m.upper).min(n - 1);
            let mut s = b[i];
            for j in i + 1..=end {
                s -= m.data[m.idx(i, j)] * b[j];
            }
            b[i] = s / m.data[m.idx(i, i)];
        }
    }
}

/// Result of a least-squares fit.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub coefficients: Vec<f64>,
}

/// Cholesky factor of a Gram matrix `X^T X`, reusable for many right-hand sides.
#[derive(Debug, Clone)]
pub struct GramFactor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl GramFactor {
    /// Factors a symmetric Gram matrix given row-major. Returns `None` when it
    /// is numerically rank deficient.
    pub fn new(gram: &[f64], cols: usize) -> Option<GramFactor> {
        let gram = DMatrix::from_row_slice(cols, cols, gram);
        let diag_max = (0..cols).map(|a| gram[(a, a)]).fold(0.0f64, f64::max);
        if !(diag_max > 0.0) {
            return None;
        }
        let eig = gram.clone().symmetric_eigenvalues();
        if eig.min() <= 1e-10 * eig.max() {
            return None;
        }
        Some(GramFactor { chol: gram.cholesky()? })
    }

    /// Solves `X^T X beta = rhs` where `rhs = X^T y`.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        self.chol.solve(&DVector::from_column_slice(rhs)).iter().copied().collect()
    }
}

/// Solves `min ||X beta - y||` through the normal equations with Cholesky.
/// `design` is row-major `rows x cols`. Returns `None` if the Gram matrix is
/// numerically rank deficient.
pub fn least_squares(design: &[f64], rows: usize, cols: usize, y: &[f64]) -> Option<LeastSquares> {
    let mut gram = vec![0.0; cols * cols];
    let mut rhs = vec![0.0; cols];
    for r in 0..rows {
        let row = &design[r * cols..(r + 1) * cols];
        for a in 0..cols {
            rhs[a] += row[a] * y[r];
            for b in a..cols {
                gram[a * cols + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..cols {
        for b in 0..a {
            gram[a * cols + b] = gram[b * cols + a];
        }
    }
    let factor = GramFactor::new(&gram, cols)?;
    Some(LeastSquares {
        coefficients: factor.solve(&rhs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_eigenvalues_by_hand_formula() {
        let (l0, l1) = sym2_eigenvalues(1.0, 0.5, 1.0);
        assert!((l0 - 0.5).abs() < 1e-15 && (l1 - 1.5).abs() < 1e-15);
        assert!((min_eigenvalue_sym(&[1.0, 0.5, 0.5, 1.0], 2) - 0.5).abs() < 1e-15);
        assert!((min_eigenvalue_sym(&[2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 3.0], 3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn banded_lu_matches_dense_solve() {
        let n = 12;
        let mut band = BandedMatrix::zeros(n, 3, 2);
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(3)..=(i + 2).min(n - 1) {
                let v = if i == j { 6.0 } else { ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.5 };
                band.add(i, j, v);
                dense[(i, j)] = v;
            }
        }
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let lu = band.factorize().unwrap();
        let mut x = b.clone();
        lu.solve_in_place(&mut x);
        let expect = dense.lu().solve(&DVector::from_vec(b)).unwrap();
        for i in 0..n {
            assert!((x[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn least_squares_recovers_polynomial_and_flags_rank_deficiency() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 / 10.0 - 2.0).collect();
        let design: Vec<f64> = xs.iter().flat_map(|&x| [1.0, x, x * x]).collect();
        let y: Vec<f64> = xs.iter().map(|&x| 1.0 - 2.0 * x + 0.5 * x * x).collect();
        let fit = least_squares(&design, 50, 3, &y).unwrap();
        for (c, e) in fit.coefficients.iter().zip([1.0, -2.0, 0.5]) {
            assert!((c - e).abs() < 1e-9);
        }
        let flat: Vec<f64> = xs.iter().flat_map(|_| [1.0, 0.0]).collect();
        assert!(least_squares(&flat, 50, 2, &y).is_none());
    }
}
