//! Dense row-major matrices and the handful of kernels the solvers share:
//! Gram products, rank-1 updates, power iteration and the Cholesky-based
//! sequential inverse used by GPTQ.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims("DenseMatrix::from_vec", rows * cols, data.len()));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows; panics on ragged input. Meant for tests and fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        DenseMatrix { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self.data[i * self.cols + j] = v;
        }
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// First non-finite entry, if any.
    pub fn find_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|k| (k / self.cols.max(1), k % self.cols.max(1)))
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.find_non_finite() {
            Some((row, col)) => Err(Error::NonFinite { row, col }),
            None => Ok(()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::dims("DenseMatrix::sub", fmt_shape(self.shape()), fmt_shape(other.shape())));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(DenseMatrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::dims("DenseMatrix::add", fmt_shape(self.shape()), fmt_shape(other.shape())));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(DenseMatrix { rows: self.rows, cols: self.cols, data })
    }

    /// `self · other` with an i-k-j loop order so the inner loop streams rows.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::dims("matmul", format!("lhs cols = rhs rows ({})", self.cols), other.rows));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, other.row(k), out_row);
            }
        }
        Ok(out)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub(crate) fn fmt_shape((r, c): (usize, usize)) -> String {
    format!("{r}x{c}")
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Σ = X·Xᵀ for a p×n matrix X.
///
/// Only the upper triangle is accumulated; the lower triangle is mirrored so
/// the result is exactly symmetric.
pub fn gram(x: &DenseMatrix) -> Result<DenseMatrix> {
    let (p, n) = x.shape();
    if p == 0 || n == 0 {
        return Err(Error::EmptyProblem("gram of a matrix with a zero dimension"));
    }
    let mut sigma = DenseMatrix::zeros(p, p);
    for a in 0..p {
        let ra = x.row(a);
        for b in a..p {
            let v = dot(ra, x.row(b));
            sigma[(a, b)] = v;
            sigma[(b, a)] = v;
        }
    }
    Ok(sigma)
}

/// In-place `M ← M + sign·u·vᵀ`. `sign` must be `+1.0` or `-1.0`.
pub fn rank1_update(m: &mut DenseMatrix, u: &[f64], v: &[f64], sign: f64) -> Result<()> {
    if u.len() != m.rows || v.len() != m.cols {
        return Err(Error::dims(
            "rank1_update",
            fmt_shape(m.shape()),
            format!("u={}, v={}", u.len(), v.len()),
        ));
    }
    if sign != 1.0 && sign != -1.0 {
        return Err(Error::Contract(format!("rank1_update sign must be ±1, got {sign}")));
    }
    for (i, &ui) in u.iter().enumerate() {
        if ui == 0.0 {
            continue;
        }
        axpy(sign * ui, v, m.row_mut(i));
    }
    Ok(())
}

/// Result of [`power_method`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub lambda_max: f64,
    pub iterations_used: usize,
    /// `‖Σu − λu‖ / λ` for the final unit iterate `u`.
    pub residual: f64,
}

pub const POWER_TOL: f64 = 1e-6;
pub const POWER_MAX_ITER: usize = 1000;

/// Largest eigenvalue of a symmetric PSD matrix by power iteration from a
/// seeded Gaussian start. Stops once the relative residual drops to `tol`.
pub fn power_method(sigma: &DenseMatrix, tol: f64, max_iter: usize, seed: u64) -> Result<SpectralEstimate> {
    let (p, c) = sigma.shape();
    if p != c {
        return Err(Error::dims("power_method", "square matrix", fmt_shape(sigma.shape())));
    }
    if p == 0 {
        return Err(Error::EmptyProblem("power_method on a 0x0 matrix"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut u);
    let mut w = vec![0.0; p];
    let mut lambda = 0.0;
    let mut residual = f64::INFINITY;

    for it in 1..=max_iter {
        matvec(sigma, &u, &mut w);
        lambda = dot(&u, &w);
        if lambda <= 0.0 {
            // Σu = 0 for a PSD Σ means u lies in the null space; if Σ is the zero
            // matrix that is the answer, otherwise restart along a basis vector.
            if sigma.max_abs() == 0.0 {
                return Ok(SpectralEstimate {
                    lambda_max: 0.0,
                    iterations_used: it,
                    residual: 0.0,
                });
            }
            u.iter_mut().for_each(|x| *x = 0.0);
            u[(it - 1) % p] = 1.0;
            continue;
        }
        let r: f64 = u
            .iter()
            .zip(&w)
            .map(|(ui, wi)| (wi - lambda * ui).powi(2))
            .sum::<f64>()
            .sqrt();
        residual = r / lambda;
        if residual <= tol {
            return Ok(SpectralEstimate {
                lambda_max: lambda,
                iterations_used: it,
                residual,
            });
        }
        u.copy_from_slice(&w);
        normalize(&mut u);
    }
    Err(Error::NotConverged {
        estimate: lambda,
        iterations: max_iter,
        residual,
    })
}

fn normalize(u: &mut [f64]) {
    let norm = dot(u, u).sqrt();
    if norm > 0.0 {
        u.iter_mut().for_each(|x| *x /= norm);
    }
}

pub(crate) fn matvec(m: &DenseMatrix, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(i), x);
    }
}

/// Lower Cholesky factor `L` with `A = L·Lᵀ`.
pub fn cholesky(a: &DenseMatrix) -> Result<DenseMatrix> {
    let (n, c) = a.shape();
    if n != c {
        return Err(Error::dims("cholesky", "square matrix", fmt_shape(a.shape())));
    }
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let d = a[(j, j)] - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let s = a[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Inverse of a lower-triangular matrix by forward substitution.
pub fn invert_lower_triangular(l: &DenseMatrix) -> Result<DenseMatrix> {
    let n = l.rows();
    let mut inv = DenseMatrix::zeros(n, n);
    for col in 0..n {
        // solve L x = e_col; x[i] = 0 for i < col
        for i in col..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= l[(i, k)] * inv[(k, col)];
            }
            let d = l[(i, i)];
            if d == 0.0 {
                return Err(Error::NotPositiveDefinite { pivot: i, value: d });
            }
            inv[(i, col)] = s / d;
        }
    }
    Ok(inv)
}

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
pub fn invert_spd(a: &DenseMatrix) -> Result<DenseMatrix> {
    let l = cholesky(a)?;
    let linv = invert_lower_triangular(&l)?;
    // A⁻¹ = L⁻ᵀ L⁻¹
    let n = a.rows();
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let start = j; // L⁻¹[k, i] is zero for k < i, and for k < j in the other factor
            let mut s = 0.0;
            for k in start..n {
                s += linv[(k, i)] * linv[(k, j)];
            }
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    Ok(out)
}

/// Diagonal entries and trailing rows of `(Σ[j.., j..])⁻¹` for every `j`.
///
/// With `Σ = V·Vᵀ` for an upper-triangular `V` and `U = V⁻¹`, the inverse of
/// each trailing block is `U[j..,j..]ᵀ·U[j..,j..]`, so its first row is
/// `U[j,j]·U[j, j..]`. One reverse-ordered Cholesky and one triangular
/// inversion therefore serve every column of a GPTQ pass.
#[derive(Debug, Clone)]
pub struct SequentialInverse {
    u: DenseMatrix,
}

impl SequentialInverse {
    pub fn new(sigma: &DenseMatrix) -> Result<Self> {
        let n = sigma.rows();
        if sigma.cols() != n {
            return Err(Error::dims("SequentialInverse", "square matrix", fmt_shape(sigma.shape())));
        }
        if n == 0 {
            return Err(Error::EmptyProblem("SequentialInverse of a 0x0 matrix"));
        }
        // Factor with the index order reversed so that Σ = V Vᵀ with V upper.
        let rev = DenseMatrix::from_fn(n, n, |i, j| sigma[(n - 1 - i, n - 1 - j)]);
        let l_rev = cholesky(&rev).map_err(|e| match e {
            Error::NotPositiveDefinite { pivot, value } => Error::NotPositiveDefinite {
                pivot: n - 1 - pivot,
                value,
            },
            other => other,
        })?;
        let linv_rev = invert_lower_triangular(&l_rev)?;
        let u = DenseMatrix::from_fn(n, n, |i, j| linv_rev[(n - 1 - i, n - 1 - j)]);
        Ok(SequentialInverse { u })
    }

    pub fn dim(&self) -> usize {
        self.u.rows()
    }

    /// `[Σ_F⁻¹]_{j,j}` with `F = {j, …, p−1}`.
    #[inline]
    pub fn diag(&self, j: usize) -> f64 {
        let d = self.u[(j, j)];
        d * d
    }

    /// `[Σ_F⁻¹]_{j, j+1..p}`.
    pub fn row_tail(&self, j: usize) -> Vec<f64> {
        let d = self.u[(j, j)];
        self.u.row(j)[j + 1..].iter().map(|v| d * v).collect()
    }

    /// Upper-triangular factor `U` (`Σ⁻¹ = Uᵀ·U`).
    pub fn factor(&self) -> &DenseMatrix {
        &self.u
    }
}

/// Convenience wrapper matching the per-index access pattern of GPTQ.
pub fn cholesky_inverse_diag_and_rows(sigma_f: &DenseMatrix) -> Result<SequentialInverse> {
    SequentialInverse::new(sigma_f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn gauss_jordan_inverse(a: &DenseMatrix) -> DenseMatrix {
        let n = a.rows();
        let mut m = a.clone();
        let mut inv = DenseMatrix::identity(n);
        for c in 0..n {
            let piv = (c..n).max_by(|&x, &y| m[(x, c)].abs().total_cmp(&m[(y, c)].abs())).unwrap();
            for k in 0..n {
                let t = m[(c, k)];
                m[(c, k)] = m[(piv, k)];
                m[(piv, k)] = t;
                let t = inv[(c, k)];
                inv[(c, k)] = inv[(piv, k)];
                inv[(piv, k)] = t;
            }
            let d = m[(c, c)];
            for k in 0..n {
                m[(c, k)] /= d;
                inv[(c, k)] /= d;
            }
            for r in 0..n {
                if r != c {
                    let f = m[(r, c)];
                    for k in 0..n {
                        m[(r, k)] -= f * m[(c, k)];
                        inv[(r, k)] -= f * inv[(c, k)];
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn gram_identity_and_hand_case() {
        assert_eq!(gram(&DenseMatrix::identity(2)).unwrap(), DenseMatrix::identity(2));
        let x = DenseMatrix::from_rows(&[&[1.0, 1.0], &[0.0, 0.0]]);
        assert_eq!(gram(&x).unwrap(), DenseMatrix::from_rows(&[&[2.0, 0.0], &[0.0, 0.0]]));
    }

    #[test]
    fn gram_matches_triple_loop() {
        let x = random(4, 8, 1);
        let s = gram(&x).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let mut acc = 0.0;
                for k in 0..8 {
                    acc += x[(a, k)] * x[(b, k)];
                }
                assert!((s[(a, b)] - acc).abs() <= 1e-12 * acc.abs().max(1.0));
            }
        }
        assert_eq!(s, s.transpose());
    }

    #[test]
    fn gram_rejects_empty() {
        assert!(matches!(gram(&DenseMatrix::zeros(0, 3)), Err(Error::EmptyProblem(_))));
        assert!(matches!(gram(&DenseMatrix::zeros(3, 0)), Err(Error::EmptyProblem(_))));
    }

    #[test]
    fn rank1_single_entry_and_involution() {
        let mut m = DenseMatrix::zeros(3, 3);
        rank1_update(&mut m, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], 1.0).unwrap();
        let mut expected = DenseMatrix::zeros(3, 3);
        expected[(0, 1)] = 1.0;
        assert_eq!(m, expected);
        rank1_update(&mut m, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], -1.0).unwrap();
        assert_eq!(m, DenseMatrix::zeros(3, 3));
    }

    #[test]
    fn rank1_matches_elementwise_oracle() {
        let m0 = random(5, 7, 2);
        let u: Vec<f64> = random(1, 5, 3).into_vec();
        let v: Vec<f64> = random(1, 7, 4).into_vec();
        let mut m = m0.clone();
        rank1_update(&mut m, &u, &v, -1.0).unwrap();
        for i in 0..5 {
            for j in 0..7 {
                assert_eq!(m[(i, j)], m0[(i, j)] + -u[i] * v[j]);
            }
        }
    }

    #[test]
    fn rank1_dimension_mismatch() {
        let mut m = DenseMatrix::zeros(2, 3);
        assert!(matches!(
            rank1_update(&mut m, &[1.0], &[1.0, 2.0, 3.0], 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn power_method_diagonal_and_identity() {
        let est = power_method(&DenseMatrix::diag(&[3.0, 1.0, 0.0]), 1e-6, 1000, 0).unwrap();
        assert!((est.lambda_max - 3.0).abs() <= 1e-6 * 3.0);
        let est = power_method(&DenseMatrix::identity(5), 1e-6, 1000, 0).unwrap();
        assert!((est.lambda_max - 1.0).abs() <= 1e-6);
        assert!(est.residual <= 1e-6);
    }

    #[test]
    fn power_method_zero_matrix() {
        let est = power_method(&DenseMatrix::zeros(3, 3), 1e-6, 10, 0).unwrap();
        assert_eq!(est.lambda_max, 0.0);
    }

    #[test]
    fn power_method_reports_non_convergence() {
        // eigenvalues 1 and 0.999999: the residual decays far too slowly for 3 steps
        let s = DenseMatrix::diag(&[1.0, 0.999_999]);
        match power_method(&s, 1e-14, 3, 0) {
            Err(Error::NotConverged { estimate, iterations, .. }) => {
                assert_eq!(iterations, 3);
                assert!(estimate > 0.99);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn power_method_deterministic() {
        let x = random(6, 10, 9);
        let s = gram(&x).unwrap();
        assert_eq!(power_method(&s, 1e-9, 1000, 5).unwrap(), power_method(&s, 1e-9, 1000, 5).unwrap());
    }

    #[test]
    fn sequential_inverse_closed_forms() {
        let inv = SequentialInverse::new(&DenseMatrix::diag(&[2.0, 2.0, 2.0])).unwrap();
        for j in 0..3 {
            assert!((inv.diag(j) - 0.5).abs() < 1e-15);
            assert!(inv.row_tail(j).iter().all(|&v| v == 0.0));
        }
        let inv = SequentialInverse::new(&DenseMatrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]])).unwrap();
        assert!((inv.diag(0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((inv.row_tail(0)[0] + 1.0 / 3.0).abs() < 1e-15);
        assert!((inv.diag(1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sequential_inverse_matches_gauss_jordan_on_trailing_blocks() {
        let x = random(6, 12, 11);
        let s = gram(&x).unwrap();
        let inv = SequentialInverse::new(&s).unwrap();
        for j in 0..6 {
            let m = 6 - j;
            let block = DenseMatrix::from_fn(m, m, |a, b| s[(j + a, j + b)]);
            let oracle = gauss_jordan_inverse(&block);
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
            assert!(rel(inv.diag(j), oracle[(0, 0)]) < 1e-8);
            for (k, v) in inv.row_tail(j).iter().enumerate() {
                assert!((v - oracle[(0, k + 1)]).abs() <= 1e-8 * oracle.max_abs());
            }
        }
    }

    #[test]
    fn sequential_inverse_rejects_singular() {
        let s = DenseMatrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!(matches!(SequentialInverse::new(&s), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn invert_spd_matches_gauss_jordan() {
        let s = gram(&random(5, 9, 12)).unwrap();
        let a = invert_spd(&s).unwrap();
        let b = gauss_jordan_inverse(&s);
        assert!(a.max_abs_diff(&b) <= 1e-8 * b.max_abs());
    }
}
