//! Layer quantization instances and their objectives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{dot, fmt_shape, gram, DenseMatrix};
use crate::outlier::SparseOutliers;

/// Objectives below zero by more than this are reported as numerical failures
/// in debug builds; anything in `(-FLOOR, 0)` is clamped to zero.
pub const NEGATIVE_OBJECTIVE_FLOOR: f64 = 1e-9;

/// One linear layer to quantize: weights `W` (q×p), Gram matrix `Σ = XXᵀ`
/// (p×p) and the fixed product `P = WΣ`. The raw calibration inputs are not kept.
#[derive(Debug, Clone)]
pub struct LayerProblem {
    w: DenseMatrix,
    sigma: DenseMatrix,
    p: DenseMatrix,
    reference: f64,
    n: usize,
    dead_columns: Vec<usize>,
    dead_mask: Vec<bool>,
}

impl LayerProblem {
    /// Builds the problem from weights `W` (q×p) and calibration inputs `X` (p×n).
    pub fn build(w: DenseMatrix, x: &DenseMatrix) -> Result<Self> {
        if w.cols() != x.rows() {
            return Err(Error::dims(
                "build_problem",
                format!("X with {} rows", w.cols()),
                fmt_shape(x.shape()),
            ));
        }
        x.ensure_finite()?;
        let sigma = gram(x)?;
        Self::from_gram(w, sigma, x.cols())
    }

    /// Builds the problem from a precomputed Gram matrix `Σ` (p×p) built from
    /// `n` calibration samples.
    pub fn from_gram(w: DenseMatrix, sigma: DenseMatrix, n: usize) -> Result<Self> {
        let (q, p) = w.shape();
        if q == 0 || p == 0 {
            return Err(Error::EmptyProblem("weights with a zero dimension"));
        }
        if sigma.shape() != (p, p) {
            return Err(Error::dims("build_problem", fmt_shape((p, p)), fmt_shape(sigma.shape())));
        }
        if n == 0 {
            return Err(Error::param("n", "need at least one calibration sample"));
        }
        w.ensure_finite()?;
        sigma.ensure_finite()?;
        if let Some((a, b)) = asymmetry(&sigma) {
            return Err(Error::Contract(format!("Gram matrix is not symmetric at ({a}, {b})")));
        }
        let pm = w.matmul(&sigma)?;
        let reference = dot(w.as_slice(), pm.as_slice()).max(0.0);
        let dead_mask: Vec<bool> = (0..p).map(|j| sigma[(j, j)] <= 0.0).collect();
        let dead_columns = (0..p).filter(|&j| dead_mask[j]).collect();
        Ok(LayerProblem {
            w,
            sigma,
            p: pm,
            reference,
            n,
            dead_columns,
            dead_mask,
        })
    }

    pub fn q(&self) -> usize {
        self.w.rows()
    }

    pub fn p(&self) -> usize {
        self.w.cols()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn weights(&self) -> &DenseMatrix {
        &self.w
    }

    pub fn sigma(&self) -> &DenseMatrix {
        &self.sigma
    }

    /// `P = WΣ`.
    pub fn w_sigma(&self) -> &DenseMatrix {
        &self.p
    }

    /// `Tr(XXᵀWᵀW) = ‖WX‖_F²`.
    pub fn sigma_trace_term(&self) -> f64 {
        self.reference
    }

    pub fn dead_columns(&self) -> &[usize] {
        &self.dead_columns
    }

    #[inline]
    pub fn is_dead(&self, j: usize) -> bool {
        self.dead_mask[j]
    }

    fn check_shape(&self, context: &'static str, m: &DenseMatrix) -> Result<()> {
        if m.shape() != self.w.shape() {
            return Err(Error::dims(context, fmt_shape(self.w.shape()), fmt_shape(m.shape())));
        }
        Ok(())
    }

    /// `f(Ŵ) = ‖WX − ŴX‖_F²`, evaluated as `Tr(DΣDᵀ)` with `D = W − Ŵ`.
    pub fn objective_f(&self, w_hat: &DenseMatrix) -> Result<f64> {
        self.check_shape("objective_f", w_hat)?;
        Ok(quadratic_residual(&self.w, w_hat, &self.sigma))
    }

    /// `g(Ŵ, Ĥ) = ‖WX − (Ŵ + Ĥ)X‖_F²`.
    pub fn objective_g(&self, w_hat: &DenseMatrix, h: &SparseOutliers) -> Result<f64> {
        self.check_shape("objective_g", w_hat)?;
        let mut combined = w_hat.clone();
        h.add_to(&mut combined)?;
        Ok(quadratic_residual(&self.w, &combined, &self.sigma))
    }

    /// `‖WX − ŴX‖_F² / ‖WX‖_F²`.
    pub fn relative_error(&self, w_hat: &DenseMatrix) -> Result<f64> {
        if !(self.reference > 0.0) {
            return Err(Error::ZeroReference);
        }
        Ok(self.objective_f(w_hat)? / self.reference)
    }

    pub fn relative_error_of(&self, objective: f64) -> Result<f64> {
        if !(self.reference > 0.0) {
            return Err(Error::ZeroReference);
        }
        Ok(objective / self.reference)
    }
}

fn asymmetry(s: &DenseMatrix) -> Option<(usize, usize)> {
    let tol = 1e-12 * s.max_abs();
    let p = s.rows();
    (0..p).find_map(|a| ((a + 1)..p).find(|&b| (s[(a, b)] - s[(b, a)]).abs() > tol).map(|b| (a, b)))
}

/// `Tr((W − Ŵ) Σ (W − Ŵ)ᵀ)`, clamped at zero.
pub(crate) fn quadratic_residual(w: &DenseMatrix, w_hat: &DenseMatrix, sigma: &DenseMatrix) -> f64 {
    let p = w.cols();
    let mut d = vec![0.0; p];
    let mut total = 0.0;
    for i in 0..w.rows() {
        for ((dj, a), b) in d.iter_mut().zip(w.row(i)).zip(w_hat.row(i)) {
            *dj = a - b;
        }
        for a in 0..p {
            if d[a] == 0.0 {
                continue;
            }
            total += d[a] * dot(sigma.row(a), &d);
        }
    }
    clamp_objective(total)
}

pub(crate) fn clamp_objective(v: f64) -> f64 {
    debug_assert!(v >= -NEGATIVE_OBJECTIVE_FLOOR.max(v.abs() * 1e-12), "objective {v} is negative");
    v.max(0.0)
}

/// Synthetic layer parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub q: usize,
    pub p: usize,
    pub n: usize,
    /// AR(1) correlation between neighbouring input features, in `[0, 1)`.
    pub rho: f64,
    pub weight_scale: f64,
    pub seed: u64,
}

/// Gaussian weights and AR(1)-correlated Gaussian inputs.
///
/// Returns `(W, X)` with `W` q×p and `X` p×n. Each column of `X` is
/// `L·g` where `L` is the Cholesky factor of the AR(1) covariance
/// `C[a,b] = ρ^|a−b|`, applied through its two-term recurrence.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(DenseMatrix, DenseMatrix)> {
    let SyntheticSpec {
        q,
        p,
        n,
        rho,
        weight_scale,
        seed,
    } = *spec;
    if q == 0 || p == 0 || n == 0 {
        return Err(Error::param("q/p/n", "all sizes must be at least 1"));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::param("rho", format!("must be in [0, 1), got {rho}")));
    }
    if !weight_scale.is_finite() {
        return Err(Error::param("weight_scale", "must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let w = DenseMatrix::from_fn(q, p, |_, _| normal() * weight_scale);
    let innovation = (1.0 - rho * rho).sqrt();
    let mut x = DenseMatrix::zeros(p, n);
    for k in 0..n {
        let mut prev = 0.0;
        for a in 0..p {
            let g = normal();
            let v = if a == 0 { g } else { rho * prev + innovation * g };
            x[(a, k)] = v;
            prev = v;
        }
    }
    Ok((w, x))
}
