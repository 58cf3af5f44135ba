//! Outlier-aware quantization: `W ≈ Ŵ + Ĥ` with `Ŵ` on the grid and `Ĥ`
//! an s-sparse full-precision correction.
//!
//! The solver alternates a coordinate-descent sweep on `Ŵ` (target
//! `(W − Ĥ)Σ`) with one iterative-hard-thresholding step on `Ĥ`:
//!
//! ```text
//! ∇_H g = 2ĤΣ + 2ŴΣ − 2WΣ
//! Ĥ⁺    = P_s(Ĥ − η ∇_H g),   η = 1 / (2 λ_max(Σ))
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{build_trimmed_grid, top_s_indices, QuantGrid};
use crate::linalg::{axpy, fmt_shape, power_method, DenseMatrix, POWER_MAX_ITER, POWER_TOL};
use crate::problem::{quadratic_residual, LayerProblem};
use crate::quantease::{SolverConfig, SweepMode, SweepState};
use crate::solution::{clock::Stopwatch, TracePoint};

/// Extra shrink applied to the step size so that a slightly low `λ_max`
/// estimate cannot break the descent property.
pub const STEP_SAFETY: f64 = 1.01;

/// Outer iterations between full recomputations of `ĤΣ`.
pub const FULL_REFRESH_EVERY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutlierMode {
    Unstructured,
    /// Whole columns, chosen by Euclidean norm.
    #[serde(rename = "columns")]
    StructuredColumns,
}

impl OutlierMode {
    pub fn as_str(self) -> &'static str {
        match self {
            OutlierMode::Unstructured => "unstructured",
            OutlierMode::StructuredColumns => "columns",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            OutlierMode::Unstructured => 0,
            OutlierMode::StructuredColumns => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(OutlierMode::Unstructured),
            1 => Some(OutlierMode::StructuredColumns),
            _ => None,
        }
    }
}

impl fmt::Display for OutlierMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OutlierMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unstructured" => Ok(OutlierMode::Unstructured),
            "columns" | "structured" => Ok(OutlierMode::StructuredColumns),
            other => Err(Error::param("outlier_mode", format!("unknown mode '{other}'"))),
        }
    }
}

/// Sparse `Ĥ` as `(row, col, value)` triples sorted by `(row, col)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseOutliers {
    entries: Vec<(usize, usize, f64)>,
    budget: usize,
    mode: OutlierMode,
}

impl SparseOutliers {
    pub fn empty(budget: usize, mode: OutlierMode) -> Self {
        SparseOutliers {
            entries: Vec::new(),
            budget,
            mode,
        }
    }

    /// Validates and sorts the triples.
    pub fn from_entries(mut entries: Vec<(usize, usize, f64)>, budget: usize, mode: OutlierMode) -> Result<Self> {
        if entries.len() > budget {
            return Err(Error::Contract(format!("{} outliers exceed budget {budget}", entries.len())));
        }
        entries.sort_by_key(|&(i, j, _)| (i, j));
        if entries.windows(2).any(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(Error::Contract("duplicate outlier coordinate".into()));
        }
        if let Some(&(i, j, _)) = entries.iter().find(|e| !e.2.is_finite()) {
            return Err(Error::NonFinite { row: i, col: j });
        }
        Ok(SparseOutliers { entries, budget, mode })
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn mode(&self) -> OutlierMode {
        self.mode
    }

    /// Distinct occupied columns, ascending.
    pub fn columns(&self) -> Vec<usize> {
        let mut cols: Vec<usize> = self.entries.iter().map(|e| e.1).collect();
        cols.sort_unstable();
        cols.dedup();
        cols
    }

    pub fn to_dense(&self, rows: usize, cols: usize) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(rows, cols);
        for &(i, j, v) in &self.entries {
            m[(i, j)] = v;
        }
        m
    }

    /// `m += Ĥ`.
    pub fn add_to(&self, m: &mut DenseMatrix) -> Result<()> {
        for &(i, j, v) in &self.entries {
            if i >= m.rows() || j >= m.cols() {
                return Err(Error::dims(
                    "outlier coordinate",
                    fmt_shape(m.shape()),
                    format!("({i}, {j})"),
                ));
            }
            m[(i, j)] += v;
        }
        Ok(())
    }

    /// Budget and structure invariants.
    pub fn check_invariants(&self, rows: usize) -> Result<()> {
        if self.entries.len() > self.budget {
            return Err(Error::Contract(format!("{} outliers exceed budget {}", self.entries.len(), self.budget)));
        }
        if self.mode == OutlierMode::StructuredColumns {
            let cols = self.columns();
            let allowed = self.budget / rows.max(1);
            if cols.len() > allowed {
                return Err(Error::Contract(format!("{} outlier columns exceed {allowed}", cols.len())));
            }
            if cols.len() * rows != self.entries.len() {
                return Err(Error::Contract("structured outlier column is not fully dense".into()));
            }
        }
        Ok(())
    }
}

/// `P_s(A)`: keep the `s` largest-magnitude entries (or the `⌊s/q⌋` columns
/// of largest Euclidean norm), ties to the smaller `(i, j)`.
pub fn hard_threshold(a: &DenseMatrix, s: usize, mode: OutlierMode) -> Result<SparseOutliers> {
    let (q, p) = a.shape();
    if s > q * p {
        return Err(Error::BudgetTooLarge { budget: s, entries: q * p });
    }
    let entries = match mode {
        OutlierMode::Unstructured => {
            let nonzero = a.as_slice().iter().filter(|v| **v != 0.0).count();
            let mut picked: Vec<(usize, usize, f64)> = top_s_indices(a.as_slice(), s.min(nonzero))
                .into_iter()
                .map(|k| (k / p, k % p, a.as_slice()[k]))
                .collect();
            picked.sort_by_key(|&(i, j, _)| (i, j));
            picked
        }
        OutlierMode::StructuredColumns => {
            let keep = s / q;
            let norms: Vec<f64> = (0..p)
                .map(|j| (0..q).map(|i| a[(i, j)] * a[(i, j)]).sum::<f64>())
                .collect();
            let nonzero = norms.iter().filter(|v| **v > 0.0).count();
            let mut cols = top_s_indices(&norms, keep.min(nonzero));
            cols.sort_unstable();
            let mut picked = Vec::with_capacity(cols.len() * q);
            for i in 0..q {
                for &j in &cols {
                    picked.push((i, j, a[(i, j)]));
                }
            }
            picked
        }
    };
    Ok(SparseOutliers {
        entries,
        budget: s,
        mode,
    })
}

/// Step size `1 / (2 λ_max(Σ) · STEP_SAFETY)`; `None` when Σ = 0.
pub fn iht_step_size(sigma: &DenseMatrix, seed: u64) -> Result<Option<f64>> {
    let lambda = match power_method(sigma, POWER_TOL, POWER_MAX_ITER, seed) {
        Ok(est) => est.lambda_max,
        Err(Error::NotConverged { .. }) => {
            // trace(Σ) bounds λ_max from above for a PSD matrix
            log::warn!("power method did not converge; using trace(Σ) as the Lipschitz bound");
            sigma.trace()
        }
        Err(e) => return Err(e),
    };
    if lambda <= 0.0 {
        return Ok(None);
    }
    Ok(Some(1.0 / (2.0 * lambda * STEP_SAFETY)))
}

/// `P_s(Ĥ − η·2(ĤΣ + ŴΣ − WΣ))` from precomputed products.
fn iht_from_products(
    h: &SparseOutliers,
    h_sigma: &DenseMatrix,
    w_hat_sigma: &DenseMatrix,
    w_sigma: &DenseMatrix,
    eta: f64,
) -> Result<SparseOutliers> {
    let (q, p) = w_sigma.shape();
    let mut a = DenseMatrix::from_fn(q, p, |i, j| -eta * 2.0 * (h_sigma[(i, j)] + w_hat_sigma[(i, j)] - w_sigma[(i, j)]));
    h.add_to(&mut a)?;
    hard_threshold(&a, h.budget, h.mode)
}

/// One IHT update of `Ĥ` with `Ŵ` fixed.
pub fn iht_step(problem: &LayerProblem, w_hat: &DenseMatrix, h: &SparseOutliers, eta: f64) -> Result<SparseOutliers> {
    h.check_invariants(problem.q())?;
    if w_hat.shape() != problem.weights().shape() {
        return Err(Error::dims("iht_step", fmt_shape(problem.weights().shape()), fmt_shape(w_hat.shape())));
    }
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::param("eta", format!("must be positive and finite, got {eta}")));
    }
    let sigma = problem.sigma();
    let h_sigma = h.to_dense(problem.q(), problem.p()).matmul(sigma)?;
    let w_hat_sigma = w_hat.matmul(sigma)?;
    let next = iht_from_products(h, &h_sigma, &w_hat_sigma, problem.w_sigma(), eta)?;
    debug_assert!({
        let before = problem.objective_g(w_hat, h)?;
        let after = problem.objective_g(w_hat, &next)?;
        after <= before + 1e-9 * before.max(1.0)
    });
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct OutlierSolution {
    pub w_hat: DenseMatrix,
    pub h: SparseOutliers,
    pub grid: QuantGrid,
    pub feasible: bool,
    pub objective_g: f64,
    pub trace: Vec<TracePoint>,
    pub iterations: usize,
    pub wall_time: f64,
    pub warnings: Vec<String>,
}

/// `ĤΣ` maintained across IHT steps; only rows of Σ for changed entries are touched.
struct OutlierProduct {
    h_sigma: DenseMatrix,
    dense_h: DenseMatrix,
}

impl OutlierProduct {
    fn new(h: &SparseOutliers, sigma: &DenseMatrix, q: usize, p: usize) -> Result<Self> {
        let dense_h = h.to_dense(q, p);
        let h_sigma = dense_h.matmul(sigma)?;
        Ok(OutlierProduct { h_sigma, dense_h })
    }

    fn apply(&mut self, next: &SparseOutliers, sigma: &DenseMatrix, full_refresh: bool) -> Result<()> {
        let (q, p) = self.dense_h.shape();
        let new_dense = next.to_dense(q, p);
        if full_refresh {
            self.h_sigma = new_dense.matmul(sigma)?;
        } else {
            for i in 0..q {
                for j in 0..p {
                    let delta = new_dense[(i, j)] - self.dense_h[(i, j)];
                    if delta != 0.0 {
                        axpy(delta, sigma.row(j), self.h_sigma.row_mut(i));
                    }
                }
            }
        }
        self.dense_h = new_dense;
        Ok(())
    }
}

/// Block coordinate descent over `(Ŵ, Ĥ)`.
///
/// `s` is the outlier budget; the quantization grid is built with the `s`
/// largest-|W| entries excluded. `Ĥ` starts at `P_s(W)` and `Ŵ` at `W − Ĥ`.
/// `config.cadence` and `config.strict_descent` govern the `Ŵ` sweeps exactly
/// as in the plain solver.
pub fn quantease_outlier(
    problem: &LayerProblem,
    bits: u32,
    s: usize,
    mode: OutlierMode,
    config: &SolverConfig,
) -> Result<OutlierSolution> {
    let mut steps = |_: usize, _: &SparseOutliers| Ok(());
    quantease_outlier_observed(problem, bits, s, mode, config, &mut steps)
}

/// Same as [`quantease_outlier`], calling `observe(iteration, Ĥ)` after every IHT step.
pub fn quantease_outlier_observed(
    problem: &LayerProblem,
    bits: u32,
    s: usize,
    mode: OutlierMode,
    config: &SolverConfig,
    observe: &mut dyn FnMut(usize, &SparseOutliers) -> Result<()>,
) -> Result<OutlierSolution> {
    let clock = Stopwatch::start();
    config.validate()?;
    let mut config = config.clone();
    if config.strict_descent {
        config.cadence = 0;
    }
    let (q, p) = (problem.q(), problem.p());
    if s >= q * p {
        return Err(Error::BudgetTooLarge { budget: s, entries: q * p });
    }
    let mut warnings = Vec::new();
    let mut s = s;
    if mode == OutlierMode::StructuredColumns && s / q == 0 && s > 0 {
        warnings.push(format!("budget {s} is below one column of {q} rows; running plain QuantEase"));
        s = 0;
    }
    let grid = build_trimmed_grid(problem.weights(), bits, s)?;
    let sigma = problem.sigma();

    let mut h = hard_threshold(problem.weights(), s, mode)?;
    let mut init = problem.weights().clone();
    for &(i, j, v) in h.entries() {
        init[(i, j)] -= v;
    }
    let mut state = SweepState::new(problem, &grid, init)?;
    let mut product = OutlierProduct::new(&h, sigma, q, p)?;
    let eta = if s > 0 { iht_step_size(sigma, config.seed)? } else { None };

    let mut feasible = grid.find_infeasible(&state.w_hat).is_none();
    let mut trace = Vec::new();
    let mut target = DenseMatrix::zeros(q, p);
    for t in 1..=config.max_iter {
        // target = (W − Ĥ)Σ
        for ((dst, pw), hs) in target
            .as_mut_slice()
            .iter_mut()
            .zip(problem.w_sigma().as_slice())
            .zip(product.h_sigma.as_slice())
        {
            *dst = pw - hs;
        }
        let mode_t = if config.strict_descent {
            if feasible {
                SweepMode::StrictDescent
            } else {
                SweepMode::Quantize
            }
        } else if config.quantizes(t) {
            SweepMode::Quantize
        } else {
            SweepMode::Unquantized
        };
        let g = if mode_t == SweepMode::StrictDescent {
            residual_g(problem, &state.w_hat, &product.dense_h)
        } else {
            0.0
        };
        state.sweep(problem, &grid, &target, mode_t, g);
        feasible = mode_t != SweepMode::Unquantized;

        if let Some(eta) = eta {
            let next = iht_from_products(&h, &product.h_sigma, &state.w_hat_sigma, problem.w_sigma(), eta)?;
            next.check_invariants(q)?;
            product.apply(&next, sigma, t % FULL_REFRESH_EVERY == 0)?;
            h = next;
        }
        observe(t, &h)?;
        if t % config.log_every == 0 || t == config.max_iter {
            trace.push(TracePoint {
                iteration: t,
                objective: residual_g(problem, &state.w_hat, &product.dense_h),
            });
        }
    }

    let objective_g = problem.objective_g(&state.w_hat, &h)?;
    let feasible = grid.find_infeasible(&state.w_hat).is_none();
    Ok(OutlierSolution {
        w_hat: state.w_hat,
        h,
        grid,
        feasible,
        objective_g,
        trace,
        iterations: config.max_iter,
        wall_time: clock.seconds(),
        warnings,
    })
}

fn residual_g(problem: &LayerProblem, w_hat: &DenseMatrix, dense_h: &DenseMatrix) -> f64 {
    let combined = w_hat.add(dense_h).expect("shapes fixed");
    quadratic_residual(problem.weights(), &combined, problem.sigma())
}
