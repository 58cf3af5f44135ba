//! Reference quantizers: round-to-nearest, GPTQ (OBS column updates with lazy
//! batching) and the AWQ per-channel scale search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{build_uniform_grid, QuantGrid};
use crate::linalg::{invert_spd, DenseMatrix, SequentialInverse};
use crate::problem::LayerProblem;
use crate::solution::{clock::Stopwatch, decoded_value, QuantSolution, SolverId, TracePoint};

fn solution(
    solver: SolverId,
    problem: &LayerProblem,
    grid: &QuantGrid,
    w_hat: DenseMatrix,
    column_scales: Option<Vec<f64>>,
    clock: Stopwatch,
    warnings: Vec<String>,
) -> Result<QuantSolution> {
    let objective = problem.objective_f(&w_hat)?;
    let mut sol = QuantSolution {
        solver,
        w_hat,
        grid: grid.clone(),
        column_scales,
        feasible: false,
        objective,
        trace: vec![TracePoint { iteration: 1, objective }],
        iterations: 1,
        converged: false,
        wall_time: 0.0,
        warnings,
    };
    sol.feasible = sol.check_feasible();
    sol.wall_time = clock.seconds();
    Ok(sol)
}

/// `Ŵ[i,j] = q_i(W[i,j])`.
pub fn rtn_quantize(problem: &LayerProblem, grid: &QuantGrid) -> Result<QuantSolution> {
    let clock = Stopwatch::start();
    let w_hat = grid.quantize_matrix(problem.weights())?;
    solution(SolverId::Rtn, problem, grid, w_hat, None, clock, Vec::new())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GptqConfig {
    /// Added to the diagonal as a fraction of the mean of `diag(Σ)`.
    pub damping_fraction: f64,
    /// Columns per lazy batch.
    pub block_size: usize,
    /// `true`: inverse rows from one Cholesky factorization of the damped Σ.
    /// `false`: explicit inverse, downdated after every column.
    pub use_cholesky: bool,
}

impl Default for GptqConfig {
    fn default() -> Self {
        GptqConfig {
            damping_fraction: 0.01,
            block_size: 128,
            use_cholesky: true,
        }
    }
}

impl GptqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping_fraction >= 0.0) || !self.damping_fraction.is_finite() {
            return Err(Error::param("damping_fraction", "must be finite and non-negative"));
        }
        if self.block_size == 0 {
            return Err(Error::param("block_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// `Σ + damping_fraction · mean(diag Σ) · I`.
pub fn damped_sigma(sigma: &DenseMatrix, damping_fraction: f64) -> DenseMatrix {
    let p = sigma.rows();
    let mean_diag = sigma.trace() / p as f64;
    let mut damped = sigma.clone();
    for j in 0..p {
        damped[(j, j)] += damping_fraction * mean_diag;
    }
    damped
}

/// One pass over the columns; each quantized column's error is pushed onto the
/// not-yet-quantized columns through rows of the sequential inverse:
///
/// ```text
/// δ = −(Ŵ[:,j] − q(Ŵ[:,j])) / [Σ_F⁻¹]_{j,j}
/// Ŵ[:, j+1..] += δ · [Σ_F⁻¹]_{j, j+1..}
/// ```
pub fn gptq_solve(problem: &LayerProblem, grid: &QuantGrid, config: &GptqConfig) -> Result<QuantSolution> {
    let clock = Stopwatch::start();
    config.validate()?;
    if grid.channels() != problem.q() {
        return Err(Error::dims("gptq grid", problem.q(), grid.channels()));
    }
    let sigma = problem.sigma();
    if sigma.trace() == 0.0 {
        // Σ = 0: every Ŵ has zero objective, there is nothing to compensate.
        let w_hat = grid.quantize_matrix(problem.weights())?;
        let warn = vec!["Σ is zero; GPTQ reduces to round-to-nearest".to_string()];
        return solution(SolverId::Gptq, problem, grid, w_hat, None, clock, warn);
    }
    let damped = damped_sigma(sigma, config.damping_fraction);
    let w_hat = if config.use_cholesky {
        let inv = SequentialInverse::new(&damped)?;
        gptq_blocked(problem.weights(), grid, &inv, config.block_size)
    } else {
        gptq_downdated(problem.weights(), grid, &damped)?
    };
    solution(SolverId::Gptq, problem, grid, w_hat, None, clock, Vec::new())
}

fn gptq_blocked(w: &DenseMatrix, grid: &QuantGrid, inv: &SequentialInverse, block_size: usize) -> DenseMatrix {
    let (q, p) = w.shape();
    let u = inv.factor();
    let mut w_hat = w.clone();
    // err[i, k] holds δ/U[j,j] for column j = start + k of the current block,
    // so the OBS correction on column c is err · U[j, c].
    let mut start = 0;
    while start < p {
        let end = (start + block_size).min(p);
        let width = end - start;
        let mut err = DenseMatrix::zeros(q, width);
        for j in start..end {
            let ujj = u[(j, j)];
            for i in 0..q {
                let current = w_hat[(i, j)];
                let quantized = grid.quantize(i, current);
                w_hat[(i, j)] = quantized;
                // δ·[Σ_F⁻¹]_{j,c} = −(current − quantized)/U_jj² · U_jj·U_jc
                let e = (current - quantized) / ujj;
                err[(i, j - start)] = e;
                let row = w_hat.row_mut(i);
                for c in (j + 1)..end {
                    row[c] -= e * u[(j, c)];
                }
            }
        }
        // Lazy application of the whole block to the remaining columns.
        if end < p {
            for i in 0..q {
                for k in 0..width {
                    let e = err[(i, k)];
                    if e == 0.0 {
                        continue;
                    }
                    let u_row = &u.row(start + k)[end..];
                    let row = &mut w_hat.row_mut(i)[end..];
                    for (r, uv) in row.iter_mut().zip(u_row) {
                        *r -= e * uv;
                    }
                }
            }
        }
        start = end;
    }
    w_hat
}

/// Explicit-inverse route: keep `Σ_F⁻¹` for the remaining columns and remove
/// index `j` after use with the Schur-complement downdate
/// `Σ_{F∖j}⁻¹ = Σ_F⁻¹ − Σ_F⁻¹[:,j] Σ_F⁻¹[j,:] / Σ_F⁻¹[j,j]`.
fn gptq_downdated(w: &DenseMatrix, grid: &QuantGrid, damped: &DenseMatrix) -> Result<DenseMatrix> {
    let (q, p) = w.shape();
    let mut inv = invert_spd(damped)?;
    let mut w_hat = w.clone();
    for j in 0..p {
        let d = inv[(j, j)];
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        for i in 0..q {
            let current = w_hat[(i, j)];
            let quantized = grid.quantize(i, current);
            w_hat[(i, j)] = quantized;
            let delta = -(current - quantized) / d;
            for c in (j + 1)..p {
                w_hat[(i, c)] += delta * inv[(j, c)];
            }
        }
        let pivot_row: Vec<f64> = inv.row(j)[j + 1..].to_vec();
        for a in (j + 1)..p {
            let f = inv[(a, j)] / d;
            if f == 0.0 {
                continue;
            }
            for (b, pv) in ((j + 1)..p).zip(&pivot_row) {
                inv[(a, b)] -= f * pv;
            }
        }
    }
    Ok(w_hat)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AwqConfig {
    /// Points per axis of the (α, β) search grid.
    pub grid_steps: usize,
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
}

impl Default for AwqConfig {
    fn default() -> Self {
        AwqConfig {
            grid_steps: 20,
            alpha_range: (0.0, 1.0),
            beta_range: (0.0, 1.0),
        }
    }
}

impl AwqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_steps == 0 {
            return Err(Error::param("grid_steps", "must be at least 1"));
        }
        for (name, (lo, hi)) in [("alpha_range", self.alpha_range), ("beta_range", self.beta_range)] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::param(name, format!("need 0 ≤ lo ≤ hi ≤ 1, got ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    /// Search points along one axis, in increasing order.
    pub fn axis(&self, (lo, hi): (f64, f64)) -> Vec<f64> {
        if self.grid_steps == 1 {
            return vec![lo];
        }
        let n = self.grid_steps - 1;
        (0..=n).map(|k| lo + (hi - lo) * k as f64 / n as f64).collect()
    }
}

/// Per-input-channel magnitude statistics: `s_X[j] = sqrt(Σ[j,j] / n)` (RMS
/// activation) and `s_W[j] = mean_i |W[i,j]|`. Zeros are replaced by 1.
pub fn awq_channel_stats(problem: &LayerProblem) -> (Vec<f64>, Vec<f64>) {
    let n = problem.n() as f64;
    let fix = |v: f64| if v > 0.0 && v.is_finite() { v } else { 1.0 };
    let s_x = (0..problem.p()).map(|j| fix((problem.sigma()[(j, j)] / n).sqrt())).collect();
    let w = problem.weights();
    let s_w = (0..problem.p())
        .map(|j| fix((0..problem.q()).map(|i| w[(i, j)].abs()).sum::<f64>() / problem.q() as f64))
        .collect();
    (s_x, s_w)
}

/// Result of one (α, β) candidate.
#[derive(Debug, Clone)]
pub struct AwqCandidate {
    pub alpha: f64,
    pub beta: f64,
    pub objective: f64,
}

/// Quantizes `W` under column scales `s`: `Ŵ = s⁻¹ ⊙ q(s ⊙ W)` with the grid
/// rebuilt on the scaled weights.
pub fn awq_quantize_with_scales(w: &DenseMatrix, bits: u32, scales: &[f64]) -> Result<(DenseMatrix, QuantGrid)> {
    if scales.len() != w.cols() {
        return Err(Error::dims("awq scales", w.cols(), scales.len()));
    }
    let scaled = DenseMatrix::from_fn(w.rows(), w.cols(), |i, j| w[(i, j)] * scales[j]);
    let grid = build_uniform_grid(&scaled, bits)?;
    let w_hat = DenseMatrix::from_fn(w.rows(), w.cols(), |i, j| {
        let k = grid.level_index(i, scaled[(i, j)]);
        decoded_value(&grid, Some(scales), i, j, k)
    });
    Ok((w_hat, grid))
}

pub fn awq_scales(s_x: &[f64], s_w: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    s_x.iter().zip(s_w).map(|(x, w)| x.powf(alpha) * w.powf(-beta)).collect()
}

/// Grid search over `s = s_X^α · s_W^(−β)`; the best candidate wins, ties
/// going to the smaller α and then the smaller β.
pub fn awq_solve(problem: &LayerProblem, bits: u32, config: &AwqConfig) -> Result<QuantSolution> {
    let clock = Stopwatch::start();
    config.validate()?;
    let (s_x, s_w) = awq_channel_stats(problem);
    let mut best: Option<(AwqCandidate, DenseMatrix, QuantGrid, Vec<f64>)> = None;
    for &alpha in &config.axis(config.alpha_range) {
        for &beta in &config.axis(config.beta_range) {
            let scales = awq_scales(&s_x, &s_w, alpha, beta);
            if scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                continue;
            }
            let (w_hat, grid) = awq_quantize_with_scales(problem.weights(), bits, &scales)?;
            let objective = problem.objective_f(&w_hat)?;
            if best.as_ref().is_none_or(|(b, ..)| objective < b.objective) {
                best = Some((AwqCandidate { alpha, beta, objective }, w_hat, grid, scales));
            }
        }
    }
    let (cand, w_hat, grid, scales) =
        best.ok_or_else(|| Error::param("awq", "no admissible (alpha, beta) point in the search grid"))?;
    log::info!("awq picked alpha={} beta={}", cand.alpha, cand.beta);
    solution(SolverId::Awq, problem, &grid, w_hat, Some(scales), clock, Vec::new())
}
