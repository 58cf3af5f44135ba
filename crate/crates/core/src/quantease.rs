//! Coordinate-descent quantization (QuantEase).
//!
//! Every coordinate update solves the one-dimensional problem in `Ŵ[i,j]`
//! exactly: the unconstrained minimizer is
//!
//! ```text
//! β̃ = −[ (ŴΣ)[i,j] − Σ[j,j]·Ŵ[i,j] − (WΣ)[i,j] ] / Σ[j,j]
//! ```
//!
//! and the best grid value is `q_i(β̃)`. Rows of one column are independent,
//! so whole columns are updated at once and `ŴΣ` is kept current with rank-1
//! updates. Three drivers share this step:
//!
//! * [`quantease_basic`]: cyclic sweeps with the unquantized-pass heuristic.
//! * [`quantease_accel`]: the partial-update form over a column-normalized Σ.
//! * [`quantease_modified`]: only strictly improving coordinate moves are
//!   accepted; stops at a coordinate-wise minimum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::QuantGrid;
use crate::linalg::{dot, fmt_shape, rank1_update, DenseMatrix};
use crate::problem::LayerProblem;
use crate::solution::{clock::Stopwatch, QuantSolution, SolverId, TracePoint};

/// Relative threshold for accepting a move in strict-descent mode; a move is
/// kept only if it lowers `f` by more than `DESCENT_TOL · max(1, |f|)`.
pub const DESCENT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Number of sweeps `K`.
    pub max_iter: usize,
    /// Every `cadence`-th sweep keeps `β̃` unquantized; 0 disables.
    pub cadence: usize,
    pub strict_descent: bool,
    pub seed: u64,
    /// Recompute the objective from scratch every this many sweeps (the final
    /// sweep is always logged).
    pub log_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iter: 25,
            cadence: 3,
            strict_descent: false,
            seed: 0,
            log_every: 1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::param("max_iter", "need at least one iteration"));
        }
        if self.cadence == 1 {
            return Err(Error::param("cadence", "must be 0 (off) or at least 2"));
        }
        if self.log_every == 0 {
            return Err(Error::param("log_every", "must be at least 1"));
        }
        Ok(())
    }

    /// Whether sweep `iteration` (1-based) quantizes.
    pub fn quantizes(&self, iteration: usize) -> bool {
        self.strict_descent
            || self.cadence < 2
            || !iteration.is_multiple_of(self.cadence)
            || iteration >= self.max_iter
    }
}

fn check_grid(problem: &LayerProblem, grid: &QuantGrid) -> Result<()> {
    if grid.channels() != problem.q() {
        return Err(Error::dims("solver grid", problem.q(), grid.channels()));
    }
    Ok(())
}

/// `β̃` for every row of column `j`, given the current `Ŵ` and `ŴΣ`.
pub fn cd_column_beta(
    problem: &LayerProblem,
    w_hat: &DenseMatrix,
    w_hat_sigma: &DenseMatrix,
    j: usize,
) -> Result<Vec<f64>> {
    if w_hat.shape() != problem.weights().shape() || w_hat_sigma.shape() != w_hat.shape() {
        return Err(Error::dims(
            "cd_column_beta",
            fmt_shape(problem.weights().shape()),
            format!("{} / {}", fmt_shape(w_hat.shape()), fmt_shape(w_hat_sigma.shape())),
        ));
    }
    if j >= problem.p() {
        return Err(Error::Contract(format!("column {j} out of range")));
    }
    if problem.is_dead(j) {
        return Err(Error::Contract(format!("column {j} has Σ[j,j] = 0 and must be skipped")));
    }
    let d = problem.sigma()[(j, j)];
    Ok((0..problem.q())
        .map(|i| beta(w_hat_sigma[(i, j)], w_hat[(i, j)], problem.w_sigma()[(i, j)], d))
        .collect())
}

#[inline]
fn beta(what_sigma_ij: f64, what_ij: f64, target_ij: f64, d: f64) -> f64 {
    -(what_sigma_ij - d * what_ij - target_ij) / d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SweepMode {
    Quantize,
    Unquantized,
    StrictDescent,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct SweepStats {
    /// Coordinates whose value changed.
    pub changes: usize,
    /// Sum of accepted closed-form objective changes (strict mode only).
    pub objective_delta: f64,
}

/// `Ŵ` and its maintained product `ŴΣ`, swept against a target product
/// (`WΣ`, or `(W − Ĥ)Σ` in the outlier solver).
#[derive(Debug, Clone)]
pub(crate) struct SweepState {
    pub w_hat: DenseMatrix,
    pub w_hat_sigma: DenseMatrix,
    old_col: Vec<f64>,
    new_col: Vec<f64>,
}

impl SweepState {
    pub fn new(problem: &LayerProblem, grid: &QuantGrid, mut w_hat: DenseMatrix) -> Result<Self> {
        if w_hat.shape() != problem.weights().shape() {
            return Err(Error::dims("initial Ŵ", fmt_shape(problem.weights().shape()), fmt_shape(w_hat.shape())));
        }
        w_hat.ensure_finite()?;
        // Dead columns never enter the objective; quantize them once and leave them.
        for &j in problem.dead_columns() {
            for i in 0..problem.q() {
                w_hat[(i, j)] = grid.quantize(i, problem.weights()[(i, j)]);
            }
        }
        let w_hat_sigma = w_hat.matmul(problem.sigma())?;
        let q = problem.q();
        Ok(SweepState {
            w_hat,
            w_hat_sigma,
            old_col: vec![0.0; q],
            new_col: vec![0.0; q],
        })
    }

    /// One pass over the columns `0..p`.
    ///
    /// `objective` is the current objective value, only used by the
    /// strict-descent acceptance test.
    pub fn sweep(
        &mut self,
        problem: &LayerProblem,
        grid: &QuantGrid,
        target: &DenseMatrix,
        mode: SweepMode,
        objective: f64,
    ) -> SweepStats {
        let sigma = problem.sigma();
        let q = problem.q();
        let mut stats = SweepStats::default();
        let mut f = objective;
        for j in 0..problem.p() {
            if problem.is_dead(j) {
                continue;
            }
            let d = sigma[(j, j)];
            let mut column_changed = false;
            for i in 0..q {
                let old = self.w_hat[(i, j)];
                let b = beta(self.w_hat_sigma[(i, j)], old, target[(i, j)], d);
                let new = match mode {
                    SweepMode::Quantize => grid.quantize(i, b),
                    SweepMode::Unquantized => b,
                    SweepMode::StrictDescent => {
                        let candidate = grid.quantize(i, b);
                        let delta = d * ((candidate - b).powi(2) - (old - b).powi(2));
                        if candidate != old && delta < -DESCENT_TOL * f.abs().max(1.0) {
                            f += delta;
                            stats.objective_delta += delta;
                            candidate
                        } else {
                            old
                        }
                    }
                };
                self.old_col[i] = old;
                self.new_col[i] = new;
                if new != old {
                    column_changed = true;
                    stats.changes += 1;
                }
            }
            if !column_changed {
                continue;
            }
            let sigma_row = sigma.row(j);
            // (A): remove the old column's contribution, (B): add the new one.
            rank1_update(&mut self.w_hat_sigma, &self.old_col, sigma_row, -1.0).expect("shapes fixed at construction");
            self.w_hat.set_column(j, &self.new_col);
            rank1_update(&mut self.w_hat_sigma, &self.new_col, sigma_row, 1.0).expect("shapes fixed at construction");
        }
        stats
    }

    /// Largest deviation of the maintained `ŴΣ` from a fresh product, relative
    /// to the fresh product's magnitude.
    pub fn bookkeeping_drift(&self, sigma: &DenseMatrix) -> f64 {
        let fresh = self.w_hat.matmul(sigma).expect("shapes fixed at construction");
        let scale = fresh.max_abs();
        let diff = fresh.max_abs_diff(&self.w_hat_sigma);
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }
}

/// What one call to [`BasicSolver::step`] did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    pub quantized: bool,
    pub changes: usize,
    /// Objective recomputed from scratch, when this iteration was logged.
    pub objective: Option<f64>,
}

/// Stepwise driver for the basic and strict-descent variants.
pub struct BasicSolver<'a> {
    problem: &'a LayerProblem,
    grid: &'a QuantGrid,
    config: SolverConfig,
    state: SweepState,
    iteration: usize,
    feasible: bool,
    converged: bool,
    trace: Vec<TracePoint>,
    warnings: Vec<String>,
    clock: Stopwatch,
}

impl<'a> BasicSolver<'a> {
    pub fn new(problem: &'a LayerProblem, grid: &'a QuantGrid, config: SolverConfig) -> Result<Self> {
        Self::with_init(problem, grid, config, problem.weights().clone())
    }

    /// Starts from an arbitrary `Ŵ`, e.g. a GPTQ solution.
    pub fn with_init(
        problem: &'a LayerProblem,
        grid: &'a QuantGrid,
        mut config: SolverConfig,
        init: DenseMatrix,
    ) -> Result<Self> {
        let clock = Stopwatch::start();
        config.validate()?;
        check_grid(problem, grid)?;
        if config.strict_descent {
            config.cadence = 0;
        }
        let state = SweepState::new(problem, grid, init)?;
        let feasible = grid.find_infeasible(&state.w_hat).is_none();
        let mut warnings = Vec::new();
        if problem.dead_columns().len() == problem.p() {
            warnings.push("every column has Σ[j,j] = 0; solution equals round-to-nearest".to_string());
        }
        Ok(BasicSolver {
            problem,
            grid,
            config,
            state,
            iteration: 0,
            feasible,
            converged: false,
            trace: Vec::new(),
            warnings,
            clock,
        })
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.max_iter || self.converged
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn w_hat(&self) -> &DenseMatrix {
        &self.state.w_hat
    }

    /// The incrementally maintained `ŴΣ`.
    pub fn maintained_product(&self) -> &DenseMatrix {
        &self.state.w_hat_sigma
    }

    pub fn bookkeeping_drift(&self) -> f64 {
        self.state.bookkeeping_drift(self.problem.sigma())
    }

    pub fn is_feasible(&self) -> bool {
        self.feasible
    }

    /// Runs one sweep; `None` once the solver has finished.
    pub fn step(&mut self) -> Option<IterationReport> {
        if self.is_done() {
            return None;
        }
        self.iteration += 1;
        let t = self.iteration;
        let mode = if self.config.strict_descent {
            if self.feasible {
                SweepMode::StrictDescent
            } else {
                // Descent only makes sense from a feasible point; the first
                // quantizing pass provides one.
                SweepMode::Quantize
            }
        } else if self.config.quantizes(t) {
            SweepMode::Quantize
        } else {
            SweepMode::Unquantized
        };
        let f = if mode == SweepMode::StrictDescent {
            self.problem.objective_f(&self.state.w_hat).expect("shape checked")
        } else {
            0.0
        };
        let stats = self.state.sweep(self.problem, self.grid, self.problem.w_sigma(), mode, f);
        self.feasible = mode != SweepMode::Unquantized;
        if mode == SweepMode::StrictDescent && stats.changes == 0 {
            self.converged = true;
        }
        let log = t.is_multiple_of(self.config.log_every) || self.is_done();
        let objective = log.then(|| self.problem.objective_f(&self.state.w_hat).expect("shape checked"));
        if let Some(objective) = objective {
            self.trace.push(TracePoint { iteration: t, objective });
        }
        Some(IterationReport {
            iteration: t,
            quantized: mode != SweepMode::Unquantized,
            changes: stats.changes,
            objective,
        })
    }

    pub fn run(mut self) -> QuantSolution {
        while self.step().is_some() {}
        self.finish()
    }

    pub fn finish(self) -> QuantSolution {
        let objective = self.problem.objective_f(&self.state.w_hat).expect("shape checked");
        let solver = if self.config.strict_descent {
            SolverId::QuantEaseModified
        } else {
            SolverId::QuantEase
        };
        let feasible = self.grid.find_infeasible(&self.state.w_hat).is_none();
        QuantSolution {
            solver,
            w_hat: self.state.w_hat,
            grid: self.grid.clone(),
            column_scales: None,
            feasible,
            objective,
            trace: self.trace,
            iterations: self.iteration,
            converged: self.converged,
            wall_time: self.clock.seconds(),
            warnings: self.warnings,
        }
    }
}

/// Cyclic coordinate descent started from `W`.
pub fn quantease_basic(problem: &LayerProblem, grid: &QuantGrid, config: &SolverConfig) -> Result<QuantSolution> {
    Ok(BasicSolver::new(problem, grid, config.clone())?.run())
}

/// Strict-descent coordinate descent; stops after a sweep with no accepted
/// move, which certifies a coordinate-wise minimum.
pub fn quantease_modified(problem: &LayerProblem, grid: &QuantGrid, config: &SolverConfig) -> Result<QuantSolution> {
    quantease_modified_from(problem, grid, config, problem.weights().clone())
}

pub fn quantease_modified_from(
    problem: &LayerProblem,
    grid: &QuantGrid,
    config: &SolverConfig,
    init: DenseMatrix,
) -> Result<QuantSolution> {
    let config = SolverConfig {
        strict_descent: true,
        cadence: 0,
        ..config.clone()
    };
    Ok(BasicSolver::with_init(problem, grid, config, init)?.run())
}

/// Partial-update coordinate descent over the column-normalized Gram matrix.
///
/// Produces the same iterates as [`quantease_basic`] up to rounding, without
/// maintaining `ŴΣ` inside the column loop.
pub fn quantease_accel(problem: &LayerProblem, grid: &QuantGrid, config: &SolverConfig) -> Result<QuantSolution> {
    quantease_accel_from(problem, grid, config, problem.weights().clone())
}

pub fn quantease_accel_from(
    problem: &LayerProblem,
    grid: &QuantGrid,
    config: &SolverConfig,
    init: DenseMatrix,
) -> Result<QuantSolution> {
    let clock = Stopwatch::start();
    let mut config = config.clone();
    config.validate()?;
    check_grid(problem, grid)?;
    // The partial-update form has no per-coordinate objective; strict descent
    // runs through the basic driver.
    if config.strict_descent {
        return quantease_modified_from(problem, grid, &config, init);
    }
    config.strict_descent = false;

    let (q, p) = (problem.q(), problem.p());
    let sigma = problem.sigma();

    // Row j of `norm_t` is column j of Σ_norm (Σ is symmetric), diagonal zeroed.
    // The target keeps the diagonal: P = W·Σ_norm is formed before zeroing.
    let mut norm_t = DenseMatrix::zeros(p, p);
    let mut target = DenseMatrix::zeros(q, p);
    for j in 0..p {
        if problem.is_dead(j) {
            continue;
        }
        let d = sigma[(j, j)];
        for (k, v) in norm_t.row_mut(j).iter_mut().enumerate() {
            *v = if k == j { 0.0 } else { sigma[(j, k)] / d };
        }
        for i in 0..q {
            target[(i, j)] = problem.w_sigma()[(i, j)] / d;
        }
    }
    let norm = norm_t.transpose();

    let state = SweepState::new(problem, grid, init)?;
    let mut w_hat = state.w_hat;
    let mut warnings = Vec::new();
    if problem.dead_columns().len() == p {
        warnings.push("every column has Σ[j,j] = 0; solution equals round-to-nearest".to_string());
    }

    let mut trace = Vec::new();
    let mut delta = DenseMatrix::zeros(q, p);
    for t in 1..=config.max_iter {
        let quantize = config.quantizes(t);
        delta.as_mut_slice().copy_from_slice(w_hat.as_slice());
        let p_hat = w_hat.matmul(&norm)?;
        for j in 0..p {
            if problem.is_dead(j) {
                continue;
            }
            let col = &norm_t.row(j)[..j];
            for i in 0..q {
                let correction = dot(&delta.row(i)[..j], col);
                let b = target[(i, j)] - p_hat[(i, j)] + correction;
                let new = if quantize { grid.quantize(i, b) } else { b };
                w_hat[(i, j)] = new;
                delta[(i, j)] -= new;
            }
        }
        if t % config.log_every == 0 || t == config.max_iter {
            trace.push(TracePoint {
                iteration: t,
                objective: problem.objective_f(&w_hat)?,
            });
        }
    }

    let objective = problem.objective_f(&w_hat)?;
    let feasible = grid.find_infeasible(&w_hat).is_none();
    Ok(QuantSolution {
        solver: SolverId::QuantEaseAccel,
        w_hat,
        grid: grid.clone(),
        column_scales: None,
        feasible,
        objective,
        trace,
        iterations: config.max_iter,
        converged: false,
        wall_time: clock.seconds(),
        warnings,
    })
}

/// True iff no single coordinate of the feasible `Ŵ` can be moved to another
/// grid value with a decrease in `f` beyond the strict-descent tolerance.
pub fn is_cw_minimum(problem: &LayerProblem, grid: &QuantGrid, w_hat: &DenseMatrix) -> Result<bool> {
    check_grid(problem, grid)?;
    if w_hat.shape() != problem.weights().shape() {
        return Err(Error::dims("is_cw_minimum", fmt_shape(problem.weights().shape()), fmt_shape(w_hat.shape())));
    }
    if let Some((row, col)) = grid.find_infeasible(w_hat) {
        return Err(Error::Infeasible { row, col });
    }
    let f = problem.objective_f(w_hat)?;
    let threshold = -DESCENT_TOL * f.abs().max(1.0);
    let w_hat_sigma = w_hat.matmul(problem.sigma())?;
    for j in 0..problem.p() {
        if problem.is_dead(j) {
            continue;
        }
        let d = problem.sigma()[(j, j)];
        let betas = cd_column_beta(problem, w_hat, &w_hat_sigma, j)?;
        for (i, &b) in betas.iter().enumerate() {
            // 1-D objective in u, up to a constant: d·u² − 2·d·β̃·u
            let best = grid.quantize_argmin_quadratic(i, d, -2.0 * d * b)?;
            let current = w_hat[(i, j)];
            if best == current {
                continue;
            }
            let delta = d * ((best - b).powi(2) - (current - b).powi(2));
            if delta < threshold {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
