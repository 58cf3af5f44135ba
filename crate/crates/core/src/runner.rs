//! Method dispatch shared by the CLI, the bench harness and the demo.

use serde::{Deserialize, Serialize};

use crate::baselines::{awq_solve, gptq_solve, rtn_quantize, AwqConfig, GptqConfig};
use crate::error::{Error, Result};
use crate::grid::build_uniform_grid;
use crate::outlier::{quantease_outlier, OutlierMode, SparseOutliers};
use crate::problem::LayerProblem;
use crate::quantease::{quantease_accel, quantease_basic, quantease_modified, SolverConfig};
use crate::solution::{QuantSolution, SolverId};

/// Everything a solver run may need beyond the problem itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodParams {
    pub iters: usize,
    pub cadence: usize,
    pub strict_descent: bool,
    pub seed: u64,
    /// Outlier budget as a percentage of `q·p`.
    pub outlier_pct: f64,
    pub outlier_mode: OutlierMode,
    pub damping: f64,
    pub block_size: usize,
    pub grid_steps: usize,
}

impl Default for MethodParams {
    fn default() -> Self {
        let solver = SolverConfig::default();
        let gptq = GptqConfig::default();
        MethodParams {
            iters: solver.max_iter,
            cadence: solver.cadence,
            strict_descent: false,
            seed: 0,
            outlier_pct: 0.0,
            outlier_mode: OutlierMode::Unstructured,
            damping: gptq.damping_fraction,
            block_size: gptq.block_size,
            grid_steps: AwqConfig::default().grid_steps,
        }
    }
}

impl MethodParams {
    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            max_iter: self.iters,
            cadence: self.cadence,
            strict_descent: self.strict_descent,
            seed: self.seed,
            ..SolverConfig::default()
        }
    }

    pub fn gptq_config(&self) -> GptqConfig {
        GptqConfig {
            damping_fraction: self.damping,
            block_size: self.block_size,
            ..GptqConfig::default()
        }
    }

    pub fn awq_config(&self) -> AwqConfig {
        AwqConfig {
            grid_steps: self.grid_steps,
            ..AwqConfig::default()
        }
    }

    /// `⌊pct/100 · q·p⌋`.
    pub fn outlier_budget(&self, q: usize, p: usize) -> Result<usize> {
        if !(0.0..100.0).contains(&self.outlier_pct) {
            return Err(Error::param("outlier_pct", format!("must be in [0, 100), got {}", self.outlier_pct)));
        }
        Ok((self.outlier_pct / 100.0 * (q * p) as f64).floor() as usize)
    }
}

/// A finished run; `outliers` is set for the outlier solver only.
#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub solution: QuantSolution,
    pub outliers: Option<SparseOutliers>,
}

impl MethodOutput {
    pub fn outlier_budget(&self) -> usize {
        self.outliers.as_ref().map_or(0, SparseOutliers::budget)
    }
}

pub fn run_method(problem: &LayerProblem, method: SolverId, bits: u32, params: &MethodParams) -> Result<MethodOutput> {
    let plain = |solution| Ok(MethodOutput { solution, outliers: None });
    match method {
        SolverId::Rtn => plain(rtn_quantize(problem, &build_uniform_grid(problem.weights(), bits)?)?),
        SolverId::Gptq => plain(gptq_solve(
            problem,
            &build_uniform_grid(problem.weights(), bits)?,
            &params.gptq_config(),
        )?),
        SolverId::Awq => plain(awq_solve(problem, bits, &params.awq_config())?),
        SolverId::QuantEase => plain(quantease_basic(
            problem,
            &build_uniform_grid(problem.weights(), bits)?,
            &params.solver_config(),
        )?),
        SolverId::QuantEaseAccel => plain(quantease_accel(
            problem,
            &build_uniform_grid(problem.weights(), bits)?,
            &params.solver_config(),
        )?),
        SolverId::QuantEaseModified => plain(quantease_modified(
            problem,
            &build_uniform_grid(problem.weights(), bits)?,
            &params.solver_config(),
        )?),
        SolverId::QuantEaseOutlier => {
            let s = params.outlier_budget(problem.q(), problem.p())?;
            let out = quantease_outlier(problem, bits, s, params.outlier_mode, &params.solver_config())?;
            let solution = QuantSolution {
                solver: SolverId::QuantEaseOutlier,
                w_hat: out.w_hat,
                grid: out.grid,
                column_scales: None,
                feasible: out.feasible,
                objective: out.objective_g,
                trace: out.trace,
                iterations: out.iterations,
                converged: false,
                wall_time: out.wall_time,
                warnings: out.warnings,
            };
            Ok(MethodOutput {
                solution,
                outliers: Some(out.h),
            })
        }
    }
}
