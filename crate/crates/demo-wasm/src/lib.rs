//! Browser bindings for the quantization solvers.
//!
//! Each exported function takes plain numbers, runs on a synthetic layer and
//! returns a JSON string for the page in `www/` to draw.

use quantease::{
    build_trimmed_grid, build_uniform_grid, gen_synthetic, run_method, DenseMatrix, LayerProblem, MethodParams,
    OutlierMode, Result, SolverId, SyntheticSpec,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest layer the page may request; keeps a single call interactive.
const MAX_ENTRIES: usize = 64 * 256;

#[derive(Debug, Serialize)]
pub struct SolverRun {
    pub solver: String,
    pub relative_error: f64,
    pub wall_time_ms: f64,
    /// `(iteration, relative_error)` after each logged iteration.
    pub trace: Vec<(usize, f64)>,
}

#[derive(Debug, Serialize)]
pub struct OutlierPoint {
    pub pct: f64,
    /// Unstructured budget; the column mode keeps `⌊budget/q⌋` columns.
    pub budget: usize,
    pub unstructured: f64,
    pub columns: f64,
}

#[derive(Debug, Serialize)]
pub struct GridView {
    pub values: Vec<f64>,
    pub plain_levels: Vec<f64>,
    pub trimmed_levels: Vec<f64>,
    pub plain_error: f64,
    pub trimmed_error: f64,
}

fn layer(q: usize, p: usize, n: usize, rho: f64, seed: u64) -> Result<LayerProblem> {
    if q * p > MAX_ENTRIES {
        return Err(quantease::Error::InvalidParameter {
            name: "q*p",
            reason: format!("at most {MAX_ENTRIES} weights in the demo"),
        });
    }
    let (w, x) = gen_synthetic(&SyntheticSpec {
        q,
        p,
        n,
        rho,
        weight_scale: 1.0,
        seed,
    })?;
    LayerProblem::build(w, &x)
}

/// Runs every dense solver on one synthetic layer.
pub fn compare_solvers_json(q: usize, p: usize, n: usize, rho: f64, bits: u32, iters: usize, seed: u64) -> Result<String> {
    let problem = layer(q, p, n, rho, seed)?;
    let params = MethodParams {
        iters,
        seed,
        ..MethodParams::default()
    };
    let mut runs = Vec::new();
    for id in [
        SolverId::Rtn,
        SolverId::Awq,
        SolverId::Gptq,
        SolverId::QuantEase,
        SolverId::QuantEaseAccel,
        SolverId::QuantEaseModified,
    ] {
        let out = run_method(&problem, id, bits, &params)?;
        let trace = out
            .solution
            .trace
            .iter()
            .map(|t| Ok((t.iteration, problem.relative_error_of(t.objective)?)))
            .collect::<Result<_>>()?;
        runs.push(SolverRun {
            solver: id.to_string(),
            relative_error: problem.relative_error_of(out.solution.objective)?,
            wall_time_ms: out.solution.wall_time * 1e3,
            trace,
        });
    }
    Ok(serde_json::to_string(&runs).expect("plain data serializes"))
}

/// Relative error of outlier-aware QuantEase against the outlier percentage.
#[allow(clippy::too_many_arguments)]
pub fn outlier_sweep_json(
    q: usize,
    p: usize,
    n: usize,
    rho: f64,
    bits: u32,
    iters: usize,
    seed: u64,
    pcts: &[f64],
) -> Result<String> {
    let problem = layer(q, p, n, rho, seed)?;
    let mut points = Vec::with_capacity(pcts.len());
    for &pct in pcts {
        let mut errs = [0.0; 2];
        let mut budget = 0;
        for (slot, mode) in [OutlierMode::Unstructured, OutlierMode::StructuredColumns].into_iter().enumerate() {
            let params = MethodParams {
                iters,
                seed,
                outlier_pct: pct,
                outlier_mode: mode,
                ..MethodParams::default()
            };
            let out = run_method(&problem, SolverId::QuantEaseOutlier, bits, &params)?;
            if mode == OutlierMode::Unstructured {
                budget = out.outlier_budget();
            }
            errs[slot] = problem.relative_error_of(out.solution.objective)?;
        }
        points.push(OutlierPoint {
            pct,
            budget,
            unstructured: errs[0],
            columns: errs[1],
        });
    }
    Ok(serde_json::to_string(&points).expect("plain data serializes"))
}

/// One row of weights with a planted outlier, quantized on the min-max grid
/// and on the grid with the `trim` largest entries removed.
pub fn grid_view_json(len: usize, outlier: f64, bits: u32, trim: usize, seed: u64) -> Result<String> {
    let (w, _) = gen_synthetic(&SyntheticSpec {
        q: 1,
        p: len.max(2),
        n: 1,
        rho: 0.0,
        weight_scale: 1.0,
        seed,
    })?;
    let mut values = w.row(0).to_vec();
    values[0] = outlier;
    let row = DenseMatrix::from_vec(1, values.len(), values.clone())?;
    let plain = build_uniform_grid(&row, bits)?;
    let trimmed = build_trimmed_grid(&row, bits, trim)?;
    let levels = |g: &quantease::QuantGrid| (0..g.levels() as u32).map(|k| g.level_value(0, k)).collect::<Vec<_>>();
    // trimmed entries are carried in full precision, so they contribute no error
    let kept: Vec<bool> = {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
        let mut keep = vec![true; values.len()];
        order.iter().take(trim).for_each(|&k| keep[k] = false);
        keep
    };
    let sq_err = |g: &quantease::QuantGrid, mask: Option<&[bool]>| {
        values
            .iter()
            .enumerate()
            .filter(|(k, _)| mask.is_none_or(|m| m[*k]))
            .map(|(_, &v)| (v - g.quantize(0, v)).powi(2))
            .sum::<f64>()
    };
    let view = GridView {
        plain_levels: levels(&plain),
        trimmed_levels: levels(&trimmed),
        plain_error: sq_err(&plain, None),
        trimmed_error: sq_err(&trimmed, Some(&kept)),
        values,
    };
    Ok(serde_json::to_string(&view).expect("plain data serializes"))
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = compareSolvers)]
pub fn compare_solvers(
    q: usize,
    p: usize,
    n: usize,
    rho: f64,
    bits: u32,
    iters: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    js(compare_solvers_json(q, p, n, rho, bits, iters, seed as u64))
}

#[wasm_bindgen(js_name = outlierSweep)]
#[allow(clippy::too_many_arguments)]
pub fn outlier_sweep(
    q: usize,
    p: usize,
    n: usize,
    rho: f64,
    bits: u32,
    iters: usize,
    seed: u32,
    pcts: Vec<f64>,
) -> std::result::Result<String, JsError> {
    js(outlier_sweep_json(q, p, n, rho, bits, iters, seed as u64, &pcts))
}

#[wasm_bindgen(js_name = gridView)]
pub fn grid_view(len: usize, outlier: f64, bits: u32, trim: usize, seed: u32) -> std::result::Result<String, JsError> {
    js(grid_view_json(len, outlier, bits, trim, seed as u64))
}
