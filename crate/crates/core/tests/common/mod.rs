//! Independent oracles shared by the integration suites. None of these call
//! into the solver code paths they check.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::HashSet;

use quantease::{gen_synthetic, DenseMatrix, LayerProblem, QuantGrid, SyntheticSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut r = rng(seed);
    DenseMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

pub fn synthetic(q: usize, p: usize, n: usize, rho: f64, seed: u64) -> (DenseMatrix, DenseMatrix) {
    gen_synthetic(&SyntheticSpec {
        q,
        p,
        n,
        rho,
        weight_scale: 1.0,
        seed,
    })
    .unwrap()
}

pub fn problem(q: usize, p: usize, n: usize, rho: f64, seed: u64) -> LayerProblem {
    let (w, x) = synthetic(q, p, n, rho, seed);
    LayerProblem::build(w, &x).unwrap()
}

/// `‖(W − Ŵ)X‖_F²` by explicit products.
pub fn direct_residual(w: &DenseMatrix, w_hat: &DenseMatrix, x: &DenseMatrix) -> f64 {
    let (q, p) = w.shape();
    let n = x.cols();
    let mut total = 0.0;
    for i in 0..q {
        for k in 0..n {
            let mut acc = 0.0;
            for a in 0..p {
                acc += (w[(i, a)] - w_hat[(i, a)]) * x[(a, k)];
            }
            total += acc * acc;
        }
    }
    total
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// All grid values of channel `i`, ascending.
pub fn levels(grid: &QuantGrid, i: usize) -> Vec<f64> {
    (0..grid.levels() as u32).map(|k| grid.level_value(i, k)).collect()
}

/// Exhaustive enumeration of one row's grid assignments.
///
/// The objective separates over rows: `f = Σ_i (w_i − ŵ_i) Σ (w_i − ŵ_i)ᵀ`,
/// so a point is a CW-minimum iff each row is one for its own row problem.
pub struct RowEnumeration {
    /// Level-code vectors of every CW-minimum of the row problem.
    pub cw_minima: HashSet<Vec<u8>>,
    /// Objective of each CW-minimum, keyed like `cw_minima`.
    pub cw_values: Vec<(Vec<u8>, f64)>,
    pub global_min: f64,
    pub global_argmin: Vec<u8>,
}

/// Walks every assignment with an odometer, maintaining `d = w − ŵ`, `Σd`
/// and `f = dᵀΣd` incrementally; a point is a CW-minimum when no single
/// coordinate move lowers `f` by more than `tol · max(1, f)`.
pub fn enumerate_row(w: &[f64], sigma: &DenseMatrix, lv: &[f64], tol: f64) -> RowEnumeration {
    let p = w.len();
    let l = lv.len();
    let mut code = vec![0u8; p];
    let mut d: Vec<f64> = (0..p).map(|a| w[a] - lv[0]).collect();
    let mut sd = vec![0.0; p];
    let refresh = |d: &[f64], sd: &mut [f64]| {
        for a in 0..p {
            sd[a] = (0..p).map(|b| sigma[(a, b)] * d[b]).sum();
        }
    };
    refresh(&d, &mut sd);
    let mut f: f64 = (0..p).map(|a| d[a] * sd[a]).sum();
    let mut out = RowEnumeration {
        cw_minima: HashSet::new(),
        cw_values: Vec::new(),
        global_min: f64::INFINITY,
        global_argmin: code.clone(),
    };
    let mut steps: u64 = 0;
    loop {
        if f < out.global_min {
            out.global_min = f;
            out.global_argmin = code.clone();
        }
        let thresh = -tol * f.abs().max(1.0);
        let mut is_min = true;
        'outer: for a in 0..p {
            let cur = lv[code[a] as usize];
            for &v in lv {
                if v == cur {
                    continue;
                }
                // d_a changes by cur − v
                let delta = cur - v;
                let df = 2.0 * delta * sd[a] + sigma[(a, a)] * delta * delta;
                if df < thresh {
                    is_min = false;
                    break 'outer;
                }
            }
        }
        if is_min {
            out.cw_minima.insert(code.clone());
            out.cw_values.push((code.clone(), f));
        }
        // advance the odometer
        let mut a = 0;
        loop {
            if a == p {
                return out;
            }
            let old = lv[code[a] as usize];
            code[a] = ((code[a] as usize + 1) % l) as u8;
            let new = lv[code[a] as usize];
            let delta = old - new;
            f += 2.0 * delta * sd[a] + sigma[(a, a)] * delta * delta;
            d[a] += delta;
            for b in 0..p {
                sd[b] += sigma[(b, a)] * delta;
            }
            if code[a] != 0 {
                break;
            }
            a += 1;
        }
        steps += 1;
        // bound incremental drift
        if steps.is_multiple_of(4096) {
            refresh(&d, &mut sd);
            f = (0..p).map(|a| d[a] * sd[a]).sum();
        }
    }
}

/// Level codes of a feasible row.
pub fn row_codes(row: &[f64], lv: &[f64]) -> Vec<u8> {
    row.iter()
        .map(|v| lv.iter().position(|l| l == v).expect("row is on the grid") as u8)
        .collect()
}

/// Cyclic Jacobi eigenvalue iteration for a small symmetric matrix.
pub fn jacobi_eigenvalues(m: &DenseMatrix) -> Vec<f64> {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}
