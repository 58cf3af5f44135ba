//! Bench harness: a TOML config expands into `(layer, method, bits, seed)`
//! cells whose results form a [`BenchRow`] report.
//!
//! ```toml
//! methods = ["gptq", "quantease"]
//! bits = [3]
//! seeds = [0]
//! iters = 25
//!
//! [[layers]]
//! name = "syn"
//! q = 64
//! p = 128
//! n = 512
//! rho = 0.6
//! count = 50
//!
//! [[layers]]
//! name = "captured"
//! weights = "w.qezt"
//! calib = "x.qezt"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_matrix, sort_rows, BenchRow};
use crate::linalg::DenseMatrix;
use crate::problem::{gen_synthetic, LayerProblem, SyntheticSpec};
use crate::runner::{run_method, MethodParams};
use crate::solution::SolverId;

/// Multiplier mixing the run seed into per-layer data seeds.
const SEED_STRIDE: u64 = 1_000_003;

fn default_rho() -> f64 {
    0.0
}

fn default_one() -> usize {
    1
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSource {
    Synthetic {
        q: usize,
        p: usize,
        n: usize,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_scale")]
        weight_scale: f64,
    },
    /// `calib` holds `X`; `gram` holds a precomputed `Σ` (with sample count `n`).
    Files {
        weights: PathBuf,
        calib: Option<PathBuf>,
        gram: Option<PathBuf>,
        n: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(default = "default_one")]
    pub count: usize,
    #[serde(flatten)]
    pub source: LayerSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub methods: Vec<SolverId>,
    pub bits: Vec<u32>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub layers: Vec<LayerSpec>,
    #[serde(flatten)]
    pub params: MethodParams,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl BenchConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: BenchConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file; relative layer paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            for layer in &mut cfg.layers {
                if let LayerSource::Files { weights, calib, gram, .. } = &mut layer.source {
                    for p in [Some(weights), calib.as_mut(), gram.as_mut()].into_iter().flatten() {
                        if p.is_relative() {
                            *p = base.join(&*p);
                        }
                    }
                }
            }
        }
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.bits.is_empty() || self.seeds.is_empty() || self.layers.is_empty() {
            return Err(Error::Config("methods, bits, seeds and layers must be non-empty".into()));
        }
        for l in &self.layers {
            if l.count == 0 {
                return Err(Error::Config(format!("layer '{}' has count 0", l.name)));
            }
            if let LayerSource::Files { calib, gram, .. } = &l.source {
                if calib.is_some() == gram.is_some() {
                    return Err(Error::Config(format!("layer '{}' needs exactly one of calib or gram", l.name)));
                }
            }
        }
        Ok(())
    }

    /// One job per `(layer instance, seed)`; each job runs every method and bit width.
    pub fn jobs(&self) -> Vec<BenchJob> {
        let mut jobs = Vec::new();
        let mut index = 0u64;
        for spec in &self.layers {
            for k in 0..spec.count {
                let name = if spec.count == 1 {
                    spec.name.clone()
                } else {
                    let width = (spec.count - 1).to_string().len();
                    format!("{}-{:0width$}", spec.name, k)
                };
                for &seed in &self.seeds {
                    jobs.push(BenchJob {
                        layer: name.clone(),
                        source: spec.source.clone(),
                        data_seed: seed.wrapping_mul(SEED_STRIDE).wrapping_add(index),
                        seed,
                    });
                }
                index += 1;
            }
        }
        jobs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchJob {
    pub layer: String,
    pub source: LayerSource,
    pub seed: u64,
    pub data_seed: u64,
}

impl BenchJob {
    pub fn load_problem(&self) -> Result<LayerProblem> {
        match &self.source {
            LayerSource::Synthetic {
                q,
                p,
                n,
                rho,
                weight_scale,
            } => {
                let (w, x) = gen_synthetic(&SyntheticSpec {
                    q: *q,
                    p: *p,
                    n: *n,
                    rho: *rho,
                    weight_scale: *weight_scale,
                    seed: self.data_seed,
                })?;
                LayerProblem::build(w, &x)
            }
            LayerSource::Files { weights, calib, gram, n } => {
                let w = read_matrix(weights)?;
                match (calib, gram) {
                    (Some(c), None) => LayerProblem::build(w, &read_matrix(c)?),
                    (None, Some(g)) => {
                        let sigma: DenseMatrix = read_matrix(g)?;
                        LayerProblem::from_gram(w, sigma, n.unwrap_or(0))
                    }
                    _ => Err(Error::Config("layer needs exactly one of calib or gram".into())),
                }
            }
        }
    }

    /// Runs every `(method, bits)` cell; failures become rows with `error` set.
    pub fn run(&self, methods: &[SolverId], bits: &[u32], params: &MethodParams) -> Vec<BenchRow> {
        let params = MethodParams {
            seed: self.seed,
            ..params.clone()
        };
        let problem = self.load_problem();
        let mut rows = Vec::with_capacity(methods.len() * bits.len());
        for &method in methods {
            for &b in bits {
                let mut row = BenchRow {
                    layer: self.layer.clone(),
                    solver: method.to_string(),
                    bits: b,
                    seed: self.seed,
                    relative_error: None,
                    objective: None,
                    iterations: None,
                    wall_time_seconds: None,
                    feasible: None,
                    outlier_budget: 0,
                    error: None,
                };
                let result = problem.as_ref().map_err(|e| e.to_string()).and_then(|prob| {
                    let run = || -> Result<_> {
                        let out = run_method(prob, method, b, &params)?;
                        let rel = prob.relative_error_of(out.solution.objective)?;
                        Ok((out, rel))
                    };
                    run().map_err(|e| e.to_string())
                });
                match result {
                    Ok((out, rel)) => {
                        row.relative_error = Some(rel);
                        row.objective = Some(out.solution.objective);
                        row.iterations = Some(out.solution.iterations);
                        row.wall_time_seconds = Some(out.solution.wall_time);
                        row.feasible = Some(out.solution.feasible);
                        row.outlier_budget = out.outlier_budget();
                    }
                    Err(e) => row.error = Some(e),
                }
                rows.push(row);
            }
        }
        rows
    }
}

/// Runs all jobs sequentially and returns sorted rows.
pub fn run_bench(config: &BenchConfig) -> Vec<BenchRow> {
    let mut rows: Vec<BenchRow> = config
        .jobs()
        .iter()
        .flat_map(|job| job.run(&config.methods, &config.bits, &config.params))
        .collect();
    sort_rows(&mut rows);
    rows
}

/// Relative improvement of QuantEase over GPTQ at one bit width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementSummary {
    pub bits: u32,
    /// Paired `(layer, seed)` cells.
    pub pairs: usize,
    pub median: f64,
    pub max: f64,
    /// Fraction of pairs with `Err_qe ≤ Err_gptq`.
    pub win_rate: f64,
}

/// `(Err_gptq − Err_qe) / Err_gptq` per paired cell, for `method` against GPTQ.
pub fn improvements(rows: &[BenchRow], method: SolverId, bits: u32) -> Vec<f64> {
    let find = |solver: &str, layer: &str, seed: u64| {
        rows.iter()
            .find(|r| r.solver == solver && r.layer == layer && r.seed == seed && r.bits == bits)
            .and_then(|r| r.relative_error)
    };
    let gptq = SolverId::Gptq.to_string();
    let target = method.to_string();
    rows.iter()
        .filter(|r| r.solver == target && r.bits == bits)
        .filter_map(|r| {
            let e_qe = r.relative_error?;
            let e_g = find(&gptq, &r.layer, r.seed)?;
            (e_g > 0.0).then(|| (e_g - e_qe) / e_g)
        })
        .collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Per-bit-width improvement of plain QuantEase (or the first QuantEase
/// variant present) over GPTQ.
pub fn summarize(rows: &[BenchRow]) -> Vec<ImprovementSummary> {
    let method = [
        SolverId::QuantEase,
        SolverId::QuantEaseAccel,
        SolverId::QuantEaseModified,
        SolverId::QuantEaseOutlier,
    ]
    .into_iter()
    .find(|m| rows.iter().any(|r| r.solver == m.as_str()));
    let Some(method) = method else {
        return Vec::new();
    };
    let mut bits: Vec<u32> = rows.iter().map(|r| r.bits).collect();
    bits.sort_unstable();
    bits.dedup();
    bits.into_iter()
        .filter_map(|b| {
            let imp = improvements(rows, method, b);
            let med = median(&imp)?;
            Some(ImprovementSummary {
                bits: b,
                pairs: imp.len(),
                median: med,
                max: imp.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                win_rate: imp.iter().filter(|v| **v >= 0.0).count() as f64 / imp.len() as f64,
            })
        })
        .collect()
}
