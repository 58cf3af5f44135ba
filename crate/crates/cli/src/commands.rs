use std::path::{Path, PathBuf};

use quantease::bench::{summarize, BenchConfig};
use quantease::io::{read_matrix, rows_to_csv, rows_to_json, sort_rows, write_matrix, SolutionFile};
use quantease::{gen_synthetic, run_method, Error, LayerProblem, MethodParams, OutlierMode, Result, SolverId, SyntheticSpec};
use rayon::prelude::*;

use crate::args::{BenchArgs, EvalArgs, Format, GenArgs, LayerInput, QuantizeArgs};

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn gen(a: &GenArgs) -> Result<()> {
    let (w, x) = gen_synthetic(&SyntheticSpec {
        q: a.q,
        p: a.p,
        n: a.n,
        rho: a.rho,
        weight_scale: a.weight_scale,
        seed: a.seed,
    })?;
    let w_path = with_suffix(&a.out, "_w.qezt");
    let x_path = with_suffix(&a.out, "_x.qezt");
    write_matrix(&w_path, &w)?;
    write_matrix(&x_path, &x)?;
    println!("{} {}", w_path.display(), x_path.display());
    Ok(())
}

fn load_problem(input: &LayerInput) -> Result<LayerProblem> {
    let w = read_matrix(&input.weights)?;
    match (&input.calib, &input.gram) {
        (Some(x), None) => LayerProblem::build(w, &read_matrix(x)?),
        (None, Some(g)) => LayerProblem::from_gram(w, read_matrix(g)?, input.samples),
        _ => Err(Error::InvalidParameter {
            name: "calib",
            reason: "exactly one of --calib or --gram is required".into(),
        }),
    }
}

fn params_of(a: &QuantizeArgs) -> Result<MethodParams> {
    let method = a.method.solver();
    if method != SolverId::QuantEaseOutlier && (a.outlier_pct.is_some() || a.outlier_mode.is_some()) {
        return Err(Error::InvalidParameter {
            name: "outlier_pct",
            reason: "outlier flags apply to --method quantease-outlier only".into(),
        });
    }
    Ok(MethodParams {
        iters: a.iters,
        cadence: a.cadence,
        strict_descent: a.strict_descent,
        seed: a.seed,
        outlier_pct: a.outlier_pct.unwrap_or(0.0),
        outlier_mode: a.outlier_mode.map_or(OutlierMode::Unstructured, Into::into),
        damping: a.damping,
        block_size: a.block_size,
        grid_steps: a.grid_steps,
    })
}

pub fn quantize(a: &QuantizeArgs) -> Result<()> {
    let params = params_of(a)?;
    let problem = load_problem(&a.input)?;
    let out = run_method(&problem, a.method.solver(), a.bits, &params)?;
    for w in &out.solution.warnings {
        log::warn!("{w}");
    }
    let rel = problem.relative_error_of(out.solution.objective)?;
    let file = SolutionFile::from_solution(&out.solution, out.outliers.as_ref(), rel)?;
    file.write(&a.out)?;
    println!(
        "{} {} {:.12e} {:.12e} {:.6}",
        out.solution.solver, a.bits, rel, out.solution.objective, out.solution.wall_time
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let problem = load_problem(&a.input)?;
    let file = SolutionFile::read(&a.solution)?;
    let (objective, rel) = file.verify(&problem)?;
    println!("objective {objective:.12e} relative_error {rel:.12e}");
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let cfg = BenchConfig::load(&a.config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let jobs = cfg.jobs();
    let mut rows: Vec<_> = pool.install(|| {
        jobs.par_iter()
            .flat_map_iter(|job| job.run(&cfg.methods, &cfg.bits, &cfg.params))
            .collect()
    });
    sort_rows(&mut rows);
    let text = match a.format {
        Format::Csv => rows_to_csv(&rows)?,
        Format::Json => rows_to_json(&rows)?,
    };
    std::fs::write(&a.out, text).map_err(|source| Error::Io {
        path: a.out.display().to_string(),
        source,
    })?;
    for r in rows.iter().filter(|r| !r.succeeded()) {
        log::warn!("{} {} bits={} seed={}: {}", r.layer, r.solver, r.bits, r.seed, r.error.as_deref().unwrap_or(""));
    }
    let ok = rows.iter().filter(|r| r.succeeded()).count();
    println!("cells {} succeeded {}", rows.len(), ok);
    for s in summarize(&rows) {
        println!(
            "bits {} pairs {} median_improvement {:.6} max_improvement {:.6} win_rate {:.4}",
            s.bits, s.pairs, s.median, s.max, s.win_rate
        );
    }
    if ok == 0 {
        return Err(Error::Contract("every bench cell failed".into()));
    }
    Ok(())
}
