use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use quantease::io::{read_matrix, rows_from_csv, write_matrix, SolutionFile};
use quantease::DenseMatrix;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_quantease"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates a layer under `dir` and returns its weight and calibration paths.
fn gen(dir: &Path, name: &str, extra: &[&str]) -> (PathBuf, PathBuf) {
    let prefix = dir.join(name);
    let mut args = vec!["gen", "--q", "8", "--p", "16", "--n", "64", "--out", s(&prefix)];
    args.extend_from_slice(extra);
    ok(&args);
    (dir.join(format!("{name}_w.qezt")), dir.join(format!("{name}_x.qezt")))
}

/// `(relative_error, objective)` from a quantize summary line.
fn metrics(line: &str) -> (f64, f64) {
    let f: Vec<&str> = line.split_whitespace().collect();
    (f[2].parse().unwrap(), f[3].parse().unwrap())
}

fn quantize(w: &Path, x: &Path, out: &Path, method: &str, extra: &[&str]) -> (f64, f64) {
    let mut args = vec![
        "quantize", "--weights", s(w), "--calib", s(x), "--method", method, "--bits", "3", "--out", s(out),
    ];
    args.extend_from_slice(extra);
    metrics(&ok(&args))
}

#[test]
fn gen_is_deterministic_and_seeded() {
    let dir = TempDir::new().unwrap();
    let (w1, x1) = gen(dir.path(), "a", &["--seed", "5"]);
    let (w2, x2) = gen(dir.path(), "b", &["--seed", "5"]);
    let (w3, _) = gen(dir.path(), "c", &["--seed", "6"]);
    assert_eq!(std::fs::read(&w1).unwrap(), std::fs::read(&w2).unwrap());
    assert_eq!(std::fs::read(&x1).unwrap(), std::fs::read(&x2).unwrap());
    assert_ne!(std::fs::read(&w1).unwrap(), std::fs::read(&w3).unwrap());
    let w = read_matrix(&w1).unwrap();
    assert_eq!(w.shape(), (8, 16));
    assert_eq!(read_matrix(&x1).unwrap().shape(), (16, 64));
}

#[test]
fn gen_rho_controls_input_correlation() {
    let dir = TempDir::new().unwrap();
    let off_diagonal_share = |x: &DenseMatrix| {
        let g = quantease::gram(x).unwrap();
        let total: f64 = g.as_slice().iter().map(|v| v.abs()).sum();
        (total - (0..g.rows()).map(|i| g[(i, i)].abs()).sum::<f64>()) / total
    };
    let (_, x0) = gen(dir.path(), "r0", &["--rho", "0"]);
    let (_, x9) = gen(dir.path(), "r9", &["--rho", "0.9"]);
    let a = off_diagonal_share(&read_matrix(x0).unwrap());
    let b = off_diagonal_share(&read_matrix(x9).unwrap());
    assert!(b > a + 0.2, "rho 0.9 share {b} vs rho 0 share {a}");
}

#[test]
fn rtn_is_exact_on_grid_weights() {
    let dir = TempDir::new().unwrap();
    let row: Vec<f64> = (0..16).map(|k| -1.0 + 0.125 * k as f64).collect();
    let w = DenseMatrix::from_rows(&[&row, &row]);
    let x = quantease::gen_synthetic(&quantease::SyntheticSpec {
        q: 1,
        p: 16,
        n: 32,
        rho: 0.3,
        weight_scale: 1.0,
        seed: 0,
    })
    .unwrap()
    .1;
    let (wp, xp) = (dir.path().join("w.qezt"), dir.path().join("x.qezt"));
    write_matrix(&wp, &w).unwrap();
    write_matrix(&xp, &x).unwrap();
    let out = dir.path().join("s.qezs");
    let line = ok(&["quantize", "--weights", s(&wp), "--calib", s(&xp), "--method", "rtn", "--bits", "4", "--out", s(&out)]);
    assert_eq!(metrics(&line), (0.0, 0.0));
    assert_eq!(SolutionFile::read(&out).unwrap().w_hat(), w);
}

#[test]
fn every_method_writes_a_verifiable_solution() {
    let dir = TempDir::new().unwrap();
    let (w, x) = gen(dir.path(), "l", &["--rho", "0.6"]);
    for method in ["rtn", "gptq", "awq", "quantease", "quantease-accel", "quantease-modified", "quantease-outlier"] {
        let out = dir.path().join(format!("{method}.qezs"));
        let (rel, obj) = quantize(&w, &x, &out, method, &["--iters", "6"]);
        assert!(rel > 0.0 && obj > 0.0);
        let line = ok(&["eval", "--weights", s(&w), "--calib", s(&x), "--solution", s(&out)]);
        let f: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(f[0], "objective");
        let eval_obj: f64 = f[1].parse().unwrap();
        assert!((eval_obj - obj).abs() <= 1e-8 * obj, "{method}: {eval_obj} vs {obj}");
    }
}

#[test]
fn zero_outlier_budget_matches_quantease() {
    let dir = TempDir::new().unwrap();
    let (w, x) = gen(dir.path(), "l", &["--rho", "0.5"]);
    let a = quantize(&w, &x, &dir.path().join("a.qezs"), "quantease", &[]);
    let b = quantize(&w, &x, &dir.path().join("b.qezs"), "quantease-outlier", &["--outlier-pct", "0"]);
    assert_eq!(a, b);
    let wa = SolutionFile::read(dir.path().join("a.qezs")).unwrap().w_hat();
    let wb = SolutionFile::read(dir.path().join("b.qezs")).unwrap().w_hat();
    assert_eq!(wa, wb);
}

#[test]
fn accelerated_matches_basic() {
    let dir = TempDir::new().unwrap();
    let (w, x) = gen(dir.path(), "l", &["--rho", "0.7"]);
    let (_, a) = quantize(&w, &x, &dir.path().join("a.qezs"), "quantease", &[]);
    let (_, b) = quantize(&w, &x, &dir.path().join("b.qezs"), "quantease-accel", &[]);
    assert!((a - b).abs() <= 1e-6 * a);
}

#[test]
fn gram_input_gives_the_same_result_as_calibration_data() {
    let dir = TempDir::new().unwrap();
    let (w, x) = gen(dir.path(), "l", &["--rho", "0.5"]);
    let g = dir.path().join("g.qezt");
    write_matrix(&g, &quantease::gram(&read_matrix(&x).unwrap()).unwrap()).unwrap();
    let (_, a) = quantize(&w, &x, &dir.path().join("a.qezs"), "gptq", &[]);
    let line = ok(&[
        "quantize", "--weights", s(&w), "--gram", s(&g), "--samples", "64", "--method", "gptq", "--bits", "3", "--out",
        s(&dir.path().join("b.qezs")),
    ]);
    assert_eq!(metrics(&line).1, a);
}

#[test]
fn corrupted_solution_is_rejected() {
    let dir = TempDir::new().unwrap();
    let (w, x) = gen(dir.path(), "l", &[]);
    let out = dir.path().join("s.qezs");
    quantize(&w, &x, &out, "quantease", &[]);
    let mut bytes = std::fs::read(&out).unwrap();
    bytes[40] ^= 0x10;
    std::fs::write(&out, bytes).unwrap();
    let o = run(&["eval", "--weights", s(&w), "--calib", s(&x), "--solution", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("checksum"));
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = TempDir::new().unwrap();
    let (w, x) = gen(dir.path(), "l", &[]);
    let out = dir.path().join("s.qezs");
    let base = ["quantize", "--weights", s(&w), "--calib", s(&x), "--out", s(&out)];

    // usage
    assert_eq!(run(&["quantize"]).status.code(), Some(2));
    assert_eq!(run(&[&base[..], &["--method", "nope", "--bits", "3"]].concat()).status.code(), Some(2));
    assert_eq!(run(&[&base[..], &["--method", "rtn", "--bits", "1"]].concat()).status.code(), Some(2));
    assert_eq!(run(&[&base[..], &["--method", "rtn", "--bits", "3", "--outlier-pct", "1"]].concat()).status.code(), Some(2));
    assert_eq!(run(&[&base[..], &["--method", "quantease", "--bits", "3", "--cadence", "1"]].concat()).status.code(), Some(2));

    // data
    let missing = dir.path().join("missing.qezt");
    let o = run(&["quantize", "--weights", s(&missing), "--calib", s(&x), "--method", "rtn", "--bits", "3", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let o = run(&["quantize", "--weights", s(&x), "--calib", s(&x), "--method", "rtn", "--bits", "3", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "shape mismatch");

    // numerical: an input channel that never fires makes undamped Σ singular
    let mut xz = read_matrix(&x).unwrap();
    xz.row_mut(3).iter_mut().for_each(|v| *v = 0.0);
    let xzp = dir.path().join("xz.qezt");
    write_matrix(&xzp, &xz).unwrap();
    let o = run(&[
        "quantize", "--weights", s(&w), "--calib", s(&xzp), "--method", "gptq", "--bits", "3", "--damping", "0", "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bench_writes_sorted_csv_and_json() {
    let dir = TempDir::new().unwrap();
    let (w, x) = gen(dir.path(), "cap", &["--seed", "3"]);
    let cfg = dir.path().join("bench.toml");
    std::fs::write(
        &cfg,
        format!(
            r#"
methods = ["gptq", "quantease"]
bits = [3]
iters = 5

[[layers]]
name = "syn"
q = 4
p = 8
n = 32
count = 2

[[layers]]
name = "captured"
weights = "{}"
calib = "{}"
"#,
            w.file_name().unwrap().to_str().unwrap(),
            x.file_name().unwrap().to_str().unwrap()
        ),
    )
    .unwrap();
    let csv = dir.path().join("r.csv");
    let text = ok(&["bench", "--config", s(&cfg), "--out", s(&csv), "--threads", "2"]);
    assert!(text.starts_with("cells 6 succeeded 6"), "{text}");
    let rows = rows_from_csv(&std::fs::read_to_string(&csv).unwrap()).unwrap();
    let keys: Vec<(String, String)> = rows.iter().map(|r| (r.layer.clone(), r.solver.clone())).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert_eq!(keys[0], ("captured".into(), "gptq".into()));

    let json = dir.path().join("r.json");
    ok(&["bench", "--config", s(&cfg), "--out", s(&json), "--format", "json"]);
    let v: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v.len(), 6);
    // thread count does not change results
    for (r, j) in rows.iter().zip(&v) {
        assert_eq!(r.objective.unwrap(), j["objective"].as_f64().unwrap());
    }
}

#[test]
fn bench_with_only_failures_exits_nonzero() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bench.toml");
    std::fs::write(
        &cfg,
        "methods = [\"rtn\"]\nbits = [3]\n[[layers]]\nname = \"x\"\nweights = \"nope.qezt\"\ncalib = \"nope.qezt\"\n",
    )
    .unwrap();
    let o = run(&["bench", "--config", s(&cfg), "--out", s(&dir.path().join("r.csv"))]);
    assert!(!o.status.success());
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "methods = 3").unwrap();
    assert_eq!(run(&["bench", "--config", s(&bad), "--out", s(&dir.path().join("r.csv"))]).status.code(), Some(2));
}
