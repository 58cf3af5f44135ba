//! Binary tensor and solution files, and bench reports.
//!
//! All integers and floats are little-endian. Tensor files:
//!
//! ```text
//! "QEZT" | version u32 | dtype u8 (0 f32, 1 f64) | ndim u32 | dims u64 × ndim | payload
//! ```
//!
//! Solution files:
//!
//! ```text
//! "QEZS" | version u32 | solver u8 | bits u8 | q u32 | p u32
//! (scale f64, zero_level f64) × q
//! level code u8 × q·p                        row-major
//! column scale f64 × p                       AWQ only
//! mode u8 | budget u32 | count u32 | (row u32, col u32, value f64) × count
//!                                            outlier solver only
//! objective f64 | relative_error f64 | wall_time f64 | crc32 u32
//! ```
//!
//! The trailing CRC-32 covers every preceding byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{QuantGrid, MAX_BITS, MIN_BITS};
use crate::linalg::{fmt_shape, DenseMatrix};
use crate::outlier::{OutlierMode, SparseOutliers};
use crate::problem::LayerProblem;
use crate::solution::{decoded_value, level_code, QuantSolution, SolverId};

pub const TENSOR_MAGIC: &[u8; 4] = b"QEZT";
pub const SOLUTION_MAGIC: &[u8; 4] = b"QEZS";
pub const FORMAT_VERSION: u32 = 1;

/// Relative tolerance when checking a solution footer against recomputed metrics.
pub const FOOTER_TOL: f64 = 1e-8;

/// Upper bound on the element count a tensor header may declare.
const MAX_ELEMENTS: u64 = 1 << 34;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return self.fail(format!("{} trailing bytes", self.remaining()));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// An n-dimensional little-endian tensor file.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn from_matrix(m: &DenseMatrix) -> Self {
        TensorFile {
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: TensorData::F64(m.as_slice().to_vec()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A 2-D tensor as a matrix (1-D tensors become a single row).
    pub fn to_matrix(&self) -> Result<DenseMatrix> {
        let (r, c) = match self.dims.as_slice() {
            [n] => (1, *n as usize),
            [r, c] => (*r as usize, *c as usize),
            other => {
                return Err(Error::dims("tensor rank", "1 or 2", other.len().to_string()));
            }
        };
        let values = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        };
        let m = DenseMatrix::from_vec(r, c, values)?;
        m.ensure_finite()?;
        Ok(m)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 8 * self.dims.len() + self.dtype().size() * self.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.dtype().code());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if &r.array::<4>("magic")? != TENSOR_MAGIC {
            r.pos = 0;
            return r.fail("bad magic, expected QEZT");
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            r.pos -= 4;
            return r.fail(format!("unsupported version {version}"));
        }
        let dtype = match r.u8("dtype")? {
            0 => DType::F32,
            1 => DType::F64,
            other => {
                r.pos -= 1;
                return r.fail(format!("unknown dtype {other}"));
            }
        };
        let ndim = r.u32("ndim")? as usize;
        if ndim.saturating_mul(8) > r.remaining() {
            r.pos -= 4;
            return r.fail(format!("ndim {ndim} exceeds file size"));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut count: u64 = 1;
        for _ in 0..ndim {
            let d = r.u64("dimension")?;
            count = match count.checked_mul(d) {
                Some(c) if c <= MAX_ELEMENTS => c,
                _ => {
                    r.pos -= 8;
                    return r.fail("element count overflows");
                }
            };
            dims.push(d);
        }
        let expected = count as usize * dtype.size();
        if r.remaining() != expected {
            return r.fail(format!("payload is {} bytes, dims require {expected}", r.remaining()));
        }
        let payload = r.take(expected, "payload")?;
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk")))
                    .collect(),
            ),
        };
        r.finish()?;
        Ok(TensorFile { dims, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&read_file(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.encode())
    }
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    TensorFile::read(path)?.to_matrix()
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    TensorFile::from_matrix(m).write(path)
}

/// The serialized form of a quantized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionFile {
    pub solver: SolverId,
    pub grid: QuantGrid,
    pub q: usize,
    pub p: usize,
    /// Row-major level codes.
    pub codes: Vec<u8>,
    pub column_scales: Option<Vec<f64>>,
    pub outliers: Option<SparseOutliers>,
    pub objective: f64,
    pub relative_error: f64,
    pub wall_time: f64,
}

impl SolutionFile {
    /// Packs a feasible solution. `relative_error` is stored as given.
    pub fn from_solution(
        solution: &QuantSolution,
        outliers: Option<&SparseOutliers>,
        relative_error: f64,
    ) -> Result<Self> {
        let (q, p) = solution.w_hat.shape();
        if solution.grid.channels() != q {
            return Err(Error::dims("grid channels", q.to_string(), solution.grid.channels().to_string()));
        }
        if solution.grid.bits() > MAX_BITS {
            return Err(Error::param("bits", format!("at most {MAX_BITS} bits fit one byte per code")));
        }
        let scales = solution.column_scales.as_deref();
        if let Some(s) = scales {
            if s.len() != p {
                return Err(Error::dims("column scales", p.to_string(), s.len().to_string()));
            }
        }
        if (solution.solver == SolverId::Awq) != scales.is_some() {
            return Err(Error::Contract("column scales are stored for AWQ solutions only".into()));
        }
        if (solution.solver == SolverId::QuantEaseOutlier) != outliers.is_some() {
            return Err(Error::Contract("outliers are stored for outlier solutions only".into()));
        }
        let mut codes = Vec::with_capacity(q * p);
        for i in 0..q {
            for j in 0..p {
                match level_code(&solution.grid, scales, i, j, solution.w_hat[(i, j)]) {
                    Some(k) => codes.push(k as u8),
                    None => return Err(Error::Infeasible { row: i, col: j }),
                }
            }
        }
        if let Some(h) = outliers {
            h.check_invariants(q)?;
            if h.entries().iter().any(|&(i, j, _)| i >= q || j >= p) {
                return Err(Error::Contract("outlier coordinate outside the layer".into()));
            }
        }
        Ok(SolutionFile {
            solver: solution.solver,
            grid: solution.grid.clone(),
            q,
            p,
            codes,
            column_scales: solution.column_scales.clone(),
            outliers: outliers.cloned(),
            objective: solution.objective,
            relative_error,
            wall_time: solution.wall_time,
        })
    }

    pub fn w_hat(&self) -> DenseMatrix {
        let scales = self.column_scales.as_deref();
        DenseMatrix::from_fn(self.q, self.p, |i, j| {
            decoded_value(&self.grid, scales, i, j, self.codes[i * self.p + j] as u32)
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SOLUTION_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.solver.code());
        out.push(self.grid.bits() as u8);
        out.extend_from_slice(&(self.q as u32).to_le_bytes());
        out.extend_from_slice(&(self.p as u32).to_le_bytes());
        for i in 0..self.q {
            out.extend_from_slice(&self.grid.scale()[i].to_le_bytes());
            out.extend_from_slice(&self.grid.zero_level()[i].to_le_bytes());
        }
        out.extend_from_slice(&self.codes);
        if let Some(s) = &self.column_scales {
            s.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        if let Some(h) = &self.outliers {
            out.push(h.mode().code());
            out.extend_from_slice(&(h.budget() as u32).to_le_bytes());
            out.extend_from_slice(&(h.len() as u32).to_le_bytes());
            for &(i, j, v) in h.entries() {
                out.extend_from_slice(&(i as u32).to_le_bytes());
                out.extend_from_slice(&(j as u32).to_le_bytes());
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in [self.objective, self.relative_error, self.wall_time] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Parse {
                offset: 0,
                reason: "file too short".into(),
            });
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
        let mut r = Reader::new(&bytes[..body_len]);
        if &r.array::<4>("magic")? != SOLUTION_MAGIC {
            r.pos = 0;
            return r.fail("bad magic, expected QEZS");
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            r.pos -= 4;
            return r.fail(format!("unsupported version {version}"));
        }
        let solver = match SolverId::from_code(r.u8("solver id")?) {
            Some(s) => s,
            None => {
                r.pos -= 1;
                return r.fail("unknown solver id");
            }
        };
        let bits = r.u8("bits")? as u32;
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            r.pos -= 1;
            return r.fail(format!("bit width {bits} outside {MIN_BITS}..={MAX_BITS}"));
        }
        let q = r.u32("q")? as usize;
        let p = r.u32("p")? as usize;
        let header_need = q.saturating_mul(16).saturating_add(q.saturating_mul(p));
        if q == 0 || p == 0 || header_need > r.remaining() {
            r.pos -= 8;
            return r.fail(format!("shape {q}x{p} inconsistent with file size"));
        }
        let mut scale = Vec::with_capacity(q);
        let mut zero = Vec::with_capacity(q);
        for _ in 0..q {
            let at = r.pos;
            let s = r.f64("scale")?;
            let z = r.f64("zero level")?;
            if !(s.is_finite() && s > 0.0 && z.is_finite()) {
                return Err(Error::Parse {
                    offset: at,
                    reason: format!("invalid grid parameters scale={s} zero={z}"),
                });
            }
            scale.push(s);
            zero.push(z);
        }
        let grid = QuantGrid::from_parts(bits, scale, zero).map_err(|e| Error::Parse {
            offset: r.pos,
            reason: e.to_string(),
        })?;
        let levels = 1u32 << bits;
        let codes_at = r.pos;
        let codes = r.take(q * p, "level codes")?.to_vec();
        if let Some(k) = codes.iter().position(|&c| c as u32 >= levels) {
            return Err(Error::Parse {
                offset: codes_at + k,
                reason: format!("level code {} exceeds {} levels", codes[k], levels),
            });
        }
        let column_scales = if solver == SolverId::Awq {
            let mut s = Vec::with_capacity(p);
            for _ in 0..p {
                let v = r.f64("column scale")?;
                if !(v.is_finite() && v > 0.0) {
                    r.pos -= 8;
                    return r.fail(format!("invalid column scale {v}"));
                }
                s.push(v);
            }
            Some(s)
        } else {
            None
        };
        let outliers = if solver == SolverId::QuantEaseOutlier {
            let mode = match OutlierMode::from_code(r.u8("outlier mode")?) {
                Some(m) => m,
                None => {
                    r.pos -= 1;
                    return r.fail("unknown outlier mode");
                }
            };
            let budget = r.u32("outlier budget")? as usize;
            let count = r.u32("outlier count")? as usize;
            if count > budget {
                r.pos -= 4;
                return r.fail(format!("outlier count {count} exceeds budget {budget}"));
            }
            if count.saturating_mul(16) > r.remaining() {
                r.pos -= 4;
                return r.fail("outlier count exceeds file size");
            }
            let at = r.pos;
            let mut entries = Vec::with_capacity(count);
            for _ in 0..count {
                let i = r.u32("outlier row")? as usize;
                let j = r.u32("outlier col")? as usize;
                let v = r.f64("outlier value")?;
                if i >= q || j >= p {
                    r.pos -= 16;
                    return r.fail(format!("outlier ({i}, {j}) outside {q}x{p}"));
                }
                entries.push((i, j, v));
            }
            if entries.windows(2).any(|w| (w[0].0, w[0].1) >= (w[1].0, w[1].1)) {
                return Err(Error::Parse {
                    offset: at,
                    reason: "outlier entries not strictly sorted".into(),
                });
            }
            let h = SparseOutliers::from_entries(entries, budget, mode).map_err(|e| Error::Parse {
                offset: at,
                reason: e.to_string(),
            })?;
            h.check_invariants(q).map_err(|e| Error::Parse {
                offset: at,
                reason: e.to_string(),
            })?;
            Some(h)
        } else {
            None
        };
        let objective = r.f64("objective")?;
        let relative_error = r.f64("relative error")?;
        let wall_time = r.f64("wall time")?;
        r.finish()?;
        let actual = crc32fast::hash(&bytes[..body_len]);
        if actual != stored {
            return Err(Error::Parse {
                offset: body_len,
                reason: format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
            });
        }
        Ok(SolutionFile {
            solver,
            grid,
            q,
            p,
            codes,
            column_scales,
            outliers,
            objective,
            relative_error,
            wall_time,
        })
    }

    /// `(objective, relative_error)` recomputed from `Ŵ` (plus `Ĥ`, if any).
    pub fn recompute(&self, problem: &LayerProblem) -> Result<(f64, f64)> {
        if (problem.q(), problem.p()) != (self.q, self.p) {
            return Err(Error::dims(
                "solution shape",
                fmt_shape((problem.q(), problem.p())),
                fmt_shape((self.q, self.p)),
            ));
        }
        let w_hat = self.w_hat();
        let objective = match &self.outliers {
            Some(h) => problem.objective_g(&w_hat, h)?,
            None => problem.objective_f(&w_hat)?,
        };
        Ok((objective, problem.relative_error_of(objective)?))
    }

    /// Recomputes the metrics and fails unless both match the footer within
    /// [`FOOTER_TOL`] relative.
    pub fn verify(&self, problem: &LayerProblem) -> Result<(f64, f64)> {
        let (objective, rel) = self.recompute(problem)?;
        // absolute floor: objectives near zero carry rounding noise of order ε‖WX‖²
        let floor = 1e-14 * problem.sigma_trace_term();
        for (field, stored, fresh, scale) in [
            ("objective", self.objective, objective, floor),
            ("relative_error", self.relative_error, rel, 1e-14),
        ] {
            let ok = (stored - fresh).abs() <= FOOTER_TOL * stored.abs().max(fresh.abs()) + scale;
            if !ok {
                return Err(Error::FooterMismatch {
                    field,
                    stored,
                    recomputed: fresh,
                });
            }
        }
        Ok((objective, rel))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&read_file(path.as_ref())?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.encode())
    }
}

/// One bench cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub layer: String,
    pub solver: String,
    pub bits: u32,
    pub seed: u64,
    pub relative_error: Option<f64>,
    pub objective: Option<f64>,
    pub iterations: Option<usize>,
    pub wall_time_seconds: Option<f64>,
    pub feasible: Option<bool>,
    pub outlier_budget: usize,
    pub error: Option<String>,
}

impl BenchRow {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

pub const BENCH_CSV_HEADER: [&str; 11] = [
    "layer",
    "solver",
    "bits",
    "seed",
    "relative_error",
    "objective",
    "iterations",
    "wall_time_seconds",
    "feasible",
    "outlier_budget",
    "error",
];

/// Sorts by `(layer, solver, bits, seed)`.
pub fn sort_rows(rows: &mut [BenchRow]) {
    rows.sort_by(|a, b| {
        (&a.layer, &a.solver, a.bits, a.seed).cmp(&(&b.layer, &b.solver, b.bits, b.seed))
    });
}

pub fn rows_to_csv(rows: &[BenchRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(BENCH_CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Config(format!("csv: {e}")))?;
    if header.iter().ne(BENCH_CSV_HEADER) {
        return Err(Error::Config("unexpected csv header".into()));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Config(format!("csv: {e}"))))
        .collect()
}

pub fn rows_to_json(rows: &[BenchRow]) -> Result<String> {
    serde_json::to_string_pretty(rows).map_err(|e| Error::Config(format!("json: {e}")))
}
