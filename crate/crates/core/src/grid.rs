//! Per-channel uniform quantization grids.
//!
//! Channel `i` represents the values `zero_level[i] + k·scale[i]` for
//! `k = 0..2^bits`. Grids are asymmetric min–max grids built once from the
//! original weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantGrid {
    bits: u32,
    scale: Vec<f64>,
    zero_level: Vec<f64>,
}

fn check_bits(bits: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::param("bits", format!("must be in [{MIN_BITS}, {MAX_BITS}], got {bits}")));
    }
    Ok(())
}

impl QuantGrid {
    /// Assembles a grid from raw parameters (e.g. decoded from a file).
    pub fn from_parts(bits: u32, scale: Vec<f64>, zero_level: Vec<f64>) -> Result<Self> {
        check_bits(bits)?;
        if scale.len() != zero_level.len() {
            return Err(Error::dims("QuantGrid::from_parts", scale.len(), zero_level.len()));
        }
        if let Some(i) = scale.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::param("scale", format!("channel {i} has non-positive scale {}", scale[i])));
        }
        if let Some(i) = zero_level.iter().position(|z| !z.is_finite()) {
            return Err(Error::param("zero_level", format!("channel {i} is not finite")));
        }
        Ok(QuantGrid { bits, scale, zero_level })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Number of levels, `2^bits`.
    pub fn levels(&self) -> usize {
        1usize << self.bits
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn zero_level(&self) -> &[f64] {
        &self.zero_level
    }

    #[inline]
    fn max_level(&self) -> f64 {
        (self.levels() - 1) as f64
    }

    /// Integer level of the grid point nearest to `x` (ties away from zero).
    #[inline]
    pub fn level_index(&self, i: usize, x: f64) -> u32 {
        let t = ((x - self.zero_level[i]) / self.scale[i]).round();
        t.clamp(0.0, self.max_level()) as u32
    }

    /// Real value of level `k` on channel `i`.
    #[inline]
    pub fn level_value(&self, i: usize, k: u32) -> f64 {
        self.zero_level[i] + k as f64 * self.scale[i]
    }

    /// `q_i(x)`: nearest representable value on channel `i`.
    #[inline]
    pub fn quantize(&self, i: usize, x: f64) -> f64 {
        self.level_value(i, self.level_index(i, x))
    }

    /// `argmin_{u ∈ Q_i} a·u² + b·u`, which equals `q_i(−b / 2a)` for `a > 0`.
    pub fn quantize_argmin_quadratic(&self, i: usize, a: f64, b: f64) -> Result<f64> {
        if !(a > 0.0) {
            return Err(Error::Contract(format!("quadratic coefficient must be positive, got {a}")));
        }
        Ok(self.quantize(i, -b / (2.0 * a)))
    }

    /// True when `x` is exactly a representable value of channel `i`.
    #[inline]
    pub fn contains(&self, i: usize, x: f64) -> bool {
        self.quantize(i, x) == x
    }

    /// Quantizes every entry of a q×p matrix row-wise (row `i` uses channel `i`).
    pub fn quantize_matrix(&self, w: &DenseMatrix) -> Result<DenseMatrix> {
        if w.rows() != self.channels() {
            return Err(Error::dims("quantize_matrix", self.channels(), w.rows()));
        }
        Ok(DenseMatrix::from_fn(w.rows(), w.cols(), |i, j| self.quantize(i, w[(i, j)])))
    }

    /// First entry not on the grid, if any.
    pub fn find_infeasible(&self, w: &DenseMatrix) -> Option<(usize, usize)> {
        (0..w.rows()).find_map(|i| (0..w.cols()).find(|&j| !self.contains(i, w[(i, j)])).map(|j| (i, j)))
    }
}

fn channel_params(min: f64, max: f64, levels: usize) -> (f64, f64) {
    if max > min {
        ((max - min) / (levels - 1) as f64, min)
    } else if min.is_finite() {
        // constant row
        (1.0, min)
    } else {
        // every entry of the row was trimmed away
        (1.0, 0.0)
    }
}

/// Asymmetric min–max grid per output channel.
pub fn build_uniform_grid(w: &DenseMatrix, bits: u32) -> Result<QuantGrid> {
    check_bits(bits)?;
    w.ensure_finite()?;
    let levels = 1usize << bits;
    let (scale, zero_level) = (0..w.rows())
        .map(|i| {
            let row = w.row(i);
            let min = row.iter().copied().fold(f64::INFINITY, f64::min);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            channel_params(min, max, levels)
        })
        .unzip();
    Ok(QuantGrid { bits, scale, zero_level })
}

/// Flat indices (`i·p + j`) of the `s` largest-magnitude entries, ties broken
/// toward the smaller `(i, j)`.
pub(crate) fn top_s_indices(values: &[f64], s: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let by_magnitude = |a: &usize, b: &usize| values[*b].abs().total_cmp(&values[*a].abs()).then(a.cmp(b));
    if s < idx.len() {
        idx.select_nth_unstable_by(s, by_magnitude);
        idx.truncate(s);
    }
    idx.sort_unstable_by(by_magnitude);
    idx
}

/// Min–max grid computed after removing the `s` globally largest-|W| entries
/// from each channel's range.
pub fn build_trimmed_grid(w: &DenseMatrix, bits: u32, s: usize) -> Result<QuantGrid> {
    check_bits(bits)?;
    w.ensure_finite()?;
    let total = w.rows() * w.cols();
    if s >= total.max(1) {
        return Err(Error::BudgetTooLarge { budget: s, entries: total });
    }
    if s == 0 {
        return build_uniform_grid(w, bits);
    }
    let mut excluded = vec![false; total];
    for k in top_s_indices(w.as_slice(), s) {
        excluded[k] = true;
    }
    let levels = 1usize << bits;
    let p = w.cols();
    let (scale, zero_level) = (0..w.rows())
        .map(|i| {
            let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
            for (j, &v) in w.row(i).iter().enumerate() {
                if !excluded[i * p + j] {
                    min = min.min(v);
                    max = max.max(v);
                }
            }
            channel_params(min, max, levels)
        })
        .unzip();
    Ok(QuantGrid { bits, scale, zero_level })
}
