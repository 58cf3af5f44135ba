use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::QuantGrid;
use crate::linalg::DenseMatrix;

/// Solver identifiers; the numeric id is the byte stored in solution files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverId {
    Rtn,
    Gptq,
    Awq,
    #[serde(rename = "quantease")]
    QuantEase,
    #[serde(rename = "quantease-accel")]
    QuantEaseAccel,
    #[serde(rename = "quantease-modified")]
    QuantEaseModified,
    #[serde(rename = "quantease-outlier")]
    QuantEaseOutlier,
}

impl SolverId {
    pub const ALL: [SolverId; 7] = [
        SolverId::Rtn,
        SolverId::Gptq,
        SolverId::Awq,
        SolverId::QuantEase,
        SolverId::QuantEaseAccel,
        SolverId::QuantEaseModified,
        SolverId::QuantEaseOutlier,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SolverId::Rtn => "rtn",
            SolverId::Gptq => "gptq",
            SolverId::Awq => "awq",
            SolverId::QuantEase => "quantease",
            SolverId::QuantEaseAccel => "quantease-accel",
            SolverId::QuantEaseModified => "quantease-modified",
            SolverId::QuantEaseOutlier => "quantease-outlier",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            SolverId::Rtn => 0,
            SolverId::Gptq => 1,
            SolverId::Awq => 2,
            SolverId::QuantEase => 3,
            SolverId::QuantEaseAccel => 4,
            SolverId::QuantEaseModified => 5,
            SolverId::QuantEaseOutlier => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<SolverId> {
        SolverId::ALL.into_iter().find(|s| s.code() == code)
    }

    pub fn is_quantease(self) -> bool {
        matches!(
            self,
            SolverId::QuantEase | SolverId::QuantEaseAccel | SolverId::QuantEaseModified | SolverId::QuantEaseOutlier
        )
    }
}

impl fmt::Display for SolverId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SolverId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SolverId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::param("method", format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub objective: f64,
}

/// A quantized layer: `Ŵ` together with the grid it lives on.
#[derive(Debug, Clone)]
pub struct QuantSolution {
    pub solver: SolverId,
    pub w_hat: DenseMatrix,
    pub grid: QuantGrid,
    /// Per-input-column scales `s` when `Ŵ = s⁻¹ ⊙ q(s ⊙ W)` (AWQ); `None` otherwise.
    pub column_scales: Option<Vec<f64>>,
    pub feasible: bool,
    pub objective: f64,
    pub trace: Vec<TracePoint>,
    pub iterations: usize,
    /// Strict-descent runs: a sweep finished with no accepted change.
    pub converged: bool,
    pub wall_time: f64,
    pub warnings: Vec<String>,
}

impl QuantSolution {
    /// Level code of entry `(i, j)`, or `None` if the value is off-grid.
    pub fn level_code(&self, i: usize, j: usize) -> Option<u32> {
        level_code(&self.grid, self.column_scales.as_deref(), i, j, self.w_hat[(i, j)])
    }

    /// Checks every entry against the grid.
    pub fn check_feasible(&self) -> bool {
        (0..self.w_hat.rows()).all(|i| (0..self.w_hat.cols()).all(|j| self.level_code(i, j).is_some()))
    }
}

/// Value represented by level `k` of channel `i` in column `j`.
#[inline]
pub fn decoded_value(grid: &QuantGrid, scales: Option<&[f64]>, i: usize, j: usize, k: u32) -> f64 {
    let v = grid.level_value(i, k);
    match scales {
        Some(s) => v / s[j],
        None => v,
    }
}

pub fn level_code(grid: &QuantGrid, scales: Option<&[f64]>, i: usize, j: usize, value: f64) -> Option<u32> {
    let scaled = match scales {
        Some(s) => value * s[j],
        None => value,
    };
    let k = grid.level_index(i, scaled);
    (decoded_value(grid, scales, i, j, k) == value).then_some(k)
}

pub(crate) mod clock {
    #[cfg(not(target_arch = "wasm32"))]
    pub struct Stopwatch(std::time::Instant);

    #[cfg(not(target_arch = "wasm32"))]
    impl Stopwatch {
        pub fn start() -> Self {
            Stopwatch(std::time::Instant::now())
        }

        pub fn seconds(&self) -> f64 {
            self.0.elapsed().as_secs_f64()
        }
    }

    // std::time::Instant is unavailable on wasm32-unknown-unknown.
    #[cfg(target_arch = "wasm32")]
    pub struct Stopwatch;

    #[cfg(target_arch = "wasm32")]
    impl Stopwatch {
        pub fn start() -> Self {
            Stopwatch
        }

        pub fn seconds(&self) -> f64 {
            0.0
        }
    }
}
