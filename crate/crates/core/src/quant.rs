//! Simulated low-bit quantization.
//!
//! Values are snapped to a signed symmetric integer grid
//! `{-q_max, …, q_max}` with `q_max = 2^(bits-1) - 1` and stored back as
//! `f64`. Two schemes are supported: row-wise AbsMax round-to-nearest and a
//! QuEST-style scheme that rotates each row with a Hadamard transform,
//! searches an MSE-optimal clip ratio, and records an STE pass-through mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{hadamard_in_place, Matrix};

/// At or above this width the integer grid is finer than `f64` resolution
/// and quantization is the identity. Used for lossless controls.
pub const LOSSLESS_BITS: u32 = 53;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    AbsmaxRtn,
    Quest,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    RowWise,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    #[default]
    HalfToEven,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for ClipGrid {
    fn default() -> Self {
        Self {
            lo: 0.3,
            hi: 1.0,
            step: 0.01,
        }
    }
}

impl ClipGrid {
    /// Candidate clip ratios, ascending. The last candidate is exactly `hi`.
    pub fn candidates(&self) -> Vec<f64> {
        let span = self.hi - self.lo;
        let k = (span / self.step).round().max(0.0) as usize;
        if k == 0 {
            return vec![self.hi];
        }
        (0..=k)
            .map(|i| {
                if i == k {
                    self.hi
                } else {
                    self.lo + span * i as f64 / k as f64
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub bits: u32,
    pub scheme: Scheme,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default)]
    pub clip_grid: ClipGrid,
    #[serde(default)]
    pub rounding: Rounding,
}

impl QuantConfig {
    pub fn absmax(bits: u32) -> Self {
        Self {
            bits,
            scheme: Scheme::AbsmaxRtn,
            granularity: Granularity::RowWise,
            clip_grid: ClipGrid::default(),
            rounding: Rounding::HalfToEven,
        }
    }

    pub fn quest(bits: u32) -> Self {
        Self {
            scheme: Scheme::Quest,
            ..Self::absmax(bits)
        }
    }

    /// A configuration that leaves every value untouched.
    pub fn lossless(scheme: Scheme) -> Self {
        Self {
            scheme,
            ..Self::absmax(LOSSLESS_BITS)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=64).contains(&self.bits) {
            return Err(Error::Config(format!(
                "bits must be in 2..=64, got {}",
                self.bits
            )));
        }
        let g = &self.clip_grid;
        if !(g.lo.is_finite() && g.hi.is_finite() && g.step.is_finite()) {
            return Err(Error::Config("clip grid must be finite".into()));
        }
        if !(g.lo > 0.0 && g.lo < g.hi && g.step > 0.0) {
            return Err(Error::Config(format!(
                "clip grid needs 0 < lo < hi and step > 0, got {g:?}"
            )));
        }
        if (g.hi - g.lo) / g.step > 1e6 {
            return Err(Error::Config("clip grid has more than 1e6 candidates".into()));
        }
        Ok(())
    }

    pub fn is_lossless(&self) -> bool {
        self.bits >= LOSSLESS_BITS
    }

    /// Largest representable grid magnitude.
    pub fn q_max(&self) -> f64 {
        ((1u64 << (self.bits.min(63) - 1)) - 1) as f64
    }
}

/// Dequantized values plus the per-row metadata of a quantization pass.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantResult {
    /// On-grid values, same shape as the input.
    pub values: Matrix,
    /// Grid step per row (in the Hadamard domain for `quest`).
    pub scales: Vec<f64>,
    /// Chosen clip ratio per row (`quest` only).
    pub clip_ratios: Option<Vec<f64>>,
    /// STE pass-through flags in the Hadamard domain, `rows × padded_cols`
    /// (`quest` only).
    pub mask: Option<Mask>,
}

/// Boolean matrix, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            bits: vec![value; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }
}

/// Dispatches on `cfg.scheme`.
pub fn quantize_rows(x: &Matrix, cfg: &QuantConfig) -> Result<QuantResult> {
    match cfg.scheme {
        Scheme::AbsmaxRtn => absmax_quantize_rows(x, cfg),
        Scheme::Quest => quest_quantize_rows(x, cfg),
    }
}

#[inline]
fn round_half_even(v: f64) -> f64 {
    v.round_ties_even()
}

/// Symmetric RTN of one row against a given range `bound` (the value that
/// maps to `q_max`). Returns the grid step.
fn rtn_row(row: &mut [f64], bound: f64, q_max: f64) -> f64 {
    if bound == 0.0 {
        row.iter_mut().for_each(|v| *v = 0.0);
        return 0.0;
    }
    let scale = bound / q_max;
    for v in row.iter_mut() {
        let q = round_half_even(*v / bound * q_max).clamp(-q_max, q_max);
        *v = q * scale;
    }
    scale
}

/// Row-wise symmetric AbsMax round-to-nearest.
///
/// Each row is divided by its largest magnitude, multiplied by `q_max`,
/// rounded half-to-even and mapped back. All-zero rows get scale 0.
pub fn absmax_quantize_rows(x: &Matrix, cfg: &QuantConfig) -> Result<QuantResult> {
    if cfg.scheme != Scheme::AbsmaxRtn {
        return Err(Error::Config("absmax_quantize_rows needs scheme absmax_rtn".into()));
    }
    cfg.validate()?;
    x.ensure_finite("quantizer input")?;
    let q_max = cfg.q_max();
    let mut values = x.clone();
    let mut scales = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = values.row_mut(r);
        let m = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if cfg.is_lossless() {
            scales.push(if m == 0.0 { 0.0 } else { m / q_max });
            continue;
        }
        scales.push(rtn_row(row, m, q_max));
    }
    Ok(QuantResult {
        values,
        scales,
        clip_ratios: None,
        mask: None,
    })
}

/// Sum of squared errors of clipping `row` to `±bound` and quantizing on
/// that range.
fn clip_rtn_sse(row: &[f64], bound: f64, q_max: f64) -> f64 {
    if bound == 0.0 {
        return row.iter().map(|v| v * v).sum();
    }
    let mut sse = 0.0;
    for &v in row {
        let c = v.clamp(-bound, bound);
        let q = round_half_even(c / bound * q_max).clamp(-q_max, q_max) * (bound / q_max);
        sse += (v - q) * (v - q);
    }
    sse
}

/// Per-row clip search in the Hadamard domain. Returns the transformed
/// rows (padded), the chosen ratio and the resulting clip bound per row.
pub(crate) fn quest_search(x: &Matrix, cfg: &QuantConfig) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    let padded = x.cols().max(1).next_power_of_two();
    let candidates = cfg.clip_grid.candidates();
    let q_max = cfg.q_max();
    let mut rotated = Matrix::zeros(x.rows(), padded);
    let mut ratios = Vec::with_capacity(x.rows());
    let mut bounds = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = rotated.row_mut(r);
        row[..x.cols()].copy_from_slice(x.row(r));
        hadamard_in_place(row)?;
        let m = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut best_c = candidates[0];
        let mut best = f64::INFINITY;
        if cfg.is_lossless() {
            best_c = 1.0;
        } else {
            for &c in &candidates {
                let sse = clip_rtn_sse(row, c * m, q_max);
                // strict: ties keep the smaller ratio
                if sse < best {
                    best = sse;
                    best_c = c;
                }
            }
        }
        ratios.push(best_c);
        bounds.push(best_c * m);
    }
    Ok((rotated, ratios, bounds))
}

/// QuEST-style row quantization: zero-pad to a power of two, Hadamard,
/// clip at the MSE-optimal ratio from `cfg.clip_grid`, RTN on the clipped
/// range, inverse Hadamard, truncate.
///
/// `mask[i][j]` is true where `|x̂[i][j]| ≤ bound_i`, i.e. where the
/// straight-through gradient passes.
pub fn quest_quantize_rows(x: &Matrix, cfg: &QuantConfig) -> Result<QuantResult> {
    if cfg.scheme != Scheme::Quest {
        return Err(Error::Config("quest_quantize_rows needs scheme quest".into()));
    }
    cfg.validate()?;
    x.ensure_finite("quantizer input")?;
    let q_max = cfg.q_max();
    let (mut rotated, ratios, bounds) = quest_search(x, cfg)?;
    let padded = rotated.cols();
    let mut mask = Mask::filled(x.rows(), padded, true);
    let mut scales = Vec::with_capacity(x.rows());
    let mut values = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let bound = bounds[r];
        let row = rotated.row_mut(r);
        for (j, v) in row.iter().enumerate() {
            mask.bits[r * padded + j] = v.abs() <= bound;
        }
        if cfg.is_lossless() {
            scales.push(if bound == 0.0 { 0.0 } else { bound / q_max });
            values.row_mut(r).copy_from_slice(x.row(r));
            continue;
        }
        for v in row.iter_mut() {
            *v = v.clamp(-bound, bound);
        }
        scales.push(rtn_row(row, bound, q_max));
        hadamard_in_place(row)?;
        values.row_mut(r).copy_from_slice(&row[..x.cols()]);
    }
    Ok(QuantResult {
        values,
        scales,
        clip_ratios: Some(ratios),
        mask: Some(mask),
    })
}

/// Straight-through backward: zero the gradient wherever the mask is false.
pub fn ste_mask_backward(upstream: &Matrix, mask: &Mask) -> Result<Matrix> {
    if upstream.shape() != (mask.rows, mask.cols) {
        return Err(Error::Shape(format!(
            "gradient {:?} vs mask {:?}",
            upstream.shape(),
            (mask.rows, mask.cols)
        )));
    }
    let mut out = upstream.clone();
    for (g, &keep) in out.data_mut().iter_mut().zip(&mask.bits) {
        if !keep {
            *g = 0.0;
        }
    }
    Ok(out)
}
