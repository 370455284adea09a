//! Vector-wise absmax INT8 quantization, de-quantization, and safe-interval
//! computation.
//!
//! Each matrix row is scaled by its own absolute maximum (the scale index),
//! mapped onto the symmetric code grid [-127, 127], and mapped back as
//! `code / 127 * scale`. `127 / 127 == 1.0`, so the row maximum survives a
//! quantize/de-quantize roundtrip bit-exactly and the grid is a fixed point
//! of the roundtrip.
//!
//! [`compute_intervals`] derives, for every weight, the band around its grid
//! point inside which any fp32 value still quantizes to the same INT8 code
//! under the row's frozen scale. Training that stays inside these bands
//! cannot change the quantized model at all.

use crate::error::{Error, Result};

/// Largest INT8 code emitted; -128 is never produced.
pub const CODE_MAX: f32 = 127.0;

/// Per-row INT8 codes plus the per-row fp32 scale indices.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major codes, each in [-127, 127].
    pub values: Vec<i8>,
    /// Per-row scale index: the row's absolute maximum (1.0 for all-zero rows).
    pub scales: Vec<f32>,
}

impl QuantizedMatrix {
    pub fn code(&self, row: usize, col: usize) -> i8 {
        self.values[row * self.cols + col]
    }

    pub fn row_codes(&self, row: usize) -> &[i8] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }
}

/// Per-weight safe band [low, high] plus the mask of entries that must not
/// move at all (the row argmax entries, which pin the scale index).
#[derive(Debug, Clone)]
pub struct IntervalBounds {
    pub rows: usize,
    pub cols: usize,
    pub low: Vec<f32>,
    pub high: Vec<f32>,
    pub frozen: Vec<bool>,
}

impl IntervalBounds {
    /// Clamp `values` elementwise into the bands. Returns how many entries
    /// actually moved.
    pub fn clamp_into(&self, values: &mut [f32]) -> usize {
        debug_assert_eq!(values.len(), self.low.len());
        let mut clipped = 0;
        for i in 0..values.len() {
            let v = values[i].clamp(self.low[i], self.high[i]);
            if v.to_bits() != values[i].to_bits() {
                values[i] = v;
                clipped += 1;
            }
        }
        clipped
    }

    pub fn contains(&self, values: &[f32]) -> bool {
        values
            .iter()
            .enumerate()
            .all(|(i, &v)| v >= self.low[i] && v <= self.high[i])
    }
}

fn row_absmax(row: &[f32]) -> f32 {
    row.iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

/// Quantize a single value against a fixed row scale. Same arithmetic as
/// [`quantize`]; exposed so interval and rollback checks share one code path.
pub fn quantize_value(v: f32, scale: f32) -> i8 {
    (v * (CODE_MAX / scale)).round().clamp(-CODE_MAX, CODE_MAX) as i8
}

/// Per-row absmax quantization of a row-major `rows x cols` matrix.
///
/// Each code is `round(w * 127 / scale)` with round-half-away-from-zero,
/// clamped to [-127, 127]. All-zero rows fall back to scale 1.0.
pub fn quantize(w: &[f32], rows: usize, cols: usize) -> Result<QuantizedMatrix> {
    if w.len() != rows * cols {
        return Err(Error::ShapeMismatch(format!(
            "quantize: {} values for {}x{}",
            w.len(),
            rows,
            cols
        )));
    }
    let mut values = vec![0i8; w.len()];
    let mut scales = vec![0f32; rows];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        if let Some(i) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "quantize: non-finite value at row {r}, col {i}"
            )));
        }
        let absmax = row_absmax(row);
        let scale = if absmax == 0.0 { 1.0 } else { absmax };
        scales[r] = scale;
        let mul = CODE_MAX / scale;
        for (c, &v) in row.iter().enumerate() {
            values[r * cols + c] = (v * mul).round().clamp(-CODE_MAX, CODE_MAX) as i8;
        }
    }
    Ok(QuantizedMatrix {
        rows,
        cols,
        values,
        scales,
    })
}

/// Map codes back onto the fp32 grid: `code / 127 * scale`.
pub fn dequantize(q: &QuantizedMatrix) -> Vec<f32> {
    let mut out = vec![0f32; q.values.len()];
    for r in 0..q.rows {
        let scale = q.scales[r];
        for c in 0..q.cols {
            out[r * q.cols + c] = q.values[r * q.cols + c] as f32 / CODE_MAX * scale;
        }
    }
    out
}

/// Compute the per-weight safe bands for `w` at band fraction `alpha` of a
/// code cell (`alpha` must lie in (0, 0.5); 0.5 would admit round-boundary
/// flips).
///
/// Bands are centered on the de-quantized grid point, have halfwidth
/// `alpha * scale / 127`, are clamped so no entry can exceed the row scale
/// in magnitude, and the row argmax entries (all of them, on ties) are
/// frozen in place so the scale index itself cannot change.
pub fn compute_intervals(w: &[f32], rows: usize, cols: usize, alpha: f32) -> Result<IntervalBounds> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::Contract(format!(
            "interval alpha must lie in (0, 0.5), got {alpha}"
        )));
    }
    let q = quantize(w, rows, cols)?;
    let center = dequantize(&q);
    let mut low = vec![0f32; w.len()];
    let mut high = vec![0f32; w.len()];
    let mut frozen = vec![false; w.len()];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let absmax = row_absmax(row); // 0.0 for all-zero rows: every entry freezes
        let scale = q.scales[r];
        let beta = alpha * scale / CODE_MAX;
        for c in 0..cols {
            let i = r * cols + c;
            if row[c].abs() == absmax {
                frozen[i] = true;
                low[i] = row[c];
                high[i] = row[c];
            } else {
                low[i] = (center[i] - beta).max(-scale);
                high[i] = (center[i] + beta).min(scale);
            }
        }
    }
    Ok(IntervalBounds {
        rows,
        cols,
        low,
        high,
        frozen,
    })
}

/// Bit-exact equality of two quantized matrices: INT8 codes and scale bits
/// must both match.
pub fn quantized_equal(a: &QuantizedMatrix, b: &QuantizedMatrix) -> Result<bool> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::Contract(format!(
            "quantized_equal: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(a.values == b.values
        && a.scales.len() == b.scales.len()
        && a.scales
            .iter()
            .zip(&b.scales)
            .all(|(x, y)| x.to_bits() == y.to_bits()))
}
