//! Per-filter importance vectors.
//!
//! Row `i` of an [`ImportanceMatrix`] is filter `i`'s importance vector: entry
//! `j` is the l1-norm of the `k x k` kernel connecting input channel `j` to the
//! filter (for fully-connected layers, the absolute weight). Values are always
//! computed on masked weights, so a dead connection has importance exactly 0.

use crate::error::{Error, Result};
use crate::pruning::PruneMask;
use crate::tensor::{ConvWeights, FcWeights};

/// `C_out x C_in` matrix of non-negative importance values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl ImportanceMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(
                "ImportanceMatrix",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, values.len()),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "importance values must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self { rows, cols, values })
    }

    /// Build from explicit importance vectors (one per filter).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ImportanceMatrix", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Number of filters.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of input channels.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// l1 importance of every `(filter, channel)` kernel in a `(C_out, C_in, area)` buffer.
pub(crate) fn kernel_l1(
    weights: &[f32],
    c_out: usize,
    c_in: usize,
    area: usize,
    mask: &PruneMask,
) -> Result<ImportanceMatrix> {
    if mask.rows() != c_out || mask.cols() != c_in {
        return Err(Error::shape(
            "importance",
            format!(
                "mask is {}x{}, weights are {c_out}x{c_in}",
                mask.rows(),
                mask.cols()
            ),
        ));
    }
    let mut values = Vec::with_capacity(c_out * c_in);
    for i in 0..c_out {
        for j in 0..c_in {
            if !mask.is_kept(i, j) {
                values.push(0.0);
                continue;
            }
            let start = (i * c_in + j) * area;
            let l1: f64 = weights[start..start + area].iter().map(|w| w.abs() as f64).sum();
            values.push(l1);
        }
    }
    ImportanceMatrix::new(c_out, c_in, values)
}

/// Importance vectors of a convolutional layer.
pub fn importance_conv(w: &ConvWeights, mask: &PruneMask) -> Result<ImportanceMatrix> {
    let k = w.kernel();
    kernel_l1(w.values.data(), w.c_out(), w.c_in(), k * k, mask)
}

/// Importance vectors of a fully-connected layer.
pub fn importance_fc(w: &FcWeights, mask: &PruneMask) -> Result<ImportanceMatrix> {
    kernel_l1(w.values.data(), w.c_out(), w.c_in(), 1, mask)
}
