//! Batch x time x channel arrays of 64-bit reals, the value type every
//! network primitive consumes and produces.

use serde::{Deserialize, Serialize};

use crate::error::GridError;

/// Dense 3-D array laid out row-major as `[entry][time][channel]`
/// (channel fastest). Shapes are `(B, T, C)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    data: Vec<f64>,
    shape: (usize, usize, usize),
}

impl Grid3 {
    /// Zero-filled grid of the given shape.
    pub fn zeros(b: usize, t: usize, c: usize) -> Self {
        Grid3 {
            data: vec![0.0; b * t * c],
            shape: (b, t, c),
        }
    }

    /// Wrap an existing buffer; `data.len()` must equal `b * t * c`.
    pub fn from_vec(b: usize, t: usize, c: usize, data: Vec<f64>) -> Result<Self, GridError> {
        if data.len() != b * t * c {
            return Err(GridError::BadLength {
                expected: b * t * c,
                got: data.len(),
                shape: (b, t, c),
            });
        }
        Ok(Grid3 {
            data,
            shape: (b, t, c),
        })
    }

    /// Single-entry, single-channel grid from a time series.
    pub fn from_series(series: &[f64]) -> Self {
        Grid3 {
            data: series.to_vec(),
            shape: (1, series.len(), 1),
        }
    }

    /// Scalar grid of shape (1, 1, 1).
    pub fn scalar(v: f64) -> Self {
        Grid3 {
            data: vec![v],
            shape: (1, 1, 1),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape.0
    }

    pub fn time(&self) -> usize {
        self.shape.1
    }

    pub fn channels(&self) -> usize {
        self.shape.2
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, b: usize, t: usize, c: usize) -> f64 {
        debug_assert!(b < self.shape.0 && t < self.shape.1 && c < self.shape.2);
        self.data[(b * self.shape.1 + t) * self.shape.2 + c]
    }

    #[inline]
    pub fn set(&mut self, b: usize, t: usize, c: usize, v: f64) {
        debug_assert!(b < self.shape.0 && t < self.shape.1 && c < self.shape.2);
        self.data[(b * self.shape.1 + t) * self.shape.2 + c] = v;
    }

    /// Contiguous `[channel]` row at `(b, t)`.
    #[inline]
    pub fn row(&self, b: usize, t: usize) -> &[f64] {
        let c = self.shape.2;
        let start = (b * self.shape.1 + t) * c;
        &self.data[start..start + c]
    }

    #[inline]
    pub fn row_mut(&mut self, b: usize, t: usize) -> &mut [f64] {
        let c = self.shape.2;
        let start = (b * self.shape.1 + t) * c;
        &mut self.data[start..start + c]
    }

    /// Copy the time series of one `(b, c)` lane into a vector.
    pub fn series(&self, b: usize, c: usize) -> Vec<f64> {
        (0..self.shape.1).map(|t| self.at(b, t, c)).collect()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// True when every entry is finite (no NaN or infinity).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The single value of a (1, 1, 1) grid.
    pub fn scalar_value(&self) -> Result<f64, GridError> {
        if self.shape != (1, 1, 1) {
            return Err(GridError::NotScalar { shape: self.shape });
        }
        Ok(self.data[0])
    }
}
