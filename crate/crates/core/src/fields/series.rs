use ndarray::{s, Array2, Array5, ArrayView2, Axis};

use crate::error::{Error, Result};

/// A batch of space-time field snapshots laid out as `(B, T, H, W, C)`.
///
/// Values are stored in single precision, matching the on-disk payload, so
/// that a `FieldPack` round trip is exact. Numerical work upcasts to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSeries {
    values: Array5<f32>,
    pub dx: f64,
    pub dy: f64,
    pub dt: f64,
}

impl FieldSeries {
    pub fn new(values: Array5<f32>, dx: f64, dy: f64, dt: f64) -> Result<Self> {
        let (b, t, h, w, c) = values.dim();
        if b < 1 || t < 1 || c < 1 {
            return Err(Error::shape(format!(
                "batch, time and channel extents must be >= 1, got ({b}, {t}, {h}, {w}, {c})"
            )));
        }
        if h < 2 || w < 2 {
            return Err(Error::shape(format!(
                "grid must be at least 2x2, got {h}x{w}"
            )));
        }
        if let Some((pos, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field entry {pos} is {v}")));
        }
        Ok(Self { values, dx, dy, dt })
    }

    /// Builds a series on the unit square (`dx = 1/W`, `dy = 1/H`).
    pub fn unit_square(values: Array5<f32>, dt: f64) -> Result<Self> {
        let (_, _, h, w, _) = values.dim();
        Self::new(values, 1.0 / w.max(1) as f64, 1.0 / h.max(1) as f64, dt)
    }

    pub fn from_f64(shape: [usize; 5], data: &[f64], dx: f64, dy: f64, dt: f64) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "{} values cannot fill shape {shape:?}",
                data.len()
            )));
        }
        let values = Array5::from_shape_vec(shape, data.iter().map(|&v| v as f32).collect())
            .map_err(|e| Error::shape(e.to_string()))?;
        Self::new(values, dx, dy, dt)
    }

    pub fn shape(&self) -> [usize; 5] {
        let (b, t, h, w, c) = self.values.dim();
        [b, t, h, w, c]
    }

    pub fn batch(&self) -> usize {
        self.values.dim().0
    }

    pub fn frames(&self) -> usize {
        self.values.dim().1
    }

    pub fn channels(&self) -> usize {
        self.values.dim().4
    }

    pub fn values(&self) -> &Array5<f32> {
        &self.values
    }

    pub fn into_values(self) -> Array5<f32> {
        self.values
    }

    /// Row-major `f64` copy of the whole series.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// Row-major `f64` copy of sample `b`, laid out `(T, H, W, C)`.
    pub fn sample_f64(&self, b: usize) -> Vec<f64> {
        self.values
            .index_axis(Axis(0), b)
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    /// One `H x W` plane of sample `b`, frame `t`, channel `c`.
    pub fn plane(&self, b: usize, t: usize, c: usize) -> Array2<f64> {
        self.plane_view(b, t, c).mapv(|v| v as f64)
    }

    pub fn plane_view(&self, b: usize, t: usize, c: usize) -> ArrayView2<'_, f32> {
        self.values.slice(s![b, t, .., .., c])
    }

    /// Sub-series of frames `[start, end)`.
    pub fn frame_range(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames() {
            return Err(Error::shape(format!(
                "frame range {start}..{end} outside 0..{}",
                self.frames()
            )));
        }
        Ok(Self {
            values: self.values.slice(s![.., start..end, .., .., ..]).to_owned(),
            dx: self.dx,
            dy: self.dy,
            dt: self.dt,
        })
    }

    /// Sub-series made of the listed batch entries, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.batch()) {
            return Err(Error::shape(format!(
                "batch index {bad} out of range {}",
                self.batch()
            )));
        }
        if indices.is_empty() {
            return Err(Error::shape("empty batch selection"));
        }
        Ok(Self {
            values: self.values.select(Axis(0), indices),
            dx: self.dx,
            dy: self.dy,
            dt: self.dt,
        })
    }

    /// Concatenates series along the batch axis.
    pub fn concat(parts: &[FieldSeries]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot concatenate zero series"))?;
        let views: Vec<_> = parts.iter().map(|p| p.values.view()).collect();
        let values = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::shape(format!("batch concatenation failed: {e}")))?;
        Ok(Self {
            values,
            dx: first.dx,
            dy: first.dy,
            dt: first.dt,
        })
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}
