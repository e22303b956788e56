use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || n != data.len() {
            return Err(Error::Shape {
                context: format!("tensor with {} elements", data.len()),
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// A `[1, n]` row.
    pub fn row(values: &[f64]) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(crate::error::domain("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                context: "reshape".into(),
                expected: shape,
                got: self.shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the listed batch entries into a new tensor.
    pub fn gather_batch(&self, indices: &[usize]) -> Tensor {
        let stride: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    /// Single batch entry, keeping a leading dimension of one.
    pub fn example(&self, index: usize) -> Tensor {
        self.gather_batch(&[index])
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }
}

/// How class scores are laid out in a logits tensor: `[N, C]` or `[N, C, H, W]`.
///
/// Each "position" is one classification unit (an example, or a pixel of an
/// example); the class axis is always dimension 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassLayout {
    pub positions: usize,
    pub classes: usize,
    inner: usize,
}

impl ClassLayout {
    pub fn of(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [n, c] => Ok(Self { positions: *n, classes: *c, inner: 1 }),
            [n, c, h, w] => Ok(Self { positions: n * h * w, classes: *c, inner: h * w }),
            other => Err(Error::Shape {
                context: "logits must be [N, C] or [N, C, H, W]".into(),
                expected: vec![0, 0],
                got: other.to_vec(),
            }),
        }
    }

    /// Flat offset of class 0 for `pos`; successive classes are `stride()` apart.
    #[inline]
    pub fn base(&self, pos: usize) -> usize {
        (pos / self.inner) * self.classes * self.inner + pos % self.inner
    }

    #[inline]
    pub fn stride(&self) -> usize {
        self.inner
    }

    /// Copies the scores of one position into `out`.
    #[inline]
    pub fn read(&self, data: &[f64], pos: usize, out: &mut [f64]) {
        let b = self.base(pos);
        for (c, o) in out.iter_mut().enumerate() {
            *o = data[b + c * self.inner];
        }
    }

    /// Per-position argmax; ties go to the lowest class index.
    pub fn argmax(&self, data: &[f64]) -> Vec<usize> {
        (0..self.positions)
            .map(|pos| {
                let b = self.base(pos);
                let mut best = 0;
                let mut best_v = data[b];
                for c in 1..self.classes {
                    let v = data[b + c * self.inner];
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gather_keeps_row_order() {
        let t = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        let g = t.gather_batch(&[2, 0]);
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0]);
    }
}
