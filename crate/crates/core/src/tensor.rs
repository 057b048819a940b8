//! Dense row-major tensors.
//!
//! Values are held as `f64`. Training stores parameters rounded to `f32`
//! (see [`Tensor::quantize_f32`]) while every kernel accumulates in `f64`.

use std::ops::Range;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "shape {shape:?} must have at least one axis and no zero-length axes"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n]).expect("valid shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(&mut f).collect()).expect("valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Error if `self.shape() != expected`, naming both shapes.
    pub fn expect_shape(&self, expected: &[usize], what: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::dim(format!(
                "{what}: expected shape {expected:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numerical(format!(
                "{what}: non-finite value {} at flat index {i} (shape {:?})",
                self.data[i], self.shape
            ))),
        }
    }

    /// Round every value to the nearest `f32`.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, a: f64) -> Tensor {
        self.map(|v| a * v)
    }

    pub fn l1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `(outer, axis_len, inner)` split around `axis`.
    fn split_at_axis(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        (outer, self.shape[axis], inner)
    }

    /// Append `n` slices at the end of `axis`, filled in row-major order
    /// of the new slices by `fill`.
    pub fn append_along(
        &mut self,
        axis: usize,
        n: usize,
        mut fill: impl FnMut() -> f64,
    ) -> Result<()> {
        if axis >= self.ndim() {
            return Err(Error::dim(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        if n == 0 {
            return Ok(());
        }
        let (outer, len, inner) = self.split_at_axis(axis);
        let mut out = Vec::with_capacity(outer * (len + n) * inner);
        for o in 0..outer {
            out.extend_from_slice(&self.data[o * len * inner..(o + 1) * len * inner]);
            for _ in 0..n * inner {
                out.push(fill());
            }
        }
        self.shape[axis] += n;
        self.data = out;
        Ok(())
    }

    /// Delete the slices `range` of `axis`.
    pub fn remove_along(&mut self, axis: usize, range: Range<usize>) -> Result<()> {
        if axis >= self.ndim() || range.end > self.shape[axis] || range.start > range.end {
            return Err(Error::dim(format!(
                "cannot remove {range:?} along axis {axis} of shape {:?}",
                self.shape
            )));
        }
        if range.len() == self.shape[axis] {
            return Err(Error::dim(format!(
                "removing {range:?} would empty axis {axis} of shape {:?}",
                self.shape
            )));
        }
        let (outer, len, inner) = self.split_at_axis(axis);
        let mut out = Vec::with_capacity(outer * (len - range.len()) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&self.data[base..base + range.start * inner]);
            out.extend_from_slice(&self.data[base + range.end * inner..base + len * inner]);
        }
        self.shape[axis] -= range.len();
        self.data = out;
        Ok(())
    }

    /// Values of the slices `range` along `axis`, flattened row-major.
    pub fn gather_along(&self, axis: usize, range: Range<usize>) -> Vec<f64> {
        let (outer, len, inner) = self.split_at_axis(axis);
        let mut out = Vec::with_capacity(outer * range.len() * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&self.data[base + range.start * inner..base + range.end * inner]);
        }
        out
    }

    /// Apply `f` to every value in the slices `range` along `axis`.
    pub fn for_each_along_mut(
        &mut self,
        axis: usize,
        range: Range<usize>,
        mut f: impl FnMut(&mut f64),
    ) {
        let (outer, len, inner) = self.split_at_axis(axis);
        for o in 0..outer {
            let base = o * len * inner;
            self.data[base + range.start * inner..base + range.end * inner]
                .iter_mut()
                .for_each(&mut f);
        }
    }
}
