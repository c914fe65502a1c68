//! Dense row-major N-dimensional arrays.

use std::fmt;

use crate::error::{Error, Result};

/// Scalar type used throughout the crate. 64-bit unless the `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Float = f64;
#[cfg(feature = "f32")]
pub type Float = f32;

/// Size in bytes of one [`Float`].
pub const FLOAT_BYTES: usize = std::mem::size_of::<Float>();

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Float>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Float>) -> Result<Self> {
        check_extents(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor from parts already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Float>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: Float) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: Float) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<Float>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> Float) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Float] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Float] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Float> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<Float> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_extents(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row-major strides of the shape.
    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, index: &[usize]) -> Float {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: Float) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn map(&self, f: impl Fn(Float) -> Float) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(Float, Float) -> Float) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, c: Float) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> Float {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> Float {
        self.sum() / self.data.len() as Float
    }

    pub fn max_abs(&self) -> Float {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Removes axis `axis`, keeping the hyperplane at `index`.
    pub fn select(&self, axis: usize, index: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(Error::shape(format!("axis {axis} out of range for {:?}", self.shape)));
        }
        if index >= self.shape[axis] {
            return Err(Error::Index {
                index,
                len: self.shape[axis],
            });
        }
        let (outer, t, inner) = split_at_axis(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * t + index) * inner;
            data.extend_from_slice(&self.data[base..base + inner]);
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor { shape, data })
    }

    /// Stacks equally shaped tensors along a new axis inserted at `axis`.
    pub fn stack(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors"))?;
        if axis > first.ndim() {
            return Err(Error::shape(format!("stack axis {axis} out of range")));
        }
        for p in parts {
            first.expect_same_shape(p)?;
        }
        let mut shape = first.shape.clone();
        shape.insert(axis, parts.len());
        let (outer, t, inner) = split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * t * inner);
        for o in 0..outer {
            for p in parts {
                data.extend_from_slice(&p.data[o * inner..(o + 1) * inner]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Reorders a `(channels, spatial...)` tensor into a channels-last vector.
    pub fn flatten_channels_last(&self) -> Tensor {
        let c = self.shape[0];
        let n = self.data.len() / c;
        let mut data = vec![0.0; self.data.len()];
        for ch in 0..c {
            for p in 0..n {
                data[p * c + ch] = self.data[ch * n + p];
            }
        }
        Tensor::from_vec(data)
    }

    /// Inverse of [`Tensor::flatten_channels_last`].
    pub fn unflatten_channels_last(flat: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let c = shape[0];
        let n: usize = shape[1..].iter().product();
        if flat.len() != c * n {
            return Err(Error::shape(format!(
                "cannot unflatten {} values into {shape:?}",
                flat.len()
            )));
        }
        let mut data = vec![0.0; flat.len()];
        for ch in 0..c {
            for p in 0..n {
                data[ch * n + p] = flat.data[p * c + ch];
            }
        }
        Ok(Tensor::from_parts(shape.to_vec(), data))
    }
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    strides
}

/// `(product before axis, extent of axis, product after axis)`.
pub fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
