//! Dense row-major `f32` tensors.
//!
//! Feature maps are rank 4, laid out as `(batch, channels, height, width)`.
//! Single slices and masks are rank 2 `(height, width)`.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f32, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f32 = StandardNormal.sample(rng);
            z * std
        })
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, lo: f32, hi: f32, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Interprets the tensor as a feature map `(N, C, H, W)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!(
                "expected rank-4 (N,C,H,W) tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Interprets the tensor as a single plane `(H, W)`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::shape(format!(
                "expected rank-2 (H,W) tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sum in `f64`, in index order.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| f64::from(x)).sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&x| f64::from(x) * f64::from(x)).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// True when every element is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0 || x == 1.0)
    }

    /// Number of nonzero elements.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&x| x != 0.0).count()
    }

    /// Extracts item `n` of a batch as a tensor without the leading axis.
    pub fn batch_item(&self, n: usize) -> Result<Tensor> {
        let (&batch, rest) = self
            .shape
            .split_first()
            .ok_or_else(|| Error::shape("cannot index a rank-0 tensor"))?;
        if n >= batch {
            return Err(Error::shape(format!("batch index {n} out of range {batch}")));
        }
        let stride: usize = rest.iter().product();
        Tensor::new(rest.to_vec(), self.data[n * stride..(n + 1) * stride].to_vec())
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty list"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape() != first.shape() {
                return Err(Error::shape(format!(
                    "cannot stack shapes {:?} and {:?}",
                    first.shape(),
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        Tensor::new(shape, data)
    }
}

pub(crate) fn ensure_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
