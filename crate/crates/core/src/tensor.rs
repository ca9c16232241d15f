//! Dense rank-4 tensor in `[N, C, H, W]` layout, row-major, the carrier type
//! for every feature map and parameter in the crate.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use rand::Rng;

/// Shape of a rank-4 tensor: batch, channels, height, width.
pub type Shape4 = [usize; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape4) -> Self {
        assert!(shape.iter().all(|&d| d >= 1), "shape components must be >= 1");
        Tensor {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: Shape4, value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if shape.iter().any(|&d| d < 1) {
            return Err(CoreError::invalid("tensor", format!("shape {shape:?} has a zero dimension")));
        }
        if data.len() != want {
            return Err(CoreError::shape(
                "tensor",
                format!("shape {shape:?} needs {want} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng>(shape: Shape4, std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = T::sample_normal(rng) * T::from_fp(std);
        }
        t
    }

    pub fn rand_uniform<R: Rng>(shape: Shape4, lo: f64, hi: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = T::sample_uniform(rng, lo, hi);
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }
    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        let i = self.offset(n, c, h, w);
        &mut self.data[i]
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.shape[0] && c < self.shape[1] && h < self.shape[2] && w < self.shape[3]);
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    /// Contiguous `[H, W]` plane for one `(n, c)`.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// Contiguous `[C, H, W]` block for one sample.
    #[inline]
    pub fn sample(&self, n: usize) -> &[T] {
        let chw = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * chw..(n + 1) * chw]
    }

    #[inline]
    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let chw = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * chw..(n + 1) * chw]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise in-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(CoreError::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Err if any entry is NaN/Inf; `op` names the producer in the message.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(CoreError::non_finite(
                op,
                format!("element {i} of tensor with shape {:?}", self.shape),
            )),
        }
    }

    /// Convert element type (used to run f32 configs under f64 grad checks).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_fp(v.to_fp())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_fp() - b.to_fp()).abs())
            .fold(0.0, f64::max)
    }
}
