use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type accepted by the differentiable kernels.
///
/// Production code runs on `f32`; gradient checks instantiate the same
/// kernels at `f64` so finite differences are not swamped by rounding.
pub trait Real: Float + Sum + Default + Debug + Send + Sync + 'static {
    fn lit(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major array of rank 1 to 4, last axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, checking that the extents match the payload length.
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::dim(format!("rank {} outside 1..=4", dims.len())));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::dim(format!(
                "dims {dims:?} need {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Like [`Tensor::new`] but also rejects NaN and infinities.
    pub fn checked(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite entry at flat index {i}")));
        }
        Self::new(dims, data)
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let len = dims.iter().product();
        Self::new(dims, vec![value; len]).expect("valid rank")
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.dims)
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = dims.iter().product();
        Self::new(dims, (0..len).map(&mut f).collect()).expect("valid rank")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != self.data.len() || dims.is_empty() || dims.len() > 4 {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Extents of a rank-3 `H×W×C` map.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.dims.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            other => Err(Error::dim(format!("expected H×W×C tensor, got {other:?}"))),
        }
    }

    /// Extents of a rank-2 matrix.
    pub fn rows_cols(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::dim(format!("expected matrix, got {other:?}"))),
        }
    }

    /// Views the trailing axis as columns, every leading axis folded into rows.
    pub fn as_rows(&self) -> (usize, usize) {
        let cols = *self.dims.last().expect("rank >= 1");
        (self.data.len() / cols.max(1), cols)
    }

    pub fn at3(&self, h: usize, w: usize, c: usize) -> T {
        let (_, wd, cd) = (self.dims[0], self.dims[1], self.dims[2]);
        self.data[(h * wd + w) * cd + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, cols) = self.as_rows();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_dims(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.data {
            *v = *v * factor;
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::dim(format!(
                "dims differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Concatenates two `H×W×·` maps along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        let (h, w, ca) = a.hwc()?;
        let (hb, wb, cb) = b.hwc()?;
        if (h, w) != (hb, wb) {
            return Err(Error::dim(format!(
                "spatial dims differ: {h}×{w} vs {hb}×{wb}"
            )));
        }
        let mut data = Vec::with_capacity(h * w * (ca + cb));
        for p in 0..h * w {
            data.extend_from_slice(&a.data[p * ca..(p + 1) * ca]);
            data.extend_from_slice(&b.data[p * cb..(p + 1) * cb]);
        }
        Tensor::new(&[h, w, ca + cb], data)
    }

    /// Splits an `H×W×C` map into channel blocks `[0, at)` and `[at, C)`.
    pub fn split_channels(&self, at: usize) -> Result<(Self, Self)> {
        let (h, w, c) = self.hwc()?;
        if at > c {
            return Err(Error::dim(format!("split at {at} beyond {c} channels")));
        }
        let mut left = Vec::with_capacity(h * w * at);
        let mut right = Vec::with_capacity(h * w * (c - at));
        for p in 0..h * w {
            let px = &self.data[p * c..(p + 1) * c];
            left.extend_from_slice(&px[..at]);
            right.extend_from_slice(&px[at..]);
        }
        Ok((
            Tensor::new(&[h, w, at], left)?,
            Tensor::new(&[h, w, c - at], right)?,
        ))
    }
}

/// Pairwise (tree) summation of `f64` terms.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 8;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_len_mismatch_and_bad_rank() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn checked_rejects_non_finite() {
        assert!(Tensor::checked(&[2], vec![1.0f32, f32::NAN]).is_err());
        assert!(Tensor::checked(&[2], vec![1.0f32, f32::INFINITY]).is_err());
        assert!(Tensor::checked(&[2], vec![1.0f32, 2.0]).is_ok());
    }

    #[test]
    fn concat_then_split_recovers_blocks() {
        let a = Tensor::from_fn(&[2, 3, 2], |i| i as f32);
        let b = Tensor::from_fn(&[2, 3, 1], |i| -(i as f32));
        let cat = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.dims(), &[2, 3, 3]);
        assert_eq!(cat.at3(1, 2, 0), a.at3(1, 2, 0));
        assert_eq!(cat.at3(1, 2, 2), b.at3(1, 2, 0));
        let (l, r) = cat.split_channels(2).unwrap();
        assert_eq!(l, a);
        assert_eq!(r, b);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
    }
}
