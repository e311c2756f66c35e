//! Real third-order tensors.

use ndarray::{Array3, ArrayD, Axis, Zip};

use crate::error::{Error, Result};

/// A real `n1 x n2 x n3` array. The first two axes are spatial (rows, columns),
/// the third is the spectral (band) axis.
///
/// Every entry is finite and every extent is at least one.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    data: Array3<f64>,
}

impl Tensor3 {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (n1, n2, n3) = data.dim();
        if n1 == 0 || n2 == 0 || n3 == 0 {
            return Err(Error::InvalidDims(format!("{n1}x{n2}x{n3}")));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor entry {bad}")));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn zeros(n1: usize, n2: usize, n3: usize) -> Self {
        assert!(n1 > 0 && n2 > 0 && n3 > 0, "tensor extents must be positive");
        Self {
            data: Array3::zeros((n1, n2, n3)),
        }
    }

    pub fn from_fn<F>(n1: usize, n2: usize, n3: usize, f: F) -> Result<Self>
    where
        F: FnMut((usize, usize, usize)) -> f64,
    {
        Self::new(Array3::from_shape_fn((n1, n2, n3), f))
    }

    /// Builds a tensor from a flat row-major `(n1, n2, n3)` buffer.
    pub fn from_vec(n1: usize, n2: usize, n3: usize, values: Vec<f64>) -> Result<Self> {
        let data = Array3::from_shape_vec((n1, n2, n3), values)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Self::new(data)
    }

    /// Wraps a dynamic-rank array that must be three-dimensional.
    pub fn from_dyn(data: ArrayD<f64>) -> Result<Self> {
        let shape = data.shape().to_vec();
        let data = data
            .into_dimensionality()
            .map_err(|_| Error::ShapeMismatch(format!("expected a 3-D array, got {shape:?}")))?;
        Self::new(data)
    }

    pub(crate) fn from_array_unchecked(data: Array3<f64>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self {
            data: data.as_standard_layout().into_owned(),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_array(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array3<f64> {
        self.data
    }

    pub fn into_dyn(self) -> ArrayD<f64> {
        self.data.into_dyn()
    }

    pub fn to_dyn(&self) -> ArrayD<f64> {
        self.data.clone().into_dyn()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[[i, j, k]]
    }

    /// Frontal slice `k` (an `n1 x n2` view).
    pub fn band(&self, k: usize) -> ndarray::ArrayView2<'_, f64> {
        self.data.index_axis(Axis(2), k)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn check_same_shape(&self, other: &Tensor3) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor3) -> Result<Tensor3> {
        self.check_same_shape(other)?;
        Ok(Self::from_array_unchecked(&self.data + &other.data))
    }

    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        self.check_same_shape(other)?;
        Ok(Self::from_array_unchecked(&self.data - &other.data))
    }

    pub fn scale(&self, factor: f64) -> Tensor3 {
        Self::from_array_unchecked(&self.data * factor)
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Tensor3 {
        Self::from_array_unchecked(self.data.mapv(f))
    }

    /// `‖self − other‖_F`.
    pub fn distance(&self, other: &Tensor3) -> Result<f64> {
        self.check_same_shape(other)?;
        let mut acc = 0.0;
        Zip::from(&self.data).and(&other.data).for_each(|a, b| {
            acc += (a - b) * (a - b);
        });
        Ok(acc.sqrt())
    }

    /// `‖self − other‖_F / ‖other‖_F`, or the absolute distance when `other` is zero.
    pub fn relative_error(&self, reference: &Tensor3) -> Result<f64> {
        let d = self.distance(reference)?;
        let n = reference.frobenius_norm();
        Ok(if n > 0.0 { d / n } else { d })
    }

    /// Tensor transpose: each frontal slice transposed and slices `2..n3` reversed.
    pub fn t_transpose(&self) -> Tensor3 {
        let (n1, n2, n3) = self.dims();
        let data = Array3::from_shape_fn((n2, n1, n3), |(i, j, k)| {
            let src = if k == 0 { 0 } else { n3 - k };
            self.data[[j, i, src]]
        });
        Self::from_array_unchecked(data)
    }

    /// The t-identity: identity in the first frontal slice, zeros elsewhere.
    pub fn t_identity(n: usize, n3: usize) -> Tensor3 {
        let data = Array3::from_shape_fn((n, n, n3), |(i, j, k)| {
            if k == 0 && i == j {
                1.0
            } else {
                0.0
            }
        });
        Self::from_array_unchecked(data)
    }
}
