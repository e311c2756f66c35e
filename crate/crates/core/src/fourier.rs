//! Discrete Fourier transform along the spectral (third) mode.
//!
//! Every t-SVD computation happens on the frontal slices of the transformed
//! tensor. For a real input the slices satisfy `slice[k] = conj(slice[n3 - k])`
//! for `k = 1..n3`, so only slices `0..=n3/2` carry independent information.

use nalgebra::DMatrix;
use ndarray::Array3;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Imaginary residual (relative to the result's Frobenius norm) above which
/// an inverse transform is rejected.
pub const SYMMETRY_TOLERANCE: f64 = 1e-6;

/// Complex frontal slices of a tensor after the mode-3 DFT.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqSlices {
    slices: Vec<DMatrix<Complex64>>,
}

impl FreqSlices {
    pub fn new(slices: Vec<DMatrix<Complex64>>) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidDims("no frequency slices".into()))?;
        let shape = first.shape();
        if slices.iter().any(|s| s.shape() != shape) {
            return Err(Error::ShapeMismatch("frequency slices differ in shape".into()));
        }
        Ok(Self { slices })
    }

    pub fn zeros(n1: usize, n2: usize, n3: usize) -> Self {
        Self {
            slices: vec![DMatrix::zeros(n1, n2); n3],
        }
    }

    /// `(rows, cols, number of slices)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let (r, c) = self.slices[0].shape();
        (r, c, self.slices.len())
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn slice(&self, i: usize) -> &DMatrix<Complex64> {
        &self.slices[i]
    }

    pub fn slice_mut(&mut self, i: usize) -> &mut DMatrix<Complex64> {
        &mut self.slices[i]
    }

    pub fn slices(&self) -> &[DMatrix<Complex64>] {
        &self.slices
    }

    pub fn into_slices(self) -> Vec<DMatrix<Complex64>> {
        self.slices
    }

    /// Largest `|slice[k] − conj(slice[n3 − k])|` over all mirrored pairs.
    pub fn conjugate_asymmetry(&self) -> f64 {
        let n3 = self.slices.len();
        let mut worst: f64 = 0.0;
        for k in 1..n3 {
            let mirror = &self.slices[n3 - k];
            for (a, b) in self.slices[k].iter().zip(mirror.iter()) {
                worst = worst.max((a - b.conj()).norm());
            }
        }
        worst
    }

    /// `(1/n3) Σ_k ‖slice[k]‖_F²`, which equals `‖t‖_F²` of the spatial tensor.
    pub fn parseval_energy(&self) -> f64 {
        let n3 = self.slices.len() as f64;
        self.slices
            .iter()
            .map(|s| s.iter().map(|z| z.norm_sqr()).sum::<f64>())
            .sum::<f64>()
            / n3
    }
}

/// Number of leading frequency slices that carry independent information;
/// the remaining ones are conjugate mirrors.
pub fn independent_slices(n3: usize) -> usize {
    n3 / 2 + 1
}

/// `true` when slice `k` is its own conjugate mirror (DC, and Nyquist for even `n3`).
pub fn is_self_conjugate(k: usize, n3: usize) -> bool {
    k == 0 || 2 * k == n3
}

/// Forward DFT of every mode-3 tube.
pub fn dft_mode3(t: &Tensor3) -> FreqSlices {
    let (n1, n2, n3) = t.dims();
    let fft = FftPlanner::new().plan_fft_forward(n3);
    let mut slices = vec![DMatrix::<Complex64>::zeros(n1, n2); n3];
    let data = t.as_array();
    let mut tube = vec![Complex64::new(0.0, 0.0); n3];
    for a in 0..n1 {
        for b in 0..n2 {
            for (c, z) in tube.iter_mut().enumerate() {
                *z = Complex64::new(data[[a, b, c]], 0.0);
            }
            fft.process(&mut tube);
            for (k, z) in tube.iter().enumerate() {
                slices[k][(a, b)] = *z;
            }
        }
    }
    FreqSlices { slices }
}

/// Inverse DFT of every mode-3 tube, returning the real part.
///
/// Fails with [`Error::SymmetryViolation`] if the discarded imaginary part is
/// larger than [`SYMMETRY_TOLERANCE`] times the result's Frobenius norm, which
/// happens when a frequency-domain edit broke conjugate symmetry.
pub fn idft_mode3(f: &FreqSlices) -> Result<Tensor3> {
    let (real, imag_max) = inverse_parts(f);
    let norm = real.iter().map(|v| v * v).sum::<f64>().sqrt();
    let limit = SYMMETRY_TOLERANCE * norm;
    if imag_max > limit {
        return Err(Error::SymmetryViolation {
            residual: imag_max,
            limit,
        });
    }
    Tensor3::new(real)
}

/// Inverse DFT keeping only the real part, with no symmetry check.
pub(crate) fn idft_mode3_real(f: &FreqSlices) -> Tensor3 {
    Tensor3::from_array_unchecked(inverse_parts(f).0)
}

fn inverse_parts(f: &FreqSlices) -> (Array3<f64>, f64) {
    let (n1, n2, n3) = f.dims();
    let ifft = FftPlanner::new().plan_fft_inverse(n3);
    let scale = 1.0 / n3 as f64;
    let mut out = Array3::<f64>::zeros((n1, n2, n3));
    let mut imag_max: f64 = 0.0;
    let mut tube = vec![Complex64::new(0.0, 0.0); n3];
    for a in 0..n1 {
        for b in 0..n2 {
            for (k, z) in tube.iter_mut().enumerate() {
                *z = f.slices[k][(a, b)];
            }
            ifft.process(&mut tube);
            for (c, z) in tube.iter().enumerate() {
                out[[a, b, c]] = z.re * scale;
                imag_max = imag_max.max((z.im * scale).abs());
            }
        }
    }
    (out, imag_max)
}
