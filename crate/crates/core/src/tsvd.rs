//! t-product, t-SVD and the tubal nuclear norm.
//!
//! All operations transform along mode 3, work slice by slice in the Fourier
//! domain and transform back. Only the first `n3/2 + 1` frequency slices are
//! decomposed; the rest are filled in as conjugate mirrors.

use nalgebra::DMatrix;
use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fourier::{
    dft_mode3, idft_mode3_real, independent_slices, is_self_conjugate, FreqSlices,
};
use crate::tensor::Tensor3;

/// Singular values below this fraction of a slice's largest singular value
/// count as zero when deciding ranks.
pub const RANK_FLOOR: f64 = 1e-12;

/// Thin SVD of one frequency slice, singular values in descending order.
#[derive(Clone, Debug)]
pub struct SliceSvd {
    pub u: DMatrix<Complex64>,
    pub singular_values: Vec<f64>,
    pub v: DMatrix<Complex64>,
}

impl SliceSvd {
    fn conj(&self) -> SliceSvd {
        SliceSvd {
            u: self.u.map(|z| z.conj()),
            singular_values: self.singular_values.clone(),
            v: self.v.map(|z| z.conj()),
        }
    }

    /// Keeps the leading `r` components.
    pub fn truncated(&self, r: usize) -> SliceSvd {
        let r = r.min(self.singular_values.len());
        SliceSvd {
            u: self.u.columns(0, r).into_owned(),
            singular_values: self.singular_values[..r].to_vec(),
            v: self.v.columns(0, r).into_owned(),
        }
    }

    /// `U diag(s) Vᴴ`.
    pub fn assemble(&self) -> DMatrix<Complex64> {
        let mut us = self.u.clone();
        for (j, s) in self.singular_values.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        &us * self.v.adjoint()
    }

    /// `U Uᴴ G V Vᴴ`: orthogonal projection of `g` onto the span of the kept
    /// left and right singular vectors.
    pub fn project(&self, g: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        let inner = self.u.adjoint() * g * &self.v;
        &self.u * inner * self.v.adjoint()
    }
}

/// Thin SVD of a frequency slice. Self-conjugate slices are real-valued and
/// are decomposed in real arithmetic so their singular vectors stay real.
fn slice_svd(m: &DMatrix<Complex64>, real_valued: bool) -> Result<SliceSvd> {
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("frequency slice".into()));
    }
    let (rows, cols) = m.shape();
    let failed = |_| Error::NonFinite("slice SVD did not converge".into());
    if real_valued {
        let a = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)].re);
        let svd = a.thin_svd().map_err(failed)?;
        let (u, v) = (svd.U(), svd.V());
        Ok(SliceSvd {
            u: DMatrix::from_fn(rows, u.ncols(), |i, j| Complex64::new(u[(i, j)], 0.0)),
            singular_values: svd.S().column_vector().iter().copied().collect(),
            v: DMatrix::from_fn(cols, v.ncols(), |i, j| Complex64::new(v[(i, j)], 0.0)),
        })
    } else {
        let a = faer::Mat::<Complex64>::from_fn(rows, cols, |i, j| m[(i, j)]);
        let svd = a.thin_svd().map_err(failed)?;
        let (u, v) = (svd.U(), svd.V());
        Ok(SliceSvd {
            u: DMatrix::from_fn(rows, u.ncols(), |i, j| u[(i, j)]),
            singular_values: svd.S().column_vector().iter().map(|z| z.re).collect(),
            v: DMatrix::from_fn(cols, v.ncols(), |i, j| v[(i, j)]),
        })
    }
}

/// Full-rank SVD of every frequency slice of `t`, mirrored across the
/// conjugate-symmetric half.
pub fn fourier_svd(freq: &FreqSlices) -> Result<Vec<SliceSvd>> {
    let n3 = freq.len();
    let half = independent_slices(n3);
    let mut out: Vec<SliceSvd> = Vec::with_capacity(n3);
    for k in 0..half {
        out.push(slice_svd(freq.slice(k), is_self_conjugate(k, n3))?);
    }
    for k in half..n3 {
        let mirrored = out[n3 - k].conj();
        out.push(mirrored);
    }
    Ok(out)
}

/// Reassembles spatial slices from per-frequency factors.
fn assemble_slices(factors: &[SliceSvd]) -> FreqSlices {
    FreqSlices::new(factors.iter().map(SliceSvd::assemble).collect())
        .expect("factors share a shape")
}

/// `(U, Sdiag, V)` of the t-SVD, truncated to `rank` tubes.
#[derive(Clone, Debug)]
pub struct TSvdFactors {
    /// `n1 x r x n3`, orthonormal tubes.
    pub u: Tensor3,
    /// `r x n3`: singular values of each frequency slice, descending per column.
    pub sdiag: Array2<f64>,
    /// `n2 x r x n3`, orthonormal tubes.
    pub v: Tensor3,
    pub rank: usize,
}

impl TSvdFactors {
    /// `U * S * Vᵀ` under the t-product.
    pub fn reconstruct(&self) -> Tensor3 {
        let uf = dft_mode3(&self.u);
        let vf = dft_mode3(&self.v);
        let n3 = uf.len();
        let slices = (0..n3)
            .map(|k| {
                let mut us = uf.slice(k).clone();
                for j in 0..self.rank {
                    us.column_mut(j).scale_mut(self.sdiag[[j, k]]);
                }
                us * vf.slice(k).adjoint()
            })
            .collect();
        idft_mode3_real(&FreqSlices::new(slices).expect("consistent shapes"))
    }

    /// The f-diagonal core tensor `S` (`r x r x n3`) in the spatial domain.
    pub fn core(&self) -> Tensor3 {
        let n3 = self.sdiag.ncols();
        let r = self.rank;
        let slices = (0..n3)
            .map(|k| {
                DMatrix::from_fn(r, r, |i, j| {
                    if i == j {
                        Complex64::new(self.sdiag[[i, k]], 0.0)
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                })
            })
            .collect();
        idft_mode3_real(&FreqSlices::new(slices).expect("square slices"))
    }
}

fn check_rank(t: &Tensor3, r: usize) -> Result<()> {
    let (n1, n2, _) = t.dims();
    let max = n1.min(n2);
    if r == 0 || r > max {
        return Err(Error::InvalidRank { rank: r, max });
    }
    Ok(())
}

fn factors_to_tensor(mats: Vec<DMatrix<Complex64>>) -> Tensor3 {
    idft_mode3_real(&FreqSlices::new(mats).expect("consistent shapes"))
}

/// t-SVD of `t` keeping the leading `r` components of every frequency slice.
pub fn t_svd(t: &Tensor3, r: usize) -> Result<TSvdFactors> {
    check_rank(t, r)?;
    let freq = dft_mode3(t);
    let n3 = freq.len();
    let svds = fourier_svd(&freq)?;
    let kept: Vec<SliceSvd> = svds.iter().map(|s| s.truncated(r)).collect();
    let mut sdiag = Array2::zeros((r, n3));
    for (k, s) in kept.iter().enumerate() {
        for (j, v) in s.singular_values.iter().enumerate() {
            sdiag[[j, k]] = *v;
        }
    }
    let u = factors_to_tensor(kept.iter().map(|s| s.u.clone()).collect());
    let v = factors_to_tensor(kept.iter().map(|s| s.v.clone()).collect());
    Ok(TSvdFactors { u, sdiag, v, rank: r })
}

/// Tensor-tensor product: slice-wise matrix products in the Fourier domain.
pub fn t_product(a: &Tensor3, b: &Tensor3) -> Result<Tensor3> {
    let (_, m, n3) = a.dims();
    let (m2, _n2, n3b) = b.dims();
    if m != m2 || n3 != n3b {
        return Err(Error::ShapeMismatch(format!(
            "t-product of {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let af = dft_mode3(a);
    let bf = dft_mode3(b);
    let half = independent_slices(n3);
    let mut slices: Vec<DMatrix<Complex64>> = Vec::with_capacity(n3);
    for k in 0..half {
        slices.push(af.slice(k) * bf.slice(k));
    }
    for k in half..n3 {
        let mirrored = slices[n3 - k].map(|z| z.conj());
        slices.push(mirrored);
    }
    Ok(idft_mode3_real(&FreqSlices::new(slices)?))
}

/// Tubal nuclear norm `(1/n3) Σ_k ‖slice_k‖_*` over all frequency slices.
pub fn tubal_nuclear_norm(t: &Tensor3) -> Result<f64> {
    let freq = dft_mode3(t);
    let n3 = freq.len();
    let mut total = 0.0;
    for k in 0..independent_slices(n3) {
        let svd = slice_svd(freq.slice(k), is_self_conjugate(k, n3))?;
        let weight = if is_self_conjugate(k, n3) { 1.0 } else { 2.0 };
        total += weight * svd.singular_values.iter().sum::<f64>();
    }
    Ok(total / n3 as f64)
}

/// Largest number of singular values above the rank floor in any frequency slice.
pub fn tubal_rank(t: &Tensor3) -> Result<usize> {
    let freq = dft_mode3(t);
    let svds = fourier_svd(&freq)?;
    Ok(svds
        .iter()
        .map(|s| {
            let top = s.singular_values.first().copied().unwrap_or(0.0);
            s.singular_values
                .iter()
                .filter(|v| **v > 0.0 && **v > RANK_FLOOR * top)
                .count()
        })
        .max()
        .unwrap_or(0))
}

/// Result of a rank-`r` projection together with the kept per-slice factors,
/// which the differentiable version reuses in its backward pass.
pub(crate) struct Projection {
    pub output: Tensor3,
    pub kept: Vec<SliceSvd>,
}

pub(crate) fn project_with_factors(t: &Tensor3, r: usize) -> Result<Projection> {
    check_rank(t, r)?;
    let freq = dft_mode3(t);
    let kept: Vec<SliceSvd> = fourier_svd(&freq)?
        .iter()
        .map(|s| s.truncated(r))
        .collect();
    let output = idft_mode3_real(&assemble_slices(&kept));
    Ok(Projection { output, kept })
}

/// Rank-`r` truncated t-SVD projection: hard-thresholds every frequency slice
/// to its best rank-`r` approximation.
pub fn truncated_tsvd_project(t: &Tensor3, r: usize) -> Result<Tensor3> {
    Ok(project_with_factors(t, r)?.output)
}

/// Tensor singular value thresholding: the proximal operator of
/// `tau · tubal_nuclear_norm`. Every frequency-slice singular value `σ`
/// becomes `max(σ − tau, 0)`.
pub fn tsvt(t: &Tensor3, tau: f64) -> Result<Tensor3> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::Range(format!("threshold must be non-negative, got {tau}")));
    }
    let freq = dft_mode3(t);
    let shrunk: Vec<SliceSvd> = fourier_svd(&freq)?
        .into_iter()
        .map(|mut s| {
            for v in s.singular_values.iter_mut() {
                *v = (*v - tau).max(0.0);
            }
            s
        })
        .collect();
    Ok(idft_mode3_real(&assemble_slices(&shrunk)))
}

/// Builds a real tensor from a closure over frequency slices that is applied
/// to the independent half and mirrored.
pub(crate) fn map_fourier_slices<F>(freq: &FreqSlices, mut f: F) -> Tensor3
where
    F: FnMut(usize, &DMatrix<Complex64>) -> DMatrix<Complex64>,
{
    let n3 = freq.len();
    let half = independent_slices(n3);
    let mut out: Vec<DMatrix<Complex64>> = Vec::with_capacity(n3);
    for k in 0..half {
        out.push(f(k, freq.slice(k)));
    }
    for k in half..n3 {
        let mirrored = out[n3 - k].map(|z| z.conj());
        out.push(mirrored);
    }
    idft_mode3_real(&FreqSlices::new(out).expect("consistent shapes"))
}
