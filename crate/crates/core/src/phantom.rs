//! Synthetic test data: smooth hyperspectral phantoms and planted
//! low-rank plus sparse tensors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tensor::Tensor3;
use crate::tsvd::t_product;

/// A smooth cube in `[0.05, 0.95]` built from `materials` separable
/// abundance maps, each paired with a smooth spectrum. Its tubal rank is at
/// most `materials + 1`.
pub fn smooth_phantom(n1: usize, n2: usize, n3: usize, materials: usize, rng: &mut ChaCha8Rng) -> Tensor3 {
    let mut data = ndarray::Array3::<f64>::zeros((n1, n2, n3));
    for _ in 0..materials.max(1) {
        let wave = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            let freq = rng.random_range(0.5..2.5) * std::f64::consts::PI / n as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (0..n).map(|i| 0.5 + 0.5 * (freq * i as f64 + phase).sin()).collect()
        };
        let rows = wave(rng, n1);
        let cols = wave(rng, n2);
        let center = rng.random_range(0.0..n3 as f64);
        let width = rng.random_range(0.3..0.8) * n3 as f64;
        let level = rng.random_range(0.2..0.6);
        let spectrum: Vec<f64> = (0..n3)
            .map(|k| level + (1.0 - level) * (-((k as f64 - center) / width).powi(2)).exp())
            .collect();
        for i in 0..n1 {
            for j in 0..n2 {
                for k in 0..n3 {
                    data[[i, j, k]] += rows[i] * cols[j] * spectrum[k];
                }
            }
        }
    }
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    data.mapv_inplace(|v| 0.05 + 0.9 * (v - lo) / span);
    Tensor3::new(data).expect("finite phantom")
}

/// Gaussian tensor of the given shape.
pub fn gaussian_tensor(n1: usize, n2: usize, n3: usize, rng: &mut ChaCha8Rng) -> Tensor3 {
    Tensor3::from_fn(n1, n2, n3, |_| rng.sample::<f64, _>(StandardNormal)).expect("finite")
}

/// `A * B` with Gaussian `A: n1×r×n3` and `B: r×n2×n3`, of tubal rank `r`
/// almost surely.
pub fn planted_low_rank(n1: usize, n2: usize, n3: usize, r: usize, rng: &mut ChaCha8Rng) -> Result<Tensor3> {
    let a = gaussian_tensor(n1, r, n3, rng);
    let b = gaussian_tensor(r, n2, n3, rng);
    t_product(&a, &b)
}

/// Each entry independently set to `±1` with probability `fraction`.
pub fn sparse_impulses(n1: usize, n2: usize, n3: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Tensor3 {
    Tensor3::from_fn(n1, n2, n3, |_| {
        if rng.random_bool(fraction) {
            if rng.random_bool(0.5) {
                1.0
            } else {
                -1.0
            }
        } else {
            0.0
        }
    })
    .expect("finite")
}
