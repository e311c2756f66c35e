//! Classical tensor robust PCA by block proximal alternation.
//!
//! Minimizes `½‖X − L − S‖_F² + λ_L‖L‖_* + λ_S‖S‖_1` by exact minimization over
//! `L` (tensor singular value thresholding) and then over `S` (element-wise
//! soft thresholding), starting from `S = 0`.

use crate::error::{Error, Result};
use crate::tensor::Tensor3;
use crate::tsvd::{tsvt, tubal_nuclear_norm};

/// Weights and stopping rule of the alternating solver.
#[derive(Clone, Debug, PartialEq)]
pub struct TrpcaConfig {
    /// Sparsity weight of the constrained problem `min ‖L‖_* + λ‖S‖_1`.
    pub lambda: f64,
    /// Weight of the tubal nuclear norm in the penalized problem.
    pub lambda_l: f64,
    /// Weight of the ℓ1 norm in the penalized problem.
    pub lambda_s: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl TrpcaConfig {
    pub const DEFAULT_TOL: f64 = 1e-7;
    pub const DEFAULT_MAX_ITERS: usize = 500;

    /// `λ_L = λ_S = λ`.
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            lambda_l: lambda,
            lambda_s: lambda,
            max_iters: Self::DEFAULT_MAX_ITERS,
            tol: Self::DEFAULT_TOL,
        }
    }

    /// Penalized form of the constrained problem scaled by `mu`:
    /// `λ_L = mu`, `λ_S = mu · λ`.
    pub fn scaled(lambda: f64, mu: f64) -> Self {
        Self {
            lambda,
            lambda_l: mu,
            lambda_s: mu * lambda,
            max_iters: Self::DEFAULT_MAX_ITERS,
            tol: Self::DEFAULT_TOL,
        }
    }

    /// Uses [`default_lambda`] for the given shape.
    pub fn for_shape(n1: usize, n2: usize, n3: usize) -> Self {
        Self::new(default_lambda(n1, n2, n3))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("lambda", self.lambda)?;
        positive("lambda_l", self.lambda_l)?;
        positive("lambda_s", self.lambda_s)?;
        positive("tol", self.tol)?;
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrpcaResult {
    pub low_rank: Tensor3,
    pub sparse: Tensor3,
    pub iters: usize,
    /// `‖X − L − S‖_F / ‖X‖_F` after every iteration.
    pub residual_history: Vec<f64>,
    /// Penalized objective after every iteration.
    pub objective_history: Vec<f64>,
    pub converged: bool,
}

/// `1/√(max(n1, n2)·n3)`.
pub fn default_lambda(n1: usize, n2: usize, n3: usize) -> f64 {
    1.0 / ((n1.max(n2) * n3) as f64).sqrt()
}

/// `sign(t)·max(|t| − tau, 0)` element-wise.
pub fn soft_threshold(t: &Tensor3, tau: f64) -> Tensor3 {
    t.map(|v| v.signum() * (v.abs() - tau).max(0.0))
}

/// `½‖X − L − S‖_F² + λ_L‖L‖_* + λ_S‖S‖_1`.
pub fn penalized_objective(
    x: &Tensor3,
    low_rank: &Tensor3,
    sparse: &Tensor3,
    cfg: &TrpcaConfig,
) -> Result<f64> {
    let residual = x.sub(low_rank)?.sub(sparse)?.frobenius_norm();
    Ok(0.5 * residual * residual
        + cfg.lambda_l * tubal_nuclear_norm(low_rank)?
        + cfg.lambda_s * sparse.l1_norm())
}

pub fn trpca_solve(x: &Tensor3, cfg: &TrpcaConfig) -> Result<TrpcaResult> {
    cfg.validate()?;
    let (n1, n2, n3) = x.dims();
    let scale = x.frobenius_norm().max(f64::MIN_POSITIVE);
    let mut low_rank = Tensor3::zeros(n1, n2, n3);
    let mut sparse = Tensor3::zeros(n1, n2, n3);
    let mut residual_history = Vec::new();
    let mut objective_history = Vec::new();
    let mut converged = false;

    for _ in 0..cfg.max_iters {
        let next_l = tsvt(&x.sub(&sparse)?, cfg.lambda_l)?;
        let next_s = soft_threshold(&x.sub(&next_l)?, cfg.lambda_s);
        let change_l = next_l.distance(&low_rank)? / scale;
        let change_s = next_s.distance(&sparse)? / scale;
        low_rank = next_l;
        sparse = next_s;

        residual_history.push(x.sub(&low_rank)?.sub(&sparse)?.frobenius_norm() / scale);
        objective_history.push(penalized_objective(x, &low_rank, &sparse, cfg)?);
        if change_l.max(change_s) < cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(TrpcaResult {
        low_rank,
        sparse,
        iters: residual_history.len(),
        residual_history,
        objective_history,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_hand_case() {
        let t = Tensor3::from_vec(1, 1, 3, vec![-3.0, 0.5, 2.0]).unwrap();
        let out = soft_threshold(&t, 1.0);
        assert_eq!(out.as_array().as_slice().unwrap(), &[-2.0, 0.0, 1.0]);
        assert_eq!(soft_threshold(&t, 0.0), t);
        let z = Tensor3::zeros(2, 2, 2);
        assert_eq!(soft_threshold(&z, 3.0), z);
    }

    #[test]
    fn default_lambda_values() {
        assert!((default_lambda(30, 30, 10) - 0.057735026918962574).abs() < 1e-15);
        assert_eq!(default_lambda(1, 1, 1), 1.0);
        assert!((default_lambda(512, 512, 31) - 0.0079370).abs() < 1e-6);
    }

    #[test]
    fn zero_input_stops_after_one_iteration() {
        let x = Tensor3::zeros(4, 4, 3);
        let res = trpca_solve(&x, &TrpcaConfig::new(0.1)).unwrap();
        assert_eq!(res.iters, 1);
        assert_eq!(res.low_rank, x);
        assert_eq!(res.sparse, x);
        assert_eq!(res.residual_history, vec![0.0]);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let x = Tensor3::zeros(2, 2, 2);
        let mut cfg = TrpcaConfig::new(0.1);
        cfg.max_iters = 0;
        assert!(matches!(trpca_solve(&x, &cfg), Err(Error::Config(_))));
        let cfg = TrpcaConfig::new(-1.0);
        assert!(trpca_solve(&x, &cfg).is_err());
    }
}
