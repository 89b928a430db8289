//! Diagonal Gaussians parametrized by mean and log-variance.

use serde::{Deserialize, Serialize};

use crate::error::{ArdError, Result};
use crate::numerics::RngStream;

pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 30.0;

/// `½ log 2π`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn clamp_log_var(v: f64) -> f64 {
    v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
}

/// Derivative of [`clamp_log_var`]: one strictly inside the range, zero outside.
#[inline]
pub fn clamp_log_var_grad(v: f64) -> f64 {
    if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&v) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    /// Log-variances are clamped into `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(ArdError::Dimension {
                context: "DiagGaussian::new",
                expected: mean.len(),
                found: log_var.len(),
            });
        }
        let log_var = log_var.into_iter().map(clamp_log_var).collect();
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn from_variance(mean: Vec<f64>, variance: &[f64]) -> Result<Self> {
        Self::new(mean, variance.iter().map(|v| v.ln()).collect())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    fn check_dim(&self, other: usize, context: &'static str) -> Result<()> {
        if self.dim() != other {
            return Err(ArdError::Dimension {
                context,
                expected: self.dim(),
                found: other,
            });
        }
        Ok(())
    }
}

pub fn log_density(g: &DiagGaussian, x: &[f64]) -> Result<f64> {
    g.check_dim(x.len(), "log_density")?;
    Ok(g
        .mean
        .iter()
        .zip(&g.log_var)
        .zip(x)
        .map(|((m, lv), xi)| -HALF_LN_2PI - 0.5 * lv - 0.5 * (xi - m).powi(2) * (-lv).exp())
        .sum())
}

/// `KL(q ‖ N(0, I))`
pub fn kl_to_std_normal(q: &DiagGaussian) -> f64 {
    q.mean
        .iter()
        .zip(&q.log_var)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// `KL(q ‖ p)` for two diagonal Gaussians.
pub fn kl_diag_to_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    q.check_dim(p.dim(), "kl_diag_to_diag")?;
    Ok((0..q.dim())
        .map(|d| {
            let (lq, lp) = (q.log_var[d], p.log_var[d]);
            let diff = q.mean[d] - p.mean[d];
            0.5 * (lp - lq + (lq.exp() + diff * diff) * (-lp).exp() - 1.0)
        })
        .sum())
}

/// Draws `mean + exp(½ log_var) ⊙ ε` and returns `(sample, ε)`.
pub fn reparam_sample(g: &DiagGaussian, rng: &mut RngStream) -> (Vec<f64>, Vec<f64>) {
    let mut eps = vec![0.0; g.dim()];
    rng.fill_std_normal(&mut eps);
    (reparam_with_noise(g, &eps), eps)
}

pub fn reparam_with_noise(g: &DiagGaussian, eps: &[f64]) -> Vec<f64> {
    g.mean
        .iter()
        .zip(&g.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

/// Normalized pointwise product of two diagonal Gaussian densities: precisions
/// add and the mean is the precision-weighted average of the factor means.
pub fn gaussian_product(a: &DiagGaussian, b: &DiagGaussian) -> Result<DiagGaussian> {
    a.check_dim(b.dim(), "gaussian_product")?;
    let mut mean = Vec::with_capacity(a.dim());
    let mut log_var = Vec::with_capacity(a.dim());
    for d in 0..a.dim() {
        let (pa, pb) = ((-a.log_var[d]).exp(), (-b.log_var[d]).exp());
        let total = pa + pb;
        mean.push((pa * a.mean[d] + pb * b.mean[d]) / total);
        log_var.push(-total.ln());
    }
    DiagGaussian::new(mean, log_var)
}

/// Posterior over the masked latent `m = z ⊙ w` from `q_φ(z|x)` and `q_τ(w)`.
pub fn gaussian_product_posterior(q_z: &DiagGaussian, q_w: &DiagGaussian) -> Result<DiagGaussian> {
    gaussian_product(q_z, q_w)
}

/// Prior over `m` from `p(z)` and `p(w)`; each mean is weighted by its own
/// factor's precision. For `p(z) = N(0, 1)`, `p(w) = N(0, λ)` this is
/// `N(0, λ / (1 + λ))`.
pub fn gaussian_product_prior(p_z: &DiagGaussian, p_w: &DiagGaussian) -> Result<DiagGaussian> {
    gaussian_product(p_z, p_w)
}
