//! Reference computations that share no code with the library's estimators.

#![allow(dead_code)]

use std::f64::consts::PI;

use ardvae_core::models::{Likelihood, ModelState};
use ardvae_core::network::mlp_forward;
use ardvae_core::numerics::{Matrix, RngStream};

pub fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - 0.5 * (x - mean) * (x - mean) / var
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Sample mean and its standard error.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte Carlo `KL(q ‖ p)` between diagonal Gaussians given as (mean, variance)
/// pairs per dimension: the average of `log q(x) − log p(x)` over draws from `q`.
pub fn mc_kl(q: &[(f64, f64)], p: &[(f64, f64)], samples: usize, rng: &mut RngStream) -> (f64, f64) {
    let values: Vec<f64> = (0..samples)
        .map(|_| {
            q.iter()
                .zip(p)
                .map(|(&(mq, vq), &(mp, vp))| {
                    let x = mq + vq.sqrt() * rng.std_normal();
                    normal_log_pdf(x, mq, vq) - normal_log_pdf(x, mp, vp)
                })
                .sum()
        })
        .collect();
    mean_se(&values)
}

/// `log p(x | z)` for a single latent vector, straight from the decoder outputs.
pub fn decoder_log_likelihood(state: &ModelState, z: &[f64], x: &[f64]) -> f64 {
    let (out, _) = mlp_forward(&state.decoder, &Matrix::new(1, z.len(), z.to_vec()).unwrap()).unwrap();
    let (mean, lv) = (out.mean.row(0), out.log_var.row(0));
    match state.likelihood {
        Likelihood::Gaussian => (0..x.len()).map(|j| normal_log_pdf(x[j], mean[j], lv[j].exp())).sum(),
        Likelihood::Bernoulli => (0..x.len())
            .map(|j| {
                let p = 1.0 / (1.0 + (-mean[j]).exp());
                x[j] * p.ln() + (1.0 - x[j]) * (1.0 - p).ln()
            })
            .sum(),
    }
}

/// Importance-sampling estimate of `log p(x)` for an SGVB model with the
/// encoder as proposal. Returns the estimate and its delta-method standard
/// error.
pub fn is_log_likelihood(state: &ModelState, x: &[f64], samples: usize, rng: &mut RngStream) -> (f64, f64) {
    let (q, _) = mlp_forward(&state.encoder, &Matrix::new(1, x.len(), x.to_vec()).unwrap()).unwrap();
    let (mq, lq) = (q.mean.row(0).to_vec(), q.log_var.row(0).to_vec());
    let k = mq.len();
    let log_w: Vec<f64> = (0..samples)
        .map(|_| {
            let z: Vec<f64> = (0..k).map(|d| mq[d] + (0.5 * lq[d]).exp() * rng.std_normal()).collect();
            let log_prior: f64 = z.iter().map(|&v| normal_log_pdf(v, 0.0, 1.0)).sum();
            let log_q: f64 = (0..k).map(|d| normal_log_pdf(z[d], mq[d], lq[d].exp())).sum();
            decoder_log_likelihood(state, &z, x) + log_prior - log_q
        })
        .collect();
    let n = samples as f64;
    let estimate = log_sum_exp(&log_w) - n.ln();
    // Relative spread of the normalized weights.
    let w: Vec<f64> = log_w.iter().map(|l| (l - estimate).exp()).collect();
    let var = w.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / (n - 1.0);
    (estimate, (var / n).sqrt())
}

/// Rows drawn from `x = A s + b + σ ε` with `s ~ N(0, I_k)`.
pub fn linear_gaussian_data(a: &Matrix, b: &[f64], sigma: f64, n: usize, rng: &mut RngStream) -> Matrix {
    let (dim, k) = a.shape();
    let mut x = Matrix::zeros(n, dim);
    for r in 0..n {
        let s: Vec<f64> = (0..k).map(|_| rng.std_normal()).collect();
        for j in 0..dim {
            let mean: f64 = (0..k).map(|c| a.get(j, c) * s[c]).sum::<f64>() + b[j];
            x.set(r, j, mean + sigma * rng.std_normal());
        }
    }
    x
}
