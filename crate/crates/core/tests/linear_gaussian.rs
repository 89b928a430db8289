//! A decoder that is linear by construction has a closed-form marginal
//! likelihood. Checks the bound and the importance-sampling estimate against it.

mod common;

use ardvae_core::config::TrainConfig;
use ardvae_core::data::Dataset;
use ardvae_core::models::{
    draw_noise, evaluate_bound, mean_and_stderr, repeated_bounds, BoundOptions, Likelihood, ModelState,
    Variant,
};
use ardvae_core::network::{Dense, LogVarHead, MlpParams};
use ardvae_core::numerics::{Matrix, RngStream};
use ardvae_core::optim::train;
use common::{is_log_likelihood, linear_gaussian_data};
use nalgebra::{DMatrix, DVector};

const DIM: usize = 4;
const K: usize = 2;
const SIGMA: f64 = 0.5;

/// Columns are orthogonal so the exact posterior is diagonal.
fn loading() -> Matrix {
    Matrix::from_rows(&[[1.2, 0.3], [-0.6, 0.6], [0.6, 0.0], [0.0, -0.3]]).unwrap()
}

fn offset() -> Vec<f64> {
    vec![0.5, -1.0, 0.25, 2.0]
}

/// Two ReLU units per coordinate, `relu(v) − relu(−v) = v`, make the MLP affine.
fn affine_mlp(weight: &Matrix, bias: &[f64], log_var: Vec<f64>) -> MlpParams {
    let (out, input) = weight.shape();
    let mut hidden = Dense::zeros(input, 2 * input);
    for i in 0..input {
        hidden.weight.set(i, i, 1.0);
        hidden.weight.set(input + i, i, -1.0);
    }
    let mut head = Dense::zeros(2 * input, out);
    for o in 0..out {
        for i in 0..input {
            head.weight.set(o, i, weight.get(o, i));
            head.weight.set(o, input + i, -weight.get(o, i));
        }
    }
    head.bias = bias.to_vec();
    let mut lv = Dense::zeros(2 * input, out);
    lv.bias = log_var;
    MlpParams {
        hidden: vec![hidden],
        mean_head: head,
        log_var_head: LogVarHead::Affine(lv),
    }
}

/// SGVB model whose decoder is exactly `N(A z + b, σ² I)` and whose encoder
/// is the exact posterior, optionally distorted.
fn exact_model(mean_scale: f64, log_var_shift: f64) -> ModelState {
    let a = loading();
    let b = offset();
    let s2 = SIGMA * SIGMA;
    // posterior: var_d = 1 / (1 + |a_d|² / σ²), mean = var ⊙ Aᵀ (x − b) / σ²
    let var: Vec<f64> = (0..K)
        .map(|d| 1.0 / (1.0 + (0..DIM).map(|j| a.get(j, d).powi(2)).sum::<f64>() / s2))
        .collect();
    let mut enc_w = Matrix::zeros(K, DIM);
    for d in 0..K {
        for j in 0..DIM {
            enc_w.set(d, j, mean_scale * var[d] * a.get(j, d) / s2);
        }
    }
    let enc_b: Vec<f64> = (0..K)
        .map(|d| -(0..DIM).map(|j| enc_w.get(d, j) * b[j]).sum::<f64>())
        .collect();
    let encoder = affine_mlp(&enc_w, &enc_b, var.iter().map(|v| v.ln() + log_var_shift).collect());
    let decoder = affine_mlp(&a, &b, vec![s2.ln(); DIM]);
    let state = ModelState {
        variant: Variant::Sgvb,
        likelihood: Likelihood::Gaussian,
        encoder,
        decoder,
        ard: None,
    };
    state.validate().unwrap();
    state
}

/// Mean of `log N(x; b, C)` over the rows of `x`.
fn mean_gaussian_log_lik(x: &Matrix, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("covariance is positive definite");
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let d = x.cols() as f64;
    x.row_iter()
        .map(|row| {
            let r = DVector::from_column_slice(row) - mean;
            let sol = chol.solve(&r);
            -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det + r.dot(&sol))
        })
        .sum::<f64>()
        / x.rows() as f64
}

fn exact_log_lik(x: &Matrix) -> f64 {
    let a = loading();
    let a = DMatrix::from_row_slice(DIM, K, a.as_slice());
    let cov = &a * a.transpose() + DMatrix::identity(DIM, DIM) * (SIGMA * SIGMA);
    mean_gaussian_log_lik(x, &DVector::from_vec(offset()), &cov)
}

fn held_out(n: usize, seed: u64) -> Matrix {
    linear_gaussian_data(&loading(), &offset(), SIGMA, n, &mut RngStream::new(seed))
}

#[test]
fn importance_weights_are_constant_under_exact_posterior() {
    let state = exact_model(1.0, 0.0);
    let x = held_out(10, 1);
    let mut rng = RngStream::new(2);
    for row in x.row_iter() {
        let exact = exact_log_lik(&Matrix::new(1, DIM, row.to_vec()).unwrap());
        let (est, se) = is_log_likelihood(&state, row, 200, &mut rng);
        assert!((est - exact).abs() < 1e-9, "{est} vs {exact}");
        assert!(se < 1e-9);
    }
}

#[test]
fn bound_is_tight_under_exact_posterior() {
    let state = exact_model(1.0, 0.0);
    let x = held_out(20, 3);
    let bounds = repeated_bounds(&state, &x, &BoundOptions::default(), 2000, &mut RngStream::new(4)).unwrap();
    let totals: Vec<f64> = bounds.iter().map(|b| b.total).collect();
    let (mean, se) = mean_and_stderr(&totals);
    let exact = exact_log_lik(&x);
    assert!((mean - exact).abs() < 4.0 * se, "bound {mean} ± {se}, exact {exact}");
}

#[test]
fn distorted_posterior_loosens_bound_but_not_importance_estimate() {
    let state = exact_model(0.7, 0.6);
    let x = held_out(5, 5);
    let exact = exact_log_lik(&x);
    let bounds = repeated_bounds(&state, &x, &BoundOptions::default(), 2000, &mut RngStream::new(6)).unwrap();
    let totals: Vec<f64> = bounds.iter().map(|b| b.total).collect();
    let (bound, se) = mean_and_stderr(&totals);
    assert!(bound + 4.0 * se < exact, "bound {bound} ± {se} should sit below {exact}");

    let mut rng = RngStream::new(7);
    for row in x.row_iter() {
        let exact = exact_log_lik(&Matrix::new(1, DIM, row.to_vec()).unwrap());
        let (est, se) = is_log_likelihood(&state, row, 10_000, &mut rng);
        assert!((est - exact).abs() < 4.0 * se + 1e-9, "{est} ± {se} vs {exact}");
    }
}

#[test]
fn trained_model_approaches_maximum_likelihood_linear_fit() {
    let train_x = held_out(2000, 8);
    let test_x = held_out(500, 9);

    // Maximum-likelihood probabilistic PCA on the training set.
    let n = train_x.rows() as f64;
    let m = DMatrix::from_row_slice(train_x.rows(), DIM, train_x.as_slice());
    let mean = m.row_mean().transpose();
    let centered = DMatrix::from_fn(m.nrows(), DIM, |r, c| m[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / n;
    let eig = cov.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..DIM).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let s2 = order[K..].iter().map(|&i| eig.eigenvalues[i]).sum::<f64>() / (DIM - K) as f64;
    let mut fitted = DMatrix::identity(DIM, DIM) * s2;
    for &i in &order[..K] {
        let u = eig.eigenvectors.column(i);
        fitted += u * u.transpose() * (eig.eigenvalues[i] - s2);
    }
    let ml = mean_gaussian_log_lik(&test_x, &mean, &fitted);

    let mut config = TrainConfig::new(Variant::Sgvb, K, vec![16]);
    config.iterations = Some(4000);
    config.batch_size = 100;
    config.learning_rate = 3e-3;
    config.seed = 10;
    let (model, _) = train(config, Dataset::new("lg", train_x).unwrap(), None).unwrap();
    let opts = BoundOptions::default();
    let mut rng = RngStream::new(11);
    let bounds: Vec<f64> = (0..50)
        .map(|_| {
            let noise = draw_noise(&model, test_x.rows(), &opts, &mut rng);
            evaluate_bound(&model, &test_x, &opts, &noise).unwrap().total
        })
        .collect();
    let (bound, _) = mean_and_stderr(&bounds);
    assert!((bound - ml).abs() < 0.05 * ml.abs(), "bound {bound} vs maximum likelihood {ml}");
}
