use serde::{Deserialize, Serialize};

use super::{check_batch, ArdState, BoundBreakdown, GradientSet, Likelihood, ModelState, Variant};
use crate::distributions::{clamp_log_var, clamp_log_var_grad, HALF_LN_2PI};
use crate::error::{ArdError, Result};
use crate::network::{mlp_backward, mlp_forward, ForwardTape, GaussianBatch};
use crate::numerics::{Matrix, RngStream};

/// Sampling and weighting knobs shared by the estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundOptions {
    /// Relevance-weight samples per datapoint (SGVB-ARD only).
    pub n_w: usize,
    /// Latent samples per datapoint.
    pub n_z: usize,
    /// Multiplier on the global `KL(q_τ(w) ‖ N(0, Λ))` term of SGVB-ARD.
    /// `1` charges the full term to every minibatch; `1/N` charges it once per epoch.
    pub kl_w_scale: f64,
}

impl Default for BoundOptions {
    fn default() -> Self {
        Self {
            n_w: 1,
            n_z: 1,
            kl_w_scale: 1.0,
        }
    }
}

impl BoundOptions {
    fn validate(&self) -> Result<()> {
        if self.n_w == 0 || self.n_z == 0 {
            return Err(ArdError::Precondition("n_w and n_z must be at least 1".into()));
        }
        if !(self.kl_w_scale.is_finite() && self.kl_w_scale >= 0.0) {
            return Err(ArdError::Precondition(format!("kl_w_scale must be finite and >= 0, got {}", self.kl_w_scale)));
        }
        Ok(())
    }
}

/// Standard-normal draws consumed by one bound evaluation. Holding these fixed
/// makes the bound a deterministic function of the parameters.
///
/// Rows of `eps_z` are `(datapoint, sample)` pairs, `n_z` per datapoint; for
/// GSGVB-ARD they drive the sample of `m`. Rows of `eps_w` are `n_w` relevance
/// draws per datapoint and only exist for SGVB-ARD.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub eps_z: Matrix,
    pub eps_w: Option<Matrix>,
}

impl Noise {
    fn select(&self, start: usize, end: usize, opts: &BoundOptions) -> Noise {
        let take = |m: &Matrix, per: usize| {
            let idx: Vec<usize> = (start * per..end * per).collect();
            m.select_rows(&idx)
        };
        Noise {
            eps_z: take(&self.eps_z, opts.n_z),
            eps_w: self.eps_w.as_ref().map(|w| take(w, opts.n_w)),
        }
    }
}

pub fn draw_noise(state: &ModelState, rows: usize, opts: &BoundOptions, rng: &mut RngStream) -> Noise {
    let k = state.latent_dim();
    let mut eps_z = Matrix::zeros(rows * opts.n_z, k);
    rng.fill_std_normal(eps_z.as_mut_slice());
    let eps_w = (state.variant == Variant::SgvbArd).then(|| {
        let mut m = Matrix::zeros(rows * opts.n_w, k);
        rng.fill_std_normal(m.as_mut_slice());
        m
    });
    Noise { eps_z, eps_w }
}

/// Per-row quantities of the fused posterior over `m`.
struct FusedLatent {
    mean: Matrix,
    log_var: Matrix,
    /// Share of the total precision contributed by `q_φ`; `q_τ` holds `1 − a_phi`.
    a_phi: Matrix,
    /// Prior log-variance `log(λ / (1 + λ))` per dimension.
    prior_log_var: Vec<f64>,
}

enum Aux {
    Sgvb,
    Ard { z: Matrix, w: Matrix },
    Fused(FusedLatent),
}

struct Forward {
    enc: GaussianBatch,
    enc_tape: ForwardTape,
    dec_in: Matrix,
    dec: GaussianBatch,
    dec_tape: ForwardTape,
    aux: Aux,
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn ard_of(state: &ModelState) -> Result<&ArdState> {
    state.ard.as_ref().ok_or_else(|| {
        ArdError::Precondition(format!("{} state is missing relevance parameters", state.variant))
    })
}

fn check_noise(state: &ModelState, rows: usize, opts: &BoundOptions, noise: &Noise) -> Result<()> {
    let k = state.latent_dim();
    let expect = |m: &Matrix, per: usize| -> Result<()> {
        if m.shape() != (rows * per, k) {
            return Err(ArdError::Shape {
                op: "noise replay",
                left: m.shape(),
                right: (rows * per, k),
            });
        }
        Ok(())
    };
    expect(&noise.eps_z, opts.n_z)?;
    match (state.variant, &noise.eps_w) {
        (Variant::SgvbArd, Some(w)) => expect(w, opts.n_w),
        (Variant::SgvbArd, None) => Err(ArdError::Precondition("SGVB-ARD noise needs relevance draws".into())),
        _ => Ok(()),
    }
}

fn forward(state: &ModelState, batch: &Matrix, opts: &BoundOptions, noise: &Noise) -> Result<Forward> {
    check_batch(state, batch)?;
    opts.validate()?;
    let b = batch.rows();
    check_noise(state, b, opts, noise)?;
    let k = state.latent_dim();
    let (enc, enc_tape) = mlp_forward(&state.encoder, batch)?;

    let sample_z = |i: usize, s: usize, out: &mut [f64]| {
        let eps = noise.eps_z.row(i * opts.n_z + s);
        let (mu, lv) = (enc.mean.row(i), enc.log_var.row(i));
        for d in 0..k {
            out[d] = mu[d] + (0.5 * lv[d]).exp() * eps[d];
        }
    };

    let (dec_in, aux) = match state.variant {
        Variant::Sgvb => {
            let mut z = Matrix::zeros(b * opts.n_z, k);
            for i in 0..b {
                for s in 0..opts.n_z {
                    sample_z(i, s, z.row_mut(i * opts.n_z + s));
                }
            }
            (z, Aux::Sgvb)
        }
        Variant::SgvbArd => {
            let ard = ard_of(state)?;
            let eps_w = noise.eps_w.as_ref().expect("checked");
            let mut z = Matrix::zeros(b * opts.n_z, k);
            for i in 0..b {
                for s in 0..opts.n_z {
                    sample_z(i, s, z.row_mut(i * opts.n_z + s));
                }
            }
            let sd_tau: Vec<f64> = ard.log_var_tau.iter().map(|lv| (0.5 * clamp_log_var(*lv)).exp()).collect();
            let mut w = Matrix::zeros(b * opts.n_w, k);
            for r in 0..b * opts.n_w {
                let eps = eps_w.row(r);
                for (d, out) in w.row_mut(r).iter_mut().enumerate() {
                    *out = ard.mu_tau[d] + sd_tau[d] * eps[d];
                }
            }
            let per = opts.n_w * opts.n_z;
            let mut m = Matrix::zeros(b * per, k);
            for i in 0..b {
                for l in 0..opts.n_w {
                    let wr = w.row(i * opts.n_w + l);
                    for s in 0..opts.n_z {
                        let zr = z.row(i * opts.n_z + s);
                        let out = m.row_mut(i * per + l * opts.n_z + s);
                        for d in 0..k {
                            out[d] = zr[d] * wr[d];
                        }
                    }
                }
            }
            (m, Aux::Ard { z, w })
        }
        Variant::GsgvbArd => {
            let ard = ard_of(state)?;
            let prior_log_var: Vec<f64> = ard
                .log_lambda
                .iter()
                .map(|l| {
                    let l = clamp_log_var(*l);
                    l - softplus(l)
                })
                .collect();
            let mut fused = FusedLatent {
                mean: Matrix::zeros(b, k),
                log_var: Matrix::zeros(b, k),
                a_phi: Matrix::zeros(b, k),
                prior_log_var,
            };
            for i in 0..b {
                let (mu, lv) = (enc.mean.row(i), enc.log_var.row(i));
                for d in 0..k {
                    let p_phi = (-lv[d]).exp();
                    let p_tau = (-clamp_log_var(ard.log_var_tau[d])).exp();
                    let total = p_phi + p_tau;
                    let a = p_phi / total;
                    fused.a_phi.set(i, d, a);
                    fused.mean.set(i, d, a * mu[d] + (1.0 - a) * ard.mu_tau[d]);
                    fused.log_var.set(i, d, -total.ln());
                }
            }
            let mut m = Matrix::zeros(b * opts.n_z, k);
            for i in 0..b {
                for s in 0..opts.n_z {
                    let eps = noise.eps_z.row(i * opts.n_z + s);
                    let out = m.row_mut(i * opts.n_z + s);
                    for d in 0..k {
                        out[d] = fused.mean.get(i, d) + (0.5 * fused.log_var.get(i, d)).exp() * eps[d];
                    }
                }
            }
            (m, Aux::Fused(fused))
        }
    };

    let (dec, dec_tape) = mlp_forward(&state.decoder, &dec_in)?;
    Ok(Forward {
        enc,
        enc_tape,
        dec_in,
        dec,
        dec_tape,
        aux,
    })
}

/// Hidden-unit sign pattern of both networks under fixed noise. Changes in
/// this pattern mark ReLU kinks, where finite differences are meaningless.
pub fn activation_pattern(state: &ModelState, batch: &Matrix, opts: &BoundOptions, noise: &Noise) -> Result<Vec<bool>> {
    let f = forward(state, batch, opts, noise)?;
    Ok(f.enc_tape.relu_pattern().chain(f.dec_tape.relu_pattern()).collect())
}

/// Sums over the datapoints of a batch, before averaging and before the global
/// relevance KL.
struct LocalSums {
    recon: f64,
    kl: f64,
    grads: Option<GradientSet>,
}

fn per_sample_count(variant: Variant, opts: &BoundOptions) -> usize {
    match variant {
        Variant::SgvbArd => opts.n_w * opts.n_z,
        _ => opts.n_z,
    }
}

fn accumulate(
    state: &ModelState,
    batch: &Matrix,
    opts: &BoundOptions,
    noise: &Noise,
    with_grads: bool,
    row_offset: usize,
) -> Result<LocalSums> {
    let f = forward(state, batch, opts, noise)?;
    let b = batch.rows();
    let k = state.latent_dim();
    let dim = state.data_dim();
    let per = per_sample_count(state.variant, opts);
    let weight = 1.0 / per as f64;

    // decoder log-likelihood and its gradient with respect to the head outputs
    let rows = f.dec_in.rows();
    let mut g_mean = Matrix::zeros(rows, dim);
    let mut g_lv = Matrix::zeros(rows, dim);
    let mut recon_i = vec![0.0; b];
    for r in 0..rows {
        let i = r / per;
        let x = batch.row(i);
        let (mean, lv) = (f.dec.mean.row(r), f.dec.log_var.row(r));
        let mut ll = 0.0;
        match state.likelihood {
            Likelihood::Gaussian => {
                let gm = g_mean.row_mut(r);
                for j in 0..dim {
                    let prec = (-lv[j]).exp();
                    let diff = x[j] - mean[j];
                    ll += -HALF_LN_2PI - 0.5 * lv[j] - 0.5 * diff * diff * prec;
                    gm[j] = weight * diff * prec;
                }
                let gl = g_lv.row_mut(r);
                for j in 0..dim {
                    let diff = x[j] - mean[j];
                    gl[j] = weight * (-0.5 + 0.5 * diff * diff * (-lv[j]).exp());
                }
            }
            Likelihood::Bernoulli => {
                let gm = g_mean.row_mut(r);
                for j in 0..dim {
                    let logit = mean[j];
                    ll += x[j] * logit - softplus(logit);
                    gm[j] = weight * (x[j] - sigmoid(logit));
                }
            }
        }
        recon_i[i] += weight * ll;
    }

    // per-datapoint KL of the local latent
    let mut kl_i = vec![0.0; b];
    match &f.aux {
        Aux::Sgvb | Aux::Ard { .. } => {
            for (i, kl) in kl_i.iter_mut().enumerate() {
                let (mu, lv) = (f.enc.mean.row(i), f.enc.log_var.row(i));
                *kl = (0..k).map(|d| 0.5 * (mu[d] * mu[d] + lv[d].exp() - 1.0 - lv[d])).sum();
            }
        }
        Aux::Fused(fz) => {
            for (i, kl) in kl_i.iter_mut().enumerate() {
                *kl = (0..k)
                    .map(|d| {
                        let (m, lv, lp) = (fz.mean.get(i, d), fz.log_var.get(i, d), fz.prior_log_var[d]);
                        0.5 * (lp - lv + (lv.exp() + m * m) * (-lp).exp() - 1.0)
                    })
                    .sum();
            }
        }
    }

    for i in 0..b {
        if !(recon_i[i] - kl_i[i]).is_finite() {
            return Err(ArdError::NonFinite {
                what: "bound at datapoint".into(),
                index: row_offset + i,
            });
        }
    }
    let recon: f64 = recon_i.iter().sum();
    let kl: f64 = kl_i.iter().sum();
    if !with_grads {
        return Ok(LocalSums { recon, kl, grads: None });
    }

    let (dec_grads, g_in) = mlp_backward(&state.decoder, &f.dec_tape, &g_mean, &g_lv)?;
    let mut g_mu = Matrix::zeros(b, k);
    let mut g_elv = Matrix::zeros(b, k);
    let mut ard_grads = state.ard.as_ref().map(|a| ArdState::zeros(a.dim()));

    match &f.aux {
        Aux::Sgvb => {
            for i in 0..b {
                let (mu, lv) = (f.enc.mean.row(i), f.enc.log_var.row(i));
                for s in 0..opts.n_z {
                    let r = i * opts.n_z + s;
                    let (gz, eps) = (g_in.row(r), noise.eps_z.row(r));
                    for d in 0..k {
                        g_mu.row_mut(i)[d] += gz[d];
                        g_elv.row_mut(i)[d] += gz[d] * 0.5 * (0.5 * lv[d]).exp() * eps[d];
                    }
                }
                for d in 0..k {
                    g_mu.row_mut(i)[d] -= mu[d];
                    g_elv.row_mut(i)[d] -= 0.5 * (lv[d].exp() - 1.0);
                }
            }
        }
        Aux::Ard { z, w } => {
            let ard = ard_of(state)?;
            let acc = ard_grads.as_mut().expect("ARD variant");
            let eps_w = noise.eps_w.as_ref().expect("checked");
            let mut g_z = Matrix::zeros(z.rows(), k);
            let mut g_w = Matrix::zeros(w.rows(), k);
            for i in 0..b {
                for l in 0..opts.n_w {
                    let wr_idx = i * opts.n_w + l;
                    for s in 0..opts.n_z {
                        let zr_idx = i * opts.n_z + s;
                        let gm = g_in.row(i * per + l * opts.n_z + s);
                        for d in 0..k {
                            let (zv, wv) = (z.get(zr_idx, d), w.get(wr_idx, d));
                            g_z.row_mut(zr_idx)[d] += gm[d] * wv;
                            g_w.row_mut(wr_idx)[d] += gm[d] * zv;
                        }
                    }
                }
            }
            for i in 0..b {
                let (mu, lv) = (f.enc.mean.row(i), f.enc.log_var.row(i));
                for s in 0..opts.n_z {
                    let r = i * opts.n_z + s;
                    let (gz, eps) = (g_z.row(r), noise.eps_z.row(r));
                    for d in 0..k {
                        g_mu.row_mut(i)[d] += gz[d];
                        g_elv.row_mut(i)[d] += gz[d] * 0.5 * (0.5 * lv[d]).exp() * eps[d];
                    }
                }
                for d in 0..k {
                    g_mu.row_mut(i)[d] -= mu[d];
                    g_elv.row_mut(i)[d] -= 0.5 * (lv[d].exp() - 1.0);
                }
            }
            for r in 0..w.rows() {
                let (gw, eps) = (g_w.row(r), eps_w.row(r));
                for d in 0..k {
                    let lv = ard.log_var_tau[d];
                    acc.mu_tau[d] += gw[d];
                    acc.log_var_tau[d] +=
                        gw[d] * 0.5 * (0.5 * clamp_log_var(lv)).exp() * eps[d] * clamp_log_var_grad(lv);
                }
            }
        }
        Aux::Fused(fz) => {
            let ard = ard_of(state)?;
            let acc = ard_grads.as_mut().expect("ARD variant");
            for i in 0..b {
                let (mu_phi, _) = (f.enc.mean.row(i), f.enc.log_var.row(i));
                for d in 0..k {
                    let (m, lv_m, lp) = (fz.mean.get(i, d), fz.log_var.get(i, d), fz.prior_log_var[d]);
                    let sd_m = (0.5 * lv_m).exp();
                    // reconstruction path through the sample m = mean + sd ⊙ ε
                    let mut g_mean = 0.0;
                    let mut g_logvar = 0.0;
                    for s in 0..opts.n_z {
                        let r = i * opts.n_z + s;
                        let g = g_in.get(r, d);
                        g_mean += g;
                        g_logvar += g * 0.5 * sd_m * noise.eps_z.get(r, d);
                    }
                    // minus KL(q(m) ‖ p(m))
                    let inv_prior = (-lp).exp();
                    g_mean -= m * inv_prior;
                    g_logvar -= 0.5 * ((lv_m - lp).exp() - 1.0);
                    let g_prior_lv = -0.5 * (1.0 - (lv_m.exp() + m * m) * inv_prior);

                    let a_phi = fz.a_phi.get(i, d);
                    let a_tau = 1.0 - a_phi;
                    let mu_tau = ard.mu_tau[d];
                    let cross = a_phi * a_tau * (mu_tau - mu_phi[d]);
                    g_mu.row_mut(i)[d] = g_mean * a_phi;
                    g_elv.row_mut(i)[d] = g_logvar * a_phi + g_mean * cross;
                    acc.mu_tau[d] += g_mean * a_tau;
                    acc.log_var_tau[d] += (g_logvar * a_tau - g_mean * cross) * clamp_log_var_grad(ard.log_var_tau[d]);
                    let l = ard.log_lambda[d];
                    acc.log_lambda[d] += g_prior_lv * sigmoid(-clamp_log_var(l)) * clamp_log_var_grad(l);
                }
            }
        }
    }

    let (enc_grads, _) = mlp_backward(&state.encoder, &f.enc_tape, &g_mu, &g_elv)?;
    Ok(LocalSums {
        recon,
        kl,
        grads: Some(GradientSet {
            encoder: enc_grads,
            decoder: dec_grads,
            ard: ard_grads,
        }),
    })
}

/// Averages local sums over the batch and adds the global relevance KL of SGVB-ARD.
fn finish(state: &ModelState, local: LocalSums, rows: usize, opts: &BoundOptions) -> Result<(BoundBreakdown, Option<GradientSet>)> {
    let inv = 1.0 / rows as f64;
    let mut grads = local.grads;
    if let Some(g) = grads.as_mut() {
        g.scale(inv);
    }
    let mut kl_w = 0.0;
    if state.variant == Variant::SgvbArd {
        let ard = ard_of(state)?;
        let s = opts.kl_w_scale;
        for d in 0..ard.dim() {
            let (mu, lv_raw, l_raw) = (ard.mu_tau[d], ard.log_var_tau[d], ard.log_lambda[d]);
            let (lv, l) = (clamp_log_var(lv_raw), clamp_log_var(l_raw));
            let inv_lambda = (-l).exp();
            let second_moment = lv.exp() + mu * mu;
            kl_w += 0.5 * (l - lv + second_moment * inv_lambda - 1.0);
            if let Some(g) = grads.as_mut() {
                let a = g.ard.as_mut().expect("ARD variant");
                a.mu_tau[d] -= s * mu * inv_lambda;
                a.log_var_tau[d] -= s * 0.5 * (lv.exp() * inv_lambda - 1.0) * clamp_log_var_grad(lv_raw);
                a.log_lambda[d] -= s * 0.5 * (1.0 - second_moment * inv_lambda) * clamp_log_var_grad(l_raw);
            }
        }
        kl_w *= s;
    }
    let breakdown = BoundBreakdown::from_parts(local.recon * inv, local.kl * inv, kl_w);
    if !breakdown.total.is_finite() {
        return Err(ArdError::NonFinite {
            what: "relevance KL term".into(),
            index: 0,
        });
    }
    Ok((breakdown, grads))
}

/// Bound and gradients under replayed noise.
pub fn evaluate(state: &ModelState, batch: &Matrix, opts: &BoundOptions, noise: &Noise) -> Result<(BoundBreakdown, GradientSet)> {
    let local = accumulate(state, batch, opts, noise, true, 0)?;
    let (bound, grads) = finish(state, local, batch.rows(), opts)?;
    Ok((bound, grads.expect("gradients requested")))
}

/// Bound only, skipping the backward pass.
pub fn evaluate_bound(state: &ModelState, batch: &Matrix, opts: &BoundOptions, noise: &Noise) -> Result<BoundBreakdown> {
    let local = accumulate(state, batch, opts, noise, false, 0)?;
    Ok(finish(state, local, batch.rows(), opts)?.0)
}

/// Like [`evaluate`] but splits the datapoints into `chunks` contiguous groups
/// processed on separate threads. Partial sums are combined in chunk order, so
/// the result is reproducible for a fixed chunk count but not bitwise equal to
/// the single-pass result.
pub fn evaluate_chunked(
    state: &ModelState,
    batch: &Matrix,
    opts: &BoundOptions,
    noise: &Noise,
    chunks: usize,
) -> Result<(BoundBreakdown, GradientSet)> {
    let b = batch.rows();
    let chunks = chunks.clamp(1, b.max(1));
    if chunks == 1 {
        return evaluate(state, batch, opts, noise);
    }
    check_batch(state, batch)?;
    opts.validate()?;
    check_noise(state, b, opts, noise)?;
    let bounds: Vec<(usize, usize)> = (0..chunks).map(|c| (c * b / chunks, (c + 1) * b / chunks)).collect();
    let parts: Vec<Result<LocalSums>> = std::thread::scope(|scope| {
        let handles: Vec<_> = bounds
            .iter()
            .map(|&(start, end)| {
                scope.spawn(move || {
                    let rows: Vec<usize> = (start..end).collect();
                    let sub = batch.select_rows(&rows);
                    let sub_noise = noise.select(start, end, opts);
                    accumulate(state, &sub, opts, &sub_noise, true, start)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut total: Option<LocalSums> = None;
    for part in parts {
        let part = part?;
        total = Some(match total {
            None => part,
            Some(mut acc) => {
                acc.recon += part.recon;
                acc.kl += part.kl;
                if let (Some(a), Some(p)) = (acc.grads.as_mut(), part.grads.as_ref()) {
                    a.add_assign(p);
                }
                acc
            }
        });
    }
    let (bound, grads) = finish(state, total.expect("at least one chunk"), b, opts)?;
    Ok((bound, grads.expect("gradients requested")))
}

fn require(state: &ModelState, variant: Variant) -> Result<()> {
    if state.variant != variant {
        return Err(ArdError::VariantMismatch {
            expected: variant.to_string(),
            found: state.variant.to_string(),
        });
    }
    Ok(())
}

/// SGVB bound with one reparametrized latent sample per datapoint.
pub fn sgvb_bound(state: &ModelState, batch: &Matrix, rng: &mut RngStream) -> Result<(BoundBreakdown, GradientSet)> {
    require(state, Variant::Sgvb)?;
    let opts = BoundOptions::default();
    let noise = draw_noise(state, batch.rows(), &opts, rng);
    evaluate(state, batch, &opts, &noise)
}

/// Doubly stochastic SGVB-ARD bound with `n_w` relevance and `n_z` latent samples.
pub fn sgvb_ard_bound(
    state: &ModelState,
    batch: &Matrix,
    n_w: usize,
    n_z: usize,
    rng: &mut RngStream,
    kl_w_scale: f64,
) -> Result<(BoundBreakdown, GradientSet)> {
    require(state, Variant::SgvbArd)?;
    let opts = BoundOptions { n_w, n_z, kl_w_scale };
    opts.validate()?;
    let noise = draw_noise(state, batch.rows(), &opts, rng);
    evaluate(state, batch, &opts, &noise)
}

/// GSGVB-ARD bound with a single sample of the fused latent `m`.
///
/// There is no global KL term in this estimator, so `opts.kl_w_scale` has no effect.
pub fn gsgvb_ard_bound(
    state: &ModelState,
    batch: &Matrix,
    rng: &mut RngStream,
    opts: &BoundOptions,
) -> Result<(BoundBreakdown, GradientSet)> {
    require(state, Variant::GsgvbArd)?;
    let noise = draw_noise(state, batch.rows(), opts, rng);
    evaluate(state, batch, opts, &noise)
}
