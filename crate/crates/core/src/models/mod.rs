//! Model state and the three variational objectives.
//!
//! * `Sgvb`: `−KL(q_φ(z|x) ‖ N(0, I)) + E_q[log p_θ(x | z)]`.
//! * `SgvbArd`: the decoder reads `z ⊙ w` where `w` is a global relevance
//!   vector with posterior `q_τ(w)` and prior `N(0, Λ)`. Both `z` and `w` are
//!   sampled.
//! * `GsgvbArd`: `q_φ(z|x)` and `q_τ(w)` are fused into a single Gaussian over
//!   `m = z ⊙ w` by multiplying densities, and likewise for the priors, leaving
//!   one expectation and one KL term per datapoint.
//!
//! Every bound is reported per datapoint (minibatch mean); gradients are
//! gradients of that reported total, i.e. the ascent direction.

mod estimators;
mod score;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ArdError, Result};
use crate::network::{init_params, MlpParams, MlpSpec};
use crate::numerics::{Matrix, RngStream};

pub use estimators::{
    activation_pattern, draw_noise, evaluate, evaluate_bound, evaluate_chunked, gsgvb_ard_bound, sgvb_ard_bound, sgvb_bound,
    BoundOptions, Noise,
};
pub use score::{estimate_test_score, mean_and_stderr, repeated_bounds, TestScoreWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Sgvb,
    SgvbArd,
    GsgvbArd,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Sgvb, Variant::SgvbArd, Variant::GsgvbArd];

    pub fn has_ard(self) -> bool {
        self != Variant::Sgvb
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Sgvb => "sgvb",
            Variant::SgvbArd => "sgvb_ard",
            Variant::GsgvbArd => "gsgvb_ard",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = ArdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sgvb" => Ok(Variant::Sgvb),
            "sgvb_ard" | "ard" => Ok(Variant::SgvbArd),
            "gsgvb_ard" | "gsgvb" => Ok(Variant::GsgvbArd),
            _ => Err(ArdError::config("variant", format!("unknown variant `{s}`"))),
        }
    }
}

/// Observation model of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    Gaussian,
    /// Mean head is read as logits; the log-variance head is unused.
    Bernoulli,
}

/// Relevance-weight posterior `q_τ(w) = N(mu_tau, exp(log_var_tau))` and the
/// prior log-variances `log Λ`. Gradients reuse the same layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArdState {
    pub mu_tau: Vec<f64>,
    pub log_var_tau: Vec<f64>,
    pub log_lambda: Vec<f64>,
}

impl ArdState {
    /// `μ_τ = 1`, `log σ²_τ = 0`, `Λ = 1`: the mask starts out transparent.
    pub fn init(latent_dim: usize) -> Self {
        Self {
            mu_tau: vec![1.0; latent_dim],
            log_var_tau: vec![0.0; latent_dim],
            log_lambda: vec![0.0; latent_dim],
        }
    }

    pub fn zeros(latent_dim: usize) -> Self {
        Self {
            mu_tau: vec![0.0; latent_dim],
            log_var_tau: vec![0.0; latent_dim],
            log_lambda: vec![0.0; latent_dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu_tau.len()
    }

    /// Posterior second moment `μ²_τ + σ²_τ` per dimension.
    pub fn relevance_mass(&self) -> Vec<f64> {
        self.mu_tau
            .iter()
            .zip(&self.log_var_tau)
            .map(|(m, lv)| m * m + crate::distributions::clamp_log_var(*lv).exp())
            .collect()
    }

    pub fn lambda(&self) -> Vec<f64> {
        self.log_lambda.iter().map(|l| l.exp()).collect()
    }
}

/// Exact maximizer over `λ_d` of `−KL(q_τ(w) ‖ N(0, Λ))`: `λ*_d = μ²_τ,d + σ²_τ,d`.
pub fn lambda_closed_form_update(ard: &ArdState) -> Vec<f64> {
    ard.relevance_mass()
}

/// Architecture and variant of a model, enough to initialize one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub input_dim: usize,
    pub latent_dim: usize,
    /// Hidden sizes of the encoder; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub likelihood: Likelihood,
    /// Use one free log-variance per pixel in the decoder instead of an affine head.
    pub shared_decoder_log_var: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub variant: Variant,
    pub likelihood: Likelihood,
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub ard: Option<ArdState>,
}

impl ModelState {
    pub fn init(spec: &ModelSpec, rng: &mut RngStream) -> Result<Self> {
        if spec.latent_dim == 0 || spec.input_dim == 0 {
            return Err(ArdError::Precondition("input and latent dimensions must be positive".into()));
        }
        let encoder = init_params(
            &MlpSpec {
                input: spec.input_dim,
                hidden: spec.hidden.clone(),
                output: spec.latent_dim,
                shared_log_var: false,
            },
            rng,
        )?;
        let decoder = init_params(
            &MlpSpec {
                input: spec.latent_dim,
                hidden: spec.hidden.iter().rev().copied().collect(),
                output: spec.input_dim,
                shared_log_var: spec.shared_decoder_log_var,
            },
            rng,
        )?;
        let ard = spec.variant.has_ard().then(|| ArdState::init(spec.latent_dim));
        let state = Self {
            variant: spec.variant,
            likelihood: spec.likelihood,
            encoder,
            decoder,
            ard,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn data_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// Checks the cross-component invariants.
    pub fn validate(&self) -> Result<()> {
        let k = self.latent_dim();
        if self.decoder.input_dim() != k {
            return Err(ArdError::Dimension {
                context: "decoder input vs latent dimension",
                expected: k,
                found: self.decoder.input_dim(),
            });
        }
        if self.decoder.output_dim() != self.data_dim() {
            return Err(ArdError::Dimension {
                context: "decoder output vs data dimension",
                expected: self.data_dim(),
                found: self.decoder.output_dim(),
            });
        }
        match (&self.ard, self.variant.has_ard()) {
            (Some(a), true) => {
                for (len, _) in [(a.mu_tau.len(), 0), (a.log_var_tau.len(), 1), (a.log_lambda.len(), 2)] {
                    if len != k {
                        return Err(ArdError::Dimension {
                            context: "relevance parameters vs latent dimension",
                            expected: k,
                            found: len,
                        });
                    }
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(ArdError::Precondition("SGVB state must not carry relevance parameters".into()))
            }
            (None, true) => {
                return Err(ArdError::Precondition(format!(
                    "{} state is missing relevance parameters",
                    self.variant
                )))
            }
        }
        Ok(())
    }

    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        param_blocks(&self.encoder, &self.decoder, self.ard.as_ref())
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        param_blocks_mut(&mut self.encoder, &mut self.decoder, self.ard.as_mut())
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|(_, b)| b.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.num_params();
        if flat.len() != total {
            return Err(ArdError::Dimension {
                context: "ModelState::set_flat",
                expected: total,
                found: flat.len(),
            });
        }
        let mut offset = 0;
        for block in self.blocks_mut() {
            block.copy_from_slice(&flat[offset..offset + block.len()]);
            offset += block.len();
        }
        Ok(())
    }

    pub fn zero_gradients(&self) -> GradientSet {
        GradientSet {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            ard: self.ard.as_ref().map(|a| ArdState::zeros(a.dim())),
        }
    }
}

fn param_blocks<'a>(enc: &'a MlpParams, dec: &'a MlpParams, ard: Option<&'a ArdState>) -> Vec<(String, &'a [f64])> {
    let mut out: Vec<(String, &[f64])> = Vec::new();
    out.extend(enc.blocks().into_iter().map(|(n, b)| (format!("encoder.{n}"), b)));
    out.extend(dec.blocks().into_iter().map(|(n, b)| (format!("decoder.{n}"), b)));
    if let Some(a) = ard {
        out.push(("ard.mu_tau".to_string(), a.mu_tau.as_slice()));
        out.push(("ard.log_var_tau".to_string(), a.log_var_tau.as_slice()));
        out.push(("ard.log_lambda".to_string(), a.log_lambda.as_slice()));
    }
    out
}

fn param_blocks_mut<'a>(
    enc: &'a mut MlpParams,
    dec: &'a mut MlpParams,
    ard: Option<&'a mut ArdState>,
) -> Vec<&'a mut [f64]> {
    let mut out = enc.blocks_mut();
    out.extend(dec.blocks_mut());
    if let Some(a) = ard {
        out.push(a.mu_tau.as_mut_slice());
        out.push(a.log_var_tau.as_mut_slice());
        out.push(a.log_lambda.as_mut_slice());
    }
    out
}

/// The summands of a bound, all in nats per datapoint.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundBreakdown {
    pub total: f64,
    pub recon: f64,
    pub kl_z: f64,
    pub kl_w: f64,
}

impl BoundBreakdown {
    fn from_parts(recon: f64, kl_z: f64, kl_w: f64) -> Self {
        Self {
            total: recon - kl_z - kl_w,
            recon,
            kl_z,
            kl_w,
        }
    }
}

/// Gradient of the bound with respect to every parameter of a [`ModelState`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub ard: Option<ArdState>,
}

impl GradientSet {
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        param_blocks(&self.encoder, &self.decoder, self.ard.as_ref())
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        param_blocks_mut(&mut self.encoder, &mut self.decoder, self.ard.as_mut())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|(_, b)| b.iter().copied()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, b)| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for block in self.blocks_mut() {
            for v in block {
                *v *= factor;
            }
        }
    }

    /// `self += other`; both sides must come from the same model.
    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Errors on the first non-finite entry, naming its block.
    pub fn validate_finite(&self) -> Result<()> {
        for (name, block) in self.blocks() {
            if let Some(index) = block.iter().position(|v| !v.is_finite()) {
                return Err(ArdError::NonFinite {
                    what: format!("gradient block {name}"),
                    index,
                });
            }
        }
        Ok(())
    }
}

/// Minibatch data paired with the shape check every estimator needs.
pub(crate) fn check_batch(state: &ModelState, batch: &Matrix) -> Result<()> {
    if batch.cols() != state.data_dim() {
        return Err(ArdError::Dimension {
            context: "batch width vs model data dimension",
            expected: state.data_dim(),
            found: batch.cols(),
        });
    }
    if batch.rows() == 0 {
        return Err(ArdError::Precondition("empty batch".into()));
    }
    Ok(())
}
