//! Experiment configuration and the built-in Frey Faces presets.
//!
//! Configs are flat JSON objects. Unknown keys are rejected, and
//! [`TrainConfig::to_canonical_json`] always emits keys in declaration order.

use serde::{Deserialize, Serialize};

use crate::analysis::{RetentionRule, DEFAULT_THRESHOLD};
use crate::data::{DataFormat, Scaling};
use crate::error::{ArdError, Result};
use crate::models::{Likelihood, ModelSpec, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlWMode {
    /// Charge `KL(q_τ ‖ p(w))` once per datapoint, as the bound is literally written.
    PerDatapoint,
    /// Charge it once per epoch: every minibatch carries `1/N` of it.
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaUpdate {
    Gradient,
    /// After every step set `λ = μ_τ² + σ_τ²`.
    ClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Rmsprop,
    /// Plain gradient ascent, for debugging.
    Sgd,
}

fn default_true() -> bool {
    true
}
fn default_lr() -> f64 {
    1e-4
}
fn default_decay() -> f64 {
    0.9
}
fn default_momentum() -> f64 {
    0.9
}
fn default_epsilon() -> f64 {
    1e-6
}
fn default_batch() -> usize {
    200
}
fn default_one() -> usize {
    1
}
fn default_eval_every() -> u64 {
    100
}
fn default_window() -> usize {
    100
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_kl_w_mode() -> KlWMode {
    KlWMode::PerEpoch
}
fn default_lambda_update() -> LambdaUpdate {
    LambdaUpdate::Gradient
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Rmsprop
}
fn default_likelihood() -> Likelihood {
    Likelihood::Gaussian
}
fn default_scaling() -> Scaling {
    Scaling::UnitRange
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub name: String,
    pub variant: Variant,
    pub latent_dim: usize,
    /// Encoder hidden sizes; the decoder mirrors them.
    pub hidden_sizes: Vec<usize>,
    #[serde(default = "default_likelihood")]
    pub likelihood: Likelihood,
    #[serde(default)]
    pub shared_decoder_log_var: bool,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_decay")]
    pub rms_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Minibatch iterations. Exactly one of `iterations` and `epochs` is set.
    #[serde(default)]
    pub iterations: Option<u64>,
    #[serde(default)]
    pub epochs: Option<u64>,
    #[serde(default = "default_one")]
    pub n_w: usize,
    #[serde(default = "default_one")]
    pub n_z: usize,
    #[serde(default = "default_kl_w_mode")]
    pub kl_w_mode: KlWMode,
    #[serde(default = "default_lambda_update")]
    pub lambda_update: LambdaUpdate,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data_path: Option<String>,
    #[serde(default)]
    pub data_format: Option<DataFormat>,
    /// Training rows; `None` uses every row not reserved for testing.
    #[serde(default)]
    pub train_count: Option<usize>,
    #[serde(default)]
    pub test_count: usize,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_scaling")]
    pub scaling: Scaling,
    /// Test-set evaluation cadence in iterations.
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Trailing window of test evaluations averaged into the reported test bound.
    #[serde(default = "default_window")]
    pub score_window: usize,
    /// Checkpoint cadence in iterations; `0` only checkpoints at the end.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// `None` picks `ard_mass` for ARD variants and `weight_norm` for SGVB.
    #[serde(default)]
    pub retention_rule: Option<RetentionRule>,
    #[serde(default = "default_threshold")]
    pub retention_threshold: f64,
    /// Single-threaded, fixed-order reductions. When off, minibatch gradients
    /// are accumulated on several threads.
    #[serde(default = "default_true")]
    pub deterministic: bool,
}

impl TrainConfig {
    /// A config with every optional field at its default.
    pub fn new(variant: Variant, latent_dim: usize, hidden_sizes: Vec<usize>) -> Self {
        Self {
            name: String::new(),
            variant,
            latent_dim,
            hidden_sizes,
            likelihood: default_likelihood(),
            shared_decoder_log_var: false,
            optimizer: default_optimizer(),
            learning_rate: default_lr(),
            rms_decay: default_decay(),
            momentum: default_momentum(),
            epsilon: default_epsilon(),
            grad_clip: None,
            batch_size: default_batch(),
            iterations: Some(10_000),
            epochs: None,
            n_w: 1,
            n_z: 1,
            kl_w_mode: default_kl_w_mode(),
            lambda_update: default_lambda_update(),
            seed: 0,
            data_path: None,
            data_format: None,
            train_count: None,
            test_count: 0,
            split_seed: 0,
            scaling: default_scaling(),
            eval_every: default_eval_every(),
            score_window: default_window(),
            checkpoint_every: 0,
            retention_rule: None,
            retention_threshold: DEFAULT_THRESHOLD,
            deterministic: true,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| {
            ArdError::config(
                "config",
                format!("{e} (line {}, column {})", e.line(), e.column()),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pretty JSON with keys in declaration order.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(ArdError::config(field, "must be >= 1"))
            } else {
                Ok(())
            }
        };
        positive("latent_dim", self.latent_dim)?;
        positive("batch_size", self.batch_size)?;
        positive("n_w", self.n_w)?;
        positive("n_z", self.n_z)?;
        positive("score_window", self.score_window)?;
        if self.hidden_sizes.contains(&0) {
            return Err(ArdError::config("hidden_sizes", "every layer needs at least one unit"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(ArdError::config("learning_rate", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return Err(ArdError::config("rms_decay", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ArdError::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(ArdError::config("epsilon", "must be finite and > 0"));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(ArdError::config("grad_clip", "must be finite and > 0 when set"));
            }
        }
        match (self.iterations, self.epochs) {
            (Some(0), _) => return Err(ArdError::config("iterations", "must be >= 1")),
            (_, Some(0)) => return Err(ArdError::config("epochs", "must be >= 1")),
            (Some(_), Some(_)) => return Err(ArdError::config("epochs", "set either iterations or epochs, not both")),
            (None, None) => return Err(ArdError::config("iterations", "set either iterations or epochs")),
            _ => {}
        }
        if self.eval_every == 0 {
            return Err(ArdError::config("eval_every", "must be >= 1"));
        }
        if self.train_count == Some(0) {
            return Err(ArdError::config("train_count", "must be >= 1"));
        }
        if !(self.retention_threshold > 0.0 && self.retention_threshold < 1.0) {
            return Err(ArdError::config("retention_threshold", "must lie in (0, 1)"));
        }
        if !self.variant.has_ard() {
            if self.retention_rule == Some(RetentionRule::ArdMass) {
                return Err(ArdError::config("retention_rule", "ard_mass needs an ARD variant"));
            }
            if self.lambda_update == LambdaUpdate::ClosedForm {
                return Err(ArdError::config("lambda_update", "closed_form needs an ARD variant"));
            }
        }
        if self.variant != Variant::SgvbArd && self.n_w != 1 {
            return Err(ArdError::config("n_w", "relevance samples only apply to sgvb_ard"));
        }
        if self.likelihood == Likelihood::Bernoulli && self.scaling == Scaling::Standardize {
            return Err(ArdError::config("scaling", "bernoulli likelihood needs data in [0, 1]"));
        }
        Ok(())
    }

    pub fn model_spec(&self, input_dim: usize) -> ModelSpec {
        ModelSpec {
            variant: self.variant,
            input_dim,
            latent_dim: self.latent_dim,
            hidden: self.hidden_sizes.clone(),
            likelihood: self.likelihood,
            shared_decoder_log_var: self.shared_decoder_log_var,
        }
    }

    pub fn retention_rule(&self) -> RetentionRule {
        self.retention_rule.unwrap_or_else(|| RetentionRule::default_for(self.variant))
    }

    /// Total minibatch iterations for a training set of `n_train` rows.
    pub fn total_iterations(&self, n_train: usize) -> u64 {
        match (self.iterations, self.epochs) {
            (Some(i), _) => i,
            (None, Some(e)) => e * n_train.div_ceil(self.batch_size) as u64,
            (None, None) => 0,
        }
    }

    /// Multiplier on the global relevance KL for a training set of `n_train` rows.
    pub fn kl_w_scale(&self, n_train: usize) -> f64 {
        match self.kl_w_mode {
            KlWMode::PerDatapoint => 1.0,
            KlWMode::PerEpoch => 1.0 / n_train as f64,
        }
    }
}

/// Names of the twelve Frey Faces presets.
pub fn preset_names() -> Vec<String> {
    let mut out = Vec::new();
    for h in [200, 400] {
        for z in [50, 100] {
            for v in ["sgvb", "ard", "gsgvb"] {
                out.push(format!("frey_{h}h_{z}z_{v}"));
            }
        }
    }
    out
}

/// Looks up a preset by name. The variant suffix accepts `sgvb`, `ard`,
/// `sgvb_ard`, `gsgvb` and `gsgvb_ard`.
pub fn preset(name: &str) -> Option<TrainConfig> {
    let rest = name.strip_prefix("frey_")?;
    let (h, rest) = rest.split_once("h_")?;
    let (z, variant) = rest.split_once("z_")?;
    let hidden: usize = h.parse().ok()?;
    let latent: usize = z.parse().ok()?;
    if ![200, 400].contains(&hidden) || ![50, 100].contains(&latent) {
        return None;
    }
    let variant = match variant {
        "sgvb" => Variant::Sgvb,
        "ard" | "sgvb_ard" => Variant::SgvbArd,
        "gsgvb" | "gsgvb_ard" => Variant::GsgvbArd,
        _ => return None,
    };
    let mut cfg = TrainConfig::new(variant, latent, vec![hidden]);
    cfg.name = name.to_string();
    cfg.learning_rate = 1e-4;
    cfg.batch_size = 200;
    cfg.iterations = Some(10_000);
    cfg.train_count = Some(1600);
    cfg.test_count = 365;
    cfg.scaling = Scaling::UnitRange;
    cfg.eval_every = 1;
    cfg.score_window = 100;
    cfg.checkpoint_every = 1000;
    Some(cfg)
}
