//! Finite-difference verification of the analytic bound gradients.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::models::{
    activation_pattern, draw_noise, evaluate, evaluate_bound, BoundOptions, GradientSet, Likelihood, ModelSpec,
    ModelState, Variant,
};
use crate::numerics::{central_difference, relative_error, Matrix, RngStream, DEFAULT_FD_STEP};

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSpec {
    pub variant: Variant,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub batch: usize,
    pub likelihood: Likelihood,
    pub opts: BoundOptions,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
}

impl GradCheckSpec {
    /// Input 6, one hidden layer of 8, latent 3, batch 4.
    pub fn toy(variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            input_dim: 6,
            hidden: vec![8],
            latent_dim: 3,
            batch: 4,
            likelihood: Likelihood::Gaussian,
            opts: BoundOptions::default(),
            seed,
            step: DEFAULT_FD_STEP,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a ReLU changes state within ±10 steps.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error < self.tolerance)
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }
}

/// Random toy model, moved away from its structured initialization, plus a
/// random batch (uniform in `[0, 1]` for Bernoulli data).
pub fn toy_problem(spec: &GradCheckSpec) -> Result<(ModelState, Matrix)> {
    let rng = RngStream::new(spec.seed);
    let mut state = ModelState::init(
        &ModelSpec {
            variant: spec.variant,
            input_dim: spec.input_dim,
            latent_dim: spec.latent_dim,
            hidden: spec.hidden.clone(),
            likelihood: spec.likelihood,
            shared_decoder_log_var: false,
        },
        &mut rng.split("init"),
    )?;
    let mut jitter = rng.split("jitter");
    for block in state.blocks_mut() {
        for v in block {
            *v += 0.3 * jitter.std_normal();
        }
    }
    let mut data = rng.split("data");
    let n = spec.batch * spec.input_dim;
    let values: Vec<f64> = match spec.likelihood {
        Likelihood::Gaussian => (0..n).map(|_| data.std_normal()).collect(),
        Likelihood::Bernoulli => (0..n).map(|_| data.uniform()).collect(),
    };
    Ok((state, Matrix::new(spec.batch, spec.input_dim, values)?))
}

/// Compares analytic gradients against central differences of the bound
/// under replayed noise, coordinate by coordinate. `corrupt` lets callers
/// tamper with the analytic gradients to confirm the harness catches errors.
pub fn gradcheck(spec: &GradCheckSpec, corrupt: Option<&dyn Fn(&mut GradientSet)>) -> Result<GradCheckReport> {
    let (state, batch) = toy_problem(spec)?;
    check_state(&state, &batch, &spec.opts, spec.seed, spec.step, spec.tolerance, corrupt)
}

/// Gradient check of an arbitrary state and batch.
pub fn check_state(
    state: &ModelState,
    batch: &Matrix,
    opts: &BoundOptions,
    noise_seed: u64,
    h: f64,
    tolerance: f64,
    corrupt: Option<&dyn Fn(&mut GradientSet)>,
) -> Result<GradCheckReport> {
    let noise = draw_noise(state, batch.rows(), opts, &mut RngStream::new(noise_seed).split("noise"));
    let (_, mut grads) = evaluate(state, batch, opts, &noise)?;
    if let Some(f) = corrupt {
        f(&mut grads);
    }
    let analytic = grads.to_flat();
    let base = state.to_flat();
    let pattern = activation_pattern(state, batch, opts, &noise)?;

    let mut probe_state = state.clone();
    let mut failure = None;
    let mut f = |v: &[f64]| {
        probe_state.set_flat(v).expect("same layout");
        match evaluate_bound(&probe_state, batch, opts, &noise) {
            Ok(b) => b.total,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    };
    let mut kink_state = state.clone();
    let mut probe = base.clone();
    let mut blocks = Vec::new();
    let mut offset = 0;
    for (name, block) in state.blocks() {
        let mut report = BlockReport {
            name,
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for i in offset..offset + block.len() {
            let mut kinked = false;
            for sign in [-1.0, 1.0] {
                let mut v = base.clone();
                v[i] += sign * 10.0 * h;
                kink_state.set_flat(&v)?;
                kinked |= activation_pattern(&kink_state, batch, opts, &noise)? != pattern;
            }
            if kinked {
                report.skipped += 1;
                continue;
            }
            let numeric = central_difference(&mut f, &mut probe, i, h)?;
            report.max_rel_error = report.max_rel_error.max(relative_error(analytic[i], numeric, REL_ERROR_FLOOR));
            report.checked += 1;
        }
        offset += block.len();
        blocks.push(report);
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(GradCheckReport { tolerance, blocks })
}
