//! rmsProp with momentum and the minibatch training loop.
//!
//! All updates are gradient *ascent* on the bound.

mod train;

use serde::{Deserialize, Serialize};

use crate::config::OptimizerKind;
use crate::error::{ArdError, Result};
use crate::models::{GradientSet, ModelState};

pub use train::{train, TrainLoopState, Trainer};

/// Per-parameter accumulators plus hyperparameters. The buffers are flat and
/// follow the block order of [`ModelState::blocks`].
///
/// ```text
/// ms  ← ρ·ms + (1 − ρ)·g²
/// mom ← γ·mom + lr·g / √(ms + ε)
/// p   ← p + mom
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsPropState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub decay: f64,
    pub momentum: f64,
    pub epsilon: f64,
    pub ms: Vec<f64>,
    pub mom: Vec<f64>,
}

/// What happened to a proposed update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The update would have produced a non-finite parameter; nothing changed.
    Rejected,
}

impl RmsPropState {
    pub fn new(num_params: usize, learning_rate: f64, decay: f64, momentum: f64, epsilon: f64) -> Self {
        Self {
            kind: OptimizerKind::Rmsprop,
            learning_rate,
            decay,
            momentum,
            epsilon,
            ms: vec![0.0; num_params],
            mom: vec![0.0; num_params],
        }
    }

    /// Plain gradient ascent `p ← p + lr·g`. Accumulators stay at zero.
    pub fn sgd(num_params: usize, learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::new(num_params, learning_rate, 0.0, 0.0, 1.0)
        }
    }

    pub fn len(&self) -> usize {
        self.ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ms.is_empty()
    }
}

/// Applies one optimizer update to `params` in place.
///
/// A non-finite gradient is an error naming its block. An update that would
/// make any parameter non-finite is dropped and reported as
/// [`StepOutcome::Rejected`], leaving parameters and accumulators untouched.
pub fn rmsprop_step(opt: &mut RmsPropState, params: &mut ModelState, grads: &GradientSet) -> Result<StepOutcome> {
    grads.validate_finite()?;
    let g = grads.to_flat();
    if g.len() != opt.len() || params.num_params() != opt.len() {
        return Err(ArdError::Dimension {
            context: "optimizer state vs parameter count",
            expected: opt.len(),
            found: g.len(),
        });
    }
    let mut p = params.to_flat();
    let (mut ms, mut mom) = (opt.ms.clone(), opt.mom.clone());
    match opt.kind {
        OptimizerKind::Rmsprop => {
            let (rho, gamma, lr, eps) = (opt.decay, opt.momentum, opt.learning_rate, opt.epsilon);
            for i in 0..p.len() {
                ms[i] = rho * ms[i] + (1.0 - rho) * g[i] * g[i];
                mom[i] = gamma * mom[i] + lr * g[i] / (ms[i] + eps).sqrt();
                p[i] += mom[i];
            }
        }
        OptimizerKind::Sgd => {
            for (pi, gi) in p.iter_mut().zip(&g) {
                *pi += opt.learning_rate * gi;
            }
        }
    }
    if p.iter().chain(&mom).chain(&ms).any(|v| !v.is_finite()) {
        return Ok(StepOutcome::Rejected);
    }
    params.set_flat(&p)?;
    opt.ms = ms;
    opt.mom = mom;
    Ok(StepOutcome::Applied)
}

/// Rescales `grads` to norm `max_norm` if it is longer. Returns whether it did.
pub fn clip_gradient(grads: &mut GradientSet, max_norm: f64) -> bool {
    let norm = grads.norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
        true
    } else {
        false
    }
}
