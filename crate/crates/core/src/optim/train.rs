use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{clip_gradient, rmsprop_step, RmsPropState, StepOutcome};
use crate::analysis::{retained_count, RunMetrics};
use crate::config::{LambdaUpdate, OptimizerKind, TrainConfig};
use crate::data::{Dataset, MinibatchState, MinibatchStream};
use crate::error::{ArdError, Result};
use crate::models::{
    draw_noise, evaluate, evaluate_bound, evaluate_chunked, lambda_closed_form_update, BoundOptions, ModelState,
    TestScoreWindow,
};
use crate::numerics::{RngState, RngStream};

/// Everything besides parameters and optimizer buffers that a resumed run
/// needs to continue exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLoopState {
    pub iteration: u64,
    pub batches: MinibatchState,
    pub shuffle_rng: RngState,
    pub noise_rng: RngState,
    pub eval_rng: RngState,
    pub test_window: TestScoreWindow,
    pub rejected_steps: u64,
    pub clipped_steps: u64,
    pub wall_clock_s: f64,
}

/// Owns the model, optimizer and data for one run and advances it one
/// minibatch at a time.
pub struct Trainer {
    config: TrainConfig,
    model: ModelState,
    opt: RmsPropState,
    train: Dataset,
    test: Option<Dataset>,
    opts: BoundOptions,
    batches: MinibatchStream,
    noise_rng: RngStream,
    eval_rng: RngStream,
    test_window: TestScoreWindow,
    iteration: u64,
    rejected_steps: u64,
    clipped_steps: u64,
    clock_offset: f64,
    started: Instant,
}

fn check_dims(model: &ModelState, train: &Dataset, test: Option<&Dataset>) -> Result<()> {
    for d in std::iter::once(train).chain(test) {
        if d.dim() != model.data_dim() {
            return Err(ArdError::Dimension {
                context: "dataset width vs model data dimension",
                expected: model.data_dim(),
                found: d.dim(),
            });
        }
    }
    Ok(())
}

impl Trainer {
    /// Fresh run. Initialization, shuffling, noise and test evaluation each
    /// draw from their own substream of `config.seed`.
    pub fn new(config: TrainConfig, train: Dataset, test: Option<Dataset>) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(config.seed);
        let model = ModelState::init(&config.model_spec(train.dim()), &mut root.split("init"))?;
        check_dims(&model, &train, test.as_ref())?;
        let n = model.num_params();
        let opt = match config.optimizer {
            OptimizerKind::Rmsprop => {
                RmsPropState::new(n, config.learning_rate, config.rms_decay, config.momentum, config.epsilon)
            }
            OptimizerKind::Sgd => RmsPropState::sgd(n, config.learning_rate),
        };
        let batches = MinibatchStream::new(train.len(), config.batch_size, root.split("shuffle"))?;
        Ok(Self {
            opts: Self::bound_options(&config, train.len()),
            test_window: TestScoreWindow::new(config.score_window)?,
            config,
            model,
            opt,
            train,
            test,
            batches,
            noise_rng: root.split("noise"),
            eval_rng: root.split("eval"),
            iteration: 0,
            rejected_steps: 0,
            clipped_steps: 0,
            clock_offset: 0.0,
            started: Instant::now(),
        })
    }

    /// Continues a run from saved state.
    pub fn resume(
        config: TrainConfig,
        train: Dataset,
        test: Option<Dataset>,
        model: ModelState,
        opt: RmsPropState,
        state: TrainLoopState,
    ) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        check_dims(&model, &train, test.as_ref())?;
        if opt.len() != model.num_params() {
            return Err(ArdError::Dimension {
                context: "optimizer state vs parameter count",
                expected: model.num_params(),
                found: opt.len(),
            });
        }
        let batches = MinibatchStream::restore(
            train.len(),
            config.batch_size,
            RngStream::from_state(&state.shuffle_rng)?,
            state.batches,
        )?;
        Ok(Self {
            opts: Self::bound_options(&config, train.len()),
            config,
            model,
            opt,
            train,
            test,
            batches,
            noise_rng: RngStream::from_state(&state.noise_rng)?,
            eval_rng: RngStream::from_state(&state.eval_rng)?,
            test_window: state.test_window,
            iteration: state.iteration,
            rejected_steps: state.rejected_steps,
            clipped_steps: state.clipped_steps,
            clock_offset: state.wall_clock_s,
            started: Instant::now(),
        })
    }

    fn bound_options(config: &TrainConfig, n_train: usize) -> BoundOptions {
        BoundOptions {
            n_w: config.n_w,
            n_z: config.n_z,
            kl_w_scale: config.kl_w_scale(n_train),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn optimizer(&self) -> &RmsPropState {
        &self.opt
    }

    pub fn bound_opts(&self) -> &BoundOptions {
        &self.opts
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn total_iterations(&self) -> u64 {
        self.config.total_iterations(self.train.len())
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.total_iterations()
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn test_set(&self) -> Option<&Dataset> {
        self.test.as_ref()
    }

    /// Mean of the trailing window of test evaluations.
    pub fn test_score(&self) -> Option<f64> {
        self.test_window.mean()
    }

    pub fn into_model(self) -> ModelState {
        self.model
    }

    pub fn loop_state(&self) -> TrainLoopState {
        TrainLoopState {
            iteration: self.iteration,
            batches: self.batches.state().clone(),
            shuffle_rng: self.batches.rng().state(),
            noise_rng: self.noise_rng.state(),
            eval_rng: self.eval_rng.state(),
            test_window: self.test_window.clone(),
            rejected_steps: self.rejected_steps,
            clipped_steps: self.clipped_steps,
            wall_clock_s: self.wall_clock(),
        }
    }

    fn wall_clock(&self) -> f64 {
        self.clock_offset + self.started.elapsed().as_secs_f64()
    }

    /// One minibatch: evaluate, optionally clip, update, and log. The logged
    /// bound is the minibatch bound at the parameters before the update.
    pub fn step(&mut self) -> Result<RunMetrics> {
        let idx = self.batches.next_indices();
        let batch = self.train.x.select_rows(&idx);
        let noise = draw_noise(&self.model, batch.rows(), &self.opts, &mut self.noise_rng);
        let (bound, mut grads) = if self.config.deterministic {
            evaluate(&self.model, &batch, &self.opts, &noise)?
        } else {
            let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
            evaluate_chunked(&self.model, &batch, &self.opts, &noise, threads)?
        };
        let grad_norm = grads.norm();
        let clipped = match self.config.grad_clip {
            Some(max) => clip_gradient(&mut grads, max),
            None => false,
        };
        if clipped {
            self.clipped_steps += 1;
        }
        let closed_form = self.config.lambda_update == LambdaUpdate::ClosedForm;
        if closed_form {
            if let Some(g) = grads.ard.as_mut() {
                g.log_lambda.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        match rmsprop_step(&mut self.opt, &mut self.model, &grads)? {
            StepOutcome::Applied => {
                if closed_form {
                    if let Some(ard) = self.model.ard.as_mut() {
                        ard.log_lambda = lambda_closed_form_update(ard).iter().map(|l| l.ln()).collect();
                    }
                }
            }
            StepOutcome::Rejected => self.rejected_steps += 1,
        }
        self.iteration += 1;

        let test_bound = match &self.test {
            Some(test) if self.iteration.is_multiple_of(self.config.eval_every) => {
                let noise = draw_noise(&self.model, test.len(), &self.opts, &mut self.eval_rng);
                let b = evaluate_bound(&self.model, &test.x, &self.opts, &noise)?;
                self.test_window.push(b.total);
                self.test_window.mean()
            }
            _ => None,
        };
        Ok(RunMetrics {
            iteration: self.iteration,
            epoch: self.batches.epoch(),
            bound_total: bound.total,
            bound_recon: bound.recon,
            bound_kl_z: bound.kl_z,
            bound_kl_w: bound.kl_w,
            bound_per_pixel: bound.total / self.model.data_dim() as f64,
            test_bound,
            retained_count: retained_count(
                &self.model,
                self.config.retention_rule(),
                self.config.retention_threshold,
            )?,
            grad_norm,
            rejected_steps: self.rejected_steps,
            clipped,
            wall_clock_s: self.wall_clock(),
        })
    }

    /// Steps until `total_iterations`, handing each row to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&Trainer, &RunMetrics) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            let row = self.step()?;
            on_step(self, &row)?;
        }
        Ok(())
    }
}

/// Trains from scratch and returns the final model with every metrics row.
pub fn train(config: TrainConfig, train: Dataset, test: Option<Dataset>) -> Result<(ModelState, Vec<RunMetrics>)> {
    let mut trainer = Trainer::new(config, train, test)?;
    let mut rows = Vec::with_capacity(trainer.total_iterations() as usize);
    trainer.run(|_, row| {
        rows.push(row.clone());
        Ok(())
    })?;
    Ok((trainer.into_model(), rows))
}
