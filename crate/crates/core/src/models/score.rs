use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{draw_noise, evaluate_bound, BoundBreakdown, BoundOptions, ModelState};
use crate::error::{ArdError, Result};
use crate::numerics::{Matrix, RngStream};

/// Trailing window of test-set bound evaluations. Single-sample bounds are
/// noisy, so the reported test score is the mean over the last `window` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestScoreWindow {
    window: usize,
    values: VecDeque<f64>,
}

impl TestScoreWindow {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(ArdError::Precondition("test score window must be >= 1".into()));
        }
        Ok(Self {
            window,
            values: VecDeque::with_capacity(window),
        })
    }

    pub fn push(&mut self, value: f64) {
        if self.values.len() == self.window {
            self.values.pop_front();
        }
        self.values.push_back(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.values.is_empty()).then(|| self.values.iter().sum::<f64>() / self.values.len() as f64)
    }
}

/// Mean of the trailing `window` entries of a sequence of test bounds.
pub fn estimate_test_score(test_bounds: &[f64], window: usize) -> Result<f64> {
    if window == 0 {
        return Err(ArdError::Precondition("window must be >= 1".into()));
    }
    if test_bounds.is_empty() {
        return Err(ArdError::Precondition("no test-set evaluations".into()));
    }
    let tail = &test_bounds[test_bounds.len().saturating_sub(window)..];
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// `repeats` independent stochastic evaluations of the bound on all of `x`,
/// each with fresh noise from `rng`.
pub fn repeated_bounds(
    state: &ModelState,
    x: &Matrix,
    opts: &BoundOptions,
    repeats: usize,
    rng: &mut RngStream,
) -> Result<Vec<BoundBreakdown>> {
    if repeats == 0 {
        return Err(ArdError::Precondition("window must be >= 1".into()));
    }
    (0..repeats)
        .map(|_| {
            let noise = draw_noise(state, x.rows(), opts, rng);
            evaluate_bound(state, x, opts, &noise)
        })
        .collect()
}

/// Sample mean and standard error of the mean.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_examples() {
        assert_eq!(estimate_test_score(&[3.0, 1.0, 7.5], 1).unwrap(), 7.5);
        assert_eq!(estimate_test_score(&[2.0; 40], 10).unwrap(), 2.0);
        let seq: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(estimate_test_score(&seq, 100).unwrap(), 50.5);
        assert!(estimate_test_score(&[], 3).is_err());
        assert!(estimate_test_score(&[1.0], 0).is_err());
    }

    #[test]
    fn running_window_matches_batch_estimate() {
        let seq: Vec<f64> = (0..250).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut w = TestScoreWindow::new(100).unwrap();
        for (n, &v) in seq.iter().enumerate() {
            w.push(v);
            let expected = estimate_test_score(&seq[..=n], 100).unwrap();
            assert!((w.mean().unwrap() - expected).abs() < 1e-12);
        }
        assert_eq!(w.len(), 100);
    }

    #[test]
    fn standard_error_of_known_sample() {
        let (m, se) = mean_and_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample variance 5/3, divided by n = 4
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_and_stderr(&[7.0]), (7.0, 0.0));
    }
}
