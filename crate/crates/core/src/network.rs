//! Multi-layer perceptrons with ReLU hidden units and a Gaussian output head,
//! plus their hand-written backward pass.

use serde::{Deserialize, Serialize};

use crate::distributions::{clamp_log_var, clamp_log_var_grad, DiagGaussian};
use crate::error::{ArdError, Result};
use crate::numerics::{Matrix, RngStream};

/// Affine map `y = x Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul_nt(&self.weight)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Accumulates `∂/∂W = gᵀ x`, `∂/∂b = Σ g` into `grad`, returns `∂/∂x = g W`.
    fn backward(&self, x: &Matrix, g: &Matrix, grad: &mut Dense, need_input: bool) -> Result<Option<Matrix>> {
        let gw = g.matmul_tn(x)?;
        for (acc, v) in grad.weight.as_mut_slice().iter_mut().zip(gw.as_slice()) {
            *acc += v;
        }
        for row in g.row_iter() {
            for (acc, v) in grad.bias.iter_mut().zip(row) {
                *acc += v;
            }
        }
        if need_input {
            Ok(Some(g.matmul(&self.weight)?))
        } else {
            Ok(None)
        }
    }
}

/// Log-variance output of the Gaussian head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LogVarHead {
    /// Input-dependent affine map from the last hidden layer.
    Affine(Dense),
    /// One free log-variance per output unit, shared by every row.
    Shared(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub hidden: Vec<Dense>,
    pub mean_head: Dense,
    pub log_var_head: LogVarHead,
}

/// Layer sizes of an MLP: `input → hidden… → (output mean, output log-variance)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub shared_log_var: bool,
}

/// Per-row Gaussian outputs of an MLP head.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBatch {
    pub mean: Matrix,
    pub log_var: Matrix,
}

impl GaussianBatch {
    pub fn row(&self, r: usize) -> DiagGaussian {
        DiagGaussian::new(self.mean.row(r).to_vec(), self.log_var.row(r).to_vec())
            .expect("mean and log-variance rows have equal width")
    }
}

/// Activations recorded by [`mlp_forward`] for [`mlp_backward`].
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub input: Matrix,
    /// Pre-activation of every hidden layer.
    pub pre: Vec<Matrix>,
    /// ReLU output of every hidden layer.
    pub act: Vec<Matrix>,
    /// Log-variance head output before clamping.
    pub raw_log_var: Matrix,
}

impl ForwardTape {
    fn last_hidden(&self) -> &Matrix {
        self.act.last().unwrap_or(&self.input)
    }

    /// Sign pattern of every hidden pre-activation, used to detect ReLU kinks.
    pub fn relu_pattern(&self) -> impl Iterator<Item = bool> + '_ {
        self.pre.iter().flat_map(|m| m.as_slice().iter().map(|&v| v > 0.0))
    }
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.hidden
            .first()
            .map_or(self.mean_head.input_dim(), Dense::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.mean_head.output_dim()
    }

    /// The weight matrix that reads the network input directly.
    pub fn first_weight(&self) -> &Matrix {
        self.hidden.first().map_or(&self.mean_head.weight, |l| &l.weight)
    }

    pub fn zeros_like(&self) -> MlpParams {
        MlpParams {
            hidden: self
                .hidden
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            mean_head: Dense::zeros(self.mean_head.input_dim(), self.mean_head.output_dim()),
            log_var_head: match &self.log_var_head {
                LogVarHead::Affine(l) => LogVarHead::Affine(Dense::zeros(l.input_dim(), l.output_dim())),
                LogVarHead::Shared(v) => LogVarHead::Shared(vec![0.0; v.len()]),
            },
        }
    }

    /// Named parameter blocks in canonical order.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (k, layer) in self.hidden.iter().enumerate() {
            out.push((format!("hidden{k}.weight"), layer.weight.as_slice()));
            out.push((format!("hidden{k}.bias"), layer.bias.as_slice()));
        }
        out.push(("mean_head.weight".to_string(), self.mean_head.weight.as_slice()));
        out.push(("mean_head.bias".to_string(), self.mean_head.bias.as_slice()));
        match &self.log_var_head {
            LogVarHead::Affine(l) => {
                out.push(("log_var_head.weight".to_string(), l.weight.as_slice()));
                out.push(("log_var_head.bias".to_string(), l.bias.as_slice()));
            }
            LogVarHead::Shared(v) => out.push(("log_var_shared".to_string(), v.as_slice())),
        }
        out
    }

    /// Mutable blocks, same order as [`MlpParams::blocks`].
    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.hidden {
            out.push(layer.weight.as_mut_slice());
            out.push(layer.bias.as_mut_slice());
        }
        out.push(self.mean_head.weight.as_mut_slice());
        out.push(self.mean_head.bias.as_mut_slice());
        match &mut self.log_var_head {
            LogVarHead::Affine(l) => {
                out.push(l.weight.as_mut_slice());
                out.push(l.bias.as_mut_slice());
            }
            LogVarHead::Shared(v) => out.push(v.as_mut_slice()),
        }
        out
    }
}

/// Weights `~ N(0, 1/fan_in)`, biases zero, log-variance head zero so the
/// initial output variance is one everywhere.
pub fn init_params(spec: &MlpSpec, rng: &mut RngStream) -> Result<MlpParams> {
    if spec.input == 0 || spec.output == 0 || spec.hidden.contains(&0) {
        return Err(ArdError::Precondition(format!(
            "layer sizes must be positive, got input {}, hidden {:?}, output {}",
            spec.input, spec.hidden, spec.output
        )));
    }
    let mut dense = |input: usize, output: usize| {
        let mut layer = Dense::zeros(input, output);
        let scale = (1.0 / input as f64).sqrt();
        for w in layer.weight.as_mut_slice() {
            *w = scale * rng.std_normal();
        }
        layer
    };
    let mut hidden = Vec::with_capacity(spec.hidden.len());
    let mut fan_in = spec.input;
    for &h in &spec.hidden {
        hidden.push(dense(fan_in, h));
        fan_in = h;
    }
    let mean_head = dense(fan_in, spec.output);
    let log_var_head = if spec.shared_log_var {
        LogVarHead::Shared(vec![0.0; spec.output])
    } else {
        LogVarHead::Affine(Dense::zeros(fan_in, spec.output))
    };
    Ok(MlpParams {
        hidden,
        mean_head,
        log_var_head,
    })
}

pub fn mlp_forward(params: &MlpParams, input: &Matrix) -> Result<(GaussianBatch, ForwardTape)> {
    if input.cols() != params.input_dim() {
        return Err(ArdError::Dimension {
            context: "mlp_forward input width",
            expected: params.input_dim(),
            found: input.cols(),
        });
    }
    let mut pre = Vec::with_capacity(params.hidden.len());
    let mut act: Vec<Matrix> = Vec::with_capacity(params.hidden.len());
    for layer in &params.hidden {
        let z = layer.forward(act.last().unwrap_or(input))?;
        act.push(z.map(|v| v.max(0.0)));
        pre.push(z);
    }
    let last = act.last().unwrap_or(input);
    let mean = params.mean_head.forward(last)?;
    let raw_log_var = match &params.log_var_head {
        LogVarHead::Affine(l) => l.forward(last)?,
        LogVarHead::Shared(v) => {
            let mut m = Matrix::zeros(input.rows(), v.len());
            for r in 0..input.rows() {
                m.row_mut(r).copy_from_slice(v);
            }
            m
        }
    };
    let log_var = raw_log_var.map(clamp_log_var);
    let tape = ForwardTape {
        input: input.clone(),
        pre,
        act,
        raw_log_var,
    };
    Ok((GaussianBatch { mean, log_var }, tape))
}

/// Backpropagates head-output gradients of a scalar objective.
///
/// `grad_log_var` is taken with respect to the clamped log-variance; entries
/// whose raw value fell outside the clamp contribute nothing. Returns
/// parameter gradients shaped like `params` and the gradient with respect to
/// the input rows.
pub fn mlp_backward(
    params: &MlpParams,
    tape: &ForwardTape,
    grad_mean: &Matrix,
    grad_log_var: &Matrix,
) -> Result<(MlpParams, Matrix)> {
    let rows = tape.input.rows();
    let out_shape = (rows, params.output_dim());
    if tape.pre.len() != params.hidden.len() {
        return Err(ArdError::Dimension {
            context: "mlp_backward tape length",
            expected: params.hidden.len(),
            found: tape.pre.len(),
        });
    }
    for g in [grad_mean, grad_log_var] {
        if g.shape() != out_shape {
            return Err(ArdError::Shape {
                op: "mlp_backward head gradient",
                left: g.shape(),
                right: out_shape,
            });
        }
    }

    let mut grads = params.zeros_like();
    let last = tape.last_hidden();
    let need_hidden_grad = true;
    let mut g_hidden = params
        .mean_head
        .backward(last, grad_mean, &mut grads.mean_head, need_hidden_grad)?
        .expect("requested");

    let mut g_lv = grad_log_var.clone();
    for (g, raw) in g_lv.as_mut_slice().iter_mut().zip(tape.raw_log_var.as_slice()) {
        *g *= clamp_log_var_grad(*raw);
    }
    match (&params.log_var_head, &mut grads.log_var_head) {
        (LogVarHead::Affine(layer), LogVarHead::Affine(acc)) => {
            let extra = layer.backward(last, &g_lv, acc, true)?.expect("requested");
            for (a, b) in g_hidden.as_mut_slice().iter_mut().zip(extra.as_slice()) {
                *a += b;
            }
        }
        (LogVarHead::Shared(_), LogVarHead::Shared(acc)) => {
            for row in g_lv.row_iter() {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        _ => unreachable!("zeros_like preserves the head kind"),
    }

    for k in (0..params.hidden.len()).rev() {
        for (g, z) in g_hidden.as_mut_slice().iter_mut().zip(tape.pre[k].as_slice()) {
            if *z <= 0.0 {
                *g = 0.0;
            }
        }
        let input = if k == 0 { &tape.input } else { &tape.act[k - 1] };
        g_hidden = params.hidden[k]
            .backward(input, &g_hidden, &mut grads.hidden[k], true)?
            .expect("requested");
    }
    Ok((grads, g_hidden))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, sample_std_gaussian};

    fn spec(input: usize, hidden: &[usize], output: usize) -> MlpSpec {
        MlpSpec {
            input,
            hidden: hidden.to_vec(),
            output,
            shared_log_var: false,
        }
    }

    fn random_matrix(rng: &mut RngStream, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, sample_std_gaussian(rng, r * c).unwrap()).unwrap()
    }

    /// Randomizes every parameter, including the zero-initialized ones.
    fn randomize(params: &mut MlpParams, rng: &mut RngStream) {
        for block in params.blocks_mut() {
            for v in block {
                *v = 0.5 * rng.std_normal();
            }
        }
    }

    #[test]
    fn zero_network_outputs_standard_gaussian() {
        let params = init_params(&spec(4, &[5], 3), &mut RngStream::new(0)).unwrap();
        let zero = params.zeros_like();
        let x = random_matrix(&mut RngStream::new(1), 6, 4);
        let (out, _) = mlp_forward(&zero, &x).unwrap();
        assert!(out.mean.as_slice().iter().all(|&v| v == 0.0));
        assert!(out.log_var.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_without_hidden_layers_is_affine() {
        let mut rng = RngStream::new(2);
        let mut params = init_params(&spec(3, &[], 3), &mut rng).unwrap();
        params.mean_head.weight = Matrix::identity(3);
        params.mean_head.bias = vec![1.0, 2.0, 3.0];
        let x = Matrix::from_rows(&[[0.5, -1.0, 2.0]]).unwrap();
        let (out, _) = mlp_forward(&params, &x).unwrap();
        assert_eq!(out.mean.row(0), &[1.5, 1.0, 5.0]);
    }

    /// Independently coded forward pass: one datapoint at a time with explicit loops.
    fn reference_forward(params: &MlpParams, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let affine = |layer: &Dense, v: &[f64]| -> Vec<f64> {
            (0..layer.output_dim())
                .map(|o| {
                    let mut s = layer.bias[o];
                    for i in 0..layer.input_dim() {
                        s += layer.weight.get(o, i) * v[i];
                    }
                    s
                })
                .collect()
        };
        let mut h = x.to_vec();
        for layer in &params.hidden {
            h = affine(layer, &h).into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect();
        }
        let mean = affine(&params.mean_head, &h);
        let lv = match &params.log_var_head {
            LogVarHead::Affine(l) => affine(l, &h),
            LogVarHead::Shared(v) => v.clone(),
        };
        (mean, lv.into_iter().map(clamp_log_var).collect())
    }

    #[test]
    fn forward_matches_reference_implementation() {
        let mut rng = RngStream::new(3);
        let mut params = init_params(&spec(6, &[8], 3), &mut rng).unwrap();
        randomize(&mut params, &mut rng);
        let x = random_matrix(&mut rng, 5, 6);
        let (out, _) = mlp_forward(&params, &x).unwrap();
        for r in 0..5 {
            let (m, lv) = reference_forward(&params, x.row(r));
            for d in 0..3 {
                assert!((m[d] - out.mean.get(r, d)).abs() < 1e-12);
                assert!((lv[d] - out.log_var.get(r, d)).abs() < 1e-12);
            }
        }
        let (again, _) = mlp_forward(&params, &x).unwrap();
        assert_eq!(again.mean, out.mean);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let params = init_params(&spec(4, &[5], 2), &mut RngStream::new(0)).unwrap();
        assert!(mlp_forward(&params, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = RngStream::new(4);
        let params = init_params(&spec(4, &[5], 2), &mut rng).unwrap();
        let x = random_matrix(&mut rng, 3, 4);
        let (_, tape) = mlp_forward(&params, &x).unwrap();
        let (g, gx) = mlp_backward(&params, &tape, &Matrix::zeros(3, 2), &Matrix::zeros(3, 2)).unwrap();
        assert!(g.blocks().iter().all(|(_, b)| b.iter().all(|&v| v == 0.0)));
        assert!(gx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_quadratic_loss_has_residual_form_gradient() {
        // L = ½ Σ‖x W + b − y‖² on a 2×2 problem: ∂L/∂W = rᵀ x, ∂L/∂b = Σ r with r = ŷ − y
        let mut params = init_params(&spec(2, &[], 2), &mut RngStream::new(0)).unwrap();
        params.mean_head.weight = Matrix::from_rows(&[[1.0, 2.0], [0.5, -1.0]]).unwrap();
        params.mean_head.bias = vec![0.1, -0.2];
        let x = Matrix::from_rows(&[[1.0, 0.0], [2.0, 3.0]]).unwrap();
        let y = Matrix::from_rows(&[[1.0, 1.0], [0.0, 2.0]]).unwrap();
        let (out, tape) = mlp_forward(&params, &x).unwrap();
        let mut r = out.mean.clone();
        for (a, b) in r.as_mut_slice().iter_mut().zip(y.as_slice()) {
            *a -= b;
        }
        let (g, _) = mlp_backward(&params, &tape, &r, &Matrix::zeros(2, 2)).unwrap();
        // hand computed: ŷ = [[1.1, 0.3], [8.1, -2.2]], r = [[0.1, -0.7], [8.1, -4.2]]
        let expected_w = [[0.1 + 16.2, 24.3], [-0.7 - 8.4, -12.6]];
        for o in 0..2 {
            for i in 0..2 {
                assert!((g.mean_head.weight.get(o, i) - expected_w[o][i]).abs() < 1e-12);
            }
        }
        assert!((g.mean_head.bias[0] - 8.2).abs() < 1e-12);
        assert!((g.mean_head.bias[1] + 4.9).abs() < 1e-12);
    }

    /// Scalar objective Σ (a ⊙ mean) + Σ (c ⊙ log_var) with fixed random coefficients.
    fn check_backward(input: usize, hidden: &[usize], output: usize, shared: bool, seed: u64) {
        let mut rng = RngStream::new(seed);
        let mut params = init_params(
            &MlpSpec {
                input,
                hidden: hidden.to_vec(),
                output,
                shared_log_var: shared,
            },
            &mut rng,
        )
        .unwrap();
        randomize(&mut params, &mut rng);
        let rows = 3;
        let x = random_matrix(&mut rng, rows, input);
        let a = random_matrix(&mut rng, rows, output);
        let c = random_matrix(&mut rng, rows, output);
        let objective = |p: &MlpParams, x: &Matrix| {
            let (out, _) = mlp_forward(p, x).unwrap();
            let s1: f64 = out.mean.as_slice().iter().zip(a.as_slice()).map(|(u, v)| u * v).sum();
            let s2: f64 = out.log_var.as_slice().iter().zip(c.as_slice()).map(|(u, v)| u * v).sum();
            s1 + s2
        };
        let (_, tape) = mlp_forward(&params, &x).unwrap();
        let (grads, gx) = mlp_backward(&params, &tape, &a, &c).unwrap();
        let h = 1e-5;
        let pattern: Vec<bool> = tape.relu_pattern().collect();
        let kink_free = |p: &MlpParams, x: &Matrix| {
            let (_, t) = mlp_forward(p, x).unwrap();
            t.relu_pattern().eq(pattern.iter().copied())
        };

        let flat: Vec<f64> = params.blocks().iter().flat_map(|(_, b)| b.to_vec()).collect();
        let analytic: Vec<f64> = grads.blocks().iter().flat_map(|(_, b)| b.to_vec()).collect();
        let rebuild = |v: &[f64]| {
            let mut p = params.clone();
            let mut off = 0;
            for block in p.blocks_mut() {
                block.copy_from_slice(&v[off..off + block.len()]);
                off += block.len();
            }
            p
        };
        let numeric = finite_diff_grad(|v| objective(&rebuild(v), &x), &flat, h).unwrap();
        for i in 0..flat.len() {
            let mut hi = flat.clone();
            hi[i] += 10.0 * h;
            let mut lo = flat.clone();
            lo[i] -= 10.0 * h;
            if !kink_free(&rebuild(&hi), &x) || !kink_free(&rebuild(&lo), &x) {
                continue;
            }
            let e = relative_error(analytic[i], numeric[i], 1e-3);
            assert!(e < 1e-4, "param {i}: {} vs {}", analytic[i], numeric[i]);
        }
        let numeric_x = finite_diff_grad(
            |v| objective(&params, &Matrix::new(rows, input, v.to_vec()).unwrap()),
            x.as_slice(),
            h,
        )
        .unwrap();
        for i in 0..numeric_x.len() {
            let e = relative_error(gx.as_slice()[i], numeric_x[i], 1e-3);
            assert!(e < 1e-4, "input {i}: {} vs {}", gx.as_slice()[i], numeric_x[i]);
        }
    }

    #[test]
    fn backward_matches_finite_differences_across_architectures() {
        let mut seed = 100;
        for input in [4, 6] {
            for hidden in [5, 8] {
                for latent in [2, 3] {
                    check_backward(input, &[hidden], latent, false, seed);
                    seed += 1;
                }
            }
        }
        check_backward(5, &[], 3, true, 7);
        check_backward(5, &[6, 4], 2, true, 8);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let s = MlpSpec {
            input: 4,
            hidden: vec![8],
            output: 2,
            shared_log_var: false,
        };
        let a = init_params(&s, &mut RngStream::new(5)).unwrap();
        let b = init_params(&s, &mut RngStream::new(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.hidden[0].bias.iter().all(|&v| v == 0.0));
        assert!(a.mean_head.bias.iter().all(|&v| v == 0.0));
        assert!(init_params(&spec(0, &[3], 2), &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn init_weight_variance_scales_with_fan_in() {
        let p = init_params(&spec(100, &[400], 1), &mut RngStream::new(6)).unwrap();
        let w = p.hidden[0].weight.as_slice();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 0.01).abs() < 0.003, "{var}");
    }
}
