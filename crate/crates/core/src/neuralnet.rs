//! Minimal fully-connected feed-forward network with rectifier activations,
//! batch normalization on the input, reverse-mode gradients and Adam.
//!
//! Parameters live in one flat vector ordered [weights row-major per layer |
//! biases per layer | batchnorm scale | batchnorm shift]; the running
//! batchnorm statistics are data, not trainable parameters, and are kept
//! separately. All reductions are performed in a fixed order, so forward and
//! gradient evaluation are bit-deterministic for fixed inputs.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

const BN_EPS: f64 = 1e-5;
/// Momentum for the running batchnorm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Network shape: layer sizes N_0..N_L with rectifier activations between
/// affine maps (none after the last) and optional input batch normalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub layer_sizes: Vec<usize>,
    pub input_batchnorm: bool,
}

impl Architecture {
    /// `hidden_layers` hidden layers of width `hidden` between `input` and
    /// `output` units.
    pub fn mlp(
        input: usize,
        output: usize,
        hidden: usize,
        hidden_layers: usize,
        batchnorm: bool,
    ) -> Self {
        let mut sizes = Vec::with_capacity(hidden_layers + 2);
        sizes.push(input);
        sizes.extend(std::iter::repeat_n(hidden, hidden_layers));
        sizes.push(output);
        Architecture {
            layer_sizes: sizes,
            input_batchnorm: batchnorm,
        }
    }

    /// Number of affine maps L.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// P(N) = sum_l N_l N_{l-1} + N_l.
    pub fn param_count(&self) -> usize {
        self.weights_len() + self.biases_len()
    }

    fn weights_len(&self) -> usize {
        (1..self.layer_sizes.len())
            .map(|l| self.layer_sizes[l] * self.layer_sizes[l - 1])
            .sum()
    }

    fn biases_len(&self) -> usize {
        self.layer_sizes[1..].iter().sum()
    }

    /// Length of the trainable vector (P(N) plus batchnorm scale/shift).
    pub fn trainable_len(&self) -> usize {
        self.param_count()
            + if self.input_batchnorm {
                2 * self.input_dim()
            } else {
                0
            }
    }

    /// Offset of weight matrix l (1-based) in the flat vector.
    fn weight_offset(&self, l: usize) -> usize {
        (1..l)
            .map(|k| self.layer_sizes[k] * self.layer_sizes[k - 1])
            .sum()
    }

    fn bias_offset(&self, l: usize) -> usize {
        self.weights_len() + self.layer_sizes[1..l].iter().sum::<usize>()
    }

    fn bn_gamma_offset(&self) -> usize {
        self.param_count()
    }

    fn bn_beta_offset(&self) -> usize {
        self.param_count() + self.input_dim()
    }
}

/// Trainable parameters plus batchnorm running statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkParams {
    pub trainable: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl NetworkParams {
    /// Rectifier-scaled normal initialization (variance 2/fan_in) for the
    /// hidden layers, zero biases, unit batchnorm scale. The output layer
    /// starts at zero so an untrained network is exactly the zero control
    /// and training descends from the uncontrolled variance.
    pub fn init(arch: &Architecture, rng: &mut ChaCha8Rng) -> Self {
        let mut trainable = vec![0.0; arch.trainable_len()];
        for l in 1..arch.depth() {
            let fan_in = arch.layer_sizes[l - 1];
            let sd = (2.0 / fan_in as f64).sqrt();
            let off = arch.weight_offset(l);
            let len = arch.layer_sizes[l] * fan_in;
            for w in &mut trainable[off..off + len] {
                let g: f64 = rng.sample(StandardNormal);
                *w = g * sd;
            }
        }
        if arch.input_batchnorm {
            let off = arch.bn_gamma_offset();
            for g in &mut trainable[off..off + arch.input_dim()] {
                *g = 1.0;
            }
        }
        NetworkParams {
            trainable,
            running_mean: vec![
                0.0;
                if arch.input_batchnorm {
                    arch.input_dim()
                } else {
                    0
                }
            ],
            running_var: vec![
                1.0;
                if arch.input_batchnorm {
                    arch.input_dim()
                } else {
                    0
                }
            ],
        }
    }

    pub fn matches(&self, arch: &Architecture) -> bool {
        self.trainable.len() == arch.trainable_len()
            && self.running_mean.len()
                == if arch.input_batchnorm {
                    arch.input_dim()
                } else {
                    0
                }
    }
}

/// Per-feature input statistics of one minibatch (population variance).
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Column means and population variances of a batch of inputs.
pub fn batch_input_stats(inputs: ArrayView2<f64>) -> BnStats {
    let n = inputs.nrows().max(1) as f64;
    let mean = inputs.sum_axis(Axis(0)) / n;
    let mut var = Array1::<f64>::zeros(inputs.ncols());
    for row in inputs.outer_iter() {
        for (j, &x) in row.iter().enumerate() {
            let d = x - mean[j];
            var[j] += d * d;
        }
    }
    var /= n;
    BnStats {
        mean: mean.to_vec(),
        var: var.to_vec(),
    }
}

/// Batchnorm source: batch statistics while training, running statistics at
/// inference time.
#[derive(Clone, Copy)]
pub enum BnMode<'a> {
    Inference,
    Training(&'a BnStats),
}

struct ForwardCache {
    /// Inputs to each affine layer: a_0 (post-batchnorm input) through
    /// a_{L-1} (post-rectifier hidden activations).
    activations: Vec<Array2<f64>>,
    /// Normalized inputs before scale/shift, for batchnorm gradients.
    normalized: Option<Array2<f64>>,
}

fn apply_batchnorm(
    arch: &Architecture,
    params: &NetworkParams,
    inputs: ArrayView2<f64>,
    bn: BnMode,
) -> (Array2<f64>, Option<Array2<f64>>) {
    if !arch.input_batchnorm {
        return (inputs.to_owned(), None);
    }
    let (mean, var): (&[f64], &[f64]) = match bn {
        BnMode::Inference => (&params.running_mean, &params.running_var),
        BnMode::Training(stats) => (&stats.mean, &stats.var),
    };
    let d = arch.input_dim();
    let gamma = &params.trainable[arch.bn_gamma_offset()..arch.bn_gamma_offset() + d];
    let beta = &params.trainable[arch.bn_beta_offset()..arch.bn_beta_offset() + d];
    let mut normalized = inputs.to_owned();
    for mut row in normalized.outer_iter_mut() {
        for j in 0..d {
            row[j] = (row[j] - mean[j]) / (var[j] + BN_EPS).sqrt();
        }
    }
    let mut out = normalized.clone();
    for mut row in out.outer_iter_mut() {
        for j in 0..d {
            row[j] = gamma[j] * row[j] + beta[j];
        }
    }
    (out, Some(normalized))
}

fn weight_view<'a>(arch: &Architecture, params: &'a [f64], l: usize) -> ArrayView2<'a, f64> {
    let rows = arch.layer_sizes[l];
    let cols = arch.layer_sizes[l - 1];
    let off = arch.weight_offset(l);
    ArrayView2::from_shape((rows, cols), &params[off..off + rows * cols]).unwrap()
}

fn forward_impl(
    arch: &Architecture,
    params: &NetworkParams,
    inputs: ArrayView2<f64>,
    bn: BnMode,
    keep_cache: bool,
) -> (Array2<f64>, Option<ForwardCache>) {
    assert_eq!(
        inputs.ncols(),
        arch.input_dim(),
        "input width must match N_0"
    );
    let depth = arch.depth();
    let (a0, normalized) = apply_batchnorm(arch, params, inputs, bn);
    let mut activations = Vec::with_capacity(if keep_cache { depth } else { 1 });
    let mut a = a0;
    for l in 1..=depth {
        let w = weight_view(arch, &params.trainable, l);
        let boff = arch.bias_offset(l);
        let bias = &params.trainable[boff..boff + arch.layer_sizes[l]];
        let mut z = a.dot(&w.t());
        for mut row in z.outer_iter_mut() {
            for (zj, bj) in row.iter_mut().zip(bias) {
                *zj += bj;
            }
        }
        if keep_cache {
            activations.push(a);
        }
        if l < depth {
            z.mapv_inplace(|v| v.max(0.0));
        }
        a = z;
    }
    let cache = keep_cache.then_some(ForwardCache {
        activations,
        normalized,
    });
    (a, cache)
}

/// Forward pass: batch of inputs (rows) to batch of outputs.
pub fn forward(
    arch: &Architecture,
    params: &NetworkParams,
    inputs: ArrayView2<f64>,
    bn: BnMode,
) -> Array2<f64> {
    forward_impl(arch, params, inputs, bn, false).0
}

/// Forward pass plus exact reverse-mode gradient of a scalar loss supplied
/// as `loss(outputs) -> (value, d loss / d outputs)`. The gradient is
/// accumulated into `grad` (layout of the trainable vector).
pub fn loss_and_grad<L>(
    arch: &Architecture,
    params: &NetworkParams,
    inputs: ArrayView2<f64>,
    bn: BnMode,
    loss: L,
    grad: &mut [f64],
) -> f64
where
    L: FnOnce(&Array2<f64>) -> (f64, Array2<f64>),
{
    let (out, cache) = forward_impl(arch, params, inputs, bn, true);
    let cache = cache.expect("cache requested");
    let (value, grad_out) = loss(&out);
    backward(arch, params, &cache, grad_out, grad);
    value
}

fn backward(
    arch: &Architecture,
    params: &NetworkParams,
    cache: &ForwardCache,
    grad_out: Array2<f64>,
    grad: &mut [f64],
) {
    assert_eq!(grad.len(), arch.trainable_len());
    let depth = arch.depth();
    let mut dz = grad_out;
    for l in (1..=depth).rev() {
        let a_prev = &cache.activations[l - 1];
        // dW_l = dZ^T A_{l-1}
        let dw = dz.t().dot(a_prev);
        let woff = arch.weight_offset(l);
        for (g, d) in grad[woff..woff + dw.len()].iter_mut().zip(dw.iter()) {
            *g += d;
        }
        let db = dz.sum_axis(Axis(0));
        let boff = arch.bias_offset(l);
        for (g, d) in grad[boff..boff + db.len()].iter_mut().zip(db.iter()) {
            *g += d;
        }
        if l > 1 {
            let w = weight_view(arch, &params.trainable, l);
            let mut da = dz.dot(&w);
            // Rectifier gate: activation > 0 iff pre-activation > 0.
            for (mut row, arow) in da.outer_iter_mut().zip(a_prev.outer_iter()) {
                for (dv, &av) in row.iter_mut().zip(arow.iter()) {
                    if av <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            dz = da;
        } else if arch.input_batchnorm {
            let w = weight_view(arch, &params.trainable, 1);
            let da0 = dz.dot(&w);
            let xhat = cache.normalized.as_ref().expect("batchnorm cache");
            let d = arch.input_dim();
            let goff = arch.bn_gamma_offset();
            let boff2 = arch.bn_beta_offset();
            for (da_row, xhat_row) in da0.outer_iter().zip(xhat.outer_iter()) {
                for j in 0..d {
                    grad[goff + j] += da_row[j] * xhat_row[j];
                    grad[boff2 + j] += da_row[j];
                }
            }
        }
    }
}

/// Fold one minibatch's statistics into the running statistics.
pub fn update_running_stats(params: &mut NetworkParams, stats: &BnStats) {
    for (r, b) in params.running_mean.iter_mut().zip(&stats.mean) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
    for (r, b) in params.running_var.iter_mut().zip(&stats.var) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
}

/// Adam accumulator state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub stabilizer: f64,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            stabilizer: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.first_moment.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: params {} grad {} state {}",
            params.len(),
            grad.len(),
            state.first_moment.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let m = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * grad[i];
        let v = state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let mhat = m / bc1;
        let vhat = v / bc2;
        params[i] -= state.learning_rate * mhat / (vhat.sqrt() + state.stabilizer);
    }
    Ok(())
}
