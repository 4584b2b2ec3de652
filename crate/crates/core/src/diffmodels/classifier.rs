//! Softmax classifier evaluation: stabilised log-likelihoods, exact
//! reverse-mode gradients, and input-space gradients for adversarial
//! perturbation.

use rayon::prelude::*;

use super::{Dataset, Example, Model, ModelSpec, ParameterVector};
use crate::error::{CoreError, Result};

/// Fixed chunk width for parallel reductions over examples. Chunk boundaries
/// (not thread count) determine summation order, so results are identical
/// across `--threads` settings.
pub(crate) const REDUCE_CHUNK: usize = 64;

/// Stable `log(sum(exp(v)))`.
fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

struct Forward {
    /// Pre-activations per layer, `zs[i]` has the width of layer `i+1`.
    zs: Vec<Vec<f64>>,
    /// Post-activations per hidden layer (same indexing as `zs`, minus the
    /// final logits layer which has no activation).
    activations: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn check_dims(spec: &ModelSpec, params: &[f64], z: &Example) -> Result<()> {
    spec.validate()?;
    if z.input.len() != spec.input_dim {
        return Err(CoreError::DimensionMismatch {
            axis: "input".into(),
            expected: spec.input_dim,
            got: z.input.len(),
        });
    }
    if z.label >= spec.num_classes {
        return Err(CoreError::DimensionMismatch {
            axis: "label".into(),
            expected: spec.num_classes,
            got: z.label,
        });
    }
    if params.len() != spec.param_count() {
        return Err(CoreError::DimensionMismatch {
            axis: "params".into(),
            expected: spec.param_count(),
            got: params.len(),
        });
    }
    Ok(())
}

fn forward(spec: &ModelSpec, params: &[f64], input: &[f64]) -> Result<Forward> {
    let dims = spec.dims();
    let n_layers = dims.len() - 1;
    let mut zs = Vec::with_capacity(n_layers);
    let mut activations = Vec::with_capacity(n_layers.saturating_sub(1));
    let mut offset = 0usize;
    let mut current: Vec<f64> = input.to_vec();
    for layer in 0..n_layers {
        let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
        let w = &params[offset..offset + fan_in * fan_out];
        let b = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let mut z = vec![0.0; fan_out];
        for (r, zr) in z.iter_mut().enumerate() {
            let row = &w[r * fan_in..(r + 1) * fan_in];
            let mut acc = b[r];
            for (wv, xv) in row.iter().zip(current.iter()) {
                acc += wv * xv;
            }
            *zr = acc;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                context: format!("layer w{} pre-activation", layer + 1),
            });
        }
        if layer + 1 < n_layers {
            let a: Vec<f64> = match spec.activation {
                super::Activation::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
                super::Activation::Tanh => z.iter().map(|&v| v.tanh()).collect(),
            };
            current = a.clone();
            zs.push(z);
            activations.push(a);
        } else {
            zs.push(z.clone());
            return Ok(Forward {
                zs,
                activations,
                logits: z,
            });
        }
    }
    unreachable!("model has at least one layer");
}

fn activation_derivative(spec: &ModelSpec, z: f64) -> f64 {
    match spec.activation {
        super::Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        super::Activation::Tanh => {
            let t = z.tanh();
            1.0 - t * t
        }
    }
}

/// Backpropagates `d log p / d logits` through the network, writing parameter
/// gradients into `grad` (same flat layout as `params`) and returning the
/// gradient with respect to the input.
fn backward(
    spec: &ModelSpec,
    params: &[f64],
    input: &[f64],
    fwd: &Forward,
    dlogits: Vec<f64>,
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    let dims = spec.dims();
    let n_layers = dims.len() - 1;

    // Parameter offsets per layer.
    let mut offsets = Vec::with_capacity(n_layers);
    let mut offset = 0usize;
    for layer in 0..n_layers {
        offsets.push(offset);
        offset += dims[layer] * dims[layer + 1] + dims[layer + 1];
    }

    let mut dz = dlogits;
    for layer in (0..n_layers).rev() {
        let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
        let off = offsets[layer];
        let w = &params[off..off + fan_in * fan_out];
        let a_prev: &[f64] = if layer == 0 {
            input
        } else {
            &fwd.activations[layer - 1]
        };
        {
            let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for r in 0..fan_out {
                let d = dz[r];
                gb[r] += d;
                let row = &mut gw[r * fan_in..(r + 1) * fan_in];
                for (g, &a) in row.iter_mut().zip(a_prev) {
                    *g += d * a;
                }
            }
        }
        // d(loglik)/d(a_prev) = W^T dz, then through the activation.
        let mut da = vec![0.0; fan_in];
        for r in 0..fan_out {
            let d = dz[r];
            let row = &w[r * fan_in..(r + 1) * fan_in];
            for (dai, &wv) in da.iter_mut().zip(row) {
                *dai += d * wv;
            }
        }
        if layer == 0 {
            return Ok(da);
        }
        let z_prev = &fwd.zs[layer - 1];
        for (dai, &zv) in da.iter_mut().zip(z_prev) {
            *dai *= activation_derivative(spec, zv);
        }
        if da.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                context: format!("layer w{} backward signal", layer),
            });
        }
        dz = da;
    }
    unreachable!("loop returns at layer 0");
}

/// Log of the softmax probability of the observed label: always `<= 0`,
/// finite under log-sum-exp stabilisation.
pub fn log_likelihood(spec: &ModelSpec, params: &ParameterVector, z: &Example) -> Result<f64> {
    check_dims(spec, &params.values, z)?;
    let fwd = forward(spec, &params.values, &z.input)?;
    Ok(fwd.logits[z.label] - log_sum_exp(&fwd.logits))
}

/// Exact gradient of [`log_likelihood`] with respect to the parameters,
/// returned in the same flat layout.
pub fn grad_log_likelihood(
    spec: &ModelSpec,
    params: &ParameterVector,
    z: &Example,
) -> Result<ParameterVector> {
    check_dims(spec, &params.values, z)?;
    let grad = grad_flat(spec, &params.values, z)?;
    Ok(ParameterVector {
        values: grad,
        layout: params.layout.clone(),
    })
}

fn grad_flat(spec: &ModelSpec, params: &[f64], z: &Example) -> Result<Vec<f64>> {
    let fwd = forward(spec, params, &z.input)?;
    let mut grad = vec![0.0; params.len()];
    let dlogits = dlogits_for_label(&fwd.logits, z.label);
    backward(spec, params, &z.input, &fwd, dlogits, &mut grad)?;
    Ok(grad)
}

/// `d log p(y|x,theta) / d logits = onehot(y) - softmax(logits)`.
fn dlogits_for_label(logits: &[f64], label: usize) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    let mut d: Vec<f64> = logits.iter().map(|&l| -((l - lse).exp())).collect();
    d[label] += 1.0;
    d
}

/// Gradient of the negative log-likelihood with respect to the input vector.
pub fn input_grad(spec: &ModelSpec, params: &ParameterVector, z: &Example) -> Result<Vec<f64>> {
    check_dims(spec, &params.values, z)?;
    let fwd = forward(spec, &params.values, &z.input)?;
    let dlogits = dlogits_for_label(&fwd.logits, z.label);
    let mut sink = vec![0.0; params.values.len()];
    let dx = backward(spec, &params.values, &z.input, &fwd, dlogits, &mut sink)?;
    Ok(dx.into_iter().map(|v| -v).collect())
}

/// Negative log-likelihood of a batch and its gradient, both summed over
/// examples. Accumulation runs over fixed-size chunks in index order, so the
/// result is identical however many worker threads execute.
pub fn batch_loss_grad(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &Dataset,
) -> Result<(f64, ParameterVector)> {
    if batch.is_empty() {
        return Err(CoreError::EmptyData {
            context: "batch_loss_grad".into(),
        });
    }
    let (loss, grad) = sum_loss_grad(spec, &params.values, batch.examples())?;
    Ok((
        loss,
        ParameterVector {
            values: grad,
            layout: params.layout.clone(),
        },
    ))
}

/// Shared chunked reduction used by training and Fisher accumulation:
/// `(sum of NLL, gradient of that sum)` over a slice of examples.
pub(crate) fn sum_loss_grad(
    spec: &ModelSpec,
    params: &[f64],
    examples: &[Example],
) -> Result<(f64, Vec<f64>)> {
    let chunks: Vec<(f64, Vec<f64>)> = examples
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| -> Result<(f64, Vec<f64>)> {
            let mut loss = 0.0;
            let mut grad = vec![0.0; params.len()];
            for z in chunk {
                check_dims(spec, params, z)?;
                let fwd = forward(spec, params, &z.input)?;
                loss -= fwd.logits[z.label] - log_sum_exp(&fwd.logits);
                let dlogits = dlogits_for_label(&fwd.logits, z.label);
                // NLL gradient = -(log-likelihood gradient).
                let neg: Vec<f64> = dlogits.iter().map(|v| -v).collect();
                backward(spec, params, &z.input, &fwd, neg, &mut grad)?;
            }
            Ok((loss, grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total_loss = 0.0;
    let mut total_grad = vec![0.0; params.len()];
    for (l, g) in chunks {
        total_loss += l;
        for (t, gi) in total_grad.iter_mut().zip(&g) {
            *t += gi;
        }
    }
    Ok((total_loss, total_grad))
}

/// Softmax class probabilities: non-negative, summing to one within 1e-12.
pub fn predict(spec: &ModelSpec, params: &ParameterVector, input: &[f64]) -> Result<Vec<f64>> {
    predict_flat(spec, &params.values, input)
}

fn predict_flat(spec: &ModelSpec, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    if input.len() != spec.input_dim {
        return Err(CoreError::DimensionMismatch {
            axis: "input".into(),
            expected: spec.input_dim,
            got: input.len(),
        });
    }
    if params.len() != spec.param_count() {
        return Err(CoreError::DimensionMismatch {
            axis: "params".into(),
            expected: spec.param_count(),
            got: params.len(),
        });
    }
    let fwd = forward(spec, params, input)?;
    let lse = log_sum_exp(&fwd.logits);
    let mut probs: Vec<f64> = fwd.logits.iter().map(|&l| (l - lse).exp()).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}

impl Model for ModelSpec {
    fn param_count(&self) -> usize {
        ModelSpec::param_count(self)
    }

    fn log_likelihood(&self, params: &[f64], z: &Example) -> Result<f64> {
        check_dims(self, params, z)?;
        let fwd = forward(self, params, &z.input)?;
        Ok(fwd.logits[z.label] - log_sum_exp(&fwd.logits))
    }

    fn grad_log_likelihood(&self, params: &[f64], z: &Example) -> Result<Vec<f64>> {
        check_dims(self, params, z)?;
        grad_flat(self, params, z)
    }

    fn predict(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        predict_flat(self, params, input)
    }
}
