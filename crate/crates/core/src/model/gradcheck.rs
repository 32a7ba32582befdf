//! Central finite differences against the analytic backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerSpec, Model, ModelError, ModelSpec, Result};
use crate::nn::{init, softmax_cross_entropy};
use crate::tensor::{Real, Tensor};

/// Norm-wise relative error of one gradient tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Parameter name as in [`Model::named_params`], or `"input"`.
    pub name: String,
    pub rel_error: f64,
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn loss<T: Real>(model: &Model<T>, x: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let logits = model.forward(x)?;
    let out = softmax_cross_entropy(&logits, labels).map_err(|source| ModelError::Layer {
        index: model.layers.len(),
        kind: "softmax_cross_entropy",
        source,
    })?;
    Ok(out.loss.to_f64().unwrap_or(f64::NAN))
}

fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data()
        .iter()
        .map(|v| v.to_f64().unwrap_or(f64::NAN))
        .collect()
}

/// Compares the mean cross-entropy gradient of every parameter tensor, and
/// of the input, with central differences of step `h`.
pub fn check_gradients<T: Real>(
    model: &mut Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    h: f64,
) -> Result<Vec<GradCheck>> {
    let trace = model.forward_trace(x)?;
    let out = softmax_cross_entropy(&trace.logits, labels).map_err(|source| ModelError::Layer {
        index: model.layers.len(),
        kind: "softmax_cross_entropy",
        source,
    })?;
    let (dx, grads) = model.backward(&trace, &out.grad)?;
    let analytic: Vec<Vec<f64>> = grads
        .iter()
        .flat_map(|g| g.tensors.iter().map(to_f64))
        .collect();
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let step =
        T::from(h).ok_or_else(|| ModelError::Spec(format!("step {h} is not representable")))?;

    let mut checks = Vec::with_capacity(names.len() + 1);
    for (p, name) in names.into_iter().enumerate() {
        let len = model.params()[p].len();
        let mut numeric = Vec::with_capacity(len);
        for i in 0..len {
            let orig = model.params()[p].data()[i];
            model.params_mut()[p].data_mut()[i] = orig + step;
            let plus = loss(model, x, labels)?;
            model.params_mut()[p].data_mut()[i] = orig - step;
            let minus = loss(model, x, labels)?;
            model.params_mut()[p].data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        checks.push(GradCheck {
            name,
            rel_error: relative_error(&analytic[p], &numeric),
        });
    }

    let mut xp = x.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + step;
        let plus = loss(model, &xp, labels)?;
        xp.data_mut()[i] = orig - step;
        let minus = loss(model, &xp, labels)?;
        xp.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }
    checks.push(GradCheck {
        name: "input".into(),
        rel_error: relative_error(&to_f64(&dx), &numeric),
    });
    Ok(checks)
}

/// A small network holding one layer of every kind: dense and Tucker conv
/// (strided, padded), ReLU, 2x2 max pooling, flatten and linear.
pub fn covering_spec() -> ModelSpec {
    ModelSpec {
        input_shape: [2, 8, 8],
        classes: 3,
        layers: vec![
            LayerSpec::Conv {
                in_channels: 2,
                out_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
                ranks: None,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Conv {
                in_channels: 4,
                out_channels: 5,
                kernel: 3,
                stride: 2,
                padding: 1,
                ranks: Some([3, 2, 4, 3]),
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Linear {
                inputs: 20,
                outputs: 3,
            },
        ],
    }
}

/// Weight gain applied by [`covering_case`].
const GAIN: f64 = 2.5;

/// Model, batch of three inputs and labels for checking gradients on
/// [`covering_spec`]. Weights, cores and biases are scaled by 2.5 so that
/// activations keep roughly unit variance through the stack; with the plain
/// fan-in init, early-layer gradients sink towards f32 rounding of the loss.
pub fn covering_case<T: Real>(seed: u64) -> Result<(Model<T>, Tensor<T>, Vec<usize>)> {
    let mut model = Model::<f64>::build(&covering_spec(), seed)?;
    let scaled: Vec<bool> = model
        .named_params()
        .iter()
        .map(|(name, _)| !name.contains("factor"))
        .collect();
    for (t, scale) in model.params_mut().into_iter().zip(scaled) {
        if scale {
            t.data_mut().iter_mut().for_each(|v| *v *= GAIN);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100));
    let x: Tensor<f64> = init::uniform(&[3, 2, 8, 8], 1.0, &mut rng);
    let labels = (0..3).map(|_| rng.random_range(0..3)).collect();
    Ok((model.cast(), x.cast(), labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[3.0, 4.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn covering_spec_is_valid_and_complete() {
        let model = Model::<f64>::build(&covering_spec(), 0).unwrap();
        let mut kinds: Vec<&str> = model.layers.iter().map(|l| l.name()).collect();
        kinds.sort_unstable();
        kinds.dedup();
        assert_eq!(kinds.len(), 6, "{kinds:?}");
    }
}
