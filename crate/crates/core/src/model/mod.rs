//! Layer stacks built from a [`ModelSpec`], parameter accounting, the
//! dense-to-Tucker transform and the on-disk checkpoint format.

mod checkpoint;
pub mod gradcheck;
mod params;
mod spec;
mod tensorize;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{
    softmax_cross_entropy, DenseConvLayer, Layer, LayerError, LayerGrads, LinearLayer,
    TuckerConvLayer,
};
use crate::tensor::{Real, Tensor, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, TensorEntry, FORMAT_VERSION};
pub use params::{count_params, enumerate_params, ConvLayerCount, ParamReport};
pub use spec::{Activation, ClampNotice, LayerSpec, ModelSpec, RankConfig, STUDY_RANKS};
pub use tensorize::tensorize_pretrained;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("layer {index} ({kind}): {source}")]
    Layer {
        index: usize,
        kind: &'static str,
        source: LayerError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(
        "parameter count mismatch for {what}: closed form {closed_form}, enumerated {enumerated}"
    )]
    CountMismatch {
        what: &'static str,
        closed_form: usize,
        enumerated: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// An instantiated layer stack. `seed` is the initialization seed it was
/// built from, carried along for provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub spec: ModelSpec,
    pub seed: u64,
    pub layers: Vec<Layer<T>>,
}

/// Inputs of every layer from a forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    inputs: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
}

impl<T: Real> Model<T> {
    /// Validates `spec` and initializes every layer in order from one
    /// ChaCha8 stream seeded with `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (index, l) in spec.layers.iter().enumerate() {
            let layer = match *l {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ranks: None,
                } => Layer::Conv(DenseConvLayer::init(
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    &mut rng,
                )),
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ranks: Some(ranks),
                } => Layer::TuckerConv(
                    TuckerConvLayer::init(
                        in_channels,
                        out_channels,
                        kernel,
                        ranks,
                        stride,
                        padding,
                        &mut rng,
                    )
                    .map_err(|source| ModelError::Layer {
                        index,
                        kind: "tucker_conv",
                        source,
                    })?,
                ),
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool2 => Layer::MaxPool2,
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Linear { inputs, outputs } => {
                    Layer::Linear(LinearLayer::init(inputs, outputs, &mut rng))
                }
            };
            layers.push(layer);
        }
        Ok(Self {
            spec: spec.clone(),
            seed,
            layers,
        })
    }

    fn wrap(index: usize, layer: &Layer<T>) -> impl FnOnce(LayerError) -> ModelError + '_ {
        move |source| ModelError::Layer {
            index,
            kind: layer.name(),
            source,
        }
    }

    /// `(N, C, S, S)` batch to `(N, classes)` logits.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x).map_err(Self::wrap(i, layer))?;
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: &Tensor<T>) -> Result<ForwardTrace<T>> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&x).map_err(Self::wrap(i, layer))?;
            inputs.push(x);
            x = y;
        }
        Ok(ForwardTrace { inputs, logits: x })
    }

    /// Backpropagates `dlogits` through the stack, returning one
    /// [`LayerGrads`] per layer and the gradient w.r.t. the model input.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        dlogits: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<LayerGrads<T>>)> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = dlogits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (dx, g) = layer
                .backward(&trace.inputs[i], &upstream)
                .map_err(Self::wrap(i, layer))?;
            grads.push(g);
            upstream = dx;
        }
        grads.reverse();
        Ok((upstream, grads))
    }

    /// Like [`Model::backward`] without the model-input gradient, which
    /// spares the first layer's input pass.
    pub fn param_grads(
        &self,
        trace: &ForwardTrace<T>,
        dlogits: &Tensor<T>,
    ) -> Result<Vec<LayerGrads<T>>> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = dlogits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i == 0 {
                grads.push(
                    layer
                        .param_grads(&trace.inputs[0], &upstream)
                        .map_err(Self::wrap(i, layer))?,
                );
                break;
            }
            let (dx, g) = layer
                .backward(&trace.inputs[i], &upstream)
                .map_err(Self::wrap(i, layer))?;
            grads.push(g);
            upstream = dx;
        }
        grads.reverse();
        Ok(grads)
    }

    /// Mean cross-entropy and per-parameter gradients for one batch.
    pub fn loss_and_grads(
        &self,
        input: &Tensor<T>,
        labels: &[usize],
    ) -> Result<(T, Vec<LayerGrads<T>>)> {
        let trace = self.forward_trace(input)?;
        let out =
            softmax_cross_entropy(&trace.logits, labels).map_err(|source| ModelError::Layer {
                index: self.layers.len(),
                kind: "softmax_cross_entropy",
                source,
            })?;
        let grads = self.param_grads(&trace, &out.grad)?;
        Ok((out.loss, grads))
    }

    /// Probability of class 1 for each sample of the batch.
    pub fn predict_proba(&self, input: &Tensor<T>) -> Result<Vec<T>> {
        let logits = self.forward(input)?;
        let k = self.spec.classes;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
                (row[1] - max).exp() / sum
            })
            .collect())
    }

    /// Every trainable tensor as `("layers.{i}.{name}", tensor)`.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.named_params()
                    .into_iter()
                    .map(move |(name, t)| (format!("layers.{i}.{name}"), t))
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_len(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            seed: self.seed,
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }
}

/// Builds an f32 model, the training precision.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model<f32>> {
    Model::build(spec, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init;

    #[test]
    fn same_seed_same_parameters() {
        let spec = ModelSpec::reference(32);
        let a = build_model(&spec, 7).unwrap();
        let b = build_model(&spec, 7).unwrap();
        let c = build_model(&spec, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn reference_forward_shape() {
        let model = build_model(&ModelSpec::reference(64), 1).unwrap();
        let x = init::uniform(&[4, 3, 64, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(model.forward(&x).unwrap().shape(), &[4, 2]);
        let p = model.predict_proba(&x).unwrap();
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn full_rank_tucker_spec_has_same_logit_path() {
        let dense = ModelSpec::reference(32);
        let mut tucker = dense.clone();
        for l in &mut tucker.layers {
            if let LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ranks,
                ..
            } = l
            {
                *ranks = Some([*in_channels, *kernel, *out_channels, *kernel]);
            }
        }
        assert_eq!(dense.validate().unwrap(), tucker.validate().unwrap());
        let d = build_model(&dense, 3).unwrap();
        let t = build_model(&tucker, 3).unwrap();
        assert_eq!(d.layers.len(), t.layers.len());
        assert_ne!(d.params().len(), t.params().len());
    }

    #[test]
    fn backward_yields_grads_matching_param_shapes() {
        let (spec, _) = ModelSpec::reference(16).with_ranks(&RankConfig::new(8, 8, 3, 3));
        let model = Model::<f64>::build(&spec, 5).unwrap();
        let x = init::uniform(&[2, 3, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let (loss, grads) = model.loss_and_grads(&x, &[0, 1]).unwrap();
        assert!(loss.is_finite());
        let shapes: Vec<&[usize]> = grads
            .iter()
            .flat_map(|g| g.tensors.iter().map(Tensor::shape))
            .collect();
        let expected: Vec<&[usize]> = model.params().into_iter().map(Tensor::shape).collect();
        assert_eq!(shapes, expected);
    }
}
