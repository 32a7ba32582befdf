//! Layer forward/backward passes.
//!
//! Every layer is immutable during a pass: `forward` maps an input batch to
//! an output batch, `backward` takes the same input plus the loss gradient
//! w.r.t. the output and returns the input gradient and one gradient per
//! parameter tensor, in [`Layer::params`] order.

mod conv;
pub mod init;
mod linear;
mod loss;
mod simple;
mod tucker_conv;

use thiserror::Error;

use crate::tensor::{Real, Tensor, TensorError};

pub use conv::DenseConvLayer;
pub use linear::LinearLayer;
pub use loss::{softmax_cross_entropy, LossOutput};
pub use simple::{
    flatten_backward, flatten_forward, maxpool2x2_backward, maxpool2x2_forward, relu_backward,
    relu_forward,
};
pub use tucker_conv::TuckerConvLayer;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error("expected shape {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("expected a rank-{expected} input, got rank {actual}")]
    Rank { expected: usize, actual: usize },
    #[error("layer expects {expected} input channels, got {actual}")]
    Channels { expected: usize, actual: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("invalid layer configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LayerError>;

pub(crate) fn check_shape(expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected != actual {
        return Err(LayerError::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}

/// Gradients of one layer's parameters, one tensor per entry of
/// [`Layer::params`] with identical shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> LayerGrads<T> {
    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(DenseConvLayer<T>),
    TuckerConv(TuckerConvLayer<T>),
    Relu,
    MaxPool2,
    Flatten,
    Linear(LinearLayer<T>),
}

impl<T: Real> Layer<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::TuckerConv(_) => "tucker_conv",
            Layer::Relu => "relu",
            Layer::MaxPool2 => "maxpool2",
            Layer::Flatten => "flatten",
            Layer::Linear(_) => "linear",
        }
    }

    /// Trainable tensors with their local names, in a fixed order.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::Conv(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::TuckerConv(l) => vec![
                ("core", &l.factors.core),
                ("factor0", &l.factors.factors[0]),
                ("factor1", &l.factors.factors[1]),
                ("factor2", &l.factors.factors[2]),
                ("factor3", &l.factors.factors[3]),
                ("bias", &l.bias),
            ],
            Layer::Linear(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::Relu | Layer::MaxPool2 | Layer::Flatten => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::TuckerConv(l) => {
                let [f0, f1, f2, f3] = &mut l.factors.factors;
                vec![&mut l.factors.core, f0, f1, f2, f3, &mut l.bias]
            }
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Relu | Layer::MaxPool2 | Layer::Flatten => Vec::new(),
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.forward(input),
            Layer::TuckerConv(l) => l.forward(input),
            Layer::Relu => Ok(relu_forward(input)),
            Layer::MaxPool2 => maxpool2x2_forward(input),
            Layer::Flatten => flatten_forward(input),
            Layer::Linear(l) => l.forward(input),
        }
    }

    pub fn backward(
        &self,
        input: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<(Tensor<T>, LayerGrads<T>)> {
        let (dx, grads) = self.backward_impl(input, upstream, true)?;
        Ok((dx.expect("input gradient requested"), grads))
    }

    /// Parameter gradients alone; conv layers then skip the input gradient.
    pub fn param_grads(&self, input: &Tensor<T>, upstream: &Tensor<T>) -> Result<LayerGrads<T>> {
        Ok(self.backward_impl(input, upstream, false)?.1)
    }

    fn backward_impl(
        &self,
        input: &Tensor<T>,
        upstream: &Tensor<T>,
        need_input: bool,
    ) -> Result<(Option<Tensor<T>>, LayerGrads<T>)> {
        let (dx, tensors) = match self {
            Layer::Conv(l) => l.backward(input, upstream, need_input)?,
            Layer::TuckerConv(l) => l.backward(input, upstream, need_input)?,
            Layer::Relu => (Some(relu_backward(input, upstream)?), Vec::new()),
            Layer::MaxPool2 => (Some(maxpool2x2_backward(input, upstream)?), Vec::new()),
            Layer::Flatten => (Some(flatten_backward(input, upstream)?), Vec::new()),
            Layer::Linear(l) => {
                let (dx, g) = l.backward(input, upstream)?;
                (Some(dx), g)
            }
        };
        Ok((dx, LayerGrads { tensors }))
    }

    pub fn cast<U: Real>(&self) -> Layer<U> {
        match self {
            Layer::Conv(l) => Layer::Conv(DenseConvLayer {
                weight: l.weight.cast(),
                bias: l.bias.cast(),
                stride: l.stride,
                padding: l.padding,
            }),
            Layer::TuckerConv(l) => Layer::TuckerConv(TuckerConvLayer {
                factors: l.factors.cast(),
                bias: l.bias.cast(),
                stride: l.stride,
                padding: l.padding,
            }),
            Layer::Relu => Layer::Relu,
            Layer::MaxPool2 => Layer::MaxPool2,
            Layer::Flatten => Layer::Flatten,
            Layer::Linear(l) => Layer::Linear(LinearLayer {
                weight: l.weight.cast(),
                bias: l.bias.cast(),
            }),
        }
    }
}
