use serde::{Deserialize, Serialize};

use super::{LayerSpec, Model, ModelError, ModelSpec, Result};
use crate::nn::Layer;
use crate::tensor::Real;

/// Weight counts of one convolution layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerCount {
    pub layer: usize,
    /// `(C, W, T, H)`.
    pub dims: [usize; 4],
    pub ranks: Option<[usize; 4]>,
    /// `C * W * T * H`.
    pub dense: usize,
    /// Stored weight entries: `dense` for a dense layer, factors plus core for a Tucker layer.
    pub stored: usize,
    pub compression_ratio: f64,
}

/// Parameter accounting for a whole model.
///
/// `n_c` counts dense-equivalent conv weights, `n_c_f` the conv weights
/// actually stored, `n_b` conv biases and `n_r` the linear classifier
/// (weights and bias).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub n_c: usize,
    pub n_c_f: usize,
    pub n_b: usize,
    pub n_r: usize,
    pub n_cnn: usize,
    pub n_tcnn: usize,
    pub compression_ratio: f64,
    pub layers: Vec<ConvLayerCount>,
}

fn tucker_weight_count(dims: [usize; 4], ranks: [usize; 4]) -> usize {
    dims.iter().zip(&ranks).map(|(d, r)| d * r).sum::<usize>() + ranks.iter().product::<usize>()
}

impl ParamReport {
    fn assemble(n_b: usize, n_r: usize, layers: Vec<ConvLayerCount>) -> Self {
        let n_c = layers.iter().map(|l| l.dense).sum();
        let n_c_f = layers.iter().map(|l| l.stored).sum();
        Self {
            n_c,
            n_c_f,
            n_b,
            n_r,
            n_cnn: n_c + n_b + n_r,
            n_tcnn: n_c_f + n_b + n_r,
            compression_ratio: ratio(n_c, n_c_f),
            layers,
        }
    }

    /// Counts from the layer descriptions alone.
    pub fn closed_form(spec: &ModelSpec) -> Self {
        let mut layers = Vec::new();
        let (mut n_b, mut n_r) = (0, 0);
        for (idx, l) in spec.layers.iter().enumerate() {
            match *l {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ranks,
                    ..
                } => {
                    let dims = [in_channels, kernel, out_channels, kernel];
                    let dense = dims.iter().product();
                    let stored = ranks.map_or(dense, |r| tucker_weight_count(dims, r));
                    n_b += out_channels;
                    layers.push(ConvLayerCount {
                        layer: idx,
                        dims,
                        ranks,
                        dense,
                        stored,
                        compression_ratio: ratio(dense, stored),
                    });
                }
                LayerSpec::Linear { inputs, outputs } => n_r += inputs * outputs + outputs,
                _ => {}
            }
        }
        Self::assemble(n_b, n_r, layers)
    }

    /// Text table with one row per conv layer and a total row.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:>5}  {:>18}  {:>18}  {:>9}  {:>9}  {:>7}\n",
            "layer", "dims (C,W,T,H)", "ranks", "dense", "stored", "C_r"
        );
        for l in &self.layers {
            let ranks = l
                .ranks
                .map_or_else(|| "-".to_string(), |r| format!("{r:?}"));
            out += &format!(
                "{:>5}  {:>18}  {:>18}  {:>9}  {:>9}  {:>7.2}\n",
                l.layer,
                format!("{:?}", l.dims),
                ranks,
                l.dense,
                l.stored,
                l.compression_ratio
            );
        }
        out += &format!(
            "{:>5}  {:>18}  {:>18}  {:>9}  {:>9}  {:>7.2}\n",
            "total", "", "", self.n_c, self.n_c_f, self.compression_ratio
        );
        out += &format!(
            "N_b={} N_r={} N_CNN={} N_TCNN={}\n",
            self.n_b, self.n_r, self.n_cnn, self.n_tcnn
        );
        out
    }
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        1.0
    } else {
        n as f64 / d as f64
    }
}

/// Counts by walking the stored parameter buffers. The dense-equivalent size
/// of a Tucker layer is the length of its assembled kernel.
pub fn enumerate_params<T: Real>(model: &Model<T>) -> Result<ParamReport> {
    let mut layers = Vec::new();
    let (mut n_b, mut n_r) = (0, 0);
    for (idx, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::Conv(l) => {
                let s = l.weight.shape();
                n_b += l.bias.len();
                layers.push(ConvLayerCount {
                    layer: idx,
                    dims: [s[0], s[1], s[2], s[3]],
                    ranks: None,
                    dense: l.weight.len(),
                    stored: l.weight.len(),
                    compression_ratio: 1.0,
                });
            }
            Layer::TuckerConv(l) => {
                let dense = l.kernel().map_err(|source| ModelError::Layer {
                    index: idx,
                    kind: "tucker_conv",
                    source,
                })?;
                let stored =
                    l.factors.core.len() + l.factors.factors.iter().map(|f| f.len()).sum::<usize>();
                n_b += l.bias.len();
                let s = dense.shape();
                layers.push(ConvLayerCount {
                    layer: idx,
                    dims: [s[0], s[1], s[2], s[3]],
                    ranks: Some(l.factors.ranks()),
                    dense: dense.len(),
                    stored,
                    compression_ratio: ratio(dense.len(), stored),
                });
            }
            Layer::Linear(l) => n_r += l.weight.len() + l.bias.len(),
            Layer::Relu | Layer::MaxPool2 | Layer::Flatten => {}
        }
    }
    Ok(ParamReport::assemble(n_b, n_r, layers))
}

/// Closed-form counts, checked against [`enumerate_params`].
pub fn count_params<T: Real>(model: &Model<T>) -> Result<ParamReport> {
    let closed = ParamReport::closed_form(&model.spec);
    let seen = enumerate_params(model)?;
    let pairs = [
        ("N_c", closed.n_c, seen.n_c),
        ("N_c_f", closed.n_c_f, seen.n_c_f),
        ("N_b", closed.n_b, seen.n_b),
        ("N_r", closed.n_r, seen.n_r),
        ("N_CNN", closed.n_cnn, seen.n_cnn),
        ("N_TCNN", closed.n_tcnn, seen.n_tcnn),
    ];
    for (what, closed_form, enumerated) in pairs {
        if closed_form != enumerated {
            return Err(ModelError::CountMismatch {
                what,
                closed_form,
                enumerated,
            });
        }
    }
    if seen.n_tcnn != model.param_len() {
        return Err(ModelError::CountMismatch {
            what: "N_TCNN vs trainable tensors",
            closed_form: seen.n_tcnn,
            enumerated: model.param_len(),
        });
    }
    Ok(closed)
}
