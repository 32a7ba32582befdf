use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

/// One entry of a layer stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Square-kernel convolution. `ranks` present means Tucker-factorized with
    /// per-mode ranks in `(C, W, T, H)` order.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ranks: Option<[usize; 4]>,
    },
    Relu,
    #[serde(rename = "maxpool2")]
    MaxPool2,
    Flatten,
    Linear {
        inputs: usize,
        outputs: usize,
    },
}

/// Declarative network description: input shape `(channels, height, width)`,
/// a layer stack, and the number of output classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Rank upper bounds `(r_in, r_out, h, w)` shared by every factorized conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankConfig {
    pub r_in: usize,
    pub r_out: usize,
    pub h: usize,
    pub w: usize,
}

/// Records a bound that was larger than the layer dimension it applies to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClampNotice {
    pub layer: usize,
    pub mode: &'static str,
    pub requested: usize,
    pub used: usize,
}

impl std::fmt::Display for ClampNotice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "layer {}: {} rank {} clamped to {}",
            self.layer, self.mode, self.requested, self.used
        )
    }
}

impl RankConfig {
    pub fn new(r_in: usize, r_out: usize, h: usize, w: usize) -> Self {
        Self { r_in, r_out, h, w }
    }

    /// Parses `"r_in,r_out,h,w"`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| ModelError::Spec(format!("bad rank list {s:?}: {e}")))?;
        match parts[..] {
            [r_in, r_out, h, w] => {
                let rc = Self::new(r_in, r_out, h, w);
                rc.validate()?;
                Ok(rc)
            }
            _ => Err(ModelError::Spec(format!(
                "rank list {s:?} must have four entries r_in,r_out,h,w"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.r_in, self.r_out, self.h, self.w].contains(&0) {
            return Err(ModelError::Spec("rank bounds must be positive".into()));
        }
        Ok(())
    }

    /// Per-mode ranks `(chi1, chi2, chi3, chi4)` for a `(C, W, T, H)` kernel.
    pub fn layer_ranks(&self, dims: [usize; 4]) -> [usize; 4] {
        let [c, w, t, h] = dims;
        [
            self.r_in.min(c),
            self.w.min(w),
            self.r_out.min(t),
            self.h.min(h),
        ]
    }

    pub fn label(&self) -> String {
        format!("({}, {}, {}, {})", self.r_in, self.r_out, self.h, self.w)
    }
}

impl std::fmt::Display for RankConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.r_in, self.r_out, self.h, self.w)
    }
}

/// The five rank configurations of the compression study, largest first.
pub const STUDY_RANKS: [RankConfig; 5] = [
    RankConfig {
        r_in: 96,
        r_out: 96,
        h: 3,
        w: 3,
    },
    RankConfig {
        r_in: 64,
        r_out: 64,
        h: 3,
        w: 3,
    },
    RankConfig {
        r_in: 32,
        r_out: 32,
        h: 3,
        w: 3,
    },
    RankConfig {
        r_in: 16,
        r_out: 16,
        h: 3,
        w: 3,
    },
    RankConfig {
        r_in: 8,
        r_out: 8,
        h: 3,
        w: 3,
    },
];

/// Shape flowing between layers while validating a spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
    Flat(usize),
}

impl ModelSpec {
    /// Four conv/relu/pool stages with 32, 64, 96 and 128 channels, then a
    /// linear classifier. 3x3 kernels, stride 1, padding 1, 2x2 pools.
    pub fn reference(image_size: usize) -> Self {
        let mut layers = Vec::new();
        let mut c_in = 3;
        for c_out in [32, 64, 96, 128] {
            layers.push(LayerSpec::Conv {
                in_channels: c_in,
                out_channels: c_out,
                kernel: 3,
                stride: 1,
                padding: 1,
                ranks: None,
            });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool2);
            c_in = c_out;
        }
        let side = image_size / 16;
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Linear {
            inputs: 128 * side * side,
            outputs: 2,
        });
        Self {
            input_shape: [3, image_size, image_size],
            classes: 2,
            layers,
        }
    }

    /// Same stack with every conv layer factorized at the clamped ranks.
    pub fn with_ranks(&self, ranks: &RankConfig) -> (Self, Vec<ClampNotice>) {
        let mut notices = Vec::new();
        let mut out = self.clone();
        for (idx, layer) in out.layers.iter_mut().enumerate() {
            if let LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ranks: r,
                ..
            } = layer
            {
                let dims = [*in_channels, *kernel, *out_channels, *kernel];
                let chi = ranks.layer_ranks(dims);
                let requested = [ranks.r_in, ranks.w, ranks.r_out, ranks.h];
                for (m, name) in ["r_in", "w", "r_out", "h"].iter().enumerate() {
                    if requested[m] > dims[m] {
                        notices.push(ClampNotice {
                            layer: idx,
                            mode: name,
                            requested: requested[m],
                            used: chi[m],
                        });
                    }
                }
                *r = Some(chi);
            }
        }
        (out, notices)
    }

    /// Same stack with every conv layer dense.
    pub fn densified(&self) -> Self {
        let mut out = self.clone();
        for layer in &mut out.layers {
            if let LayerSpec::Conv { ranks, .. } = layer {
                *ranks = None;
            }
        }
        out
    }

    pub fn is_factorized(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Conv { ranks: Some(_), .. }))
    }

    /// Checks shape compatibility and rank bounds, returning each layer's output shape.
    pub fn validate(&self) -> Result<Vec<Activation>> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(ModelError::Spec("input shape must be positive".into()));
        }
        let mut act = Activation::Image {
            channels: c,
            height: h,
            width: w,
        };
        let mut shapes = Vec::with_capacity(self.layers.len());
        let err = |idx: usize, msg: String| ModelError::Spec(format!("layer {idx}: {msg}"));
        for (idx, layer) in self.layers.iter().enumerate() {
            act = match (layer, act) {
                (
                    LayerSpec::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                        ranks,
                    },
                    Activation::Image {
                        channels,
                        height,
                        width,
                    },
                ) => {
                    if *in_channels != channels {
                        return Err(err(
                            idx,
                            format!("expects {in_channels} channels, receives {channels}"),
                        ));
                    }
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return Err(err(
                            idx,
                            "channels, kernel and stride must be positive".into(),
                        ));
                    }
                    if height + 2 * padding < *kernel || width + 2 * padding < *kernel {
                        return Err(err(idx, "kernel larger than padded input".into()));
                    }
                    if let Some(r) = ranks {
                        let dims = [*in_channels, *kernel, *out_channels, *kernel];
                        for m in 0..4 {
                            if r[m] == 0 || r[m] > dims[m] {
                                return Err(err(
                                    idx,
                                    format!("rank {} for mode {m} outside 1..={}", r[m], dims[m]),
                                ));
                            }
                        }
                    }
                    Activation::Image {
                        channels: *out_channels,
                        height: (height + 2 * padding - kernel) / stride + 1,
                        width: (width + 2 * padding - kernel) / stride + 1,
                    }
                }
                (LayerSpec::Relu, a) => a,
                (
                    LayerSpec::MaxPool2,
                    Activation::Image {
                        channels,
                        height,
                        width,
                    },
                ) => {
                    if height < 2 || width < 2 {
                        return Err(err(idx, "pooling input smaller than 2x2".into()));
                    }
                    Activation::Image {
                        channels,
                        height: height / 2,
                        width: width / 2,
                    }
                }
                (
                    LayerSpec::Flatten,
                    Activation::Image {
                        channels,
                        height,
                        width,
                    },
                ) => Activation::Flat(channels * height * width),
                (LayerSpec::Flatten, Activation::Flat(n)) => Activation::Flat(n),
                (LayerSpec::Linear { inputs, outputs }, Activation::Flat(n)) => {
                    if *inputs != n {
                        return Err(err(idx, format!("expects {inputs} features, receives {n}")));
                    }
                    Activation::Flat(*outputs)
                }
                (l, a) => {
                    return Err(err(idx, format!("{l:?} cannot follow activation {a:?}")));
                }
            };
            shapes.push(act);
        }
        if act != Activation::Flat(self.classes) {
            return Err(ModelError::Spec(format!(
                "network ends in {act:?}, expected {} logits",
                self.classes
            )));
        }
        Ok(shapes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_spec_is_valid() {
        for size in [32, 64, 256] {
            let spec = ModelSpec::reference(size);
            assert_eq!(spec.validate().unwrap().last(), Some(&Activation::Flat(2)));
        }
    }

    #[test]
    fn ranks_clamp_per_layer() {
        let (spec, notices) = ModelSpec::reference(64).with_ranks(&RankConfig::new(32, 32, 3, 3));
        spec.validate().unwrap();
        let ranks: Vec<[usize; 4]> = spec
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { ranks, .. } => *ranks,
                _ => None,
            })
            .collect();
        assert_eq!(
            ranks,
            vec![
                [3, 3, 32, 3],
                [32, 3, 32, 3],
                [32, 3, 32, 3],
                [32, 3, 32, 3]
            ]
        );
        assert_eq!(notices.len(), 1);
        assert_eq!(notices[0].requested, 32);
        assert_eq!(notices[0].used, 3);
    }

    #[test]
    fn incompatible_stack_is_rejected() {
        let mut spec = ModelSpec::reference(64);
        if let LayerSpec::Linear { inputs, .. } = spec.layers.last_mut().unwrap() {
            *inputs += 1;
        }
        assert!(spec.validate().is_err());
        let mut spec = ModelSpec::reference(64);
        if let LayerSpec::Conv { ranks, .. } = &mut spec.layers[0] {
            *ranks = Some([4, 3, 32, 3]);
        }
        assert!(spec.validate().is_err());
    }

    #[test]
    fn rank_parsing() {
        assert_eq!(
            RankConfig::parse("32, 32,3,3").unwrap(),
            RankConfig::new(32, 32, 3, 3)
        );
        assert!(RankConfig::parse("32,32,3").is_err());
        assert!(RankConfig::parse("0,1,1,1").is_err());
        assert!(RankConfig::parse("a,1,1,1").is_err());
    }

    #[test]
    fn spec_json_shape() {
        let json = serde_json::to_string(&ModelSpec::reference(64).layers[..3]).unwrap();
        assert_eq!(
            json,
            r#"[{"kind":"conv","in_channels":3,"out_channels":32,"kernel":3,"stride":1,"padding":1},{"kind":"relu"},{"kind":"maxpool2"}]"#
        );
    }
}
