use super::{ClampNotice, LayerSpec, Model, ModelError, RankConfig, Result};
use crate::nn::{Layer, TuckerConvLayer};
use crate::tensor::{tucker_decompose, Real};

/// Replaces every dense conv layer by a Tucker layer whose factors are the
/// truncated HOSVD of its weight, computed in f64. Biases and all other
/// layers are copied unchanged. Ranks larger than a layer dimension are
/// clamped and reported.
pub fn tensorize_pretrained<T: Real>(
    dense: &Model<T>,
    ranks: &RankConfig,
) -> Result<(Model<T>, Vec<ClampNotice>)> {
    ranks.validate()?;
    if dense.spec.is_factorized() {
        return Err(ModelError::Spec("model is already factorized".into()));
    }
    let (spec, notices) = dense.spec.with_ranks(ranks);
    let mut layers = Vec::with_capacity(dense.layers.len());
    for (index, (layer, ls)) in dense.layers.iter().zip(&spec.layers).enumerate() {
        let new = match (layer, ls) {
            (
                Layer::Conv(c),
                LayerSpec::Conv {
                    ranks: Some(chi), ..
                },
            ) => {
                let factors = tucker_decompose(&c.weight.cast::<f64>(), *chi)?;
                Layer::TuckerConv(
                    TuckerConvLayer::new(factors.cast(), c.bias.clone(), c.stride, c.padding)
                        .map_err(|source| ModelError::Layer {
                            index,
                            kind: "tucker_conv",
                            source,
                        })?,
                )
            }
            (other, _) => other.clone(),
        };
        layers.push(new);
    }
    Ok((
        Model {
            spec,
            seed: dense.seed,
            layers,
        },
        notices,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, count_params, ModelSpec};
    use crate::nn::init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_rank_preserves_logits() {
        let dense = build_model(&ModelSpec::reference(32), 11).unwrap();
        let (tucker, notices) =
            tensorize_pretrained(&dense, &RankConfig::new(128, 128, 3, 3)).unwrap();
        assert!(!notices.is_empty());
        assert!(tucker.spec.is_factorized());
        let x = init::uniform(&[3, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let a = dense.forward(&x).unwrap();
        let b = tucker.forward(&x).unwrap();
        assert!(b.rel_error(&a) < 1e-4);
    }

    #[test]
    fn rank_one_changes_outputs_and_compresses_most() {
        let dense = build_model(&ModelSpec::reference(32), 11).unwrap();
        let (t1, _) = tensorize_pretrained(&dense, &RankConfig::new(1, 1, 1, 1)).unwrap();
        let (t8, _) = tensorize_pretrained(&dense, &RankConfig::new(8, 8, 3, 3)).unwrap();
        let x = init::uniform(&[2, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(
            t1.forward(&x)
                .unwrap()
                .rel_error(&dense.forward(&x).unwrap())
                > 1e-3
        );
        let c1 = count_params(&t1).unwrap().compression_ratio;
        let c8 = count_params(&t8).unwrap().compression_ratio;
        assert!(c1 > c8);
    }

    #[test]
    fn refuses_factorized_input() {
        let dense = build_model(&ModelSpec::reference(32), 1).unwrap();
        let (t, _) = tensorize_pretrained(&dense, &RankConfig::new(8, 8, 3, 3)).unwrap();
        assert!(tensorize_pretrained(&t, &RankConfig::new(8, 8, 3, 3)).is_err());
    }
}
