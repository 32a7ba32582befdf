use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tcnn::metrics::{auc, confusion, quality};
use tcnn::model::{ModelSpec, ParamReport, RankConfig};
use tcnn::nn::{init, DenseConvLayer, TuckerConvLayer};
use tcnn::tensor::{contract, fold, svd, tucker_decompose, tucker_reconstruct, unfold, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    init::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn dims(max_rank: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..=max_rank)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contraction_is_associative(i in 1usize..4, j in 1usize..4, k in 1usize..4, l in 1usize..4, m in 1usize..4, seed: u64) {
        let a = random(&[i, j, k], seed);
        let b = random(&[k, l], seed ^ 1);
        let c = random(&[l, m], seed ^ 2);
        let left = contract(&contract(&a, &b, &[2], &[0]).unwrap(), &c, &[2], &[0]).unwrap();
        let right = contract(&a, &contract(&b, &c, &[1], &[0]).unwrap(), &[2], &[0]).unwrap();
        prop_assert_eq!(left.shape(), &[i, j, m]);
        prop_assert!(left.rel_error(&right) < 1e-12);
    }

    #[test]
    fn full_contraction_is_inner_product(shape in dims(4), seed: u64) {
        let a = random(&shape, seed);
        let b = random(&shape, seed ^ 3);
        let axes: Vec<usize> = (0..shape.len()).collect();
        let s = contract(&a, &b, &axes, &axes).unwrap();
        let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        prop_assert_eq!(s.shape(), &[] as &[usize]);
        prop_assert!((s.data()[0] - dot).abs() <= 1e-12 * (1.0 + dot.abs()));
    }

    #[test]
    fn fold_inverts_unfold(shape in dims(4), mode_pick: usize, seed: u64) {
        let t = random(&shape, seed);
        let mode = mode_pick % shape.len();
        let u = unfold(&t, mode).unwrap();
        prop_assert_eq!(u.shape(), &[shape[mode], t.len() / shape[mode]]);
        prop_assert_eq!(fold(&u, mode, &shape).unwrap(), t);
    }

    #[test]
    fn truncated_hosvd_error_is_bounded_by_discarded_energy(
        dims in prop::array::uniform4(1usize..6),
        ranks_pick in prop::array::uniform4(1usize..6),
        seed: u64,
    ) {
        let w = random(&dims, seed);
        let ranks = [0, 1, 2, 3].map(|i| ranks_pick[i].min(dims[i]));
        let f = tucker_decompose(&w, ranks).unwrap();
        prop_assert_eq!(f.ranks(), ranks);
        let err = w.sub(&tucker_reconstruct(&f).unwrap()).frobenius_norm().powi(2);
        let mut bound = 0.0;
        for (mode, &r) in ranks.iter().enumerate() {
            bound += svd(&unfold(&w, mode).unwrap()).unwrap().s.iter().skip(r).map(|s| s * s).sum::<f64>();
        }
        prop_assert!(err <= bound * (1.0 + 1e-9) + 1e-20, "error {} > bound {}", err, bound);
    }

    #[test]
    fn tucker_layer_matches_dense_layer_on_assembled_kernel(
        in_ch in 1usize..5,
        out_ch in 1usize..5,
        kernel in 1usize..4,
        stride in 1usize..3,
        padding in 0usize..2,
        side in 4usize..8,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ranks = [in_ch, kernel, out_ch, kernel].map(|d| 1 + (seed as usize) % d);
        let mut t = TuckerConvLayer::<f32>::init(in_ch, out_ch, kernel, ranks, stride, padding, &mut rng).unwrap();
        t.bias = init::uniform(&[out_ch], 0.5, &mut rng);
        let dense = DenseConvLayer::new(t.kernel().unwrap(), t.bias.clone(), stride, padding).unwrap();
        let x: Tensor<f32> = init::uniform(&[2, in_ch, side, side], 1.0, &mut rng);
        let a = t.forward(&x).unwrap();
        let b = dense.forward(&x).unwrap();
        prop_assert!(a.rel_error(&b) <= 1e-5);
    }

    #[test]
    fn compression_grows_as_ranks_shrink(hi in 2usize..=32, drop in 1usize..31) {
        let lo = hi.saturating_sub(drop).max(1);
        prop_assume!(lo < hi);
        let spec = ModelSpec::reference(64);
        let ratio = |r: usize| ParamReport::closed_form(&spec.with_ranks(&RankConfig::new(r, r, 3, 3)).0).compression_ratio;
        prop_assert!(ratio(lo) > ratio(hi));
    }

    #[test]
    fn recall_is_monotone_and_slip_through_is_its_complement(
        pairs in prop::collection::vec((0.0f64..=1.0, 0u8..2), 1..60),
        t1 in 0.001f64..0.999,
        t2 in 0.001f64..0.999,
    ) {
        let (scores, labels): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let q_lo = quality(&confusion(&scores, &labels, lo).unwrap());
        let q_hi = quality(&confusion(&scores, &labels, hi).unwrap());
        for q in [q_lo, q_hi] {
            prop_assert_eq!(q.slip_through, q.recall.map(|r| 1.0 - r));
        }
        if let (Some(r_lo), Some(r_hi)) = (q_lo.recall, q_hi.recall) {
            prop_assert!(r_hi <= r_lo);
        }
    }

    #[test]
    fn auc_ignores_score_scaling(
        pairs in prop::collection::vec((0.0f64..=1.0, 0u8..2), 2..50),
    ) {
        let (scores, labels): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let halved: Vec<f64> = scores.iter().map(|s| 0.5 * s).collect();
        prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&halved, &labels).unwrap());
    }
}
