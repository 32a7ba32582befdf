use tcnn::model::gradcheck::{check_gradients, covering_case};
use tcnn::tensor::Real;

const SEEDS: [u64; 3] = [11, 12, 13];

fn assert_close<T: Real>(h: f64, tol: f64) {
    for seed in SEEDS {
        let (mut model, x, labels) = covering_case::<T>(seed).unwrap();
        let checks = check_gradients(&mut model, &x, &labels, h).unwrap();
        assert_eq!(checks.len(), model.params().len() + 1);
        for c in checks {
            assert!(
                c.rel_error < tol,
                "seed {seed}, {}: relative error {:e}",
                c.name,
                c.rel_error
            );
        }
    }
}

#[test]
fn f64_gradients_match_finite_differences() {
    assert_close::<f64>(1e-5, 1e-6);
}

#[test]
fn f32_gradients_match_finite_differences() {
    assert_close::<f32>(1e-3, 1e-2);
}
