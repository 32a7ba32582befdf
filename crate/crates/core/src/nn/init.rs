//! Seeded parameter initializers.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Real, Tensor};

pub fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
}

pub fn gaussian<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::of(z * std)
    })
}

/// `rows x cols` matrix with orthonormal columns: modified Gram-Schmidt
/// (i.e. the Q of a thin QR) applied to a Gaussian draw. Requires `cols <= rows`.
pub fn orthonormal<T: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<T> {
    assert!(
        cols <= rows,
        "orthonormal: {cols} columns exceed {rows} rows"
    );
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while q.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|a| *a /= n);
            q.push(v);
        }
    }
    Tensor::from_fn(&[rows, cols], |i| T::of(q[i[1]][i[0]]))
}
