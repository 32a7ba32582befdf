//! Parameter-free layers: ReLU, 2x2 max pooling, flatten.

use super::{check_shape, LayerError, Result};
use crate::tensor::{Real, Tensor};

pub fn relu_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

pub fn relu_backward<T: Real>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    check_shape(input.shape(), upstream.shape())?;
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts(input.shape().to_vec(), data))
}

fn pool_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(LayerError::Rank {
            expected: 4,
            actual: shape.len(),
        });
    }
    if shape[2] < 2 || shape[3] < 2 {
        return Err(LayerError::Config(format!(
            "2x2 pooling needs at least 2x2 input, got {}x{}",
            shape[2], shape[3]
        )));
    }
    Ok((shape[0] * shape[1], shape[2], shape[3]))
}

/// Offset within the 2x2 window `[a, b, c, d]` (row-major) of its maximum;
/// the first maximum wins ties.
#[inline]
fn window_argmax<T: Real>(a: T, b: T, c: T, d: T) -> (usize, T) {
    let (mut i, mut m) = (0, a);
    if b > m {
        (i, m) = (1, b);
    }
    if c > m {
        (i, m) = (2, c);
    }
    if d > m {
        (i, m) = (3, d);
    }
    (i, m)
}

/// Odd trailing rows/columns are dropped.
pub fn maxpool2x2_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = pool_dims(input.shape())?;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); planes * oh * ow];
    for (plane, dst) in input
        .data()
        .chunks_exact(h * w)
        .zip(out.chunks_exact_mut(oh * ow))
    {
        for (oy, row) in dst.chunks_exact_mut(ow).enumerate() {
            let r0 = &plane[2 * oy * w..2 * oy * w + w];
            let r1 = &plane[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for (ox, o) in row.iter_mut().enumerate() {
                let x = 2 * ox;
                *o = window_argmax(r0[x], r0[x + 1], r1[x], r1[x + 1]).1;
            }
        }
    }
    let s = input.shape();
    Ok(Tensor::from_parts(vec![s[0], s[1], oh, ow], out))
}

pub fn maxpool2x2_backward<T: Real>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = pool_dims(input.shape())?;
    let s = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    check_shape(&[s[0], s[1], oh, ow], upstream.shape())?;
    let mut dx = vec![T::zero(); input.len()];
    let planes = input
        .data()
        .chunks_exact(h * w)
        .zip(upstream.data().chunks_exact(oh * ow));
    for ((plane, grad), dst) in planes.zip(dx.chunks_exact_mut(h * w)) {
        for (oy, g_row) in grad.chunks_exact(ow).enumerate() {
            let (top, bottom) = (2 * oy * w, (2 * oy + 1) * w);
            for (ox, &g) in g_row.iter().enumerate() {
                let x = 2 * ox;
                let (i, _) = window_argmax(
                    plane[top + x],
                    plane[top + x + 1],
                    plane[bottom + x],
                    plane[bottom + x + 1],
                );
                let at = [top + x, top + x + 1, bottom + x, bottom + x + 1][i];
                dst[at] = g;
            }
        }
    }
    Ok(Tensor::from_parts(s.to_vec(), dx))
}

/// `(N, ...) -> (N, prod(...))`.
pub fn flatten_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.ndim() < 1 {
        return Err(LayerError::Rank {
            expected: 2,
            actual: 0,
        });
    }
    let n = input.shape()[0];
    let rest = input.shape()[1..].iter().product();
    Ok(input.clone().reshape(&[n, rest])?)
}

pub fn flatten_backward<T: Real>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let n = input.shape().first().copied().unwrap_or(0);
    check_shape(&[n, input.len() / n.max(1)], upstream.shape())?;
    Ok(upstream.clone().reshape(input.shape())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_picks_block_maximum() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let y = maxpool2x2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
        let dx = maxpool2x2_backward(&x, &Tensor::filled(&[1, 1, 1, 1], 2.5)).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 2.5]);
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::new(vec![3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::filled(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn flatten_round_trip() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 2, 2], |i| i.iter().sum::<usize>() as f32);
        let y = flatten_forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 12]);
        assert_eq!(flatten_backward(&x, &y).unwrap(), x);
    }

    #[test]
    fn zero_upstream_gives_zero_input_grad() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 4, 4], |i| (i[2] * 4 + i[3]) as f64 - 7.5);
        let z = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(maxpool2x2_backward(&x, &z)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let z = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(relu_backward(&x, &z)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }
}
