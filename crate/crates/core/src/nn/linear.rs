use rand::Rng;

use super::{check_shape, init, LayerError, Result};
use crate::tensor::{gemm, Real, Tensor};

/// Fully connected layer `y = x W^T + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> LinearLayer<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.ndim() != 2 {
            return Err(LayerError::Rank {
                expected: 2,
                actual: weight.ndim(),
            });
        }
        check_shape(&[weight.shape()[0]], bias.shape())?;
        Ok(Self { weight, bias })
    }

    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / inputs as f64).sqrt();
        Self {
            weight: init::uniform(&[outputs, inputs], bound, rng),
            bias: init::uniform(&[outputs], bound, rng),
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.weight.shape()[1], self.weight.shape()[0])
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<usize> {
        let (inputs, _) = self.dims();
        if input.ndim() != 2 {
            return Err(LayerError::Rank {
                expected: 2,
                actual: input.ndim(),
            });
        }
        check_shape(&[input.shape()[0], inputs], input.shape())?;
        Ok(input.shape()[0])
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_input(input)?;
        let (inputs, outputs) = self.dims();
        let mut out: Vec<T> = (0..n)
            .flat_map(|_| self.bias.data().iter().copied())
            .collect();
        gemm(
            n,
            inputs,
            outputs,
            input.data(),
            false,
            self.weight.data(),
            true,
            &mut out,
            true,
        );
        Ok(Tensor::new(vec![n, outputs], out)?)
    }

    /// Returns `(d input, [d weight, d bias])`.
    pub fn backward(
        &self,
        input: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let n = self.check_input(input)?;
        let (inputs, outputs) = self.dims();
        check_shape(&[n, outputs], upstream.shape())?;
        let mut dx = vec![T::zero(); n * inputs];
        gemm(
            n,
            outputs,
            inputs,
            upstream.data(),
            false,
            self.weight.data(),
            false,
            &mut dx,
            false,
        );
        let mut dw = vec![T::zero(); outputs * inputs];
        gemm(
            outputs,
            n,
            inputs,
            upstream.data(),
            true,
            input.data(),
            false,
            &mut dw,
            false,
        );
        let mut db = vec![T::zero(); outputs];
        for row in upstream.data().chunks(outputs) {
            db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
        }
        Ok((
            Tensor::new(vec![n, inputs], dx)?,
            vec![
                Tensor::new(vec![outputs, inputs], dw)?,
                Tensor::new(vec![outputs], db)?,
            ],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_loss_weight_gradient_is_input() {
        let l = LinearLayer::new(
            Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap(),
            Tensor::new(vec![1], vec![0.1]).unwrap(),
        )
        .unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0f64, 2.0]).unwrap();
        let y = l.forward(&x).unwrap();
        assert!((y.data()[0] - (0.3 - 1.4 + 0.1)).abs() < 1e-15);
        let (dx, g) = l.backward(&x, &Tensor::filled(&[1, 1], 1.0)).unwrap();
        assert_eq!(g[0].data(), &[1.0, 2.0]);
        assert_eq!(g[1].data(), &[1.0]);
        assert_eq!(dx.data(), &[0.3, -0.7]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = rand::rng();
        let l = LinearLayer::<f64>::init(4, 3, &mut rng);
        let x = init::gaussian(&[5, 4], 1.0, &mut rng);
        let (dx, g) = l.backward(&x, &Tensor::zeros(&[5, 3])).unwrap();
        assert!(dx
            .data()
            .iter()
            .chain(g[0].data())
            .chain(g[1].data())
            .all(|&v| v == 0.0));
    }

    #[test]
    fn input_width_is_checked() {
        let l = LinearLayer::<f32>::init(4, 3, &mut rand::rng());
        assert!(matches!(
            l.forward(&Tensor::zeros(&[2, 5])),
            Err(LayerError::Shape { .. })
        ));
    }
}
