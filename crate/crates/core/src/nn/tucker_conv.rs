//! Convolution whose kernel is stored as Tucker factors.
//!
//! Forward assembles the full `(C,W,T,H)` kernel from the core and the four
//! factors, then runs one dense convolution. Backward pulls the kernel
//! gradient back through the assembly to the core and each factor.

use rand::Rng;

use super::conv::{conv_backward, conv_forward};
use super::{check_shape, init, LayerError, Result};
use crate::tensor::{gemm, mode_product, tucker_reconstruct, unfold, Real, Tensor, TuckerFactors};

#[derive(Debug, Clone, PartialEq)]
pub struct TuckerConvLayer<T> {
    pub factors: TuckerFactors<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> TuckerConvLayer<T> {
    pub fn new(
        factors: TuckerFactors<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        factors.validate()?;
        check_shape(&[factors.dims()[2]], bias.shape())?;
        if stride == 0 {
            return Err(LayerError::Config("stride must be positive".into()));
        }
        Ok(Self {
            factors,
            bias,
            stride,
            padding,
        })
    }

    /// Orthonormal factors (Gram-Schmidt of a Gaussian draw) and a Gaussian
    /// core scaled so that the assembled kernel has the same mean variance as
    /// the dense uniform init, `1 / (3 * fan_in)`.
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        ranks: [usize; 4],
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let dims = [in_ch, kernel, out_ch, kernel];
        for (mode, (&rank, &dim)) in ranks.iter().zip(&dims).enumerate() {
            if rank == 0 || rank > dim {
                return Err(LayerError::Tensor(
                    crate::tensor::TensorError::RankExceedsDim { mode, rank, dim },
                ));
            }
        }
        let fan_in = (in_ch * kernel * kernel) as f64;
        let dense_var = 1.0 / (3.0 * fan_in);
        let fill: f64 = ranks
            .iter()
            .zip(&dims)
            .map(|(&r, &d)| r as f64 / d as f64)
            .product();
        let core_std = (dense_var / fill).sqrt();
        let factors = [0, 1, 2, 3].map(|i| init::orthonormal(dims[i], ranks[i], rng));
        let core = init::gaussian(&ranks, core_std, rng);
        let bound = (1.0 / fan_in).sqrt();
        let bias = init::uniform(&[out_ch], bound, rng);
        Self::new(TuckerFactors::new(core, factors)?, bias, stride, padding)
    }

    /// The assembled `(C,W,T,H)` kernel.
    pub fn kernel(&self) -> Result<Tensor<T>> {
        Ok(tucker_reconstruct(&self.factors)?)
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let kernel = self.kernel()?;
        conv_forward(&kernel, &self.bias, self.stride, self.padding, input)
    }

    /// Returns `(d input, [d core, d factor0..3, d bias])`; `d input` is
    /// `None` unless `need_input`.
    pub fn backward(
        &self,
        input: &Tensor<T>,
        upstream: &Tensor<T>,
        need_input: bool,
    ) -> Result<(Option<Tensor<T>>, Vec<Tensor<T>>)> {
        let kernel = self.kernel()?;
        let (dx, dkernel, dbias) = conv_backward(
            &kernel,
            self.stride,
            self.padding,
            input,
            upstream,
            need_input,
        )?;
        let mut grads = kernel_grad_to_factors(&self.factors, &dkernel)?;
        grads.push(dbias);
        Ok((dx, grads))
    }
}

/// Chain rule through `K = core x1 A0 x2 A1 x3 A2 x4 A3`.
///
/// `dcore = dK x1 A0^T x2 A1^T x3 A2^T x4 A3^T`, and for each mode `i`,
/// `dA_i = unfold_i(dK) * unfold_i(core x_{j != i} A_j)^T`.
pub(crate) fn kernel_grad_to_factors<T: Real>(
    f: &TuckerFactors<T>,
    dkernel: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let mut dcore = dkernel.clone();
    for (mode, a) in f.factors.iter().enumerate() {
        dcore = mode_product(&dcore, a, mode, true)?;
    }
    let mut grads = vec![dcore];
    let dk_unfolded: Vec<Tensor<T>> = (0..4)
        .map(|mode| unfold(dkernel, mode))
        .collect::<std::result::Result<_, _>>()?;
    for mode in 0..4 {
        let mut partial = f.core.clone();
        for (other, a) in f.factors.iter().enumerate() {
            if other != mode {
                partial = mode_product(&partial, a, other, false)?;
            }
        }
        let pu = unfold(&partial, mode)?;
        let (dim, rank) = (f.factors[mode].shape()[0], f.factors[mode].shape()[1]);
        let rest = pu.shape()[1];
        let mut g = vec![T::zero(); dim * rank];
        gemm(
            dim,
            rest,
            rank,
            dk_unfolded[mode].data(),
            false,
            pu.data(),
            true,
            &mut g,
            false,
        );
        grads.push(Tensor::new(vec![dim, rank], g)?);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::conv::DenseConvLayer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_core_outputs_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut l = TuckerConvLayer::<f64>::init(2, 3, 3, [2, 2, 2, 2], 1, 1, &mut rng).unwrap();
        l.factors.core = Tensor::zeros(&[2, 2, 2, 2]);
        let y = l.forward(&Tensor::filled(&[1, 2, 5, 5], 1.0)).unwrap();
        for t in 0..3 {
            assert!(y.data()[t * 25..(t + 1) * 25]
                .iter()
                .all(|&v| v == l.bias.data()[t]));
        }
    }

    #[test]
    fn matches_dense_conv_on_assembled_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = TuckerConvLayer::<f64>::init(4, 5, 3, [2, 3, 3, 2], 1, 1, &mut rng).unwrap();
        let dense = DenseConvLayer::new(l.kernel().unwrap(), l.bias.clone(), 1, 1).unwrap();
        let x = init::gaussian(&[2, 4, 6, 6], 1.0, &mut rng);
        let a = l.forward(&x).unwrap();
        let b = dense.forward(&x).unwrap();
        assert!(a.rel_error(&b) < 1e-12);
    }

    #[test]
    fn init_respects_rank_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(TuckerConvLayer::<f32>::init(3, 8, 3, [4, 3, 8, 3], 1, 1, &mut rng).is_err());
        let l = TuckerConvLayer::<f32>::init(3, 8, 3, [3, 3, 8, 3], 1, 1, &mut rng).unwrap();
        assert_eq!(
            l.factors.param_count(),
            3 * 3 + 3 * 3 + 8 * 8 + 3 * 3 + 3 * 3 * 8 * 3
        );
    }

    #[test]
    fn init_variance_tracks_dense_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = TuckerConvLayer::<f64>::init(32, 64, 3, [16, 3, 16, 3], 1, 1, &mut rng).unwrap();
        let k = l.kernel().unwrap();
        let var = k.data().iter().map(|v| v * v).sum::<f64>() / k.len() as f64;
        let want = 1.0 / (3.0 * 32.0 * 9.0);
        assert!((var / want - 1.0).abs() < 0.2, "var {var} want {want}");
    }
}
