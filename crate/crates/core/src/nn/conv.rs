//! Dense 2-D convolution (cross-correlation) via im2col + GEMM.
//!
//! Weights use the axis order `(C, W, T, H)`: input channels, kernel width,
//! output channels, kernel height.

use rand::Rng;

use super::{check_shape, init, LayerError, Result};
use crate::tensor::{gemm, Real, Tensor};

/// Geometry of one convolution applied to a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        weight_shape: &[usize],
        input_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(LayerError::Rank {
                expected: 4,
                actual: input_shape.len(),
            });
        }
        let (in_ch, k_w, out_ch, k_h) = (
            weight_shape[0],
            weight_shape[1],
            weight_shape[2],
            weight_shape[3],
        );
        let (batch, c, in_h, in_w) = (
            input_shape[0],
            input_shape[1],
            input_shape[2],
            input_shape[3],
        );
        if c != in_ch {
            return Err(LayerError::Channels {
                expected: in_ch,
                actual: c,
            });
        }
        if stride == 0 {
            return Err(LayerError::Config("stride must be positive".into()));
        }
        if in_h + 2 * padding < k_h || in_w + 2 * padding < k_w {
            return Err(LayerError::Config(format!(
                "{k_h}x{k_w} kernel does not fit a padded {in_h}x{in_w} input"
            )));
        }
        Ok(Self {
            batch,
            in_ch,
            out_ch,
            in_h,
            in_w,
            k_h,
            k_w,
            stride,
            padding,
            out_h: (in_h + 2 * padding - k_h) / stride + 1,
            out_w: (in_w + 2 * padding - k_w) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h, self.out_w]
    }

    /// Output columns `ox` whose input column `ox*stride + x - padding`
    /// lies inside the image.
    fn valid_cols(&self, x: usize) -> std::ops::Range<usize> {
        let lo = self.padding.saturating_sub(x).div_ceil(self.stride);
        let hi = (self.in_w + self.padding)
            .saturating_sub(x)
            .div_ceil(self.stride)
            .min(self.out_w);
        lo..hi.max(lo)
    }

    /// Column matrix `(C*kh*kw, P)` of one `(C, H, W)` image; row
    /// `(c*kh + y)*kw + x`. Every entry of `col` is written.
    fn im2col<T: Real>(&self, image: &[T], col: &mut [T]) {
        let p = self.positions();
        let hw = self.in_h * self.in_w;
        for c in 0..self.in_ch {
            let plane = &image[c * hw..(c + 1) * hw];
            for y in 0..self.k_h {
                for x in 0..self.k_w {
                    let row = (c * self.k_h + y) * self.k_w + x;
                    let dst = &mut col[row * p..(row + 1) * p];
                    let cols = self.valid_cols(x);
                    for oy in 0..self.out_h {
                        let out_row = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        let iy = (oy * self.stride + y).wrapping_sub(self.padding);
                        if iy >= self.in_h {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy * self.in_w..(iy + 1) * self.in_w];
                        out_row[..cols.start].fill(T::zero());
                        out_row[cols.end..].fill(T::zero());
                        let first = cols.start * self.stride + x - self.padding;
                        if self.stride == 1 {
                            out_row[cols.clone()].copy_from_slice(&src[first..first + cols.len()]);
                        } else {
                            for (i, d) in out_row[cols.clone()].iter_mut().enumerate() {
                                *d = src[first + i * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Patch matrix `(P, kh*kw*C)` of one channels-last `(H, W, C)` image;
    /// column `(y*kw + x)*C + c`. Every entry of `col_t` is written.
    fn patches_hwc<T: Real>(&self, image: &[T], col_t: &mut [T]) {
        let c_in = self.in_ch;
        let k = self.patch_len();
        for (pos, dst) in col_t.chunks_exact_mut(k).enumerate() {
            let (oy, ox) = (pos / self.out_w, pos % self.out_w);
            for (yx, seg) in dst.chunks_exact_mut(c_in).enumerate() {
                match self.tap(oy, ox, yx) {
                    Some(at) => seg.copy_from_slice(&image[at * c_in..(at + 1) * c_in]),
                    None => seg.fill(T::zero()),
                }
            }
        }
    }

    /// Scatter-adds a `(P, kh*kw*C)` patch matrix into a channels-last image.
    fn add_patches_hwc<T: Real>(&self, col_t: &[T], image: &mut [T]) {
        let c_in = self.in_ch;
        let k = self.patch_len();
        for (pos, src) in col_t.chunks_exact(k).enumerate() {
            let (oy, ox) = (pos / self.out_w, pos % self.out_w);
            for (yx, seg) in src.chunks_exact(c_in).enumerate() {
                if let Some(at) = self.tap(oy, ox, yx) {
                    image[at * c_in..(at + 1) * c_in]
                        .iter_mut()
                        .zip(seg)
                        .for_each(|(d, &v)| *d += v);
                }
            }
        }
    }

    /// Input pixel `iy*W + ix` read by kernel tap `yx = y*kw + x` at output
    /// `(oy, ox)`, or `None` inside the padding.
    fn tap(&self, oy: usize, ox: usize, yx: usize) -> Option<usize> {
        let (y, x) = (yx / self.k_w, yx % self.k_w);
        let iy = (oy * self.stride + y).wrapping_sub(self.padding);
        let ix = (ox * self.stride + x).wrapping_sub(self.padding);
        (iy < self.in_h && ix < self.in_w).then(|| iy * self.in_w + ix)
    }
}

/// `(C,W,T,H)` kernel to the `(C*kh*kw, T)` matrix whose rows follow
/// im2col rows.
fn kernel_matrix_t<T: Real>(weight: &Tensor<T>) -> Vec<T> {
    let s = weight.shape();
    let (c_in, k_w, t_out, k_h) = (s[0], s[1], s[2], s[3]);
    let w = weight.data();
    let mut m = vec![T::zero(); t_out * c_in * k_h * k_w];
    for c in 0..c_in {
        for x in 0..k_w {
            for t in 0..t_out {
                for y in 0..k_h {
                    m[((c * k_h + y) * k_w + x) * t_out + t] =
                        w[((c * k_w + x) * t_out + t) * k_h + y];
                }
            }
        }
    }
    m
}

/// `(C,W,T,H)` kernel to the `(T, kh*kw*C)` matrix whose columns follow
/// [`ConvGeometry::patches_hwc`].
fn kernel_matrix_hwc<T: Real>(weight: &Tensor<T>) -> Vec<T> {
    let s = weight.shape();
    let (c_in, k_w, t_out, k_h) = (s[0], s[1], s[2], s[3]);
    let w = weight.data();
    let k = c_in * k_h * k_w;
    let mut m = vec![T::zero(); t_out * k];
    for c in 0..c_in {
        for x in 0..k_w {
            for t in 0..t_out {
                for y in 0..k_h {
                    m[t * k + (y * k_w + x) * c_in + c] = w[((c * k_w + x) * t_out + t) * k_h + y];
                }
            }
        }
    }
    m
}

fn kernel_from_hwc<T: Real>(m: &[T], shape: &[usize]) -> Tensor<T> {
    let (c_in, k_w, k_h) = (shape[0], shape[1], shape[3]);
    let k = c_in * k_h * k_w;
    Tensor::from_fn(shape, |i| {
        let (c, x, t, y) = (i[0], i[1], i[2], i[3]);
        m[t * k + (y * k_w + x) * c_in + c]
    })
}

/// Writes the `cols x rows` transpose of the row-major `rows x cols` `src`.
fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Cross-correlation of `input (N,C,H,W)` with a `(C,W,T,H)` kernel.
pub(crate) fn conv_forward<T: Real>(
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(weight.shape(), input.shape(), stride, padding)?;
    check_shape(&[g.out_ch], bias.shape())?;
    // matrixmultiply packs a column-major left operand fastest.
    let wmt = kernel_matrix_t(weight);
    let (p, k) = (g.positions(), g.patch_len());
    let in_len = g.in_ch * g.in_h * g.in_w;
    let mut col = vec![T::zero(); k * p];
    let mut out = Vec::with_capacity(g.batch * g.out_ch * p);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, p));
    }
    for _ in 1..g.batch {
        out.extend_from_within(..g.out_ch * p);
    }
    for (image, dst) in input
        .data()
        .chunks(in_len)
        .zip(out.chunks_mut(g.out_ch * p))
    {
        g.im2col(image, &mut col);
        gemm(g.out_ch, k, p, &wmt, true, &col, false, dst, true);
    }
    Ok(Tensor::from_parts(g.output_shape().to_vec(), out))
}

/// Returns `(d input, d weight, d bias)`; the input gradient is skipped
/// (`None`) unless `need_input` is set.
pub(crate) fn conv_backward<T: Real>(
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    input: &Tensor<T>,
    upstream: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::new(weight.shape(), input.shape(), stride, padding)?;
    check_shape(&g.output_shape(), upstream.shape())?;
    let (p, k) = (g.positions(), g.patch_len());
    let in_len = g.in_ch * g.in_h * g.in_w;
    let hw = g.in_h * g.in_w;
    // Channels-last patches keep every copy and scatter contiguous and let
    // both products run with a column-major left operand.
    let wm = kernel_matrix_hwc(weight);
    let mut image_hwc = vec![T::zero(); in_len];
    let mut col_t = vec![T::zero(); k * p];
    let mut dout_t = vec![T::zero(); g.out_ch * p];
    let mut dwm = vec![T::zero(); g.out_ch * k];
    let mut dbias = vec![T::zero(); g.out_ch];
    let mut dinput = vec![T::zero(); if need_input { input.len() } else { 0 }];
    for (n, (image, dout)) in input
        .data()
        .chunks(in_len)
        .zip(upstream.data().chunks(g.out_ch * p))
        .enumerate()
    {
        for (db, row) in dbias.iter_mut().zip(dout.chunks(p)) {
            *db += row.iter().copied().sum::<T>();
        }
        transpose_into(image, g.in_ch, hw, &mut image_hwc);
        g.patches_hwc(&image_hwc, &mut col_t);
        transpose_into(dout, g.out_ch, p, &mut dout_t);
        gemm(g.out_ch, p, k, &dout_t, true, &col_t, false, &mut dwm, true);
        if need_input {
            gemm(p, g.out_ch, k, dout, true, &wm, false, &mut col_t, false);
            image_hwc.fill(T::zero());
            g.add_patches_hwc(&col_t, &mut image_hwc);
            transpose_into(
                &image_hwc,
                hw,
                g.in_ch,
                &mut dinput[n * in_len..(n + 1) * in_len],
            );
        }
    }
    Ok((
        need_input.then(|| Tensor::from_parts(input.shape().to_vec(), dinput)),
        kernel_from_hwc(&dwm, weight.shape()),
        Tensor::from_parts(vec![g.out_ch], dbias),
    ))
}

/// Convolution with a dense `(C,W,T,H)` kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> DenseConvLayer<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        if weight.ndim() != 4 {
            return Err(LayerError::Rank {
                expected: 4,
                actual: weight.ndim(),
            });
        }
        check_shape(&[weight.shape()[2]], bias.shape())?;
        if stride == 0 {
            return Err(LayerError::Config("stride must be positive".into()));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Uniform init with bound `sqrt(1 / fan_in)` for kernel and bias.
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (1.0 / (in_ch * kernel * kernel) as f64).sqrt();
        Self {
            weight: init::uniform(&[in_ch, kernel, out_ch, kernel], bound, rng),
            bias: init::uniform(&[out_ch], bound, rng),
            stride,
            padding,
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        conv_forward(&self.weight, &self.bias, self.stride, self.padding, input)
    }

    /// Returns `(d input, [d weight, d bias])`; `d input` is `None` unless
    /// `need_input`.
    pub fn backward(
        &self,
        input: &Tensor<T>,
        upstream: &Tensor<T>,
        need_input: bool,
    ) -> Result<(Option<Tensor<T>>, Vec<Tensor<T>>)> {
        let (dx, dw, db) = conv_backward(
            &self.weight,
            self.stride,
            self.padding,
            input,
            upstream,
            need_input,
        )?;
        Ok((dx, vec![dw, db]))
    }
}
