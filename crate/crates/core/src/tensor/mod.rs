//! Dense n-dimensional tensors and the multilinear algebra built on them.
//!
//! Storage is row-major (last index fastest). Everything here is a pure
//! function of its inputs; a [`Tensor`] is never mutated through a shared
//! reference.

mod svd;
mod tucker;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use thiserror::Error;

pub use svd::{effective_rank, svd, SvdResult, RANK_CUTOFF};
pub use tucker::{mode_product, tucker_decompose, tucker_reconstruct, TuckerFactors};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor contains a non-finite entry")]
    NonFinite,
    #[error("axis {axis} out of range for a rank-{ndim} tensor")]
    AxisOutOfRange { axis: usize, ndim: usize },
    #[error("axis {0} listed twice")]
    DuplicateAxis(usize),
    #[error("contracted axes have different lengths: axis {axis_a} of a ({len_a}) vs axis {axis_b} of b ({len_b})")]
    ShapeMismatch {
        axis_a: usize,
        axis_b: usize,
        len_a: usize,
        len_b: usize,
    },
    #[error("axis lists have different lengths ({0} vs {1})")]
    AxisCountMismatch(usize, usize),
    #[error("expected a matrix, got a rank-{0} tensor")]
    NotAMatrix(usize),
    #[error("expected a rank-4 tensor, got rank {0}")]
    NotRank4(usize),
    #[error("rank {rank} for mode {mode} exceeds that dimension ({dim})")]
    RankExceedsDim {
        mode: usize,
        rank: usize,
        dim: usize,
    },
    #[error("rank for mode {0} must be positive")]
    ZeroRank(usize),
    #[error("inconsistent Tucker factors: {0}")]
    InconsistentFactors(String),
    #[error("cannot reshape {from:?} into {to:?}")]
    BadReshape { from: Vec<usize>, to: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Floating-point element type. Implemented for `f32` (training) and `f64`
/// (decomposition and reference checks).
pub trait Real:
    Float + FromPrimitive + NumAssign + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Dtype tag used by the checkpoint manifest.
    const DTYPE: &'static str;
    const BYTES: usize;

    /// `c = alpha * a * b + beta * c` on raw strided storage.
    ///
    /// # Safety
    /// Strides and dimensions must describe valid regions of the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Row-major matrix product on flat buffers.
///
/// `a` is `m x k` (stored `k x m` when `trans_a`), `b` is `k x n` (stored
/// `n x k` when `trans_b`), `c` is `m x n`. With `accumulate` the product is
/// added to `c`, otherwise `c` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above guarantee every addressed element is in bounds.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense tensor with row-major storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, checking the element count and that every entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for buffers whose length is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![T::zero(); n])
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    /// Builds a tensor by evaluating `f` at every multi-index, in storage order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i[0] == i[1] { T::one() } else { T::zero() })
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(Vec::new(), vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn get(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let off: usize = index.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::BadReshape {
                from: self.shape,
                to: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        )
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Elementwise difference; panics on shape mismatch.
    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.shape, other.shape, "sub: shape mismatch");
        Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        )
    }

    /// Relative Frobenius distance `|self - other| / |other|` (absolute when `other` is zero).
    pub fn rel_error(&self, reference: &Self) -> T {
        let diff = self.sub(reference).frobenius_norm();
        let norm = reference.frobenius_norm();
        if norm > T::zero() {
            diff / norm
        } else {
            diff
        }
    }

    /// Matrix transpose. Panics unless rank 2.
    pub fn transpose(&self) -> Self {
        assert_eq!(self.ndim(), 2, "transpose needs a matrix");
        self.permute(&[1, 0]).expect("valid permutation")
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        check_axes(axes, self.ndim())?;
        if axes.len() != self.ndim() {
            return Err(TensorError::AxisCountMismatch(axes.len(), self.ndim()));
        }
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.clone());
        }
        let in_strides = self.strides();
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.data.len();
        let mut out = Vec::with_capacity(n);
        let nd = out_shape.len();
        let inner = out_shape[nd - 1];
        let inner_stride = src_strides[nd - 1];
        let mut idx = vec![0usize; nd];
        let mut base = 0usize;
        let outer = n.checked_div(inner).unwrap_or(0);
        for _ in 0..outer {
            for j in 0..inner {
                out.push(self.data[base + j * inner_stride]);
            }
            // advance the odometer over all axes but the last
            for ax in (0..nd - 1).rev() {
                idx[ax] += 1;
                base += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                base -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self::from_parts(out_shape, out))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        contract(self, other, &[1], &[0])
    }
}

fn check_axes(axes: &[usize], ndim: usize) -> Result<()> {
    let mut seen = vec![false; ndim];
    for &a in axes {
        if a >= ndim {
            return Err(TensorError::AxisOutOfRange { axis: a, ndim });
        }
        if seen[a] {
            return Err(TensorError::DuplicateAxis(a));
        }
        seen[a] = true;
    }
    Ok(())
}

/// Sums over the paired axes of `a` and `b`.
///
/// The result carries the free axes of `a` in their original order followed
/// by the free axes of `b`. Contracting every axis yields a shape-`[]` tensor
/// holding one element.
pub fn contract<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    axes_a: &[usize],
    axes_b: &[usize],
) -> Result<Tensor<T>> {
    if axes_a.len() != axes_b.len() {
        return Err(TensorError::AxisCountMismatch(axes_a.len(), axes_b.len()));
    }
    check_axes(axes_a, a.ndim())?;
    check_axes(axes_b, b.ndim())?;
    for (&ia, &ib) in axes_a.iter().zip(axes_b) {
        if a.shape[ia] != b.shape[ib] {
            return Err(TensorError::ShapeMismatch {
                axis_a: ia,
                axis_b: ib,
                len_a: a.shape[ia],
                len_b: b.shape[ib],
            });
        }
    }
    let free_a: Vec<usize> = (0..a.ndim()).filter(|i| !axes_a.contains(i)).collect();
    let free_b: Vec<usize> = (0..b.ndim()).filter(|i| !axes_b.contains(i)).collect();

    let perm_a: Vec<usize> = free_a.iter().chain(axes_a).copied().collect();
    let perm_b: Vec<usize> = axes_b.iter().chain(&free_b).copied().collect();
    let pa = a.permute(&perm_a)?;
    let pb = b.permute(&perm_b)?;

    let m: usize = free_a.iter().map(|&i| a.shape[i]).product();
    let k: usize = axes_a.iter().map(|&i| a.shape[i]).product();
    let n: usize = free_b.iter().map(|&i| b.shape[i]).product();

    let out_shape: Vec<usize> = free_a
        .iter()
        .map(|&i| a.shape[i])
        .chain(free_b.iter().map(|&i| b.shape[i]))
        .collect();
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, &pa.data, false, &pb.data, false, &mut out, false);
    Ok(Tensor::from_parts(out_shape, out))
}

/// Column offsets of the mode-`mode` unfolding: lower modes vary fastest.
fn unfold_col_strides(shape: &[usize], mode: usize) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for (k, &d) in shape.iter().enumerate() {
        if k == mode {
            continue;
        }
        strides[k] = acc;
        acc *= d;
    }
    strides
}

/// Walks every element in storage order, yielding (flat index, unfolded offset).
fn for_each_unfold_offset(shape: &[usize], mode: usize, mut f: impl FnMut(usize, usize)) {
    let ncols: usize = shape
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != mode)
        .map(|(_, &d)| d)
        .product();
    let col_strides = unfold_col_strides(shape, mode);
    let n: usize = shape.iter().product();
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for flat in 0..n {
        f(flat, offset);
        for ax in (0..nd).rev() {
            let step = if ax == mode { ncols } else { col_strides[ax] };
            idx[ax] += 1;
            offset += step;
            if idx[ax] < shape[ax] {
                break;
            }
            offset -= step * shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Mode-`mode` matricization: rows index `mode`, columns enumerate the
/// remaining indices with lower modes varying fastest.
pub fn unfold<T: Real>(t: &Tensor<T>, mode: usize) -> Result<Tensor<T>> {
    if mode >= t.ndim() {
        return Err(TensorError::AxisOutOfRange {
            axis: mode,
            ndim: t.ndim(),
        });
    }
    let rows = t.shape[mode];
    let cols = t.len().checked_div(rows).unwrap_or(0);
    let mut out = vec![T::zero(); t.len()];
    for_each_unfold_offset(&t.shape, mode, |flat, off| out[off] = t.data[flat]);
    Ok(Tensor::from_parts(vec![rows, cols], out))
}

/// Inverse of [`unfold`].
pub fn fold<T: Real>(m: &Tensor<T>, mode: usize, shape: &[usize]) -> Result<Tensor<T>> {
    if mode >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            axis: mode,
            ndim: shape.len(),
        });
    }
    let n: usize = shape.iter().product();
    if m.ndim() != 2 || m.len() != n || m.shape[0] != shape[mode] {
        return Err(TensorError::BadReshape {
            from: m.shape.clone(),
            to: shape.to_vec(),
        });
    }
    let mut out = vec![T::zero(); n];
    for_each_unfold_offset(shape, mode, |flat, off| out[flat] = m.data[off]);
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matrix_product_by_contraction() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        let c = contract(&a, &b, &[1], &[0]).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn identity_contraction_is_noop() {
        let x = Tensor::from_fn(&[3, 4], |i| (i[0] * 4 + i[1]) as f64 * 0.5 - 1.0);
        let y = contract(&Tensor::eye(3), &x, &[1], &[0]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn full_self_contraction_is_squared_norm() {
        let ones = Tensor::<f64>::filled(&[2, 2], 1.0);
        let s = contract(&ones, &ones, &[0, 1], &[0, 1]).unwrap();
        assert!(s.shape().is_empty());
        assert_eq!(s.data(), &[4.0]);
    }

    #[test]
    fn contraction_errors() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert_eq!(
            contract(&a, &b, &[1], &[0]).unwrap_err(),
            TensorError::ShapeMismatch {
                axis_a: 1,
                axis_b: 0,
                len_a: 3,
                len_b: 4
            }
        );
        assert!(matches!(
            contract(&a, &b, &[2], &[0]),
            Err(TensorError::AxisOutOfRange { axis: 2, .. })
        ));
        assert!(matches!(
            contract(&a, &a, &[0, 0], &[0, 1]),
            Err(TensorError::DuplicateAxis(0))
        ));
    }

    #[test]
    fn contraction_keeps_free_axis_order() {
        // a: (2,3,4), b: (3,5) contract a.1 with b.0 -> (2,4,5)
        let a = Tensor::from_fn(&[2, 3, 4], |i| (i[0] * 12 + i[1] * 4 + i[2]) as f64);
        let b = Tensor::from_fn(&[3, 5], |i| (i[0] as f64) - (i[1] as f64) * 0.25);
        let c = contract(&a, &b, &[1], &[0]).unwrap();
        assert_eq!(c.shape(), &[2, 4, 5]);
        for i in 0..2 {
            for k in 0..4 {
                for l in 0..5 {
                    let want: f64 = (0..3).map(|j| a.get(&[i, j, k]) * b.get(&[j, l])).sum();
                    assert_eq!(c.get(&[i, k, l]), want);
                }
            }
        }
    }

    #[test]
    fn new_rejects_bad_input() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0f64; 3]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert_eq!(
            Tensor::new(vec![1], vec![f64::NAN]).unwrap_err(),
            TensorError::NonFinite
        );
    }

    #[test]
    fn unfold_shape_and_convention() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| (i[0] * 12 + i[1] * 4 + i[2]) as f64);
        let m = unfold(&x, 1).unwrap();
        assert_eq!(m.shape(), &[3, 8]);
        // column j = i0 + 2 * i2 (mode 0 varies fastest)
        for i0 in 0..2 {
            for i1 in 0..3 {
                for i2 in 0..4 {
                    assert_eq!(m.get(&[i1, i0 + 2 * i2]), x.get(&[i0, i1, i2]));
                }
            }
        }
        assert!(unfold(&x, 3).is_err());
    }

    #[test]
    fn permute_matches_index_definition() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.get(&[c, a, b]), x.get(&[a, b, c]));
                }
            }
        }
    }
}
