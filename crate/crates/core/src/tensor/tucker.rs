//! Truncated higher-order SVD of rank-4 weight tensors.

use super::svd::extend_columns;
use super::{gemm, svd, unfold, Real, Result, Tensor, TensorError};

/// Core tensor `(r1, r2, r3, r4)` plus one factor matrix per mode.
///
/// Factor `i` has shape `(dims[i], ranks[i])`; for convolution weights the
/// mode order is `(C, W, T, H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TuckerFactors<T = f64> {
    pub core: Tensor<T>,
    pub factors: [Tensor<T>; 4],
}

impl<T: Real> TuckerFactors<T> {
    pub fn new(core: Tensor<T>, factors: [Tensor<T>; 4]) -> Result<Self> {
        let f = Self { core, factors };
        f.validate()?;
        Ok(f)
    }

    pub fn ranks(&self) -> [usize; 4] {
        let s = self.core.shape();
        [s[0], s[1], s[2], s[3]]
    }

    /// Shape of the assembled tensor.
    pub fn dims(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.factors[i].shape()[0])
    }

    /// Stored parameter count: factor entries plus core entries.
    pub fn param_count(&self) -> usize {
        self.core.len() + self.factors.iter().map(Tensor::len).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.core.ndim() != 4 {
            return Err(TensorError::NotRank4(self.core.ndim()));
        }
        for (i, f) in self.factors.iter().enumerate() {
            if f.ndim() != 2 {
                return Err(TensorError::InconsistentFactors(format!(
                    "factor {i} is rank {}",
                    f.ndim()
                )));
            }
            let (dim, rank) = (f.shape()[0], f.shape()[1]);
            if rank != self.core.shape()[i] {
                return Err(TensorError::InconsistentFactors(format!(
                    "factor {i} has {rank} columns but core mode {i} is {}",
                    self.core.shape()[i]
                )));
            }
            if rank > dim {
                return Err(TensorError::RankExceedsDim { mode: i, rank, dim });
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> TuckerFactors<U> {
        TuckerFactors {
            core: self.core.cast(),
            factors: self.factors.clone().map(|f| f.cast()),
        }
    }
}

/// Below this many trailing entries per slice, [`mode_product`] permutes
/// instead of running one small product per leading index.
const SMALL_TRAILING: usize = 32;

/// Factor matrices up to this many entries are applied with plain loops.
const SMALL_MATRIX: usize = 16;

/// `t x_mode m`: replaces axis `mode` (length `J`) by `m.shape[0]` using
/// `out[.., i, ..] = sum_j m[i, j] * t[.., j, ..]`. `m` is `(I, J)`, or
/// `(J, I)` when `transpose` is set.
pub fn mode_product<T: Real>(
    t: &Tensor<T>,
    m: &Tensor<T>,
    mode: usize,
    transpose: bool,
) -> Result<Tensor<T>> {
    if mode >= t.ndim() {
        return Err(TensorError::AxisOutOfRange {
            axis: mode,
            ndim: t.ndim(),
        });
    }
    if m.ndim() != 2 {
        return Err(TensorError::NotAMatrix(m.ndim()));
    }
    let (rows, inner) = if transpose {
        (m.shape()[1], m.shape()[0])
    } else {
        (m.shape()[0], m.shape()[1])
    };
    let j = t.shape()[mode];
    if inner != j {
        return Err(TensorError::ShapeMismatch {
            axis_a: mode,
            axis_b: if transpose { 0 } else { 1 },
            len_a: j,
            len_b: inner,
        });
    }
    let left: usize = t.shape()[..mode].iter().product();
    let right: usize = t.shape()[mode + 1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[mode] = rows;
    let mut out = vec![T::zero(); left * rows * right];
    let src = t.data();
    if rows * j <= SMALL_MATRIX {
        let md = m.data();
        let w: Vec<T> = (0..rows * j)
            .map(|e| {
                let (i, jj) = (e / j, e % j);
                if transpose {
                    md[jj * rows + i]
                } else {
                    md[i * j + jj]
                }
            })
            .collect();
        if right == 1 {
            for (o_row, a_row) in out.chunks_exact_mut(rows).zip(src.chunks_exact(j)) {
                for (o, w_row) in o_row.iter_mut().zip(w.chunks_exact(j)) {
                    *o = w_row.iter().zip(a_row).map(|(&w, &a)| w * a).sum();
                }
            }
            return Ok(Tensor::from_parts(shape, out));
        }
        for (o_slab, a_slab) in out
            .chunks_exact_mut(rows * right)
            .zip(src.chunks_exact(j * right))
        {
            for (o, w_row) in o_slab.chunks_exact_mut(right).zip(w.chunks_exact(j)) {
                for (&wv, a) in w_row.iter().zip(a_slab.chunks_exact(right)) {
                    o.iter_mut().zip(a).for_each(|(o, &a)| *o += wv * a);
                }
            }
        }
        return Ok(Tensor::from_parts(shape, out));
    }
    if right == 1 {
        // Last mode: one (left x j) * (j x rows) product instead of `left`
        // tiny ones.
        gemm(
            left,
            j,
            rows,
            src,
            false,
            m.data(),
            !transpose,
            &mut out,
            false,
        );
        return Ok(Tensor::from_parts(shape, out));
    }
    if left > 1 && right < SMALL_TRAILING {
        // Bring `mode` to the front so one product covers every slice.
        let front = Tensor::from_parts(vec![left, j, right], src.to_vec()).permute(&[1, 0, 2])?;
        gemm(
            rows,
            j,
            left * right,
            m.data(),
            transpose,
            front.data(),
            false,
            &mut out,
            false,
        );
        let back = Tensor::from_parts(vec![rows, left, right], out).permute(&[1, 0, 2])?;
        return Ok(Tensor::from_parts(shape, back.into_data()));
    }
    for l in 0..left {
        let a = &src[l * j * right..(l + 1) * j * right];
        let c = &mut out[l * rows * right..(l + 1) * rows * right];
        gemm(rows, j, right, m.data(), transpose, a, false, c, false);
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Truncated HOSVD: factor `i` holds the leading `ranks[i]` left singular
/// vectors of the mode-`i` unfolding; the core is `w` projected onto them.
pub fn tucker_decompose(w: &Tensor<f64>, ranks: [usize; 4]) -> Result<TuckerFactors<f64>> {
    if w.ndim() != 4 {
        return Err(TensorError::NotRank4(w.ndim()));
    }
    for (mode, (&rank, &dim)) in ranks.iter().zip(w.shape()).enumerate() {
        if rank == 0 {
            return Err(TensorError::ZeroRank(mode));
        }
        if rank > dim {
            return Err(TensorError::RankExceedsDim { mode, rank, dim });
        }
    }
    let mut factors: Vec<Tensor<f64>> = Vec::with_capacity(4);
    for (mode, &rank) in ranks.iter().enumerate() {
        let m = unfold(w, mode)?;
        let mut u = svd(&m)?.u;
        if u.shape()[1] < rank {
            u = extend_columns(&u, rank);
        }
        let k = u.shape()[1];
        let dim = w.shape()[mode];
        let u = u.data();
        let lead: Vec<f64> = (0..dim)
            .flat_map(|i| u[i * k..i * k + rank].iter().copied())
            .collect();
        factors.push(Tensor::from_parts(vec![dim, rank], lead));
    }
    let mut core = w.clone();
    for (mode, f) in factors.iter().enumerate() {
        core = mode_product(&core, f, mode, true)?;
    }
    let factors: [Tensor<f64>; 4] = factors.try_into().expect("four factors");
    Ok(TuckerFactors { core, factors })
}

/// Contracts the core with all four factors, giving a tensor of shape `dims()`.
pub fn tucker_reconstruct<T: Real>(f: &TuckerFactors<T>) -> Result<Tensor<T>> {
    f.validate()?;
    let mut out = f.core.clone();
    for (mode, factor) in f.factors.iter().enumerate() {
        out = mode_product(&out, factor, mode, false)?;
    }
    Ok(out)
}
