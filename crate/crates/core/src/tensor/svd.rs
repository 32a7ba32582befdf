//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Rotations are applied to the columns of whichever orientation of the input
//! has fewer columns, so the accumulated rotation matrix is the small one.
//! The sweep order is fixed and no randomness is involved, so identical
//! inputs give bit-identical factors.

use super::{Result, Tensor, TensorError};

/// Singular values at or below `RANK_CUTOFF * sigma_max` count as zero.
pub const RANK_CUTOFF: f64 = 1e-12;

const MAX_SWEEPS: usize = 80;

/// `m = u * diag(s) * vt` with `k = min(p, q)`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `p x k`, orthonormal columns.
    pub u: Tensor<f64>,
    /// Nonincreasing, nonnegative.
    pub s: Vec<f64>,
    /// `k x q`, orthonormal rows.
    pub vt: Tensor<f64>,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Tensor<f64> {
        let (p, k) = (self.u.shape()[0], self.u.shape()[1]);
        let q = self.vt.shape()[1];
        let mut us = self.u.data().to_vec();
        for row in us.chunks_mut(k) {
            for (v, s) in row.iter_mut().zip(&self.s) {
                *v *= s;
            }
        }
        let mut out = vec![0.0; p * q];
        super::gemm(p, k, q, &us, false, self.vt.data(), false, &mut out, false);
        Tensor::from_parts(vec![p, q], out)
    }

    pub fn rank(&self) -> usize {
        effective_rank(&self.s)
    }
}

/// Number of singular values above the relative cutoff.
pub fn effective_rank(s: &[f64]) -> usize {
    let max = s.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > RANK_CUTOFF * max).count()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Runs Jacobi sweeps over `cols` (each of length `len`), accumulating the
/// rotations into `v` (`cols.len()` square, stored as columns).
fn jacobi_sweeps(cols: &mut [Vec<f64>], v: &mut [Vec<f64>]) {
    let n = cols.len();
    let len = cols.first().map_or(0, Vec::len);
    let tol = f64::EPSILON * (len.max(1) as f64).sqrt();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&cols[i], &cols[j]);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(j);
                rotate(&mut lo[i], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(j);
                rotate(&mut lo[i], &mut hi[0], c, s);
            }
        }
        if !rotated {
            break;
        }
    }
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Normalizes `vecs` in place and re-orthogonalizes them by two passes of
/// modified Gram-Schmidt, replacing vectors that carry no usable direction
/// with completions from the standard basis.
fn orthonormalize(vecs: &mut [Vec<f64>], norms: &[f64], sigma_max: f64) {
    let len = vecs.first().map_or(0, Vec::len);
    for idx in 0..vecs.len() {
        let degenerate = norms[idx] <= RANK_CUTOFF * sigma_max || norms[idx] == 0.0;
        if degenerate {
            vecs[idx] = vec![0.0; len];
        } else {
            let inv = 1.0 / norms[idx];
            vecs[idx].iter_mut().for_each(|x| *x *= inv);
        }
        let (done, rest) = vecs.split_at_mut(idx);
        let cur = &mut rest[0];
        let mut ok = !degenerate;
        if ok {
            for _ in 0..2 {
                for prev in done.iter() {
                    let d = dot(cur, prev);
                    cur.iter_mut().zip(prev).for_each(|(c, p)| *c -= d * p);
                }
            }
            let n = dot(cur, cur).sqrt();
            if n < 0.5 {
                ok = false;
            } else {
                cur.iter_mut().for_each(|x| *x /= n);
            }
        }
        if !ok {
            *cur = basis_completion(done, len);
        }
    }
}

/// First standard basis vector with a usable residual against `done`,
/// orthogonalized and normalized.
fn basis_completion(done: &[Vec<f64>], len: usize) -> Vec<f64> {
    for e in 0..len {
        let mut cand = vec![0.0; len];
        cand[e] = 1.0;
        for _ in 0..2 {
            for prev in done {
                let d = dot(&cand, prev);
                cand.iter_mut().zip(prev).for_each(|(c, p)| *c -= d * p);
            }
        }
        let n = dot(&cand, &cand).sqrt();
        if n > 0.5 {
            cand.iter_mut().for_each(|x| *x /= n);
            return cand;
        }
    }
    vec![0.0; len]
}

/// Extends the orthonormal columns of `u` (`p x k`) to `p x cols` with
/// standard-basis completions. Requires `k <= cols <= p`.
pub(crate) fn extend_columns(u: &Tensor<f64>, cols: usize) -> Tensor<f64> {
    let (p, k) = (u.shape()[0], u.shape()[1]);
    let mut vecs: Vec<Vec<f64>> = (0..k)
        .map(|j| (0..p).map(|i| u.data()[i * k + j]).collect())
        .collect();
    while vecs.len() < cols {
        let v = basis_completion(&vecs, p);
        vecs.push(v);
    }
    Tensor::from_fn(&[p, cols], |i| vecs[i[1]][i[0]])
}

/// Thin SVD of a finite `p x q` matrix.
///
/// Each left singular vector is signed so that its largest-magnitude entry
/// (first one on ties) is positive; the matching row of `vt` flips with it.
pub fn svd(m: &Tensor<f64>) -> Result<SvdResult> {
    if m.ndim() != 2 {
        return Err(TensorError::NotAMatrix(m.ndim()));
    }
    if !m.is_finite() {
        return Err(TensorError::NonFinite);
    }
    let (p, q) = (m.shape()[0], m.shape()[1]);
    let k = p.min(q);
    let data = m.data();

    // Rotate the columns of A (tall) or of A^T (wide); either way there are k of them.
    let tall = p >= q;
    let mut cols: Vec<Vec<f64>> = if tall {
        (0..q)
            .map(|j| (0..p).map(|i| data[i * q + j]).collect())
            .collect()
    } else {
        data.chunks(q).map(<[f64]>::to_vec).collect()
    };
    let mut rot: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut e = vec![0.0; k];
            e[j] = 1.0;
            e
        })
        .collect();
    jacobi_sweeps(&mut cols, &mut rot);

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let s: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    let sigma_max = s.first().copied().unwrap_or(0.0);

    let mut long: Vec<Vec<f64>> = order.iter().map(|&i| cols[i].clone()).collect();
    let short: Vec<Vec<f64>> = order.iter().map(|&i| rot[i].clone()).collect();
    orthonormalize(&mut long, &s, sigma_max);

    // tall: U = normalized columns, V = rotations. wide: roles swap.
    let (mut left, mut right) = if tall { (long, short) } else { (short, long) };
    debug_assert_eq!(left.first().map_or(p, Vec::len), p);
    debug_assert_eq!(right.first().map_or(q, Vec::len), q);

    for (l, r) in left.iter_mut().zip(right.iter_mut()) {
        let mut best = 0usize;
        for (i, x) in l.iter().enumerate() {
            if x.abs() > l[best].abs() {
                best = i;
            }
        }
        if l.get(best).is_some_and(|&x| x < 0.0) {
            l.iter_mut().for_each(|x| *x = -*x);
            r.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let mut u = vec![0.0; p * k];
    for (j, col) in left.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            u[i * k + j] = x;
        }
    }
    let vt: Vec<f64> = right.into_iter().flatten().collect();
    Ok(SvdResult {
        u: Tensor::from_parts(vec![p, k], u),
        s,
        vt: Tensor::from_parts(vec![k, q], vt),
    })
}
