//! Small dense linear algebra on [`Tensor`] matrices: Cholesky factorization,
//! SPD inversion and symmetric helpers.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_into, MatRef, Tensor};

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for (i, slot) in acc.iter_mut().enumerate() {
            *slot += a[4 * c + i] * b[4 * c + i];
        }
    }
    let mut s = acc[0] + acc[1] + acc[2] + acc[3];
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, m) = a.dims2();
    if n != m {
        return Err(Error::Shape(format!("cholesky of non-square {n}x{m}")));
    }
    let ad = a.data();
    let mut l = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let s = dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            let v = ad[i * n + j] - s;
            if i == j {
                if !(v > S::zero()) || !v.is_finite() {
                    return Err(Error::NotPositiveDefinite(format!("pivot {i} = {v}")));
                }
                l[i * n + i] = v.sqrt();
            } else {
                l[i * n + j] = v / l[j * n + j];
            }
        }
    }
    Ok(Tensor::new(&[n, n], l))
}

/// Cholesky-like factor of a positive *semi*-definite matrix: pivots below
/// `tol` (relative to the largest diagonal) are treated as exact zeros, so a
/// zero matrix factors to zero. Pivots below `-tol` are an error.
pub fn psd_factor<S: Scalar>(a: &Tensor<S>, tol: f64) -> Result<Tensor<S>> {
    let (n, m) = a.dims2();
    if n != m {
        return Err(Error::Shape(format!("factor of non-square {n}x{m}")));
    }
    let ad = a.data();
    let scale = (0..n).fold(S::zero(), |acc, i| acc.max(ad[i * n + i].abs()));
    let thresh = S::lit(tol) * scale.max(S::min_positive_value());
    let mut l = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let s = dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            let v = ad[i * n + j] - s;
            if i == j {
                if v < -thresh || !v.is_finite() {
                    return Err(Error::NotPositiveDefinite(format!("pivot {i} = {v}")));
                }
                l[i * n + i] = if v > thresh { v.sqrt() } else { S::zero() };
            } else {
                let d = l[j * n + j];
                l[i * n + j] = if d > S::zero() { v / d } else { S::zero() };
            }
        }
    }
    Ok(Tensor::new(&[n, n], l))
}

/// Matrices at or below this size are inverted directly.
const INVERSE_BLOCK: usize = 32;

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    spd_inverse_logdet(a).map(|(inv, _)| inv)
}

/// Inverse and log-determinant of a symmetric positive definite matrix.
///
/// Uses the block identity with the Schur complement `S = C - B^T A^{-1} B`,
/// so most of the work runs through `gemm`; blocks of at most
/// [`INVERSE_BLOCK`] rows are inverted by Gauss-Jordan elimination, which
/// needs no pivoting for SPD input. A non-positive pivot is reported as an error.
pub fn spd_inverse_logdet<S: Scalar>(a: &Tensor<S>) -> Result<(Tensor<S>, S)> {
    let (n, m) = a.dims2();
    if n != m {
        return Err(Error::Shape(format!("inverse of non-square {n}x{m}")));
    }
    let (inv, logdet) = block_inverse(a.data(), n)?;
    let mut out = Tensor::new(&[n, n], inv);
    symmetrize_in_place(&mut out);
    Ok((out, logdet))
}

fn block_inverse<S: Scalar>(a: &[S], n: usize) -> Result<(Vec<S>, S)> {
    if n <= INVERSE_BLOCK {
        return gauss_jordan(a, n);
    }
    let n1 = n / 2;
    let n2 = n - n1;
    let block = |r0: usize, c0: usize, r: usize, c: usize| {
        let mut out = Vec::with_capacity(r * c);
        for i in r0..r0 + r {
            out.extend_from_slice(&a[i * n + c0..i * n + c0 + c]);
        }
        out
    };
    let top = block(0, 0, n1, n1);
    let b = block(0, n1, n1, n2);
    let c = block(n1, n1, n2, n2);
    let (a_inv, ld_a) = block_inverse(&top, n1)?;
    // X = A^{-1} B, Schur complement S = C - B^T X.
    let mut x = vec![S::zero(); n1 * n2];
    gemm_into(S::one(), MatRef::raw(&a_inv, n1, n1), MatRef::raw(&b, n1, n2), S::zero(), &mut x);
    let mut schur = c;
    gemm_into(-S::one(), MatRef::raw(&b, n1, n2).t(), MatRef::raw(&x, n1, n2), S::one(), &mut schur);
    let (s_inv, ld_s) = block_inverse(&schur, n2)?;
    // Off-diagonal block -X S^{-1}; top-left A^{-1} + X S^{-1} X^T.
    let mut off = vec![S::zero(); n1 * n2];
    gemm_into(-S::one(), MatRef::raw(&x, n1, n2), MatRef::raw(&s_inv, n2, n2), S::zero(), &mut off);
    let mut tl = a_inv;
    gemm_into(-S::one(), MatRef::raw(&off, n1, n2), MatRef::raw(&x, n1, n2).t(), S::one(), &mut tl);
    let mut out = vec![S::zero(); n * n];
    for i in 0..n1 {
        out[i * n..i * n + n1].copy_from_slice(&tl[i * n1..(i + 1) * n1]);
        out[i * n + n1..(i + 1) * n].copy_from_slice(&off[i * n2..(i + 1) * n2]);
    }
    for i in 0..n2 {
        for j in 0..n1 {
            out[(n1 + i) * n + j] = off[j * n2 + i];
        }
        out[(n1 + i) * n + n1..(n1 + i + 1) * n].copy_from_slice(&s_inv[i * n2..(i + 1) * n2]);
    }
    Ok((out, ld_a + ld_s))
}

fn gauss_jordan<S: Scalar>(a: &[S], n: usize) -> Result<(Vec<S>, S)> {
    let mut w = a.to_vec();
    let mut pivot_row = vec![S::zero(); n];
    let mut logdet = S::zero();
    for k in 0..n {
        let p = w[k * n + k];
        if !(p > S::zero()) || !p.is_finite() {
            return Err(Error::NotPositiveDefinite(format!("pivot {k} = {p}")));
        }
        logdet += p.ln();
        let inv_p = S::one() / p;
        for v in &mut w[k * n..(k + 1) * n] {
            *v *= inv_p;
        }
        w[k * n + k] = inv_p;
        pivot_row.copy_from_slice(&w[k * n..(k + 1) * n]);
        for i in 0..n {
            if i == k {
                continue;
            }
            let row = &mut w[i * n..(i + 1) * n];
            let f = row[k];
            if f == S::zero() {
                continue;
            }
            for (r, q) in row.iter_mut().zip(&pivot_row) {
                *r -= f * *q;
            }
            row[k] = -f * inv_p;
        }
    }
    Ok((w, logdet))
}

/// `log det A` for SPD `A`.
pub fn spd_logdet<S: Scalar>(a: &Tensor<S>) -> Result<S> {
    let l = cholesky(a)?;
    let (n, _) = l.dims2();
    Ok((0..n).map(|i| l.data()[i * n + i].ln()).sum::<S>() * S::lit(2.0))
}

pub fn symmetrize_in_place<S: Scalar>(a: &mut Tensor<S>) {
    let (n, m) = a.dims2();
    assert_eq!(n, m);
    let d = a.data_mut();
    let half = S::lit(0.5);
    for i in 0..n {
        for j in i + 1..n {
            let v = half * (d[i * n + j] + d[j * n + i]);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
}

pub fn add_diagonal<S: Scalar>(a: &mut Tensor<S>, value: S) {
    let (n, m) = a.dims2();
    assert_eq!(n, m);
    let d = a.data_mut();
    for i in 0..n {
        d[i * n + i] += value;
    }
}

/// Largest absolute asymmetry `|A_ij - A_ji|`.
pub fn asymmetry<S: Scalar>(a: &Tensor<S>) -> S {
    let (n, _) = a.dims2();
    let d = a.data();
    let mut worst = S::zero();
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((d[i * n + j] - d[j * n + i]).abs());
        }
    }
    worst
}

pub fn mat_vec<S: Scalar>(a: &Tensor<S>, x: &[S]) -> Vec<S> {
    let (n, m) = a.dims2();
    assert_eq!(m, x.len());
    (0..n).map(|i| dot(&a.data()[i * m..(i + 1) * m], x)).collect()
}
