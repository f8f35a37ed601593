use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`, all row-major.
pub(crate) fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c += aᵀ · b` with `a: m×k`, `b: m×n`, `c: k×n`.
pub(crate) fn gemm_tn_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

pub(crate) fn transpose<T: Real>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `y = x·w + b`, row-wise.
pub fn linear_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, din) = x.dims2()?;
    let (wi, dout) = w.dims2()?;
    if wi != din {
        return Err(Error::shape("linear_forward", x.shape(), w.shape()));
    }
    if b.shape() != [dout] {
        return Err(Error::shape("linear_forward", w.shape(), b.shape()));
    }
    let mut y = Vec::with_capacity(batch * dout);
    for _ in 0..batch {
        y.extend_from_slice(b.data());
    }
    gemm_acc(batch, din, dout, x.data(), w.data(), &mut y);
    Tensor::matrix(batch, dout, y)
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (batch, din) = x.dims2()?;
    let (wi, dout) = w.dims2()?;
    if wi != din {
        return Err(Error::shape("linear_backward", x.shape(), w.shape()));
    }
    if dy.shape() != [batch, dout] {
        return Err(Error::shape("linear_backward", &[batch, dout], dy.shape()));
    }
    let wt = transpose(din, dout, w.data());
    let mut dx = vec![T::zero(); batch * din];
    gemm_acc(batch, dout, din, dy.data(), &wt, &mut dx);
    let mut dw = vec![T::zero(); din * dout];
    gemm_tn_acc(batch, din, dout, x.data(), dy.data(), &mut dw);
    let mut db = vec![T::zero(); dout];
    for i in 0..batch {
        for (acc, &g) in db.iter_mut().zip(dy.row(i)) {
            *acc += g;
        }
    }
    Ok(LinearGrads {
        dx: Tensor::matrix(batch, din, dx)?,
        dw: Tensor::matrix(din, dout, dw)?,
        db: Tensor::vector(db),
    })
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Gates `dy` by `x > 0`; the subgradient at exactly zero is zero.
pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != dy.shape() {
        return Err(Error::shape("relu_backward", x.shape(), dy.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Column-wise max over the rows of `x: K×D`. Ties go to the lowest row.
pub fn max_pool_rows<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (k, d) = x.dims2()?;
    if k == 0 {
        return Err(Error::Empty("max_pool_rows"));
    }
    let mut best = x.row(0).to_vec();
    let mut arg = vec![0usize; d];
    for r in 1..k {
        for (c, &v) in x.row(r).iter().enumerate() {
            if v > best[c] {
                best[c] = v;
                arg[c] = r;
            }
        }
    }
    Ok((Tensor::vector(best), arg))
}

pub fn max_pool_rows_backward<T: Real>(
    argmax: &[usize],
    rows: usize,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = argmax.len();
    if dy.len() != d {
        return Err(Error::shape("max_pool_rows_backward", &[d], dy.shape()));
    }
    let mut dx = Tensor::zeros(&[rows, d]);
    for (c, (&r, &g)) in argmax.iter().zip(dy.data()).enumerate() {
        if r >= rows {
            return Err(Error::IndexOutOfRange { index: r, len: rows });
        }
        dx.data_mut()[r * d + c] += g;
    }
    Ok(dx)
}

/// Max-pool over consecutive row segments: segment `q` spans rows
/// `offsets[q]..offsets[q + 1]`. Returns pooled rows and, per output element,
/// the absolute source row.
pub fn segment_max_pool<T: Real>(
    x: &Tensor<T>,
    offsets: &[usize],
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (rows, d) = x.dims2()?;
    if offsets.last().copied() != Some(rows) || offsets[0] != 0 {
        return Err(Error::invalid(format!(
            "segment offsets must span 0..{rows}, got {:?}..{:?}",
            offsets.first(),
            offsets.last()
        )));
    }
    let q = offsets.len() - 1;
    let mut out = vec![T::zero(); q * d];
    let mut arg = vec![0usize; q * d];
    for s in 0..q {
        let (lo, hi) = (offsets[s], offsets[s + 1]);
        if hi <= lo {
            return Err(Error::Empty("segment_max_pool"));
        }
        let best = &mut out[s * d..(s + 1) * d];
        let a = &mut arg[s * d..(s + 1) * d];
        best.copy_from_slice(x.row(lo));
        a.iter_mut().for_each(|v| *v = lo);
        for r in lo + 1..hi {
            for (c, &v) in x.row(r).iter().enumerate() {
                if v > best[c] {
                    best[c] = v;
                    a[c] = r;
                }
            }
        }
    }
    Ok((Tensor::matrix(q, d, out)?, arg))
}

pub fn segment_max_pool_backward<T: Real>(
    argmax: &[usize],
    rows: usize,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (q, d) = dy.dims2()?;
    if argmax.len() != q * d {
        return Err(Error::shape("segment_max_pool_backward", &[argmax.len()], dy.shape()));
    }
    let mut dx = Tensor::zeros(&[rows, d]);
    let out = dx.data_mut();
    for (i, (&r, &g)) in argmax.iter().zip(dy.data()).enumerate() {
        out[r * d + i % d] += g;
    }
    Ok(dx)
}
