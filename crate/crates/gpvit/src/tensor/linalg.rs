//! Matrix ops, softmax, layer norm, and row/column surgery.

use rayon::prelude::*;

use super::Tensor;
use crate::scalar::{s, Scalar};

/// Parallelize the outer loop only above this many multiply-accumulates.
const PAR_THRESHOLD: usize = 1 << 18;

/// `C[m x n] = A[m x k] * B[k x n]`. Row-major, k-innermost ordering; rows are
/// computed independently, so results are bit-identical at any thread count.
pub(crate) fn matmul_raw<E: Scalar>(
    a: &[E],
    b: &[E],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    let row_op = |(i, row): (usize, &mut [E])| {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == E::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row_op);
    } else {
        out.chunks_mut(n).enumerate().for_each(row_op);
    }
    out
}

/// `C[m x n] = A[m x k] * B^T` where `B` is `[n x k]`.
pub(crate) fn matmul_nt_raw<E: Scalar>(
    a: &[E],
    b: &[E],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    let row_op = |(i, row): (usize, &mut [E])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row_op);
    } else {
        out.chunks_mut(n).enumerate().for_each(row_op);
    }
    out
}

/// `C[k x n] = A^T * B` where `A` is `[m x k]`, `B` is `[m x n]`.
pub(crate) fn matmul_tn_raw<E: Scalar>(
    a: &[E],
    b: &[E],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<E> {
    let mut out = vec![E::zero(); k * n];
    for i in 0..m {
        for p in 0..k {
            let api = a[i * k + p];
            if api == E::zero() {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    out
}

impl<E: Scalar> Tensor<E> {
    /// Standard matrix product of rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<E>) -> Tensor<E> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        assert_eq!(
            k, k2,
            "matmul: inner dimensions disagree, {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let data = matmul_raw(self.data(), other.data(), m, k, n);
        Tensor::op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents, store| {
                // dA = G * B^T, dB = A^T * G
                let da = matmul_nt_raw(g, parents[1].data(), m, n, k);
                let db = matmul_tn_raw(parents[0].data(), g, m, k, n);
                store.accumulate(&parents[0], &da);
                store.accumulate(&parents[1], &db);
            }),
        )
    }

    pub fn transpose(&self) -> Tensor<E> {
        let (m, n) = (self.rows(), self.cols());
        let src = self.data();
        let mut data = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Tensor::op(
            vec![n, m],
            data,
            vec![self.clone()],
            Box::new(move |g, parents, store| {
                let mut dx = vec![E::zero(); m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                store.accumulate(&parents[0], &dx);
            }),
        )
    }

    /// Row-wise softmax of an `[N, C]` tensor, computed with max subtraction.
    pub fn softmax_rows(&self) -> Tensor<E> {
        let (n, c) = (self.rows(), self.cols());
        let mut data = vec![E::zero(); n * c];
        for r in 0..n {
            let row = &self.data()[r * c..(r + 1) * c];
            let out = &mut data[r * c..(r + 1) * c];
            softmax_into(row, out);
        }
        Tensor::op(
            vec![n, c],
            data.clone(),
            vec![self.clone()],
            Box::new(move |g, parents, store| {
                // dx = y * (g - sum(g * y)) per row
                let y = &data;
                let mut dx = vec![E::zero(); n * c];
                for r in 0..n {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .fold(E::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                    for j in 0..c {
                        dx[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                store.accumulate(&parents[0], &dx);
            }),
        )
    }

    /// Row-wise log-softmax (stable), for cross-entropy losses.
    pub fn log_softmax_rows(&self) -> Tensor<E> {
        let (n, c) = (self.rows(), self.cols());
        let mut data = vec![E::zero(); n * c];
        for r in 0..n {
            let row = &self.data()[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let logsum = row
                .iter()
                .fold(E::zero(), |acc, &x| acc + (x - max).exp())
                .ln()
                + max;
            for j in 0..c {
                data[r * c + j] = row[j] - logsum;
            }
        }
        Tensor::op(
            vec![n, c],
            data.clone(),
            vec![self.clone()],
            Box::new(move |g, parents, store| {
                // dx = g - softmax(x) * sum(g) per row
                let mut dx = vec![E::zero(); n * c];
                for r in 0..n {
                    let lr = &data[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let gsum = gr.iter().fold(E::zero(), |a, &b| a + b);
                    for j in 0..c {
                        dx[r * c + j] = gr[j] - lr[j].exp() * gsum;
                    }
                }
                store.accumulate(&parents[0], &dx);
            }),
        )
    }

    /// Per-row layer normalization over the last axis with affine transform.
    pub fn layer_norm(&self, gain: &Tensor<E>, bias: &Tensor<E>, eps: f64) -> Tensor<E> {
        assert!(eps > 0.0, "layer_norm: eps must be positive");
        let (n, c) = (self.rows(), self.cols());
        assert_eq!(gain.numel(), c, "layer_norm: gain length {} vs {} channels", gain.numel(), c);
        assert_eq!(bias.numel(), c, "layer_norm: bias length {} vs {} channels", bias.numel(), c);
        let epse: E = s(eps);
        let invc: E = s(1.0 / c as f64);
        let gd = gain.data();
        let bd = bias.data();
        let mut data = vec![E::zero(); n * c];
        let mut means = vec![E::zero(); n];
        let mut inv_stds = vec![E::zero(); n];
        for r in 0..n {
            let row = &self.data()[r * c..(r + 1) * c];
            let mean = row.iter().fold(E::zero(), |a, &b| a + b) * invc;
            let var = row
                .iter()
                .fold(E::zero(), |a, &b| a + (b - mean) * (b - mean))
                * invc;
            let inv_std = (var + epse).sqrt().recip();
            means[r] = mean;
            inv_stds[r] = inv_std;
            for j in 0..c {
                data[r * c + j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
        Tensor::op(
            vec![n, c],
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, parents, store| {
                let x = parents[0].data();
                let gd = parents[1].data();
                let mut dx = vec![E::zero(); n * c];
                let mut dgain = vec![E::zero(); c];
                let mut dbias = vec![E::zero(); c];
                for r in 0..n {
                    let xr = &x[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mean = means[r];
                    let inv_std = inv_stds[r];
                    // xhat_j = (x_j - mean) * inv_std
                    let mut sum_gy = E::zero(); // sum of g*gain
                    let mut sum_gyx = E::zero(); // sum of g*gain*xhat
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * inv_std;
                        let gg = gr[j] * gd[j];
                        sum_gy += gg;
                        sum_gyx += gg * xhat;
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                    }
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * inv_std;
                        let gg = gr[j] * gd[j];
                        dx[r * c + j] =
                            inv_std * (gg - invc * sum_gy - xhat * invc * sum_gyx);
                    }
                }
                store.accumulate(&parents[0], &dx);
                store.accumulate(&parents[1], &dgain);
                store.accumulate(&parents[2], &dbias);
            }),
        )
    }

    /// Concatenate along columns: `[N, C1]` + `[N, C2]` -> `[N, C1 + C2]`.
    pub fn concat_cols(&self, other: &Tensor<E>) -> Tensor<E> {
        let (n, c1) = (self.rows(), self.cols());
        let (n2, c2) = (other.rows(), other.cols());
        assert_eq!(n, n2, "concat_cols: row mismatch {:?} vs {:?}", self.shape(), other.shape());
        let mut data = Vec::with_capacity(n * (c1 + c2));
        for r in 0..n {
            data.extend_from_slice(&self.data()[r * c1..(r + 1) * c1]);
            data.extend_from_slice(&other.data()[r * c2..(r + 1) * c2]);
        }
        Tensor::op(
            vec![n, c1 + c2],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents, store| {
                let c = c1 + c2;
                let mut da = vec![E::zero(); n * c1];
                let mut db = vec![E::zero(); n * c2];
                for r in 0..n {
                    da[r * c1..(r + 1) * c1].copy_from_slice(&g[r * c..r * c + c1]);
                    db[r * c2..(r + 1) * c2].copy_from_slice(&g[r * c + c1..(r + 1) * c]);
                }
                store.accumulate(&parents[0], &da);
                store.accumulate(&parents[1], &db);
            }),
        )
    }

    /// Concatenate along rows: `[N1, C]` + `[N2, C]` -> `[N1 + N2, C]`.
    pub fn concat_rows(&self, other: &Tensor<E>) -> Tensor<E> {
        let (n1, c) = (self.rows(), self.cols());
        let (n2, c2) = (other.rows(), other.cols());
        assert_eq!(c, c2, "concat_rows: column mismatch {:?} vs {:?}", self.shape(), other.shape());
        let mut data = Vec::with_capacity((n1 + n2) * c);
        data.extend_from_slice(self.data());
        data.extend_from_slice(other.data());
        Tensor::op(
            vec![n1 + n2, c],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents, store| {
                store.accumulate(&parents[0], &g[..n1 * c]);
                store.accumulate(&parents[1], &g[n1 * c..]);
            }),
        )
    }

    /// Columns `[lo, hi)` of an `[N, C]` tensor.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Tensor<E> {
        let (n, c) = (self.rows(), self.cols());
        assert!(lo < hi && hi <= c, "slice_cols: [{lo}, {hi}) out of {c} columns");
        let w = hi - lo;
        let mut data = Vec::with_capacity(n * w);
        for r in 0..n {
            data.extend_from_slice(&self.data()[r * c + lo..r * c + hi]);
        }
        Tensor::op(
            vec![n, w],
            data,
            vec![self.clone()],
            Box::new(move |g, parents, store| {
                let mut dx = vec![E::zero(); n * c];
                for r in 0..n {
                    dx[r * c + lo..r * c + hi].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                store.accumulate(&parents[0], &dx);
            }),
        )
    }

    /// Gather rows by index (repeats allowed). Backward scatter-adds.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor<E> {
        let (n, c) = (self.rows(), self.cols());
        for &i in indices {
            assert!(i < n, "select_rows: index {i} out of {n} rows");
        }
        let idx = indices.to_vec();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(&self.data()[i * c..(i + 1) * c]);
        }
        let m = idx.len();
        Tensor::op(
            vec![m, c],
            data,
            vec![self.clone()],
            Box::new(move |g, parents, store| {
                let dx = store.slot_mut(&parents[0]);
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += g[r * c + j];
                    }
                }
            }),
        )
    }
}

pub(crate) fn softmax_into<E: Scalar>(row: &[E], out: &mut [E]) {
    let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
    let mut sum = E::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    let inv = sum.recip();
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}
