use crate::error::{Result, TensorError};
use crate::ops::broadcast::{broadcast_shape, index_map};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

/// `c += a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
}

/// `c += a · bᵀ` for `a: m×n`, `b: k×n`, `c: m×k`.
pub(crate) fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            c[i * k + p] += dot(a_row, b_row);
        }
    }
}

/// `c += aᵀ · b` for `a: m×k`, `b: m×n`, `c: k×n`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

impl Tape {
    /// Batched matrix product `[.., m, k] × [.., k, n] → [.., m, n]` with
    /// broadcasting over the leading batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(TensorError::mismatch("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape(batch_a, batch_b).ok_or_else(|| TensorError::mismatch("matmul", &sa, &sb))?;
        let nb: usize = batch.iter().product();
        let map_a = index_map(&batch, batch_a);
        let map_b = index_map(&batch, batch_b);
        let pairs: Vec<(usize, usize)> = (0..nb).map(|i| (map_a.get(i), map_b.get(i))).collect();

        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; nb * m * n];
        for (bi, &(pa, pb)) in pairs.iter().enumerate() {
            gemm_nn(
                m,
                k,
                n,
                &va[pa * m * k..(pa + 1) * m * k],
                &vb[pb * k * n..(pb + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, pairs, m, k, n }, &[a, b]))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    a: Var,
    b: Var,
    pairs: &[(usize, usize)],
    m: usize,
    k: usize,
    n: usize,
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let va = sink.value(a).data();
    let vb = sink.value(b).data();
    if let Some(ga) = sink.get(a) {
        for (bi, &(pa, pb)) in pairs.iter().enumerate() {
            gemm_nt(
                m,
                n,
                k,
                &g[bi * m * n..(bi + 1) * m * n],
                &vb[pb * k * n..(pb + 1) * k * n],
                &mut ga[pa * m * k..(pa + 1) * m * k],
            );
        }
    }
    if let Some(gb) = sink.get(b) {
        for (bi, &(pa, pb)) in pairs.iter().enumerate() {
            gemm_tn(
                m,
                k,
                n,
                &va[pa * m * k..(pa + 1) * m * k],
                &g[bi * m * n..(bi + 1) * m * n],
                &mut gb[pb * k * n..(pb + 1) * k * n],
            );
        }
    }
}
