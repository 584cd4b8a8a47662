//! Raw numeric kernels on flat `f64` slices.
//!
//! Both the autodiff graph and the no-tape inference path call into these,
//! so the two paths share bit-identical arithmetic. Matmuls use an i-k-j
//! loop order so the inner loop runs over contiguous memory.

/// out[m,n] += a[m,k] @ b[k,n]
pub fn matmul_nn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> alloc::vec::Vec<f64> {
    let mut out = alloc::vec![0.0; m * n];
    matmul_nn_acc(a, b, &mut out, m, k, n);
    out
}

/// out[m,n] += a[m,k] @ b[n,k]^T
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T @ b[m,n]
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// Row-wise softmax in place over `cols`-wide rows.
pub fn softmax_rows(x: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let mut mx = f64::NEG_INFINITY;
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - mx);
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Row-wise layer norm: y = (x - mean) / sqrt(var + eps) * gamma + beta.
/// Returns per-row (mean, inv_std) for the backward pass.
pub fn layer_norm_rows(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
    rows: usize,
    cols: usize,
    eps: f64,
) -> alloc::vec::Vec<(f64, f64)> {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(gamma.len(), cols);
    debug_assert_eq!(beta.len(), cols);
    let mut stats = alloc::vec::Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let mut var = 0.0;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var /= cols as f64;
        let inv_std = 1.0 / libm::sqrt(var + eps);
        let orow = &mut out[r * cols..(r + 1) * cols];
        for c in 0..cols {
            orow[c] = (row[c] - mean) * inv_std * gamma[c] + beta[c];
        }
        stats.push((mean, inv_std));
    }
    stats
}

/// scores[b*s + i, j] = q_i . k_j / sqrt(dh), per batch item.
/// q and k are [batch*seq, dh] flat; output is [batch*seq, seq].
pub fn attn_scores(q: &[f64], k: &[f64], batch: usize, seq: usize, dh: usize) -> alloc::vec::Vec<f64> {
    let mut out = alloc::vec![0.0; batch * seq * seq];
    let scale = 1.0 / libm::sqrt(dh as f64);
    for b in 0..batch {
        let qb = &q[b * seq * dh..(b + 1) * seq * dh];
        let kb = &k[b * seq * dh..(b + 1) * seq * dh];
        let ob = &mut out[b * seq * seq..(b + 1) * seq * seq];
        matmul_nt_acc(qb, kb, ob, seq, dh, seq);
        for v in ob.iter_mut() {
            *v *= scale;
        }
    }
    out
}

/// ctx[b*s + i, :] = sum_j p[b*s + i, j] * v[b*s + j, :], per batch item.
pub fn attn_apply(p: &[f64], v: &[f64], batch: usize, seq: usize, dh: usize) -> alloc::vec::Vec<f64> {
    let mut out = alloc::vec![0.0; batch * seq * dh];
    for b in 0..batch {
        let pb = &p[b * seq * seq..(b + 1) * seq * seq];
        let vb = &v[b * seq * dh..(b + 1) * seq * dh];
        let ob = &mut out[b * seq * dh..(b + 1) * seq * dh];
        matmul_nn_acc(pb, vb, ob, seq, seq, dh);
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}
