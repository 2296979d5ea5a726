//! Dense matrix kernels.
//!
//! Every kernel has a sequential form and, with the `parallel` feature, a
//! rayon form that splits the output by rows. Each output element is
//! accumulated in the same order either way, so both forms are bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds the dispatcher stays sequential.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 18;

#[inline]
fn axpy_row(out: &mut [f64], a: f64, row: &[f64]) {
    for (o, &r) in out.iter_mut().zip(row) {
        *o += a * r;
    }
}

fn matmul_rows(a: &[f64], b: &[f64], k: usize, m: usize, out: &mut [f64]) {
    for (a_row, c_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        for (p, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                axpy_row(c_row, av, &b[p * m..(p + 1) * m]);
            }
        }
    }
}

/// `C[n,m] = A[n,k] · B[k,m]`, single-threaded.
pub fn matmul_seq(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    if k > 0 && m > 0 {
        matmul_rows(a, b, k, m, &mut out);
    }
    out
}

/// `C[n,m] = A[n,k] · B[k,m]`, rows split across the rayon pool.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    if k == 0 || m == 0 {
        return out;
    }
    let chunk_rows = n.div_ceil(rayon::current_num_threads() * 4).max(1);
    out.par_chunks_mut(chunk_rows * m)
        .zip(a.par_chunks(chunk_rows * k))
        .for_each(|(c, a)| matmul_rows(a, b, k, m, c));
    out
}

pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if n * k * m >= PAR_THRESHOLD {
        return matmul_par(a, b, n, k, m);
    }
    matmul_seq(a, b, n, k, m)
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `C[n,m] = A[n,k] · B[m,k]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let bt = transpose(b, m, k);
    matmul(a, &bt, n, k, m)
}

fn matmul_tn_rows(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, rows: std::ops::Range<usize>, out: &mut [f64]) {
    for p in 0..n {
        let a_row = &a[p * k..(p + 1) * k];
        let b_row = &b[p * m..(p + 1) * m];
        for (i, c_row) in rows.clone().zip(out.chunks_exact_mut(m)) {
            let av = a_row[i];
            if av != 0.0 {
                axpy_row(c_row, av, b_row);
            }
        }
    }
}

/// `C[k,m] = A[n,k]ᵀ · B[n,m]`, single-threaded.
pub fn matmul_tn_seq(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    if m > 0 {
        matmul_tn_rows(a, b, n, k, m, 0..k, &mut out);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_tn_par(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    if m == 0 {
        return out;
    }
    let chunk_rows = k.div_ceil(rayon::current_num_threads() * 2).max(1);
    out.par_chunks_mut(chunk_rows * m)
        .enumerate()
        .for_each(|(ci, c)| {
            let start = ci * chunk_rows;
            let end = (start + chunk_rows).min(k);
            matmul_tn_rows(a, b, n, k, m, start..end, c);
        });
    out
}

pub fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if n * k * m >= PAR_THRESHOLD {
        return matmul_tn_par(a, b, n, k, m);
    }
    matmul_tn_seq(a, b, n, k, m)
}
