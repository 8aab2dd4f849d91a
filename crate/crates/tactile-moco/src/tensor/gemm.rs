//! Small dense matrix kernels, row-major, accumulate-into-C.
//!
//! Three layouts cover every use in the crate: NN for the forward im2col
//! convolution and input gradients, NT for dot-product style products
//! against row-major weight matrices, TN for weight gradients. All loops
//! have a fixed iteration order, so results are bit-identical across runs
//! and thread counts (parallel split is over disjoint C rows).

use super::Scalar;
use crate::parallel;

const COL_TILE: usize = 1024;

/// C[m,n] += A[m,k] * B[k,n]
pub fn gemm_nn<E: Scalar>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let row_job = |i: usize, crow: &mut [E]| {
        let arow = &a[i * k..(i + 1) * k];
        for j0 in (0..n).step_by(COL_TILE) {
            let j1 = (j0 + COL_TILE).min(n);
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &b[kk * n + j0..kk * n + j1];
                let ctile = &mut crow[j0..j1];
                for (cv, &bv) in ctile.iter_mut().zip(brow) {
                    *cv = av.mul_add(bv, *cv);
                }
            }
        }
    };
    if should_split(m, k, n) {
        parallel::for_each_chunk_mut(c, n, row_job);
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row_job(i, crow);
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T  (dot products of A rows with B rows)
pub fn gemm_nt<E: Scalar>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let row_job = |i: usize, crow: &mut [E]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = av.mul_add(bv, acc);
            }
            *cv += acc;
        }
    };
    if should_split(m, k, n) {
        parallel::for_each_chunk_mut(c, n, row_job);
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row_job(i, crow);
        }
    }
}

/// C[m,n] += A[p,m]^T * B[p,n]  (sum of outer products over A/B rows)
pub fn gemm_tn<E: Scalar>(c: &mut [E], a: &[E], b: &[E], p: usize, m: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    // Serial over p (accumulation order matters); vectorized inner rows.
    for r in 0..p {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = av.mul_add(bv, *cv);
            }
        }
    }
}

fn should_split(m: usize, k: usize, n: usize) -> bool {
    parallel::num_threads() > 1 && m >= 2 && m * k * n >= 1 << 18
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn arange(len: usize) -> Vec<f64> {
        (0..len).map(|i| (i as f64) * 0.1 - 3.0).collect()
    }

    #[test]
    fn nn_matches_naive() {
        let (m, k, n) = (3, 5, 4);
        let a = arange(m * k);
        let b = arange(k * n);
        let mut c = vec![0.0; m * n];
        gemm_nn(&mut c, &a, &b, m, k, n);
        let want = naive(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn nt_matches_naive() {
        let (m, k, n) = (4, 3, 5);
        let a = arange(m * k);
        let bt = arange(n * k);
        // b[p, j] = bt[j, p]
        let mut b = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                b[p * n + j] = bt[j * k + p];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_nt(&mut c, &a, &bt, m, k, n);
        let want = naive(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tn_matches_naive() {
        let (p, m, n) = (6, 3, 4);
        let at = arange(p * m);
        let b = arange(p * n);
        // a[i, r] = at[r, i]
        let mut a = vec![0.0; m * p];
        for r in 0..p {
            for i in 0..m {
                a[i * p + r] = at[r * m + i];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_tn(&mut c, &at, &b, p, m, n);
        let want = naive(&a, &b, m, p, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
