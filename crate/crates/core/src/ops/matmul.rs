//! Small dense matmul kernels. Row-major everywhere.
//!
//! Each output row is produced by one task with a fixed accumulation order,
//! so results do not depend on the thread count.

use crate::par;
use crate::scalar::Scalar;

/// `C[m,n] = A[m,k] * B[k,n]`, writing into `out`. Sequential; callers that
/// want parallelism split work above this (per sample, per head, per row).
pub fn matmul_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.fill(T::zero());
        for (l, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// `C[m,n] = A[m,k] * B[k,n]`, parallel over output rows.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    par::for_each_chunk_mut(&mut out, n, |i, row| {
        for (l, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    });
    out
}

/// Unrolled dot product; eight independent accumulators folded in a fixed
/// order so the result is reproducible.
#[inline]
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [T::zero(); 8];
    let main = x.len() / 8 * 8;
    let mut i = 0;
    while i < main {
        for lane in 0..8 {
            acc[lane] += x[i + lane] * y[i + lane];
        }
        i += 8;
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for j in main..x.len() {
        s += x[j] * y[j];
    }
    s
}

/// `C[m,n] = A[m,k] * B^T` where `B` is stored `[n,k]`. Sequential.
pub fn matmul_bt_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let row = &mut out[i * n..(i + 1) * n];
        for (j, cv) in row.iter_mut().enumerate() {
            *cv = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

pub fn matmul_bt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    let mut out = vec![T::zero(); m * n];
    par::for_each_chunk_mut(&mut out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in row.iter_mut().enumerate() {
            *cv = dot(arow, &b[j * k..(j + 1) * k]);
        }
    });
    out
}

/// `C[m,n] = A^T * B` where `A` is stored `[k,m]` and `B` is `[k,n]`. Sequential.
pub fn matmul_at_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(T::zero());
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul_at<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    matmul_at_into(a, b, m, k, n, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_2x3_3x2() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // [3,2]
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn variants_agree_with_plain_matmul() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (5, 7, 4);
        let a: Vec<f64> = (0..m * k).map(|_| f64::sample_normal(&mut rng)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| f64::sample_normal(&mut rng)).collect();

        // B^T stored as [n,k]
        let mut bt = vec![0.0; k * n];
        for l in 0..k {
            for j in 0..n {
                bt[j * k + l] = b[l * n + j];
            }
        }
        // A^T stored as [k,m]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for l in 0..k {
                at[l * m + i] = a[i * k + l];
            }
        }

        let want = matmul(&a, &b, m, k, n);
        let got_bt = matmul_bt(&a, &bt, m, k, n);
        let got_at = matmul_at(&at, &b, m, k, n);
        for i in 0..m * n {
            assert!((want[i] - got_bt[i]).abs() < 1e-12);
            assert!((want[i] - got_at[i]).abs() < 1e-12);
        }

        let mut into = vec![0.0; m * n];
        matmul_into(&a, &b, m, k, n, &mut into);
        assert_eq!(into, want);
    }
}
