//! Raw slice-level kernels shared by the autodiff tape and the incremental
//! decoder. Loops are arranged so the inner dimension walks contiguous
//! memory, which is what the training-time budget depends on.

use crate::scalar::Scalar;

/// `out += a (m x k) * b (k x n)`, all row-major.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * b_pj;
            }
        }
    }
}

/// `out = a * b` into a fresh buffer.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// `out += a (m x n) * b^T` where `b` is `(k x n)` row-major, giving `(m x k)`.
///
/// Each output element is a dot product of two contiguous rows.
pub fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * n..(j + 1) * n];
            *o = *o + dot(a_row, b_row);
        }
    }
}

/// `out += a^T (k x m) * b (m x n)` where `a` is `(m x k)` row-major.
pub fn matmul_at_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &b_ij) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * b_ij;
            }
        }
    }
}

/// Dot product with a fixed eight-lane accumulation tree. The lane split
/// is deterministic (always the same grouping for the same length), it
/// exists so the loop vectorizes without reassociating a serial reduction.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let a_body = a.chunks_exact(LANES);
    let b_body = b.chunks_exact(LANES);
    let (a_tail, b_tail) = (a_body.remainder(), b_body.remainder());
    for (ca, cb) in a_body.zip(b_body) {
        for l in 0..LANES {
            acc[l] = acc[l] + ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in a_tail.iter().zip(b_tail) {
        tail = tail + x * y;
    }
    let mut total = T::zero();
    for &lane in &acc {
        total = total + lane;
    }
    total + tail
}

/// `out += c * x`
pub fn axpy<T: Scalar>(c: T, x: &[T], out: &mut [T]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + c * v;
    }
}

/// Softmax over `scores` restricted to entries where `allowed` is true.
///
/// Forbidden entries come out exactly 0. Returns false when no entry is
/// permitted (the caller turns that into a degenerate-row error).
pub fn masked_softmax_row<T: Scalar>(scores: &[T], allowed: &[bool], out: &mut [T]) -> bool {
    debug_assert_eq!(scores.len(), allowed.len());
    debug_assert_eq!(scores.len(), out.len());
    let mut max = T::neg_infinity();
    let mut any = false;
    for (&s, &a) in scores.iter().zip(allowed) {
        if a {
            any = true;
            if s > max {
                max = s;
            }
        }
    }
    if !any {
        return false;
    }
    let mut sum = T::zero();
    for ((o, &s), &a) in out.iter_mut().zip(scores).zip(allowed) {
        if a {
            let e = (s - max).exp();
            *o = e;
            sum = sum + e;
        } else {
            *o = T::zero();
        }
    }
    let inv = T::one() / sum;
    for (o, &a) in out.iter_mut().zip(allowed) {
        if a {
            *o = *o * inv;
        }
    }
    true
}

/// RMS normalization of one row: `out = x / rms(x) * weight`.
/// Returns the reciprocal of the root-mean-square for the backward pass.
pub fn rmsnorm_row<T: Scalar>(x: &[T], weight: &[T], eps: T, out: &mut [T]) -> T {
    debug_assert_eq!(x.len(), weight.len());
    let n = T::from_f64(x.len() as f64);
    let mut sq = T::zero();
    for &v in x {
        sq = sq + v * v;
    }
    let inv_rms = T::one() / (sq / n + eps).sqrt();
    for ((o, &v), &w) in out.iter_mut().zip(x).zip(weight) {
        *o = v * inv_rms * w;
    }
    inv_rms
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut max = T::neg_infinity();
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for &v in row {
        sum = sum + (v - max).exp();
    }
    let log_z = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - log_z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent triple-loop reference used to pin down `matmul_acc`.
    fn matmul_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity() {
        let id = vec![1.0f64, 0.0, 0.0, 1.0];
        let b = vec![3.0, 4.0, 5.0, 6.0];
        assert_eq!(matmul(&id, &b, 2, 2, 2), b);
    }

    #[test]
    fn matmul_row_times_column() {
        let a = vec![1.0f64, 2.0];
        let b = vec![3.0, 4.0];
        assert_eq!(matmul(&a, &b, 1, 2, 1), vec![11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = matmul(&a, &b, m, k, n);
        let slow = matmul_naive(&a, &b, m, k, n);
        for (x, y) in fast.iter().zip(&slow) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn transposed_variants_match_explicit_transposes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let (m, k, n) = (4, 3, 5);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // a^T * b via kernel vs. materialized transpose.
        let mut out = vec![0.0; k * n];
        matmul_at_acc(&a, &b, &mut out, m, k, n);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let reference = matmul_naive(&at, &b, k, m, n);
        for (x, y) in out.iter().zip(&reference) {
            assert!((x - y).abs() < 1e-9);
        }

        // b * a^T-style kernel: (m x n) times (k x n)^T.
        let c: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut out2 = vec![0.0; m * k];
        matmul_bt_acc(&b, &c, &mut out2, m, n, k);
        let mut ct = vec![0.0; n * k];
        for j in 0..k {
            for p in 0..n {
                ct[p * k + j] = c[j * n + p];
            }
        }
        let reference2 = matmul_naive(&b, &ct, m, n, k);
        for (x, y) in out2.iter().zip(&reference2) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn masked_softmax_row_basics() {
        let mut out = vec![0.0f64; 2];
        assert!(masked_softmax_row(&[0.0, 0.0], &[true, true], &mut out));
        assert!((out[0] - 0.5).abs() < 1e-12);
        assert!((out[1] - 0.5).abs() < 1e-12);

        assert!(masked_softmax_row(&[5.0, 100.0], &[true, false], &mut out));
        assert_eq!(out, vec![1.0, 0.0]);

        assert!(!masked_softmax_row(&[1.0, 2.0], &[false, false], &mut out));
    }

    #[test]
    fn masked_softmax_matches_exp_normalize() {
        let scores = [1.0f64, 2.0, 3.0];
        let mut out = vec![0.0f64; 3];
        assert!(masked_softmax_row(&scores, &[true; 3], &mut out));
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for (o, s) in out.iter().zip(&scores) {
            assert!((o - s.exp() / z).abs() < 1e-6);
        }
    }
}
