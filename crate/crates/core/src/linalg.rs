//! Row-major dense kernels used by the transformer forward and backward passes.
//!
//! Multi-row products go through `matrixmultiply::dgemm`; single rows use a
//! plain axpy loop, since packing the weight panel costs more than the product.

/// `out[n×m] = x[n×k] · w[k×m]` (or `+=` when `accumulate`).
pub fn matmul(out: &mut [f64], x: &[f64], w: &[f64], n: usize, k: usize, m: usize, accumulate: bool) {
    debug_assert_eq!(out.len(), n * m);
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), k * m);
    if n == 1 {
        if !accumulate {
            out.fill(0.0);
        }
        for (kk, &a) in x.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let row = &w[kk * m..(kk + 1) * m];
            for (o, &b) in out.iter_mut().zip(row) {
                *o += a * b;
            }
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices have exactly the lengths implied by the dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            n, k, m, 1.0,
            x.as_ptr(), k as isize, 1,
            w.as_ptr(), m as isize, 1,
            beta,
            out.as_mut_ptr(), m as isize, 1,
        );
    }
}

/// `out[n×k] = dy[n×m] · w[k×m]ᵀ` (or `+=`).
pub fn matmul_bt(out: &mut [f64], dy: &[f64], w: &[f64], n: usize, k: usize, m: usize, accumulate: bool) {
    debug_assert_eq!(out.len(), n * k);
    debug_assert_eq!(dy.len(), n * m);
    debug_assert_eq!(w.len(), k * m);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: w is read through transposed strides; all extents are in bounds.
    unsafe {
        matrixmultiply::dgemm(
            n, m, k, 1.0,
            dy.as_ptr(), m as isize, 1,
            w.as_ptr(), 1, m as isize,
            beta,
            out.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// `out[k×m] += x[n×k]ᵀ · dy[n×m]`.
pub fn matmul_at_acc(out: &mut [f64], x: &[f64], dy: &[f64], n: usize, k: usize, m: usize) {
    debug_assert_eq!(out.len(), k * m);
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(dy.len(), n * m);
    // SAFETY: x is read through transposed strides; all extents are in bounds.
    unsafe {
        matrixmultiply::dgemm(
            k, n, m, 1.0,
            x.as_ptr(), 1, k as isize,
            dy.as_ptr(), m as isize, 1,
            1.0,
            out.as_mut_ptr(), m as isize, 1,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable log-sum-exp.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-softmax of a logit row.
pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|&x| x - lse).collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    log_softmax(xs).into_iter().map(f64::exp).collect()
}

/// Entropy in nats of the distribution whose log-probabilities are given.
pub fn entropy_from_log_probs(logp: &[f64]) -> f64 {
    -logp
        .iter()
        .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() * l })
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], w: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for kk in 0..k {
                    out[i * m + j] += x[i * k + kk] * w[kk * m + j];
                }
            }
        }
        out
    }

    fn fill(len: usize, seed: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64 + seed) * 0.7131).sin()).collect()
    }

    #[test]
    fn kernels_match_triple_loop() {
        for &(n, k, m) in &[(1, 5, 3), (4, 7, 6), (9, 3, 11)] {
            let x = fill(n * k, 0.3);
            let w = fill(k * m, 1.9);
            let mut out = vec![0.0; n * m];
            matmul(&mut out, &x, &w, n, k, m, false);
            let want = naive(&x, &w, n, k, m);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }

            // dy·wᵀ
            let dy = fill(n * m, 2.5);
            let mut dx = vec![0.0; n * k];
            matmul_bt(&mut dx, &dy, &w, n, k, m, false);
            for i in 0..n {
                for kk in 0..k {
                    let want: f64 = (0..m).map(|j| dy[i * m + j] * w[kk * m + j]).sum();
                    assert!((dx[i * k + kk] - want).abs() < 1e-12);
                }
            }

            // xᵀ·dy accumulated
            let mut dw = vec![1.0; k * m];
            matmul_at_acc(&mut dw, &x, &dy, n, k, m);
            for kk in 0..k {
                for j in 0..m {
                    let want: f64 = 1.0 + (0..n).map(|i| x[i * k + kk] * dy[i * m + j]).sum::<f64>();
                    assert!((dw[kk * m + j] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_and_entropy() {
        let p = softmax(&[0.0; 10]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let h = entropy_from_log_probs(&log_softmax(&[0.0; 10]));
        assert!((h - 10f64.ln()).abs() < 1e-14);
        let h = entropy_from_log_probs(&[0.0, f64::NEG_INFINITY]);
        assert_eq!(h, 0.0);
    }
}
