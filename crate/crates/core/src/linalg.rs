//! Dense row-major kernels. Loop order is fixed so results are bitwise
//! reproducible on any target.

/// `out (m×n) += a (m×k) · b (k×n)`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `a (m×k) · b (k×n)`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// `out (k×n) += aᵀ · b` with `a (m×k)`, `b (m×n)`.
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `a (m×n) · bᵀ` with `b (k×n)`, giving `m×k`.
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
    out
}

/// Four interleaved partial sums, combined in a fixed order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// Backpropagates `grad` on softmax outputs `p` to the logits.
pub fn softmax_backward(p: &[f64], grad: &[f64]) -> Vec<f64> {
    let inner = dot(p, grad);
    p.iter().zip(grad).map(|(&pi, &gi)| pi * (gi - inner)).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64) * 0.5).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        assert_eq!(c[0], -2.0 * 0.0 + -2.0 + 0.0 * 4.0);
        // aᵀ·c vs manual
        let mut at_c = vec![0.0; 12];
        matmul_at_b_acc(&a, &c, &mut at_c, 2, 3, 4);
        for p in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|i| a[i * 3 + p] * c[i * 4 + j]).sum();
                assert_eq!(at_c[p * 4 + j], want);
            }
        }
        // c·bᵀ
        let c_bt = matmul_a_bt(&c, &b, 2, 4, 3);
        for i in 0..2 {
            for p in 0..3 {
                let want: f64 = (0..4).map(|j| c[i * 4 + j] * b[p * 4 + j]).sum();
                assert_eq!(c_bt[i * 3 + p], want);
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        let q = softmax(&[1001.0, 1002.0, 1003.0]);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }
}
