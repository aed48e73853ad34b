//! Dense row-major f32 kernels used by the forward and backward passes.
//!
//! Every reduction runs in a fixed order so results are bit-reproducible.

const LANES: usize = 8;

/// Dot product with eight independent partial sums, combined in a fixed order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let lo = (acc[0] + acc[4]) + (acc[1] + acc[5]);
    let hi = (acc[2] + acc[6]) + (acc[3] + acc[7]);
    (lo + hi) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(y: &mut [f32], alpha: f32, x: &[f32]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ` (b stored as rows of a weight matrix, PyTorch layout).
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0f32; m * n];
    for (i, row) in a.chunks_exact(k).enumerate() {
        let out = &mut c[i * n..(i + 1) * n];
        for (j, w) in b.chunks_exact(k).enumerate() {
            out[j] = dot(row, w);
        }
    }
    c
}

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let out = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s != 0.0 {
                axpy(out, s, &b[p * n..(p + 1) * n]);
            }
        }
    }
    c
}

/// `acc[m×n] += a[r×m]ᵀ · b[r×n]`, the weight-gradient shape of `y = x Wᵀ`.
pub fn matmul_tn_acc(acc: &mut [f32], a: &[f32], b: &[f32], r: usize, m: usize, n: usize) {
    debug_assert_eq!(acc.len(), m * n);
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    for row in 0..r {
        let arow = &a[row * m..(row + 1) * m];
        let brow = &b[row * n..(row + 1) * n];
        for (i, &s) in arow.iter().enumerate() {
            if s != 0.0 {
                axpy(&mut acc[i * n..(i + 1) * n], s, brow);
            }
        }
    }
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax in f64.
pub fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn l2_norm(x: &[f32]) -> f32 {
    let s: f64 = x.iter().map(|&v| (v as f64) * (v as f64)).sum();
    s.sqrt() as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmuls_agree_with_naive() {
        let a: Vec<f32> = (0..6).map(|v| v as f32 - 2.0).collect(); // 2×3
        let b: Vec<f32> = (0..12).map(|v| (v as f32) * 0.5).collect(); // 4×3
        let c = matmul_nt(&a, &b, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f32 = (0..3).map(|p| a[i * 3 + p] * b[j * 3 + p]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        let bt: Vec<f32> = (0..12).map(|v| v as f32).collect(); // 3×4
        let c = matmul_nn(&a, &bt, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f32 = (0..3).map(|p| a[i * 3 + p] * bt[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        let mut acc = vec![0.0; 3 * 4];
        matmul_tn_acc(&mut acc, &a, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], 2, 3, 4);
        assert_eq!(acc[0], -2.0 * 1.0 + 1.0 * 5.0);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 5]), 0);
    }

    #[test]
    fn long_dot_matches_sequential_sum_closely() {
        let a: Vec<f32> = (0..37).map(|i| (i as f32).sin()).collect();
        let b: Vec<f32> = (0..37).map(|i| (i as f32).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
        assert!((dot(&a, &b) as f64 - naive).abs() < 1e-5);
    }
}
