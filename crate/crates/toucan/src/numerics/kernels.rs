//! Low-level numeric kernels shared by the autodiff tape and the inference
//! path.
//!
//! Every kernel accumulates each output element in a fixed, documented order
//! (ascending reduction index, sequential adds). That makes results
//! reproducible run-to-run and, more importantly, makes a one-row matmul
//! bit-identical to the corresponding row of a many-row matmul. The decode
//! equivalence oracle (full reprocessing vs. incremental decoding) relies on
//! this property, so do not introduce blocking over the reduction axis here.

/// C = A * B for row-major A[m x k], B[k x n], C[m x n].
///
/// Register-tiled over rows/columns; per element the k-accumulation is
/// strictly ascending, identical to the naive triple loop.
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    const MI: usize = 4;
    const NJ: usize = 8;
    let mut i = 0;
    while i + MI <= m {
        let mut j = 0;
        while j + NJ <= n {
            let mut acc = [[0.0f64; NJ]; MI];
            for kk in 0..k {
                let bs = &b[kk * n + j..kk * n + j + NJ];
                for ii in 0..MI {
                    let aik = a[(i + ii) * k + kk];
                    for jj in 0..NJ {
                        acc[ii][jj] += aik * bs[jj];
                    }
                }
            }
            for ii in 0..MI {
                c[(i + ii) * n + j..(i + ii) * n + j + NJ].copy_from_slice(&acc[ii]);
            }
            j += NJ;
        }
        for ii in 0..MI {
            for jj in j..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[(i + ii) * k + kk] * b[kk * n + jj];
                }
                c[(i + ii) * n + jj] = s;
            }
        }
        i += MI;
    }
    while i < m {
        for jj in 0..n {
            let mut s = 0.0;
            for kk in 0..k {
                s += a[i * k + kk] * b[kk * n + jj];
            }
            c[i * n + jj] = s;
        }
        i += 1;
    }
}

/// C = A * B^T for A[m x k], B[n x k], C[m x n]. Each element is a dot
/// product over ascending k.
pub fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// C += A^T * B for A[m x k], B[m x n], C[k x n]. Accumulates over ascending
/// row index i.
pub fn matmul_tn_accum(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let crow = &mut c[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

/// Dot product over ascending index.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// y += alpha * x.
#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for i in 0..y.len() {
        y[i] += alpha * x[i];
    }
}

/// In-place stable softmax over one slice: subtract max, exponentiate,
/// normalize. All reductions run in ascending index order.
pub fn softmax_slice(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let mut max = xs[0];
    for &x in xs.iter().skip(1) {
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in xs.iter_mut() {
        *x *= inv;
    }
}

/// Normalize one row to zero mean and unit variance, then apply the affine
/// transform. Returns (mean, inv_std) for the backward pass.
pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) -> (f64, f64) {
    let d = x.len();
    debug_assert_eq!(gain.len(), d);
    debug_assert_eq!(bias.len(), d);
    debug_assert_eq!(out.len(), d);
    let mut mean = 0.0;
    for &v in x {
        mean += v;
    }
    mean /= d as f64;
    let mut var = 0.0;
    for &v in x {
        let c = v - mean;
        var += c * c;
    }
    var /= d as f64;
    let inv_std = 1.0 / (var + eps).sqrt();
    for i in 0..d {
        out[i] = (x[i] - mean) * inv_std * gain[i] + bias[i];
    }
    (mean, inv_std)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

/// Derivative of the tanh-approximated GELU.
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Numerically stable log(sigmoid(x)).
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive_bitwise() {
        for &(m, k, n) in &[(1usize, 7usize, 5usize), (4, 8, 8), (9, 16, 33), (13, 5, 3)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 17 % 13) as f64 - 6.0) * 0.7).collect();
            let mut c = vec![0.0; m * n];
            matmul(&a, &b, &mut c, m, k, n);
            let expect = naive_matmul(&a, &b, m, k, n);
            for (x, y) in c.iter().zip(&expect) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn one_row_matmul_matches_full_rows() {
        // The incremental decode path depends on this exact property.
        let (m, k, n) = (10usize, 24usize, 40usize);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.013).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.007).cos()).collect();
        let mut full = vec![0.0; m * n];
        matmul(&a, &b, &mut full, m, k, n);
        for i in 0..m {
            let mut row = vec![0.0; n];
            matmul(&a[i * k..(i + 1) * k], &b, &mut row, 1, k, n);
            for j in 0..n {
                assert_eq!(row[j].to_bits(), full[i * n + j].to_bits());
            }
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut xs = vec![1.0, 2.0, 3.0, -4.0, 0.5];
        softmax_slice(&mut xs);
        let sum: f64 = xs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(xs.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn softmax_saturates() {
        let mut xs = vec![1000.0, 0.0, 0.0];
        softmax_slice(&mut xs);
        assert!((xs[0] - 1.0).abs() < 1e-9);
        assert!(xs[1].abs() < 1e-9 && xs[2].abs() < 1e-9);
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = [1.0, 3.0];
        let gain = [1.0, 1.0];
        let bias = [0.0, 0.0];
        let mut out = [0.0; 2];
        layer_norm_row(&x, &gain, &bias, 1e-12, &mut out);
        assert!((out[0] + 1.0).abs() < 1e-5);
        assert!((out[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.5, 2.0, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn sigmoid_and_log_sigmoid_agree() {
        for &x in &[-30.0, -2.0, 0.0, 1.5, 25.0] {
            assert!((log_sigmoid(x) - sigmoid(x).ln()).abs() < 1e-12);
        }
    }
}
