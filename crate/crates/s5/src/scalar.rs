//! Floating-point abstraction and the dense kernels built on it.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// `f32` for training and inference, `f64` for gradient checks.
pub trait Scalar: Float + FromPrimitive + NumAssign + Default + Debug + Sum + Send + Sync + 'static {
    /// `C <- alpha * A B + beta * C` on strided operands.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and
    /// `m x n` matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dot product over eight independent accumulators, so the loop
/// vectorizes.
pub fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let tail = xc.remainder().iter().zip(yc.remainder()).fold(T::zero(), |s, (&a, &b)| s + a * b);
    for (a, b) in xc.zip(yc) {
        for i in 0..8 {
            acc[i] += a[i] * b[i];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// Row-major `C (m x n) <- alpha * op(A) op(B) + beta * C`, where `op(A)`
/// is `m x k` (stored `k x m` when `ta`) and `op(B)` is `k x n` (stored
/// `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 {
        return;
    }
    // matrix-vector shapes: packing a large A dominates the product itself
    if n == 1 && !ta {
        for (i, ci) in c[..m].iter_mut().enumerate() {
            let dot = dot(&a[i * k..(i + 1) * k], &b[..k]);
            *ci = if beta == T::zero() { alpha * dot } else { beta * *ci + alpha * dot };
        }
        return;
    }
    if m == 1 && !tb {
        let c = &mut c[..n];
        if beta == T::zero() {
            c.iter_mut().for_each(|v| *v = T::zero());
        } else if beta != T::one() {
            c.iter_mut().for_each(|v| *v = *v * beta);
        }
        for (kk, &x) in a[..k].iter().enumerate() {
            let s = alpha * x;
            for (v, &y) in c.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *v += s * y;
            }
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

const GELU_K: f64 = 0.7978845608028654; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::c(0.5);
    let inner = T::c(GELU_K) * (x + T::c(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::c(0.5);
    let inner = T::c(GELU_K) * (x + T::c(GELU_A) * x * x * x);
    let th = inner.tanh();
    let dinner = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_A) * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * dinner
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalization of `x` (`rows x h`). Writes the output and
/// the per-row `(mean, inverse std)` needed by the backward pass.
pub fn layer_norm<T: Scalar>(x: &[T], h: usize, gain: &[T], bias: &[T], out: &mut [T], stats: &mut [(T, T)]) {
    let eps = T::c(LN_EPS);
    let hn = T::from_usize(h).unwrap();
    for ((row, o), st) in x.chunks_exact(h).zip(out.chunks_exact_mut(h)).zip(stats.iter_mut()) {
        let mean = row.iter().copied().sum::<T>() / hn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hn;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..h {
            o[j] = (row[j] - mean) * rstd * gain[j] + bias[j];
        }
        *st = (mean, rstd);
    }
}

/// Backward of [`layer_norm`]: accumulates into `dx`, `dgain`, `dbias`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    h: usize,
    gain: &[T],
    stats: &[(T, T)],
    dout: &[T],
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let hn = T::from_usize(h).unwrap();
    let mut xhat = vec![T::zero(); h];
    let mut g = vec![T::zero(); h];
    for (((row, d), dxr), &(mean, rstd)) in x
        .chunks_exact(h)
        .zip(dout.chunks_exact(h))
        .zip(dx.chunks_exact_mut(h))
        .zip(stats)
    {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for j in 0..h {
            xhat[j] = (row[j] - mean) * rstd;
            g[j] = d[j] * gain[j];
            dgain[j] += d[j] * xhat[j];
            dbias[j] += d[j];
            sum_g += g[j];
            sum_gx += g[j] * xhat[j];
        }
        for j in 0..h {
            dxr[j] += rstd * (g[j] - sum_g / hn - xhat[j] * sum_gx / hn);
        }
    }
}

/// Numerically stable log-softmax over one row.
pub fn log_softmax<T: Scalar>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = v - lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // A = [[1,2,3],[4,5,6]] (2x3), B = [[1,0],[0,1],[1,1]] (3x2)
        let a = [1.0f64, 2., 3., 4., 5., 6.];
        let b = [1.0f64, 0., 0., 1., 1., 1.];
        let mut c = [0.0f64; 4];
        gemm(false, false, 2, 2, 3, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [4., 5., 10., 11.]);
        let at = [1.0f64, 4., 2., 5., 3., 6.];
        let bt = [1.0f64, 0., 1., 0., 1., 1.];
        let mut d = [1.0f64; 4];
        gemm(true, true, 2, 2, 3, 1.0, &at, &bt, 1.0, &mut d);
        assert_eq!(d, [5., 6., 11., 12.]);
    }

    #[test]
    fn vector_shapes_match_naive_product() {
        let (m, k) = (7, 19);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7919) % 23) as f64 - 11.0).collect();
        let x: Vec<f64> = (0..k).map(|i| (i as f64 * 0.3).cos()).collect();
        for beta in [0.0, 1.0, -0.5] {
            let mut c: Vec<f64> = (0..m).map(|i| i as f64).collect();
            let want: Vec<f64> = (0..m)
                .map(|i| 2.0 * (0..k).map(|j| a[i * k + j] * x[j]).sum::<f64>() + beta * i as f64)
                .collect();
            gemm(false, false, m, 1, k, 2.0, &a, &x, beta, &mut c);
            assert!(c.iter().zip(&want).all(|(p, q)| (p - q).abs() < 1e-12));

            // row vector times a k x m matrix
            let mut r: Vec<f64> = (0..m).map(|i| i as f64).collect();
            let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
            gemm(false, false, 1, m, k, 2.0, &x, &at, beta, &mut r);
            assert!(r.iter().zip(&want).all(|(p, q)| (p - q).abs() < 1e-12));
        }
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_backward_matches_differences() {
        let h = 5;
        let x: Vec<f64> = vec![0.3, -1.2, 2.0, 0.7, -0.1, 1.0, 1.5, -0.5, 0.2, 0.9];
        let gain: Vec<f64> = vec![1.0, 0.5, -0.3, 2.0, 1.1];
        let bias = vec![0.1; h];
        let w: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let loss = |x: &[f64]| {
            let mut out = vec![0.0; 10];
            let mut st = vec![(0.0, 0.0); 2];
            layer_norm(x, h, &gain, &bias, &mut out, &mut st);
            out.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut out = vec![0.0; 10];
        let mut st = vec![(0.0, 0.0); 2];
        layer_norm(&x, h, &gain, &bias, &mut out, &mut st);
        let mut dx = vec![0.0; 10];
        let (mut dg, mut db) = (vec![0.0; h], vec![0.0; h]);
        layer_norm_backward(&x, h, &gain, &st, &w, &mut dx, &mut dg, &mut db);
        for i in 0..10 {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let fd = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-7, "{i}: {fd} vs {}", dx[i]);
        }
    }
}
