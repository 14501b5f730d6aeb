//! Diagonal state-space layer: `x_k = lambda_bar * x_{k-1} + B_bar u_k`,
//! `y_k = Re(C x_k) + D * u_k`.
//!
//! Complex quantities are held as separate real and imaginary arrays so the
//! input and output maps run as real matrix products.

use nalgebra::DMatrix;
use num_complex::Complex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::scalar::{gemm, Scalar};

/// Time steps per chunk of the parallel scan. Fixed so results do not
/// depend on the number of threads.
pub const SCAN_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsmDims {
    pub h_in: usize,
    pub h_out: usize,
    pub m: usize,
}

impl SsmDims {
    /// `(name, len)` of each parameter array, in storage order.
    pub fn segments(&self) -> [(&'static str, usize); 8] {
        let SsmDims { h_in, h_out, m } = *self;
        [
            ("lambda_re", m),
            ("lambda_im", m),
            ("log_dt", m),
            ("b_re", m * h_in),
            ("b_im", m * h_in),
            ("c_re", h_out * m),
            ("c_im", h_out * m),
            ("d", h_out),
        ]
    }

    pub fn len(&self) -> usize {
        self.segments().iter().map(|s| s.1).sum()
    }
}

/// Borrowed view of one layer's parameters (or gradients).
pub struct SsmView<S> {
    pub lam_re: S,
    pub lam_im: S,
    pub log_dt: S,
    pub b_re: S,
    pub b_im: S,
    pub c_re: S,
    pub c_im: S,
    pub d: S,
}

pub fn split<T>(dims: SsmDims, flat: &[T]) -> SsmView<&[T]> {
    let seg = dims.segments();
    let mut rest = flat;
    let mut take = |n: usize| {
        let (a, b) = rest.split_at(n);
        rest = b;
        a
    };
    SsmView {
        lam_re: take(seg[0].1),
        lam_im: take(seg[1].1),
        log_dt: take(seg[2].1),
        b_re: take(seg[3].1),
        b_im: take(seg[4].1),
        c_re: take(seg[5].1),
        c_im: take(seg[6].1),
        d: take(seg[7].1),
    }
}

pub fn split_mut<T>(dims: SsmDims, flat: &mut [T]) -> SsmView<&mut [T]> {
    let seg = dims.segments();
    let (lam_re, rest) = flat.split_at_mut(seg[0].1);
    let (lam_im, rest) = rest.split_at_mut(seg[1].1);
    let (log_dt, rest) = rest.split_at_mut(seg[2].1);
    let (b_re, rest) = rest.split_at_mut(seg[3].1);
    let (b_im, rest) = rest.split_at_mut(seg[4].1);
    let (c_re, rest) = rest.split_at_mut(seg[5].1);
    let (c_im, rest) = rest.split_at_mut(seg[6].1);
    let (d, _) = rest.split_at_mut(seg[7].1);
    SsmView { lam_re, lam_im, log_dt, b_re, b_im, c_re, c_im, d }
}

/// `(exp(z) - 1) / z` without cancellation near zero.
pub fn expm1_over_z<T: Scalar>(z: Complex<T>) -> Complex<T> {
    if z.re == T::zero() && z.im == T::zero() {
        return Complex::new(T::one(), T::zero());
    }
    let half_sin = (z.im * T::c(0.5)).sin();
    let re = z.re.exp_m1() * z.im.cos() - T::c(2.0) * half_sin * half_sin;
    let im = z.re.exp() * z.im.sin();
    Complex::new(re, im) / z
}

/// Zero-order-hold coefficients of one layer.
#[derive(Debug, Clone)]
pub struct Discretized<T> {
    pub lam: Vec<Complex<T>>,
    pub delta: Vec<T>,
    pub lam_bar: Vec<Complex<T>>,
    /// `(lambda_bar - 1) / lambda`, so that `B_bar = f * B` row-wise.
    pub f: Vec<Complex<T>>,
}

pub fn discretize_zoh<T: Scalar>(lam_re: &[T], lam_im: &[T], log_dt: &[T]) -> Discretized<T> {
    let m = lam_re.len();
    let mut out = Discretized {
        lam: Vec::with_capacity(m),
        delta: Vec::with_capacity(m),
        lam_bar: Vec::with_capacity(m),
        f: Vec::with_capacity(m),
    };
    for i in 0..m {
        let lam = Complex::new(lam_re[i], lam_im[i]);
        let delta = log_dt[i].exp();
        let z = lam * delta;
        out.lam.push(lam);
        out.delta.push(delta);
        out.lam_bar.push(z.exp());
        out.f.push(expm1_over_z(z) * delta);
    }
    out
}

fn scan_rows<T: Scalar>(
    a: &[Complex<T>],
    xr: &mut [T],
    xi: &mut [T],
    m: usize,
    carry: &mut [Complex<f64>],
    reverse: bool,
    write: bool,
) {
    let a64: Vec<Complex<f64>> = a.iter().map(|z| Complex::new(to64(z.re), to64(z.im))).collect();
    let rows = xr.len() / m;
    for step in 0..rows {
        let t = if reverse { rows - 1 - step } else { step };
        let (rr, ri) = (&mut xr[t * m..(t + 1) * m], &mut xi[t * m..(t + 1) * m]);
        for j in 0..m {
            let next = a64[j] * carry[j] + Complex::new(to64(rr[j]), to64(ri[j]));
            carry[j] = next;
            if write {
                rr[j] = from64(next.re);
                ri[j] = from64(next.im);
            }
        }
    }
}

fn to64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

fn from64<T: Scalar>(x: f64) -> T {
    T::from_f64(x).unwrap_or_else(T::nan)
}

fn initial_carry<T: Scalar>(m: usize, x0: Option<(&[T], &[T])>) -> Vec<Complex<f64>> {
    match x0 {
        Some((r, i)) => r.iter().zip(i).map(|(&r, &i)| Complex::new(to64(r), to64(i))).collect(),
        None => vec![Complex::new(0.0, 0.0); m],
    }
}

/// In-place sequential recurrence `x_k = a * x_{k-1} + w_k` over the rows
/// of `xr + i xi` (`steps x m`), starting from `x0` (zero if `None`).
/// With `reverse` the recurrence runs from the last row to the first.
pub fn scan_sequential<T: Scalar>(
    a: &[Complex<T>],
    xr: &mut [T],
    xi: &mut [T],
    m: usize,
    x0: Option<(&[T], &[T])>,
    reverse: bool,
) {
    let mut carry = initial_carry(m, x0);
    scan_rows(a, xr, xi, m, &mut carry, reverse, true);
}

/// Same result as [`scan_sequential`], computed as independent chunk-local
/// end states, a short sequential pass over chunk carries, and a parallel
/// rescan of every chunk from its carry. This is the two-level form of the
/// associative scan with the operator `(a1, b1) . (a2, b2) = (a1 a2, a2 b1 + b2)`.
pub fn scan_parallel<T: Scalar>(
    a: &[Complex<T>],
    xr: &mut [T],
    xi: &mut [T],
    m: usize,
    x0: Option<(&[T], &[T])>,
    reverse: bool,
) {
    let rows = xr.len() / m;
    if rows <= SCAN_CHUNK {
        return scan_sequential(a, xr, xi, m, x0, reverse);
    }
    let chunk = SCAN_CHUNK * m;
    // chunk-local end states from a zero state
    let ends: Vec<(Vec<Complex<f64>>, usize)> = xr
        .par_chunks_mut(chunk)
        .zip(xi.par_chunks_mut(chunk))
        .map(|(cr, ci)| {
            let mut end = vec![Complex::new(0.0, 0.0); m];
            scan_rows(a, cr, ci, m, &mut end, reverse, false);
            (end, cr.len() / m)
        })
        .collect();
    // carry into each chunk, in scan order
    let n_chunks = ends.len();
    let order: Vec<usize> = if reverse { (0..n_chunks).rev().collect() } else { (0..n_chunks).collect() };
    let mut carries = vec![Vec::new(); n_chunks];
    let mut carry = initial_carry(m, x0);
    for &c in &order {
        carries[c] = carry.clone();
        let (end, len) = &ends[c];
        for j in 0..m {
            let p = Complex::new(to64(a[j].re), to64(a[j].im)).powu(*len as u32);
            carry[j] = p * carry[j] + end[j];
        }
    }
    xr.par_chunks_mut(chunk)
        .zip(xi.par_chunks_mut(chunk))
        .zip(carries.into_par_iter())
        .for_each(|((rr, ri), mut carry)| scan_rows(a, rr, ri, m, &mut carry, reverse, true));
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct SsmTape<T> {
    /// `B u` before the ZOH factor, `steps x m`.
    pub v_re: Vec<T>,
    pub v_im: Vec<T>,
    /// States `x_k`, `steps x m`.
    pub x_re: Vec<T>,
    pub x_im: Vec<T>,
}

/// Runs the layer over `u` (`steps x h_in`), writing `y` (`steps x h_out`).
/// `x0` is the state before the first step.
pub fn ssm_forward<T: Scalar>(
    dims: SsmDims,
    p: &SsmView<&[T]>,
    disc: &Discretized<T>,
    u: &[T],
    x0: Option<(&[T], &[T])>,
    y: &mut [T],
) -> SsmTape<T> {
    let SsmDims { h_in, h_out, m } = dims;
    let steps = u.len() / h_in;
    let mut v_re = vec![T::zero(); steps * m];
    let mut v_im = vec![T::zero(); steps * m];
    gemm(false, true, steps, m, h_in, T::one(), u, p.b_re, T::zero(), &mut v_re);
    gemm(false, true, steps, m, h_in, T::one(), u, p.b_im, T::zero(), &mut v_im);
    let mut x_re = vec![T::zero(); steps * m];
    let mut x_im = vec![T::zero(); steps * m];
    for t in 0..steps {
        for j in 0..m {
            let w = disc.f[j] * Complex::new(v_re[t * m + j], v_im[t * m + j]);
            x_re[t * m + j] = w.re;
            x_im[t * m + j] = w.im;
        }
    }
    scan_parallel(&disc.lam_bar, &mut x_re, &mut x_im, m, x0, false);
    gemm(false, true, steps, h_out, m, T::one(), &x_re, p.c_re, T::zero(), y);
    gemm(false, true, steps, h_out, m, -T::one(), &x_im, p.c_im, T::one(), y);
    if h_in == h_out {
        for (yr, ur) in y.chunks_exact_mut(h_out).zip(u.chunks_exact(h_in)) {
            for k in 0..h_out {
                yr[k] += p.d[k] * ur[k];
            }
        }
    }
    SsmTape { v_re, v_im, x_re, x_im }
}

/// Accumulates parameter gradients into `g` and input gradients into `du`.
#[allow(clippy::too_many_arguments)]
pub fn ssm_backward<T: Scalar>(
    dims: SsmDims,
    p: &SsmView<&[T]>,
    disc: &Discretized<T>,
    tape: &SsmTape<T>,
    u: &[T],
    x0: Option<(&[T], &[T])>,
    dy: &[T],
    g: &mut SsmView<&mut [T]>,
    du: &mut [T],
) {
    let SsmDims { h_in, h_out, m } = dims;
    let steps = u.len() / h_in;
    if h_in == h_out {
        for ((dyr, ur), dur) in dy.chunks_exact(h_out).zip(u.chunks_exact(h_in)).zip(du.chunks_exact_mut(h_in)) {
            for k in 0..h_out {
                g.d[k] += dyr[k] * ur[k];
                dur[k] += dyr[k] * p.d[k];
            }
        }
    }
    // dL/dC and the state gradient: y = C_re x_re - C_im x_im
    gemm(true, false, h_out, m, steps, T::one(), dy, &tape.x_re, T::one(), g.c_re);
    gemm(true, false, h_out, m, steps, -T::one(), dy, &tape.x_im, T::one(), g.c_im);
    let mut gr = vec![T::zero(); steps * m];
    let mut gi = vec![T::zero(); steps * m];
    gemm(false, false, steps, m, h_out, T::one(), dy, p.c_re, T::zero(), &mut gr);
    gemm(false, false, steps, m, h_out, -T::one(), dy, p.c_im, T::zero(), &mut gi);
    // G_k = g_k + conj(lambda_bar) G_{k+1}
    let conj: Vec<Complex<T>> = disc.lam_bar.iter().map(|c| c.conj()).collect();
    scan_parallel(&conj, &mut gr, &mut gi, m, None, true);

    let zero = vec![T::zero(); m];
    let (x0r, x0i) = x0.unwrap_or((&zero, &zero));
    let mut g_lam_bar = vec![Complex::new(T::zero(), T::zero()); m];
    let mut g_f = vec![Complex::new(T::zero(), T::zero()); m];
    // reuse the G buffers for dL/dV = conj(f) G
    for t in 0..steps {
        for j in 0..m {
            let idx = t * m + j;
            let gk = Complex::new(gr[idx], gi[idx]);
            let prev = if t == 0 {
                Complex::new(x0r[j], x0i[j])
            } else {
                Complex::new(tape.x_re[idx - m], tape.x_im[idx - m])
            };
            g_lam_bar[j] += prev.conj() * gk;
            let v = Complex::new(tape.v_re[idx], tape.v_im[idx]);
            g_f[j] += v.conj() * gk;
            let gv = disc.f[j].conj() * gk;
            gr[idx] = gv.re;
            gi[idx] = gv.im;
        }
    }
    gemm(true, false, m, h_in, steps, T::one(), &gr, u, T::one(), g.b_re);
    gemm(true, false, m, h_in, steps, T::one(), &gi, u, T::one(), g.b_im);
    gemm(false, false, steps, h_in, m, T::one(), &gr, p.b_re, T::one(), du);
    gemm(false, false, steps, h_in, m, T::one(), &gi, p.b_im, T::one(), du);

    for j in 0..m {
        let (lam, lb, f, delta) = (disc.lam[j], disc.lam_bar[j], disc.f[j], disc.delta[j]);
        // lambda_bar = exp(lambda delta), f = (lambda_bar - 1) / lambda
        let dlb_dlam = lb * delta;
        let df_dlam = (lb * delta - f) / lam;
        let g_lam = dlb_dlam.conj() * g_lam_bar[j] + df_dlam.conj() * g_f[j];
        let d_delta = ((lam * lb).conj() * g_lam_bar[j]).re + (lb.conj() * g_f[j]).re;
        g.lam_re[j] += g_lam.re;
        g.lam_im[j] += g_lam.im;
        g.log_dt[j] += d_delta * delta;
    }
}

/// Eigenvalues of the normal part of the HiPPO-LegS matrix: `-1/2` on the
/// diagonal plus the skew-symmetric part, sorted by imaginary part.
pub fn hippo_n_eigenvalues(m: usize) -> Vec<Complex<f64>> {
    let skew = DMatrix::from_fn(m, m, |i, j| {
        let v = ((i as f64 + 0.5) * (j as f64 + 0.5)).sqrt();
        match i.cmp(&j) {
            std::cmp::Ordering::Greater => -v,
            std::cmp::Ordering::Less => v,
            std::cmp::Ordering::Equal => 0.0,
        }
    });
    let mut eig: Vec<Complex<f64>> = skew
        .complex_eigenvalues()
        .iter()
        .map(|z| Complex::new(-0.5, z.im))
        .collect();
    eig.sort_by(|a, b| a.im.total_cmp(&b.im));
    eig
}

/// Fills one layer's parameters: HiPPO-N eigenvalues, `log_dt` uniform on
/// `[ln 0.001, ln 0.1]`, Gaussian `B`, `C`, `D`.
pub fn init_layer<T: Scalar>(dims: SsmDims, out: &mut [T], rng: &mut impl Rng) {
    let SsmDims { h_in, m, .. } = dims;
    let v = split_mut(dims, out);
    for (j, z) in hippo_n_eigenvalues(m).into_iter().enumerate() {
        v.lam_re[j] = T::c(z.re);
        v.lam_im[j] = T::c(z.im);
    }
    let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
    for x in v.log_dt.iter_mut() {
        *x = T::c(rng.random_range(lo..hi));
    }
    let mut normal = |scale: f64| T::c(scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
    let b_scale = (0.5 / h_in as f64).sqrt();
    for x in v.b_re.iter_mut().chain(v.b_im.iter_mut()) {
        *x = normal(b_scale);
    }
    let c_scale = (0.5 / m as f64).sqrt();
    for x in v.c_re.iter_mut().chain(v.c_im.iter_mut()) {
        *x = normal(c_scale);
    }
    for x in v.d.iter_mut() {
        *x = normal(1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_precision_scan_tracks_double() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = 6;
        let a = random_system(m, &mut rng);
        let a32: Vec<Complex<f32>> = a.iter().map(|z| Complex::new(z.re as f32, z.im as f32)).collect();
        let a: Vec<Complex<f64>> = a32.iter().map(|z| Complex::new(z.re as f64, z.im as f64)).collect();
        let len = 3000;
        let wr: Vec<f32> = (0..len * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wi: Vec<f32> = (0..len * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (mut dr, mut di): (Vec<f64>, Vec<f64>) =
            (wr.iter().map(|&x| x as f64).collect(), wi.iter().map(|&x| x as f64).collect());
        scan_sequential(&a, &mut dr, &mut di, m, None, false);
        let (mut sr, mut si) = (wr, wi);
        scan_parallel(&a32, &mut sr, &mut si, m, None, false);
        for (x, y) in sr.iter().chain(&si).zip(dr.iter().chain(&di)) {
            assert!((*x as f64 - y).abs() <= 1e-6 * y.abs().max(1.0), "{x} vs {y}");
        }
    }

    fn random_system(m: usize, rng: &mut ChaCha8Rng) -> Vec<Complex<f64>> {
        (0..m)
            .map(|_| {
                let z = Complex::new(-rng.random_range(0.01..2.0), rng.random_range(-3.0..3.0));
                (z * rng.random_range(0.001..0.1)).exp()
            })
            .collect()
    }

    #[test]
    fn zoh_scalar_values() {
        let d = discretize_zoh(&[-1.0f64], &[0.0], &[0.1f64.ln()]);
        assert!((d.lam_bar[0].re - (-0.1f64).exp()).abs() < 1e-15);
        assert!((d.lam_bar[0].re - 0.904837).abs() < 1e-6);
        let tiny = discretize_zoh(&[-1.0f64], &[2.0], &[1e-8f64.ln()]);
        assert!((tiny.lam_bar[0] - Complex::new(1.0, 0.0)).norm() < 1e-6);
        assert!((tiny.f[0] - Complex::new(1e-8, 0.0)).norm() < 1e-6 * 1e-8);
    }

    #[test]
    fn hippo_eigenvalues_are_stable_pairs() {
        let eig = hippo_n_eigenvalues(8);
        assert_eq!(eig.len(), 8);
        assert!(eig.iter().all(|z| z.re == -0.5));
        for (a, b) in eig.iter().zip(eig.iter().rev()) {
            assert!((a.im + b.im).abs() < 1e-9);
        }
    }

    #[test]
    fn parallel_scan_matches_sequential_with_initial_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 5;
        let a = random_system(m, &mut rng);
        for &(steps, reverse) in &[(1000usize, false), (700, true), (129, false)] {
            let wr: Vec<f64> = (0..steps * m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wi: Vec<f64> = (0..steps * m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x0r: Vec<f64> = (0..m).map(|_| rng.random()).collect();
            let x0i: Vec<f64> = (0..m).map(|_| rng.random()).collect();
            let (mut sr, mut si) = (wr.clone(), wi.clone());
            scan_sequential(&a, &mut sr, &mut si, m, Some((&x0r, &x0i)), reverse);
            let (mut pr, mut pi) = (wr, wi);
            scan_parallel(&a, &mut pr, &mut pi, m, Some((&x0r, &x0i)), reverse);
            let diff = sr.iter().zip(&pr).chain(si.iter().zip(&pi)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-10, "{steps} {reverse}: {diff}");
        }
    }

    #[test]
    fn impulse_response_is_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = SsmDims { h_in: 3, h_out: 3, m: 4 };
        let mut flat = vec![0.0f64; dims.len()];
        init_layer(dims, &mut flat, &mut rng);
        let p = split(dims, &flat);
        let disc = discretize_zoh(p.lam_re, p.lam_im, p.log_dt);
        let steps = 20;
        let mut u = vec![0.0; steps * 3];
        u[0] = 1.0;
        let mut y = vec![0.0; steps * 3];
        ssm_forward(dims, &p, &disc, &u, None, &mut y);
        for k in 0..steps {
            for h in 0..3 {
                let mut expect = if k == 0 && h == 0 { p.d[0] } else { 0.0 };
                for j in 0..4 {
                    let b_bar = disc.f[j] * Complex::new(p.b_re[j * 3], p.b_im[j * 3]);
                    let c = Complex::new(p.c_re[h * 4 + j], p.c_im[h * 4 + j]);
                    expect += (c * disc.lam_bar[j].powu(k as u32) * b_bar).re;
                }
                assert!((y[k * 3 + h] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = SsmDims { h_in: 3, h_out: 2, m: 4 };
        let mut flat = vec![0.0f64; dims.len()];
        init_layer(dims, &mut flat, &mut rng);
        let steps = 7;
        let u: Vec<f64> = (0..steps * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..steps * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |flat: &[f64], u: &[f64]| {
            let p = split(dims, flat);
            let disc = discretize_zoh(p.lam_re, p.lam_im, p.log_dt);
            let mut y = vec![0.0; steps * 2];
            ssm_forward(dims, &p, &disc, u, None, &mut y);
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let p = split(dims, &flat);
        let disc = discretize_zoh(p.lam_re, p.lam_im, p.log_dt);
        let mut y = vec![0.0; steps * 2];
        let tape = ssm_forward(dims, &p, &disc, &u, None, &mut y);
        let mut grad = vec![0.0; dims.len()];
        let mut du = vec![0.0; u.len()];
        ssm_backward(dims, &p, &disc, &tape, &u, None, &w, &mut split_mut(dims, &mut grad), &mut du);
        let h = 1e-6;
        for i in 0..dims.len() {
            let mut a = flat.clone();
            a[i] += h;
            let mut b = flat.clone();
            b[i] -= h;
            let fd = (loss(&a, &u) - loss(&b, &u)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grad[i]);
        }
        for i in 0..u.len() {
            let mut a = u.clone();
            a[i] += h;
            let mut b = u.clone();
            b[i] -= h;
            let fd = (loss(&flat, &a) - loss(&flat, &b)) / (2.0 * h);
            assert!((fd - du[i]).abs() < 1e-6 * (1.0 + fd.abs()), "input {i}");
        }
    }
}
