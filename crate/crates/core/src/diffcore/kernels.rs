//! Numeric kernels shared by the tape operations and the tape-free
//! transforms: length-preserving convolution (direct and FFT paths) and
//! its adjoints, row softmax, pooling and interpolation.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Above this `len(a) * len(b)` product, full linear convolution goes through
/// the FFT.
pub const FFT_CROSSOVER: usize = 48 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Mirror without repeating the edge sample (`x[-1] = x[1]`).
    Reflect,
    Zero,
    /// Periodic extension (`x[-1] = x[n - 1]`).
    Circular,
}

/// Maps an arbitrary index onto `0..n` by repeated mirror reflection.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Index of the tap that aligns with the output sample.
pub fn filter_center(len: usize) -> usize {
    (len - 1) / 2
}

fn padded_input(x: &[f64], filter_len: usize, pad: Padding) -> Vec<f64> {
    let n = x.len();
    let offset = (filter_len - 1 - filter_center(filter_len)) as isize;
    (0..n + filter_len - 1)
        .map(|m| {
            let i = m as isize - offset;
            match pad {
                Padding::Reflect => x[reflect_index(i, n)],
                Padding::Circular => x[i.rem_euclid(n as isize) as usize],
                Padding::Zero => {
                    if i >= 0 && (i as usize) < n {
                        x[i as usize]
                    } else {
                        0.0
                    }
                }
            }
        })
        .collect()
}

fn fold_padded(gxp: &[f64], n: usize, filter_len: usize, pad: Padding) -> Vec<f64> {
    let offset = (filter_len - 1 - filter_center(filter_len)) as isize;
    let mut gx = vec![0.0; n];
    for (m, &g) in gxp.iter().enumerate() {
        let i = m as isize - offset;
        match pad {
            Padding::Reflect => gx[reflect_index(i, n)] += g,
            Padding::Circular => gx[i.rem_euclid(n as isize) as usize] += g,
            Padding::Zero => {
                if i >= 0 && (i as usize) < n {
                    gx[i as usize] += g;
                }
            }
        }
    }
    gx
}

/// Full linear convolution by direct summation.
pub fn linear_conv_direct(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &av) in a.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        for (o, &bv) in out[i..i + b.len()].iter_mut().zip(b) {
            *o += av * bv;
        }
    }
    out
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plans(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    })
}

/// Full linear convolution through a zero-padded FFT.
pub fn linear_conv_fft(a: &[f64], b: &[f64]) -> Vec<f64> {
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let (fwd, inv) = plans(n);
    let mut fa: Vec<Complex64> = a.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fa.resize(n, Complex64::new(0.0, 0.0));
    let mut fb: Vec<Complex64> = b.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fb.resize(n, Complex64::new(0.0, 0.0));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    let scale = 1.0 / n as f64;
    fa[..out_len].iter().map(|c| c.re * scale).collect()
}

pub fn linear_conv(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.len() * b.len() > FFT_CROSSOVER {
        linear_conv_fft(a, b)
    } else {
        linear_conv_direct(a, b)
    }
}

/// Length-preserving convolution `y[t] = sum_k h[k] x(t + c - k)` with
/// `c = filter_center(h.len())`; out-of-range samples come from `pad`.
pub fn convolve_same(x: &[f64], h: &[f64], pad: Padding) -> Vec<f64> {
    let xp = padded_input(x, h.len(), pad);
    let full = linear_conv(&xp, h);
    full[h.len() - 1..h.len() - 1 + x.len()].to_vec()
}

/// Reference implementation of [`convolve_same`] by a direct double loop.
pub fn convolve_same_direct(x: &[f64], h: &[f64], pad: Padding) -> Vec<f64> {
    let n = x.len() as isize;
    let c = filter_center(h.len()) as isize;
    (0..n)
        .map(|t| {
            h.iter()
                .enumerate()
                .map(|(k, &hk)| {
                    let i = t + c - k as isize;
                    let xv = match pad {
                        Padding::Reflect => x[reflect_index(i, n as usize)],
                        Padding::Circular => x[i.rem_euclid(n) as usize],
                        Padding::Zero if i >= 0 && i < n => x[i as usize],
                        Padding::Zero => 0.0,
                    };
                    hk * xv
                })
                .sum()
        })
        .collect()
}

/// Gradient of `convolve_same` with respect to its input.
pub fn convolve_same_grad_input(gy: &[f64], h: &[f64], pad: Padding) -> Vec<f64> {
    let rev: Vec<f64> = h.iter().rev().copied().collect();
    let gxp = linear_conv(gy, &rev);
    fold_padded(&gxp, gy.len(), h.len(), pad)
}

/// Gradient of `convolve_same` with respect to the filter.
pub fn convolve_same_grad_filter(gy: &[f64], x: &[f64], filter_len: usize, pad: Padding) -> Vec<f64> {
    let xp = padded_input(x, filter_len, pad);
    let rev: Vec<f64> = gy.iter().rev().copied().collect();
    let full = linear_conv(&rev, &xp);
    let t = gy.len();
    (0..filter_len).map(|k| full[(filter_len - 1 - k) + t - 1]).collect()
}

/// Numerically stable softmax of one row in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output length of stride-`r` pooling over `t` steps.
pub fn pooled_len(t: usize, r: usize) -> usize {
    t.div_ceil(r)
}

/// Interpolation stencil used by center-aligned linear upsampling: output
/// step `t` reads `w0 * c[i0] + w1 * c[i1]`.
pub fn upsample_stencil(t: usize, r: usize, pooled: usize) -> (usize, usize, f64, f64) {
    if r == 1 || pooled == 1 {
        let i = t.min(pooled - 1);
        return (i, i, 1.0, 0.0);
    }
    let u = (t as f64 - (r as f64 - 1.0) / 2.0) / r as f64;
    let max = (pooled - 1) as f64;
    if u <= 0.0 {
        return (0, 0, 1.0, 0.0);
    }
    if u >= max {
        return (pooled - 1, pooled - 1, 1.0, 0.0);
    }
    let i0 = u.floor() as usize;
    let frac = u - i0 as f64;
    (i0, i0 + 1, 1.0 - frac, frac)
}
