//! Dyadic analytic Morlet filters, the Gaussian low-pass, and the
//! learnable per-scale kernels that perturb each wavelet.
//!
//! Scale `j` (1-based) has center frequency `MORLET_XI0 / 2^j` rad/sample
//! and a Gaussian envelope of standard deviation `MORLET_SIGMA0 * 2^j`
//! samples. The low-pass at integration scale `J` is a unit-sum Gaussian of
//! standard deviation `LOWPASS_SIGMA0 * 2^J`.

use std::f64::consts::PI;

use crate::diffcore::kernels::{self, Padding};
use crate::diffcore::{ComplexTensor, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const MORLET_XI0: f64 = 1.5 * PI;
pub const MORLET_SIGMA0: f64 = 0.85;
pub const LOWPASS_SIGMA0: f64 = 0.6;
pub const DEFAULT_KERNEL_LEN: usize = 7;

/// Minimum support for the wavelet at scale `j`.
pub fn min_wavelet_len(j: u32) -> usize {
    8 << j
}

/// Minimum support for the low-pass at integration scale `j_max`.
pub fn min_lowpass_len(j_max: u32) -> usize {
    4 << j_max
}

pub fn morlet_center_frequency(j: u32) -> f64 {
    MORLET_XI0 / f64::from(1u32 << j)
}

pub fn morlet_sigma(j: u32) -> f64 {
    MORLET_SIGMA0 * f64::from(1u32 << j)
}

pub fn lowpass_sigma(j_max: u32) -> f64 {
    LOWPASS_SIGMA0 * f64::from(1u32 << j_max)
}

fn sample_positions(length: usize) -> impl Iterator<Item = f64> {
    let mid = (length as f64 - 1.0) / 2.0;
    (0..length).map(move |i| i as f64 - mid)
}

/// Discretized analytic Morlet wavelet at scale `2^j`, corrected to zero
/// mean by subtracting a multiple of its envelope, then L2-normalized.
pub fn build_morlet(j: u32, length: usize) -> Result<ComplexTensor> {
    if j == 0 {
        return Err(Error::Contract("wavelet scale exponent must be >= 1".into()));
    }
    if length < min_wavelet_len(j) {
        return Err(Error::Support(format!(
            "wavelet at scale {j} needs at least {} taps, got {length}",
            min_wavelet_len(j)
        )));
    }
    let xi = morlet_center_frequency(j);
    let sigma = morlet_sigma(j);
    let env: Vec<f64> = sample_positions(length)
        .map(|t| (-t * t / (2.0 * sigma * sigma)).exp())
        .collect();
    let phase: Vec<f64> = sample_positions(length).map(|t| xi * t).collect();
    let env_sum: f64 = env.iter().sum();
    let kappa_re = env.iter().zip(&phase).map(|(e, p)| e * p.cos()).sum::<f64>() / env_sum;
    let kappa_im = env.iter().zip(&phase).map(|(e, p)| e * p.sin()).sum::<f64>() / env_sum;
    let mut re: Vec<f64> = env.iter().zip(&phase).map(|(e, p)| e * (p.cos() - kappa_re)).collect();
    let mut im: Vec<f64> = env.iter().zip(&phase).map(|(e, p)| e * (p.sin() - kappa_im)).collect();
    let norm = re.iter().chain(&im).map(|v| v * v).sum::<f64>().sqrt();
    re.iter_mut().chain(im.iter_mut()).for_each(|v| *v /= norm);
    ComplexTensor::new(Tensor::vector(re), Tensor::vector(im))
}

/// Unit-sum Gaussian low-pass for integration scale `j_max`.
pub fn build_lowpass(j_max: u32, length: usize) -> Result<Tensor> {
    if length < min_lowpass_len(j_max) {
        return Err(Error::Support(format!(
            "low-pass at scale {j_max} needs at least {} taps, got {length}",
            min_lowpass_len(j_max)
        )));
    }
    let sigma = lowpass_sigma(j_max);
    let mut phi: Vec<f64> = sample_positions(length)
        .map(|t| (-t * t / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = phi.iter().sum();
    phi.iter_mut().for_each(|v| *v /= total);
    Ok(Tensor::vector(phi))
}

/// `delta` kernel of odd length `len`.
pub fn identity_kernel(len: usize) -> Tensor {
    let mut g = vec![0.0; len];
    g[kernels::filter_center(len)] = 1.0;
    Tensor::vector(g)
}

fn check_kernel(g: &Tensor) -> Result<()> {
    if g.ndim() != 1 || g.len().is_multiple_of(2) {
        return Err(Error::Contract(format!(
            "learnable kernel must be a 1-D tensor of odd length, got shape {:?}",
            g.shape()
        )));
    }
    Ok(())
}

/// `psi * g`: each of the real and imaginary parts convolved with `g`,
/// zero-padded, keeping the wavelet's support length.
pub fn learnable_filter(psi: &ComplexTensor, g: &Tensor) -> Result<ComplexTensor> {
    check_kernel(g)?;
    let re = kernels::convolve_same(psi.re.data(), g.data(), Padding::Zero);
    let im = kernels::convolve_same(psi.im.data(), g.data(), Padding::Zero);
    ComplexTensor::new(Tensor::vector(re), Tensor::vector(im))
}

/// Tape version of [`learnable_filter`] followed by the zero-mean
/// correction; differentiable with respect to `g`.
pub fn learnable_filter_on_tape(tape: &mut Tape, psi: &ComplexTensor, g: Var) -> Result<(Var, Var)> {
    check_kernel(tape.value(g))?;
    let re = tape.constant(psi.re.clone());
    let im = tape.constant(psi.im.clone());
    let re = tape.conv(re, g, Padding::Zero)?;
    let im = tape.conv(im, g, Padding::Zero)?;
    Ok((tape.center(re), tape.center(im)))
}

fn zero_mean(t: &Tensor) -> Tensor {
    let m = t.sum() / t.len() as f64;
    t.map(|v| v - m)
}

/// Length-preserving reflect-padded convolution of a real signal.
pub fn convolve(x: &Tensor, h: &Tensor) -> Result<Tensor> {
    convolve_padded(x, h, Padding::Reflect)
}

pub fn convolve_padded(x: &Tensor, h: &Tensor, pad: Padding) -> Result<Tensor> {
    if x.ndim() != 1 || h.ndim() != 1 {
        return Err(Error::dim("convolve", x.shape(), h.shape()));
    }
    if h.len() > 2 * x.len() {
        return Err(Error::Support(format!(
            "filter of length {} exceeds twice the signal length {}",
            h.len(),
            x.len()
        )));
    }
    Ok(Tensor::vector(kernels::convolve_same(x.data(), h.data(), pad)))
}

/// Convolution of a real signal with a complex filter.
pub fn convolve_complex(x: &Tensor, psi: &ComplexTensor) -> Result<ComplexTensor> {
    convolve_complex_padded(x, psi, Padding::Reflect)
}

pub fn convolve_complex_padded(x: &Tensor, psi: &ComplexTensor, pad: Padding) -> Result<ComplexTensor> {
    ComplexTensor::new(convolve_padded(x, &psi.re, pad)?, convolve_padded(x, &psi.im, pad)?)
}

#[derive(Clone, Debug)]
pub struct FilterBank {
    j_max: u32,
    signal_len: usize,
    wavelets: Vec<ComplexTensor>,
    lowpass: Tensor,
    kernels: Vec<Tensor>,
}

impl FilterBank {
    /// Bank with scales `1..=j_max` for signals of length `signal_len`,
    /// learnable kernels initialized to the identity.
    pub fn new(j_max: u32, signal_len: usize, kernel_len: usize) -> Result<Self> {
        if j_max < 1 {
            return Err(Error::Contract("integration scale J must be >= 1".into()));
        }
        if kernel_len.is_multiple_of(2) {
            return Err(Error::Contract(format!("kernel length must be odd, got {kernel_len}")));
        }
        let cap = 2 * signal_len;
        let wavelets = (1..=j_max)
            .map(|j| build_morlet(j, (min_wavelet_len(j) + 1).min(cap)))
            .collect::<Result<Vec<_>>>()?;
        let lowpass = build_lowpass(j_max, (min_wavelet_len(j_max) + 1).min(cap))?;
        Ok(Self {
            j_max,
            signal_len,
            wavelets,
            lowpass,
            kernels: vec![identity_kernel(kernel_len); j_max as usize],
        })
    }

    pub fn j_max(&self) -> u32 {
        self.j_max
    }

    pub fn num_scales(&self) -> usize {
        self.j_max as usize
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn kernel_len(&self) -> usize {
        self.kernels[0].len()
    }

    /// Mother wavelet at scale `j` (1-based), before the learnable kernel.
    pub fn wavelet(&self, j: u32) -> &ComplexTensor {
        &self.wavelets[j as usize - 1]
    }

    pub fn lowpass(&self) -> &Tensor {
        &self.lowpass
    }

    pub fn kernel(&self, j: u32) -> &Tensor {
        &self.kernels[j as usize - 1]
    }

    pub fn kernels(&self) -> &[Tensor] {
        &self.kernels
    }

    pub fn set_kernel(&mut self, j: u32, g: Tensor) -> Result<()> {
        check_kernel(&g)?;
        if g.len() != self.kernel_len() {
            return Err(Error::dim("set_kernel", &[self.kernel_len()], g.shape()));
        }
        self.kernels[j as usize - 1] = g;
        Ok(())
    }

    /// `psi_{j, theta}` with the zero-mean correction applied.
    pub fn effective_filter(&self, j: u32) -> Result<ComplexTensor> {
        let f = learnable_filter(self.wavelet(j), self.kernel(j))?;
        ComplexTensor::new(zero_mean(&f.re), zero_mean(&f.im))
    }

    pub fn effective_filters(&self) -> Result<Vec<ComplexTensor>> {
        (1..=self.j_max).map(|j| self.effective_filter(j)).collect()
    }

    /// Rows of `(scale, index, real, imag)`; scale 0 holds the low-pass.
    pub fn dump_rows(&self) -> Result<Vec<(u32, usize, f64, f64)>> {
        let mut rows = Vec::new();
        for j in 1..=self.j_max {
            let f = self.effective_filter(j)?;
            for (i, (re, im)) in f.re.data().iter().zip(f.im.data()).enumerate() {
                rows.push((j, i, *re, *im));
            }
        }
        for (i, v) in self.lowpass.data().iter().enumerate() {
            rows.push((0, i, *v, 0.0));
        }
        Ok(rows)
    }
}

/// Frequency (rad/sample) in `(0, pi]` where `|DFT(psi)|` peaks, found on a
/// grid of `grid` points.
pub fn spectral_peak(psi: &ComplexTensor, grid: usize) -> f64 {
    let mut best = (0.0, f64::NEG_INFINITY);
    for k in 1..=grid {
        let w = PI * k as f64 / grid as f64;
        let (mut sr, mut si) = (0.0, 0.0);
        for (n, (a, b)) in psi.re.data().iter().zip(psi.im.data()).enumerate() {
            // (a + ib) * e^{-i w n}
            let (c, s) = ((w * n as f64).cos(), (w * n as f64).sin());
            sr += a * c + b * s;
            si += b * c - a * s;
        }
        let mag = sr.hypot(si);
        if mag > best.1 {
            best = (w, mag);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mean_ratio(psi: &ComplexTensor) -> f64 {
        let sr: f64 = psi.re.sum();
        let si: f64 = psi.im.sum();
        let abs: f64 = psi.modulus().sum();
        sr.hypot(si) / abs
    }

    #[test]
    fn morlet_zero_mean_and_unit_norm() {
        for j in 1..=6 {
            let psi = build_morlet(j, min_wavelet_len(j) + 1).unwrap();
            assert!(mean_ratio(&psi) < 1e-6, "scale {j}");
            assert!((psi.energy().sqrt() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn morlet_center_frequency_halves_per_scale() {
        for j in 1..=4 {
            let a = spectral_peak(&build_morlet(j, min_wavelet_len(j) + 1).unwrap(), 4096);
            let b = spectral_peak(&build_morlet(j + 1, min_wavelet_len(j + 1) + 1).unwrap(), 4096);
            let ratio = b / a;
            assert!((0.45..=0.55).contains(&ratio), "j={j}: {ratio}");
        }
    }

    #[test]
    fn morlet_rejects_short_support() {
        assert!(matches!(build_morlet(3, 63), Err(Error::Support(_))));
        assert!(matches!(build_lowpass(3, 31), Err(Error::Support(_))));
    }

    #[test]
    fn lowpass_unit_sum_and_dc_gain() {
        for j in 1..=6 {
            let phi = build_lowpass(j, min_lowpass_len(j) + 1).unwrap();
            assert!((phi.sum() - 1.0).abs() < 1e-12);
            assert!(phi.data().iter().all(|&v| v >= 0.0));
        }
        let phi = build_lowpass(3, 40).unwrap();
        let x = Tensor::full(&[64], 2.5);
        let y = convolve(&x, &phi).unwrap();
        assert!(y.data().iter().all(|v| (v - 2.5).abs() < 1e-10));
        assert_eq!(lowpass_sigma(4) / lowpass_sigma(3), 2.0);
    }

    #[test]
    fn identity_kernel_reproduces_wavelet() {
        let psi = build_morlet(2, 33).unwrap();
        let out = learnable_filter(&psi, &identity_kernel(7)).unwrap();
        assert_eq!(out, psi);
        let twice = learnable_filter(&psi, &identity_kernel(7).scale(2.0)).unwrap();
        assert_eq!(twice, psi.scale(2.0));
        assert!(matches!(
            learnable_filter(&psi, &Tensor::vector(vec![0.0, 1.0])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn learnable_filter_energy_gradient() {
        let psi = build_morlet(2, 33).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g0: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let energy = |tape: &mut Tape, g: Var| {
            let re = tape.constant(psi.re.clone());
            let im = tape.constant(psi.im.clone());
            let re = tape.conv(re, g, Padding::Zero).unwrap();
            let im = tape.conv(im, g, Padding::Zero).unwrap();
            let a = tape.square(re);
            let b = tape.square(im);
            let s = tape.add(a, b).unwrap();
            tape.sum(s)
        };
        let mut tape = Tape::new();
        let g = tape.param(Tensor::vector(g0.clone()));
        let loss = energy(&mut tape, g);
        let analytic = tape.backward(loss).unwrap().wrt(g).into_data();
        let f = |p: &[f64]| {
            let mut tape = Tape::new();
            let g = tape.param(Tensor::vector(p.to_vec()));
            let l = energy(&mut tape, g);
            tape.value(l).item()
        };
        let report = crate::diffcore::finite_diff_check(f, &g0, &analytic, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
    }

    #[test]
    fn bank_filters_are_zero_mean_at_initialization() {
        let bank = FilterBank::new(5, 512, DEFAULT_KERNEL_LEN).unwrap();
        for f in bank.effective_filters().unwrap() {
            assert!(mean_ratio(&f) < 1e-6);
        }
    }

    #[test]
    fn bank_rejects_short_signals() {
        assert!(matches!(FilterBank::new(4, 32, 7), Err(Error::Support(_))));
        assert!(FilterBank::new(3, 32, 7).is_ok());
        assert!(matches!(FilterBank::new(3, 32, 6), Err(Error::Contract(_))));
    }

    #[test]
    fn convolve_rejects_long_filters() {
        let x = Tensor::zeros(&[4]);
        assert!(matches!(convolve(&x, &Tensor::zeros(&[9])), Err(Error::Support(_))));
    }
}
