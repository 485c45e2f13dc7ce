//! Second-order scattering with learnable filters, plus the translation and
//! deformation distance measurements used to check its invariance.
//!
//! ```text
//! S0        = x * phi_J
//! S1[j1]    = |x * psi_j1| * phi_J
//! S2[j1,j2] = ||x * psi_j1| * psi_j2| * phi_J      (j2 > j1)
//! ```

use crate::diffcore::kernels::Padding;
use crate::diffcore::{ComplexTensor, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::filterbank::{convolve_complex_padded, convolve_padded, FilterBank};

/// Second-order paths `(j1, j2)` with `j2 > j1`, `j1` ascending then `j2`.
pub fn path_index(j_max: u32) -> Vec<(u32, u32)> {
    (1..=j_max)
        .flat_map(|j1| (j1 + 1..=j_max).map(move |j2| (j1, j2)))
        .collect()
}

/// `1 + J + J(J-1)/2`.
pub fn coefficient_count(j_max: u32) -> usize {
    let j = j_max as usize;
    1 + j + j * (j - 1) / 2
}

/// Output decimation after the final low-pass, `2^(J-1)`.
pub fn subsample_stride(j_max: u32) -> usize {
    1 << (j_max - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatteringCoefficients {
    pub s0: Tensor,
    /// One row per first-order scale `j1 = 1..=J`.
    pub s1: Vec<Tensor>,
    /// One row per entry of `path_index`.
    pub s2: Vec<Tensor>,
    pub path_index: Vec<(u32, u32)>,
}

impl ScatteringCoefficients {
    pub fn output_len(&self) -> usize {
        self.s0.len()
    }

    pub fn num_paths(&self) -> usize {
        1 + self.s1.len() + self.s2.len()
    }

    /// All coefficients in order S0, S1, S2.
    pub fn rows(&self) -> impl Iterator<Item = &Tensor> {
        std::iter::once(&self.s0).chain(&self.s1).chain(&self.s2)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.rows().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn scale(&self, a: f64) -> Self {
        Self {
            s0: self.s0.scale(a),
            s1: self.s1.iter().map(|t| t.scale(a)).collect(),
            s2: self.s2.iter().map(|t| t.scale(a)).collect(),
            path_index: self.path_index.clone(),
        }
    }
}

/// L2 distance between two coefficient sets over all paths.
pub fn scattering_distance(a: &ScatteringCoefficients, b: &ScatteringCoefficients) -> f64 {
    a.rows()
        .zip(b.rows())
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).powi(2)))
        .sum::<f64>()
        .sqrt()
}

fn check_len(x: &Tensor, bank: &FilterBank) -> Result<()> {
    if x.ndim() != 1 {
        return Err(Error::dim("scatter", x.shape(), &[bank.signal_len()]));
    }
    if x.len() != bank.signal_len() {
        return Err(Error::Support(format!(
            "bank built for length {}, signal has length {}",
            bank.signal_len(),
            x.len()
        )));
    }
    Ok(())
}

fn lowpass_out(u: &Tensor, bank: &FilterBank, subsample: bool, pad: Padding) -> Result<Tensor> {
    let s = convolve_padded(u, bank.lowpass(), pad)?;
    if subsample {
        let stride = subsample_stride(bank.j_max());
        Ok(Tensor::vector(s.data().iter().step_by(stride).copied().collect()))
    } else {
        Ok(s)
    }
}

pub fn scatter0(x: &Tensor, bank: &FilterBank, subsample: bool) -> Result<Tensor> {
    check_len(x, bank)?;
    lowpass_out(x, bank, subsample, Padding::Reflect)
}

/// First-order wavelet coefficients `W1[j1]` and coefficients `S1[j1]`.
pub fn scatter1(x: &Tensor, bank: &FilterBank, subsample: bool) -> Result<(Vec<ComplexTensor>, Vec<Tensor>)> {
    scatter1_padded(x, bank, subsample, Padding::Reflect)
}

fn scatter1_padded(
    x: &Tensor,
    bank: &FilterBank,
    subsample: bool,
    pad: Padding,
) -> Result<(Vec<ComplexTensor>, Vec<Tensor>)> {
    check_len(x, bank)?;
    let mut w1 = Vec::with_capacity(bank.num_scales());
    let mut s1 = Vec::with_capacity(bank.num_scales());
    for psi in bank.effective_filters()? {
        let w = convolve_complex_padded(x, &psi, pad)?;
        s1.push(lowpass_out(&w.modulus(), bank, subsample, pad)?);
        w1.push(w);
    }
    Ok((w1, s1))
}

/// Second-order coefficients from the first-order wavelet coefficients.
pub fn scatter2(w1: &[ComplexTensor], bank: &FilterBank, subsample: bool) -> Result<Vec<Tensor>> {
    scatter2_padded(w1, bank, subsample, Padding::Reflect)
}

fn scatter2_padded(w1: &[ComplexTensor], bank: &FilterBank, subsample: bool, pad: Padding) -> Result<Vec<Tensor>> {
    if w1.len() != bank.num_scales() {
        return Err(Error::dim("scatter2", &[w1.len()], &[bank.num_scales()]));
    }
    let filters = bank.effective_filters()?;
    let envelopes: Vec<Tensor> = w1.iter().map(ComplexTensor::modulus).collect();
    path_index(bank.j_max())
        .into_iter()
        .map(|(j1, j2)| {
            let w2 = convolve_complex_padded(&envelopes[j1 as usize - 1], &filters[j2 as usize - 1], pad)?;
            lowpass_out(&w2.modulus(), bank, subsample, pad)
        })
        .collect()
}

/// Scattering of a single channel with reflect padding at the edges.
pub fn scattering(x: &Tensor, bank: &FilterBank, subsample: bool) -> Result<ScatteringCoefficients> {
    scattering_padded(x, bank, subsample, Padding::Reflect)
}

/// Scattering of a single channel with the given boundary extension.
pub fn scattering_padded(
    x: &Tensor,
    bank: &FilterBank,
    subsample: bool,
    pad: Padding,
) -> Result<ScatteringCoefficients> {
    check_len(x, bank)?;
    let s0 = lowpass_out(x, bank, subsample, pad)?;
    let (w1, s1) = scatter1_padded(x, bank, subsample, pad)?;
    let s2 = scatter2_padded(&w1, bank, subsample, pad)?;
    Ok(ScatteringCoefficients {
        s0,
        s1,
        s2,
        path_index: path_index(bank.j_max()),
    })
}

/// Channel-independent scattering of a `[T x C]` series.
pub fn full_scattering(x: &Tensor, bank: &FilterBank, subsample: bool) -> Result<Vec<ScatteringCoefficients>> {
    if x.ndim() != 2 {
        return Err(Error::dim("full_scattering", x.shape(), &[bank.signal_len(), 1]));
    }
    (0..x.cols())
        .map(|c| scattering(&x.column(c), bank, subsample))
        .collect()
}

/// Per-path coefficient vars produced on a tape.
#[derive(Clone, Debug)]
pub struct ScatterVars {
    pub s0: Var,
    pub s1: Vec<Var>,
    pub s2: Vec<Var>,
}

/// Full-length (no subsampling) scattering of `x` on a tape, using filters
/// already bound to the tape as `(re, im)` pairs.
pub fn scatter_on_tape(tape: &mut Tape, x: Var, filters: &[(Var, Var)], lowpass: Var) -> Result<ScatterVars> {
    let s0 = tape.conv(x, lowpass, Padding::Reflect)?;
    let mut envelopes = Vec::with_capacity(filters.len());
    let mut s1 = Vec::with_capacity(filters.len());
    for &(re, im) in filters {
        let wr = tape.conv(x, re, Padding::Reflect)?;
        let wi = tape.conv(x, im, Padding::Reflect)?;
        let u = tape.modulus(wr, wi)?;
        s1.push(tape.conv(u, lowpass, Padding::Reflect)?);
        envelopes.push(u);
    }
    let mut s2 = Vec::new();
    for (j1, j2) in path_index(filters.len() as u32) {
        let u = envelopes[j1 as usize - 1];
        let (re, im) = filters[j2 as usize - 1];
        let wr = tape.conv(u, re, Padding::Reflect)?;
        let wi = tape.conv(u, im, Padding::Reflect)?;
        let u2 = tape.modulus(wr, wi)?;
        s2.push(tape.conv(u2, lowpass, Padding::Reflect)?);
    }
    Ok(ScatterVars { s0, s1, s2 })
}

/// Circular shift `(T_c x)(t) = x(t - c)`.
pub fn circular_shift(x: &Tensor, c: usize) -> Tensor {
    let n = x.len();
    Tensor::vector((0..n).map(|t| x.data()[(t + n - c % n) % n]).collect())
}

/// `||S[x] - S[T_c x]||_2 / ||x||_2` without output subsampling.
pub fn translation_distance(x: &Tensor, c: usize, bank: &FilterBank) -> Result<f64> {
    if c == 0 {
        return Ok(0.0);
    }
    if 4 * c >= x.len() {
        return Err(Error::Contract(format!(
            "shift {c} must be below a quarter of the length {}",
            x.len()
        )));
    }
    let a = scattering_padded(x, bank, false, Padding::Circular)?;
    let b = scattering_padded(&circular_shift(x, c), bank, false, Padding::Circular)?;
    Ok(scattering_distance(&a, &b) / x.norm())
}

/// Per-sample displacement `tau(t)` in samples.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    tau: Tensor,
    max_slope: f64,
}

impl DeformationField {
    pub fn new(tau: Tensor) -> Self {
        let max_slope = tau.data().windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
        Self { tau, max_slope }
    }

    pub fn constant(len: usize, shift: f64) -> Self {
        Self::new(Tensor::full(&[len], shift))
    }

    /// `tau(t) = eps * L / (2 pi k) * sin(2 pi k t / L)`, whose derivative
    /// peaks at `eps`.
    pub fn sinusoidal(len: usize, eps: f64, cycles: f64) -> Self {
        let omega = 2.0 * std::f64::consts::PI * cycles / len as f64;
        Self::new(Tensor::vector(
            (0..len).map(|t| eps / omega * (omega * t as f64).sin()).collect(),
        ))
    }

    pub fn tau(&self) -> &Tensor {
        &self.tau
    }

    /// `max_t |tau(t+1) - tau(t)|`.
    pub fn max_slope(&self) -> f64 {
        self.max_slope
    }

    /// `x(t - tau(t))` by linear interpolation on the circular extension.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.len() != self.tau.len() {
            return Err(Error::dim("deformation", x.shape(), self.tau.shape()));
        }
        let n = x.len() as isize;
        let at = |i: isize| x.data()[i.rem_euclid(n) as usize];
        Ok(Tensor::vector(
            self.tau
                .data()
                .iter()
                .enumerate()
                .map(|(t, tau)| {
                    let pos = t as f64 - tau;
                    let i0 = pos.floor();
                    let frac = pos - i0;
                    let i0 = i0 as isize;
                    if frac == 0.0 {
                        at(i0)
                    } else {
                        (1.0 - frac) * at(i0) + frac * at(i0 + 1)
                    }
                })
                .collect(),
        ))
    }
}

/// `||S[x] - S[x_tau]||_2 / ||x||_2` without output subsampling.
pub fn deformation_distance(x: &Tensor, field: &DeformationField, bank: &FilterBank) -> Result<f64> {
    if field.max_slope() >= 1.0 {
        return Err(Error::Hypothesis(format!(
            "deformation slope {} must be below 1",
            field.max_slope()
        )));
    }
    let warped = field.apply(x)?;
    let a = scattering_padded(x, bank, false, Padding::Circular)?;
    let b = scattering_padded(&warped, bank, false, Padding::Circular)?;
    Ok(scattering_distance(&a, &b) / x.norm())
}

/// Seeded sum of `components` random-phase cosines with integer cycle counts
/// drawn from `cycles`, so the signal is periodic over its length.
pub fn band_limited_signal(
    len: usize,
    cycles: std::ops::RangeInclusive<usize>,
    components: usize,
    seed: u64,
) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; len];
    for _ in 0..components {
        let k = rng.gen_range(cycles.clone()) as f64;
        let amp = rng.gen_range(0.5..1.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let w = std::f64::consts::TAU * k / len as f64;
        for (t, v) in x.iter_mut().enumerate() {
            *v += amp * (w * t as f64 + phase).cos();
        }
    }
    Tensor::vector(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filterbank::{morlet_center_frequency, DEFAULT_KERNEL_LEN};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn bank(j: u32, t: usize) -> FilterBank {
        FilterBank::new(j, t, DEFAULT_KERNEL_LEN).unwrap()
    }

    fn noise(t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::vector((0..t).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn variance(x: &[f64]) -> f64 {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
    }

    #[test]
    fn s0_examples() {
        let b = bank(4, 256);
        let c = Tensor::full(&[256], 1.7);
        let s0 = scatter0(&c, &b, false).unwrap();
        assert!(s0.data().iter().all(|v| (v - 1.7).abs() < 1e-10));
        let z = scatter0(&Tensor::zeros(&[256]), &b, true).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(z.len(), 256 / 8);

        let x = noise(256, 1);
        let s0 = scatter0(&x, &b, false).unwrap();
        let ratio = variance(s0.data()) / variance(x.data());
        assert!(ratio < 0.2, "{ratio}");
    }

    #[test]
    fn s1_kills_constants_and_is_homogeneous() {
        let b = bank(4, 256);
        let c = Tensor::full(&[256], -3.0);
        let (_, s1) = scatter1(&c, &b, false).unwrap();
        let norm = s1.iter().map(|t| t.norm().powi(2)).sum::<f64>().sqrt();
        assert!(norm / 3.0 < 1e-5, "{norm}");

        let x = noise(256, 2);
        let (_, a) = scatter1(&x, &b, false).unwrap();
        let (_, d) = scatter1(&x.scale(2.0), &b, false).unwrap();
        for (p, q) in a.iter().zip(&d) {
            for (u, v) in p.data().iter().zip(q.data()) {
                assert!((2.0 * u - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn s1_peaks_at_matching_scale() {
        let b = bank(5, 512);
        for j_star in 1..=5 {
            let w = morlet_center_frequency(j_star);
            let x = Tensor::vector((0..512).map(|t| (w * t as f64).cos()).collect());
            let (_, s1) = scatter1(&x, &b, false).unwrap();
            let best = s1
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap())
                .unwrap()
                .0 as u32
                + 1;
            assert_eq!(best, j_star);
        }
    }

    #[test]
    fn s2_examples() {
        let b = bank(4, 256);
        let z = scattering(&Tensor::zeros(&[256]), &b, false).unwrap();
        assert!(z.flatten().iter().all(|&v| v == 0.0));

        let c = Tensor::full(&[256], 0.5);
        let (w1, _) = scatter1(&c, &b, false).unwrap();
        let s2 = scatter2(&w1, &b, false).unwrap();
        let norm = s2.iter().map(|t| t.norm().powi(2)).sum::<f64>().sqrt();
        assert!(norm / 0.5 < 1e-5, "{norm}");
    }

    #[test]
    fn s2_peaks_at_carrier_and_envelope_scales() {
        let t_len = 1024;
        let b = bank(5, t_len);
        for &(jc, je) in &[(1, 3), (1, 4), (2, 4), (2, 5)] {
            let wc = morlet_center_frequency(jc);
            let we = morlet_center_frequency(je);
            let x = Tensor::vector(
                (0..t_len)
                    .map(|t| (1.0 + 0.8 * (we * t as f64).cos()) * (wc * t as f64).cos())
                    .collect(),
            );
            let coeffs = scattering(&x, &b, false).unwrap();
            let best = coeffs
                .s2
                .iter()
                .zip(&coeffs.path_index)
                .max_by(|a, b| a.0.norm().partial_cmp(&b.0.norm()).unwrap())
                .unwrap()
                .1;
            assert_eq!(*best, (jc, je));
        }
    }

    #[test]
    fn path_counts() {
        assert_eq!(coefficient_count(4), 11);
        assert_eq!(path_index(4).len(), 6);
        assert_eq!(path_index(3), vec![(1, 2), (1, 3), (2, 3)]);
        let b = bank(3, 64);
        let s = scattering(&noise(64, 3), &b, false).unwrap();
        assert_eq!(s.num_paths(), coefficient_count(3));
    }

    #[test]
    fn channels_are_independent() {
        let b = bank(3, 64);
        let col = noise(64, 4);
        let other = noise(64, 5);
        let x = Tensor::from_columns(&[col.data().to_vec(), col.data().to_vec()]).unwrap();
        let s = full_scattering(&x, &b, false).unwrap();
        assert_eq!(s[0], s[1]);
        let swapped = full_scattering(
            &Tensor::from_columns(&[other.data().to_vec(), col.data().to_vec()]).unwrap(),
            &b,
            false,
        )
        .unwrap();
        let straight = full_scattering(
            &Tensor::from_columns(&[col.data().to_vec(), other.data().to_vec()]).unwrap(),
            &b,
            false,
        )
        .unwrap();
        assert_eq!(swapped[0], straight[1]);
        assert_eq!(swapped[1], straight[0]);
    }

    #[test]
    fn nonnegative_and_homogeneous() {
        let b = bank(4, 128);
        let x = noise(128, 6);
        let s = scattering(&x, &b, false).unwrap();
        for row in s.s1.iter().chain(&s.s2) {
            assert!(row.data().iter().all(|&v| v >= -1e-12));
        }
        for alpha in [-2.0, 0.5, 3.0] {
            let sa = scattering(&x.scale(alpha), &b, false).unwrap();
            let expect = s.scale(f64::abs(alpha));
            let rel = scattering_distance(&sa, &expect) / expect.flatten().iter().map(|v| v * v).sum::<f64>().sqrt();
            // S0 is linear, not homogeneous in |alpha|; compare it separately.
            let s0_rel = sa.s0.max_abs_diff(&s.s0.scale(alpha));
            let rest: f64 = sa
                .s1
                .iter()
                .chain(&sa.s2)
                .zip(expect.s1.iter().chain(&expect.s2))
                .map(|(p, q)| p.max_abs_diff(q))
                .fold(0.0, f64::max);
            assert!(s0_rel < 1e-10 && rest < 1e-10, "{alpha}: {rel} {s0_rel} {rest}");
        }
    }

    #[test]
    fn translation_and_deformation_trivial_cases() {
        let b = bank(3, 256);
        let x = noise(256, 7);
        assert_eq!(translation_distance(&x, 0, &b).unwrap(), 0.0);
        assert_eq!(
            deformation_distance(&x, &DeformationField::constant(256, 0.0), &b).unwrap(),
            0.0
        );
        let shift = DeformationField::constant(256, 5.0);
        let d = deformation_distance(&x, &shift, &b).unwrap();
        assert_eq!(d, translation_distance(&x, 5, &b).unwrap());
        assert!(matches!(translation_distance(&x, 64, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn deformation_rejects_steep_fields() {
        let b = bank(3, 256);
        let x = noise(256, 8);
        let field = DeformationField::sinusoidal(256, 1.5, 2.0);
        assert!(field.max_slope() >= 1.0);
        assert!(matches!(
            deformation_distance(&x, &field, &b),
            Err(Error::Hypothesis(_))
        ));
    }

    #[test]
    fn sinusoidal_field_slope_is_eps() {
        let f = DeformationField::sinusoidal(1024, 0.02, 3.0);
        assert!((f.max_slope() - 0.02).abs() < 1e-4);
        let _ = PI;
    }

    #[test]
    fn tape_scattering_matches_direct() {
        let b = bank(3, 64);
        let x = noise(64, 9);
        let direct = scattering(&x, &b, false).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let filters: Vec<(Var, Var)> = b
            .effective_filters()
            .unwrap()
            .into_iter()
            .map(|f| (tape.constant(f.re), tape.constant(f.im)))
            .collect();
        let lp = tape.constant(b.lowpass().clone());
        let vars = scatter_on_tape(&mut tape, xv, &filters, lp).unwrap();
        assert!(tape.value(vars.s0).max_abs_diff(&direct.s0) < 1e-14);
        for (v, t) in vars.s1.iter().zip(&direct.s1).chain(vars.s2.iter().zip(&direct.s2)) {
            assert!(tape.value(*v).max_abs_diff(t) < 1e-14);
        }
    }
}
