//! Seeded translation and deformation stability suite for the scattering
//! front end.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::filterbank::FilterBank;
use crate::hstm::{band_limited_signal, deformation_distance, translation_distance, DeformationField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceConfig {
    pub signal_len: usize,
    pub num_signals: usize,
    pub seed: u64,
    pub shift: usize,
    pub j_values: Vec<u32>,
    /// Maximum slopes of the sinusoidal deformation fields.
    pub epsilons: Vec<f64>,
    pub deformation_j: u32,
    /// Full cycles of the deformation field over the signal.
    pub deformation_cycles: f64,
    pub kernel_len: usize,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        Self {
            signal_len: 1024,
            num_signals: 10,
            seed: 0,
            shift: 16,
            j_values: vec![3, 4, 5, 6],
            epsilons: vec![0.005, 0.01, 0.02, 0.04],
            deformation_j: 4,
            deformation_cycles: 3.0,
            kernel_len: crate::filterbank::DEFAULT_KERNEL_LEN,
        }
    }
}

impl InvarianceConfig {
    /// Signals for the translation sweep: 32 cosines in the band
    /// `[T/8, 3T/8]` cycles, above the low-pass cutoff of every tested `J`.
    pub fn translation_signal(&self, index: usize) -> Tensor {
        let t = self.signal_len;
        band_limited_signal(t, t / 8..=3 * t / 8, 32, self.seed.wrapping_add(index as u64))
    }

    /// Signals for the deformation sweep: 32 cosines with at most `T/32`
    /// cycles, well sampled so linear interpolation error stays second order.
    pub fn deformation_signal(&self, index: usize) -> Tensor {
        let t = self.signal_len;
        band_limited_signal(t, 1..=(t / 32).max(1), 32, self.seed.wrapping_add(1000 + index as u64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationRow {
    pub signal: usize,
    /// Distance per entry of `j_values`.
    pub distances: Vec<f64>,
    pub monotone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformationRow {
    pub signal: usize,
    /// Distance per entry of `epsilons`.
    pub distances: Vec<f64>,
    pub log_log_slope: f64,
    pub within_bounds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub config: InvarianceConfig,
    pub translation: Vec<TranslationRow>,
    pub monotone_count: usize,
    /// Mean of `d(J+1) / d(J)` over all signals and consecutive scales.
    pub mean_decay_ratio: f64,
    pub translation_pass: bool,
    pub deformation: Vec<DeformationRow>,
    pub slope_bounds: (f64, f64),
    pub slope_pass_count: usize,
    pub deformation_pass: bool,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::dim("log_log_slope", &[x.len()], &[y.len()]));
    }
    if x.iter().chain(y).any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::Numeric("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

fn bank_with(j: u32, config: &InvarianceConfig, kernels: Option<&[Tensor]>) -> Result<FilterBank> {
    let mut bank = FilterBank::new(j, config.signal_len, config.kernel_len)?;
    if let Some(ks) = kernels {
        for (i, g) in ks.iter().enumerate().take(j as usize) {
            bank.set_kernel(i as u32 + 1, g.clone())?;
        }
    }
    Ok(bank)
}

/// Runs both sweeps. `kernels`, if given, replace the identity kernels at
/// scales `1..=kernels.len()` of every bank.
pub fn run_invariance(config: &InvarianceConfig, kernels: Option<&[Tensor]>) -> Result<InvarianceReport> {
    if config.j_values.len() < 2 || config.epsilons.len() < 2 || config.num_signals == 0 {
        return Err(Error::Config(
            "invariance suite needs at least two scales, two epsilons and one signal".into(),
        ));
    }
    let banks = config
        .j_values
        .iter()
        .map(|&j| bank_with(j, config, kernels))
        .collect::<Result<Vec<_>>>()?;
    let mut translation = Vec::with_capacity(config.num_signals);
    let mut ratios = Vec::new();
    for i in 0..config.num_signals {
        let x = config.translation_signal(i);
        let distances = banks
            .iter()
            .map(|b| translation_distance(&x, config.shift, b))
            .collect::<Result<Vec<_>>>()?;
        ratios.extend(distances.windows(2).map(|w| w[1] / w[0]));
        translation.push(TranslationRow {
            signal: i,
            monotone: distances.windows(2).all(|w| w[1] < w[0]),
            distances,
        });
    }
    let monotone_count = translation.iter().filter(|r| r.monotone).count();
    let mean_decay_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;

    let slope_bounds = (0.8, 1.2);
    let bank = bank_with(config.deformation_j, config, kernels)?;
    let mut deformation = Vec::with_capacity(config.num_signals);
    for i in 0..config.num_signals {
        let x = config.deformation_signal(i);
        let distances = config
            .epsilons
            .iter()
            .map(|&eps| {
                let field = DeformationField::sinusoidal(config.signal_len, eps, config.deformation_cycles);
                deformation_distance(&x, &field, &bank)
            })
            .collect::<Result<Vec<_>>>()?;
        let log_log_slope = log_log_slope(&config.epsilons, &distances)?;
        deformation.push(DeformationRow {
            signal: i,
            within_bounds: (slope_bounds.0..=slope_bounds.1).contains(&log_log_slope),
            distances,
            log_log_slope,
        });
    }
    let slope_pass_count = deformation.iter().filter(|r| r.within_bounds).count();
    let needed = (9 * config.num_signals).div_ceil(10);
    Ok(InvarianceReport {
        config: config.clone(),
        translation_pass: monotone_count >= needed && mean_decay_ratio < 0.75,
        translation,
        monotone_count,
        mean_decay_ratio,
        deformation,
        slope_bounds,
        slope_pass_count,
        deformation_pass: slope_pass_count >= needed,
    })
}
