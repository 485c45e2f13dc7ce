//! Trend/seasonal/residual decomposition and the component-weighted loss.
//!
//! The trend is a centered moving average (reflect-padded), the seasonal part
//! is the per-phase mean of the detrended series with its average removed, and
//! the residual is what remains. All three stages are linear.
//!
//! Phase means skip the `p / 2` samples at each end whose moving average
//! reaches into the padding, so boundary artifacts of the trend do not leak
//! into the seasonal pattern.

use serde::{Deserialize, Serialize};

use crate::diffcore::kernels::{self, Padding};
use crate::diffcore::tape::periodic_mean;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_t: f64,
    pub lambda_s: f64,
    pub lambda_r: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_t: 1.0,
            lambda_s: 1.0,
            lambda_r: 0.5,
            beta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_t", self.lambda_t),
            ("lambda_s", self.lambda_s),
            ("lambda_r", self.lambda_r),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsrComponents {
    pub trend: Tensor,
    pub seasonal: Tensor,
    pub residual: Tensor,
    pub period: usize,
}

/// Rows excluded at each edge when averaging phases.
pub fn edge_skip(p: usize) -> usize {
    p / 2
}

/// Moving-average weights: a box of length `p` for odd `p`, otherwise the
/// `2 x p` average of length `p + 1` with half weights at both ends.
pub fn trend_kernel(p: usize) -> Tensor {
    if p % 2 == 1 {
        Tensor::full(&[p], 1.0 / p as f64)
    } else {
        let mut k = vec![1.0 / p as f64; p + 1];
        k[0] *= 0.5;
        k[p] *= 0.5;
        Tensor::vector(k)
    }
}

fn check_period(rows: usize, p: usize) -> Result<()> {
    if p == 0 || p > rows / 2 {
        return Err(Error::Contract(format!(
            "period {p} must lie in 1..={} for a series of length {rows}",
            rows / 2
        )));
    }
    Ok(())
}

fn as_matrix(x: &Tensor) -> Result<Tensor> {
    match x.ndim() {
        1 => x.clone().reshape(&[x.len(), 1]),
        2 => Ok(x.clone()),
        _ => Err(Error::dim("decompose", x.shape(), &[2])),
    }
}

/// Decomposes each column of a `[T x C]` series (or a `[T]` vector).
pub fn decompose(x: &Tensor, p: usize) -> Result<TsrComponents> {
    let m = as_matrix(x)?;
    check_period(m.rows(), p)?;
    let kernel = trend_kernel(p);
    let columns: Vec<Vec<f64>> = (0..m.cols())
        .map(|c| kernels::convolve_same(m.column(c).data(), kernel.data(), Padding::Reflect))
        .collect();
    let trend = Tensor::from_columns(&columns)?.reshape(x.shape())?;
    let detrended = x.zip_map(&trend, |a, b| a - b)?;
    let seasonal = periodic_mean(&detrended, p, edge_skip(p))?;
    let residual = detrended.zip_map(&seasonal, |a, b| a - b)?;
    Ok(TsrComponents {
        trend,
        seasonal,
        residual,
        period: p,
    })
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("mse", a.shape(), b.shape()));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// `lambda_t MSE(trend) + lambda_s MSE(seasonal) + lambda_r MSE(residual)`.
pub fn tsr_loss(target: &TsrComponents, prediction: &TsrComponents, w: &LossWeights) -> Result<f64> {
    Ok(w.lambda_t * mse(&target.trend, &prediction.trend)?
        + w.lambda_s * mse(&target.seasonal, &prediction.seasonal)?
        + w.lambda_r * mse(&target.residual, &prediction.residual)?)
}

/// `MSE(x, x_hat) + beta * tsr_loss` with both series decomposed at period `p`.
pub fn final_loss(x: &Tensor, x_hat: &Tensor, w: &LossWeights, p: usize) -> Result<f64> {
    let base = mse(x, x_hat)?;
    if w.beta == 0.0 {
        return Ok(base);
    }
    let target = decompose(x, p)?;
    let prediction = decompose(x_hat, p)?;
    Ok(base + w.beta * tsr_loss(&target, &prediction, w)?)
}

/// Decomposition of a `[T x C]` var. Returns `(trend, seasonal, residual)`.
pub fn decompose_on_tape(tape: &mut Tape, x: Var, p: usize) -> Result<(Var, Var, Var)> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("decompose", &shape, &[2]));
    }
    check_period(shape[0], p)?;
    let kernel = tape.constant(trend_kernel(p));
    let columns = (0..shape[1])
        .map(|c| {
            let col = tape.column(x, c)?;
            tape.conv(col, kernel, Padding::Reflect)
        })
        .collect::<Result<Vec<_>>>()?;
    let trend = tape.concat_cols(&columns)?;
    let detrended = tape.sub(x, trend)?;
    let seasonal = tape.periodic_mean(detrended, p, edge_skip(p))?;
    let residual = tape.sub(detrended, seasonal)?;
    Ok((trend, seasonal, residual))
}

fn mse_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Loss terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    /// Absent when `beta = 0` or the decomposition is skipped.
    pub tsr: Option<Var>,
}

/// Tape version of [`final_loss`]; `period` of `None` skips the
/// decomposition term.
pub fn final_loss_on_tape(
    tape: &mut Tape,
    x: Var,
    x_hat: Var,
    w: &LossWeights,
    period: Option<usize>,
) -> Result<LossVars> {
    let base = mse_on_tape(tape, x, x_hat)?;
    let p = match period {
        Some(p) if w.beta > 0.0 => p,
        _ => {
            return Ok(LossVars {
                total: base,
                mse: base,
                tsr: None,
            })
        }
    };
    let (tt, ts, tr) = decompose_on_tape(tape, x, p)?;
    let (pt, ps, pr) = decompose_on_tape(tape, x_hat, p)?;
    let lt = mse_on_tape(tape, tt, pt)?;
    let ls = mse_on_tape(tape, ts, ps)?;
    let lr = mse_on_tape(tape, tr, pr)?;
    let lt = tape.scale(lt, w.lambda_t);
    let ls = tape.scale(ls, w.lambda_s);
    let lr = tape.scale(lr, w.lambda_r);
    let tsr = tape.add_all(&[lt, ls, lr])?;
    let weighted = tape.scale(tsr, w.beta);
    let total = tape.add(base, weighted)?;
    Ok(LossVars {
        total,
        mse: base,
        tsr: Some(tsr),
    })
}

/// Decomposition period used inside the loss for a horizon of `t_p` steps:
/// the configured period clamped to `t_p / 2`, or `None` when `t_p < 2`.
pub fn loss_period(period: usize, t_p: usize) -> Option<usize> {
    (t_p >= 2).then(|| period.clamp(1, t_p / 2))
}

/// Dominant autocorrelation lag of the first-differenced series, averaged
/// over channels, searched over `4..=max_lag`. The smallest local peak
/// reaching 90% of the best correlation wins, so multiples of the period are
/// not chosen.
pub fn detect_period(x: &Tensor, max_lag: usize) -> Result<usize> {
    let m = as_matrix(x)?;
    let lo = 4;
    if max_lag < lo {
        return Ok(max_lag.max(1));
    }
    if m.rows() < max_lag + 3 {
        return Err(Error::Data(format!(
            "{} rows are too few to detect a period up to lag {max_lag}",
            m.rows()
        )));
    }
    let mut acf = vec![0.0; max_lag + 1];
    for c in 0..m.cols() {
        let col = m.column(c);
        let diff: Vec<f64> = col.data().windows(2).map(|w| w[1] - w[0]).collect();
        let mean = diff.iter().sum::<f64>() / diff.len() as f64;
        let centered: Vec<f64> = diff.iter().map(|v| v - mean).collect();
        let var: f64 = centered.iter().map(|v| v * v).sum();
        if var == 0.0 {
            continue;
        }
        for (lag, a) in acf.iter_mut().enumerate().skip(lo - 1) {
            let cov: f64 = centered.iter().zip(&centered[lag..]).map(|(u, v)| u * v).sum();
            *a += cov / var / m.cols() as f64;
        }
    }
    let best = acf[lo..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if best <= 0.0 {
        return Ok(max_lag);
    }
    let is_peak = |l: usize| acf[l] >= acf[l - 1] && (l == max_lag || acf[l] >= acf[l + 1]);
    Ok((lo..=max_lag)
        .find(|&l| is_peak(l) && acf[l] >= 0.9 * best)
        .unwrap_or(max_lag))
}
