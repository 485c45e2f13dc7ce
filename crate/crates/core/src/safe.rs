//! Scale-adaptive enhancement: softmax attention over per-scale context
//! vectors and a sigmoid gate driven by the forecast horizon.

use crate::diffcore::{self, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SafeParams {
    pub w_alpha: Tensor,
    pub w_gamma: Tensor,
    pub b_gamma: Tensor,
}

impl SafeParams {
    pub fn zeros(d_model: usize) -> Self {
        Self {
            w_alpha: Tensor::zeros(&[d_model]),
            w_gamma: Tensor::zeros(&[d_model]),
            b_gamma: Tensor::zeros(&[d_model]),
        }
    }
}

fn check_groups(h: &[Tensor]) -> Result<(usize, usize)> {
    let first = h
        .first()
        .ok_or_else(|| Error::Contract("at least one scale group is required".into()))?;
    if first.ndim() != 2 {
        return Err(Error::dim("scale features", first.shape(), &[2]));
    }
    for hj in h {
        if hj.shape() != first.shape() {
            return Err(Error::dim("scale features", first.shape(), hj.shape()));
        }
    }
    Ok((first.rows(), first.cols()))
}

/// Temporal mean of each `[T x D]` scale map, stacked to `[J_s x D]`.
pub fn context_vectors(h: &[Tensor]) -> Result<Tensor> {
    let (t, d) = check_groups(h)?;
    let mut out = Vec::with_capacity(h.len() * d);
    for hj in h {
        let mut mean = vec![0.0; d];
        for r in 0..t {
            for (m, v) in mean.iter_mut().zip(hj.row(r)) {
                *m += v;
            }
        }
        out.extend(mean.into_iter().map(|m| m / t as f64));
    }
    Tensor::matrix(h.len(), d, out)
}

/// `alpha = softmax_j(w_alpha . h_j)`.
pub fn scale_attention(h: &Tensor, w_alpha: &Tensor) -> Result<Tensor> {
    if h.ndim() != 2 || h.cols() != w_alpha.len() {
        return Err(Error::dim("scale_attention", h.shape(), w_alpha.shape()));
    }
    let logits = h.matmul(&w_alpha.clone().reshape(&[w_alpha.len(), 1])?)?;
    diffcore::softmax(&logits.reshape(&[h.rows()])?)
}

/// `sigmoid(w_gamma * (t_p / t_p_max) + b_gamma)`.
pub fn horizon_gate(t_p: usize, t_p_max: usize, w_gamma: &Tensor, b_gamma: &Tensor) -> Result<Tensor> {
    let u = horizon_fraction(t_p, t_p_max)?;
    let z = w_gamma.zip_map(b_gamma, |w, b| w * u + b)?;
    Ok(diffcore::sigmoid(&z))
}

pub fn horizon_fraction(t_p: usize, t_p_max: usize) -> Result<f64> {
    if t_p == 0 || t_p > t_p_max {
        return Err(Error::Contract(format!("horizon {t_p} outside 1..={t_p_max}")));
    }
    Ok(t_p as f64 / t_p_max as f64)
}

/// `(sum_j alpha_j H_j) * gamma`, with `gamma` broadcast over time.
pub fn enhance(h: &[Tensor], alpha: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    let (t, d) = check_groups(h)?;
    if alpha.len() != h.len() {
        return Err(Error::dim("enhance", &[h.len()], alpha.shape()));
    }
    if gamma.len() != d {
        return Err(Error::dim("enhance", &[t, d], gamma.shape()));
    }
    let mut out = Tensor::zeros(&[t, d]);
    for (hj, &a) in h.iter().zip(alpha.data()) {
        for (o, v) in out.data_mut().iter_mut().zip(hj.data()) {
            *o += a * v;
        }
    }
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        *o *= gamma.data()[i % d];
    }
    Ok(out)
}

/// Tape version of the attention weights; returns `alpha` as a `[J_s]` var.
pub fn scale_attention_on_tape(tape: &mut Tape, h: &[Var], w_alpha: Var) -> Result<Var> {
    let contexts = h.iter().map(|&hj| tape.mean_rows(hj)).collect::<Result<Vec<_>>>()?;
    let stacked = tape.stack_rows(&contexts)?;
    let d = tape.value(w_alpha).len();
    let w = tape.reshape(w_alpha, &[d, 1])?;
    let logits = tape.matmul(stacked, w)?;
    let logits = tape.reshape(logits, &[h.len()])?;
    tape.softmax(logits)
}

/// Tape version of the horizon gate for a fixed horizon fraction.
pub fn horizon_gate_on_tape(tape: &mut Tape, fraction: f64, w_gamma: Var, b_gamma: Var) -> Result<Var> {
    let z = tape.scale(w_gamma, fraction);
    let z = tape.add(z, b_gamma)?;
    Ok(tape.sigmoid(z))
}

/// Tape version of [`enhance`]; `gamma` of `None` means no gating.
pub fn enhance_on_tape(tape: &mut Tape, h: &[Var], alpha: Var, gamma: Option<Var>) -> Result<Var> {
    let weighted = h
        .iter()
        .enumerate()
        .map(|(j, &hj)| {
            let a = tape.select(alpha, j)?;
            tape.mul_scalar(hj, a)
        })
        .collect::<Result<Vec<_>>>()?;
    let sum = tape.add_all(&weighted)?;
    match gamma {
        Some(g) => tape.mul_row(sum, g),
        None => Ok(sum),
    }
}
