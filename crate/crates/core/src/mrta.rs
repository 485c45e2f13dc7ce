//! Multi-resolution temporal attention: single-head attention on mean-pooled
//! views at several strides, upsampled back to full length and mixed with
//! softmax weights.

use crate::diffcore::{self, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Checks that strides are positive and strictly increasing.
pub fn validate_strides(strides: &[usize]) -> Result<()> {
    if strides.is_empty() {
        return Err(Error::Config("at least one stride is required".into()));
    }
    if strides[0] == 0 || strides.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!(
            "strides must be positive and strictly increasing, got {strides:?}"
        )));
    }
    Ok(())
}

fn on_tape<F>(input: &Tensor, f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = f(&mut tape, x)?;
    Ok(tape.value(y).clone())
}

/// Mean over windows of `r` consecutive rows; the last partial window is
/// averaged over its actual length.
pub fn pool(h: &Tensor, r: usize) -> Result<Tensor> {
    on_tape(h, |t, x| t.pool(x, r))
}

/// Center-aligned linear interpolation of a stride-`r` view back to `len` rows.
pub fn upsample(c: &Tensor, len: usize, r: usize) -> Result<Tensor> {
    on_tape(c, |t, x| t.upsample(x, len, r))
}

/// `A = softmax(Q K^T / sqrt(d))`, `C = A V`. Returns `(C, A)`.
pub fn resolution_attention(h: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<(Tensor, Tensor)> {
    let q = h.matmul(wq)?;
    let k = h.matmul(wk)?;
    let v = h.matmul(wv)?;
    let d = q.cols() as f64;
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / d.sqrt());
    let a = diffcore::softmax(&scores)?;
    let c = a.matmul(&v)?;
    Ok((c, a))
}

/// `sum_r softmax(w_logits)_r * views[r]`.
pub fn combine(views: &[Tensor], w_logits: &Tensor) -> Result<Tensor> {
    let first = views
        .first()
        .ok_or_else(|| Error::Contract("combine needs at least one view".into()))?;
    if w_logits.len() != views.len() {
        return Err(Error::dim("combine", &[views.len()], w_logits.shape()));
    }
    let w = diffcore::softmax(w_logits)?;
    let mut out = Tensor::zeros(first.shape());
    for (v, &wr) in views.iter().zip(w.data()) {
        if v.shape() != first.shape() {
            return Err(Error::dim("combine", first.shape(), v.shape()));
        }
        for (o, x) in out.data_mut().iter_mut().zip(v.data()) {
            *o += wr * x;
        }
    }
    Ok(out)
}

/// Projection weights of one resolution, each `[D x d]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub strides: Vec<usize>,
    pub heads: Vec<HeadVars>,
    /// Combine logits; absent for a single stride.
    pub w_logits: Option<Var>,
    /// `[d x D]` output projection and its bias.
    pub wo: Var,
    pub bo: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

/// Intermediate values kept for inspection.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Attention matrix per stride.
    pub attention: Vec<Var>,
    /// Combine weights, absent for a single stride.
    pub combine: Option<Var>,
}

/// Attention of a pooled view on a tape. Returns `(C, A)`.
pub fn attention_on_tape(tape: &mut Tape, h: Var, head: &HeadVars) -> Result<(Var, Var)> {
    let q = tape.matmul(h, head.wq)?;
    let k = tape.matmul(h, head.wk)?;
    let v = tape.matmul(h, head.wv)?;
    let d = tape.value(q).cols() as f64;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / d.sqrt());
    let a = tape.softmax(scores)?;
    let c = tape.matmul(a, v)?;
    Ok((c, a))
}

/// One block: multi-resolution attention, output projection, residual and
/// layer normalization with gain and bias.
pub fn layer_on_tape(tape: &mut Tape, h: Var, layer: &LayerVars) -> Result<(Var, LayerTrace)> {
    if layer.strides.len() != layer.heads.len() {
        return Err(Error::dim("mrta layer", &[layer.strides.len()], &[layer.heads.len()]));
    }
    let len = tape.value(h).rows();
    let mut views = Vec::with_capacity(layer.strides.len());
    let mut attention = Vec::with_capacity(layer.strides.len());
    for (&r, head) in layer.strides.iter().zip(&layer.heads) {
        let pooled = if r == 1 { h } else { tape.pool(h, r)? };
        let (c, a) = attention_on_tape(tape, pooled, head)?;
        attention.push(a);
        views.push(if r == 1 { c } else { tape.upsample(c, len, r)? });
    }
    let (mixed, combine) = match layer.w_logits {
        Some(logits) => {
            let w = tape.softmax(logits)?;
            let weighted = views
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let wi = tape.select(w, i)?;
                    tape.mul_scalar(v, wi)
                })
                .collect::<Result<Vec<_>>>()?;
            (tape.add_all(&weighted)?, Some(w))
        }
        None if views.len() == 1 => (views[0], None),
        None => return Err(Error::Contract("several strides need combine logits".into())),
    };
    let projected = tape.matmul(mixed, layer.wo)?;
    let projected = tape.add_row(projected, layer.bo)?;
    let residual = tape.add(h, projected)?;
    let normed = tape.layer_norm(residual, LAYER_NORM_EPS);
    let scaled = tape.mul_row(normed, layer.ln_gain)?;
    let out = tape.add_row(scaled, layer.ln_bias)?;
    Ok((out, LayerTrace { attention, combine }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn pool_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random(&[5, 3], &mut rng);
        assert_eq!(pool(&h, 1).unwrap(), h);
        let v = Tensor::vector(vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(pool(&v, 2).unwrap().data(), &[2.0, 6.0]);
        let v = Tensor::vector(vec![1.0, 3.0, 5.0, 7.0, 11.0]);
        let p = pool(&v, 2).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.data()[2], 11.0);
    }

    #[test]
    fn attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (wq, wk, wv) = (
            random(&[4, 3], &mut rng),
            random(&[4, 3], &mut rng),
            random(&[4, 3], &mut rng),
        );
        let h1 = random(&[1, 4], &mut rng);
        let (c, a) = resolution_attention(&h1, &wq, &wk, &wv).unwrap();
        assert_eq!(a.data(), &[1.0]);
        assert!(c.max_abs_diff(&h1.matmul(&wv).unwrap()) < 1e-15);

        let h = random(&[6, 4], &mut rng);
        let (c, a) = resolution_attention(&h, &Tensor::zeros(&[4, 3]), &wk, &wv).unwrap();
        let v = h.matmul(&wv).unwrap();
        assert!(a.data().iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
        for t in 0..6 {
            for j in 0..3 {
                let mean = (0..6).map(|s| v.at(s, j)).sum::<f64>() / 6.0;
                assert!((c.at(t, j) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random(&[6, 4], &mut rng);
        let (wq, wk, wv) = (
            random(&[4, 3], &mut rng),
            random(&[4, 3], &mut rng),
            random(&[4, 3], &mut rng),
        );
        let (c, a) = resolution_attention(&h, &wq, &wk, &wv).unwrap();
        let proj = |w: &Tensor, t: usize, j: usize| (0..4).map(|i| h.at(t, i) * w.at(i, j)).sum::<f64>();
        for t in 0..6 {
            let scores: Vec<f64> = (0..6)
                .map(|s| (0..3).map(|j| proj(&wq, t, j) * proj(&wk, s, j)).sum::<f64>() / 3f64.sqrt())
                .collect();
            let z: f64 = scores.iter().map(|x| x.exp()).sum();
            let row: Vec<f64> = scores.iter().map(|x| x.exp() / z).collect();
            assert!((a.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..3 {
                let expect: f64 = (0..6).map(|s| row[s] * proj(&wv, s, j)).sum();
                assert!((c.at(t, j) - expect).abs() < 1e-10);
                assert!((a.at(t, j) - row[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn upsample_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random(&[8, 2], &mut rng);
        assert_eq!(upsample(&c, 8, 1).unwrap(), c);
        let k = Tensor::full(&[3, 2], 1.25);
        assert!(upsample(&k, 12, 4)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 1.25).abs() < 1e-15));
        assert!(matches!(upsample(&c, 4, 2), Err(Error::Contract(_))));

        for r in [2, 4] {
            let ramp = Tensor::vector((0..32).map(|t| 0.3 * t as f64 - 1.0).collect());
            let back = upsample(&pool(&ramp, r).unwrap(), 32, r).unwrap();
            for t in r..32 - r {
                assert!((back.data()[t] - ramp.data()[t]).abs() < 1e-10, "r={r} t={t}");
            }
        }
    }

    #[test]
    fn combine_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random(&[4, 3], &mut rng);
        assert_eq!(combine(std::slice::from_ref(&v), &Tensor::vector(vec![0.3])).unwrap(), v);
        let logits = random(&[3], &mut rng);
        let same = combine(&[v.clone(), v.clone(), v.clone()], &logits).unwrap();
        assert!(same.max_abs_diff(&v) < 1e-15);

        let views: Vec<Tensor> = (0..3).map(|_| random(&[4, 3], &mut rng)).collect();
        let out = combine(&views, &logits).unwrap();
        let z: f64 = logits.data().iter().map(|x| x.exp()).sum();
        for i in 0..12 {
            let expect: f64 = (0..3).map(|r| logits.data()[r].exp() / z * views[r].data()[i]).sum();
            assert!((out.data()[i] - expect).abs() < 1e-12);
            let lo = views.iter().map(|v| v.data()[i]).fold(f64::INFINITY, f64::min);
            let hi = views.iter().map(|v| v.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            assert!(out.data()[i] >= lo - 1e-15 && out.data()[i] <= hi + 1e-15);
        }
        assert!(matches!(
            combine(&[v.clone(), random(&[5, 3], &mut rng)], &Tensor::zeros(&[2])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn strides_are_validated() {
        assert!(validate_strides(&[1, 2, 4]).is_ok());
        assert!(validate_strides(&[]).is_err());
        assert!(validate_strides(&[0, 2]).is_err());
        assert!(validate_strides(&[2, 2]).is_err());
    }

    #[test]
    fn layer_rows_and_weights_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (t, d_model, d) = (13, 6, 4);
        let mut tape = Tape::new();
        let h = tape.constant(random(&[t, d_model], &mut rng));
        let heads: Vec<HeadVars> = (0..3)
            .map(|_| HeadVars {
                wq: tape.param(random(&[d_model, d], &mut rng)),
                wk: tape.param(random(&[d_model, d], &mut rng)),
                wv: tape.param(random(&[d_model, d], &mut rng)),
            })
            .collect();
        let layer = LayerVars {
            strides: vec![1, 2, 4],
            heads,
            w_logits: Some(tape.param(random(&[3], &mut rng))),
            wo: tape.param(random(&[d, d_model], &mut rng)),
            bo: tape.param(random(&[d_model], &mut rng)),
            ln_gain: tape.param(Tensor::full(&[d_model], 1.0)),
            ln_bias: tape.param(Tensor::zeros(&[d_model])),
        };
        let (out, trace) = layer_on_tape(&mut tape, h, &layer).unwrap();
        assert_eq!(tape.value(out).shape(), &[t, d_model]);
        for (a, r) in trace.attention.iter().zip([1, 2, 4]) {
            let a = tape.value(*a);
            assert_eq!(a.rows(), t.div_ceil(r));
            for i in 0..a.rows() {
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!((tape.value(trace.combine.unwrap()).sum() - 1.0).abs() < 1e-12);
        for i in 0..t {
            let row = tape.value(out).row(i);
            let mean = row.iter().sum::<f64>() / d_model as f64;
            assert!(mean.abs() < 1e-12);
        }
    }
}
