//! Reference forecasters: persistence and a per-channel linear
//! autoregression fitted by least squares.

use nalgebra::DMatrix;

use crate::dataio::{Dataset, TimeSeriesWindow};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Repeats the last input row for every horizon step.
pub fn persistence(x: &Tensor, horizon: usize) -> Tensor {
    let last = x.row(x.rows() - 1).to_vec();
    let c = last.len();
    Tensor::new(vec![horizon, c], last.repeat(horizon)).expect("shape matches data")
}

/// `y[t + k] = b_k + sum_i w_{k,i} x[i]` per channel, fitted on raw values.
#[derive(Clone, Debug)]
pub struct LinearBaseline {
    input_len: usize,
    horizon: usize,
    /// Per channel, `[(T_s + 1) x T_p]` with the intercept in the last row.
    coef: Vec<DMatrix<f64>>,
}

impl LinearBaseline {
    pub fn fit(data: &Dataset, windows: &[TimeSeriesWindow]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Data("linear baseline needs at least one window".into()))?;
        let (ts, tp) = (first.input_len, first.horizon);
        let n = windows.len();
        let mut coef = Vec::with_capacity(data.channels());
        for c in 0..data.channels() {
            let design = DMatrix::from_fn(n, ts + 1, |r, i| {
                if i == ts {
                    1.0
                } else {
                    data.values.at(windows[r].start + i, c)
                }
            });
            let target = DMatrix::from_fn(n, tp, |r, k| data.values.at(windows[r].start + ts + k, c));
            let w = design
                .svd(true, true)
                .solve(&target, 1e-12)
                .map_err(|e| Error::Numeric(format!("least squares failed: {e}")))?;
            coef.push(w);
        }
        Ok(Self {
            input_len: ts,
            horizon: tp,
            coef,
        })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let expect = [self.input_len, self.coef.len()];
        if x.shape() != expect {
            return Err(Error::dim("linear baseline", x.shape(), &expect));
        }
        let c = self.coef.len();
        let mut out = Tensor::zeros(&[self.horizon, c]);
        for (ch, w) in self.coef.iter().enumerate() {
            for k in 0..self.horizon {
                let mut y = w[(self.input_len, k)];
                for i in 0..self.input_len {
                    y += w[(i, k)] * x.at(i, ch);
                }
                out.set(k, ch, y);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::windows;

    #[test]
    fn persistence_repeats_last_row() {
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = persistence(&x, 2);
        assert_eq!(y.data(), &[5.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn linear_baseline_recovers_exact_recurrence() {
        // x[t] = 2 x[t-1] - x[t-2] + 0 holds for any affine sequence.
        let n = 60;
        let v: Vec<f64> = (0..n).map(|t| 3.0 - 0.5 * t as f64).collect();
        let data = Dataset::new(Tensor::from_columns(&[v]).unwrap(), vec!["a".into()]).unwrap();
        let wins = windows(0..40, 4, 3, 1);
        let model = LinearBaseline::fit(&data, &wins).unwrap();
        for w in windows(40..n, 4, 3, 1) {
            let err = model.predict(&w.input(&data)).unwrap().max_abs_diff(&w.target(&data));
            assert!(err < 1e-9, "{err}");
        }
    }
}
