//! Forward-pass wall time as a function of input length.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::WindowNorm;
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::forecaster::{Forecaster, ModelConfig};

/// Largest accepted `time(2L) / time(L)`.
pub const DOUBLING_BOUND: f64 = 2.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub length: usize,
    pub median_ms: f64,
    /// Ratio to the previous row when its length is exactly half.
    pub ratio: Option<f64>,
    pub pass: Option<bool>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median of `runs` timed forward passes per length after one warm-up pass.
/// Every setting of `base` except `input_len` is kept fixed. Parameters are
/// bound to a fresh tape outside the timed region.
pub fn bench_forward(base: &ModelConfig, lengths: &[usize], runs: usize) -> Result<Vec<BenchRow>> {
    if runs == 0 || lengths.is_empty() {
        return Err(Error::Config("bench needs at least one length and one run".into()));
    }
    let mut rows: Vec<BenchRow> = Vec::with_capacity(lengths.len());
    for &length in lengths {
        let config = ModelConfig {
            input_len: length,
            ..base.clone()
        };
        let model = Forecaster::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
        let x = Tensor::new(
            vec![length, base.channels],
            (0..length * base.channels).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        let forward = || -> Result<f64> {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false)?;
            let start = Instant::now();
            let norm = WindowNorm::fit(&x)?;
            let xv = tape.constant(norm.normalize(&x)?);
            let out = model.forward_normalized(&mut tape, &bound, xv)?;
            norm.denormalize(tape.value(out.output))?;
            Ok(start.elapsed().as_secs_f64() * 1e3)
        };
        forward()?;
        let mut times: Vec<f64> = (0..runs).map(|_| forward()).collect::<Result<_>>()?;
        let median_ms = median(&mut times);
        let ratio = rows
            .last()
            .filter(|prev| prev.length * 2 == length)
            .map(|prev| median_ms / prev.median_ms);
        rows.push(BenchRow {
            length,
            median_ms,
            ratio,
            pass: ratio.map(|r| r <= DOUBLING_BOUND),
        });
    }
    Ok(rows)
}
