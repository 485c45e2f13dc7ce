//! MRTA layer cost with strides {1, 2, 4} relative to stride 1 alone.
//!
//! Reports PASS/FAIL per sequence length against the 1.4x bound; wall-clock
//! results are printed rather than asserted.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scatterfusion::bench::median;
use scatterfusion::diffcore::{Tape, Tensor};
use scatterfusion::mrta::{layer_on_tape, HeadVars, LayerVars};

const BOUND: f64 = 1.4;
const D_MODEL: usize = 64;
const D_ATTN: usize = 32;
const RUNS: usize = 15;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap()
}

fn layer_ms(h: &Tensor, strides: &[usize], rng: &mut ChaCha8Rng) -> f64 {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let heads = strides
        .iter()
        .map(|_| HeadVars {
            wq: tape.constant(random(&[D_MODEL, D_ATTN], rng)),
            wk: tape.constant(random(&[D_MODEL, D_ATTN], rng)),
            wv: tape.constant(random(&[D_MODEL, D_ATTN], rng)),
        })
        .collect();
    let layer = LayerVars {
        strides: strides.to_vec(),
        heads,
        w_logits: (strides.len() > 1).then(|| tape.constant(Tensor::zeros(&[strides.len()]))),
        wo: tape.constant(random(&[D_ATTN, D_MODEL], rng)),
        bo: tape.constant(Tensor::zeros(&[D_MODEL])),
        ln_gain: tape.constant(Tensor::full(&[D_MODEL], 1.0)),
        ln_bias: tape.constant(Tensor::zeros(&[D_MODEL])),
    };
    let start = Instant::now();
    layer_on_tape(&mut tape, hv, &layer).unwrap();
    start.elapsed().as_secs_f64() * 1e3
}

/// Medians of interleaved runs after one warm-up of each.
fn paired_ms(h: &Tensor, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (mut single, mut multi) = (Vec::with_capacity(RUNS), Vec::with_capacity(RUNS));
    for run in 0..=RUNS {
        let s = layer_ms(h, &[1], rng);
        let m = layer_ms(h, &[1, 2, 4], rng);
        if run > 0 {
            single.push(s);
            multi.push(m);
        }
    }
    (median(&mut single), median(&mut multi))
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failed = 0;
    for t in [256, 512, 1024] {
        let h = random(&[t, D_MODEL], &mut rng);
        let (single, multi) = paired_ms(&h, &mut rng);
        let ratio = multi / single;
        let pass = ratio <= BOUND;
        failed += usize::from(!pass);
        println!(
            "mrta timing T={t}: {} | strides {{1,2,4}} {multi:.2} ms, stride 1 {single:.2} ms, ratio {ratio:.2} (bound {BOUND})",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!("mrta timing: {}/3 lengths within bound", 3 - failed);
}
