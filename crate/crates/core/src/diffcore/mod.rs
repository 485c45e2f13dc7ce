//! Dense tensors, a reverse-mode tape, and a finite-difference oracle.

pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, numeric_gradient, relative_error, GradCheckReport};
pub use kernels::Padding;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ComplexTensor, Tensor};

use crate::error::Result;

/// Softmax along the last axis without recording a tape.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = tape.softmax(v)?;
    Ok(tape.value(out).clone())
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(kernels::sigmoid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks `build` (a scalar-valued tape program over one parameter
    /// tensor) against central differences.
    fn check<F>(x: &Tensor, build: F) -> f64
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let p = tape.param(x.clone());
        let loss = build(&mut tape, p);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.wrt(p).into_data();
        let shape = x.shape().to_vec();
        let f = |v: &[f64]| {
            let mut tape = Tape::new();
            let p = tape.param(Tensor::new(shape.clone(), v.to_vec()).unwrap());
            let loss = build(&mut tape, p);
            tape.value(loss).item()
        };
        finite_diff_check(f, x.data(), &analytic, 1e-5).unwrap().max_rel_error
    }

    /// Random weights turn any tensor into a scalar with a generic gradient.
    fn project(tape: &mut Tape, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(&mut rng, tape.value(v).shape());
        let w = tape.constant(w);
        let prod = tape.mul(v, w).unwrap();
        tape.sum(prod)
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let bc = b.clone();
        let err_a = check(&a, |t, p| {
            let b = t.constant(bc.clone());
            let m = t.matmul(p, b).unwrap();
            project(t, m, 9)
        });
        let ac = a.clone();
        let err_b = check(&b, |t, p| {
            let a = t.constant(ac.clone());
            let m = t.matmul(a, p).unwrap();
            project(t, m, 9)
        });
        assert!(err_a < 1e-6 && err_b < 1e-6, "{err_a} {err_b}");
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::vector(vec![0.0, 0.0, 0.0])).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0])).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1].abs() < 1e-12);

        let x = [1.0f64, 2.0, 3.0];
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        let s = softmax(&Tensor::vector(x.to_vec())).unwrap();
        for (a, v) in s.data().iter().zip(x) {
            assert!((a - v.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(matches!(
            softmax(&Tensor::vector(vec![f64::NAN, 1.0])),
            Err(crate::Error::Numeric(_))
        ));
    }

    #[test]
    fn softmax_sums_to_one_for_large_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let x = Tensor::vector((0..7).map(|_| rng.gen_range(-1e3..1e3)).collect());
            let s = softmax(&x).unwrap();
            assert!((s.sum() - 1.0).abs() < 1e-12);
            assert!(s.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(kernels::sigmoid(0.0), 0.5);
        let tiny = kernels::sigmoid(-800.0);
        assert!((0.0..1e-12).contains(&tiny));
        let err = check(&Tensor::scalar(0.0), |t, p| {
            let s = t.sigmoid(p);
            t.sum(s)
        });
        assert!(err < 1e-6);
        let mut tape = Tape::new();
        let p = tape.param(Tensor::scalar(0.0));
        let s = tape.sigmoid(p);
        let g = tape.backward(s).unwrap();
        assert!((g.wrt(p).item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn modulus_examples_and_gradient() {
        let mut tape = Tape::new();
        let re = tape.param(Tensor::vector(vec![3.0, 0.0]));
        let im = tape.param(Tensor::vector(vec![4.0, 0.0]));
        let m = tape.modulus(re, im).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0, 0.0]);
        let loss = tape.sum(m);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(re).data()[1], 0.0);
        assert_eq!(g.wrt(im).data()[1], 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random(&mut rng, &[2, 6]);
        let err = check(&z, |t, p| {
            let re = t.select_row(p, 0);
            let im = t.select_row(p, 1);
            let m = t.modulus(re, im).unwrap();
            project(t, m, 3)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn backward_product_and_square_rules() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.param(Tensor::scalar(3.0));
        let l = tape.mul(x, y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!((g.wrt(x).item(), g.wrt(y).item()), (3.0, 2.0));

        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.square(x);
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss_and_zero_fills_untouched() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(crate::Error::Contract(_))));

        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.param(Tensor::vector(vec![5.0, 6.0, 7.0]));
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = random(&mut rng, &[4, 3]);
        let run = |which: u8| {
            let mut tape = Tape::new();
            let x = tape.param(x0.clone());
            let s = tape.softmax(x).unwrap();
            let l1 = project(&mut tape, s, 1);
            let sq = tape.square(x);
            let l2 = project(&mut tape, sq, 2);
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            tape.backward(loss).unwrap().wrt(x)
        };
        let (g1, g2, g12) = (run(1), run(2), run(3));
        for i in 0..12 {
            assert!((g12.data()[i] - g1.data()[i] - g2.data()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_cross_entropy_oracle_self_test() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits = random(&mut rng, &[3, 5]);
        let onehot = {
            let mut t = Tensor::zeros(&[3, 5]);
            t.set(0, 1, 1.0);
            t.set(1, 4, 1.0);
            t.set(2, 0, 1.0);
            t
        };
        let err = check(&logits, |t, p| {
            let s = t.softmax(p).unwrap();
            let logp = t.ln(s).unwrap();
            let target = t.constant(onehot.clone());
            let picked = t.mul(logp, target).unwrap();
            let total = t.sum(picked);
            t.scale(total, -1.0)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random(&mut rng, &[6, 4]);
        let bias = random(&mut rng, &[4]);
        let programs: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Var>)> = vec![
            (
                "transpose",
                Box::new(|t, p| {
                    let v = t.transpose(p).unwrap();
                    project(t, v, 1)
                }),
            ),
            (
                "scale",
                Box::new(|t, p| {
                    let v = t.scale(p, -2.5);
                    project(t, v, 1)
                }),
            ),
            (
                "sigmoid",
                Box::new(|t, p| {
                    let v = t.sigmoid(p);
                    project(t, v, 1)
                }),
            ),
            (
                "softmax",
                Box::new(|t, p| {
                    let v = t.softmax(p).unwrap();
                    project(t, v, 1)
                }),
            ),
            (
                "mean_rows",
                Box::new(|t, p| {
                    let v = t.mean_rows(p).unwrap();
                    project(t, v, 1)
                }),
            ),
            (
                "pool3",
                Box::new(|t, p| {
                    let v = t.pool(p, 4).unwrap();
                    project(t, v, 1)
                }),
            ),
            (
                "upsample",
                Box::new(|t, p| {
                    let v = t.pool(p, 2).unwrap();
                    let u = t.upsample(v, 6, 2).unwrap();
                    project(t, u, 1)
                }),
            ),
            (
                "layer_norm",
                Box::new(|t, p| {
                    let v = t.layer_norm(p, 1e-5);
                    project(t, v, 1)
                }),
            ),
            (
                "reshape",
                Box::new(|t, p| {
                    let v = t.reshape(p, &[2, 12]).unwrap();
                    project(t, v, 1)
                }),
            ),
            (
                "column",
                Box::new(|t, p| {
                    let v = t.column(p, 2).unwrap();
                    project(t, v, 1)
                }),
            ),
            (
                "select",
                Box::new(|t, p| {
                    let v = t.select(p, 5).unwrap();
                    let w = t.square(v);
                    t.sum(w)
                }),
            ),
            (
                "center",
                Box::new(|t, p| {
                    let v = t.center(p);
                    project(t, v, 1)
                }),
            ),
            (
                "square",
                Box::new(|t, p| {
                    let v = t.square(p);
                    project(t, v, 1)
                }),
            ),
            (
                "mean",
                Box::new(|t, p| {
                    let v = t.square(p);
                    t.mean(v)
                }),
            ),
            (
                "periodic_mean",
                Box::new(|t, p| {
                    let v = t.periodic_mean(p, 4, 1).unwrap();
                    project(t, v, 1)
                }),
            ),
            (
                "add_row",
                Box::new(move |t, p| {
                    let b = t.param(bias.clone());
                    let v = t.add_row(p, b).unwrap();
                    let s = t.square(v);
                    project(t, s, 1)
                }),
            ),
            (
                "mul_row",
                Box::new(|t, p| {
                    let r = t.mean_rows(p).unwrap();
                    let v = t.mul_row(p, r).unwrap();
                    project(t, v, 1)
                }),
            ),
            (
                "mul_scalar",
                Box::new(|t, p| {
                    let s = t.select(p, 3).unwrap();
                    let v = t.mul_scalar(p, s).unwrap();
                    project(t, v, 1)
                }),
            ),
            (
                "stack_concat",
                Box::new(|t, p| {
                    let c0 = t.column(p, 0).unwrap();
                    let c1 = t.column(p, 3).unwrap();
                    let rows = t.stack_rows(&[c0, c1]).unwrap();
                    let cols = t.concat_cols(&[p, c1]).unwrap();
                    let l1 = project(t, rows, 1);
                    let l2 = project(t, cols, 2);
                    t.add(l1, l2).unwrap()
                }),
            ),
            (
                "conv",
                Box::new(|t, p| {
                    let x = t.reshape(p, &[24]).unwrap();
                    let h = t.select_row(p, 1);
                    let y = t.conv(x, h, Padding::Reflect).unwrap();
                    let z = t.conv(y, h, Padding::Zero).unwrap();
                    project(t, z, 1)
                }),
            ),
            (
                "subsample",
                Box::new(|t, p| {
                    let x = t.reshape(p, &[24]).unwrap();
                    let v = t.subsample(x, 5).unwrap();
                    let s = t.square(v);
                    project(t, s, 1)
                }),
            ),
        ];
        for (name, prog) in programs {
            let err = check(&a, |t, p| prog(t, p));
            assert!(err < 1e-6, "{name}: relative error {err}");
        }
    }
}
