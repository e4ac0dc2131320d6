//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! The tape is rebuilt for every forward pass. Only the primitives the
//! model needs are provided, and broadcasting is limited to adding a row
//! vector to each row of a matrix ([`Tape::add_row`]).

mod tape;
mod tensor;

pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;


use crate::error::{Error, Result};

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)` over all
/// coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Usage(format!("grad_check step must be positive, got {step}")));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if !value.is_scalar() {
            return Err(Error::Usage("grad_check function must return a scalar".into()));
        }
        let value = value.item();
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite { op: "grad_check" })
        }
    };

    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let out = f(&mut tape, leaf)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(out)?;
    let analytic = grads.wrt(&tape, leaf);

    let mut worst = 0.0_f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
        let data = (0..r * c).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::matrix(r, c, data).unwrap()
    }

    #[test]
    fn matmul_by_identity_is_noop() {
        let a = Tensor::matrix(2, 3, vec![1., -2., 3., 0.5, 4., -6.]).unwrap();
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let iv = tape.constant(Tensor::identity(3));
        let out = tape.matmul(av, iv).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 2));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn log_sum_exp_does_not_overflow() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![1000.0, 1000.0]));
        let y = tape.log_sum_exp(x, Axis::Cols).unwrap();
        let got = tape.value(y).item();
        assert!((got - (1000.0 + 2f64.ln())).abs() < 1e-12);

        // Shift-by-max identity at small magnitude, where the naive form is exact enough.
        let small = [0.3, -1.2, 2.5];
        let naive = small.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        let x = tape.constant(Tensor::row_vector(small.to_vec()));
        let y = tape.log_sum_exp(x, Axis::Cols).unwrap();
        assert!((tape.value(y).item() - naive).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_finite_at_huge_magnitudes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![1e6, -1e6, 1e6 - 1.0]));
        let y = tape.log_sum_exp(x, Axis::Cols).unwrap();
        let expect = 1e6 + (1.0 + (-1.0f64).exp()).ln();
        assert!((tape.value(y).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn dimension_errors_name_the_primitive() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
        let r = tape.constant(Tensor::zeros(1, 2));
        assert!(tape.add_row(a, r).is_err());
        // general broadcasting is not supported
        let col = tape.constant(Tensor::zeros(2, 1));
        assert!(tape.add(a, col).is_err());
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.square(x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row_vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(4.0));
        let g = tape.backward(c).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.wrt(&tape, x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row_vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // f(x) = sum(x * x) + sum(3x): single-consumer gradients are 2x and 3.
        let x0 = Tensor::row_vector(vec![0.5, -1.5]);
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let sq = tape.mul(x, x).unwrap();
        let a = tape.sum(sq).unwrap();
        let tx = tape.scale(x, 3.0).unwrap();
        let b = tape.sum(tx).unwrap();
        let f = tape.add(a, b).unwrap();
        let g = tape.backward(f).unwrap();
        let expect: Vec<f64> = x0.data().iter().map(|v| 2.0 * v + 3.0).collect();
        assert_eq!(g.get(x).unwrap().data(), expect.as_slice());
    }

    #[test]
    fn grad_check_of_linear_sum_is_exact() {
        let x = Tensor::matrix(2, 2, vec![1.0, -3.0, 0.25, 7.0]).unwrap();
        let err = grad_check(|t, v| t.sum(v), &x, 1e-3).unwrap();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn grad_check_sigmoid_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 3, 4, -2.0, 2.0);
        let err = grad_check(
            |t, v| {
                let s = t.sigmoid(v)?;
                t.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_step_and_non_finite() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, v| t.sum(v), &x, 0.0).is_err());
        let err = grad_check(|t, v| t.scale(v, f64::INFINITY), &x, 1e-3);
        assert!(err.is_err());
    }

    #[test]
    fn three_layer_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sizes = [5, 4, 3, 2];
        let x = random_matrix(&mut rng, 6, 5, -1.0, 1.0);
        let weights: Vec<Tensor> = sizes
            .windows(2)
            .map(|w| random_matrix(&mut rng, w[0], w[1], -0.8, 0.8))
            .collect();
        let biases: Vec<Tensor> = sizes[1..]
            .iter()
            .map(|&n| random_matrix(&mut rng, 1, n, -0.3, 0.3))
            .collect();

        // Check every parameter tensor in turn, holding the others fixed.
        for target in 0..6 {
            let probe = if target < 3 {
                weights[target].clone()
            } else {
                biases[target - 3].clone()
            };
            let err = grad_check(
                |t, p| {
                    let mut h = t.constant(x.clone());
                    for layer in 0..3 {
                        let w = if layer == target { p } else { t.constant(weights[layer].clone()) };
                        let b = if layer + 3 == target { p } else { t.constant(biases[layer].clone()) };
                        let z = t.matmul(h, w)?;
                        let z = t.add_row(z, b)?;
                        h = if layer < 2 { t.tanh(z)? } else { t.sigmoid(z)? };
                    }
                    let sq = t.square(h)?;
                    t.mean(sq)
                },
                &probe,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "parameter {target}: {err}");
        }
    }

    /// One trial per primitive: backward against central differences.
    fn check_all_primitives(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, 3, 4, -2.0, 2.0);
        let b = random_matrix(&mut rng, 3, 4, -2.0, 2.0);
        let m = random_matrix(&mut rng, 4, 2, -2.0, 2.0);
        let row = random_matrix(&mut rng, 1, 4, -2.0, 2.0);
        let pos = random_matrix(&mut rng, 3, 4, 0.5, 3.0);
        // keep clamp inputs away from the kinks
        let clamp_in = a.map(|v| if (v.abs() - 1.0).abs() < 0.05 { v * 1.2 } else { v });
        let relu_in = a.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        type Case<'a> = (&'static str, Tensor, Box<dyn Fn(&mut Tape, Var) -> Result<Var> + 'a>);
        let weight = random_matrix(&mut rng, 3, 4, -1.0, 1.0);
        let cases: Vec<Case> = vec![
            ("matmul lhs", a.clone(), Box::new(|t, v| { let c = t.constant(m.clone()); t.matmul(v, c) })),
            ("matmul rhs", m.clone(), Box::new(|t, v| { let c = t.constant(a.clone()); t.matmul(c, v) })),
            ("add_row row", row.clone(), Box::new(|t, v| { let c = t.constant(a.clone()); t.add_row(c, v) })),
            ("add_row x", a.clone(), Box::new(|t, v| { let c = t.constant(row.clone()); t.add_row(v, c) })),
            ("add", a.clone(), Box::new(|t, v| { let c = t.constant(b.clone()); t.add(v, c) })),
            ("sub", a.clone(), Box::new(|t, v| { let c = t.constant(b.clone()); t.sub(c, v) })),
            ("mul", a.clone(), Box::new(|t, v| { let c = t.constant(b.clone()); t.mul(v, c) })),
            ("scale", a.clone(), Box::new(|t, v| t.scale(v, -1.7))),
            ("add_scalar", a.clone(), Box::new(|t, v| t.add_scalar(v, 0.3))),
            ("neg", a.clone(), Box::new(|t, v| t.neg(v))),
            ("sigmoid", a.clone(), Box::new(|t, v| t.sigmoid(v))),
            ("relu", relu_in, Box::new(|t, v| t.relu(v))),
            ("tanh", a.clone(), Box::new(|t, v| t.tanh(v))),
            ("exp", a.clone(), Box::new(|t, v| t.exp(v))),
            ("log", pos, Box::new(|t, v| t.log(v))),
            ("square", a.clone(), Box::new(|t, v| t.square(v))),
            ("clamp", clamp_in, Box::new(|t, v| t.clamp(v, -1.0, 1.0))),
            ("sum", a.clone(), Box::new(|t, v| t.sum(v))),
            ("mean", a.clone(), Box::new(|t, v| t.mean(v))),
            ("sum_axis rows", a.clone(), Box::new(|t, v| t.sum_axis(v, Axis::Rows))),
            ("sum_axis cols", a.clone(), Box::new(|t, v| t.sum_axis(v, Axis::Cols))),
            ("lse rows", a.clone(), Box::new(|t, v| t.log_sum_exp(v, Axis::Rows))),
            ("lse cols", a.clone(), Box::new(|t, v| t.log_sum_exp(v, Axis::Cols))),
            ("log_softmax", a.clone(), Box::new(|t, v| t.log_softmax(v))),
            ("transpose", a.clone(), Box::new(|t, v| t.transpose(v))),
            ("row", a.clone(), Box::new(|t, v| t.row(v, 1))),
        ];
        for (name, input, op) in cases {
            // Project the output onto a random direction to get a scalar.
            let err = grad_check(
                |t, v| {
                    let y = op(t, v)?;
                    let (r, c) = (t.value(y).rows(), t.value(y).cols());
                    let mut wdata = weight.data().to_vec();
                    wdata.resize(r * c, 0.37);
                    let w = t.constant(Tensor::matrix(r, c, wdata[..r * c].to_vec())?);
                    let p = t.mul(y, w)?;
                    t.sum(p)
                },
                &input,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{name}: relative error {err}");
        }
    }

    #[test]
    fn primitives_match_finite_differences_over_100_trials() {
        for seed in 0..100 {
            check_all_primitives(seed);
        }
    }

    proptest! {
        #[test]
        fn log_sum_exp_matches_shift_formula(v in proptest::collection::vec(-1e6f64..1e6, 1..8)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::row_vector(v.clone()));
            let y = tape.log_sum_exp(x, Axis::Cols).unwrap();
            let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let expect = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            prop_assert_eq!(tape.value(y).item(), expect);
        }

        #[test]
        fn tape_order_is_topological(n in 1usize..20) {
            let mut tape = Tape::new();
            let mut v = tape.param(Tensor::scalar(0.5));
            for _ in 0..n {
                let prev = v;
                v = tape.tanh(prev).unwrap();
                prop_assert!(prev.index() < v.index());
            }
            prop_assert_eq!(tape.len(), n + 1);
        }
    }
}
