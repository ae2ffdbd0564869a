//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The tape is rebuilt for every forward pass. Built-in ops carry analytic
//! backward rules; [`Tape::custom`] installs a user-supplied backward rule,
//! which is how the quantizers attach straight-through surrogates.

pub mod check;
mod kernels;
mod tape;
mod tensor;

pub use kernels::gemm;
pub use tape::{BackwardFn, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} cannot hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("non-finite value at {op}")]
    NonFinite { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("custom backward returned {got} gradients for {expected} inputs")]
    ArityMismatch { expected: usize, got: usize },
    #[error("backward already ran on this tape")]
    AlreadyBackpropagated,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

#[cfg(test)]
mod tests {
    use super::check::{central_difference, max_rel_err};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    /// Runs `build` on a fresh tape with `x` as the only differentiable leaf
    /// and compares the tape gradient to central differences.
    fn gradcheck(x: &Tensor, build: impl Fn(&mut Tape, Var) -> Var) -> f64 {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true).unwrap();
        let y = build(&mut tape, xv);
        tape.backward(y).unwrap();
        let analytic = tape.grad(xv).unwrap().clone();
        let numeric = central_difference(
            |p| {
                let mut tape = Tape::new();
                let xv = tape.leaf(p.clone(), false).unwrap();
                let y = build(&mut tape, xv);
                tape.value(y).item()
            },
            x,
            1e-6,
        );
        max_rel_err(&analytic, &numeric)
    }

    /// Fixed random readout so vector-valued ops reduce to a scalar.
    fn readout(tape: &mut Tape, y: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(&mut rng, tape.shape(y));
        let w = tape.constant(w).unwrap();
        let p = tape.mul(y, w).unwrap();
        tape.sum(p).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_backward_all_ones_upstream() {
        let b_data = [1.0, 2.0, 3.0, 4.0];
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), true).unwrap();
        let b = tape.leaf(t(&[2, 2], &b_data), true).unwrap();
        let y = tape.matmul(a, b).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        // ones(2x2) · bᵀ: row sums of b in every row.
        assert_eq!(tape.grad(a).unwrap().data(), &[3.0, 7.0, 3.0, 7.0]);
        // aᵀ · ones = column sums of a = [1, 1] broadcast.
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let mut naive = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                naive[i * 2 + j] = s;
            }
        }
        let mut tape = Tape::new();
        let av = tape.constant(a).unwrap();
        let bv = tape.constant(b).unwrap();
        let y = tape.matmul(av, bv).unwrap();
        assert_eq!(tape.value(y).data(), naive.as_slice());
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(
            tape.matmul(a, b),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matmul_gradients_broadcast_and_batched() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, &[2, 3, 4]);
        let w = random(&mut rng, &[4, 5]);
        let wb = random(&mut rng, &[2, 4, 5]);
        let e = gradcheck(&a, |tape, x| {
            let w = tape.constant(w.clone()).unwrap();
            let y = tape.matmul(x, w).unwrap();
            readout(tape, y, 1)
        });
        assert!(e < 1e-6, "broadcast lhs {e}");
        let e = gradcheck(&w, |tape, x| {
            let a = tape.constant(a.clone()).unwrap();
            let y = tape.matmul(a, x).unwrap();
            readout(tape, y, 2)
        });
        assert!(e < 1e-6, "broadcast rhs {e}");
        let e = gradcheck(&wb, |tape, x| {
            let a = tape.constant(a.clone()).unwrap();
            let y = tape.matmul(a, x).unwrap();
            readout(tape, y, 3)
        });
        assert!(e < 1e-6, "batched rhs {e}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4])).unwrap();
        let y = tape.softmax_lastdim(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
        let x = tape.constant(t(&[2], &[1000.0, 0.0])).unwrap();
        let y = tape.softmax_lastdim(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 1.0);
        assert!(tape.value(y).data()[1] < 1e-300);
    }

    #[test]
    fn softmax_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[3, 5]);
        let e = gradcheck(&x, |tape, x| {
            let y = tape.softmax_lastdim(x).unwrap();
            readout(tape, y, 4)
        });
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn gelu_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 10.0])).unwrap();
        let y = tape.gelu(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.0);
        assert!((tape.value(y).data()[1] - 10.0).abs() < 1e-12);
        let x = t(&[4], &[-2.0, -0.5, 0.3, 1.7]);
        let e = gradcheck(&x, |tape, x| {
            let y = tape.gelu(x).unwrap();
            tape.sum(y).unwrap()
        });
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn layernorm_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[3], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(&[3])).unwrap();
        let x = tape.constant(Tensor::full(&[1, 3], 2.5)).unwrap();
        let y = tape.layernorm(x, g, b, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 3]);

        let g = tape.constant(Tensor::full(&[2], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0])).unwrap();
        let y = tape.layernorm(x, g, b, 1e-300).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0]);
    }

    #[test]
    fn layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[2, 5]);
        let gamma = random(&mut rng, &[5]);
        let beta = random(&mut rng, &[5]);
        let e = gradcheck(&x, |tape, x| {
            let g = tape.constant(gamma.clone()).unwrap();
            let b = tape.constant(beta.clone()).unwrap();
            let y = tape.layernorm(x, g, b, 1e-5).unwrap();
            readout(tape, y, 6)
        });
        assert!(e < 1e-5, "x {e}");
        let e = gradcheck(&gamma, |tape, g| {
            let xv = tape.constant(x.clone()).unwrap();
            let b = tape.constant(beta.clone()).unwrap();
            let y = tape.layernorm(xv, g, b, 1e-5).unwrap();
            readout(tape, y, 6)
        });
        assert!(e < 1e-5, "gamma {e}");
    }

    #[test]
    fn shape_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, &[4, 6]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let heads = tape.split_heads(xv, 2).unwrap();
        assert_eq!(tape.shape(heads[0]), &[4, 3]);
        let merged = tape.merge_heads(&heads).unwrap();
        assert_eq!(tape.value(merged), &x);

        let a = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        let b = tape.constant(Tensor::zeros(&[3, 5])).unwrap();
        let c = tape.concat_lastdim(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[3, 7]);

        let tt = tape.transpose_last2(xv).unwrap();
        assert_eq!(tape.shape(tt), &[6, 4]);
        let back = tape.transpose_last2(tt).unwrap();
        assert_eq!(tape.value(back), &x);

        assert!(tape.split_heads(xv, 4).is_err());
        let bad = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        assert!(tape.concat(&[a, bad], 1).is_err());
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn shape_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&mut rng, &[2, 3, 4]);
        let e = gradcheck(&x, |tape, x| {
            let parts = tape.split_heads(x, 2).unwrap();
            let t0 = tape.transpose_last2(parts[0]).unwrap();
            let t0 = tape.transpose_last2(t0).unwrap();
            let m = tape.merge_heads(&[parts[1], t0]).unwrap();
            let e = tape.expand_leading(m, 2).unwrap();
            let r = tape.reshape(e, &[4, 12]).unwrap();
            let n = tape.narrow(r, 0, 1, 2).unwrap();
            readout(tape, n, 7)
        });
        assert!(e < 1e-6, "{e}");
        let bias = random(&mut rng, &[3, 4]);
        let e = gradcheck(&bias, |tape, b| {
            let xv = tape.constant(x.clone()).unwrap();
            let y = tape.add(xv, b).unwrap();
            let y = tape.mul_scalar(y, 0.5).unwrap();
            let y = tape.add_scalar(y, -0.1).unwrap();
            readout(tape, y, 8)
        });
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 10])).unwrap();
        let l = tape.cross_entropy(x, &[3, 7]).unwrap();
        assert!((tape.value(l).item() - 10f64.ln()).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for margin in [1.0, 10.0, 100.0] {
            let mut logits = vec![0.0; 10];
            logits[2] = margin;
            let x = tape.constant(t(&[1, 10], &logits)).unwrap();
            let lv = tape.cross_entropy(x, &[2]).unwrap();
            let l = tape.value(lv).item();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-40);
        assert!(matches!(
            tape.cross_entropy(x, &[10, 0]),
            Err(AutodiffError::LabelOutOfRange { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random(&mut rng, &[3, 4]);
        let e = gradcheck(&x, |tape, x| tape.cross_entropy(x, &[0, 3, 1]).unwrap());
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn custom_identity_is_noop() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true).unwrap();
        let y = tape
            .custom(&[x], |xs| Ok(xs[0].clone()), |_, _, g| vec![g.clone()])
            .unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 0.5]);
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn custom_round_straight_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.4, 1.6, -2.5]), true).unwrap();
        let y = tape
            .custom(
                &[x],
                |xs| Ok(xs[0].map(|v| v.round_ties_even())),
                |_, _, g| vec![g.clone()],
            )
            .unwrap();
        let w = tape.constant(t(&[3], &[2.0, 3.0, 4.0])).unwrap();
        let p = tape.mul(y, w).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0, -2.0]);
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn custom_chain_uses_surrogates() {
        // y = f(x) with surrogate dy/dx = 3, z = g(y) with surrogate dz/dy = -2y.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5), true).unwrap();
        let y = tape
            .custom(&[x], |xs| Ok(xs[0].map(f64::floor)), |_, _, g| vec![g.map(|v| 3.0 * v)])
            .unwrap();
        let z = tape
            .custom(
                &[y],
                |xs| Ok(xs[0].map(|v| v * v)),
                |ins, _, g| vec![Tensor::scalar(-2.0 * ins[0].item() * g.item())],
            )
            .unwrap();
        tape.backward(z).unwrap();
        // floor(1.5) = 1, dz/dx = 3 · (-2 · 1) = -6.
        assert_eq!(tape.grad(x).unwrap().item(), -6.0);
    }

    #[test]
    fn custom_arity_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0), true).unwrap();
        let y = tape
            .custom(&[x], |xs| Ok(xs[0].clone()), |_, _, _| Vec::new())
            .unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(AutodiffError::ArityMismatch { expected: 1, got: 0 })
        ));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 4.0);
        assert_eq!(tape.backward(y), Err(AutodiffError::AlreadyBackpropagated));
    }

    #[test]
    fn non_finite_detected_at_op_boundary() {
        let mut tape = Tape::new();
        assert!(tape.leaf(Tensor::scalar(f64::NAN), false).is_err());
        let x = tape.constant(Tensor::scalar(1e308)).unwrap();
        assert_eq!(
            tape.mul_scalar(x, 10.0),
            Err(AutodiffError::NonFinite { op: "mul_scalar" })
        );
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random(&mut rng, &[2, 3]);
        let loss_a = |tape: &mut Tape, v: Var| {
            let y = tape.gelu(v).unwrap();
            readout(tape, y, 30)
        };
        let loss_b = |tape: &mut Tape, v: Var| {
            let y = tape.softmax_lastdim(v).unwrap();
            readout(tape, y, 31)
        };
        let grad_of = |f: &dyn Fn(&mut Tape, Var) -> Var| {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone(), true).unwrap();
            let l = f(&mut tape, v);
            tape.backward(l).unwrap();
            tape.grad(v).unwrap().clone()
        };
        let ga = grad_of(&loss_a);
        let gb = grad_of(&loss_b);
        let gsum = grad_of(&|tape, v| {
            let a = loss_a(tape, v);
            let b = loss_b(tape, v);
            tape.add(a, b).unwrap()
        });
        for i in 0..x.len() {
            assert!((gsum.data()[i] - ga.data()[i] - gb.data()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x = random(&mut rng, &[4, 8]);
            let w = random(&mut rng, &[8, 8]);
            let mut tape = Tape::new();
            let xv = tape.leaf(x, true).unwrap();
            let wv = tape.leaf(w, true).unwrap();
            let y = tape.matmul(xv, wv).unwrap();
            let y = tape.gelu(y).unwrap();
            let y = tape.softmax_lastdim(y).unwrap();
            let l = tape.cross_entropy(y, &[0, 1, 2, 3]).unwrap();
            tape.backward(l).unwrap();
            (
                tape.value(l).item().to_bits(),
                tape.grad(wv).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
