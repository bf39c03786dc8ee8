//! Reverse-mode gradients against central finite differences, and the exact
//! behaviour of gradient reversal.

mod common;

use common::{classifier_fd_error, fd_batch, op_fd_errors, small_model, tape_fd, term_fd_error, FD_FIXTURES, FD_STEP, TERMS};
use leci_core::model::{Lambdas, Objective, StepRngs};
use leci_core::nn::{Fwd, Group};
use leci_core::rng::Rng;
use leci_core::tensor::Tensor;

const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_finite_differences() {
    for (name, err) in op_fd_errors() {
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn every_loss_term_matches_finite_differences() {
    for vn in [false, true] {
        for term in TERMS {
            for (seed, graphs) in FD_FIXTURES {
                let err = term_fd_error(FD_STEP, term, 0.5, seed, graphs, vn);
                assert!(err < TOL, "{term} (virtual node {vn}, seed {seed}): relative error {err:e}");
            }
        }
    }
}

#[test]
fn loss_terms_on_larger_batches_match_with_a_small_step() {
    // Larger batches put some ReLU pre-activation within reach of a 1e-4
    // step; a tiny step keeps the difference quotient on one linear piece.
    for vn in [false, true] {
        for term in TERMS {
            for seed in 0..3 {
                let err = term_fd_error(1e-7, term, 0.5, seed, 6, vn);
                assert!(err < TOL, "{term} (virtual node {vn}, seed {seed}): relative error {err:e}");
            }
        }
    }
}

#[test]
fn classifier_loss_matches_finite_differences() {
    for epsilon in [0.0, 0.3] {
        let err = classifier_fd_error(FD_STEP, 1, epsilon);
        assert!(err < TOL, "epsilon {epsilon}: relative error {err:e}");
    }
}

#[test]
fn reversal_is_identity_forward_and_negated_backward() {
    let x = Tensor::vector(vec![0.3, -1.2, 2.5]);
    for lambda in [0.0, 0.25, 1.0, 3.0] {
        let mut t = leci_core::tape::Tape::new();
        let v = t.leaf(x.clone());
        let r = t.grad_reverse(v, lambda).unwrap();
        assert_eq!(t.value(r), &x);
        let sq = t.mul(r, r).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        let g = t.grad(v).unwrap();
        for (gi, xi) in g.iter().zip(x.data()) {
            assert_eq!(*gi, -lambda * 2.0 * xi);
        }
    }
}

#[test]
fn reversed_term_gradients_scale_exactly_with_lambda() {
    let model = small_model(5, true);
    let batch = fd_batch(5, 6);
    let grads = |lambda: f64| {
        let lambdas = Lambdas {
            env: lambda,
            label: lambda,
            pfsc: lambda,
        };
        let mut f = Fwd::new(&model.store, true);
        let mut rngs = StepRngs::new(&Rng::new(2));
        let t = model.forward_train(&mut f, &batch, lambdas, Objective::default(), &mut rngs).unwrap();
        let loss = t.env.unwrap();
        let value = f.tape.scalar(loss);
        f.tape.backward(loss).unwrap();
        (value, f.grads())
    };
    let (v1, g1) = grads(1.0);
    let (vh, gh) = grads(0.5);
    assert_eq!(v1, vh);
    for id in model.store.ids() {
        let p = model.store.get(id);
        for (a, b) in g1.get(id).iter().zip(gh.get(id)) {
            match p.group {
                Group::Selector | Group::PfscTransform => assert_eq!(*b, 0.5 * a, "{}", p.name),
                _ => assert_eq!(a, b, "{}", p.name),
            }
        }
    }
}

#[test]
fn finite_difference_harness_catches_a_wrong_gradient() {
    // The harness itself must flag a mismatch: compare x^2 against the
    // gradient of 2x^2 by projecting through a doubled leaf.
    let x = Tensor::vector(vec![0.7, -0.4]);
    let err = tape_fd(FD_STEP, &[x], |t, v| {
        let d = t.detach(v[0]);
        let sq = t.mul(v[0], d).unwrap();
        Ok(t.sum(sq))
    });
    assert!(err > 0.1, "detached factor should break agreement, got {err:e}");
}
