//! Minimal reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records primitives as they are evaluated and replays them in
//! reverse to produce leaf gradients. The primitive set is exactly what a
//! stacked LSTM with softmax heads needs: matmul, add (plus row-broadcast
//! bias), elementwise multiply, sigmoid, tanh, concat, slice, row gather,
//! inverted dropout, softmax cross-entropy and weighted reductions.
//!
//! Every op checks its output for NaN/Inf and fails instead of propagating
//! non-finite values.

mod real;
mod tape;
mod tensor;

pub use real::Real;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("node {0} was never recorded on this tape")]
    NotRecorded(usize),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("index {index} out of range for size {bound}")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Global L2 norm across all tensors.
pub fn global_norm<'a, F: Real>(grads: impl IntoIterator<Item = &'a Tensor<F>>) -> f64 {
    grads.into_iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Rescales every gradient by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the norm measured before clipping.
pub fn clip_global_norm<'a, F: Real>(grads: impl IntoIterator<Item = &'a mut Tensor<F>>, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let mut grads: Vec<&mut Tensor<F>> = grads.into_iter().collect();
    let norm = global_norm(grads.iter().map(|g| &**g));
    if norm > max_norm {
        let s = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    /// Central-difference check of d(loss)/d(input) for a graph builder that
    /// takes its inputs as leaves and returns a scalar node.
    fn check_grad(inputs: Vec<Tensor<f64>>, build: &dyn Fn(&mut Tape<f64>, &[NodeId]) -> NodeId) -> f64 {
        let eval = |vals: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let ids: Vec<_> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
            let out = build(&mut tape, &ids);
            tape.value(out).data()[0]
        };
        let mut tape = Tape::new();
        let ids: Vec<_> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(&mut tape, &ids);
        let grads = tape.backward(out).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (k, id) in ids.iter().enumerate() {
            let zeros = Tensor::zeros(inputs[k].shape());
            let analytic = grads.get(*id).unwrap_or(&zeros);
            for i in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - fd).abs() / fd.abs().max(a.abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn uniform_logits_cost_ln_v() {
        for v in [2usize, 7, 64] {
            let mut tape = Tape::new();
            let z = tape.leaf(Tensor::filled(&[3, v], 0.3));
            let l = tape.softmax_xent(z, &[0, v - 1, v / 2]).unwrap();
            for &x in tape.value(l).data() {
                assert!((x - (v as f64).ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn xent_gradient_is_softmax_minus_onehot() {
        let logits = [0.2, -1.0, 2.5, 0.0];
        let target = 2;
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[1, 4], &logits));
        let l = tape.softmax_xent(z, &[target]).unwrap();
        let s = tape.mean(l).unwrap();
        let g = tape.backward(s).unwrap();
        let denom: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        for (i, &zv) in logits.iter().enumerate() {
            let expected = zv.exp() / denom - if i == target { 1.0 } else { 0.0 };
            assert!((g.get(z).unwrap().data()[i] - expected).abs() < 1e-12);
        }
        let worst = check_grad(vec![t(&[1, 4], &logits)], &|tp, ids| {
            let l = tp.softmax_xent(ids[0], &[target]).unwrap();
            tp.mean(l).unwrap()
        });
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let logits = random(&[4, 9], &mut rng).map(|x| x * 30.0);
            // Recover probabilities from the gradient: d/dz mean NLL = (p - onehot)/N.
            let mut tape = Tape::new();
            let z = tape.leaf(logits);
            let l = tape.softmax_xent(z, &[0, 1, 2, 3]).unwrap();
            let s = tape.weighted_sum(l, &[1.0; 4]).unwrap();
            let g = tape.backward(s).unwrap();
            for (r, row) in g.get(z).unwrap().data().chunks(9).enumerate() {
                let sum: f64 = row.iter().sum::<f64>() + 1.0;
                assert!((sum - 1.0).abs() < 1e-12, "row {r}: {sum}");
            }
        }
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for trial in 0..100 {
            let m = rng.gen_range(1..4);
            let k = rng.gen_range(1..4);
            let n = rng.gen_range(2..5);
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, n], &mut rng);
            let c = random(&[m, n], &mut rng);
            let bias = random(&[n], &mut rng);
            let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
            let weights: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let drop_seed = trial as u64;
            let w2 = weights.clone();
            let worst_trial = check_grad(vec![a, b, c, bias], &move |tp, ids| {
                let ab = tp.matmul(ids[0], ids[1]).unwrap();
                let s = tp.add(ab, ids[2]).unwrap();
                let s = tp.add_bias(s, ids[3]).unwrap();
                let sg = tp.sigmoid(s).unwrap();
                let th = tp.tanh(ids[2]).unwrap();
                let pr = tp.mul(sg, th).unwrap();
                let cat = tp.concat(&[pr, s], 1).unwrap();
                let rows = tp.concat(&[cat, cat], 0).unwrap();
                let left = tp.slice(rows, 1, 0, n).unwrap();
                let top = tp.slice(left, 0, 0, m).unwrap();
                let mut r = ChaCha8Rng::seed_from_u64(drop_seed);
                let dr = tp.dropout(top, 0.3, &mut r).unwrap();
                let sc = tp.scale(dr, 1.7).unwrap();
                let xe = tp.softmax_xent(sc, &targets).unwrap();
                let l1 = tp.mean(xe).unwrap();
                let l2 = tp.weighted_sum(sc, &w2).unwrap();
                let g = tp.gather(ids[2], &[0, m - 1, 0]).unwrap();
                let gl = tp.weighted_sum(g, &vec![0.5; 3 * n]).unwrap();
                let l = tp.add(l1, l2).unwrap();
                tp.add(l, gl).unwrap()
            });
            worst = worst.max(worst_trial);
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn independent_branch_order_does_not_change_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3, 4], &mut rng);
        let w1 = random(&[4, 2], &mut rng);
        let w2 = random(&[4, 2], &mut rng);
        let run = |first_branch: usize| {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let ws = [tape.leaf(w1.clone()), tape.leaf(w2.clone())];
            let order = if first_branch == 0 { [0, 1] } else { [1, 0] };
            let mut outs = [None, None];
            for &b in &order {
                let h = tape.matmul(xi, ws[b]).unwrap();
                let h = tape.tanh(h).unwrap();
                outs[b] = Some(tape.mean(h).unwrap());
            }
            let l = tape.add(outs[0].unwrap(), outs[1].unwrap()).unwrap();
            let g = tape.backward(l).unwrap();
            g.get(xi).unwrap().clone()
        };
        let (a, b) = (run(0), run(1));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn dropout_rate_zero_is_identity_and_seeded_dropout_is_deterministic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[4, 8], 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(tape.dropout(x, 0.0, &mut rng).unwrap(), x);
        let d1 = tape.dropout(x, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let d2 = tape.dropout(x, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(tape.value(d1), tape.value(d2));
        assert!(tape.value(d1).data().iter().all(|&v| v == 0.0 || v == 2.0));
        let s = tape.weighted_sum(d1, &[1.0; 32]).unwrap();
        let g = tape.backward(s).unwrap();
        for (gv, ov) in g.get(x).unwrap().data().iter().zip(tape.value(d1).data()) {
            assert_eq!(gv, ov, "gradient flows through kept units scaled by 1/(1-rate)");
        }
    }

    #[test]
    fn errors_for_bad_shapes_and_non_finite_values() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(DiffError::Shape(msg)) => assert!(msg.contains("[2, 3]")),
            other => panic!("{other:?}"),
        }
        let big = tape.leaf(t(&[1], &[1e308]));
        let s = tape.scale(big, 10.0);
        assert_eq!(s, Err(DiffError::NonFinite("scale")));
        let nonscalar = tape.add(a, b).unwrap();
        assert!(matches!(tape.backward(nonscalar), Err(DiffError::NotScalar(_))));
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut recorded: Tape<f64> = Tape::new();
        let x = recorded.leaf(Tensor::scalar(1.0));
        let empty: Tape<f64> = Tape::new();
        assert_eq!(empty.backward(x).unwrap_err(), DiffError::NotRecorded(0));
    }

    #[test]
    fn clip_scales_only_above_threshold() {
        let mut g = vec![t(&[2], &[6.0, 0.0]), t(&[1], &[8.0])];
        let norm = clip_global_norm(g.iter_mut(), 5.0);
        assert!((norm - 10.0).abs() < 1e-12);
        assert_eq!(g[0].data(), &[3.0, 0.0]);
        assert_eq!(g[1].data(), &[4.0]);

        let mut small = vec![t(&[2], &[3.0, 0.0])];
        clip_global_norm(small.iter_mut(), 5.0);
        assert_eq!(small[0].data(), &[3.0, 0.0]);

        let mut zeros = vec![t(&[3], &[0.0; 3])];
        assert_eq!(clip_global_norm(zeros.iter_mut(), 5.0), 0.0);
        assert_eq!(zeros[0].data(), &[0.0; 3]);
    }
}
