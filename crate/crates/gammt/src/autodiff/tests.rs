use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const FD_H: f64 = 1e-6;

/// Central finite differences are accurate to ~1e-10 absolute here; the
/// absolute escape keeps noise on near-zero gradients from being scored as
/// relative error.
fn assert_grad_close(analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        if diff <= atol {
            continue;
        }
        let rel = diff / a.abs().max(n.abs());
        assert!(
            rel < rtol,
            "{what}[{i}]: analytic={a} numeric={n} rel={rel}"
        );
    }
}

/// Builds a scalar from a rank-2 node as a fixed weighted sum of its
/// entries, using only index/scale/add so the reduction itself is on tape.
fn weighted_scalar(tape: &mut Tape, node: NodeId, weights: &[f64]) -> NodeId {
    let (r, c) = (tape.value(node).rows(), tape.value(node).cols());
    assert_eq!(weights.len(), r * c);
    let mut acc = None;
    for i in 0..r {
        for j in 0..c {
            let e = tape.index(node, i, j).unwrap();
            let s = tape.scale(e, weights[i * c + j]).unwrap();
            acc = Some(match acc {
                None => s,
                Some(a) => tape.add(a, s).unwrap(),
            });
        }
    }
    acc.unwrap()
}

/// Finite-difference check of `build` (params in, scalar loss out) against
/// the tape's analytic gradients.
fn fd_check(
    params: &[Tensor],
    build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
    rtol: f64,
    what: &str,
) {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).unwrap();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|p| t.leaf(p.clone())).collect();
        let l = build(&mut t, &ids);
        t.value(l).data()[0]
    };

    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[pi]);
        let mut numeric = vec![0.0; param.numel()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[e] += FD_H;
            let fp = eval(&plus);
            let mut minus = params.to_vec();
            minus[pi].data_mut()[e] -= FD_H;
            let fm = eval(&minus);
            *slot = (fp - fm) / (2.0 * FD_H);
        }
        assert_grad_close(
            analytic.data(),
            &numeric,
            rtol,
            1e-9,
            &format!("{what} param {pi}"),
        );
    }
}

fn randn(rng: &mut ChaCha20Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn matmul_identity_is_identity() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let a = randn(&mut rng, vec![3, 5], 1.0);
    let mut tape = Tape::new();
    let ia = tape.leaf(Tensor::eye(3));
    let na = tape.leaf(a.clone());
    let out = tape.matmul(ia, na).unwrap();
    assert_eq!(tape.value(out), &a);
}

#[test]
fn row_softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
    let y = tape.row_softmax(z).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn row_softmax_rows_sum_to_one() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let z = tape.leaf(randn(&mut rng, vec![6, 9], 4.0));
    let y = tape.row_softmax(z).unwrap();
    for i in 0..6 {
        let s: f64 = tape.value(y).row(i).iter().sum();
        assert!((s - 1.0).abs() <= 1e-12, "row {i} sums to {s}");
    }
}

#[test]
fn layer_norm_constant_row_yields_bias() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(2, 3, vec![5.0, 5.0, 5.0, -1.5, -1.5, -1.5]).unwrap());
    let gain = tape.leaf(Tensor::vector(vec![2.0, 3.0, 4.0]).unwrap());
    let bias = tape.leaf(Tensor::vector(vec![0.5, -0.5, 1.0]).unwrap());
    let y = tape.layer_norm(x, gain, bias).unwrap();
    let expect = [0.5, -0.5, 1.0, 0.5, -0.5, 1.0];
    for (v, e) in tape.value(y).data().iter().zip(&expect) {
        assert!((v - e).abs() < 1e-12);
    }
}

#[test]
fn backward_product_rule() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(1, 1, vec![2.0]).unwrap());
    let y = tape.leaf(Tensor::matrix(1, 1, vec![3.0]).unwrap());
    let f = tape.matmul(x, y).unwrap();
    let grads = tape.backward(f).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
    assert_eq!(grads.get(y).unwrap().data(), &[2.0]);
}

#[test]
fn backward_neg_log_softmax_matches_finite_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let z = randn(&mut rng, vec![1, 5], 1.0);
    fd_check(
        &[z],
        |tape, ids| {
            let p = tape.row_softmax(ids[0]).unwrap();
            let pk = tape.index(p, 0, 2).unwrap();
            let lg = tape.log(pk).unwrap();
            tape.scale(lg, -1.0).unwrap()
        },
        1e-6,
        "neg_log_softmax",
    );
}

#[test]
fn unreachable_parameter_gets_zero_gradient() {
    let mut tape = Tape::new();
    let used = tape.leaf(Tensor::matrix(1, 1, vec![2.0]).unwrap());
    let unused = tape.leaf(Tensor::matrix(3, 2, vec![1.0; 6]).unwrap());
    let loss = tape.scale(used, 4.0).unwrap();
    let loss = tape.index(loss, 0, 0).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(unused).is_none());
    let z = grads.get_or_zeros(unused);
    assert_eq!(z.shape(), &[3, 2]);
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
    let b = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
    match tape.matmul(a, b) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn log_of_nonpositive_is_numeric_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, -2.0]).unwrap());
    assert!(matches!(tape.log(x), Err(Error::NonFinite { .. })));
}

#[test]
fn embedding_lookup_rejects_bad_id() {
    let mut tape = Tape::new();
    let table = tape.leaf(Tensor::matrix(4, 2, vec![0.0; 8]).unwrap());
    assert!(matches!(
        tape.embedding_lookup(table, &[0, 4]),
        Err(Error::IdOutOfRange { id: 4, vocab: 4 })
    ));
}

#[test]
fn gradients_per_primitive_match_finite_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    let w: Vec<f64> = (0..12).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();

    // matmul
    let a = randn(&mut rng, vec![3, 4], 1.0);
    let b = randn(&mut rng, vec![4, 4], 1.0);
    let wm = w.clone();
    fd_check(
        &[a, b],
        move |t, ids| {
            let y = t.matmul(ids[0], ids[1]).unwrap();
            weighted_scalar(t, y, &wm)
        },
        1e-6,
        "matmul",
    );

    // transpose
    let x = randn(&mut rng, vec![4, 3], 1.0);
    let wt = w.clone();
    fd_check(
        &[x],
        move |t, ids| {
            let y = t.transpose(ids[0]).unwrap();
            weighted_scalar(t, y, &wt)
        },
        1e-6,
        "transpose",
    );

    // add + scale
    let a = randn(&mut rng, vec![3, 4], 1.0);
    let b = randn(&mut rng, vec![3, 4], 1.0);
    let wa = w.clone();
    fd_check(
        &[a, b],
        move |t, ids| {
            let s = t.add(ids[0], ids[1]).unwrap();
            let s = t.scale(s, -1.7).unwrap();
            weighted_scalar(t, s, &wa)
        },
        1e-6,
        "add_scale",
    );

    // row_softmax
    let x = randn(&mut rng, vec![3, 4], 2.0);
    let ws = w.clone();
    fd_check(
        &[x],
        move |t, ids| {
            let y = t.row_softmax(ids[0]).unwrap();
            weighted_scalar(t, y, &ws)
        },
        1e-6,
        "row_softmax",
    );

    // log (shift inputs to stay positive under perturbation)
    let mut x = randn(&mut rng, vec![3, 4], 0.2);
    for v in x.data_mut() {
        *v = v.abs() + 0.5;
    }
    let wl = w.clone();
    fd_check(
        &[x],
        move |t, ids| {
            let y = t.log(ids[0]).unwrap();
            weighted_scalar(t, y, &wl)
        },
        1e-6,
        "log",
    );

    // relu (keep inputs away from the kink)
    let mut x = randn(&mut rng, vec![3, 4], 1.0);
    for v in x.data_mut() {
        if v.abs() < 1e-3 {
            *v += 0.1;
        }
    }
    let wr = w.clone();
    fd_check(
        &[x],
        move |t, ids| {
            let y = t.relu(ids[0]).unwrap();
            weighted_scalar(t, y, &wr)
        },
        1e-6,
        "relu",
    );

    // gelu
    let x = randn(&mut rng, vec![3, 4], 1.5);
    let wg = w.clone();
    fd_check(
        &[x],
        move |t, ids| {
            let y = t.gelu(ids[0]).unwrap();
            weighted_scalar(t, y, &wg)
        },
        1e-6,
        "gelu",
    );

    // layer_norm
    let x = randn(&mut rng, vec![3, 4], 1.0);
    let gain = randn(&mut rng, vec![4], 0.5);
    let bias = randn(&mut rng, vec![4], 0.5);
    let wn = w.clone();
    fd_check(
        &[x, gain, bias],
        move |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2]).unwrap();
            weighted_scalar(t, y, &wn)
        },
        1e-6,
        "layer_norm",
    );

    // embedding_lookup (repeated id exercises scatter-add)
    let table = randn(&mut rng, vec![5, 4], 1.0);
    let we = w.clone();
    fd_check(
        &[table],
        move |t, ids| {
            let y = t.embedding_lookup(ids[0], &[1, 3, 1]).unwrap();
            weighted_scalar(t, y, &we)
        },
        1e-6,
        "embedding_lookup",
    );

    // concat_columns
    let a = randn(&mut rng, vec![3, 2], 1.0);
    let b = randn(&mut rng, vec![3, 2], 1.0);
    let wc = w.clone();
    fd_check(
        &[a, b],
        move |t, ids| {
            let y = t.concat_columns(&[ids[0], ids[1]]).unwrap();
            weighted_scalar(t, y, &wc)
        },
        1e-6,
        "concat_columns",
    );
}

#[test]
fn fan_out_accumulates_and_repeated_backward_is_bit_identical() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(1, 1, vec![3.0]).unwrap());
    let a = tape.scale(x, 2.0).unwrap();
    let b = tape.scale(x, 5.0).unwrap();
    let s = tape.add(a, b).unwrap();
    let loss = tape.index(s, 0, 0).unwrap();
    let g1 = tape.backward(loss).unwrap();
    let g2 = tape.backward(loss).unwrap();
    assert_eq!(g1.get(x).unwrap().data(), &[7.0]);
    assert_eq!(
        g1.get(x).unwrap().data()[0].to_bits(),
        g2.get(x).unwrap().data()[0].to_bits()
    );
}

#[test]
fn tapes_can_move_across_threads() {
    // One tape per decoder head may run on its own thread; a tape owns all
    // of its state.
    fn assert_send<T: Send>() {}
    assert_send::<Tape>();
    assert_send::<Gradients>();

    let results: Vec<f64> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..4)
            .map(|i| {
                scope.spawn(move || {
                    let mut tape = Tape::new();
                    let x = tape.leaf(Tensor::matrix(1, 1, vec![i as f64]).unwrap());
                    let y = tape.scale(x, 3.0).unwrap();
                    let l = tape.index(y, 0, 0).unwrap();
                    let g = tape.backward(l).unwrap();
                    g.get(x).unwrap().data()[0]
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(results, vec![3.0; 4]);
}

#[test]
fn apply_dispatches_like_named_methods() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let via_apply = tape.apply(Primitive::Matmul, &[a, b]).unwrap();
    let via_method = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(via_apply), tape.value(via_method));
    assert!(tape.apply(Primitive::Matmul, &[a]).is_err());
}

proptest! {
    #[test]
    fn row_softmax_is_shift_invariant(
        row in proptest::collection::vec(-10.0f64..10.0, 2..8),
        shift in -5.0f64..5.0,
    ) {
        let cols = row.len();
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(1, cols, row).unwrap());
        let b = tape.leaf(Tensor::matrix(1, cols, shifted).unwrap());
        let ya = tape.row_softmax(a).unwrap();
        let yb = tape.row_softmax(b).unwrap();
        for (u, v) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }
}
