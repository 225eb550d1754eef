use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Checks `op` against central differences at every input coordinate, using
/// `sum(op(inputs) ⊙ R)` with a fixed random `R` as the scalar loss.
fn check_op<F>(seed: u64, inputs: &[&[usize]], op: F)
where
    F: Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    for (i, s) in inputs.iter().enumerate() {
        params.insert(format!("in{i}"), random(&mut rng, s));
    }
    let total = params.total_elements();
    let weight_seed = rng.gen::<u64>();
    let report = grad_check(
        |tape, vars| {
            let out = op(tape, vars)?;
            let mut wr = ChaCha8Rng::seed_from_u64(weight_seed);
            let w = random(&mut wr, tape.value(out).shape());
            let w = tape.constant(w);
            let prod = tape.mul(out, w)?;
            tape.sum(prod)
        },
        &mut params,
        total,
        &mut rng,
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.checked() > 0);
    assert!(
        report.max_rel_error < 1e-4,
        "max relative error {}",
        report.max_rel_error
    );
}

#[test]
fn pairwise_sqdist_three_four_five() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[1, 2], &[0.0, 0.0]));
    let b = tape.constant(t(&[1, 2], &[3.0, 4.0]));
    let d = tape.pairwise_sqdist(a, b).unwrap();
    assert_eq!(tape.value(d).data(), &[25.0]);
}

#[test]
fn relu_clamps_negatives() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn log_softmax_is_shift_stable() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[1000.0, 1000.0]));
    let y = tape.log_softmax(x).unwrap();
    for v in tape.value(y).data() {
        assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
    }
}

#[test]
fn log_softmax_rows_exponentiate_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let mut x = random(&mut rng, &[20, 7]);
    x.data_mut().iter_mut().for_each(|v| *v *= 50.0);
    let x = tape.constant(x);
    let y = tape.log_softmax(x).unwrap();
    for row in tape.value(y).data().chunks(7) {
        let s: f64 = row.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn quadratic_gradient() {
    let mut tape = Tape::new();
    let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn sqdist_gradient() {
    let mut tape = Tape::new();
    let z = tape.leaf(t(&[1, 2], &[1.0, 0.0]), true);
    let c = tape.constant(t(&[1, 2], &[0.0, 0.0]));
    let d = tape.pairwise_sqdist(z, c).unwrap();
    let loss = tape.sum(d).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(z).unwrap().data(), &[2.0, 0.0]);
}

#[test]
fn backward_twice_is_an_error() {
    let mut tape = Tape::new();
    let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let loss = tape.sum(w).unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::Backward(_))));
}

#[test]
fn backward_rejects_non_scalar_and_detached_losses() {
    let mut tape = Tape::new();
    let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    assert!(matches!(tape.backward(w), Err(Error::Backward(_))));
    let c = tape.constant(t(&[2], &[1.0, 2.0]));
    let s = tape.sum(c).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Backward(_))));
}

#[test]
fn shape_mismatch_and_non_finite_are_errors() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2], &[1.0, 2.0]));
    let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    let big = tape.constant(t(&[1], &[f64::MAX]));
    assert!(matches!(
        tape.scale(big, 10.0),
        Err(Error::NonFinite { .. })
    ));
}

#[test]
fn elementwise_gradients() {
    check_op(1, &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]));
    check_op(2, &[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1]));
    check_op(3, &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]));
    check_op(4, &[&[3, 4]], |t, v| t.scale(v[0], -2.5));
    check_op(5, &[&[3, 4], &[1, 4]], |t, v| t.add_row(v[0], v[1]));
    check_op(6, &[&[5, 3]], |t, v| t.relu(v[0]));
}

#[test]
fn matrix_gradients() {
    check_op(10, &[&[3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1]));
    check_op(11, &[&[4, 6]], |t, v| t.max_rows(v[0]));
    check_op(12, &[&[4, 6]], |t, v| t.mean_axis(v[0], 0));
    check_op(13, &[&[4, 6]], |t, v| t.mean_axis(v[0], 1));
    check_op(14, &[&[6, 3]], |t, v| {
        t.group_mean(v[0], vec![vec![0, 2], vec![5, 1, 3]])
    });
    check_op(15, &[&[4, 5]], |t, v| t.log_softmax(v[0]));
    check_op(16, &[&[4, 5]], |t, v| t.softmax(v[0]));
    check_op(17, &[&[4, 3], &[2, 3]], |t, v| {
        t.pairwise_sqdist(v[0], v[1])
    });
    check_op(18, &[&[4, 3], &[4, 3]], |t, v| t.row_sqdist(v[0], v[1]));
    check_op(19, &[&[4, 3]], |t, v| t.gather_rows(v[0], &[3, 0, 3]));
    check_op(20, &[&[4, 3], &[4, 1]], |t, v| t.concat_cols(&[v[0], v[1]]));
    check_op(21, &[&[4, 3]], |t, v| t.scale_cols(v[0], &[1.0, -0.5, 3.0]));
    check_op(22, &[&[4, 3]], |t, v| t.pick_per_row(v[0], &[2, 0, 1, 1]));
    check_op(23, &[&[4, 3]], |t, v| t.mean(v[0]));
    check_op(24, &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]));
}

#[test]
fn conv_pool_norm_gradients() {
    check_op(30, &[&[2, 3, 5, 6], &[4, 3, 3, 3]], |t, v| {
        t.conv2d(v[0], v[1], 1)
    });
    check_op(31, &[&[1, 2, 5, 4], &[2, 2, 3, 3]], |t, v| {
        t.conv2d(v[0], v[1], 0)
    });
    check_op(32, &[&[2, 2, 5, 7]], |t, v| t.max_pool2(v[0]));
    check_op(33, &[&[3, 2, 3, 4], &[2], &[2]], |t, v| {
        Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
    });
    check_op(34, &[&[3, 2, 3, 4], &[2], &[2]], |t, v| {
        t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)
    });
}

#[test]
fn fused_block_gradients() {
    check_op(35, &[&[3, 2, 5, 7], &[2], &[2]], |t, v| {
        Ok(t.bn_relu_pool(v[0], v[1], v[2], 1e-5, Norm::Batch)?.0)
    });
    let running = Norm::Running {
        mean: &[0.1, -0.2],
        var: &[0.5, 2.0],
    };
    check_op(36, &[&[3, 2, 4, 6], &[2], &[2]], |t, v| {
        Ok(t.bn_relu_pool(v[0], v[1], v[2], 1e-5, running)?.0)
    });
}

/// Fused block against the separate batch-norm, ReLU and pooling nodes.
fn fused_vs_chain(train: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let x = random(&mut rng, &[4, 3, 7, 10]);
    let gamma = random(&mut rng, &[3]);
    let beta = random(&mut rng, &[3]);
    let upstream = random(&mut rng, &[4, 3, 3, 5]);
    let (rm, rv) = ([0.2, -0.1, 0.05], [0.7, 1.3, 0.9]);
    let run = |fused: bool| {
        let mut tape = Tape::new();
        let (xv, gv, bv) = (
            tape.leaf(x.clone(), true),
            tape.leaf(gamma.clone(), true),
            tape.leaf(beta.clone(), true),
        );
        let (y, stats) = if fused {
            let norm = if train {
                Norm::Batch
            } else {
                Norm::Running {
                    mean: &rm,
                    var: &rv,
                }
            };
            tape.bn_relu_pool(xv, gv, bv, 1e-5, norm).unwrap()
        } else {
            let (n, stats) = if train {
                let (n, s) = tape.batch_norm_train(xv, gv, bv, 1e-5).unwrap();
                (n, Some(s))
            } else {
                (
                    tape.batch_norm_eval(xv, gv, bv, &rm, &rv, 1e-5).unwrap(),
                    None,
                )
            };
            let r = tape.relu(n).unwrap();
            (tape.max_pool2(r).unwrap(), stats)
        };
        let w = tape.constant(upstream.clone());
        let prod = tape.mul(y, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        let grads: Vec<Tensor> = [xv, gv, bv]
            .iter()
            .map(|&v| tape.grad(v).unwrap())
            .collect();
        (tape.value(y).clone(), stats.map(|s| (s.mean, s.var)), grads)
    };
    let (ya, sa, ga) = run(true);
    let (yb, sb, gb) = run(false);
    assert_eq!(ya, yb);
    assert_eq!(sa, sb);
    for (a, b) in ga.iter().zip(&gb) {
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12, "{u} vs {v}");
        }
    }
}

#[test]
fn fused_block_matches_separate_ops() {
    fused_vs_chain(true);
    fused_vs_chain(false);
}

#[test]
fn composite_graph_gradient() {
    // conv -> bn -> relu -> pool -> flatten -> prototype distances -> log-softmax
    check_op(40, &[&[4, 1, 6, 6], &[3, 1, 3, 3], &[3], &[3]], |t, v| {
        let c = t.conv2d(v[0], v[1], 1)?;
        let (n, _) = t.batch_norm_train(c, v[2], v[3], 1e-5)?;
        let r = t.relu(n)?;
        let p = t.max_pool2(r)?;
        let f = t.reshape(p, &[4, 27])?;
        let protos = t.group_mean(f, vec![vec![0, 1], vec![2]])?;
        let q = t.gather_rows(f, &[3])?;
        let d = t.pairwise_sqdist(q, protos)?;
        let s = t.scale(d, -1.0)?;
        t.log_softmax(s)
    });
}

#[test]
fn linear_layer_gradcheck_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[5, 4]);
    let mut params = ParamStore::new();
    params.insert("w", random(&mut rng, &[4, 3]));
    params.insert("b", random(&mut rng, &[1, 3]));
    let report = grad_check(
        |tape, v| {
            let x = tape.constant(x.clone());
            let y = tape.matmul(x, v[0])?;
            let y = tape.add_row(y, v[1])?;
            tape.sum(y)
        },
        &mut params,
        10,
        &mut rng,
        GradCheckConfig::default(),
    )
    .unwrap();
    assert_eq!(report.checked(), 10);
    assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
}

#[test]
fn relu_kink_probe_is_skipped() {
    let mut params = ParamStore::new();
    params.insert("x", t(&[2], &[0.0, 1.0]));
    let report = grad_check(
        |tape, v| {
            let r = tape.relu(v[0])?;
            tape.sum(r)
        },
        &mut params,
        2,
        &mut ChaCha8Rng::seed_from_u64(0),
        GradCheckConfig::default(),
    )
    .unwrap();
    assert_eq!(report.skipped(), 1);
    assert_eq!(report.probes[0].numeric, None);
    assert!(report.probes[1].rel_error.unwrap() < 1e-9);
}

#[test]
fn nondeterministic_model_fn_is_rejected() {
    let mut params = ParamStore::new();
    params.insert("x", t(&[1], &[1.0]));
    let mut calls = 0.0;
    let result = grad_check(
        |tape, v| {
            calls += 1.0;
            let s = tape.scale(v[0], calls)?;
            tape.sum(s)
        },
        &mut params,
        1,
        &mut ChaCha8Rng::seed_from_u64(0),
        GradCheckConfig::default(),
    );
    assert!(matches!(result, Err(Error::GradCheck(_))));
}

#[test]
fn injected_fault_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ParamStore::new();
    params.insert(
        "x",
        Tensor::new(vec![8], (0..8).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap(),
    );
    let run = |fault: Option<Fault>| {
        grad_check(
            |tape, v| {
                let r = tape.relu(v[0])?;
                let s = tape.mul(r, r)?;
                tape.sum(s)
            },
            &mut params.clone(),
            8,
            &mut ChaCha8Rng::seed_from_u64(1),
            GradCheckConfig {
                fault,
                ..GradCheckConfig::default()
            },
        )
        .unwrap()
        .max_rel_error
    };
    assert!(run(None) < 1e-6);
    assert!(run(Some(Fault::ReluBackward)) > 0.1);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&mut rng, &[2, 3, 8, 9]);
    let w = random(&mut rng, &[4, 3, 3, 3]);
    let run = || {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let c = tape.conv2d(xv, wv, 1).unwrap();
        let p = tape.max_pool2(c).unwrap();
        tape.value(p).clone()
    };
    let (a, b) = (run(), run());
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}
