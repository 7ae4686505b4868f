use dxf_numcore::gradcheck::{check, GradCheckReport};
use dxf_numcore::rng::CounterRng;
use dxf_numcore::{Tape, Tensor, Var};
use proptest::prelude::*;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = CounterRng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Reduce any tensor to a scalar through a fixed random projection so every
/// output element gets a distinct upstream gradient.
fn project(tape: &mut Tape, y: Var, seed: u64) -> dxf_numcore::Result<Var> {
    let w = randn(tape.shape(y), seed ^ 0xABCD);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn assert_ok(name: &str, r: GradCheckReport) {
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(
        r.max_rel_err < TOL,
        "{name}: max rel err {:.3e}",
        r.max_rel_err
    );
}

#[test]
fn matmul_and_batch_matmul() {
    let r = check(
        &[randn(&[3, 4], 1), randn(&[4, 2], 2)],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 3)
        },
        EPS,
        None,
    )
    .unwrap();
    assert_ok("matmul", r);

    for trans_b in [false, true] {
        let b_shape = if trans_b { [2, 5, 3] } else { [2, 3, 5] };
        let r = check(
            &[randn(&[2, 4, 3], 4), randn(&b_shape, 5)],
            |t, v| {
                let y = t.batch_matmul(v[0], v[1], trans_b)?;
                project(t, y, 6)
            },
            EPS,
            None,
        )
        .unwrap();
        assert_ok("batch_matmul", r);
    }
}

#[test]
fn elementwise_binary_ops() {
    let inputs = [randn(&[3, 4], 7), randn(&[3, 4], 8)];
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let r = check(
            &inputs,
            |t, v| {
                let y = match op {
                    0 => t.add(v[0], v[1])?,
                    1 => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                project(t, y, 9)
            },
            EPS,
            None,
        )
        .unwrap();
        assert_ok(name, r);
    }
}

#[test]
fn row_broadcast_ops() {
    let inputs = [randn(&[2, 3, 4], 10), randn(&[4], 11)];
    for mul in [false, true] {
        let r = check(
            &inputs,
            |t, v| {
                let y = if mul {
                    t.mul_row(v[0], v[1])?
                } else {
                    t.add_row(v[0], v[1])?
                };
                project(t, y, 12)
            },
            EPS,
            None,
        )
        .unwrap();
        assert_ok(if mul { "mul_row" } else { "add_row" }, r);
    }
}

#[test]
fn unary_activations() {
    let x = randn(&[4, 5], 13);
    for (name, which) in [
        ("sigmoid", 0),
        ("tanh", 1),
        ("relu", 2),
        ("exp", 3),
        ("scale", 4),
    ] {
        let r = check(
            &[x.clone()],
            |t, v| {
                let y = match which {
                    0 => t.sigmoid(v[0]),
                    1 => t.tanh(v[0]),
                    2 => t.relu(v[0]),
                    3 => t.exp(v[0]),
                    _ => t.scale(v[0], -2.5),
                };
                project(t, y, 14)
            },
            EPS,
            None,
        )
        .unwrap();
        assert_ok(name, r);
    }
}

#[test]
fn softmax_and_log_softmax_every_axis() {
    let x = randn(&[2, 3, 4], 15);
    for axis in 0..3 {
        for log in [false, true] {
            let r = check(
                &[x.clone()],
                |t, v| {
                    let y = if log {
                        t.log_softmax(v[0], axis)?
                    } else {
                        t.softmax(v[0], axis)?
                    };
                    project(t, y, 16 + axis as u64)
                },
                EPS,
                None,
            )
            .unwrap();
            assert_ok(if log { "log_softmax" } else { "softmax" }, r);
        }
    }
}

#[test]
fn softmax_cross_entropy_sum() {
    let r = check(
        &[randn(&[6, 3], 20)],
        |t, v| t.weighted_cross_entropy(v[0], &[0, 2, 1, 1, 0, 2], &[1.0, 0.5, 2.0, 1.0, 0.0, 1.0]),
        EPS,
        None,
    )
    .unwrap();
    assert_ok("cross_entropy", r);
}

#[test]
fn layer_norm_all_inputs() {
    let r = check(
        &[randn(&[3, 6], 21), randn(&[6], 22), randn(&[6], 23)],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, 24)
        },
        EPS,
        None,
    )
    .unwrap();
    assert_ok("layer_norm", r);
}

#[test]
fn dropout_in_training_mode() {
    // The mask is keyed by (seed, layer, step), so the numeric evaluations see
    // the same mask as long as they use the same tape key.
    let x = randn(&[4, 4], 25);
    let mut tape = Tape::training(3, 9);
    let xv = tape.leaf(x.clone());
    let y = tape.dropout(xv, 0.3, 1).unwrap();
    let mask: Vec<f64> = tape
        .value(y)
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| a / b)
        .collect();
    let l = project(&mut tape, y, 26).unwrap();
    let g = tape.backward(l).unwrap();
    let w = randn(&[4, 4], 26 ^ 0xABCD);
    for i in 0..16 {
        let expected = mask[i] * w.data()[i];
        assert!((g.get(xv).unwrap().data()[i] - expected).abs() < 1e-12);
    }
}

#[test]
fn concat_slice_reshape_permute() {
    let inputs = [randn(&[2, 3, 2], 27), randn(&[2, 1, 2], 28)];
    let r = check(
        &inputs,
        |t, v| {
            let c = t.concat(&[v[0], v[1], v[0]], 1)?;
            let s = t.slice(c, 1, 1, 4)?;
            let r = t.reshape(s, &[4, 4])?;
            let r3 = t.reshape(r, &[2, 2, 4])?;
            let p = t.permute(r3, &[2, 0, 1])?;
            project(t, p, 29)
        },
        EPS,
        None,
    )
    .unwrap();
    assert_ok("concat/slice/reshape/permute", r);
}

#[test]
fn embedding_with_repeated_indices() {
    let r = check(
        &[randn(&[4, 3], 30)],
        |t, v| {
            let e = t.embedding(v[0], &[2, 0, 2, 3])?;
            project(t, e, 31)
        },
        EPS,
        None,
    )
    .unwrap();
    assert_ok("embedding", r);
}

#[test]
fn masked_fill_then_softmax() {
    let mask = [false, true, false, false, false, true];
    let r = check(
        &[randn(&[2, 3], 32)],
        |t, v| {
            let m = t.masked_fill(v[0], &mask, f64::NEG_INFINITY)?;
            let s = t.softmax(m, 1)?;
            project(t, s, 33)
        },
        EPS,
        None,
    )
    .unwrap();
    assert_ok("masked_fill", r);
}

#[test]
fn sum_and_mean() {
    let r = check(
        &[randn(&[3, 3], 34)],
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let a = t.mean(sq);
            let b = t.sum(v[0]);
            t.add(a, b)
        },
        EPS,
        None,
    )
    .unwrap();
    assert_ok("sum/mean", r);
}

#[test]
fn shared_subexpressions_accumulate() {
    // y = tanh(x) is consumed three times.
    let r = check(
        &[randn(&[5], 35)],
        |t, v| {
            let y = t.tanh(v[0]);
            let a = t.mul(y, y)?;
            let b = t.add(a, y)?;
            let c = t.mul(b, v[0])?;
            project(t, c, 36)
        },
        EPS,
        None,
    )
    .unwrap();
    assert_ok("shared", r);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_shapes_pass_gradcheck(rows in 1usize..4, cols in 1usize..5, inner in 1usize..4, seed in 0u64..1000) {
        let r = check(
            &[randn(&[rows, inner], seed), randn(&[inner, cols], seed + 1), randn(&[cols], seed + 2)],
            |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                let h = t.tanh(y);
                let s = t.log_softmax(h, 1)?;
                project(t, s, seed + 3)
            },
            EPS,
            None,
        ).unwrap();
        prop_assert!(r.max_rel_err < TOL, "rel err {}", r.max_rel_err);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, seed in 0u64..1000, scale in 0.1f64..20.0) {
        let mut t = Tape::new();
        let x = randn(&[rows, cols], seed).map(|v| v * scale);
        let xv = t.constant(x);
        let s = t.softmax(xv, 1).unwrap();
        let ls = t.log_softmax(xv, 1).unwrap();
        for r in 0..rows {
            let row = t.value(s).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (p, lp) in row.iter().zip(t.value(ls).row(r)) {
                prop_assert!((p.ln() - lp).abs() < 1e-10 || *p == 0.0);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes(rows in 1usize..5, cols in 2usize..9, seed in 0u64..1000, shift in -50.0f64..50.0) {
        let mut t = Tape::new();
        let x = randn(&[rows, cols], seed).map(|v| v + shift);
        let xv = t.constant(x);
        let g = t.constant(Tensor::full(&[cols], 1.0));
        let b = t.constant(Tensor::zeros(&[cols]));
        // eps -> 0 isolates the normalization itself from the stabilizer.
        let y = t.layer_norm(xv, g, b, 1e-12).unwrap();
        for r in 0..rows {
            let row = t.value(y).row(r);
            let n = cols as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-10, "mean {}", mean);
            prop_assert!((var - 1.0).abs() < 1e-8, "var {}", var);
        }
    }
}

#[test]
fn op_suite_covers_every_op_within_tolerance() {
    let suite = dxf_numcore::gradcheck::op_suite(EPS).unwrap();
    assert!(suite.len() >= 20);
    for (name, r) in suite {
        assert_ok(&name, r);
    }
}
