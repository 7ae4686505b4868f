//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every backward rule it is used to check.

use crate::{Result, Tape, Tensor, Var};

/// Denominator floor for relative error, so gradients that are both close to
/// zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compare reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `eps`. `coords` restricts the check to
/// `(input, element)` pairs; `None` checks every element of every input.
pub fn check<F>(
    inputs: &[Tensor],
    f: F,
    eps: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for &(i, j) in coords {
        let analytic = grads.get(vars[i]).map(|g| g.data()[j]).unwrap_or(0.0);
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let plus = eval(&work, &f)?;
        work[i].data_mut()[j] = orig - eps;
        let minus = eval(&work, &f)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        report.max_abs_err = report.max_abs_err.max((analytic - numeric).abs());
        report.max_rel_err = report.max_rel_err.max(rel_err(analytic, numeric));
        report.checked += 1;
    }
    Ok(report)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = crate::rng::CounterRng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape matches data")
}

/// Reduce to a scalar through a fixed random projection so every output
/// element gets a distinct upstream gradient.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(randn(tape.shape(y), seed ^ 0xABCD));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Check every differentiable tape op at step `eps`. Dropout is checked
/// against its mask directly since finite differences need a fixed key.
pub fn op_suite(eps: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    let mut push = |name: String, r: Result<GradCheckReport>| -> Result<()> {
        out.push((name, r?));
        Ok(())
    };

    push(
        "matmul".into(),
        check(
            &[randn(&[3, 4], 1), randn(&[4, 2], 2)],
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, 3)
            },
            eps,
            None,
        ),
    )?;
    for trans_b in [false, true] {
        let b_shape = if trans_b { [2, 5, 3] } else { [2, 3, 5] };
        push(
            format!("batch_matmul(trans_b={trans_b})"),
            check(
                &[randn(&[2, 4, 3], 4), randn(&b_shape, 5)],
                |t, v| {
                    let y = t.batch_matmul(v[0], v[1], trans_b)?;
                    project(t, y, 6)
                },
                eps,
                None,
            ),
        )?;
    }
    let pair = [randn(&[3, 4], 7), randn(&[3, 4], 8)];
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        push(
            name.into(),
            check(
                &pair,
                |t, v| {
                    let y = match op {
                        0 => t.add(v[0], v[1])?,
                        1 => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    project(t, y, 9)
                },
                eps,
                None,
            ),
        )?;
    }
    let row = [randn(&[2, 3, 4], 10), randn(&[4], 11)];
    for (name, mul) in [("add_row", false), ("mul_row", true)] {
        push(
            name.into(),
            check(
                &row,
                |t, v| {
                    let y = if mul {
                        t.mul_row(v[0], v[1])?
                    } else {
                        t.add_row(v[0], v[1])?
                    };
                    project(t, y, 12)
                },
                eps,
                None,
            ),
        )?;
    }
    let x = randn(&[4, 5], 13);
    for (name, which) in [
        ("sigmoid", 0),
        ("tanh", 1),
        ("relu", 2),
        ("exp", 3),
        ("scale", 4),
    ] {
        push(
            name.into(),
            check(
                std::slice::from_ref(&x),
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
                eps,
                None,
            ),
        )?;
    }
    let x3 = randn(&[2, 3, 4], 15);
    for axis in 0..3 {
        for log in [false, true] {
            let name = if log { "log_softmax" } else { "softmax" };
            push(
                format!("{name}(axis={axis})"),
                check(
                    std::slice::from_ref(&x3),
                    |t, v| {
                        let y = if log {
                            t.log_softmax(v[0], axis)?
                        } else {
                            t.softmax(v[0], axis)?
                        };
                        project(t, y, 16 + axis as u64)
                    },
                    eps,
                    None,
                ),
            )?;
        }
    }
    push(
        "weighted_cross_entropy".into(),
        check(
            &[randn(&[6, 3], 20)],
            |t, v| {
                t.weighted_cross_entropy(v[0], &[0, 2, 1, 1, 0, 2], &[1.0, 0.5, 2.0, 1.0, 0.0, 1.0])
            },
            eps,
            None,
        ),
    )?;
    push(
        "layer_norm".into(),
        check(
            &[randn(&[3, 6], 21), randn(&[6], 22), randn(&[6], 23)],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(t, y, 24)
            },
            eps,
            None,
        ),
    )?;
    push(
        "concat/slice/reshape/permute".into(),
        check(
            &[randn(&[2, 3, 2], 27), randn(&[2, 1, 2], 28)],
            |t, v| {
                let c = t.concat(&[v[0], v[1], v[0]], 1)?;
                let s = t.slice(c, 1, 1, 4)?;
                let r = t.reshape(s, &[4, 4])?;
                let r3 = t.reshape(r, &[2, 2, 4])?;
                let p = t.permute(r3, &[2, 0, 1])?;
                project(t, p, 29)
            },
            eps,
            None,
        ),
    )?;
    push(
        "embedding".into(),
        check(
            &[randn(&[4, 3], 30)],
            |t, v| {
                let e = t.embedding(v[0], &[2, 0, 2, 3])?;
                project(t, e, 31)
            },
            eps,
            None,
        ),
    )?;
    let mask = [false, true, false, false, false, true];
    push(
        "masked_fill".into(),
        check(
            &[randn(&[2, 3], 32)],
            |t, v| {
                let m = t.masked_fill(v[0], &mask, f64::NEG_INFINITY)?;
                let s = t.softmax(m, 1)?;
                project(t, s, 33)
            },
            eps,
            None,
        ),
    )?;
    push(
        "sum/mean".into(),
        check(
            &[randn(&[3, 3], 34)],
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let a = t.mean(sq);
                let b = t.sum(v[0]);
                t.add(a, b)
            },
            eps,
            None,
        ),
    )?;

    push(
        "linear".into(),
        check(
            &[randn(&[3, 4], 37), randn(&[4, 2], 38), randn(&[2], 39)],
            |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                project(t, y, 40)
            },
            eps,
            None,
        ),
    )?;
    let target = randn(&[3, 4], 41);
    let sq_mask = Tensor::new(
        vec![3, 4],
        (0..12).map(|i| (i % 3 != 1) as u8 as f64).collect(),
    )?;
    push(
        "masked_sq_error".into(),
        check(
            &[randn(&[3, 4], 42)],
            |t, v| t.masked_sq_error(v[0], &target, &sq_mask),
            eps,
            None,
        ),
    )?;

    // dropout: d/dx sum(w * dropout(x)) = w * mask
    let x = randn(&[4, 4], 25);
    let mut tape = Tape::training(3, 9);
    let xv = tape.leaf(x.clone());
    let y = tape.dropout(xv, 0.3, 1)?;
    let scaled: Vec<f64> = tape
        .value(y)
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| a / b)
        .collect();
    let l = project(&mut tape, y, 26)?;
    let g = tape.backward(l)?;
    let w = randn(&[4, 4], 26 ^ 0xABCD);
    let mut r = GradCheckReport::default();
    let gx = g
        .get(xv)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; 16]);
    for i in 0..16 {
        let expected = scaled[i] * w.data()[i];
        r.max_abs_err = r.max_abs_err.max((gx[i] - expected).abs());
        r.max_rel_err = r.max_rel_err.max(rel_err(gx[i], expected));
        r.checked += 1;
    }
    push("dropout".into(), Ok(r))?;
    Ok(out)
}
