#![allow(dead_code)]

use dxf_core::data_model::{Diagnosis, VisitRecord, N_FEATURES};
use dxf_core::models::rnn::{cell_step, init_cell, CellKind, CellState};
use dxf_core::models::{
    encode, EncodedSequence, FeatureMask, Feedback, Model, ModelConfig, ModelKind,
};
use dxf_core::sequences::VisitSequence;
use dxf_numcore::gradcheck::check;
use dxf_numcore::rng::CounterRng;
use dxf_numcore::{NumError, ParamStore, Tape, Tensor, Var};

/// Fully observed sequence with standard-normal features.
pub fn sequence(seq_id: usize, dx: &[Diagnosis], months: &[i32], seed: u64) -> VisitSequence {
    let mut rng = CounterRng::new(seed);
    let visits = dx
        .iter()
        .zip(months)
        .map(|(&d, &m)| {
            let mut v = VisitRecord::new(format!("S{seq_id}"), 24_000 + m, Some(d));
            for j in 0..N_FEATURES {
                v.set_feature(j, Some(rng.normal()));
            }
            v
        })
        .collect();
    VisitSequence::new(seq_id, format!("S{seq_id}"), visits).unwrap()
}

pub fn encoded(seq_id: usize, dx: &[Diagnosis], months: &[i32], seed: u64) -> EncodedSequence {
    encode(&sequence(seq_id, dx, months, seed), &FeatureMask::all()).unwrap()
}

/// A small mixed batch: stable and converter sequences of 2 to 4 visits.
pub fn small_batch() -> Vec<EncodedSequence> {
    use Diagnosis::*;
    vec![
        encoded(0, &[CN, CN, MCI], &[0, 6, 12], 1),
        encoded(1, &[MCI, MCI], &[0, 6], 2),
        encoded(2, &[MCI, MCI, MCI, AD], &[0, 6, 18, 24], 3),
        encoded(3, &[AD, AD, AD], &[0, 12, 18], 4),
    ]
}

pub fn tiny_config(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        hidden_dim: 5,
        d_model: 8,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        d_ffn: 12,
        dropout: 0.0,
        ..ModelConfig::default()
    }
    .with_kind(kind)
}

pub const GRAD_EPS: f64 = 1e-5;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = CounterRng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

pub fn refs(b: &[EncodedSequence]) -> Vec<&EncodedSequence> {
    b.iter().collect()
}

/// A few coordinates from every parameter tensor.
pub fn sampled_coords(store: &ParamStore, per_tensor: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = CounterRng::new(seed);
    let mut out = Vec::new();
    for (i, t) in store.tensors().iter().enumerate() {
        for _ in 0..per_tensor.min(t.len()) {
            out.push((
                i,
                (rng.uniform_range(0.0, t.len() as f64) as usize).min(t.len() - 1),
            ));
        }
    }
    out
}

pub fn to_num(e: dxf_core::Error) -> NumError {
    match e {
        dxf_core::Error::Tensor(n) => n,
        other => NumError::Invalid {
            op: "test",
            msg: other.to_string(),
        },
    }
}

/// Two steps of one cell, every parameter, input and initial state element.
pub fn cell_grad_err(kind: CellKind) -> f64 {
    let (input, hidden, batch) = (4, 3, 2);
    let mut store = ParamStore::new();
    init_cell(
        &mut store,
        "cell",
        kind,
        input,
        hidden,
        &mut CounterRng::new(5),
    )
    .unwrap();
    let n_params = store.len();
    let mut inputs = store.tensors().to_vec();
    inputs.push(randn(&[batch, input], 11));
    inputs.push(randn(&[batch, input], 12));
    inputs.push(randn(&[batch, hidden], 13));
    inputs.push(randn(&[batch, hidden], 14));
    let proj = randn(&[batch, hidden], 15);
    check(
        &inputs,
        |t: &mut Tape, v: &[Var]| {
            let p = store.bind_vars(v[..n_params].to_vec())?;
            let mut s = CellState {
                h: v[n_params + 2],
                c: (kind == CellKind::Lstm).then_some(v[n_params + 3]),
            };
            for step in 0..2 {
                s = cell_step(t, &p, "cell", kind, v[n_params + step], s).map_err(to_num)?;
            }
            let w = t.constant(proj.clone());
            let y = t.mul(s.h, w)?;
            Ok(t.sum(y))
        },
        GRAD_EPS,
        None,
    )
    .unwrap()
    .max_rel_err
}

/// Max relative error of the training loss gradient; `coords` of `None`
/// checks every parameter element.
pub fn model_grad_err(
    model: &Model,
    batch: &[EncodedSequence],
    feedback: Feedback,
    coords: Option<&[(usize, usize)]>,
) -> f64 {
    let inputs = model.params.tensors().to_vec();
    let b = refs(batch);
    check(
        &inputs,
        |t: &mut Tape, v: &[Var]| {
            let p = model.params.bind_vars(v.to_vec())?;
            Ok(model.forward(t, &p, &b, feedback).map_err(to_num)?.loss)
        },
        GRAD_EPS,
        coords,
    )
    .unwrap()
    .max_rel_err
}

/// Batch whose sequences all have two input visits.
pub fn two_visit_batch() -> Vec<EncodedSequence> {
    use Diagnosis::*;
    vec![
        encoded(0, &[CN, CN, MCI], &[0, 6, 12], 1),
        encoded(1, &[MCI, MCI, MCI], &[0, 12, 18], 2),
        encoded(2, &[AD, AD, AD], &[0, 6, 12], 3),
    ]
}
