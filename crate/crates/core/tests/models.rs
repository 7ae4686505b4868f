mod common;

use common::{
    cell_grad_err, encoded, model_grad_err, refs, sampled_coords, small_batch, tiny_config,
};
use dxf_core::data_model::Diagnosis::*;
use dxf_core::models::rnn::{rollout, CellKind};
use dxf_core::models::transformer;
use dxf_core::models::{
    EncodedSequence, FeatureMask, Feedback, Model, ModelConfig, ModelKind, Predictor,
};
use dxf_core::train_eval::{train_model, TrainConfig};
use dxf_numcore::rng::mix;
use dxf_numcore::Tape;

#[test]
fn cell_gradients() {
    for kind in [CellKind::Lstm, CellKind::Gru, CellKind::MinRnn] {
        let err = cell_grad_err(kind);
        assert!(err < 1e-4, "{}: rel err {err:.3e}", kind.as_str());
    }
}

#[test]
fn rollout_gradients() {
    let batch = small_batch();
    for kind in [ModelKind::Lstm, ModelKind::Gru, ModelKind::MinRnn] {
        let model = Model::new(tiny_config(kind), 3).unwrap();
        for feedback in [Feedback::Predicted, Feedback::GroundTruth] {
            let coords = sampled_coords(&model.params, 12, 9);
            let err = model_grad_err(&model, &batch, feedback, Some(&coords));
            assert!(
                err < 1e-4,
                "{} {feedback:?}: rel err {err:.3e}",
                kind.as_str()
            );
        }
    }
}

#[test]
fn transformer_gradients_two_visit_input() {
    let batch = vec![
        encoded(0, &[CN, CN, MCI], &[0, 6, 12], 1),
        encoded(1, &[MCI, MCI, MCI], &[0, 12, 18], 2),
        encoded(2, &[AD, AD], &[0, 6], 3),
    ];
    let model = Model::new(tiny_config(ModelKind::Transformer), 4).unwrap();
    let coords = sampled_coords(&model.params, 6, 10);
    let err = model_grad_err(&model, &batch, Feedback::Predicted, Some(&coords));
    assert!(err < 1e-3, "transformer rel err {err:.3e}");
}

#[test]
fn instantiated_counts_match_closed_form() {
    for kind in ModelKind::ALL {
        for cfg in [tiny_config(kind), ModelConfig::default().with_kind(kind)] {
            let m = Model::new(cfg.clone(), 0).unwrap();
            assert_eq!(m.param_count(), cfg.param_count(), "{}", kind.as_str());
        }
        let isolated = ModelConfig {
            features: FeatureMask::isolate(dxf_core::data_model::FeatureCategory::Mri),
            ..tiny_config(kind)
        };
        assert_eq!(
            Model::new(isolated.clone(), 0).unwrap().param_count(),
            isolated.param_count()
        );
    }
    let default = Model::new(ModelConfig::default(), 0).unwrap();
    assert_eq!(default.param_count(), 8_443_651);
    assert_eq!(
        default.param_count(),
        transformer::param_count(&default.config, 26)
    );
}

#[test]
fn transformer_padding_and_batch_order_do_not_change_outputs() {
    let batch = small_batch();
    let model = Model::new(tiny_config(ModelKind::Transformer), 8).unwrap();
    let together = model.predict_proba(&batch).unwrap();
    for (i, s) in batch.iter().enumerate() {
        let alone = model.predict_proba(std::slice::from_ref(s)).unwrap();
        for c in 0..3 {
            assert!((alone[0][c] - together[i][c]).abs() < 1e-12);
        }
    }
    let reversed: Vec<EncodedSequence> = batch.iter().rev().cloned().collect();
    let rev = model.predict_proba(&reversed).unwrap();
    for i in 0..batch.len() {
        assert_eq!(rev[batch.len() - 1 - i], together[i]);
    }
}

#[test]
fn encoder_attention_is_row_stochastic_and_ignores_padding() {
    let batch = small_batch();
    let cfg = tiny_config(ModelKind::Transformer);
    let model = Model::new(cfg.clone(), 2).unwrap();
    let mut tape = Tape::new();
    let p = model.params.bind_frozen(&mut tape);
    let out = transformer::forward(&mut tape, &p, &cfg, &refs(&batch)).unwrap();
    let len = out.len;
    assert!(!out.encoder_attention.is_empty());
    for &a in &out.encoder_attention {
        let w = tape.value(a);
        assert_eq!(w.shape(), &[batch.len() * cfg.n_heads, len, len]);
        for bh in 0..batch.len() * cfg.n_heads {
            let n = batch[bh / cfg.n_heads].n_inputs();
            for q in 0..len {
                let row = &w.data()[(bh * len + q) * len..(bh * len + q + 1) * len];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(
                    row[n..].iter().all(|&x| x == 0.0),
                    "padded key received weight"
                );
            }
        }
    }
}

#[test]
fn rollout_is_causal() {
    let base = encoded(0, &[MCI, MCI, MCI, AD], &[0, 6, 18, 24], 3);
    let mut changed = base.clone();
    for x in &mut changed.visits[2][3..25] {
        *x += 1.5;
    }
    for kind in [CellKind::Lstm, CellKind::Gru, CellKind::MinRnn] {
        let model = Model::new(tiny_config(ModelKind::ALL[1 + kind as usize]), 6).unwrap();
        let monthly = |s: &EncodedSequence| -> Vec<Vec<f64>> {
            let mut t = Tape::new();
            let p = model.params.bind_frozen(&mut t);
            let out = rollout(&mut t, &p, kind, 5, &[s], Feedback::Predicted).unwrap();
            out.monthly_logits
                .iter()
                .map(|&v| t.value(v).data().to_vec())
                .collect()
        };
        let (a, b) = (monthly(&base), monthly(&changed));
        // logits at index t predict month t + 1 from inputs up to month t
        for t in 0..24 {
            if t < 18 {
                assert_eq!(a[t], b[t], "{}: month {} changed", kind.as_str(), t + 1);
            }
        }
        assert_ne!(a[18], b[18]);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let batch = small_batch();
    for kind in ModelKind::ALL {
        let cfg = tiny_config(kind);
        let train = TrainConfig {
            lr: 0.0,
            max_epochs: 2,
            batch_size: 2,
            seed: 17,
            ..TrainConfig::default()
        };
        let (trained, _) = train_model(&cfg, &train, &batch, &batch).unwrap();
        let fresh = Model::new(cfg, mix(&[17, 1])).unwrap();
        assert_eq!(
            trained.params.tensors(),
            fresh.params.tensors(),
            "{}",
            kind.as_str()
        );
    }
}

#[test]
fn checkpoints_round_trip_and_training_is_deterministic() {
    let batch = small_batch();
    let dir = tempfile::tempdir().unwrap();
    for kind in ModelKind::ALL {
        let cfg = tiny_config(kind);
        let train = TrainConfig {
            max_epochs: 3,
            batch_size: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let (a, _) = train_model(&cfg, &train, &batch, &batch).unwrap();
        let (b, _) = train_model(&cfg, &train, &batch, &batch).unwrap();
        assert_eq!(a.checkpoint_bytes().unwrap(), b.checkpoint_bytes().unwrap());
        let path = dir.path().join(format!("{}.ckpt", kind.as_str()));
        a.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded.config, a.config);
        assert_eq!(
            loaded.predict_proba(&batch).unwrap(),
            a.predict_proba(&batch).unwrap()
        );
        let tagged = a
            .checkpoint_bytes_with_header(Some("config_hash=00 seed=1"))
            .unwrap();
        assert_eq!(
            Model::from_checkpoint_bytes(&tagged)
                .unwrap()
                .params
                .tensors(),
            a.params.tensors()
        );
    }
}

#[test]
fn stability_baseline_copies_penultimate_diagnosis() {
    let batch = small_batch();
    let p = dxf_core::models::StabilityBaseline
        .predict_proba(&batch)
        .unwrap();
    for (s, row) in batch.iter().zip(p) {
        assert_eq!(row[s.penultimate.index()], 1.0);
    }
}
