//! Model-based imputation with a visit-level minimalRNN.
//!
//! The filler reads one visit at a time (diagnosis one-hot, 22 features,
//! years until the next visit) and predicts the next visit's features.
//! It is trained on histories whose gaps were bootstrap-filled, against the
//! observed next-visit values only.

use dxf_numcore::rng::CounterRng;
use dxf_numcore::{AdamConfig, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NormStats;
use crate::data_model::{SubjectHistory, N_FEATURES};
use crate::error::{Error, Result};
use crate::models::rnn::{cell_step, init_cell, uniform_init, CellKind, CellState};

const INPUT_DIM: usize = 3 + N_FEATURES + 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FillerConfig {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FillerConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            epochs: 20,
            lr: 3e-3,
            batch_size: 64,
        }
    }
}

impl FillerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::config("filler.hidden_dim", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("filler.batch_size", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("filler.lr", "must be a non-negative number"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Filler {
    pub config: FillerConfig,
    pub params: ParamStore,
    trained: bool,
}

/// Forward-fill each feature within the subject, then use `fallback.mean`.
pub fn bootstrap_fill(histories: &[SubjectHistory], fallback: &NormStats) -> Vec<SubjectHistory> {
    let mut out = histories.to_vec();
    for h in &mut out {
        let mut last: [Option<f64>; N_FEATURES] = [None; N_FEATURES];
        for v in &mut h.visits {
            for j in 0..N_FEATURES {
                match v.feature(j) {
                    Some(x) => last[j] = Some(x),
                    None => v.set_feature(j, Some(last[j].unwrap_or(fallback.mean[j]))),
                }
            }
        }
    }
    out
}

fn visit_input(h: &SubjectHistory, t: usize, features: &[f64]) -> [f64; INPUT_DIM] {
    let mut x = [0.0; INPUT_DIM];
    if let Some(d) = h.visits[t].diagnosis {
        x[d.index()] = 1.0;
    }
    x[3..3 + N_FEATURES].copy_from_slice(features);
    let gap = h
        .visits
        .get(t + 1)
        .map(|n| f64::from(n.exam_month - h.visits[t].exam_month))
        .unwrap_or(0.0);
    x[INPUT_DIM - 1] = gap / 12.0;
    x
}

fn dense(h: &SubjectHistory, t: usize) -> [f64; N_FEATURES] {
    std::array::from_fn(|j| h.visits[t].feature(j).unwrap_or(0.0))
}

impl Filler {
    pub fn new(config: FillerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = CounterRng::new(seed);
        let mut params = ParamStore::new();
        let h = config.hidden_dim;
        init_cell(
            &mut params,
            "cell",
            CellKind::MinRnn,
            INPUT_DIM,
            h,
            &mut rng,
        )?;
        uniform_init(
            &mut params,
            "head.w".into(),
            &[h, N_FEATURES],
            1.0 / (h as f64).sqrt(),
            &mut rng,
        )?;
        params.insert("head.b", Tensor::zeros(&[N_FEATURES]))?;
        params.round_to_f32();
        Ok(Self {
            config,
            params,
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Rebuild from stored parameters; the result counts as trained.
    pub fn from_params(config: FillerConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config.clone(), 0)?;
        if fresh.params.names() != params.names() {
            return Err(Error::Format(
                "filler parameters do not match its config".into(),
            ));
        }
        Ok(Self {
            config,
            params,
            trained: true,
        })
    }

    /// Train on `histories` (missing values allowed). Inputs are
    /// bootstrap-filled with `fallback`; the loss covers observed next-visit
    /// cells only. Returns the mean loss per epoch.
    pub fn train(
        &mut self,
        histories: &[SubjectHistory],
        fallback: &NormStats,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let filled = bootstrap_fill(histories, fallback);
        let usable: Vec<usize> = (0..histories.len())
            .filter(|&i| histories[i].visits.len() >= 2)
            .collect();
        let adam = AdamConfig::with_lr(self.config.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut log = Vec::with_capacity(self.config.epochs);
        let mut order = usable.clone();
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0;
            for batch in order.chunks(self.config.batch_size) {
                let mut tape = Tape::new();
                let p = self.params.bind(&mut tape);
                let Some(loss) = self.batch_loss(&mut tape, &p, batch, histories, &filled)? else {
                    continue;
                };
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Numerical(format!(
                        "filler loss is {value} at epoch {epoch}"
                    )));
                }
                let mut g = tape.backward(loss)?;
                let grads = p.collect_grads(&mut g);
                drop(p);
                self.params.adam_step(&grads, &adam)?;
                total += value;
                batches += 1;
            }
            log.push(if batches > 0 {
                total / batches as f64
            } else {
                0.0
            });
        }
        self.params.round_to_f32();
        self.trained = true;
        Ok(log)
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        p: &dxf_numcore::Bound,
        batch: &[usize],
        raw: &[SubjectHistory],
        filled: &[SubjectHistory],
    ) -> Result<Option<dxf_numcore::Var>> {
        let b = batch.len();
        let steps = batch
            .iter()
            .map(|&i| raw[i].visits.len() - 1)
            .max()
            .unwrap_or(0);
        let h = self.config.hidden_dim;
        let mut state = CellState::zeros(tape, CellKind::MinRnn, b, h);
        let (w, bias) = (p.var("head.w")?, p.var("head.b")?);
        let mut loss = None;
        let mut count = 0usize;
        for t in 0..steps {
            let mut x = vec![0.0; b * INPUT_DIM];
            let mut target = vec![0.0; b * N_FEATURES];
            let mut mask = vec![0.0; b * N_FEATURES];
            for (r, &i) in batch.iter().enumerate() {
                if t + 1 >= raw[i].visits.len() {
                    continue;
                }
                x[r * INPUT_DIM..(r + 1) * INPUT_DIM].copy_from_slice(&visit_input(
                    &filled[i],
                    t,
                    &dense(&filled[i], t),
                ));
                for j in 0..N_FEATURES {
                    if let Some(v) = raw[i].visits[t + 1].feature(j) {
                        target[r * N_FEATURES + j] = v;
                        mask[r * N_FEATURES + j] = 1.0;
                        count += 1;
                    }
                }
            }
            let xv = tape.constant(Tensor::new(vec![b, INPUT_DIM], x)?);
            state = cell_step(tape, p, "cell", CellKind::MinRnn, xv, state)?;
            let pred = tape.linear(state.h, w, bias)?;
            let sse = tape.masked_sq_error(
                pred,
                &Tensor::new(vec![b, N_FEATURES], target)?,
                &Tensor::new(vec![b, N_FEATURES], mask)?,
            )?;
            loss = Some(match loss {
                None => sse,
                Some(l) => tape.add(l, sse)?,
            });
        }
        match loss {
            Some(l) if count > 0 => Ok(Some(tape.scale(l, 1.0 / count as f64))),
            _ => Ok(None),
        }
    }
}

/// Impute every missing feature value.
///
/// First-visit gaps take `fallback.mean`; later gaps take the filler's
/// prediction from the already-filled earlier visits. Observed values are
/// copied through untouched.
pub fn model_fill(
    histories: &[SubjectHistory],
    filler: &Filler,
    fallback: &NormStats,
) -> Result<Vec<SubjectHistory>> {
    if !filler.trained {
        return Err(Error::Precondition(
            "model_fill needs a trained filler".into(),
        ));
    }
    let mut out = histories.to_vec();
    const CHUNK: usize = 512;
    for chunk in out.chunks_mut(CHUNK) {
        model_fill_visits(chunk, filler, fallback)?;
    }
    Ok(out)
}

/// In-place batch version of [`model_fill`].
pub fn model_fill_visits(
    histories: &mut [SubjectHistory],
    filler: &Filler,
    fallback: &NormStats,
) -> Result<()> {
    if !filler.trained {
        return Err(Error::Precondition(
            "model_fill needs a trained filler".into(),
        ));
    }
    let b = histories.len();
    if b == 0 {
        return Ok(());
    }
    for h in histories.iter_mut() {
        if let Some(v) = h.visits.first_mut() {
            for j in 0..N_FEATURES {
                if v.feature(j).is_none() {
                    v.set_feature(j, Some(fallback.mean[j]));
                }
            }
        }
    }
    let steps = histories
        .iter()
        .map(|h| h.visits.len().saturating_sub(1))
        .max()
        .unwrap_or(0);
    let mut tape = Tape::new();
    let p = filler.params.bind_frozen(&mut tape);
    let hdim = filler.config.hidden_dim;
    let mut state = CellState::zeros(&mut tape, CellKind::MinRnn, b, hdim);
    let (w, bias) = (p.var("head.w")?, p.var("head.b")?);
    for t in 0..steps {
        let mut x = vec![0.0; b * INPUT_DIM];
        for (r, h) in histories.iter().enumerate() {
            if t + 1 < h.visits.len() {
                x[r * INPUT_DIM..(r + 1) * INPUT_DIM].copy_from_slice(&visit_input(
                    h,
                    t,
                    &dense(h, t),
                ));
            }
        }
        let xv = tape.constant(Tensor::new(vec![b, INPUT_DIM], x)?);
        state = cell_step(&mut tape, &p, "cell", CellKind::MinRnn, xv, state)?;
        let pred = tape.linear(state.h, w, bias)?;
        let pred = tape.value(pred).clone();
        for (r, h) in histories.iter_mut().enumerate() {
            if t + 1 >= h.visits.len() {
                continue;
            }
            let v = &mut h.visits[t + 1];
            for j in 0..N_FEATURES {
                if v.feature(j).is_none() {
                    let y = pred.row(r)[j];
                    if !y.is_finite() {
                        return Err(Error::Numerical(format!(
                            "filler produced {y} for subject {}",
                            h.subject_id
                        )));
                    }
                    v.set_feature(j, Some(y));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{Diagnosis, VisitRecord};

    fn standard() -> NormStats {
        NormStats {
            mean: [0.0; N_FEATURES],
            std: [1.0; N_FEATURES],
        }
    }

    fn hist(values: &[Option<f64>]) -> SubjectHistory {
        let visits = values
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let mut v = VisitRecord::new("s", i as i32 * 6, Some(Diagnosis::CN));
                for j in 0..N_FEATURES {
                    v.set_feature(j, Some(0.5));
                }
                v.set_feature(2, x);
                v
            })
            .collect();
        SubjectHistory::new("s", visits)
    }

    #[test]
    fn bootstrap_forward_fills_then_uses_mean() {
        let mut stats = standard();
        stats.mean[2] = -7.0;
        let out = bootstrap_fill(&[hist(&[None, Some(3.0), None])], &stats);
        let got: Vec<f64> = out[0]
            .visits
            .iter()
            .map(|v| v.feature(2).unwrap())
            .collect();
        assert_eq!(got, vec![-7.0, 3.0, 3.0]);
    }

    #[test]
    fn untrained_filler_is_rejected() {
        let f = Filler::new(FillerConfig::default(), 1).unwrap();
        let r = model_fill(&[hist(&[Some(1.0), None])], &f, &standard());
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn fill_completes_and_preserves_observed() {
        let data = vec![
            hist(&[None, Some(1.25), None, Some(-2.0)]),
            hist(&[Some(0.1), Some(0.2)]),
        ];
        let mut f = Filler::new(
            FillerConfig {
                epochs: 3,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        f.train(&data, &standard(), 3).unwrap();
        let out = model_fill(&data, &f, &standard()).unwrap();
        assert!(out
            .iter()
            .all(|h| h.visits.iter().all(|v| v.missing_count() == 0)));
        assert_eq!(out[0].visits[0].feature(2), Some(0.0));
        assert_eq!(
            out[0].visits[1].feature(2).unwrap().to_bits(),
            1.25f64.to_bits()
        );
        assert_eq!(out[1], data[1]);
    }
}
