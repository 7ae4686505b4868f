//! Minibatch Adam training with early stopping on validation BCA.

use dxf_numcore::rng::mix;
use dxf_numcore::{AdamConfig, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{bca, ConfusionMatrix};
use crate::error::{Error, Result};
use crate::models::{predicted_class, EncodedSequence, Feedback, Model, ModelConfig, Predictor};

/// Candidate values searched when grid search is on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub lr: Vec<f64>,
    /// RNN models only.
    pub hidden_dim: Vec<usize>,
    /// Transformer only.
    pub d_ffn: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lr: vec![1e-4, 3e-4, 1e-3],
            hidden_dim: vec![64, 128, 256],
            d_ffn: vec![256, 512, 1024],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_empty() || self.hidden_dim.is_empty() || self.d_ffn.is_empty() {
            return Err(Error::config(
                "train.grid",
                "candidate lists must be non-empty",
            ));
        }
        Ok(())
    }

    /// Every (model, train) configuration for `base`.
    pub fn candidates(
        &self,
        model: &ModelConfig,
        train: &TrainConfig,
    ) -> Vec<(ModelConfig, TrainConfig)> {
        let mut out = Vec::new();
        for &lr in &self.lr {
            let t = TrainConfig {
                lr,
                ..train.clone()
            };
            if model.kind.cell().is_some() {
                for &h in &self.hidden_dim {
                    out.push((
                        ModelConfig {
                            hidden_dim: h,
                            ..model.clone()
                        },
                        t.clone(),
                    ));
                }
            } else {
                for &f in &self.d_ffn {
                    out.push((
                        ModelConfig {
                            d_ffn: f,
                            ..model.clone()
                        },
                        t.clone(),
                    ));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub grid: Option<GridSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            early_stop_patience: 10,
            seed: 0,
            grid: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be a non-negative number"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be positive"));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::config(
                "train.early_stop_patience",
                "must be positive",
            ));
        }
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_bca: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_bca: Option<f64>,
}

/// BCA of `model` on `seqs`.
pub fn bca_on(model: &dyn Predictor, seqs: &[EncodedSequence]) -> Result<f64> {
    let probs = model.predict_proba(seqs)?;
    let truth: Vec<usize> = seqs.iter().map(|s| s.target.index()).collect();
    let guess: Vec<usize> = probs.iter().map(|p| predicted_class(p).index()).collect();
    Ok(bca(&ConfusionMatrix::from_labels(3, &truth, &guess)))
}

/// Train a fresh model on `fit`, keeping the parameters with the best
/// validation BCA (the last epoch when `val` is empty).
pub fn train_model(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    fit: &[EncodedSequence],
    val: &[EncodedSequence],
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    if fit.is_empty() {
        return Err(Error::Precondition("no training sequences".into()));
    }
    let mut model = Model::new(model_cfg.clone(), mix(&[cfg.seed, 1]))?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let dropout_key = mix(&[cfg.seed, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 3]));
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut log = TrainLog::default();
    let mut best = model.params.clone();
    let mut best_bca = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut step = 0u64;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let seqs: Vec<&EncodedSequence> = batch.iter().map(|&i| &fit[i]).collect();
            let mut tape = Tape::training(dropout_key, step);
            let p = model.params.bind(&mut tape);
            let out = model.forward(&mut tape, &p, &seqs, Feedback::Predicted)?;
            let loss = tape.value(out.loss).item();
            if !loss.is_finite() {
                let recent: Vec<String> = log
                    .epochs
                    .iter()
                    .rev()
                    .take(3)
                    .map(|e| format!("{:.6}", e.train_loss))
                    .collect();
                return Err(Error::Numerical(format!(
                    "{} loss became {loss} at epoch {epoch}, step {step}; recent epoch losses [{}]",
                    model_cfg.kind.as_str(),
                    recent.join(", ")
                )));
            }
            let mut g = tape.backward(out.loss)?;
            let grads = p.collect_grads(&mut g);
            drop(p);
            model.params.adam_step(&grads, &adam)?;
            total += loss;
            batches += 1;
            step += 1;
        }
        let train_loss = total / batches as f64;
        let val_bca = if val.is_empty() {
            None
        } else {
            Some(bca_on(&model, val)?)
        };
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_bca,
        });
        match val_bca {
            Some(b) if b > best_bca => {
                best_bca = b;
                best = model.params.clone();
                log.best_epoch = epoch;
                log.best_val_bca = Some(b);
                since_best = 0;
            }
            Some(_) => {
                since_best += 1;
                if since_best >= cfg.early_stop_patience {
                    break;
                }
            }
            None => {
                best = model.params.clone();
                log.best_epoch = epoch;
            }
        }
    }
    model.params = best;
    model.params.round_to_f32();
    Ok((model, log))
}
