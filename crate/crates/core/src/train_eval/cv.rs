//! Cross-validation: per-fold normalization and imputation, then training
//! and evaluation of one model configuration on every fold.

use dxf_numcore::rng::mix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate, EvalReport, Prediction};
use super::trainer::{train_model, TrainConfig, TrainLog};
use crate::data_model::{SubjectHistory, N_FEATURES};
use crate::error::{Error, Result};
use crate::models::{encode, EncodedSequence, FeatureMask, Model, ModelConfig, Predictor};
use crate::preprocess::{model_fill, Filler, FillerConfig, NormStats};
use crate::sequences::{validation_carve_out, DatasetSplit, VisitSequence};

/// Standard-normal statistics: the fallback mean in normalized space.
pub fn standard_stats() -> NormStats {
    NormStats {
        mean: [0.0; N_FEATURES],
        std: [1.0; N_FEATURES],
    }
}

/// One fold, normalized with training statistics and fully imputed.
#[derive(Clone, Debug)]
pub struct PreparedFold {
    pub fold: usize,
    pub norm: NormStats,
    pub filler: Filler,
    pub fit: Vec<VisitSequence>,
    pub val: Vec<VisitSequence>,
    pub test: Vec<VisitSequence>,
}

fn select<'a>(seqs: &'a [VisitSequence], ids: &[usize]) -> Result<Vec<&'a VisitSequence>> {
    ids.iter()
        .map(|&id| {
            seqs.iter().find(|s| s.seq_id == id).ok_or_else(|| {
                Error::Precondition(format!("split refers to unknown sequence {id}"))
            })
        })
        .collect()
}

fn as_histories(seqs: &[&VisitSequence]) -> Vec<SubjectHistory> {
    seqs.iter()
        .map(|s| SubjectHistory::new(s.subject_id.clone(), s.visits.clone()))
        .collect()
}

fn normalized(seqs: &[&VisitSequence], norm: &NormStats) -> Vec<VisitSequence> {
    seqs.iter()
        .map(|s| {
            let mut s = (*s).clone();
            norm.apply(&mut s.visits);
            s
        })
        .collect()
}

fn fill_sequences(seqs: &[VisitSequence], filler: &Filler) -> Result<Vec<VisitSequence>> {
    let refs: Vec<&VisitSequence> = seqs.iter().collect();
    let filled = model_fill(&as_histories(&refs), filler, &standard_stats())?;
    Ok(seqs
        .iter()
        .zip(filled)
        .map(|(s, h)| VisitSequence {
            visits: h.visits,
            ..s.clone()
        })
        .collect())
}

/// Training-split normalization statistics for `split`.
pub fn fold_norm(seqs: &[VisitSequence], split: &DatasetSplit) -> Result<NormStats> {
    let train = select(seqs, &split.train)?;
    Ok(NormStats::fit(train.iter().flat_map(|s| &s.visits)))
}

/// Normalize, train the filler on the training split, impute, and hold
/// out the validation carve-out.
pub fn prepare_fold(
    seqs: &[VisitSequence],
    split: &DatasetSplit,
    filler_cfg: &FillerConfig,
    seed: u64,
) -> Result<PreparedFold> {
    let norm = fold_norm(seqs, split)?;
    let train = normalized(&select(seqs, &split.train)?, &norm);
    let refs: Vec<&VisitSequence> = train.iter().collect();
    let mut filler = Filler::new(filler_cfg.clone(), mix(&[seed, 1]))?;
    filler.train(&as_histories(&refs), &standard_stats(), mix(&[seed, 2]))?;
    assemble_fold(seqs, split, norm, filler, seed)
}

/// [`prepare_fold`] with a given normalization and trained filler.
pub fn assemble_fold(
    seqs: &[VisitSequence],
    split: &DatasetSplit,
    norm: NormStats,
    filler: Filler,
    seed: u64,
) -> Result<PreparedFold> {
    let train = fill_sequences(&normalized(&select(seqs, &split.train)?, &norm), &filler)?;
    let test = fill_sequences(&normalized(&select(seqs, &split.test)?, &norm), &filler)?;
    let refs: Vec<&VisitSequence> = train.iter().collect();
    let (fit_ids, val_ids) = validation_carve_out(&refs, mix(&[seed, 3]))?;
    let pick = |ids: &[usize]| -> Vec<VisitSequence> {
        ids.iter()
            .filter_map(|id| train.iter().find(|s| s.seq_id == *id).cloned())
            .collect()
    };
    let (fit, val) = (pick(&fit_ids), pick(&val_ids));
    Ok(PreparedFold {
        fold: split.fold_index,
        norm,
        filler,
        fit,
        val,
        test,
    })
}

/// Input transform shared by training and test sequences.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub features: FeatureMask,
    /// Keep only the last `k` input visits.
    pub history_k: Option<usize>,
}

pub fn encode_variant(seqs: &[VisitSequence], variant: &Variant) -> Result<Vec<EncodedSequence>> {
    seqs.iter()
        .map(|s| match variant.history_k {
            Some(k) => encode(&s.truncate_history(k)?, &variant.features),
            None => encode(s, &variant.features),
        })
        .collect()
}

/// Everything produced by one CV run of one configuration.
#[derive(Clone, Debug)]
pub struct CvRun {
    pub report: EvalReport,
    pub predictions: Vec<Prediction>,
    pub models: Vec<Model>,
    pub logs: Vec<TrainLog>,
}

/// Per-fold training seed.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    mix(&[seed, fold as u64])
}

/// Train and evaluate on every fold. Fold order in the result follows
/// `folds` regardless of `jobs`.
pub fn run_cv(
    folds: &[PreparedFold],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    variant: &Variant,
    jobs: usize,
) -> Result<CvRun> {
    let model_cfg = ModelConfig {
        features: variant.features.clone(),
        ..model_cfg.clone()
    };
    let one =
        |f: &PreparedFold| -> Result<(Model, TrainLog, Vec<Prediction>, Vec<super::EvalRow>)> {
            let fit = encode_variant(&f.fit, variant)?;
            let val = encode_variant(&f.val, variant)?;
            let test = encode_variant(&f.test, variant)?;
            let cfg = TrainConfig {
                seed: fold_seed(train_cfg.seed, f.fold),
                ..train_cfg.clone()
            };
            let (model, log) = train_model(&model_cfg, &cfg, &fit, &val)?;
            let (preds, rows) = evaluate(&model, f.fold, &test)?;
            Ok((model, log, preds, rows))
        };
    let results: Vec<_> = with_jobs(jobs, || {
        folds.par_iter().map(one).collect::<Result<Vec<_>>>()
    })?;
    let mut run = CvRun {
        report: EvalReport::new(model_cfg.kind.as_str()),
        predictions: Vec::new(),
        models: Vec::new(),
        logs: Vec::new(),
    };
    for (model, log, preds, rows) in results {
        run.models.push(model);
        run.logs.push(log);
        run.predictions.extend(preds);
        run.report.rows.extend(rows);
    }
    Ok(run)
}

/// Evaluate a fixed predictor on every fold's test split.
pub fn run_cv_fixed(
    folds: &[PreparedFold],
    predictor: &dyn Predictor,
    variant: &Variant,
) -> Result<CvRun> {
    let mut run = CvRun {
        report: EvalReport::new(predictor.name()),
        predictions: Vec::new(),
        models: Vec::new(),
        logs: Vec::new(),
    };
    for f in folds {
        let test = encode_variant(&f.test, variant)?;
        let (preds, rows) = evaluate(predictor, f.fold, &test)?;
        run.predictions.extend(preds);
        run.report.rows.extend(rows);
    }
    Ok(run)
}

/// Run `f` on a pool of `jobs` threads (1 means the current thread only).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
    {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
