//! Per-fold evaluation broken down by subset and group, and fold
//! aggregation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::metrics::{self, ConfusionMatrix};
use super::stats::{mean, sample_std};
use crate::data_model::Diagnosis;
use crate::error::Result;
use crate::models::{predicted_class, EncodedSequence, Predictor};
use crate::sequences::Label;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub fold: usize,
    pub seq_id: usize,
    pub subject_id: String,
    pub group: usize,
    pub label: Label,
    pub target: Diagnosis,
    pub penultimate: Diagnosis,
    pub proba: [f64; 3],
    pub predicted: Diagnosis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Overall,
    Stable,
    Converter,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Overall, Subset::Stable, Subset::Converter];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Overall => "overall",
            Subset::Stable => "stable",
            Subset::Converter => "converter",
        }
    }

    pub fn contains(self, label: Label) -> bool {
        match self {
            Subset::Overall => true,
            Subset::Stable => label == Label::Stable,
            Subset::Converter => label == Label::Converter,
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub n: usize,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub bca: f64,
    /// Mean over classes.
    pub sensitivity: f64,
    pub specificity: f64,
    pub sens: [f64; 3],
    pub spec: [f64; 3],
    pub f1: f64,
    /// Absent when fewer than two target classes occur.
    pub mauc: Option<f64>,
    /// Classes with an undefined sensitivity or specificity (reported as 0).
    pub degenerate_classes: Vec<usize>,
    pub mauc_skipped_pairs: usize,
}

impl MetricSet {
    /// `None` for an empty subset.
    pub fn compute(preds: &[&Prediction]) -> Option<Self> {
        if preds.is_empty() {
            return None;
        }
        let truth: Vec<usize> = preds.iter().map(|p| p.target.index()).collect();
        let guess: Vec<usize> = preds.iter().map(|p| p.predicted.index()).collect();
        let cm = ConfusionMatrix::from_labels(3, &truth, &guess);
        let scores: Vec<Vec<f64>> = preds.iter().map(|p| p.proba.to_vec()).collect();
        let m = metrics::mauc(&scores, &truth, 3);
        Some(Self {
            n: preds.len(),
            accuracy: metrics::accuracy(&cm),
            bca: metrics::bca(&cm),
            sensitivity: metrics::mean_sensitivity(&cm),
            specificity: metrics::mean_specificity(&cm),
            sens: std::array::from_fn(|c| metrics::sensitivity(&cm, c)),
            spec: std::array::from_fn(|c| metrics::specificity(&cm, c)),
            f1: metrics::macro_f1(&cm),
            mauc: m.value,
            degenerate_classes: cm.degenerate_classes(),
            mauc_skipped_pairs: m.skipped_pairs,
            confusion: cm,
        })
    }

    /// `(name, value)` pairs; an absent mAUC is omitted.
    pub fn values(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("n", self.n as f64),
            ("accuracy", self.accuracy),
            ("bca", self.bca),
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
            ("f1", self.f1),
        ];
        if let Some(m) = self.mauc {
            v.push(("mauc", m));
        }
        let names = [
            ("sens_cn", "spec_cn"),
            ("sens_mci", "spec_mci"),
            ("sens_ad", "spec_ad"),
        ];
        for (c, (s, p)) in names.iter().enumerate() {
            v.push((s, self.sens[c]));
            v.push((p, self.spec[c]));
        }
        v
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.values()
            .into_iter()
            .find(|(k, _)| *k == metric)
            .map(|(_, v)| v)
    }

    /// Flag text for the report; empty when nothing is degenerate.
    pub fn flags(&self) -> String {
        let mut f = Vec::new();
        if !self.degenerate_classes.is_empty() {
            let names: Vec<&str> = self
                .degenerate_classes
                .iter()
                .map(|&c| Diagnosis::ALL[c].as_str())
                .collect();
            f.push(format!("degenerate:{}", names.join("|")));
        }
        if self.mauc.is_none() {
            f.push("mauc_absent".to_string());
        } else if self.mauc_skipped_pairs > 0 {
            f.push(format!("mauc_skipped_pairs:{}", self.mauc_skipped_pairs));
        }
        f.join(";")
    }
}

/// One cell of the breakdown: `group == None` means all groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub fold: usize,
    pub subset: Subset,
    pub group: Option<usize>,
    /// `None` when the subset is empty.
    pub metrics: Option<MetricSet>,
}

/// Rows for every subset, overall and per group present in `preds`.
pub fn breakdown(fold: usize, preds: &[Prediction]) -> Vec<EvalRow> {
    let mut groups: Vec<usize> = preds.iter().map(|p| p.group).collect();
    groups.sort_unstable();
    groups.dedup();
    let mut rows = Vec::new();
    for subset in Subset::ALL {
        let sel: Vec<&Prediction> = preds.iter().filter(|p| subset.contains(p.label)).collect();
        rows.push(EvalRow {
            fold,
            subset,
            group: None,
            metrics: MetricSet::compute(&sel),
        });
        for &g in &groups {
            let sel_g: Vec<&Prediction> = sel.iter().copied().filter(|p| p.group == g).collect();
            rows.push(EvalRow {
                fold,
                subset,
                group: Some(g),
                metrics: MetricSet::compute(&sel_g),
            });
        }
    }
    rows
}

/// Predict once per sequence and break the predictions down.
pub fn evaluate(
    model: &dyn Predictor,
    fold: usize,
    test: &[EncodedSequence],
) -> Result<(Vec<Prediction>, Vec<EvalRow>)> {
    let probs = model.predict_proba(test)?;
    let preds: Vec<Prediction> = test
        .iter()
        .zip(probs)
        .map(|(s, p)| Prediction {
            fold,
            seq_id: s.seq_id,
            subject_id: s.subject_id.clone(),
            group: s.group,
            label: s.label,
            target: s.target,
            penultimate: s.penultimate,
            predicted: predicted_class(&p),
            proba: p,
        })
        .collect();
    let rows = breakdown(fold, &preds);
    Ok((preds, rows))
}

/// Rows from every fold of one model on one dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub rows: Vec<EvalRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub subset: Subset,
    pub group: Option<usize>,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_folds: usize,
}

impl EvalReport {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            rows: Vec::new(),
        }
    }

    /// Fold values of one metric, ascending by fold; folds where the cell is
    /// absent are skipped.
    pub fn fold_values(&self, subset: Subset, group: Option<usize>, metric: &str) -> Vec<f64> {
        let mut v: Vec<(usize, f64)> = self
            .rows
            .iter()
            .filter(|r| r.subset == subset && r.group == group)
            .filter_map(|r| {
                r.metrics
                    .as_ref()
                    .and_then(|m| m.get(metric))
                    .map(|x| (r.fold, x))
            })
            .collect();
        v.sort_by_key(|(f, _)| *f);
        v.into_iter().map(|(_, x)| x).collect()
    }

    /// Mean and sample std over folds for every (subset, group, metric).
    pub fn aggregate(&self) -> Vec<Aggregate> {
        let mut keys: BTreeMap<(Subset, Option<usize>), ()> = BTreeMap::new();
        for r in &self.rows {
            keys.insert((r.subset, r.group), ());
        }
        let mut out = Vec::new();
        for (subset, group) in keys.into_keys() {
            for metric in METRIC_ORDER {
                let v = self.fold_values(subset, group, metric);
                if v.is_empty() {
                    continue;
                }
                out.push(Aggregate {
                    subset,
                    group,
                    metric: metric.to_string(),
                    mean: mean(&v),
                    std: sample_std(&v),
                    n_folds: v.len(),
                });
            }
        }
        out
    }

    pub fn mean_of(&self, subset: Subset, metric: &str) -> Option<f64> {
        let v = self.fold_values(subset, None, metric);
        (!v.is_empty()).then(|| mean(&v))
    }
}

/// Metric names in report order.
pub const METRIC_ORDER: [&str; 13] = [
    "n",
    "accuracy",
    "bca",
    "sensitivity",
    "specificity",
    "f1",
    "mauc",
    "sens_cn",
    "spec_cn",
    "sens_mci",
    "spec_mci",
    "sens_ad",
    "spec_ad",
];
