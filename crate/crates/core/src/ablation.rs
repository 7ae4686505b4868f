//! Visit-history truncation and feature-category ablation studies.

use serde::{Deserialize, Serialize};

use crate::data_model::{FeatureCategory, N_FEATURES};
use crate::error::{Error, Result};
use crate::models::{EncodedSequence, FeatureMask, ModelConfig};
use crate::sequences::VisitSequence;
use crate::train_eval::stats::{mean, sample_std};
use crate::train_eval::{run_cv, EvalReport, PreparedFold, Subset, TrainConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    RemoveCategory,
    IsolateCategory,
    HistoryLastK,
}

impl AblationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationKind::RemoveCategory => "remove_category",
            AblationKind::IsolateCategory => "isolate_category",
            AblationKind::HistoryLastK => "history_last_k",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub kind: AblationKind,
    #[serde(default)]
    pub category: Option<FeatureCategory>,
    #[serde(default)]
    pub k: Option<usize>,
}

impl AblationSpec {
    pub fn remove(category: FeatureCategory) -> Self {
        Self {
            kind: AblationKind::RemoveCategory,
            category: Some(category),
            k: None,
        }
    }

    pub fn isolate(category: FeatureCategory) -> Self {
        Self {
            kind: AblationKind::IsolateCategory,
            category: Some(category),
            k: None,
        }
    }

    pub fn last_k(k: usize) -> Self {
        Self {
            kind: AblationKind::HistoryLastK,
            category: None,
            k: Some(k),
        }
    }

    /// The history and feature studies in report order.
    pub fn default_suite() -> Vec<Self> {
        let mut v = vec![Self::last_k(4), Self::last_k(1)];
        v.extend(FeatureCategory::ALL.map(Self::remove));
        v.extend(FeatureCategory::ALL.map(Self::isolate));
        v
    }

    /// `path` names the spec in config errors.
    pub fn validate(&self, path: &str) -> Result<()> {
        match self.kind {
            AblationKind::RemoveCategory | AblationKind::IsolateCategory => {
                if self.category.is_none() {
                    return Err(Error::config(
                        format!("{path}.category"),
                        "required for this kind",
                    ));
                }
                if self.k.is_some() {
                    return Err(Error::config(
                        format!("{path}.k"),
                        "only valid for history_last_k",
                    ));
                }
            }
            AblationKind::HistoryLastK => {
                match self.k {
                    None => {
                        return Err(Error::config(
                            format!("{path}.k"),
                            "required for history_last_k",
                        ))
                    }
                    Some(0) => {
                        return Err(Error::config(format!("{path}.k"), "must be at least 1"))
                    }
                    Some(_) => {}
                }
                if self.category.is_some() {
                    return Err(Error::config(
                        format!("{path}.category"),
                        "not valid for history_last_k",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn detail(&self) -> String {
        match (self.kind, self.category, self.k) {
            (AblationKind::HistoryLastK, _, Some(k)) => format!("last {k} visits"),
            (AblationKind::RemoveCategory, Some(c), _) => format!("without {c}"),
            (AblationKind::IsolateCategory, Some(c), _) => format!("only {c}"),
            _ => String::from("invalid"),
        }
    }

    pub fn variant(&self) -> Result<Variant> {
        self.validate("ablation")?;
        Ok(match self.kind {
            AblationKind::HistoryLastK => Variant {
                features: FeatureMask::all(),
                history_k: self.k,
            },
            kind => Variant {
                features: category_mask(kind, self.category.expect("validated"))?,
                history_k: None,
            },
        })
    }
}

fn category_mask(kind: AblationKind, category: FeatureCategory) -> Result<FeatureMask> {
    match kind {
        AblationKind::RemoveCategory => Ok(FeatureMask::remove(category)),
        AblationKind::IsolateCategory => Ok(FeatureMask::isolate(category)),
        AblationKind::HistoryLastK => Err(Error::Precondition(
            "history_last_k is not a feature mask".into(),
        )),
    }
}

/// Drop the feature channels selected by `kind`/`category` from sequences
/// encoded with all features. Diagnosis and time channels are kept.
pub fn apply_feature_mask(
    seqs: &[EncodedSequence],
    kind: AblationKind,
    category: FeatureCategory,
) -> Result<Vec<EncodedSequence>> {
    let mask = category_mask(kind, category)?;
    let full = FeatureMask::all().input_dim();
    seqs.iter()
        .map(|s| {
            if s.visits.iter().any(|v| v.len() != full) {
                return Err(Error::Precondition(format!(
                    "sequence {} is not encoded with all {N_FEATURES} features",
                    s.seq_id
                )));
            }
            let visits = s
                .visits
                .iter()
                .map(|v| {
                    let mut x = v[..3].to_vec();
                    x.extend(mask.kept.iter().map(|&j| v[3 + j]));
                    x.push(v[full - 1]);
                    x
                })
                .collect();
            Ok(EncodedSequence {
                visits,
                ..s.clone()
            })
        })
        .collect()
}

/// Keep only the last `k` input visits and the target.
pub fn truncate_history(seq: &VisitSequence, k: usize) -> Result<VisitSequence> {
    seq.truncate_history(k)
}

/// Percent change of `ablated` relative to `baseline`.
pub fn pct_change(ablated: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::Precondition(format!(
            "baseline must be positive, got {baseline}"
        )));
    }
    Ok(100.0 * (ablated - baseline) / baseline)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub spec_kind: String,
    pub detail: String,
    pub mean_bca: f64,
    pub std_bca: f64,
    pub pct_change_vs_baseline: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOutcome {
    pub baseline_mean_bca: f64,
    pub baseline_std_bca: f64,
    pub rows: Vec<AblationRow>,
    pub reports: Vec<EvalReport>,
}

fn overall_bca(report: &EvalReport) -> Result<(f64, f64)> {
    let v = report.fold_values(Subset::Overall, None, "bca");
    if v.is_empty() {
        return Err(Error::Precondition(format!(
            "report for {} has no overall BCA",
            report.model
        )));
    }
    Ok((mean(&v), sample_std(&v)))
}

/// Retrain and evaluate one full CV per spec on the baseline's folds and
/// seeds, reporting overall BCA against `baseline`.
pub fn run_ablation_suite(
    specs: &[AblationSpec],
    folds: &[PreparedFold],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    baseline: &EvalReport,
    jobs: usize,
) -> Result<AblationOutcome> {
    for (i, s) in specs.iter().enumerate() {
        s.validate(&format!("ablation.specs[{i}]"))?;
    }
    let (base_mean, base_std) = overall_bca(baseline)?;
    let mut out = AblationOutcome {
        baseline_mean_bca: base_mean,
        baseline_std_bca: base_std,
        rows: Vec::new(),
        reports: Vec::new(),
    };
    for spec in specs {
        let run = run_cv(folds, model_cfg, train_cfg, &spec.variant()?, jobs)?;
        let (m, s) = overall_bca(&run.report)?;
        out.rows.push(AblationRow {
            spec_kind: spec.kind.as_str().to_string(),
            detail: spec.detail(),
            mean_bca: m,
            std_bca: s,
            pct_change_vs_baseline: pct_change(m, base_mean)?,
        });
        out.reports.push(run.report);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::category_indices;

    #[test]
    fn pct_change_values() {
        assert_eq!(pct_change(0.874, 0.874).unwrap(), 0.0);
        assert!((pct_change(0.830, 0.874).unwrap() - (-5.034324942791762)).abs() < 1e-12);
        assert!(pct_change(0.5, 0.0).is_err());
        assert!(pct_change(0.6, 0.8).unwrap() < pct_change(0.7, 0.8).unwrap());
    }

    #[test]
    fn spec_validation() {
        assert!(AblationSpec::last_k(0).validate("a").is_err());
        let bad = AblationSpec {
            kind: AblationKind::RemoveCategory,
            category: None,
            k: None,
        };
        let err = bad.validate("ablation.specs[2]").unwrap_err().to_string();
        assert!(err.contains("ablation.specs[2].category"), "{err}");
        for s in AblationSpec::default_suite() {
            s.validate("a").unwrap();
        }
    }

    #[test]
    fn channel_counts() {
        let all = FeatureMask::all();
        let seq = EncodedSequence {
            seq_id: 0,
            subject_id: "s".into(),
            group: 1,
            label: crate::sequences::Label::Stable,
            target: crate::data_model::Diagnosis::CN,
            penultimate: crate::data_model::Diagnosis::CN,
            visits: vec![(0..all.input_dim()).map(|i| i as f64).collect(); 2],
            months: vec![0, 6],
            months_to_final: vec![6.0, 0.0],
        };
        let removed = apply_feature_mask(
            std::slice::from_ref(&seq),
            AblationKind::RemoveCategory,
            FeatureCategory::Cognitive,
        )
        .unwrap();
        assert_eq!(removed[0].visits[0].len() - 4, 12);
        let mri = apply_feature_mask(
            std::slice::from_ref(&seq),
            AblationKind::IsolateCategory,
            FeatureCategory::Mri,
        )
        .unwrap();
        assert_eq!(mri[0].visits[0].len() - 4, 7);
        // channels carry their canonical index + 3, time channel stays last
        let first_mri = category_indices(FeatureCategory::Mri)[0];
        assert_eq!(mri[0].visits[0][3], (first_mri + 3) as f64);
        assert_eq!(
            *mri[0].visits[0].last().unwrap(),
            (all.input_dim() - 1) as f64
        );
        for c in FeatureCategory::ALL {
            let (r, i) = (FeatureMask::remove(c).kept, FeatureMask::isolate(c).kept);
            assert!(r.iter().all(|x| !i.contains(x)));
            assert_eq!(r.len() + i.len(), N_FEATURES);
        }
    }
}
