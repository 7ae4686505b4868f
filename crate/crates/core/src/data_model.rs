//! Domain types shared by every stage: diagnoses, the fixed feature universe,
//! visits and subject histories.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Clinical diagnosis, ordered by severity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Diagnosis {
    CN,
    MCI,
    AD,
}

impl Diagnosis {
    pub const ALL: [Diagnosis; 3] = [Diagnosis::CN, Diagnosis::MCI, Diagnosis::AD];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Diagnosis::CN => "CN",
            Diagnosis::MCI => "MCI",
            Diagnosis::AD => "AD",
        }
    }

    /// Parse a DX cell. Legacy TADPOLE labels `NL` and `Dementia` are
    /// accepted; an empty cell is `Ok(None)`.
    pub fn parse(s: &str) -> Result<Option<Self>, String> {
        match s.trim() {
            "" => Ok(None),
            "CN" | "NL" => Ok(Some(Diagnosis::CN)),
            "MCI" => Ok(Some(Diagnosis::MCI)),
            "AD" | "Dementia" => Ok(Some(Diagnosis::AD)),
            other => Err(format!("unknown diagnosis `{other}`")),
        }
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureCategory {
    Cognitive,
    #[serde(rename = "MRI")]
    Mri,
    Biomarker,
}

impl FeatureCategory {
    pub const ALL: [FeatureCategory; 3] = [
        FeatureCategory::Cognitive,
        FeatureCategory::Mri,
        FeatureCategory::Biomarker,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureCategory::Cognitive => "Cognitive",
            FeatureCategory::Mri => "MRI",
            FeatureCategory::Biomarker => "Biomarker",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cognitive" => Some(FeatureCategory::Cognitive),
            "mri" => Some(FeatureCategory::Mri),
            "biomarker" | "biomarkers" => Some(FeatureCategory::Biomarker),
            _ => None,
        }
    }
}

impl fmt::Display for FeatureCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureSpec {
    pub key: &'static str,
    pub category: FeatureCategory,
    pub population_mean: f64,
    pub population_std: f64,
    pub missingness_target: f64,
}

const fn spec(
    key: &'static str,
    category: FeatureCategory,
    population_mean: f64,
    population_std: f64,
    missing_pct: f64,
) -> FeatureSpec {
    FeatureSpec {
        key,
        category,
        population_mean,
        population_std,
        missingness_target: missing_pct / 100.0,
    }
}

pub const N_FEATURES: usize = 22;

/// Observed fraction of visits without a clinical diagnosis.
pub const DX_MISSINGNESS: f64 = 0.3011;

use FeatureCategory::{Biomarker, Cognitive, Mri};

/// The closed feature universe, in canonical column order.
pub const FEATURES: [FeatureSpec; N_FEATURES] = [
    spec("CDRSB", Cognitive, 1.83, 2.29, 29.64),
    spec("ADAS11", Cognitive, 10.74, 7.76, 30.05),
    spec("ADAS13", Cognitive, 16.62, 10.68, 30.72),
    spec("MMSE", Cognitive, 26.92, 3.5, 29.88),
    spec("RAVLT_immediate", Cognitive, 35.08, 13.24, 30.67),
    spec("RAVLT_learning", Cognitive, 4.14, 2.81, 30.67),
    spec("RAVLT_forgetting", Cognitive, 4.26, 2.55, 30.88),
    spec("RAVLT_perc_forgetting", Cognitive, 58.73, 37.57, 31.43),
    spec("MOCA", Cognitive, 23.52, 4.18, 61.01),
    spec("FAQ", Cognitive, 4.65, 6.96, 29.40),
    spec("Ventricles", Mri, 42119.98, 23274.12, 41.56),
    spec("Hippocampus", Mri, 6684.54, 1224.13, 46.61),
    spec("WholeBrain", Mri, 1010781.21, 111280.94, 39.65),
    spec("Entorhinal", Mri, 3455.9, 801.46, 49.22),
    spec("Fusiform", Mri, 17117.41, 2798.63, 49.22),
    spec("MidTemp", Mri, 19206.76, 3098.07, 49.22),
    spec("ICV", Mri, 1534699.07, 164732.93, 37.57),
    spec("FDG", Biomarker, 1.21, 0.16, 73.69),
    spec("AV45", Biomarker, 1.19, 0.22, 83.38),
    spec("ABETA", Biomarker, 1052.48, 502.57, 81.40),
    spec("TAU", Biomarker, 288.67, 105.95, 81.45),
    spec("PTAU", Biomarker, 27.59, 11.7, 81.38),
];

pub fn feature_index(key: &str) -> Option<usize> {
    FEATURES.iter().position(|f| f.key == key)
}

/// Indices of the features in `category`, in canonical order.
pub fn category_indices(category: FeatureCategory) -> Vec<usize> {
    (0..N_FEATURES)
        .filter(|&i| FEATURES[i].category == category)
        .collect()
}

/// Integer month count for a calendar month; the day is discarded.
pub fn month_index(year: i32, month: u32) -> i32 {
    year * 12 + month as i32 - 1
}

/// One clinical visit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub subject_id: String,
    pub exam_month: i32,
    pub diagnosis: Option<Diagnosis>,
    pub features: BTreeMap<String, Option<f64>>,
    pub months_to_final: Option<f64>,
}

impl VisitRecord {
    /// Visit with every feature key present and absent-valued.
    pub fn new(
        subject_id: impl Into<String>,
        exam_month: i32,
        diagnosis: Option<Diagnosis>,
    ) -> Self {
        Self {
            subject_id: subject_id.into(),
            exam_month,
            diagnosis,
            features: FEATURES.iter().map(|f| (f.key.to_string(), None)).collect(),
            months_to_final: None,
        }
    }

    /// Value of the feature at canonical index `i`.
    pub fn feature(&self, i: usize) -> Option<f64> {
        self.features.get(FEATURES[i].key).copied().flatten()
    }

    pub fn set_feature(&mut self, i: usize, v: Option<f64>) {
        self.features.insert(FEATURES[i].key.to_string(), v);
    }

    /// All 22 values in canonical order.
    pub fn dense_features(&self) -> [Option<f64>; N_FEATURES] {
        std::array::from_fn(|i| self.feature(i))
    }

    pub fn missing_count(&self) -> usize {
        (0..N_FEATURES)
            .filter(|&i| self.feature(i).is_none())
            .count()
    }
}

/// A subject's visits sorted by `exam_month`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectHistory {
    pub subject_id: String,
    pub visits: Vec<VisitRecord>,
}

impl SubjectHistory {
    pub fn new(subject_id: impl Into<String>, visits: Vec<VisitRecord>) -> Self {
        Self {
            subject_id: subject_id.into(),
            visits,
        }
    }

    pub fn diagnoses(&self) -> Vec<Option<Diagnosis>> {
        self.visits.iter().map(|v| v.diagnosis).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NoVisits,
    DuplicateExamMonth {
        month: i32,
    },
    UnsortedExamMonth {
        month: i32,
    },
    SubjectMismatch {
        found: String,
    },
    FeatureKeyMismatch {
        month: i32,
        missing: Vec<String>,
        extra: Vec<String>,
    },
    NegativeMonthsToFinal {
        month: i32,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoVisits => write!(f, "history has no visits"),
            Violation::DuplicateExamMonth { month } => write!(f, "duplicate exam_month {month}"),
            Violation::UnsortedExamMonth { month } => {
                write!(f, "exam_month {month} is out of order")
            }
            Violation::SubjectMismatch { found } => {
                write!(f, "visit belongs to subject `{found}`")
            }
            Violation::FeatureKeyMismatch {
                month,
                missing,
                extra,
            } => write!(
                f,
                "feature key set mismatch at month {month}: missing {missing:?}, extra {extra:?}"
            ),
            Violation::NegativeMonthsToFinal { month } => {
                write!(f, "negative months_to_final at month {month}")
            }
        }
    }
}

/// Every invariant violation in `h`; an empty list means the history is valid.
pub fn validate_history(h: &SubjectHistory) -> Vec<Violation> {
    let mut out = Vec::new();
    if h.visits.is_empty() {
        out.push(Violation::NoVisits);
    }
    for (i, v) in h.visits.iter().enumerate() {
        if v.subject_id != h.subject_id {
            out.push(Violation::SubjectMismatch {
                found: v.subject_id.clone(),
            });
        }
        if i > 0 {
            let prev = h.visits[i - 1].exam_month;
            if v.exam_month == prev {
                out.push(Violation::DuplicateExamMonth {
                    month: v.exam_month,
                });
            } else if v.exam_month < prev {
                out.push(Violation::UnsortedExamMonth {
                    month: v.exam_month,
                });
            }
        }
        let missing: Vec<String> = FEATURES
            .iter()
            .filter(|f| !v.features.contains_key(f.key))
            .map(|f| f.key.to_string())
            .collect();
        let extra: Vec<String> = v
            .features
            .keys()
            .filter(|k| feature_index(k).is_none())
            .cloned()
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            out.push(Violation::FeatureKeyMismatch {
                month: v.exam_month,
                missing,
                extra,
            });
        }
        if v.months_to_final.is_some_and(|m| m < 0.0) {
            out.push(Violation::NegativeMonthsToFinal {
                month: v.exam_month,
            });
        }
    }
    out
}
