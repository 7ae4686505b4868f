//! Cleaning rules, the months-to-final temporal feature, per-fold z-scoring
//! and model-based imputation.

mod fill;

pub use fill::{bootstrap_fill, model_fill, model_fill_visits, Filler, FillerConfig};

use serde::{Deserialize, Serialize};

use crate::data_model::{Diagnosis, SubjectHistory, VisitRecord, N_FEATURES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    /// Subjects dropped for having a single visit, including those reduced
    /// to one visit by missing-diagnosis removal.
    pub dropped_single_visit_subjects: usize,
    pub dropped_reverter_subjects: usize,
    pub truncated_multi_converters: usize,
    pub dropped_missing_dx_visits: usize,
}

impl CleanReport {
    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        format!(
            "dropped_single_visit_subjects={}\ndropped_reverter_subjects={}\ntruncated_multi_converters={}\ndropped_missing_dx_visits={}\n",
            self.dropped_single_visit_subjects,
            self.dropped_reverter_subjects,
            self.truncated_multi_converters,
            self.dropped_missing_dx_visits
        )
    }
}

fn observed_dx(h: &SubjectHistory) -> impl Iterator<Item = (usize, Diagnosis)> + '_ {
    h.visits
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.diagnosis.map(|d| (i, d)))
}

fn is_reverter(h: &SubjectHistory) -> bool {
    let dx: Vec<Diagnosis> = observed_dx(h).map(|(_, d)| d).collect();
    dx.windows(2).any(|w| w[1] < w[0])
}

/// Visit indices where the observed diagnosis increases.
fn conversion_visits(h: &SubjectHistory) -> Vec<usize> {
    let obs: Vec<(usize, Diagnosis)> = observed_dx(h).collect();
    obs.windows(2)
        .filter(|w| w[1].1 > w[0].1)
        .map(|w| w[1].0)
        .collect()
}

/// Apply the four cleaning steps in order, then drop subjects left with a
/// single visit.
///
/// 1. drop subjects with one visit;
/// 2. drop reverters (observed diagnosis ever decreases);
/// 3. for subjects with more than one increase, keep visits up to and
///    including the first conversion;
/// 4. drop visits without a diagnosis.
pub fn clean(histories: &[SubjectHistory]) -> (Vec<SubjectHistory>, CleanReport) {
    let mut report = CleanReport::default();
    let mut out = Vec::with_capacity(histories.len());
    for h in histories {
        if h.visits.len() < 2 {
            report.dropped_single_visit_subjects += 1;
            continue;
        }
        if is_reverter(h) {
            report.dropped_reverter_subjects += 1;
            continue;
        }
        let mut h = h.clone();
        let conv = conversion_visits(&h);
        if conv.len() > 1 {
            h.visits.truncate(conv[0] + 1);
            report.truncated_multi_converters += 1;
        }
        let before = h.visits.len();
        h.visits.retain(|v| v.diagnosis.is_some());
        report.dropped_missing_dx_visits += before - h.visits.len();
        if h.visits.len() < 2 {
            report.dropped_single_visit_subjects += 1;
            continue;
        }
        out.push(h);
    }
    (out, report)
}

/// Set each visit's months until the last visit of `visits`.
pub fn add_months_to_final(visits: &mut [VisitRecord]) -> Result<()> {
    if visits.len() < 2 {
        return Err(Error::Precondition(format!(
            "months-to-final needs at least 2 visits, got {}",
            visits.len()
        )));
    }
    let last = visits[visits.len() - 1].exam_month;
    for v in visits.iter_mut() {
        v.months_to_final = Some(f64::from(last - v.exam_month));
    }
    Ok(())
}

/// Per-feature mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
}

impl NormStats {
    /// Fit on present values. Features without values get mean 0; constant
    /// or empty features get std 1.
    pub fn fit<'a>(visits: impl IntoIterator<Item = &'a VisitRecord>) -> Self {
        let mut sum = [0.0; N_FEATURES];
        let mut sq = [0.0; N_FEATURES];
        let mut n = [0usize; N_FEATURES];
        let visits: Vec<&VisitRecord> = visits.into_iter().collect();
        for v in &visits {
            for j in 0..N_FEATURES {
                if let Some(x) = v.feature(j) {
                    sum[j] += x;
                    n[j] += 1;
                }
            }
        }
        let mean: [f64; N_FEATURES] =
            std::array::from_fn(|j| if n[j] > 0 { sum[j] / n[j] as f64 } else { 0.0 });
        for v in &visits {
            for j in 0..N_FEATURES {
                if let Some(x) = v.feature(j) {
                    sq[j] += (x - mean[j]).powi(2);
                }
            }
        }
        let std = std::array::from_fn(|j| {
            let s = if n[j] > 0 {
                (sq[j] / n[j] as f64).sqrt()
            } else {
                0.0
            };
            if s > 0.0 && s.is_finite() {
                s
            } else {
                1.0
            }
        });
        Self { mean, std }
    }

    pub fn fit_histories(histories: &[SubjectHistory]) -> Self {
        Self::fit(histories.iter().flat_map(|h| &h.visits))
    }

    pub fn apply(&self, visits: &mut [VisitRecord]) {
        for v in visits {
            for j in 0..N_FEATURES {
                if let Some(x) = v.feature(j) {
                    v.set_feature(j, Some((x - self.mean[j]) / self.std[j]));
                }
            }
        }
    }

    pub fn unapply(&self, visits: &mut [VisitRecord]) {
        for v in visits {
            for j in 0..N_FEATURES {
                if let Some(x) = v.feature(j) {
                    v.set_feature(j, Some(x * self.std[j] + self.mean[j]));
                }
            }
        }
    }

    pub fn apply_histories(&self, histories: &[SubjectHistory]) -> Vec<SubjectHistory> {
        let mut out = histories.to_vec();
        for h in &mut out {
            self.apply(&mut h.visits);
        }
        out
    }
}
