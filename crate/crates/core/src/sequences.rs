//! Converter and stable sequences, groups, balancing and stratified folds.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{Diagnosis, SubjectHistory, VisitRecord};
use crate::error::{Error, Result};
use crate::preprocess::add_months_to_final;

/// Longest sequence kept (8 input visits plus the target).
pub const MAX_SEQUENCE_VISITS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Stable,
    Converter,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Stable => "stable",
            Label::Converter => "converter",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConversionKind {
    #[serde(rename = "CN->MCI")]
    CnToMci,
    #[serde(rename = "CN->AD")]
    CnToAd,
    #[serde(rename = "MCI->AD")]
    MciToAd,
}

impl ConversionKind {
    pub const ALL: [ConversionKind; 3] = [
        ConversionKind::CnToMci,
        ConversionKind::CnToAd,
        ConversionKind::MciToAd,
    ];

    pub fn from_pair(from: Diagnosis, to: Diagnosis) -> Option<Self> {
        match (from, to) {
            (Diagnosis::CN, Diagnosis::MCI) => Some(Self::CnToMci),
            (Diagnosis::CN, Diagnosis::AD) => Some(Self::CnToAd),
            (Diagnosis::MCI, Diagnosis::AD) => Some(Self::MciToAd),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CnToMci => "CN->MCI",
            Self::CnToAd => "CN->AD",
            Self::MciToAd => "MCI->AD",
        }
    }
}

impl fmt::Display for ConversionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `n` input visits followed by the target visit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitSequence {
    pub seq_id: usize,
    pub subject_id: String,
    pub visits: Vec<VisitRecord>,
    pub label: Label,
    pub conversion_kind: Option<ConversionKind>,
    pub group: usize,
    pub target_dx: Diagnosis,
}

impl VisitSequence {
    /// Build from visits with observed diagnoses; derives label, group and
    /// months-to-final.
    pub fn new(
        seq_id: usize,
        subject_id: impl Into<String>,
        mut visits: Vec<VisitRecord>,
    ) -> Result<Self> {
        add_months_to_final(&mut visits)?;
        let n = visits.len();
        let dx = |i: usize| {
            visits[i].diagnosis.ok_or_else(|| {
                Error::Precondition(format!(
                    "visit at month {} has no diagnosis",
                    visits[i].exam_month
                ))
            })
        };
        let (last, prev) = (dx(n - 1)?, dx(n - 2)?);
        let conversion_kind = ConversionKind::from_pair(prev, last);
        if conversion_kind.is_none() && last != prev {
            return Err(Error::Precondition(format!(
                "diagnosis decreases from {} to {} at the target visit",
                prev.as_str(),
                last.as_str()
            )));
        }
        Ok(Self {
            seq_id,
            subject_id: subject_id.into(),
            label: if conversion_kind.is_some() {
                Label::Converter
            } else {
                Label::Stable
            },
            conversion_kind,
            group: n - 1,
            target_dx: last,
            visits,
        })
    }

    pub fn penultimate_dx(&self) -> Diagnosis {
        self.visits[self.visits.len() - 2]
            .diagnosis
            .expect("checked at construction")
    }

    /// Keep the last `k` input visits and the target; months-to-final and
    /// the group are recomputed.
    pub fn truncate_history(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Precondition(
                "history length must be at least 1".into(),
            ));
        }
        let n = self.visits.len() - 1;
        if n <= k {
            return Ok(self.clone());
        }
        Self::new(
            self.seq_id,
            self.subject_id.clone(),
            self.visits[n - k..].to_vec(),
        )
    }
}

/// One sequence per subject: the prefix ending at the first conversion if
/// there is one, else the full history, keeping at most the last
/// [`MAX_SEQUENCE_VISITS`] visits. Sequence ids follow input order.
pub fn extract_sequences(histories: &[SubjectHistory]) -> Result<Vec<VisitSequence>> {
    let mut out = Vec::with_capacity(histories.len());
    for (id, h) in histories.iter().enumerate() {
        if h.visits.len() < 2 {
            return Err(Error::Precondition(format!(
                "subject {} has fewer than 2 visits",
                h.subject_id
            )));
        }
        let mut end = h.visits.len();
        for i in 1..h.visits.len() {
            let (a, b) = (h.visits[i - 1].diagnosis, h.visits[i].diagnosis);
            if let (Some(a), Some(b)) = (a, b) {
                if b > a {
                    end = i + 1;
                    break;
                }
            }
        }
        let start = end.saturating_sub(MAX_SEQUENCE_VISITS);
        out.push(VisitSequence::new(
            id,
            h.subject_id.clone(),
            h.visits[start..end].to_vec(),
        )?);
    }
    Ok(out)
}

/// Within each group, discard uniformly chosen stable sequences until there
/// are no more stable than converter sequences. Input order is preserved.
pub fn balance(sequences: &[VisitSequence], seed: u64) -> Vec<VisitSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_group: BTreeMap<usize, (Vec<usize>, usize)> = BTreeMap::new();
    for (i, s) in sequences.iter().enumerate() {
        let e = by_group.entry(s.group).or_default();
        match s.label {
            Label::Stable => e.0.push(i),
            Label::Converter => e.1 += 1,
        }
    }
    let mut keep = vec![true; sequences.len()];
    for (_, (mut stable, n_conv)) in by_group {
        if stable.len() <= n_conv {
            continue;
        }
        stable.shuffle(&mut rng);
        for &i in &stable[n_conv..] {
            keep[i] = false;
        }
    }
    sequences
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(s, _)| s.clone())
        .collect()
}

/// Per-group stable count equals converter count wherever converters exist,
/// and no group has surplus stable sequences.
pub fn check_balanced(sequences: &[VisitSequence]) -> Result<()> {
    for row in count_summary(sequences).rows {
        if row.stable > row.converter {
            return Err(Error::Contract(format!(
                "group {} has {} stable and {} converter sequences",
                row.group, row.stable, row.converter
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub fold_index: usize,
    /// Sequence ids, ascending.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Group-stratified k-fold assignment.
///
/// Within each group, sequences are shuffled and dealt round-robin starting
/// at a fold offset that advances by the group size, so every fold tests
/// `⌊count/k⌋` or `⌈count/k⌉` sequences of each group. Groups smaller than
/// `k` appear in the test set of some folds only.
pub fn stratified_kfold(
    sequences: &[VisitSequence],
    k: usize,
    seed: u64,
) -> Result<Vec<DatasetSplit>> {
    let groups: Vec<usize> = sequences.iter().map(|s| s.group).collect();
    let ids: Vec<usize> = sequences.iter().map(|s| s.seq_id).collect();
    stratified_kfold_ids(&ids, &groups, k, seed)
}

pub fn stratified_kfold_ids(
    ids: &[usize],
    groups: &[usize],
    k: usize,
    seed: u64,
) -> Result<Vec<DatasetSplit>> {
    if k < 2 {
        return Err(Error::Precondition(format!(
            "k must be at least 2, got {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&id, &g) in ids.iter().zip(groups) {
        by_group.entry(g).or_default().push(id);
    }
    let mut fold_of: Vec<(usize, usize)> = Vec::with_capacity(ids.len());
    let mut offset = 0;
    for (_, mut members) in by_group {
        members.sort_unstable();
        members.shuffle(&mut rng);
        for (i, &id) in members.iter().enumerate() {
            fold_of.push((id, (offset + i) % k));
        }
        offset = (offset + members.len()) % k;
    }
    fold_of.sort_unstable();
    Ok((0..k)
        .map(|f| {
            let (test, train): (Vec<_>, Vec<_>) = fold_of.iter().partition(|(_, fold)| *fold == f);
            DatasetSplit {
                fold_index: f,
                train: train.into_iter().map(|(id, _)| id).collect(),
                test: test.into_iter().map(|(id, _)| id).collect(),
            }
        })
        .collect())
}

/// Hold out fold 0 of a group-stratified 10-fold split of `train` for
/// early stopping. Returns `(fit, validation)` ids.
pub fn validation_carve_out(
    train: &[&VisitSequence],
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let ids: Vec<usize> = train.iter().map(|s| s.seq_id).collect();
    let groups: Vec<usize> = train.iter().map(|s| s.group).collect();
    let split = stratified_kfold_ids(&ids, &groups, 10, seed)?.swap_remove(0);
    Ok((split.train, split.test))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub group: usize,
    pub stable: usize,
    pub converter: usize,
    pub cn_to_mci: usize,
    pub cn_to_ad: usize,
    pub mci_to_ad: usize,
    /// Target diagnosis counts, indexed by severity.
    pub target: [usize; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountSummary {
    /// Ascending by group; only groups that occur.
    pub rows: Vec<GroupCounts>,
}

impl CountSummary {
    pub fn total(&self) -> GroupCounts {
        let mut t = GroupCounts::default();
        for r in &self.rows {
            t.stable += r.stable;
            t.converter += r.converter;
            t.cn_to_mci += r.cn_to_mci;
            t.cn_to_ad += r.cn_to_ad;
            t.mci_to_ad += r.mci_to_ad;
            for i in 0..3 {
                t.target[i] += r.target[i];
            }
        }
        t
    }
}

pub fn count_summary(sequences: &[VisitSequence]) -> CountSummary {
    let mut map: BTreeMap<usize, GroupCounts> = BTreeMap::new();
    for s in sequences {
        let r = map.entry(s.group).or_insert_with(|| GroupCounts {
            group: s.group,
            ..Default::default()
        });
        match s.label {
            Label::Stable => r.stable += 1,
            Label::Converter => r.converter += 1,
        }
        match s.conversion_kind {
            Some(ConversionKind::CnToMci) => r.cn_to_mci += 1,
            Some(ConversionKind::CnToAd) => r.cn_to_ad += 1,
            Some(ConversionKind::MciToAd) => r.mci_to_ad += 1,
            None => {}
        }
        r.target[s.target_dx.index()] += 1;
    }
    CountSummary {
        rows: map.into_values().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Diagnosis::*;

    fn history(id: &str, dx: &[Diagnosis]) -> SubjectHistory {
        SubjectHistory::new(
            id,
            dx.iter()
                .enumerate()
                .map(|(i, &d)| VisitRecord::new(id, i as i32 * 6, Some(d)))
                .collect(),
        )
    }

    fn seq(id: usize, group: usize, label: Label) -> VisitSequence {
        let mut dx = vec![CN; group];
        dx.push(if label == Label::Converter { MCI } else { CN });
        let h = history("s", &dx);
        VisitSequence::new(id, "s", h.visits).unwrap()
    }

    #[test]
    fn converter_sequence_from_definition() {
        let s = &extract_sequences(&[history("a", &[CN, CN, MCI])]).unwrap()[0];
        assert_eq!(s.label, Label::Converter);
        assert_eq!(s.group, 2);
        assert_eq!(s.conversion_kind, Some(ConversionKind::CnToMci));
        assert_eq!(s.target_dx, MCI);
    }

    #[test]
    fn stable_sequence_from_definition() {
        let s = &extract_sequences(&[history("a", &[AD, AD, AD, AD])]).unwrap()[0];
        assert_eq!(s.label, Label::Stable);
        assert_eq!(s.group, 3);
        assert_eq!(s.conversion_kind, None);
        assert_eq!(s.target_dx, AD);
    }

    #[test]
    fn converter_sequence_ends_at_conversion() {
        let s = &extract_sequences(&[history("a", &[CN, MCI, MCI])]).unwrap()[0];
        assert_eq!(s.label, Label::Converter);
        assert_eq!(s.group, 1);
        assert_eq!(s.visits.len(), 2);
    }

    #[test]
    fn long_histories_keep_last_nine_visits() {
        let s = &extract_sequences(&[history("a", &[MCI; 12])]).unwrap()[0];
        assert_eq!(s.group, 8);
        assert_eq!(s.visits[0].exam_month, 18);
        assert_eq!(s.visits[0].months_to_final, Some(48.0));
    }

    #[test]
    fn cn_to_ad_is_a_converter() {
        let s = &extract_sequences(&[history("a", &[CN, AD])]).unwrap()[0];
        assert_eq!(s.conversion_kind, Some(ConversionKind::CnToAd));
    }

    #[test]
    fn balance_discards_surplus_stable_only() {
        let mut v: Vec<VisitSequence> = (0..10).map(|i| seq(i, 2, Label::Stable)).collect();
        v.extend((10..14).map(|i| seq(i, 2, Label::Converter)));
        v.extend((14..17).map(|i| seq(i, 3, Label::Stable)));
        v.extend((17..22).map(|i| seq(i, 3, Label::Converter)));
        v.extend((22..25).map(|i| seq(i, 4, Label::Stable)));
        let b = balance(&v, 1);
        let c = count_summary(&b);
        let g: Vec<(usize, usize, usize)> = c
            .rows
            .iter()
            .map(|r| (r.group, r.stable, r.converter))
            .collect();
        assert_eq!(g, vec![(2, 4, 4), (3, 3, 5)]);
        assert_eq!(balance(&v, 1), b);
        assert_ne!(balance(&v, 2), b);
        check_balanced(&b).unwrap();
        assert!(check_balanced(&v).is_err());
    }

    #[test]
    fn kfold_shares() {
        let v: Vec<VisitSequence> = (0..20).map(|i| seq(i, 1, Label::Stable)).collect();
        let f = stratified_kfold(&v, 10, 0).unwrap();
        assert!(f.iter().all(|s| s.test.len() == 2 && s.train.len() == 18));

        let v: Vec<VisitSequence> = (0..23).map(|i| seq(i, 1, Label::Stable)).collect();
        let f = stratified_kfold(&v, 10, 0).unwrap();
        assert!(f.iter().all(|s| (2..=3).contains(&s.test.len())));
        assert_eq!(f.iter().map(|s| s.test.len()).sum::<usize>(), 23);
        assert!(stratified_kfold(&v, 1, 0).is_err());
    }

    #[test]
    fn kfold_small_group_tested_once() {
        let v: Vec<VisitSequence> = (0..3).map(|i| seq(i, 5, Label::Stable)).collect();
        let f = stratified_kfold(&v, 10, 4).unwrap();
        let mut seen: Vec<usize> = f.iter().flat_map(|s| s.test.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn empty_summary() {
        assert_eq!(count_summary(&[]).total(), GroupCounts::default());
    }

    #[test]
    fn truncation_keeps_target() {
        let s = seq(0, 4, Label::Converter);
        let t = s.truncate_history(1).unwrap();
        assert_eq!(t.visits.len(), 2);
        assert_eq!(t.group, 1);
        assert_eq!(t.label, s.label);
        assert_eq!(t.visits.last(), s.visits.last());
        assert_eq!(t.visits[0].months_to_final, Some(6.0));
        assert_eq!(s.truncate_history(4).unwrap(), s);
        assert_eq!(s.truncate_history(9).unwrap(), s);
    }
}
