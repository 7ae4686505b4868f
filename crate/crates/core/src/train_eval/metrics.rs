//! Classification metrics.
//!
//! Undefined ratios (zero denominators) evaluate to 0; callers that need to
//! know use [`ConfusionMatrix::degenerate_classes`].

use serde::{Deserialize, Serialize};

/// Square count matrix; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Self {
        let n = rows.len();
        assert!(
            rows.iter().all(|r| r.len() == n),
            "confusion matrix must be square"
        );
        Self { counts: rows }
    }

    pub fn from_labels(classes: usize, truth: &[usize], predicted: &[usize]) -> Self {
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.add(t, p);
        }
        cm
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn tp(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    fn fn_(&self, c: usize) -> u64 {
        self.counts[c].iter().sum::<u64>() - self.tp(c)
    }

    fn fp(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum::<u64>() - self.tp(c)
    }

    fn tn(&self, c: usize) -> u64 {
        self.total() - self.tp(c) - self.fn_(c) - self.fp(c)
    }

    /// Classes whose sensitivity or specificity has a zero denominator.
    pub fn degenerate_classes(&self) -> Vec<usize> {
        (0..self.classes())
            .filter(|&c| self.tp(c) + self.fn_(c) == 0 || self.tn(c) + self.fp(c) == 0)
            .collect()
    }
}

/// `TP / (TP + FN)`
pub fn sensitivity(cm: &ConfusionMatrix, class: usize) -> f64 {
    ratio(cm.tp(class), cm.tp(class) + cm.fn_(class))
}

/// `TN / (TN + FP)`
pub fn specificity(cm: &ConfusionMatrix, class: usize) -> f64 {
    ratio(cm.tn(class), cm.tn(class) + cm.fp(class))
}

pub fn precision(cm: &ConfusionMatrix, class: usize) -> f64 {
    ratio(cm.tp(class), cm.tp(class) + cm.fp(class))
}

/// Mean over classes of `(sens + spec) / 2`.
pub fn bca(cm: &ConfusionMatrix) -> f64 {
    let c = cm.classes();
    (0..c)
        .map(|i| (sensitivity(cm, i) + specificity(cm, i)) / 2.0)
        .sum::<f64>()
        / c as f64
}

pub fn mean_sensitivity(cm: &ConfusionMatrix) -> f64 {
    (0..cm.classes()).map(|i| sensitivity(cm, i)).sum::<f64>() / cm.classes() as f64
}

pub fn mean_specificity(cm: &ConfusionMatrix) -> f64 {
    (0..cm.classes()).map(|i| specificity(cm, i)).sum::<f64>() / cm.classes() as f64
}

pub fn f1(cm: &ConfusionMatrix, class: usize) -> f64 {
    let (p, r) = (precision(cm, class), sensitivity(cm, class));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    (0..cm.classes()).map(|i| f1(cm, i)).sum::<f64>() / cm.classes() as f64
}

/// `trace / total`, 0 for an empty matrix.
pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    ratio((0..cm.classes()).map(|i| cm.tp(i)).sum(), cm.total())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mauc {
    /// `None` when fewer than two classes are present.
    pub value: Option<f64>,
    /// Class pairs skipped because a class was absent.
    pub skipped_pairs: usize,
}

/// Midranks (1-based) of `values`.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// `Â(i|j)`: probability that a class-`i` sample scores higher on column `i`
/// than a class-`j` sample, ties counting one half.
fn a_hat(scores: &[Vec<f64>], labels: &[usize], i: usize, j: usize) -> f64 {
    let mut vals = Vec::new();
    let mut is_i = Vec::new();
    for (s, &l) in scores.iter().zip(labels) {
        if l == i || l == j {
            vals.push(s[i]);
            is_i.push(l == i);
        }
    }
    let ranks = midranks(&vals);
    let n_i = is_i.iter().filter(|&&b| b).count() as f64;
    let n_j = vals.len() as f64 - n_i;
    let s_i: f64 = ranks
        .iter()
        .zip(&is_i)
        .filter(|(_, &b)| b)
        .map(|(r, _)| r)
        .sum();
    (s_i - n_i * (n_i + 1.0) / 2.0) / (n_i * n_j)
}

/// Hand–Till multiclass AUC over `classes` classes. `scores[k][c]` is the
/// score of sample `k` for class `c`.
pub fn mauc(scores: &[Vec<f64>], labels: &[usize], classes: usize) -> Mauc {
    let mut present = vec![false; classes];
    for &l in labels {
        present[l] = true;
    }
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for i in 0..classes {
        for j in i + 1..classes {
            if !(present[i] && present[j]) {
                skipped += 1;
                continue;
            }
            sum += (a_hat(scores, labels, i, j) + a_hat(scores, labels, j, i)) / 2.0;
            used += 1;
        }
    }
    Mauc {
        value: (used > 0).then(|| sum / used as f64),
        skipped_pairs: skipped,
    }
}
