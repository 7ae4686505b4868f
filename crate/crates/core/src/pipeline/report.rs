//! Collate stage outputs into table- and figure-shaped CSVs under
//! `report/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;

use super::{BalanceMode, Run};
use crate::data_model::{feature_index, Diagnosis, FeatureCategory};
use crate::error::{Error, Result};
use crate::sequences::{count_summary, VisitSequence};
use crate::train_eval::stats::{linreg_slope, mann_whitney_u};

#[derive(Debug, Deserialize)]
struct SummaryRow {
    dataset: String,
    model: String,
    subset: String,
    group: String,
    metric: String,
    mean: f64,
    std: f64,
}

#[derive(Debug, Deserialize)]
struct AblationCsvRow {
    spec_kind: String,
    detail: String,
    mean_bca: f64,
    pct_change_vs_baseline: f64,
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    model: String,
    seq_id: usize,
    target: String,
    predicted: String,
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

fn pm(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.3}")
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Groups up to this size count as short histories.
const SHORT_HISTORY_MAX_GROUP: usize = 4;

/// Write the report tables. Model-comparison tables collate `summary.csv`
/// from both `raw/` and `balanced/` when present (at least one is needed);
/// ablation tables and prediction tests use the configured dataset.
pub fn report(run: &Run) -> Result<Vec<PathBuf>> {
    let mut summary: Vec<SummaryRow> = Vec::new();
    for mode in [BalanceMode::Raw, BalanceMode::Balanced] {
        let p = run.path(&format!("{}/summary.csv", mode.as_str()));
        if p.exists() {
            summary.extend(read_rows::<SummaryRow>(&p)?);
        }
    }
    if summary.is_empty() {
        return Err(Error::Precondition(format!(
            "no summary.csv under {}/raw or {}/balanced; run `evaluate` first",
            run.cfg.output_dir.display(),
            run.cfg.output_dir.display()
        )));
    }
    let mut datasets: Vec<String> = Vec::new();
    let mut models: Vec<String> = Vec::new();
    for r in &summary {
        if !datasets.contains(&r.dataset) {
            datasets.push(r.dataset.clone());
        }
        if !models.contains(&r.model) {
            models.push(r.model.clone());
        }
    }
    let lookup = |dataset: &str, model: &str, subset: &str, group: &str, metric: &str| {
        summary.iter().find(|r| {
            r.dataset == dataset
                && r.model == model
                && r.subset == subset
                && r.group == group
                && r.metric == metric
        })
    };
    let mut out = Vec::new();

    let rel = "report/table_mauc_f1.csv";
    let mut w = run.csv(rel)?;
    w.write_record([
        "dataset",
        "model",
        "mauc",
        "f1",
        "mauc_mean",
        "mauc_std",
        "f1_mean",
        "f1_std",
    ])?;
    for dataset in &datasets {
        for m in &models {
            let (Some(a), Some(f)) = (
                lookup(dataset, m, "overall", "all", "mauc"),
                lookup(dataset, m, "overall", "all", "f1"),
            ) else {
                continue;
            };
            w.write_record([
                dataset.clone(),
                m.clone(),
                pm(a.mean, a.std),
                pm(f.mean, f.std),
                a.mean.to_string(),
                a.std.to_string(),
                f.mean.to_string(),
                f.std.to_string(),
            ])?;
        }
    }
    w.flush()?;
    out.push(run.path(rel));

    let rel = "report/table_performance.csv";
    let mut w = run.csv(rel)?;
    let mut head = vec![
        String::from("dataset"),
        String::from("subset"),
        String::from("metric"),
    ];
    head.extend(models.iter().cloned());
    w.write_record(&head)?;
    for dataset in &datasets {
        for subset in ["overall", "stable", "converter"] {
            for (metric, label) in [
                ("accuracy", "Acc."),
                ("bca", "BCA"),
                ("sensitivity", "Sens."),
                ("specificity", "Spec."),
            ] {
                let mut rec = vec![dataset.clone(), subset.to_string(), label.to_string()];
                rec.extend(models.iter().map(|m| {
                    lookup(dataset, m, subset, "all", metric)
                        .map_or_else(String::new, |r| pm(r.mean, r.std))
                }));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    out.push(run.path(rel));

    for subset in ["overall", "stable", "converter"] {
        let rel = format!("report/fig_bca_by_group_{subset}.csv");
        let mut w = run.csv(&rel)?;
        w.write_record(["dataset", "group", "model", "mean_bca", "std_bca"])?;
        let mut rows: Vec<(usize, usize, usize, &SummaryRow)> = summary
            .iter()
            .filter(|r| r.subset == subset && r.metric == "bca" && r.group != "all")
            .filter_map(|r| {
                let g = r.group.parse().ok()?;
                let di = datasets.iter().position(|d| *d == r.dataset)?;
                let mi = models.iter().position(|m| *m == r.model)?;
                Some((di, g, mi, r))
            })
            .collect();
        rows.sort_by_key(|(di, g, mi, _)| (*di, *g, *mi));
        for (_, g, _, r) in rows {
            w.write_record([
                r.dataset.clone(),
                g.to_string(),
                r.model.clone(),
                r.mean.to_string(),
                r.std.to_string(),
            ])?;
        }
        w.flush()?;
        out.push(run.path(&rel));
    }

    let (cleaned, _) = run.cleaned()?;
    let mut per_mode = Vec::new();
    for mode in [BalanceMode::Raw, BalanceMode::Balanced] {
        per_mode.push((mode, run.sequences_for(&cleaned, mode)?));
    }
    let rel = "report/fig_group_distribution.csv";
    let mut w = run.csv(rel)?;
    w.write_record(["dataset", "group", "stable", "converter"])?;
    for (mode, seqs) in &per_mode {
        for r in count_summary(seqs).rows {
            w.write_record([
                mode.as_str().to_string(),
                r.group.to_string(),
                r.stable.to_string(),
                r.converter.to_string(),
            ])?;
        }
    }
    w.flush()?;
    out.push(run.path(rel));

    let rel = "report/fig_future_dx.csv";
    let mut w = run.csv(rel)?;
    w.write_record(["dataset", "group", "CN", "MCI", "AD"])?;
    for (mode, seqs) in &per_mode {
        for r in count_summary(seqs).rows {
            w.write_record([
                mode.as_str().to_string(),
                r.group.to_string(),
                r.target[0].to_string(),
                r.target[1].to_string(),
                r.target[2].to_string(),
            ])?;
        }
    }
    w.flush()?;
    out.push(run.path(rel));

    let seqs = per_mode
        .into_iter()
        .find(|(m, _)| *m == run.cfg.balance)
        .map(|(_, s)| s)
        .unwrap_or_default();
    out.extend(adas13_outputs(run, &seqs, &cleaned)?);

    let ablation_path = run.path(&run.dataset_rel("ablation.csv"));
    if ablation_path.exists() {
        let rows: Vec<AblationCsvRow> = read_rows(&ablation_path)?;
        for (rel, kind, col) in [
            (
                "report/table_history_ablation.csv",
                "history_last_k",
                "visit_history",
            ),
            (
                "report/table_feature_removal.csv",
                "remove_category",
                "feature_set_removed",
            ),
            (
                "report/table_feature_isolation.csv",
                "isolate_category",
                "feature_set_used",
            ),
        ] {
            let mut w = run.csv(rel)?;
            w.write_record([col, "bca", "pct_change"])?;
            for r in rows.iter().filter(|r| r.spec_kind == kind) {
                w.write_record([
                    table_label(&r.detail),
                    format!("{:.3}", r.mean_bca),
                    format!("{:.3}%", r.pct_change_vs_baseline),
                ])?;
            }
            w.flush()?;
            out.push(run.path(rel));
        }
    }
    Ok(out)
}

fn table_label(detail: &str) -> String {
    let name = detail
        .strip_prefix("without ")
        .or_else(|| detail.strip_prefix("only "))
        .unwrap_or(detail);
    match FeatureCategory::parse(name) {
        Some(FeatureCategory::Cognitive) => "Cognitive Scores".into(),
        Some(FeatureCategory::Mri) => "Volumetric MRI".into(),
        Some(FeatureCategory::Biomarker) => "Biomarkers".into(),
        None => match detail {
            "last 1 visits" => "Last Visit Only".into(),
            d => d
                .strip_prefix("last ")
                .and_then(|r| r.strip_suffix(" visits"))
                .map_or_else(|| d.to_string(), |k| format!("Last <= {k} Visits")),
        },
    }
}

/// Per-sequence ADAS13 slopes by history length, and the penultimate
/// ADAS13 of AD targets predicted as MCI against all AD visits.
fn adas13_outputs(
    run: &Run,
    seqs: &[VisitSequence],
    cleaned: &[crate::data_model::SubjectHistory],
) -> Result<Vec<PathBuf>> {
    let j = feature_index("ADAS13").expect("ADAS13 is a known feature");
    let mut out = Vec::new();
    let (mut short, mut long) = (Vec::new(), Vec::new());
    let rel = "report/adas13_slopes.csv";
    let mut w = run.csv(rel)?;
    w.write_record(["seq_id", "group", "history", "n_points", "slope_per_month"])?;
    for s in seqs {
        let pts: Vec<(f64, f64)> = s
            .visits
            .iter()
            .filter_map(|v| v.feature(j).map(|x| (f64::from(v.exam_month), x)))
            .collect();
        let (months, values): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
        let Ok(slope) = linreg_slope(&values, &months) else {
            continue;
        };
        let is_short = s.group <= SHORT_HISTORY_MAX_GROUP;
        if is_short { &mut short } else { &mut long }.push(slope);
        w.write_record([
            s.seq_id.to_string(),
            s.group.to_string(),
            if is_short { "short" } else { "long" }.to_string(),
            pts.len().to_string(),
            slope.to_string(),
        ])?;
    }
    w.flush()?;
    out.push(run.path(rel));

    let mut tests: Vec<(String, Vec<f64>, Vec<f64>)> =
        vec![("slope_short_vs_long".into(), short, long)];
    let pred_path = run.path(&run.dataset_rel("predictions.csv"));
    if pred_path.exists() {
        let preds: Vec<PredictionRow> = read_rows(&pred_path)?;
        let model = preds
            .iter()
            .map(|p| p.model.as_str())
            .find(|m| *m == "transformer")
            .or_else(|| preds.first().map(|p| p.model.as_str()))
            .map(str::to_string);
        if let Some(model) = model {
            let by_id: BTreeMap<usize, &VisitSequence> =
                seqs.iter().map(|s| (s.seq_id, s)).collect();
            let missed: Vec<f64> = preds
                .iter()
                .filter(|p| p.model == model && p.target == "AD" && p.predicted == "MCI")
                .filter_map(|p| by_id.get(&p.seq_id))
                .filter_map(|s| s.visits[s.visits.len() - 2].feature(j))
                .collect();
            let ad: Vec<f64> = cleaned
                .iter()
                .flat_map(|h| &h.visits)
                .filter(|v| v.diagnosis == Some(Diagnosis::AD))
                .filter_map(|v| v.feature(j))
                .collect();
            tests.push((
                format!("{model}_ad_predicted_mci_penultimate_vs_ad_visits"),
                missed,
                ad,
            ));
        }
    }
    let rel = "report/adas13_tests.csv";
    let mut w = run.csv(rel)?;
    w.write_record([
        "comparison",
        "n_a",
        "n_b",
        "median_a",
        "median_b",
        "u",
        "z",
        "p",
    ])?;
    for (name, a, b) in tests {
        let mut rec = vec![name, a.len().to_string(), b.len().to_string()];
        match mann_whitney_u(&a, &b) {
            Ok(r) => rec.extend([
                median(&a).to_string(),
                median(&b).to_string(),
                r.u.to_string(),
                r.z.to_string(),
                r.p.to_string(),
            ]),
            Err(_) => rec.extend(std::iter::repeat_n(String::new(), 5)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    out.push(run.path(rel));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels() {
        assert_eq!(table_label("last 4 visits"), "Last <= 4 Visits");
        assert_eq!(table_label("last 1 visits"), "Last Visit Only");
        assert_eq!(table_label("without Cognitive"), "Cognitive Scores");
        assert_eq!(table_label("only MRI"), "Volumetric MRI");
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
    }
}
