//! Config-driven runs: every stage recomputes its inputs from the cohort
//! source and the global seed, and writes CSV outputs whose first line is
//! `# config_hash=<hex> seed=<n>`.

mod report;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dxf_numcore::rng::mix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use report::report;

use crate::ablation::{run_ablation_suite, AblationSpec};
use crate::data_model::{Diagnosis, SubjectHistory, FEATURES};
use crate::error::{Error, Result};
use crate::ingest::{corrupt_diagnoses, write_csv, CohortSource, SynthConfig};
use crate::models::{strip_comment_lines, Model, ModelConfig, ModelKind, StabilityBaseline};
use crate::preprocess::{clean, model_fill, CleanReport, Filler, FillerConfig, NormStats};
use crate::sequences::{
    balance, check_balanced, count_summary, extract_sequences, stratified_kfold,
    validation_carve_out, DatasetSplit, VisitSequence,
};
use crate::train_eval::cv::{
    assemble_fold, fold_norm, prepare_fold, run_cv, run_cv_fixed, standard_stats, with_jobs,
};
use crate::train_eval::stats::welch_t_test;
use crate::train_eval::{
    CvRun, EvalReport, Prediction, PreparedFold, Subset, TrainConfig, Variant, METRIC_ORDER,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BalanceMode {
    #[default]
    Raw,
    Balanced,
}

impl BalanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BalanceMode::Raw => "raw",
            BalanceMode::Balanced => "balanced",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "raw" => Some(BalanceMode::Raw),
            "balanced" => Some(BalanceMode::Balanced),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub model: ModelKind,
    pub specs: Vec<AblationSpec>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Transformer,
            specs: AblationSpec::default_suite(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub global_seed: u64,
    pub source: CohortSource,
    /// Fraction of diagnoses masked after loading.
    pub dx_missing_fraction: f64,
    pub balance: BalanceMode,
    pub models: Vec<ModelKind>,
    pub k_folds: usize,
    pub output_dir: PathBuf,
    pub jobs: usize,
    /// Shared by all models; `kind` is set per model.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub filler: FillerConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            global_seed: 0,
            source: CohortSource::Synthetic(SynthConfig::default()),
            dx_missing_fraction: 0.0,
            balance: BalanceMode::Raw,
            models: ModelKind::ALL.to_vec(),
            k_folds: 10,
            output_dir: PathBuf::from("out"),
            jobs: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            filler: FillerConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(
                if path == "." {
                    String::from("<root>")
                } else {
                    path
                },
                e.into_inner().message().trim(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if let CohortSource::Synthetic(s) = &self.source {
            s.validate()?;
        }
        if !(0.0..1.0).contains(&self.dx_missing_fraction) {
            return Err(Error::config("dx_missing_fraction", "must be in [0, 1)"));
        }
        if self.models.is_empty() {
            return Err(Error::config("models", "must name at least one model"));
        }
        for (i, m) in self.models.iter().enumerate() {
            if self.models[..i].contains(m) {
                return Err(Error::config(
                    format!("models[{i}]"),
                    format!("{} listed twice", m.as_str()),
                ));
            }
        }
        if self.k_folds < 2 {
            return Err(Error::config("k_folds", "must be at least 2"));
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs", "must be at least 1"));
        }
        for &kind in &self.models {
            self.model.clone().with_kind(kind).validate()?;
        }
        self.model
            .clone()
            .with_kind(self.ablation.model)
            .validate()?;
        self.train.validate()?;
        self.filler.validate()?;
        for (i, s) in self.ablation.specs.iter().enumerate() {
            s.validate(&format!("ablation.specs[{i}]"))?;
        }
        Ok(())
    }

    /// Apply `DXF_OUTPUT_DIR` and `DXF_JOBS` from `get`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(dir) = get("DXF_OUTPUT_DIR") {
            self.output_dir = PathBuf::from(dir);
        }
        if let Some(j) = get("DXF_JOBS") {
            self.jobs = j
                .trim()
                .parse()
                .ok()
                .filter(|&n: &usize| n > 0)
                .ok_or_else(|| {
                    Error::config("DXF_JOBS", format!("`{j}` is not a positive integer"))
                })?;
        }
        Ok(())
    }

    /// Hash of every setting that can change results (not output_dir or jobs).
    pub fn hash(&self) -> String {
        let canon = RunConfig {
            output_dir: PathBuf::new(),
            jobs: 0,
            ..self.clone()
        };
        let json = serde_json::to_string(&canon).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Seed for one stage: the first 8 bytes of SHA-256 over the global seed
/// (little endian) followed by the stage name.
pub fn stage_seed(global: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn fmt_group(g: Option<usize>) -> String {
    g.map_or_else(|| String::from("all"), |g| g.to_string())
}

/// A validated config with its output location.
pub struct Run {
    pub cfg: RunConfig,
    pub hash: String,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        Ok(Self { cfg, hash })
    }

    pub fn header(&self) -> String {
        format!("config_hash={} seed={}", self.hash, self.cfg.global_seed)
    }

    pub fn seed(&self, stage: &str) -> u64 {
        stage_seed(self.cfg.global_seed, stage)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.cfg.output_dir.join(rel)
    }

    /// `rel` under the directory of the configured dataset variant
    /// (`raw/` or `balanced/`).
    pub fn dataset_rel(&self, rel: &str) -> String {
        format!("{}/{rel}", self.cfg.balance.as_str())
    }

    fn create(&self, rel: &str) -> Result<BufWriter<File>> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(BufWriter::new(File::create(p)?))
    }

    /// CSV writer for `rel` with the header comment already written.
    pub fn csv(&self, rel: &str) -> Result<csv::Writer<BufWriter<File>>> {
        let mut f = self.create(rel)?;
        writeln!(f, "# {}", self.header())?;
        Ok(csv::Writer::from_writer(f))
    }

    // ---- data -----------------------------------------------------------

    pub fn cohort(&self) -> Result<Vec<SubjectHistory>> {
        let source = match &self.cfg.source {
            CohortSource::Synthetic(s) => CohortSource::Synthetic(SynthConfig {
                rng_seed: mix(&[self.seed("synth"), s.rng_seed]),
                ..s.clone()
            }),
            other => other.clone(),
        };
        let h = source.load()?;
        if self.cfg.dx_missing_fraction > 0.0 {
            corrupt_diagnoses(&h, self.cfg.dx_missing_fraction, self.seed("dx_missing"))
        } else {
            Ok(h)
        }
    }

    pub fn cleaned(&self) -> Result<(Vec<SubjectHistory>, CleanReport)> {
        Ok(clean(&self.cohort()?))
    }

    /// Unnormalized sequences for `mode`, with missing features left absent.
    pub fn sequences_for(
        &self,
        cleaned: &[SubjectHistory],
        mode: BalanceMode,
    ) -> Result<Vec<VisitSequence>> {
        let seqs = extract_sequences(cleaned)?;
        Ok(match mode {
            BalanceMode::Raw => seqs,
            BalanceMode::Balanced => {
                let b = balance(&seqs, self.seed("balance"));
                check_balanced(&b)?;
                b
            }
        })
    }

    pub fn dataset(&self) -> Result<Vec<VisitSequence>> {
        let (cleaned, _) = self.cleaned()?;
        self.sequences_for(&cleaned, self.cfg.balance)
    }

    pub fn folds(&self, seqs: &[VisitSequence]) -> Result<Vec<DatasetSplit>> {
        stratified_kfold(seqs, self.cfg.k_folds, self.seed("folds"))
    }

    fn fold_seed(&self, fold: usize) -> u64 {
        mix(&[self.seed("fold_prep"), fold as u64])
    }

    /// Normalize, train fillers, impute and carve out validation per fold.
    pub fn prepare(
        &self,
        seqs: &[VisitSequence],
        splits: &[DatasetSplit],
    ) -> Result<Vec<PreparedFold>> {
        with_jobs(self.cfg.jobs, || {
            splits
                .par_iter()
                .map(|s| prepare_fold(seqs, s, &self.cfg.filler, self.fold_seed(s.fold_index)))
                .collect()
        })
    }

    pub fn train_config(&self, kind: ModelKind) -> TrainConfig {
        let idx = ModelKind::ALL
            .iter()
            .position(|&k| k == kind)
            .expect("known kind") as u64;
        TrainConfig {
            seed: mix(&[self.seed("train"), idx, self.cfg.train.seed]),
            ..self.cfg.train.clone()
        }
    }

    fn filler_ckpt(&self, fold: usize) -> String {
        self.dataset_rel(&format!("checkpoints/filler_fold{fold}.ckpt"))
    }

    fn model_ckpt(&self, kind: ModelKind, fold: usize) -> String {
        self.dataset_rel(&format!("checkpoints/{}_fold{fold}.ckpt", kind.as_str()))
    }

    // ---- stages ---------------------------------------------------------

    /// Write the loaded cohort.
    pub fn synth(&self) -> Result<Vec<PathBuf>> {
        let h = self.cohort()?;
        let rel = "cohort.csv";
        let mut f = self.create(rel)?;
        write_csv(&mut f, &h, Some(&self.header()))?;
        f.flush()?;
        Ok(vec![self.path(rel)])
    }

    /// Clean the cohort and impute it with a filler trained on all of it.
    /// Fold runs do not use these outputs; they refit per fold.
    pub fn preprocess(&self) -> Result<Vec<PathBuf>> {
        let (cleaned, rep) = self.cleaned()?;
        let mut out = Vec::new();

        let mut f = self.create("cleaned.csv")?;
        write_csv(&mut f, &cleaned, Some(&self.header()))?;
        f.flush()?;
        out.push(self.path("cleaned.csv"));

        let mut f = self.create("clean_report.txt")?;
        writeln!(f, "# {}", self.header())?;
        f.write_all(rep.to_key_values().as_bytes())?;
        f.flush()?;
        out.push(self.path("clean_report.txt"));

        let norm = NormStats::fit_histories(&cleaned);
        let normed = norm.apply_histories(&cleaned);
        let seed = self.seed("preprocess_filler");
        let mut filler = Filler::new(self.cfg.filler.clone(), mix(&[seed, 1]))?;
        filler.train(&normed, &standard_stats(), mix(&[seed, 2]))?;
        let mut filled = model_fill(&normed, &filler, &standard_stats())?;
        for h in &mut filled {
            norm.unapply(&mut h.visits);
        }
        let mut f = self.create("filled.csv")?;
        write_csv(&mut f, &filled, Some(&self.header()))?;
        f.flush()?;
        out.push(self.path("filled.csv"));

        let mut w = self.csv("norm_stats.csv")?;
        w.write_record(["feature", "mean", "std"])?;
        for (j, spec) in FEATURES.iter().enumerate() {
            w.write_record([
                spec.key.to_string(),
                norm.mean[j].to_string(),
                norm.std[j].to_string(),
            ])?;
        }
        w.flush()?;
        out.push(self.path("norm_stats.csv"));
        Ok(out)
    }

    /// Sequence manifest, fold assignment and per-group counts.
    pub fn sequences(&self) -> Result<Vec<PathBuf>> {
        let seqs = self.dataset()?;
        let splits = self.folds(&seqs)?;
        let mut w = self.csv(&self.dataset_rel("sequences.csv"))?;
        w.write_record([
            "seq_id",
            "subject_id",
            "group",
            "label",
            "conversion_kind",
            "n_visits",
            "penultimate_dx",
            "target_dx",
            "first_month",
            "target_month",
        ])?;
        for s in &seqs {
            w.write_record([
                s.seq_id.to_string(),
                s.subject_id.clone(),
                s.group.to_string(),
                s.label.as_str().to_string(),
                s.conversion_kind
                    .map(|c| c.as_str().to_string())
                    .unwrap_or_default(),
                s.visits.len().to_string(),
                s.penultimate_dx().to_string(),
                s.target_dx.to_string(),
                s.visits[0].exam_month.to_string(),
                s.visits[s.visits.len() - 1].exam_month.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = self.csv(&self.dataset_rel("folds.csv"))?;
        w.write_record(["fold", "seq_id", "role"])?;
        for split in &splits {
            let train: Vec<&VisitSequence> = split
                .train
                .iter()
                .filter_map(|id| seqs.iter().find(|s| s.seq_id == *id))
                .collect();
            let (_, val) =
                validation_carve_out(&train, mix(&[self.fold_seed(split.fold_index), 3]))?;
            let mut rows: Vec<(usize, &str)> = split
                .train
                .iter()
                .map(|&id| (id, if val.contains(&id) { "val" } else { "fit" }))
                .chain(split.test.iter().map(|&id| (id, "test")))
                .collect();
            rows.sort_unstable();
            for (id, role) in rows {
                w.write_record([
                    split.fold_index.to_string(),
                    id.to_string(),
                    role.to_string(),
                ])?;
            }
        }
        w.flush()?;

        let mut w = self.csv(&self.dataset_rel("group_counts.csv"))?;
        w.write_record([
            "dataset",
            "group",
            "stable",
            "converter",
            "cn_to_mci",
            "cn_to_ad",
            "mci_to_ad",
            "target_cn",
            "target_mci",
            "target_ad",
        ])?;
        let summary = count_summary(&seqs);
        for r in summary.rows.iter().chain(std::iter::once(&summary.total())) {
            let g = if r.group == 0 {
                String::from("all")
            } else {
                r.group.to_string()
            };
            w.write_record([
                self.cfg.balance.as_str().to_string(),
                g,
                r.stable.to_string(),
                r.converter.to_string(),
                r.cn_to_mci.to_string(),
                r.cn_to_ad.to_string(),
                r.mci_to_ad.to_string(),
                r.target[0].to_string(),
                r.target[1].to_string(),
                r.target[2].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(["sequences.csv", "folds.csv", "group_counts.csv"]
            .iter()
            .map(|r| self.path(&self.dataset_rel(r)))
            .collect())
    }

    /// CV run for one model, with grid search over validation BCA when
    /// configured. Returns the run and the chosen configuration.
    pub fn fit_model(
        &self,
        kind: ModelKind,
        folds: &[PreparedFold],
    ) -> Result<(CvRun, ModelConfig, TrainConfig, Vec<GridRow>)> {
        let model_cfg = self.cfg.model.clone().with_kind(kind);
        let train_cfg = self.train_config(kind);
        let Some(grid) = &self.cfg.train.grid else {
            let run = run_cv(
                folds,
                &model_cfg,
                &train_cfg,
                &Variant::default(),
                self.cfg.jobs,
            )?;
            return Ok((run, model_cfg, train_cfg, Vec::new()));
        };
        let mut rows = Vec::new();
        let mut best: Option<(f64, CvRun, ModelConfig, TrainConfig)> = None;
        for (m, t) in grid.candidates(&model_cfg, &train_cfg) {
            let run = run_cv(folds, &m, &t, &Variant::default(), self.cfg.jobs)?;
            let vals: Vec<f64> = run.logs.iter().filter_map(|l| l.best_val_bca).collect();
            let score = if vals.is_empty() {
                f64::NEG_INFINITY
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            rows.push(GridRow {
                model: kind.as_str().to_string(),
                lr: t.lr,
                hidden_dim: m.hidden_dim,
                d_ffn: m.d_ffn,
                mean_val_bca: score,
                selected: false,
            });
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, run, m, t));
            }
        }
        let (score, run, m, t) = best.expect("grid has candidates");
        for r in &mut rows {
            r.selected = r.lr == t.lr
                && r.hidden_dim == m.hidden_dim
                && r.d_ffn == m.d_ffn
                && r.mean_val_bca == score;
        }
        Ok((run, m, t, rows))
    }

    /// Train every configured model on every fold and save checkpoints.
    pub fn train(&self) -> Result<Vec<PathBuf>> {
        let seqs = self.dataset()?;
        let splits = self.folds(&seqs)?;
        let folds = self.prepare(&seqs, &splits)?;
        let mut out = Vec::new();
        for f in &folds {
            let rel = self.filler_ckpt(f.fold);
            let text = format!(
                "# {}\n{}",
                self.header(),
                serde_json::to_string(&f.filler.config)
                    .map_err(|e| Error::Format(e.to_string()))?
            );
            let bytes = dxf_numcore::encode_checkpoint(&text, &f.filler.params)?;
            fs::create_dir_all(self.path(&self.dataset_rel("checkpoints")))?;
            fs::write(self.path(&rel), bytes)?;
            out.push(self.path(&rel));
        }
        let mut log = self.csv(&self.dataset_rel("train_log.csv"))?;
        log.write_record(["model", "fold", "epoch", "train_loss", "val_bca", "kept"])?;
        let mut grid_rows = Vec::new();
        for &kind in &self.cfg.models {
            let (run, _, _, rows) = self.fit_model(kind, &folds)?;
            grid_rows.extend(rows);
            for (f, (model, tl)) in folds.iter().zip(run.models.iter().zip(&run.logs)) {
                let rel = self.model_ckpt(kind, f.fold);
                fs::write(
                    self.path(&rel),
                    model.checkpoint_bytes_with_header(Some(&self.header()))?,
                )?;
                out.push(self.path(&rel));
                for e in &tl.epochs {
                    log.write_record([
                        kind.as_str().to_string(),
                        f.fold.to_string(),
                        e.epoch.to_string(),
                        e.train_loss.to_string(),
                        e.val_bca.map(|v| v.to_string()).unwrap_or_default(),
                        (e.epoch == tl.best_epoch).to_string(),
                    ])?;
                }
            }
        }
        log.flush()?;
        out.push(self.path(&self.dataset_rel("train_log.csv")));
        if !grid_rows.is_empty() {
            let mut w = self.csv(&self.dataset_rel("grid.csv"))?;
            for r in grid_rows {
                w.serialize(r)?;
            }
            w.flush()?;
            out.push(self.path(&self.dataset_rel("grid.csv")));
        }
        Ok(out)
    }

    /// Checkpoint contents, rejected unless written under this config.
    fn read_checkpoint(&self, path: &Path) -> Result<(Vec<u8>, dxf_numcore::Checkpoint)> {
        let bytes = fs::read(path).map_err(|e| missing_checkpoint(path, e))?;
        let ck = dxf_numcore::decode_checkpoint(&bytes)?;
        let expected = format!("# {}", self.header());
        if ck.config.lines().next() != Some(expected.as_str()) {
            return Err(Error::Precondition(format!(
                "{} was written under a different config; run `train` again",
                path.display()
            )));
        }
        Ok((bytes, ck))
    }

    fn load_filler(&self, fold: usize) -> Result<Filler> {
        let path = self.path(&self.filler_ckpt(fold));
        let (_, ck) = self.read_checkpoint(&path)?;
        let cfg: FillerConfig = serde_json::from_str(strip_comment_lines(&ck.config))
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Filler::from_params(cfg, ck.params)
    }

    fn load_model(&self, kind: ModelKind, fold: usize) -> Result<Model> {
        let path = self.path(&self.model_ckpt(kind, fold));
        let (bytes, _) = self.read_checkpoint(&path)?;
        let m = Model::from_checkpoint_bytes(&bytes)?;
        if m.config.kind != kind {
            return Err(Error::Format(format!(
                "{} holds a {} model",
                path.display(),
                m.config.kind.as_str()
            )));
        }
        Ok(m)
    }

    /// Evaluate saved checkpoints (and the stability baseline) on every
    /// fold's test split; write long-form metrics, summary, p-values and
    /// predictions.
    pub fn evaluate(&self) -> Result<Vec<PathBuf>> {
        let seqs = self.dataset()?;
        let splits = self.folds(&seqs)?;
        let folds: Vec<PreparedFold> = splits
            .iter()
            .map(|s| {
                let norm = fold_norm(&seqs, s)?;
                assemble_fold(
                    &seqs,
                    s,
                    norm,
                    self.load_filler(s.fold_index)?,
                    self.fold_seed(s.fold_index),
                )
            })
            .collect::<Result<_>>()?;
        let mut runs = Vec::new();
        for &kind in &self.cfg.models {
            let mut run = CvRun {
                report: EvalReport::new(kind.as_str()),
                predictions: Vec::new(),
                models: Vec::new(),
                logs: Vec::new(),
            };
            for f in &folds {
                let m = self.load_model(kind, f.fold)?;
                let variant = Variant {
                    features: m.config.features.clone(),
                    history_k: None,
                };
                let r = run_cv_fixed(std::slice::from_ref(f), &m, &variant)?;
                run.report.rows.extend(r.report.rows);
                run.predictions.extend(r.predictions);
            }
            runs.push(run);
        }
        runs.push(run_cv_fixed(
            &folds,
            &StabilityBaseline,
            &Variant::default(),
        )?);
        self.write_evaluation(&runs)
    }

    pub fn write_evaluation(&self, runs: &[CvRun]) -> Result<Vec<PathBuf>> {
        let mut w = self.csv(&self.dataset_rel("eval.csv"))?;
        w.write_record([
            "dataset", "model", "fold", "subset", "group", "metric", "value", "flags",
        ])?;
        for run in runs {
            for row in &run.report.rows {
                let base = [
                    self.cfg.balance.as_str().to_string(),
                    run.report.model.clone(),
                    row.fold.to_string(),
                    row.subset.as_str().to_string(),
                    fmt_group(row.group),
                ];
                match &row.metrics {
                    None => {
                        let mut r = base.to_vec();
                        r.extend(["n".into(), "0".into(), "absent".into()]);
                        w.write_record(&r)?;
                    }
                    Some(m) => {
                        let flags = m.flags();
                        for name in METRIC_ORDER {
                            let (value, f) = match m.get(name) {
                                Some(v) => (v.to_string(), flags.clone()),
                                None => (String::new(), String::from("absent")),
                            };
                            let mut r = base.to_vec();
                            r.extend([name.to_string(), value, f]);
                            w.write_record(&r)?;
                        }
                    }
                }
            }
        }
        w.flush()?;

        let mut w = self.csv(&self.dataset_rel("summary.csv"))?;
        w.write_record([
            "dataset", "model", "subset", "group", "metric", "mean", "std", "n_folds",
        ])?;
        for run in runs {
            for a in run.report.aggregate() {
                w.write_record([
                    self.cfg.balance.as_str().to_string(),
                    run.report.model.clone(),
                    a.subset.as_str().to_string(),
                    fmt_group(a.group),
                    a.metric.clone(),
                    a.mean.to_string(),
                    a.std.to_string(),
                    a.n_folds.to_string(),
                ])?;
            }
        }
        w.flush()?;

        let mut w = self.csv(&self.dataset_rel("pvalues.csv"))?;
        w.write_record([
            "dataset", "subset", "group", "metric", "model_a", "model_b", "t", "df", "p", "flags",
        ])?;
        let mut cells: Vec<(Subset, Option<usize>)> = runs
            .iter()
            .flat_map(|r| r.report.rows.iter().map(|row| (row.subset, row.group)))
            .collect();
        cells.sort_unstable();
        cells.dedup();
        for (subset, group) in cells {
            for metric in [
                "accuracy",
                "bca",
                "sensitivity",
                "specificity",
                "f1",
                "mauc",
            ] {
                for i in 0..runs.len() {
                    for j in i + 1..runs.len() {
                        let a = runs[i].report.fold_values(subset, group, metric);
                        let b = runs[j].report.fold_values(subset, group, metric);
                        let mut rec = vec![
                            self.cfg.balance.as_str().to_string(),
                            subset.as_str().to_string(),
                            fmt_group(group),
                            metric.to_string(),
                            runs[i].report.model.clone(),
                            runs[j].report.model.clone(),
                        ];
                        match welch_t_test(&a, &b) {
                            Ok(r) => rec.extend([
                                r.t.to_string(),
                                r.df.to_string(),
                                r.p.to_string(),
                                if r.degenerate {
                                    "zero_variance".into()
                                } else {
                                    String::new()
                                },
                            ]),
                            Err(_) => rec.extend([
                                String::new(),
                                String::new(),
                                String::new(),
                                "insufficient_folds".into(),
                            ]),
                        }
                        w.write_record(&rec)?;
                    }
                }
            }
        }
        w.flush()?;

        let mut w = self.csv(&self.dataset_rel("predictions.csv"))?;
        w.write_record([
            "model",
            "fold",
            "seq_id",
            "subject_id",
            "group",
            "label",
            "penultimate",
            "target",
            "predicted",
            "p_cn",
            "p_mci",
            "p_ad",
        ])?;
        for run in runs {
            let mut preds: Vec<&Prediction> = run.predictions.iter().collect();
            preds.sort_by_key(|p| (p.fold, p.seq_id));
            for p in preds {
                w.write_record([
                    run.report.model.clone(),
                    p.fold.to_string(),
                    p.seq_id.to_string(),
                    p.subject_id.clone(),
                    p.group.to_string(),
                    p.label.as_str().to_string(),
                    p.penultimate.to_string(),
                    p.target.to_string(),
                    p.predicted.to_string(),
                    p.proba[Diagnosis::CN.index()].to_string(),
                    p.proba[Diagnosis::MCI.index()].to_string(),
                    p.proba[Diagnosis::AD.index()].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(
            ["eval.csv", "summary.csv", "pvalues.csv", "predictions.csv"]
                .iter()
                .map(|r| self.path(&self.dataset_rel(r)))
                .collect(),
        )
    }

    /// Baseline CV plus one retrained CV per ablation spec.
    pub fn ablate(&self) -> Result<Vec<PathBuf>> {
        let seqs = self.dataset()?;
        let splits = self.folds(&seqs)?;
        let folds = self.prepare(&seqs, &splits)?;
        let kind = self.cfg.ablation.model;
        let model_cfg = self.cfg.model.clone().with_kind(kind);
        let train_cfg = self.train_config(kind);
        let baseline = run_cv(
            &folds,
            &model_cfg,
            &train_cfg,
            &Variant::default(),
            self.cfg.jobs,
        )?;
        let outcome = run_ablation_suite(
            &self.cfg.ablation.specs,
            &folds,
            &model_cfg,
            &train_cfg,
            &baseline.report,
            self.cfg.jobs,
        )?;
        let mut w = self.csv(&self.dataset_rel("ablation.csv"))?;
        w.write_record([
            "model",
            "spec_kind",
            "detail",
            "mean_bca",
            "std_bca",
            "pct_change_vs_baseline",
        ])?;
        w.write_record([
            kind.as_str().to_string(),
            "baseline".into(),
            "all visits, all features".into(),
            outcome.baseline_mean_bca.to_string(),
            outcome.baseline_std_bca.to_string(),
            "0".into(),
        ])?;
        for r in &outcome.rows {
            w.write_record([
                kind.as_str().to_string(),
                r.spec_kind.clone(),
                r.detail.clone(),
                r.mean_bca.to_string(),
                r.std_bca.to_string(),
                r.pct_change_vs_baseline.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(vec![self.path(&self.dataset_rel("ablation.csv"))])
    }
}

fn missing_checkpoint(path: &Path, e: std::io::Error) -> Error {
    Error::Precondition(format!(
        "cannot read checkpoint {} ({e}); run `train` first",
        path.display()
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub model: String,
    pub lr: f64,
    pub hidden_dim: usize,
    pub d_ffn: usize,
    pub mean_val_bca: f64,
    pub selected: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_file() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.k_folds, 10);
    }

    #[test]
    fn config_errors_carry_field_paths() {
        let e = RunConfig::from_toml("[train]\nlr = \"fast\"\n").unwrap_err();
        assert!(
            matches!(&e, Error::Config { path, .. } if path == "train.lr"),
            "{e}"
        );
        let e = RunConfig::from_toml("k_folds = 1\n").unwrap_err();
        assert!(
            matches!(&e, Error::Config { path, .. } if path == "k_folds"),
            "{e}"
        );
        let e = RunConfig::from_toml("[model]\nheads = 3\n").unwrap_err();
        assert!(
            matches!(&e, Error::Config { path, .. } if path.starts_with("model")),
            "{e}"
        );
        let e = RunConfig::from_toml("[[ablation.specs]]\nkind = \"history_last_k\"\nk = 0\n")
            .unwrap_err();
        assert!(
            matches!(&e, Error::Config { path, .. } if path == "ablation.specs[0].k"),
            "{e}"
        );
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn hash_ignores_output_dir_and_jobs() {
        let a = RunConfig::default();
        let b = RunConfig {
            output_dir: "elsewhere".into(),
            jobs: 4,
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig {
            global_seed: 1,
            ..a.clone()
        };
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn env_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_env(|k| match k {
            "DXF_OUTPUT_DIR" => Some("/tmp/x".into()),
            "DXF_JOBS" => Some("3".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!((cfg.output_dir.to_str().unwrap(), cfg.jobs), ("/tmp/x", 3));
        let e = cfg
            .apply_env(|k| (k == "DXF_JOBS").then(|| "zero".into()))
            .unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(stage_seed(7, "folds"), stage_seed(7, "train"));
        assert_ne!(stage_seed(7, "folds"), stage_seed(8, "folds"));
        assert_eq!(stage_seed(7, "folds"), stage_seed(7, "folds"));
    }
}
