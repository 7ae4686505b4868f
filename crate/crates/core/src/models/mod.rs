//! Next-visit diagnosis predictors.

pub mod rnn;
pub mod transformer;

use std::borrow::Cow;
use std::path::Path;

use dxf_numcore::rng::CounterRng;
use dxf_numcore::{count_params, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data_model::{category_indices, Diagnosis, FeatureCategory, N_FEATURES};
use crate::error::{Error, Result};
use crate::sequences::{Label, VisitSequence};
pub use rnn::{CellKind, Feedback, HORIZON_MONTHS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Transformer,
    Lstm,
    Gru,
    #[serde(rename = "minrnn")]
    MinRnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Transformer,
        ModelKind::Lstm,
        ModelKind::Gru,
        ModelKind::MinRnn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Transformer => "transformer",
            ModelKind::Lstm => "lstm",
            ModelKind::Gru => "gru",
            ModelKind::MinRnn => "minrnn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
    }

    pub fn cell(self) -> Option<CellKind> {
        match self {
            ModelKind::Transformer => None,
            ModelKind::Lstm => Some(CellKind::Lstm),
            ModelKind::Gru => Some(CellKind::Gru),
            ModelKind::MinRnn => Some(CellKind::MinRnn),
        }
    }
}

/// Feature channels given to a model, as canonical indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMask {
    pub kept: Vec<usize>,
}

impl Default for FeatureMask {
    fn default() -> Self {
        Self::all()
    }
}

impl FeatureMask {
    pub fn all() -> Self {
        Self {
            kept: (0..N_FEATURES).collect(),
        }
    }

    pub fn remove(category: FeatureCategory) -> Self {
        let drop = category_indices(category);
        Self {
            kept: (0..N_FEATURES).filter(|i| !drop.contains(i)).collect(),
        }
    }

    pub fn isolate(category: FeatureCategory) -> Self {
        Self {
            kept: category_indices(category),
        }
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    /// Per-visit input width: diagnosis one-hot, kept features, time.
    pub fn input_dim(&self) -> usize {
        3 + self.kept.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// RNN hidden width.
    pub hidden_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    /// Largest number of input visits the Transformer accepts.
    pub max_seq_len: usize,
    pub features: FeatureMask,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Transformer,
            hidden_dim: 128,
            d_model: 256,
            n_heads: 4,
            n_encoder_layers: 4,
            n_decoder_layers: 8,
            d_ffn: 512,
            dropout: 0.1,
            max_seq_len: 8,
            features: FeatureMask::all(),
        }
    }
}

impl ModelConfig {
    pub fn with_kind(mut self, kind: ModelKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("model.{field}"), msg));
        if self.features.is_empty() || self.features.kept.iter().any(|&i| i >= N_FEATURES) {
            return bad(
                "features",
                "feature channel set must be a non-empty subset of 0..22",
            );
        }
        match self.kind {
            ModelKind::Transformer => {
                if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
                    return bad("d_model", "must be a positive multiple of n_heads");
                }
                if self.d_ffn == 0 {
                    return bad("d_ffn", "must be positive");
                }
                if self.max_seq_len == 0 {
                    return bad("max_seq_len", "must be positive");
                }
                if !(0.0..1.0).contains(&self.dropout) {
                    return bad("dropout", "must be in [0, 1)");
                }
            }
            _ => {
                if self.hidden_dim == 0 {
                    return bad("hidden_dim", "must be positive");
                }
            }
        }
        Ok(())
    }

    /// Closed-form parameter count for this configuration.
    pub fn param_count(&self) -> usize {
        let input = self.features.input_dim();
        match self.kind.cell() {
            None => transformer::param_count(self, input),
            Some(cell) => {
                let out = 3 + self.features.len();
                cell.param_count(input, self.hidden_dim) + self.hidden_dim * out + out
            }
        }
    }
}

/// Model-ready numeric view of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub seq_id: usize,
    pub subject_id: String,
    pub group: usize,
    pub label: Label,
    pub target: Diagnosis,
    pub penultimate: Diagnosis,
    /// All `n + 1` visits: diagnosis one-hot, kept features, months-to-final / 12.
    pub visits: Vec<Vec<f64>>,
    /// Month offset of each visit from the first one.
    pub months: Vec<usize>,
    pub months_to_final: Vec<f64>,
}

impl EncodedSequence {
    pub fn n_inputs(&self) -> usize {
        self.visits.len() - 1
    }

    pub fn target_month(&self) -> usize {
        self.months[self.months.len() - 1]
    }

    /// Index of the input visit observed at month `t`.
    pub fn input_at_month(&self, t: usize) -> Option<usize> {
        self.months[..self.n_inputs()].binary_search(&t).ok()
    }

    /// Visit vector at month `t` interpolated between the surrounding visits;
    /// the diagnosis is that of the earlier visit.
    pub fn interpolate(&self, t: usize) -> Vec<f64> {
        let j = self
            .months
            .partition_point(|&m| m <= t)
            .clamp(1, self.months.len() - 1);
        let (i, j) = (j - 1, j);
        let (a, b) = (&self.visits[i], &self.visits[j]);
        let w = (t as f64 - self.months[i] as f64) / (self.months[j] - self.months[i]) as f64;
        let dim = a.len();
        let mut v: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + w * (y - x)).collect();
        v[..3].copy_from_slice(&a[..3]);
        v[dim - 1] = (self.target_month() - t.min(self.target_month())) as f64 / 12.0;
        v
    }

    /// Drop leading input visits until the span fits `horizon` months.
    pub fn clipped(&self, horizon: usize) -> Cow<'_, Self> {
        let last = self.months[self.months.len() - 1];
        let start = self.months.partition_point(|&m| last - m > horizon);
        let start = start.min(self.months.len() - 2);
        if start == 0 {
            return Cow::Borrowed(self);
        }
        let base = self.months[start];
        Cow::Owned(Self {
            visits: self.visits[start..].to_vec(),
            months: self.months[start..].iter().map(|m| m - base).collect(),
            months_to_final: self.months_to_final[start..].to_vec(),
            ..self.clone()
        })
    }
}

/// Encode a fully imputed sequence. Any absent kept feature is an error.
pub fn encode(seq: &VisitSequence, mask: &FeatureMask) -> Result<EncodedSequence> {
    let first = seq.visits[0].exam_month;
    let last = seq.visits[seq.visits.len() - 1].exam_month;
    let mut visits = Vec::with_capacity(seq.visits.len());
    let mut months = Vec::with_capacity(seq.visits.len());
    let mut mtf = Vec::with_capacity(seq.visits.len());
    for v in &seq.visits {
        let dx = v.diagnosis.ok_or_else(|| {
            Error::Precondition(format!(
                "sequence {} has a visit without diagnosis",
                seq.seq_id
            ))
        })?;
        let mut x = vec![0.0; mask.input_dim()];
        x[dx.index()] = 1.0;
        for (slot, &j) in mask.kept.iter().enumerate() {
            x[3 + slot] = v.feature(j).ok_or_else(|| {
                Error::Precondition(format!(
                    "sequence {} has a missing feature at month {}; impute before encoding",
                    seq.seq_id, v.exam_month
                ))
            })?;
        }
        let to_final = f64::from(last - v.exam_month);
        x[mask.input_dim() - 1] = to_final / 12.0;
        visits.push(x);
        months.push((v.exam_month - first) as usize);
        mtf.push(to_final);
    }
    Ok(EncodedSequence {
        seq_id: seq.seq_id,
        subject_id: seq.subject_id.clone(),
        group: seq.group,
        label: seq.label,
        target: seq.target_dx,
        penultimate: seq.penultimate_dx(),
        visits,
        months,
        months_to_final: mtf,
    })
}

/// Most probable class; ties go to the less severe diagnosis.
pub fn predicted_class(p: &[f64; 3]) -> Diagnosis {
    let mut best = 0;
    for i in 1..3 {
        if p[i] > p[best] {
            best = i;
        }
    }
    Diagnosis::ALL[best]
}

pub fn softmax3(logits: &[f64]) -> [f64; 3] {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    [e[0] / s, e[1] / s, e[2] / s]
}

pub trait Predictor: Sync {
    fn name(&self) -> &str;
    fn predict_proba(&self, seqs: &[EncodedSequence]) -> Result<Vec<[f64; 3]>>;
}

/// Predicts the penultimate visit's diagnosis.
pub struct StabilityBaseline;

impl Predictor for StabilityBaseline {
    fn name(&self) -> &str {
        "stability"
    }

    fn predict_proba(&self, seqs: &[EncodedSequence]) -> Result<Vec<[f64; 3]>> {
        Ok(seqs
            .iter()
            .map(|s| {
                let mut p = [0.0; 3];
                p[s.penultimate.index()] = 1.0;
                p
            })
            .collect())
    }
}

/// Logits and training loss for one batch.
pub struct BatchOutput {
    pub logits: Var,
    pub loss: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

const PREDICT_CHUNK: usize = 256;

impl Model {
    /// Randomly initialized model; weights are rounded to `f32`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = CounterRng::new(seed);
        let mut params = ParamStore::new();
        let input = config.features.input_dim();
        match config.kind.cell() {
            None => transformer::init(&mut params, &config, input, &mut rng)?,
            Some(cell) => {
                let h = config.hidden_dim;
                let out = 3 + config.features.len();
                rnn::init_cell(&mut params, "cell", cell, input, h, &mut rng)?;
                let k = 1.0 / (h as f64).sqrt();
                rnn::uniform_init(&mut params, "head.w".into(), &[h, out], k, &mut rng)?;
                params.insert("head.b", Tensor::zeros(&[out]))?;
            }
        }
        params.round_to_f32();
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        count_params(&self.params)
    }

    fn check_width(&self, seqs: &[&EncodedSequence]) -> Result<()> {
        let want = self.config.features.input_dim();
        if let Some(s) = seqs.iter().find(|s| s.visits[0].len() != want) {
            return Err(Error::Precondition(format!(
                "sequence {} has input width {}, model expects {want}",
                s.seq_id,
                s.visits[0].len()
            )));
        }
        Ok(())
    }

    /// Record a forward pass on `tape` with parameters from `p`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &dxf_numcore::Bound,
        batch: &[&EncodedSequence],
        feedback: Feedback,
    ) -> Result<BatchOutput> {
        self.check_width(batch)?;
        match self.config.kind.cell() {
            None => {
                let out = transformer::forward(tape, p, &self.config, batch)?;
                let targets: Vec<usize> = batch.iter().map(|s| s.target.index()).collect();
                let ce =
                    tape.weighted_cross_entropy(out.logits, &targets, &vec![1.0; batch.len()])?;
                let loss = tape.scale(ce, 1.0 / batch.len() as f64);
                Ok(BatchOutput {
                    logits: out.logits,
                    loss,
                })
            }
            Some(cell) => {
                let clipped: Vec<Cow<EncodedSequence>> =
                    batch.iter().map(|s| s.clipped(HORIZON_MONTHS)).collect();
                let refs: Vec<&EncodedSequence> = clipped.iter().map(|c| c.as_ref()).collect();
                let out = rnn::rollout(tape, p, cell, self.config.hidden_dim, &refs, feedback)?;
                Ok(BatchOutput {
                    logits: out.final_logits,
                    loss: out.loss,
                })
            }
        }
    }

    pub fn predict_with(
        &self,
        seqs: &[EncodedSequence],
        feedback: Feedback,
    ) -> Result<Vec<[f64; 3]>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(PREDICT_CHUNK) {
            let mut tape = Tape::new();
            let p = self.params.bind_frozen(&mut tape);
            let refs: Vec<&EncodedSequence> = chunk.iter().collect();
            let o = self.forward(&mut tape, &p, &refs, feedback)?;
            let logits = tape.value(o.logits);
            for r in 0..chunk.len() {
                let row = logits.row(r);
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite logits for sequence {}",
                        chunk[r].seq_id
                    )));
                }
                out.push(softmax3(row));
            }
        }
        Ok(out)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        self.checkpoint_bytes_with_header(None)
    }

    /// Checkpoint whose config text starts with `# header` when given.
    pub fn checkpoint_bytes_with_header(&self, header: Option<&str>) -> Result<Vec<u8>> {
        let cfg = serde_json::to_string(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        let text = match header {
            Some(h) => format!("# {h}\n{cfg}"),
            None => cfg,
        };
        Ok(dxf_numcore::encode_checkpoint(&text, &self.params)?)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = dxf_numcore::decode_checkpoint(bytes)?;
        let config: ModelConfig = serde_json::from_str(strip_comment_lines(&ck.config))
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let fresh = Model::new(config.clone(), 0)?;
        if fresh.params.names() != ck.params.names() {
            return Err(Error::Format(
                "checkpoint tensors do not match its config".into(),
            ));
        }
        Ok(Self {
            config,
            params: ck.params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

/// Text after any leading `#` lines.
pub fn strip_comment_lines(text: &str) -> &str {
    let mut rest = text;
    while rest.starts_with('#') {
        rest = rest.split_once('\n').map_or("", |(_, r)| r);
    }
    rest
}

impl Predictor for Model {
    fn name(&self) -> &str {
        self.config.kind.as_str()
    }

    fn predict_proba(&self, seqs: &[EncodedSequence]) -> Result<Vec<[f64; 3]>> {
        self.predict_with(seqs, Feedback::Predicted)
    }
}
