//! LSTM, GRU and minimalRNN cells and the monthly rollout.

use dxf_numcore::rng::CounterRng;
use dxf_numcore::{Bound, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::EncodedSequence;
use crate::error::{Error, Result};

/// Longest supported distance between the first input visit and the target.
pub const HORIZON_MONTHS: usize = 72;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
    #[serde(rename = "minrnn")]
    MinRnn,
}

impl CellKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
            CellKind::MinRnn => "minrnn",
        }
    }

    /// Closed-form parameter count of one cell.
    pub fn param_count(self, input: usize, hidden: usize) -> usize {
        match self {
            CellKind::Lstm => 4 * hidden * (input + hidden) + 4 * hidden,
            CellKind::Gru => 3 * hidden * (input + hidden) + 6 * hidden,
            CellKind::MinRnn => input * hidden + 2 * hidden * hidden + hidden,
        }
    }
}

pub(crate) fn uniform_init(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    bound: f64,
    rng: &mut CounterRng,
) -> Result<()> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
    store.insert(name, Tensor::new(shape.to_vec(), data)?)?;
    Ok(())
}

/// Register the weights of one cell under `prefix`.
pub fn init_cell(
    store: &mut ParamStore,
    prefix: &str,
    kind: CellKind,
    input: usize,
    hidden: usize,
    rng: &mut CounterRng,
) -> Result<()> {
    if hidden == 0 || input == 0 {
        return Err(Error::Precondition(
            "cell dimensions must be positive".into(),
        ));
    }
    let k = 1.0 / (hidden as f64).sqrt();
    let p = |s: &str| format!("{prefix}.{s}");
    match kind {
        CellKind::Lstm => {
            uniform_init(store, p("w_ih"), &[input, 4 * hidden], k, rng)?;
            uniform_init(store, p("w_hh"), &[hidden, 4 * hidden], k, rng)?;
            // gate order i, f, g, o; forget gate starts open
            let mut b = vec![0.0; 4 * hidden];
            b[hidden..2 * hidden].fill(1.0);
            store.insert(p("b"), Tensor::from_vec(b))?;
        }
        CellKind::Gru => {
            uniform_init(store, p("w_ih"), &[input, 3 * hidden], k, rng)?;
            uniform_init(store, p("w_hh"), &[hidden, 3 * hidden], k, rng)?;
            uniform_init(store, p("b_ih"), &[3 * hidden], k, rng)?;
            uniform_init(store, p("b_hh"), &[3 * hidden], k, rng)?;
        }
        CellKind::MinRnn => {
            uniform_init(store, p("w_z"), &[input, hidden], k, rng)?;
            uniform_init(store, p("u_h"), &[hidden, hidden], k, rng)?;
            uniform_init(store, p("u_z"), &[hidden, hidden], k, rng)?;
            store.insert(p("b_u"), Tensor::zeros(&[hidden]))?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: Var,
    /// LSTM memory cell.
    pub c: Option<Var>,
}

impl CellState {
    pub fn zeros(tape: &mut Tape, kind: CellKind, batch: usize, hidden: usize) -> Self {
        let h = tape.constant(Tensor::zeros(&[batch, hidden]));
        let c = (kind == CellKind::Lstm).then(|| tape.constant(Tensor::zeros(&[batch, hidden])));
        Self { h, c }
    }
}

/// One recurrent update for a batch `x [b, input]`.
///
/// * LSTM: `i,f,o = σ(·)`, `g = tanh(·)`, `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
/// * GRU: `r,z = σ(·)`, `n = tanh(x W_n + b_in + r⊙(h U_n + b_hn))`,
///   `h' = (1-z)⊙n + z⊙h`.
/// * minRNN: `z = tanh(x W_z)`, `u = σ(h U_h + z U_z + b_u)`,
///   `h' = u⊙h + (1-u)⊙z`.
pub fn cell_step(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    kind: CellKind,
    x: Var,
    state: CellState,
) -> Result<CellState> {
    let name = |s: &str| format!("{prefix}.{s}");
    let h = state.h;
    let hidden = tape.shape(h)[1];
    match kind {
        CellKind::Lstm => {
            let c = state
                .c
                .ok_or_else(|| Error::Precondition("LSTM state without memory cell".into()))?;
            let xi = tape.matmul(x, p.var(&name("w_ih"))?)?;
            let hh = tape.matmul(h, p.var(&name("w_hh"))?)?;
            let pre = tape.add(xi, hh)?;
            let pre = tape.add_row(pre, p.var(&name("b"))?)?;
            let gi = tape.slice(pre, 1, 0, hidden)?;
            let gf = tape.slice(pre, 1, hidden, hidden)?;
            let gg = tape.slice(pre, 1, 2 * hidden, hidden)?;
            let go = tape.slice(pre, 1, 3 * hidden, hidden)?;
            let i = tape.sigmoid(gi);
            let f = tape.sigmoid(gf);
            let g = tape.tanh(gg);
            let o = tape.sigmoid(go);
            let fc = tape.mul(f, c)?;
            let ig = tape.mul(i, g)?;
            let c2 = tape.add(fc, ig)?;
            let tc = tape.tanh(c2);
            let h2 = tape.mul(o, tc)?;
            Ok(CellState { h: h2, c: Some(c2) })
        }
        CellKind::Gru => {
            let xi = tape.matmul(x, p.var(&name("w_ih"))?)?;
            let xi = tape.add_row(xi, p.var(&name("b_ih"))?)?;
            let hh = tape.matmul(h, p.var(&name("w_hh"))?)?;
            let hh = tape.add_row(hh, p.var(&name("b_hh"))?)?;
            let xr = tape.slice(xi, 1, 0, 2 * hidden)?;
            let hr = tape.slice(hh, 1, 0, 2 * hidden)?;
            let rz = tape.add(xr, hr)?;
            let rz = tape.sigmoid(rz);
            let r = tape.slice(rz, 1, 0, hidden)?;
            let z = tape.slice(rz, 1, hidden, hidden)?;
            let xn = tape.slice(xi, 1, 2 * hidden, hidden)?;
            let hn = tape.slice(hh, 1, 2 * hidden, hidden)?;
            let rhn = tape.mul(r, hn)?;
            let n = tape.add(xn, rhn)?;
            let n = tape.tanh(n);
            // h' = n + z ⊙ (h - n)
            let d = tape.sub(h, n)?;
            let zd = tape.mul(z, d)?;
            let h2 = tape.add(n, zd)?;
            Ok(CellState { h: h2, c: None })
        }
        CellKind::MinRnn => {
            let z = tape.matmul(x, p.var(&name("w_z"))?)?;
            let z = tape.tanh(z);
            let uh = tape.matmul(h, p.var(&name("u_h"))?)?;
            let uz = tape.matmul(z, p.var(&name("u_z"))?)?;
            let u = tape.add(uh, uz)?;
            let u = tape.add_row(u, p.var(&name("b_u"))?)?;
            let u = tape.sigmoid(u);
            // h' = z + u ⊙ (h - z)
            let d = tape.sub(h, z)?;
            let ud = tape.mul(u, d)?;
            let h2 = tape.add(z, ud)?;
            Ok(CellState { h: h2, c: None })
        }
    }
}

/// What enters the cell at months without a visit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feedback {
    /// The previous month's prediction: softmax of the diagnosis logits,
    /// the predicted features and the time channel.
    Predicted,
    /// Linear interpolation of the surrounding observed visits' features,
    /// with the earlier visit's diagnosis. Used to compare against
    /// free-running rollouts.
    GroundTruth,
}

pub struct RolloutOutput {
    /// `[batch, 3]` logits at each sequence's target month.
    pub final_logits: Var,
    /// Mean over observed (row, month) pairs of cross-entropy plus the
    /// per-feature mean squared error.
    pub loss: Var,
    /// `[batch, 3]` logits for every month `1..=max target month`, in order.
    pub monthly_logits: Vec<Var>,
}

/// Unroll month by month from each sequence's first visit to its target.
///
/// The prediction made at step `t` is for month `t + 1`. Observed input
/// visits replace the fed-back prediction; the target visit is never an
/// input.
pub fn rollout(
    tape: &mut Tape,
    p: &Bound,
    kind: CellKind,
    hidden: usize,
    seqs: &[&EncodedSequence],
    feedback: Feedback,
) -> Result<RolloutOutput> {
    let b = seqs.len();
    if b == 0 {
        return Err(Error::Precondition("empty rollout batch".into()));
    }
    let dim = seqs[0].visits[0].len();
    let n_feat = dim - 4;
    let mut horizon = 0usize;
    for s in seqs {
        let target = s.target_month();
        if target > HORIZON_MONTHS {
            return Err(Error::Precondition(format!(
                "sequence {} spans {target} months, beyond the {HORIZON_MONTHS}-month horizon",
                s.seq_id
            )));
        }
        if s.visits.iter().any(|v| v.len() != dim) {
            return Err(Error::Precondition("mixed input widths in batch".into()));
        }
        horizon = horizon.max(target);
    }

    let mut state = CellState::zeros(tape, kind, b, hidden);
    let w_out = p.var("head.w")?;
    let b_out = p.var("head.b")?;
    let mut outs = Vec::with_capacity(horizon);
    let mut prev: Option<Var> = None;
    for t in 0..horizon {
        let mut obs = vec![0.0; b * dim];
        let mut inv = vec![0.0; b * dim];
        let mut time = vec![0.0; b];
        let mut all_observed = true;
        for (r, s) in seqs.iter().enumerate() {
            let row = &mut obs[r * dim..(r + 1) * dim];
            let target = s.target_month();
            time[r] = target.saturating_sub(t) as f64 / 12.0;
            match s.input_at_month(t) {
                Some(i) => row.copy_from_slice(&s.visits[i]),
                None if feedback == Feedback::GroundTruth => {
                    row.copy_from_slice(&s.interpolate(t));
                }
                None => {
                    all_observed = false;
                    inv[r * dim..(r + 1) * dim].fill(1.0);
                }
            }
        }
        let x_obs = tape.constant(Tensor::new(vec![b, dim], obs)?);
        let x = match prev {
            Some(out) if !all_observed => {
                let dx = tape.slice(out, 1, 0, 3)?;
                let dx = tape.softmax(dx, 1)?;
                let feat = tape.slice(out, 1, 3, n_feat)?;
                let tc = tape.constant(Tensor::new(vec![b, 1], time)?);
                let fb = tape.concat(&[dx, feat, tc], 1)?;
                let m = tape.constant(Tensor::new(vec![b, dim], inv)?);
                let fb = tape.mul(fb, m)?;
                tape.add(x_obs, fb)?
            }
            _ => x_obs,
        };
        state = cell_step(tape, p, "cell", kind, x, state)?;
        let out = tape.linear(state.h, w_out, b_out)?;
        outs.push(out);
        prev = Some(out);
    }

    let all = tape.concat(&outs, 0)?;
    let mut idx = Vec::new();
    let mut targets = Vec::new();
    let mut feats = Vec::new();
    let mut final_idx = Vec::with_capacity(b);
    for (r, s) in seqs.iter().enumerate() {
        for (i, v) in s.visits.iter().enumerate().skip(1) {
            idx.push((s.months[i] - 1) * b + r);
            targets.push(argmax_prefix(&v[..3]));
            feats.extend_from_slice(&v[3..3 + n_feat]);
        }
        final_idx.push((s.target_month() - 1) * b + r);
    }
    let k = idx.len();
    let g = tape.embedding(all, &idx)?;
    let g_dx = tape.slice(g, 1, 0, 3)?;
    let ce = tape.weighted_cross_entropy(g_dx, &targets, &vec![1.0; k])?;
    let mut loss = ce;
    if n_feat > 0 {
        let g_feat = tape.slice(g, 1, 3, n_feat)?;
        let tgt = Tensor::new(vec![k, n_feat], feats)?;
        let sse = tape.masked_sq_error(g_feat, &tgt, &Tensor::full(&[k, n_feat], 1.0))?;
        let sse = tape.scale(sse, 1.0 / n_feat as f64);
        loss = tape.add(loss, sse)?;
    }
    let loss = tape.scale(loss, 1.0 / k as f64);
    let fin = tape.embedding(all, &final_idx)?;
    let final_logits = tape.slice(fin, 1, 0, 3)?;
    let mut monthly_logits = Vec::with_capacity(horizon);
    for o in outs {
        monthly_logits.push(tape.slice(o, 1, 0, 3)?);
    }
    Ok(RolloutOutput {
        final_logits,
        loss,
        monthly_logits,
    })
}

fn argmax_prefix(onehot: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in onehot.iter().enumerate() {
        if v > onehot[best] {
            best = i;
        }
    }
    best
}
