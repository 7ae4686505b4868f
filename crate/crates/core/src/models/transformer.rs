//! Pre-norm encoder-decoder Transformer over visit tokens.
//!
//! Each input visit is projected to `d_model` and summed with a sinusoidal
//! encoding of its months-to-final value. The decoder reads out from a
//! single learned query token that cross-attends to the encoder output.

use dxf_numcore::rng::CounterRng;
use dxf_numcore::{Bound, ParamStore, Tape, Tensor, Var};

use super::rnn::uniform_init;
use super::{EncodedSequence, ModelConfig};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

fn linear_init(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    output: usize,
    rng: &mut CounterRng,
) -> Result<()> {
    let k = 1.0 / (input as f64).sqrt();
    uniform_init(store, format!("{prefix}.w"), &[input, output], k, rng)?;
    uniform_init(store, format!("{prefix}.b"), &[output], k, rng)
}

fn ln_init(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]))?;
    Ok(())
}

fn attn_init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut CounterRng) -> Result<()> {
    for m in ["q", "k", "v", "o"] {
        linear_init(store, &format!("{prefix}.{m}"), d, d, rng)?;
    }
    Ok(())
}

fn ffn_init(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    f: usize,
    rng: &mut CounterRng,
) -> Result<()> {
    linear_init(store, &format!("{prefix}.1"), d, f, rng)?;
    linear_init(store, &format!("{prefix}.2"), f, d, rng)
}

pub(crate) fn init(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    input: usize,
    rng: &mut CounterRng,
) -> Result<()> {
    let (d, f) = (cfg.d_model, cfg.d_ffn);
    linear_init(store, "in", input, d, rng)?;
    for l in 0..cfg.n_encoder_layers {
        let p = format!("enc.{l}");
        ln_init(store, &format!("{p}.ln1"), d)?;
        attn_init(store, &format!("{p}.attn"), d, rng)?;
        ln_init(store, &format!("{p}.ln2"), d)?;
        ffn_init(store, &format!("{p}.ffn"), d, f, rng)?;
    }
    ln_init(store, "enc.ln", d)?;
    uniform_init(store, "dec.query".into(), &[1, d], 1.0, rng)?;
    for l in 0..cfg.n_decoder_layers {
        let p = format!("dec.{l}");
        ln_init(store, &format!("{p}.ln1"), d)?;
        attn_init(store, &format!("{p}.self"), d, rng)?;
        ln_init(store, &format!("{p}.ln2"), d)?;
        attn_init(store, &format!("{p}.cross"), d, rng)?;
        ln_init(store, &format!("{p}.ln3"), d)?;
        ffn_init(store, &format!("{p}.ffn"), d, f, rng)?;
    }
    ln_init(store, "dec.ln", d)?;
    linear_init(store, "head", d, 3, rng)
}

/// Closed-form parameter count.
pub fn param_count(cfg: &ModelConfig, input: usize) -> usize {
    let (d, f) = (cfg.d_model, cfg.d_ffn);
    let attn = 4 * (d * d + d);
    let ffn = d * f + f + f * d + d;
    let ln = 2 * d;
    let enc_layer = 2 * ln + attn + ffn;
    let dec_layer = 3 * ln + 2 * attn + ffn;
    (input * d + d)
        + cfg.n_encoder_layers * enc_layer
        + ln
        + d
        + cfg.n_decoder_layers * dec_layer
        + ln
        + (d * 3 + 3)
}

/// Sinusoidal encoding of a (possibly fractional) month count.
pub fn time_encoding(months: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * i / d as f64);
            if j % 2 == 0 {
                (months * freq).sin()
            } else {
                (months * freq).cos()
            }
        })
        .collect()
}

struct Ctx<'a, 'b> {
    p: &'a Bound<'b>,
    cfg: &'a ModelConfig,
    layer: u64,
}

impl Ctx<'_, '_> {
    fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.layer += 1;
        Ok(tape.dropout(x, self.cfg.dropout, self.layer)?)
    }

    fn linear(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p.var(&format!("{prefix}.w"))?;
        let b = self.p.var(&format!("{prefix}.b"))?;
        Ok(tape.linear(x, w, b)?)
    }

    fn ln(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p.var(&format!("{prefix}.g"))?;
        let b = self.p.var(&format!("{prefix}.b"))?;
        Ok(tape.layer_norm(x, g, b, LN_EPS)?)
    }

    fn ffn(&mut self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(tape, x, &format!("{prefix}.1"))?;
        let h = tape.relu(h);
        let h = self.dropout(tape, h)?;
        self.linear(tape, h, &format!("{prefix}.2"))
    }

    /// `[b*len, d] -> [b*heads, len, dh]`
    fn split_heads(&self, tape: &mut Tape, x: Var, b: usize, len: usize) -> Result<Var> {
        let h = self.cfg.n_heads;
        let dh = self.cfg.d_model / h;
        let x = tape.reshape(x, &[b, len, h, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        Ok(tape.reshape(x, &[b * h, len, dh])?)
    }

    /// Multi-head attention. `key_pad[b * lk + j]` marks padded keys.
    /// Returns the projected output `[b*lq, d]` and the weights
    /// `[b*heads, lq, lk]`.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        tape: &mut Tape,
        prefix: &str,
        q_in: Var,
        kv_in: Var,
        b: usize,
        lq: usize,
        lk: usize,
        key_pad: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let heads = self.cfg.n_heads;
        let d = self.cfg.d_model;
        let dh = d / heads;
        let q = self.linear(tape, q_in, &format!("{prefix}.q"))?;
        let k = self.linear(tape, kv_in, &format!("{prefix}.k"))?;
        let v = self.linear(tape, kv_in, &format!("{prefix}.v"))?;
        let q = self.split_heads(tape, q, b, lq)?;
        let k = self.split_heads(tape, k, b, lk)?;
        let v = self.split_heads(tape, v, b, lk)?;
        let s = tape.batch_matmul(q, k, true)?;
        let mut s = tape.scale(s, 1.0 / (dh as f64).sqrt());
        if let Some(pad) = key_pad {
            if pad.iter().any(|&m| m) {
                let mut mask = Vec::with_capacity(b * heads * lq * lk);
                for bi in 0..b {
                    for _ in 0..heads * lq {
                        mask.extend_from_slice(&pad[bi * lk..(bi + 1) * lk]);
                    }
                }
                s = tape.masked_fill(s, &mask, f64::NEG_INFINITY)?;
            }
        }
        let a = tape.softmax(s, 2)?;
        let a_drop = self.dropout(tape, a)?;
        let ctx = tape.batch_matmul(a_drop, v, false)?;
        let ctx = tape.reshape(ctx, &[b, heads, lq, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b * lq, d])?;
        let out = self.linear(tape, ctx, &format!("{prefix}.o"))?;
        Ok((out, a))
    }
}

pub struct TransformerOutput {
    /// `[batch, 3]`
    pub logits: Var,
    /// Encoder self-attention weights per layer, `[batch*heads, len, len]`.
    pub encoder_attention: Vec<Var>,
    /// Padded input length.
    pub len: usize,
}

/// Forward pass over the input visits (all but the target) of each sequence.
pub fn forward(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    seqs: &[&EncodedSequence],
) -> Result<TransformerOutput> {
    let b = seqs.len();
    if b == 0 {
        return Err(Error::Precondition("empty batch".into()));
    }
    let d = cfg.d_model;
    let dim = seqs[0].visits[0].len();
    let mut len = 0;
    for s in seqs {
        let n = s.n_inputs();
        if n == 0 {
            return Err(Error::Precondition(format!(
                "sequence {} has no input visits",
                s.seq_id
            )));
        }
        if n > cfg.max_seq_len {
            return Err(Error::Precondition(format!(
                "sequence {} has {n} input visits, max_seq_len is {}",
                s.seq_id, cfg.max_seq_len
            )));
        }
        len = len.max(n);
    }
    let mut x = vec![0.0; b * len * dim];
    let mut pe = vec![0.0; b * len * d];
    let mut pad = vec![true; b * len];
    for (r, s) in seqs.iter().enumerate() {
        for i in 0..s.n_inputs() {
            let row = r * len + i;
            x[row * dim..(row + 1) * dim].copy_from_slice(&s.visits[i]);
            pe[row * d..(row + 1) * d].copy_from_slice(&time_encoding(s.months_to_final[i], d));
            pad[row] = false;
        }
    }
    let mut ctx = Ctx { p, cfg, layer: 0 };
    let xv = tape.constant(Tensor::new(vec![b * len, dim], x)?);
    let h = ctx.linear(tape, xv, "in")?;
    let pe = tape.constant(Tensor::new(vec![b * len, d], pe)?);
    let h = tape.add(h, pe)?;
    let mut h = ctx.dropout(tape, h)?;
    let mut encoder_attention = Vec::with_capacity(cfg.n_encoder_layers);
    for l in 0..cfg.n_encoder_layers {
        let pre = format!("enc.{l}");
        let a = ctx.ln(tape, h, &format!("{pre}.ln1"))?;
        let (att, w) =
            ctx.attention(tape, &format!("{pre}.attn"), a, a, b, len, len, Some(&pad))?;
        encoder_attention.push(w);
        let att = ctx.dropout(tape, att)?;
        h = tape.add(h, att)?;
        let a = ctx.ln(tape, h, &format!("{pre}.ln2"))?;
        let f = ctx.ffn(tape, a, &format!("{pre}.ffn"))?;
        let f = ctx.dropout(tape, f)?;
        h = tape.add(h, f)?;
    }
    let memory = ctx.ln(tape, h, "enc.ln")?;

    let table = p.var("dec.query")?;
    let mut q = tape.embedding(table, &vec![0; b])?;
    for l in 0..cfg.n_decoder_layers {
        let pre = format!("dec.{l}");
        let a = ctx.ln(tape, q, &format!("{pre}.ln1"))?;
        let (sa, _) = ctx.attention(tape, &format!("{pre}.self"), a, a, b, 1, 1, None)?;
        let sa = ctx.dropout(tape, sa)?;
        q = tape.add(q, sa)?;
        let a = ctx.ln(tape, q, &format!("{pre}.ln2"))?;
        let (ca, _) = ctx.attention(
            tape,
            &format!("{pre}.cross"),
            a,
            memory,
            b,
            1,
            len,
            Some(&pad),
        )?;
        let ca = ctx.dropout(tape, ca)?;
        q = tape.add(q, ca)?;
        let a = ctx.ln(tape, q, &format!("{pre}.ln3"))?;
        let f = ctx.ffn(tape, a, &format!("{pre}.ffn"))?;
        let f = ctx.dropout(tape, f)?;
        q = tape.add(q, f)?;
    }
    let q = ctx.ln(tape, q, "dec.ln")?;
    let logits = ctx.linear(tape, q, "head")?;
    Ok(TransformerOutput {
        logits,
        encoder_attention,
        len,
    })
}
