use crate::rng;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use crate::{NumError, Result, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dropout configuration carried by a tape in training mode.
#[derive(Clone, Copy, Debug)]
struct DropoutKey {
    seed: u64,
    step: u64,
}

/// Records operations for one forward pass and replays them backwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    dropout: Option<DropoutKey>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumError {
    NumError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> NumError {
    NumError::Invalid {
        op,
        msg: msg.into(),
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output offset of a permutation, the matching input offset.
fn permute_index(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let n: usize = out_shape.iter().product();
    let mut idx = vec![0usize; out_shape.len()];
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        let off: usize = idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum();
        map.push(off);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

impl Tape {
    /// Tape in evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape in training mode. Dropout masks are a pure function of
    /// `(seed, layer, step)` and element position.
    pub fn training(seed: u64, step: u64) -> Self {
        Self {
            nodes: Vec::new(),
            dropout: Some(DropoutKey { seed, step }),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched `[g,m,k] x [g,k,n] -> [g,m,n]`; with `trans_b` the right
    /// operand is `[g,n,k]` and used transposed.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(shape_err("batch_matmul", ta, tb));
        }
        let (g, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let n = if trans_b {
            if tb.shape()[2] != k {
                return Err(shape_err("batch_matmul", ta, tb));
            }
            tb.shape()[1]
        } else {
            if tb.shape()[1] != k {
                return Err(shape_err("batch_matmul", ta, tb));
            }
            tb.shape()[2]
        };
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            let a_s = &ta.data()[gi * m * k..(gi + 1) * m * k];
            let b_s = &tb.data()[gi * k * n..(gi + 1) * k * n];
            let c_s = &mut out[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                gemm_nt_acc(a_s, b_s, c_s, m, k, n);
            } else {
                gemm_acc(a_s, b_s, c_s, m, k, n);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![g, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_check(&self, x: Var, r: Var, name: &'static str) -> Result<usize> {
        let (tx, tr) = (self.value(x), self.value(r));
        let n = *tx.shape().last().expect("rank >= 1");
        if tr.rank() != 1 || tr.shape()[0] != n {
            return Err(shape_err(name, tx, tr));
        }
        Ok(n)
    }

    /// `x[..., n] + row[n]`, broadcast over the leading dimensions.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.row_check(x, row, "add_row")?;
        let (tx, tr) = (self.value(x), self.value(row));
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (v, &b) in chunk.iter_mut().zip(tr.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(t, Op::AddRow(x, row), rg))
    }

    /// `x[..., n] * row[n]`, broadcast over the leading dimensions.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.row_check(x, row, "mul_row")?;
        let (tx, tr) = (self.value(x), self.value(row));
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (v, &g) in chunk.iter_mut().zip(tr.data()) {
                *v *= g;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(t, Op::MulRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    fn check_axis(&self, x: Var, axis: usize, name: &'static str) -> Result<()> {
        let r = self.value(x).rank();
        if axis >= r {
            return Err(invalid(
                name,
                format!("axis {axis} out of range for rank {r}"),
            ));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let tx = self.value(x);
        let (outer, len, inner) = tx.axis_split(axis);
        let mut out = tx.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let max = (0..len)
                    .map(|l| out[at(l)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (out[at(l)] - max).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[at(l)] /= sum;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let tx = self.value(x);
        let (outer, len, inner) = tx.axis_split(axis);
        let mut out = tx.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let max = (0..len)
                    .map(|l| out[at(l)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|l| (out[at(l)] - max).exp()).sum::<f64>().ln();
                for l in 0..len {
                    out[at(l)] -= lse;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::LogSoftmax { x, axis }, rg))
    }

    /// Normalizes over the last axis then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.row_check(x, gamma, "layer_norm")?;
        self.row_check(x, beta, "layer_norm")?;
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = tx.len() / n;
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, layer: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("p must be in [0,1), got {p}")));
        }
        let key = match self.dropout {
            Some(k) if p > 0.0 => k,
            _ => return Ok(x),
        };
        let stream = rng::mix(&[key.seed, layer, key.step]);
        let keep = 1.0 / (1.0 - p);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.len() as u64)
            .map(|i| {
                if rng::uniform(stream, i) < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.value(first).shape().to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", self.value(first), self.value(v)));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis, "slice")?;
        let tx = self.value(x);
        let (outer, alen, inner) = tx.axis_split(axis);
        if len == 0 || start + len > alen {
            return Err(invalid(
                "slice",
                format!("range {start}..{} exceeds axis length {alen}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            out.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Rows of a `[vocab, d]` table, giving `[indices.len(), d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(invalid(
                "embedding",
                format!("table must be rank 2, got {:?}", tt.shape()),
            ));
        }
        let (vocab, d) = (tt.shape()[0], tt.shape()[1]);
        if indices.is_empty() {
            return Err(invalid("embedding", "no indices"));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= vocab {
                return Err(invalid("embedding", format!("index {i} >= vocab {vocab}")));
            }
            out.extend_from_slice(tt.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![indices.len(), d], out)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Replace elements where `mask` is true by `value`; they get zero gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.len() {
            return Err(invalid(
                "masked_fill",
                format!("mask has {} entries for shape {:?}", mask.len(), tx.shape()),
            ));
        }
        let data = tx
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let mut seen = vec![false; tx.rank()];
        if perm.len() != tx.rank()
            || perm
                .iter()
                .any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(invalid(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", tx.rank()),
            ));
        }
        let map = permute_index(tx.shape(), perm);
        let data = map.iter().map(|&i| tx.data()[i]).collect();
        let shape = perm.iter().map(|&p| tx.shape()[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `x w + b` for `x [n, in]`, `w [in, out]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Sum over rows of `weight[r] * -log softmax(logits[r])[target[r]]`.
    ///
    /// `logits` is `[n, c]`; rows with zero weight contribute nothing.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || targets.len() != weights.len() {
            return Err(invalid(
                "cross_entropy",
                format!("logits {shape:?} with {} targets", targets.len()),
            ));
        }
        let c = shape[1];
        let mut pick = vec![0.0; shape[0] * c];
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t >= c {
                return Err(invalid(
                    "cross_entropy",
                    format!("target {t} >= classes {c}"),
                ));
            }
            pick[r * c + t] = -w;
        }
        let lp = self.log_softmax(logits, 1)?;
        let pick = self.constant(Tensor::new(shape, pick)?);
        let picked = self.mul(lp, pick)?;
        Ok(self.sum(picked))
    }

    /// Sum of `mask * (pred - target)^2`.
    pub fn masked_sq_error(&mut self, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
        let t = self.constant(target.clone());
        let m = self.constant(mask.clone());
        let d = self.sub(pred, t)?;
        let dm = self.mul(d, m)?;
        let sq = self.mul(dm, d)?;
        Ok(self.sum(sq))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(invalid(
                "backward",
                format!("loss must be scalar, got {:?}", lt.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("same shape")
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt_acc(g.data(), tb.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn_acc(ta.data(), g.data(), &mut db, m, k, n);
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (gn, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = y.shape()[2];
                let mut da = vec![0.0; ta.len()];
                let mut db = vec![0.0; tb.len()];
                for gi in 0..gn {
                    let a_s = &ta.data()[gi * m * k..(gi + 1) * m * k];
                    let b_s = &tb.data()[gi * k * n..(gi + 1) * k * n];
                    let g_s = &g.data()[gi * m * n..(gi + 1) * m * n];
                    let da_s = &mut da[gi * m * k..(gi + 1) * m * k];
                    let db_s = &mut db[gi * k * n..(gi + 1) * k * n];
                    if *trans_b {
                        gemm_acc(g_s, b_s, da_s, m, n, k);
                        gemm_tn_acc(g_s, a_s, db_s, m, n, k);
                    } else {
                        gemm_nt_acc(g_s, b_s, da_s, m, n, k);
                        gemm_tn_acc(a_s, g_s, db_s, m, k, n);
                    }
                }
                self.accumulate(grads, *a, self.like(*a, da));
                self.accumulate(grads, *b, self.like(*b, db));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*row) {
                    let n = self.value(*row).len();
                    let mut d = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (acc, v) in d.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *row, self.like(*row, d));
                }
            }
            Op::MulRow(x, row) => {
                let (tx, tr) = (self.value(*x), self.value(*row));
                let n = tr.len();
                if self.rg(*x) {
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * tr.data()[i % n])
                        .collect();
                    self.accumulate(grads, *x, self.like(*x, d));
                }
                if self.rg(*row) {
                    let mut d = vec![0.0; n];
                    for (i, (gv, xv)) in g.data().iter().zip(tx.data()).enumerate() {
                        d[i % n] += gv * xv;
                    }
                    self.accumulate(grads, *row, self.like(*row, d));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Tanh(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * (1.0 - yv * yv))
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Exp(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * yv)
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = y.axis_split(*axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| o * len * inner + l * inner + i;
                        let dot: f64 = (0..len).map(|l| g.data()[at(l)] * y.data()[at(l)]).sum();
                        for l in 0..len {
                            d[at(l)] = y.data()[at(l)] * (g.data()[at(l)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = y.axis_split(*axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| o * len * inner + l * inner + i;
                        let gsum: f64 = (0..len).map(|l| g.data()[at(l)]).sum();
                        for l in 0..len {
                            d[at(l)] = g.data()[at(l)] - y.data()[at(l)].exp() * gsum;
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gamma);
                let n = tg.len();
                let rows = xhat.len() / n;
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = vec![0.0; xhat.len()];
                for r in 0..rows {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..n {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * tg.data()[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let nf = n as f64;
                    for j in 0..n {
                        let dh = gr[j] * tg.data()[j];
                        dx[r * n + j] = inv_std[r] / nf * (nf * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
                self.accumulate(grads, *gamma, self.like(*gamma, dgamma));
                self.accumulate(grads, *beta, self.like(*beta, dbeta));
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = y.shape()[..*axis].iter().product();
                let inner: usize = y.shape()[axis + 1..].iter().product();
                let total = y.shape()[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let alen = self.value(v).shape()[*axis];
                    if self.rg(v) {
                        let mut d = Vec::with_capacity(outer * alen * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            d.extend_from_slice(&g.data()[base..base + alen * inner]);
                        }
                        self.accumulate(grads, v, self.like(v, d));
                    }
                    offset += alen;
                }
            }
            Op::Slice { x, axis, start } => {
                let tx = self.value(*x);
                let (outer, alen, inner) = tx.axis_split(*axis);
                let len = y.shape()[*axis];
                let mut d = vec![0.0; tx.len()];
                for o in 0..outer {
                    let base = o * alen * inner + start * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Embedding { table, indices } => {
                let tt = self.value(*table);
                let d_model = tt.shape()[1];
                let mut d = vec![0.0; tt.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d_model {
                        d[i * d_model + j] += g.data()[r * d_model + j];
                    }
                }
                self.accumulate(grads, *table, self.like(*table, d));
            }
            Op::MaskedFill { x, mask } => {
                let d = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(gv, &m)| if m { 0.0 } else { *gv })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, self.like(*x, g.data().to_vec()));
            }
            Op::Permute { x, perm } => {
                let tx = self.value(*x);
                let map = permute_index(tx.shape(), perm);
                let mut d = vec![0.0; tx.len()];
                for (o, &i) in map.iter().enumerate() {
                    d[i] += g.data()[o];
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Sum(x) => {
                let gv = g.item();
                let n = self.value(*x).len();
                self.accumulate(grads, *x, self.like(*x, vec![gv; n]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let gv = g.item() / n as f64;
                self.accumulate(grads, *x, self.like(*x, vec![gv; n]));
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let y = tape.softmax(x, 1).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = Tensor::new(vec![3, 2], vec![1.0, -2.0, 3.5, 0.0, 7.0, 9.0]).unwrap();
        let i = tape.constant(Tensor::eye(3));
        let av = tape.constant(a.clone());
        let y = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(y), &a);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn masked_softmax_gives_exact_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![0.3, 1.0, -2.0]).unwrap());
        let m = tape
            .masked_fill(x, &[false, true, false], f64::NEG_INFINITY)
            .unwrap();
        let s = tape.softmax(m, 1).unwrap();
        assert_eq!(tape.value(s).data()[1], 0.0);
        let total: f64 = tape.value(s).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
        let w = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let p = tape.mul(s, w).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        let gx = g.get(x).unwrap();
        assert_eq!(gx.data()[1], 0.0);
        assert!(gx.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dropout_is_identity_in_eval_and_reproducible_in_training() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 8], 1.0));
        assert_eq!(tape.dropout(x, 0.5, 3).unwrap(), x);

        let run = |step| {
            let mut t = Tape::training(11, step);
            let x = t.constant(Tensor::full(&[4, 8], 1.0));
            let y = t.dropout(x, 0.5, 3).unwrap();
            t.value(y).clone()
        };
        assert_eq!(run(0), run(0));
        assert_ne!(run(0), run(1));
        assert!(run(0).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(Tensor::new(vec![2, 3, 4], data.clone()).unwrap());
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // out[k,i,j] = in[i,j,k]
        assert_eq!(
            tape.value(p).data()[1 * 6 + 1 * 3 + 2],
            data[1 * 12 + 2 * 4 + 1]
        );
        let q = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(q).data(), &data[..]);
        assert!(tape.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }
}
