//! Tape-based reverse-mode differentiation over coarse tensor ops.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the backward sweep is a single reverse pass.

use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf {
        name: Option<String>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Scale(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        self.push(
            t,
            Op::Leaf {
                name: Some(name.to_string()),
            },
        )
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { name: None })
    }

    /// Rows of `table` selected by `ids`.
    pub fn embed(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(&[ids.len(), cols]);
        for (r, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(Error::Shape(format!("embedding index {id} >= {rows}")));
            }
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        Ok(self.push(out, Op::Embed { table, ids }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.len() != tx.cols() {
            return Err(Error::Shape(format!(
                "bias {:?} for {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow { x, bias }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k || tb.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            1.0,
            ta.data(),
            false,
            tb.data(),
            false,
            0.0,
            out.data_mut(),
        );
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, d) = (tx.rows(), tx.cols());
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != d || tb.len() != d {
            return Err(Error::Shape("layer norm gain/bias width".into()));
        }
        let mut out = Tensor::zeros(&[rows, d]);
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            let o = out.row_mut(r);
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                o[c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map_values(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scaled(s);
        self.push(out, Op::Scale(x, s))
    }

    /// Causal multi-head attention over `batch` sequences of `seq` rows each.
    /// `q`, `k`, `v` are `[batch*seq, d]`; heads split the columns.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tq.rows() != batch * seq || !tq.same_shape(tk) || !tq.same_shape(tv) || d % heads != 0 {
            return Err(Error::Shape("attention operands".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = Tensor::zeros(&[batch * seq, d]);
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + h * dh..][..dh];
                    let prow = &mut p[i * seq..i * seq + i + 1];
                    let mut max = f64::NEG_INFINITY;
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kd[(b * seq + j) * d + h * dh..][..dh];
                        let s = dot(qi, kj) * scale;
                        *pj = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for pj in prow.iter_mut() {
                        *pj = (*pj - max).exp();
                        z += *pj;
                    }
                    let o = &mut out.data_mut()[(b * seq + i) * d + h * dh..][..dh];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        *pj /= z;
                        let vj = &vd[(b * seq + j) * d + h * dh..][..dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += *pj * vc;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Mean next-token cross entropy over rows with `mask[r]` set.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, vocab) = (tl.rows(), tl.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape("targets/mask length".into()));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] >= vocab {
                return Err(Error::Shape(format!(
                    "target {} >= vocab {vocab}",
                    targets[r]
                )));
            }
            let row = tl.row(r);
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let lse = softmax_into(row, p);
            total += lse - row[targets[r]];
        }
        let loss = Tensor::scalar(total / count as f64);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every named leaf.
    /// Leaves the loss does not depend on get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<ParamTree> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::DetachedGraph(format!(
                "loss must be scalar, got {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));
        let mut reached_param = false;

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { name } => {
                    if name.is_some() {
                        reached_param = true;
                    }
                    grads[idx] = Some(g);
                }
                Op::Embed { table, ids } => {
                    let t = self.value(*table);
                    let gt = slot(&mut grads, *table, t);
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, b) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                }
                Op::Add(a, b) => {
                    slot(&mut grads, *a, &g).add_assign(&g);
                    slot(&mut grads, *b, &g).add_assign(&g);
                }
                Op::AddRow { x, bias } => {
                    slot(&mut grads, *x, &g).add_assign(&g);
                    let tb = self.value(*bias);
                    let gb = slot(&mut grads, *bias, tb);
                    for r in 0..g.rows() {
                        for (a, b) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let ga = slot(&mut grads, *a, ta);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g.data(),
                        false,
                        tb.data(),
                        true,
                        1.0,
                        ga.data_mut(),
                    );
                    let gb = slot(&mut grads, *b, tb);
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        ta.data(),
                        true,
                        g.data(),
                        false,
                        1.0,
                        gb.data_mut(),
                    );
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let tg = self.value(*gain);
                    let d = tg.len();
                    let rows = g.rows();
                    {
                        let gb = slot(&mut grads, *bias, tg);
                        for r in 0..rows {
                            for (a, b) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *a += b;
                            }
                        }
                    }
                    {
                        let gg = slot(&mut grads, *gain, tg);
                        for r in 0..rows {
                            for c in 0..d {
                                gg.data_mut()[c] += g.row(r)[c] * xhat[r * d + c];
                            }
                        }
                    }
                    let gx = slot(&mut grads, *x, &g);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..d {
                            dxhat[c] = gr[c] * tg.data()[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * xh[c];
                        }
                        let inv = inv_std[r];
                        let out = gx.row_mut(r);
                        for c in 0..d {
                            out[c] += inv * (dxhat[c] - s1 / d as f64 - xh[c] * s2 / d as f64);
                        }
                    }
                }
                Op::Gelu(x) => {
                    let tx = self.value(*x);
                    let gx = slot(&mut grads, *x, tx);
                    for ((o, &v), &gv) in gx.data_mut().iter_mut().zip(tx.data()).zip(g.data()) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        let dy = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
                        *o += gv * dy;
                    }
                }
                Op::Scale(x, s) => {
                    slot(&mut grads, *x, &g).axpy(*s, &g);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    batch,
                    seq,
                    heads,
                    probs,
                } => {
                    let (batch, seq, heads) = (*batch, *seq, *heads);
                    let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = tq.cols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Tensor::zeros(tq.shape());
                    let mut gk = Tensor::zeros(tq.shape());
                    let mut gv = Tensor::zeros(tq.shape());
                    let (qd, kd, vd, gd) = (tq.data(), tk.data(), tv.data(), g.data());
                    let mut dp = vec![0.0; seq];
                    for b in 0..batch {
                        for h in 0..heads {
                            let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                            for i in 0..seq {
                                let gi = &gd[(b * seq + i) * d + h * dh..][..dh];
                                let prow = &p[i * seq..i * seq + i + 1];
                                let mut acc = 0.0;
                                for (j, &pj) in prow.iter().enumerate() {
                                    let vj = &vd[(b * seq + j) * d + h * dh..][..dh];
                                    dp[j] = dot(gi, vj);
                                    acc += pj * dp[j];
                                    let gvj =
                                        &mut gv.data_mut()[(b * seq + j) * d + h * dh..][..dh];
                                    for (o, gc) in gvj.iter_mut().zip(gi) {
                                        *o += pj * gc;
                                    }
                                }
                                let qi = &qd[(b * seq + i) * d + h * dh..][..dh];
                                for (j, &pj) in prow.iter().enumerate() {
                                    let ds = pj * (dp[j] - acc) * scale;
                                    let kj = &kd[(b * seq + j) * d + h * dh..][..dh];
                                    let gqi =
                                        &mut gq.data_mut()[(b * seq + i) * d + h * dh..][..dh];
                                    for (o, kc) in gqi.iter_mut().zip(kj) {
                                        *o += ds * kc;
                                    }
                                    let gkj =
                                        &mut gk.data_mut()[(b * seq + j) * d + h * dh..][..dh];
                                    for (o, qc) in gkj.iter_mut().zip(qi) {
                                        *o += ds * qc;
                                    }
                                }
                            }
                        }
                    }
                    slot(&mut grads, *q, &gq).add_assign(&gq);
                    slot(&mut grads, *k, &gk).add_assign(&gk);
                    slot(&mut grads, *v, &gv).add_assign(&gv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                    probs,
                    count,
                } => {
                    let tl = self.value(*logits);
                    let vocab = tl.cols();
                    let up = g.item() / *count as f64;
                    let gl = slot(&mut grads, *logits, tl);
                    for r in 0..tl.rows() {
                        if !mask[r] {
                            continue;
                        }
                        let out = gl.row_mut(r);
                        for c in 0..vocab {
                            out[c] += up * probs[r * vocab + c];
                        }
                        out[targets[r]] -= up;
                    }
                }
            }
        }

        if !reached_param {
            return Err(Error::DetachedGraph("no parameter reaches the loss".into()));
        }
        let mut out = ParamTree::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(name) } = &node.op {
                let g = match grads.get_mut(idx).and_then(Option::take) {
                    Some(g) => g,
                    None => Tensor::zeros(node.value.shape()),
                };
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Writes softmax(row) into `out` and returns log-sum-exp(row).
pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
    max + z.ln()
}

impl Tensor {
    pub(crate) fn map_values(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_fn(self.shape(), |i| f(self.data()[i]))
    }
}
