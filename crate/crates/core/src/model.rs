//! A small pre-norm causal transformer language model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_into, Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::Tensor;

pub type Token = u32;

/// Which hidden state feeds routing features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureTap {
    /// Residual stream after the last block, before the final norm.
    #[default]
    PostBlock,
    PostFinalNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub vocab_size: usize,
    /// Maximum context length (size of the positional table).
    pub seq_len: usize,
    pub n_blocks: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub mlp_dim: usize,
    pub seed: u64,
    pub feature_tap: FeatureTap,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            seq_len: 64,
            n_blocks: 2,
            hidden_dim: 32,
            n_heads: 2,
            mlp_dim: 64,
            seed: 0,
            feature_tap: FeatureTap::PostBlock,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.seq_len < 2 {
            return bad("seq_len must be at least 2");
        }
        if self.n_blocks < 2 {
            return bad("n_blocks must be at least 2");
        }
        if self.hidden_dim == 0 || self.n_heads == 0 || self.mlp_dim == 0 {
            return bad("hidden_dim, n_heads and mlp_dim must be positive");
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.hidden_dim, self.mlp_dim);
        let mut out = vec![
            ("emb.tok".to_string(), vec![v, d]),
            ("emb.pos".to_string(), vec![self.seq_len, d]),
        ];
        for b in 0..self.n_blocks {
            let p = block_prefix(b);
            for (n, s) in [
                ("ln1.gain", vec![d]),
                ("ln1.bias", vec![d]),
                ("attn.wq", vec![d, d]),
                ("attn.bq", vec![d]),
                ("attn.wk", vec![d, d]),
                ("attn.bk", vec![d]),
                ("attn.wv", vec![d, d]),
                ("attn.bv", vec![d]),
                ("attn.wo", vec![d, d]),
                ("attn.bo", vec![d]),
                ("ln2.gain", vec![d]),
                ("ln2.bias", vec![d]),
                ("mlp.w1", vec![d, f]),
                ("mlp.b1", vec![f]),
                ("mlp.w2", vec![f, d]),
                ("mlp.b2", vec![d]),
            ] {
                out.push((format!("{p}{n}"), s));
            }
        }
        out.push(("final_ln.gain".into(), vec![d]));
        out.push(("final_ln.bias".into(), vec![d]));
        out.push(("head.w".into(), vec![d, v]));
        out.push(("head.b".into(), vec![v]));
        out.sort();
        out
    }
}

pub fn block_prefix(b: usize) -> String {
    format!("block{b}.")
}

/// Deterministic initialization: matrices from a normal scaled by
/// `1/sqrt(fan_in)` (residual projections further by `1/sqrt(2*blocks)`),
/// norm gains one, biases zero.
pub fn init_params(cfg: &LmConfig) -> Result<ParamTree> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamTree::new();
    let resid = 1.0 / ((2 * cfg.n_blocks) as f64).sqrt();
    // Canonical order keeps the RNG stream stable.
    for (name, shape) in cfg.param_shapes() {
        let t = if name.ends_with(".gain") {
            Tensor::filled(&shape, 1.0)
        } else if shape.len() == 1 {
            Tensor::zeros(&shape)
        } else {
            let std = if name.starts_with("emb.") {
                0.5
            } else {
                let base = 1.0 / (shape[0] as f64).sqrt();
                if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                    base * resid
                } else {
                    base
                }
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
        };
        params.insert(name, t);
    }
    Ok(params)
}

pub struct ForwardVars {
    pub logits: Var,
    pub hidden: Var,
}

fn check_tokens(cfg: &LmConfig, seqs: &[&[Token]]) -> Result<usize> {
    let len = seqs.first().map_or(0, |s| s.len());
    if len == 0 {
        return Err(Error::SequenceTooShort {
            len: 0,
            required: 1,
        });
    }
    if len > cfg.seq_len {
        return Err(Error::SequenceTooLong {
            len,
            max: cfg.seq_len,
        });
    }
    for s in seqs {
        if s.len() != len {
            return Err(Error::Shape("batch sequences must share a length".into()));
        }
        if let Some(&token) = s.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: cfg.vocab_size,
            });
        }
    }
    Ok(len)
}

/// Records the forward pass of a batch of equal-length sequences into `g`.
/// Rows are laid out sequence-major: row `b*len + t`.
pub fn build_forward(
    g: &mut Graph,
    params: &ParamTree,
    cfg: &LmConfig,
    seqs: &[&[Token]],
) -> Result<ForwardVars> {
    let len = check_tokens(cfg, seqs)?;
    let leaf = |g: &mut Graph, name: &str| -> Result<Var> {
        Ok(g.param(name, params.require(name)?.clone()))
    };

    let tok = leaf(g, "emb.tok")?;
    let pos = leaf(g, "emb.pos")?;
    let ids: Vec<usize> = seqs
        .iter()
        .flat_map(|s| s.iter().map(|&t| t as usize))
        .collect();
    let pos_ids: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..len).collect();
    let te = g.embed(tok, ids)?;
    let pe = g.embed(pos, pos_ids)?;
    let mut x = g.add(te, pe)?;

    for b in 0..cfg.n_blocks {
        let p = block_prefix(b);
        let w = |n: &str| format!("{p}{n}");
        let (g1, b1) = (leaf(g, &w("ln1.gain"))?, leaf(g, &w("ln1.bias"))?);
        let h = g.layer_norm(x, g1, b1)?;
        let proj = |g: &mut Graph, wn: &str, bn: &str, input: Var| -> Result<Var> {
            let wv = leaf(g, &w(wn))?;
            let bv = leaf(g, &w(bn))?;
            let m = g.matmul(input, wv)?;
            g.add_row(m, bv)
        };
        let q = proj(g, "attn.wq", "attn.bq", h)?;
        let k = proj(g, "attn.wk", "attn.bk", h)?;
        let v = proj(g, "attn.wv", "attn.bv", h)?;
        let a = g.causal_attention(q, k, v, seqs.len(), len, cfg.n_heads)?;
        let o = proj(g, "attn.wo", "attn.bo", a)?;
        x = g.add(x, o)?;
        let (g2, b2) = (leaf(g, &w("ln2.gain"))?, leaf(g, &w("ln2.bias"))?);
        let h2 = g.layer_norm(x, g2, b2)?;
        let m1 = proj(g, "mlp.w1", "mlp.b1", h2)?;
        let act = g.gelu(m1);
        let m2 = proj(g, "mlp.w2", "mlp.b2", act)?;
        x = g.add(x, m2)?;
    }

    let (fg, fb) = (leaf(g, "final_ln.gain")?, leaf(g, "final_ln.bias")?);
    let f = g.layer_norm(x, fg, fb)?;
    let hw = leaf(g, "head.w")?;
    let hb = leaf(g, "head.b")?;
    let lm = g.matmul(f, hw)?;
    let logits = g.add_row(lm, hb)?;
    let hidden = match cfg.feature_tap {
        FeatureTap::PostBlock => x,
        FeatureTap::PostFinalNorm => f,
    };
    Ok(ForwardVars { logits, hidden })
}

/// Logits and routing features of one sequence.
pub struct Forward {
    pub logits: Tensor,
    pub hidden: Tensor,
}

pub fn forward(tokens: &[Token], params: &ParamTree, cfg: &LmConfig) -> Result<Forward> {
    let mut g = Graph::new();
    let vars = build_forward(&mut g, params, cfg, &[tokens])?;
    Ok(Forward {
        logits: g.value(vars.logits).clone(),
        hidden: g.value(vars.hidden).clone(),
    })
}

/// `[T x V]` next-token logits; row `t` depends only on `tokens[..=t]`.
pub fn forward_lm(tokens: &[Token], params: &ParamTree, cfg: &LmConfig) -> Result<Tensor> {
    Ok(forward(tokens, params, cfg)?.logits)
}

/// `[T x D]` per-token features from the last block.
pub fn hidden_features(tokens: &[Token], params: &ParamTree, cfg: &LmConfig) -> Result<Tensor> {
    Ok(forward(tokens, params, cfg)?.hidden)
}

/// Mean negative log-likelihood over masked-in rows.
pub fn lm_loss(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    if targets.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(Error::Shape("targets/mask length".into()));
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mut buf = vec![0.0; logits.cols()];
    let mut total = 0.0;
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            let row = logits.row(r);
            total += softmax_into(row, &mut buf) - row[t];
        }
    }
    Ok(total / count as f64)
}

/// Training mask for a sequence of `len` tokens: row `t` predicts token
/// `t+1`, which is scored only when it lies at or beyond the prefix.
pub fn target_mask(len: usize, prefix_len: usize) -> Vec<bool> {
    (0..len.saturating_sub(1))
        .map(|t| t + 1 >= prefix_len)
        .collect()
}

/// Loss and gradient of a batch of whole sequences, excluding the
/// first `prefix_len` target tokens of each.
pub fn loss_and_grad(
    params: &ParamTree,
    cfg: &LmConfig,
    batch: &[&[Token]],
    prefix_len: usize,
) -> Result<(f64, ParamTree)> {
    let inputs: Vec<&[Token]> = batch.iter().map(|s| &s[..s.len() - 1]).collect();
    let mut g = Graph::new();
    let vars = build_forward(&mut g, params, cfg, &inputs)?;
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for s in batch {
        targets.extend(s[1..].iter().map(|&t| t as usize));
        mask.extend(target_mask(s.len(), prefix_len));
    }
    let loss = g.cross_entropy(vars.logits, targets, mask)?;
    let value = g.value(loss).item();
    Ok((value, g.backward(loss)?))
}

/// Per-token log-probabilities and features of a whole sequence:
/// `logprobs[t] = log p(tokens[t+1] | tokens[..=t])`.
pub struct SequenceScores {
    pub logprobs: Vec<f64>,
    pub hidden: Tensor,
}

pub fn score_sequence(
    tokens: &[Token],
    params: &ParamTree,
    cfg: &LmConfig,
) -> Result<SequenceScores> {
    let f = forward(tokens, params, cfg)?;
    let mut buf = vec![0.0; cfg.vocab_size];
    let logprobs = (0..tokens.len().saturating_sub(1))
        .map(|t| {
            let row = f.logits.row(t);
            row[tokens[t + 1] as usize] - softmax_into(row, &mut buf)
        })
        .collect();
    Ok(SequenceScores {
        logprobs,
        hidden: f.hidden,
    })
}
