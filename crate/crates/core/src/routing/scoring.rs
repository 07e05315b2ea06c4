use crate::error::{Error, Result};
use crate::model::{score_sequence, LmConfig, Token};
use crate::modular::PathSource;

/// Per-document, per-path log-likelihoods of the scored (post-prefix)
/// tokens. `tokens[d][p][i]` is the log-probability of token
/// `prefix_len + i` of document `d` under path `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub prefix_len: usize,
    pub totals: Vec<Vec<f64>>,
    pub tokens: Vec<Vec<Vec<f64>>>,
}

impl ScoreMatrix {
    pub fn docs(&self) -> usize {
        self.totals.len()
    }

    pub fn paths(&self) -> usize {
        self.totals.first().map_or(0, Vec::len)
    }

    /// Sum of scores of tokens at positions `[start, end)` of document `d`
    /// under path `p`; positions inside the prefix contribute nothing.
    pub fn window_sum(&self, d: usize, p: usize, start: usize, end: usize) -> f64 {
        let row = &self.tokens[d][p];
        let lo = start.max(self.prefix_len) - self.prefix_len;
        let hi = (end.max(self.prefix_len) - self.prefix_len).min(row.len());
        row.get(lo..hi.max(lo)).map_or(0.0, |s| s.iter().sum())
    }
}

/// Scores every document under every path with the training mask.
/// Paths are materialized one at a time.
pub fn score_paths(
    documents: &[&[Token]],
    paths: &(impl PathSource + ?Sized),
    cfg: &LmConfig,
    prefix_len: usize,
) -> Result<ScoreMatrix> {
    let n_paths = paths.num_paths();
    if n_paths == 0 {
        return Err(Error::Routing("no paths to score".into()));
    }
    let mut tokens = vec![Vec::with_capacity(n_paths); documents.len()];
    for p in 0..n_paths {
        let params = paths.path_params(p)?;
        for (d, doc) in documents.iter().enumerate() {
            if doc.len() <= prefix_len.max(1) {
                return Err(Error::SequenceTooShort {
                    len: doc.len(),
                    required: prefix_len.max(1) + 1,
                });
            }
            let s = score_sequence(doc, &params, cfg)?;
            tokens[d].push(s.logprobs[prefix_len.saturating_sub(1)..].to_vec());
        }
    }
    let totals = tokens
        .iter()
        .map(|per| per.iter().map(|t| t.iter().sum()).collect())
        .collect();
    Ok(ScoreMatrix {
        prefix_len,
        totals,
        tokens,
    })
}
