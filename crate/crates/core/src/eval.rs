//! Perplexity evaluation after the routing prefix, with optional
//! re-routing every `W` tokens.

use serde::{Deserialize, Serialize};

use crate::data::DomainLabel;
use crate::error::{Error, Result};
use crate::model::{score_sequence, LmConfig, SequenceScores, Token};
use crate::modular::PathSource;
use crate::params::ParamTree;
use crate::routing::{
    argmax, calibrate_bias, extract_prefix_feature, fit_logistic, CalibrationConfig, LinearRouter,
    LogRegConfig, Router,
};

/// Which model produces the features that re-route later chunks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    #[default]
    ActivePath,
    BaseModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Tokens per routing chunk; 0 routes once per sequence.
    pub route_every: usize,
    pub prefix_len: usize,
    pub feature_source: FeatureSource,
    pub early_stopped: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            route_every: 0,
            prefix_len: 32,
            feature_source: FeatureSource::ActivePath,
            early_stopped: true,
        }
    }
}

/// Chooses paths during evaluation.
pub trait RoutingPolicy {
    fn num_paths(&self) -> usize;

    /// Path for the first chunk, from the base model's prefix feature.
    fn route_prefix(&self, doc: usize, feature: &[f64]) -> usize;

    /// Path for the chunk starting at `end`, given the mean feature of the
    /// just-completed tokens `[start, end)`.
    fn route_chunk(&self, doc: usize, start: usize, end: usize, feature: &[f64]) -> usize;
}

/// Feature-based routing: a prefix router, and a chunk router for
/// re-routing (the prefix router is reused when none is given).
pub struct FeatureRouting<'a> {
    pub prefix: &'a dyn Router,
    pub chunk: Option<&'a dyn Router>,
}

impl RoutingPolicy for FeatureRouting<'_> {
    fn num_paths(&self) -> usize {
        self.prefix.num_paths()
    }

    fn route_prefix(&self, _doc: usize, feature: &[f64]) -> usize {
        self.prefix.route(feature)
    }

    fn route_chunk(&self, _doc: usize, _start: usize, _end: usize, feature: &[f64]) -> usize {
        self.chunk.unwrap_or(self.prefix).route(feature)
    }
}

/// Routes by the true generating domain of the last seen token.
pub struct OracleRouting<'a> {
    pub labels: &'a [DomainLabel],
    pub domain_to_path: Vec<usize>,
}

impl RoutingPolicy for OracleRouting<'_> {
    fn num_paths(&self) -> usize {
        self.domain_to_path.iter().max().map_or(0, |m| m + 1)
    }

    fn route_prefix(&self, doc: usize, _feature: &[f64]) -> usize {
        self.domain_to_path[self.labels[doc].first()]
    }

    fn route_chunk(&self, doc: usize, _start: usize, end: usize, _feature: &[f64]) -> usize {
        self.domain_to_path[self.labels[doc].at(end - 1)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocEval {
    pub nll: f64,
    pub tokens: usize,
    /// Path used for each chunk.
    pub paths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub route_every: usize,
    pub prefix_len: usize,
    pub docs: Vec<DocEval>,
    pub total_nll: f64,
    pub total_tokens: usize,
    pub ppl: f64,
    /// Number of chunks scored by each path.
    pub histogram: Vec<usize>,
    pub switches: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Chunk boundaries `[start, end)` over the scored positions.
pub fn chunk_bounds(len: usize, prefix_len: usize, route_every: usize) -> Vec<(usize, usize)> {
    if route_every == 0 {
        return vec![(prefix_len, len)];
    }
    (prefix_len..len)
        .step_by(route_every)
        .map(|s| (s, (s + route_every).min(len)))
        .collect()
}

fn check_doc(doc: &[Token], prefix_len: usize) -> Result<()> {
    if prefix_len == 0 || doc.len() < prefix_len + 1 {
        return Err(Error::SequenceTooShort {
            len: doc.len(),
            required: prefix_len.max(1) + 1,
        });
    }
    Ok(())
}

/// Lazily computed per-path scores of one document.
struct DocCache<'a> {
    doc: &'a [Token],
    paths: &'a [ParamTree],
    lm: &'a LmConfig,
    scores: Vec<Option<SequenceScores>>,
}

impl<'a> DocCache<'a> {
    fn get(&mut self, p: usize) -> Result<&SequenceScores> {
        if self.scores[p].is_none() {
            self.scores[p] = Some(score_sequence(self.doc, &self.paths[p], self.lm)?);
        }
        Ok(self.scores[p].as_ref().expect("just filled"))
    }
}

/// Scores `docs` with the paths picked by `policy`. Token `q` of a chunk
/// is scored by the chunk's path; the first `prefix_len` tokens never are.
pub fn evaluate(
    paths: &(impl PathSource + ?Sized),
    policy: &dyn RoutingPolicy,
    docs: &[&[Token]],
    base: &ParamTree,
    lm: &LmConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let n_paths = paths.num_paths();
    if policy.num_paths() > n_paths {
        return Err(Error::Routing(format!(
            "router addresses {} paths, model has {n_paths}",
            policy.num_paths()
        )));
    }
    let params: Vec<ParamTree> = (0..n_paths)
        .map(|p| paths.path_params(p))
        .collect::<Result<_>>()?;
    let mut report = EvalReport {
        route_every: cfg.route_every,
        prefix_len: cfg.prefix_len,
        docs: Vec::with_capacity(docs.len()),
        total_nll: 0.0,
        total_tokens: 0,
        ppl: f64::NAN,
        histogram: vec![0; n_paths],
        switches: 0,
    };
    for (d, doc) in docs.iter().enumerate() {
        check_doc(doc, cfg.prefix_len)?;
        let z = extract_prefix_feature(doc, base, lm, cfg.prefix_len)?;
        let mut cache = DocCache {
            doc,
            paths: &params,
            lm,
            scores: (0..n_paths).map(|_| None).collect(),
        };
        let base_hidden = match cfg.feature_source {
            FeatureSource::BaseModel if cfg.route_every > 0 => {
                Some(score_sequence(doc, base, lm)?.hidden)
            }
            _ => None,
        };
        let mut path = policy.route_prefix(d, &z);
        let mut nll = 0.0;
        let mut tokens = 0;
        let mut used = Vec::new();
        let mut prev: Option<(usize, usize)> = None;
        for (start, end) in chunk_bounds(doc.len(), cfg.prefix_len, cfg.route_every) {
            if let Some((ps, pe)) = prev {
                let feature = match &base_hidden {
                    Some(h) => h.mean_rows(ps, pe),
                    None => cache.get(path)?.hidden.mean_rows(ps, pe),
                };
                let next = policy.route_chunk(d, ps, pe, &feature);
                if next != path {
                    report.switches += 1;
                }
                path = next;
            }
            if path >= n_paths {
                return Err(Error::Routing(format!("route to path {path} of {n_paths}")));
            }
            let s = cache.get(path)?;
            for q in start..end {
                nll -= s.logprobs[q - 1];
                tokens += 1;
            }
            report.histogram[path] += 1;
            used.push(path);
            prev = Some((start, end));
        }
        report.total_nll += nll;
        report.total_tokens += tokens;
        report.docs.push(DocEval {
            nll,
            tokens,
            paths: used,
        });
    }
    report.ppl = (report.total_nll / report.total_tokens.max(1) as f64).exp();
    Ok(report)
}

/// Transduction targets of one document: for each scored position `j`,
/// the path with the largest summed log-likelihood over
/// `[j, min(len, j + window))`. `scores[p][i]` is the log-probability of
/// scored token `i` under path `p`.
pub fn transduction_targets(scores: &[Vec<f64>], window: usize) -> Vec<usize> {
    let n = scores.first().map_or(0, Vec::len);
    let p = scores.len();
    // Suffix sums turn every window into a difference.
    let suffix: Vec<Vec<f64>> = scores
        .iter()
        .map(|row| {
            let mut s = vec![0.0; n + 1];
            for i in (0..n).rev() {
                s[i] = s[i + 1] + row[i];
            }
            s
        })
        .collect();
    (0..n)
        .map(|j| {
            let end = if window == 0 { n } else { (j + window).min(n) };
            let sums: Vec<f64> = (0..p).map(|k| suffix[k][j] - suffix[k][end]).collect();
            argmax(&sums)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkRouterConfig {
    pub route_every: usize,
    pub prefix_len: usize,
    /// Target window in tokens; 0 covers the rest of the sequence.
    pub window: usize,
    pub feature_source: FeatureSource,
    pub logreg: LogRegConfig,
    pub calibration: CalibrationConfig,
}

impl Default for ChunkRouterConfig {
    fn default() -> Self {
        ChunkRouterConfig {
            route_every: 32,
            prefix_len: 32,
            window: 0,
            feature_source: FeatureSource::ActivePath,
            logreg: LogRegConfig::default(),
            calibration: CalibrationConfig::default(),
        }
    }
}

/// Linear router over completed-chunk mean features, trained to predict
/// the transduction target at the start of the next chunk. With
/// active-path features every path's view of each chunk is one example.
pub fn fit_chunk_router(
    router_docs: &[&[Token]],
    paths: &(impl PathSource + ?Sized),
    base: &ParamTree,
    lm: &LmConfig,
    cfg: &ChunkRouterConfig,
) -> Result<LinearRouter> {
    if cfg.route_every == 0 {
        return Err(Error::Config("chunk router needs route_every >= 1".into()));
    }
    let n_paths = paths.num_paths();
    let params: Vec<ParamTree> = (0..n_paths)
        .map(|p| paths.path_params(p))
        .collect::<Result<_>>()?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for doc in router_docs {
        check_doc(doc, cfg.prefix_len)?;
        let per_path: Vec<SequenceScores> = params
            .iter()
            .map(|p| score_sequence(doc, p, lm))
            .collect::<Result<_>>()?;
        let scored: Vec<Vec<f64>> = per_path
            .iter()
            .map(|s| s.logprobs[cfg.prefix_len - 1..].to_vec())
            .collect();
        let targets = transduction_targets(&scored, cfg.window);
        let base_hidden = match cfg.feature_source {
            FeatureSource::BaseModel => Some(score_sequence(doc, base, lm)?.hidden),
            FeatureSource::ActivePath => None,
        };
        let bounds = chunk_bounds(doc.len(), cfg.prefix_len, cfg.route_every);
        for w in bounds.windows(2) {
            let ((ps, pe), (next, _)) = (w[0], w[1]);
            let label = targets[next - cfg.prefix_len];
            match &base_hidden {
                Some(h) => {
                    features.push(h.mean_rows(ps, pe));
                    labels.push(label);
                }
                None => {
                    for s in &per_path {
                        features.push(s.hidden.mean_rows(ps, pe));
                        labels.push(label);
                    }
                }
            }
        }
    }
    if features.is_empty() {
        return Err(Error::Routing(
            "router documents hold no chunk boundary".into(),
        ));
    }
    let (mut router, _, _) = fit_logistic(&features, &labels, n_paths, &cfg.logreg)?;
    let mut target = vec![0.0; n_paths];
    labels
        .iter()
        .for_each(|&l| target[l] += 1.0 / labels.len() as f64);
    let total: f64 = target.iter().sum();
    target.iter_mut().for_each(|t| *t /= total);
    calibrate_bias(&mut router, &features, &target, &cfg.calibration)?;
    Ok(router)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let (ka, kb) = (
        a.iter().max().map_or(0, |m| m + 1),
        b.iter().max().map_or(0, |m| m + 1),
    );
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |c: usize| (c * c.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..kb)
        .map(|j| pairs(table.iter().map(|r| r[j]).sum()))
        .sum();
    let expected = rows * cols / pairs(n).max(1.0);
    let max = 0.5 * (rows + cols);
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ari_reference_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        // By hand: index 2, row pairs 3, column pairs 6, 15 pairs in all.
        let ari = adjusted_rand_index(&[0, 0, 1, 1, 2, 2], &[0, 0, 0, 1, 1, 1]);
        let expected: f64 = (2.0 - 3.0 * 6.0 / 15.0) / (0.5 * (3.0 + 6.0) - 3.0 * 6.0 / 15.0);
        assert!((expected - 0.8 / 3.3).abs() < 1e-12);
        assert!((ari - expected).abs() < 1e-15, "{ari} vs {expected}");
    }
    use crate::model::{forward_lm, init_params, lm_loss, target_mask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lm() -> LmConfig {
        LmConfig {
            vocab_size: 8,
            seq_len: 24,
            hidden_dim: 8,
            mlp_dim: 16,
            ..LmConfig::default()
        }
    }

    fn docs(n: usize) -> Vec<Vec<Token>> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..n)
            .map(|_| (0..24).map(|_| rng.random_range(0..8)).collect())
            .collect()
    }

    #[test]
    fn bounds() {
        assert_eq!(chunk_bounds(10, 4, 0), [(4, 10)]);
        assert_eq!(chunk_bounds(10, 4, 4), [(4, 8), (8, 10)]);
        assert_eq!(chunk_bounds(10, 4, 6), [(4, 10)]);
    }

    #[test]
    fn single_path_equals_exp_lm_loss_for_any_w() {
        let cfg = lm();
        let p = init_params(&cfg).unwrap();
        let ds = docs(3);
        let refs: Vec<&[Token]> = ds.iter().map(Vec::as_slice).collect();
        let router = LinearRouter {
            weight: crate::tensor::Tensor::zeros(&[1, 8]),
            bias: vec![0.0],
        };
        let policy = FeatureRouting {
            prefix: &router,
            chunk: None,
        };
        let mut total = 0.0;
        let mut count = 0.0;
        for d in &ds {
            let logits = forward_lm(&d[..23], &p, &cfg).unwrap();
            let t: Vec<usize> = d[1..].iter().map(|&x| x as usize).collect();
            let m = target_mask(24, 8);
            let c = m.iter().filter(|x| **x).count() as f64;
            total += c * lm_loss(&logits, &t, &m).unwrap();
            count += c;
        }
        let expect = (total / count).exp();
        let mut w0 = None;
        for w in [0, 1, 5, 16] {
            let r = evaluate(
                &vec![p.clone()],
                &policy,
                &refs,
                &p,
                &cfg,
                &EvalConfig {
                    route_every: w,
                    prefix_len: 8,
                    ..EvalConfig::default()
                },
            )
            .unwrap();
            assert!((r.ppl - expect).abs() < 1e-10 * expect);
            assert_eq!(r.switches, 0);
            if w == 16 {
                assert_eq!(
                    &r.docs,
                    &w0.as_ref().map(|x: &EvalReport| x.docs.clone()).unwrap()
                );
                assert_eq!(r.ppl, w0.as_ref().unwrap().ppl);
            }
            if w == 0 {
                w0 = Some(r);
            }
        }
    }

    #[test]
    fn targets_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let p = rng.random_range(1..5);
            let n = rng.random_range(1..20);
            let window = rng.random_range(0..n + 2);
            let s: Vec<Vec<f64>> = (0..p)
                .map(|_| (0..n).map(|_| -rng.random::<f64>() * 3.0).collect())
                .collect();
            let got = transduction_targets(&s, window);
            for j in 0..n {
                let end = if window == 0 { n } else { (j + window).min(n) };
                let mut best = 0;
                let mut best_sum = f64::NEG_INFINITY;
                for (k, row) in s.iter().enumerate() {
                    let sum: f64 = row[j..end].iter().sum();
                    if sum > best_sum + 1e-12 {
                        best_sum = sum;
                        best = k;
                    }
                }
                assert_eq!(got[j], best);
            }
        }
    }

    #[test]
    fn full_window_targets_equal_suffix_argmax() {
        let s = vec![vec![-1.0, -3.0, -0.1], vec![-2.0, -0.5, -0.2]];
        assert_eq!(transduction_targets(&s, 0), [1, 1, 0]);
        assert_eq!(transduction_targets(&[vec![-1.0, -2.0]], 1), [0, 0]);
    }
}
