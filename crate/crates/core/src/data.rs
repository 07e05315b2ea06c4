//! Synthetic multi-domain token corpora with known domain labels.
//!
//! Each domain is a first-order Markov chain over a shared vocabulary. The
//! leading `prefix_len` tokens additionally mix in domain marker tokens,
//! which is what makes domains recoverable from prefixes alone. Labels are
//! kept next to the corpus for test oracles; routers never see them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Token;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: usize,
    /// Row-stochastic `[vocab x vocab]` matrix, row = current token.
    pub transitions: Vec<Vec<f64>>,
    /// Distribution of marker tokens injected into the prefix.
    pub prefix_bias: Vec<f64>,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let v = self.transitions.len();
        let stochastic = |row: &[f64]| {
            row.len() == v
                && row.iter().all(|p| p.is_finite() && *p >= 0.0)
                && (row.iter().sum::<f64>() - 1.0).abs() < 1e-9
        };
        if v < 2
            || !self.transitions.iter().all(|r| stochastic(r))
            || !stochastic(&self.prefix_bias)
        {
            return Err(Error::Config(format!(
                "domain {} has a degenerate transition matrix",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_domains: usize,
    pub seqs_per_domain: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub seed: u64,
    /// Probability that a sequence changes domain after its prefix.
    pub switch_prob: f64,
    pub prefix_len: usize,
    /// Probability that a prefix token is a domain marker.
    pub prefix_strength: f64,
    /// Preferred successors per token and the mass they share.
    pub successors: usize,
    pub peak_mass: f64,
    pub markers: usize,
    /// Domain-independent prefix styles; 0 disables them.
    pub styles: usize,
    /// Probability that a non-marker prefix token is a style marker.
    pub style_strength: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_domains: 4,
            seqs_per_domain: 200,
            seq_len: 64,
            vocab: 32,
            seed: 0,
            switch_prob: 0.0,
            prefix_len: 32,
            prefix_strength: 0.3,
            successors: 3,
            peak_mass: 0.85,
            markers: 4,
            styles: 0,
            style_strength: 0.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_domains == 0 || self.vocab < 2 || self.seq_len < 2 {
            return bad("corpus needs >=1 domain, vocab >= 2 and seq_len >= 2".into());
        }
        if !(0.0..=1.0).contains(&self.switch_prob) || !(0.0..=1.0).contains(&self.prefix_strength)
        {
            return bad("probabilities must lie in [0, 1]".into());
        }
        if self.successors == 0
            || self.successors > self.vocab
            || self.markers == 0
            || self.markers > self.vocab
        {
            return bad(format!("successors/markers must be in 1..={}", self.vocab));
        }
        if !(0.0..=1.0).contains(&self.style_strength) {
            return bad("style_strength must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.peak_mass) {
            return bad("peak_mass must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Which domain generated each stretch of a sequence: `(start, domain)`
/// pairs in increasing start order; the first starts at 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainLabel {
    pub segments: Vec<(usize, usize)>,
}

impl DomainLabel {
    pub fn single(domain: usize) -> Self {
        Self {
            segments: vec![(0, domain)],
        }
    }

    pub fn first(&self) -> usize {
        self.segments[0].1
    }

    pub fn at(&self, pos: usize) -> usize {
        self.segments
            .iter()
            .rev()
            .find(|(s, _)| *s <= pos)
            .map_or(self.first(), |(_, d)| *d)
    }

    pub fn switches(&self) -> bool {
        self.segments.len() > 1
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<Vec<Token>>,
    pub labels: Vec<DomainLabel>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn seq(&self, i: usize) -> &[Token] {
        &self.sequences[i]
    }
}

fn sample_index(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Domain definitions; a pure function of the config's seed and shape.
pub fn make_domains(cfg: &CorpusConfig) -> Result<Vec<DomainSpec>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD0_4A1B);
    let v = cfg.vocab;
    let tokens: Vec<usize> = (0..v).collect();
    let mut domains = Vec::with_capacity(cfg.n_domains);
    for id in 0..cfg.n_domains {
        let mut transitions = Vec::with_capacity(v);
        for _ in 0..v {
            let base = (1.0 - cfg.peak_mass) / v as f64;
            let mut row = vec![base; v];
            let picks: Vec<usize> = tokens
                .choose_multiple(&mut rng, cfg.successors)
                .copied()
                .collect();
            let weights: Vec<f64> = (0..cfg.successors)
                .map(|_| rng.random::<f64>() + 0.5)
                .collect();
            let total: f64 = weights.iter().sum();
            for (&t, w) in picks.iter().zip(&weights) {
                row[t] += cfg.peak_mass * w / total;
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
            transitions.push(row);
        }
        let mut prefix_bias = vec![0.0; v];
        for &t in tokens.choose_multiple(&mut rng, cfg.markers) {
            prefix_bias[t] = 1.0 / cfg.markers as f64;
        }
        domains.push(DomainSpec {
            id,
            transitions,
            prefix_bias,
        });
    }
    Ok(domains)
}

/// Marker distributions of the nuisance styles; empty when disabled.
pub fn make_styles(cfg: &CorpusConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57_1E5);
    let tokens: Vec<usize> = (0..cfg.vocab).collect();
    (0..cfg.styles)
        .map(|_| {
            let mut bias = vec![0.0; cfg.vocab];
            for &t in tokens.choose_multiple(&mut rng, cfg.markers) {
                bias[t] = 1.0 / cfg.markers as f64;
            }
            bias
        })
        .collect()
}

/// `generate` with the config's own domains and seed.
pub fn generate(cfg: &CorpusConfig) -> Result<Corpus> {
    let domains = make_domains(cfg)?;
    sample_corpus(&domains, cfg, cfg.seed)
}

/// Draws `seqs_per_domain` sequences per domain, shuffled. Different
/// `sample_seed`s over the same domains give train/validation splits.
pub fn sample_corpus(
    domains: &[DomainSpec],
    cfg: &CorpusConfig,
    sample_seed: u64,
) -> Result<Corpus> {
    cfg.validate()?;
    for d in domains {
        d.validate()?;
        if d.transitions.len() != cfg.vocab {
            return Err(Error::Config(
                "domain vocab differs from corpus vocab".into(),
            ));
        }
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(sample_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED);
    let mut order: Vec<usize> = (0..domains.len())
        .flat_map(|d| std::iter::repeat_n(d, cfg.seqs_per_domain))
        .collect();
    order.shuffle(&mut rng);
    let styles = make_styles(cfg);

    let mut corpus = Corpus::default();
    for first in order {
        let mut segments = vec![(0, first)];
        let switch_at = if domains.len() > 1 && rng.random::<f64>() < cfg.switch_prob {
            let lo = cfg.prefix_len.clamp(1, cfg.seq_len - 1);
            let at = rng.random_range(lo..cfg.seq_len);
            let mut other = rng.random_range(0..domains.len() - 1);
            if other >= first {
                other += 1;
            }
            segments.push((at, other));
            Some(at)
        } else {
            None
        };
        let style = (!styles.is_empty()).then(|| &styles[rng.random_range(0..styles.len())]);
        let mut seq = Vec::with_capacity(cfg.seq_len);
        let mut current = first;
        let mut prev = sample_index(&mut rng, &domains[first].prefix_bias);
        seq.push(prev as Token);
        for pos in 1..cfg.seq_len {
            if Some(pos) == switch_at {
                current = segments[1].1;
            }
            let d = &domains[current];
            let in_prefix = pos < cfg.prefix_len;
            let next = if in_prefix && rng.random::<f64>() < cfg.prefix_strength {
                sample_index(&mut rng, &d.prefix_bias)
            } else if let Some(bias) =
                style.filter(|_| in_prefix && rng.random::<f64>() < cfg.style_strength)
            {
                sample_index(&mut rng, bias)
            } else {
                sample_index(&mut rng, &d.transitions[prev])
            };
            seq.push(next as Token);
            prev = next;
        }
        corpus.sequences.push(seq);
        corpus.labels.push(DomainLabel { segments });
    }
    Ok(corpus)
}

/// Log-likelihood of a sequence's prefix under a domain's generative
/// model, marginalized over the nuisance styles.
pub fn prefix_log_likelihood(domain: &DomainSpec, cfg: &CorpusConfig, seq: &[Token]) -> f64 {
    let n = cfg.prefix_len.min(seq.len());
    if n == 0 {
        return 0.0;
    }
    let styles = make_styles(cfg);
    let under = |style: Option<&Vec<f64>>| {
        let mut ll = domain.prefix_bias[seq[0] as usize].max(1e-300).ln();
        for pos in 1..n {
            let (a, b) = (seq[pos - 1] as usize, seq[pos] as usize);
            let rest = match style {
                Some(bias) => {
                    cfg.style_strength * bias[b]
                        + (1.0 - cfg.style_strength) * domain.transitions[a][b]
                }
                None => domain.transitions[a][b],
            };
            let p =
                cfg.prefix_strength * domain.prefix_bias[b] + (1.0 - cfg.prefix_strength) * rest;
            ll += p.max(1e-300).ln();
        }
        ll
    };
    if styles.is_empty() {
        return under(None);
    }
    let lls: Vec<f64> = styles.iter().map(|s| under(Some(s))).collect();
    let m = lls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + (lls.iter().map(|l| (l - m).exp()).sum::<f64>() / lls.len() as f64).ln()
}

/// One sequence per line as space-separated token ids.
pub fn write_tokens(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut out = String::new();
    for s in &corpus.sequences {
        let line: Vec<String> = s.iter().map(|t| t.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// One line per sequence of `start:domain` segments.
pub fn write_labels(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut out = String::new();
    for l in &corpus.labels {
        let segs: Vec<String> = l.segments.iter().map(|(s, d)| format!("{s}:{d}")).collect();
        let _ = writeln!(out, "{}", segs.join(" "));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_tokens(path: &Path) -> Result<Vec<Vec<Token>>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|t| {
                    t.parse::<Token>().map_err(|_| {
                        Error::Parse(format!("{}:{}: bad token {t:?}", path.display(), i + 1))
                    })
                })
                .collect()
        })
        .collect()
}

pub fn read_labels(path: &Path) -> Result<Vec<DomainLabel>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let segments = line
                .split_whitespace()
                .map(|seg| {
                    let (s, d) = seg
                        .split_once(':')
                        .ok_or_else(|| Error::Parse(format!("bad label segment {seg:?}")))?;
                    let parse = |x: &str| {
                        x.parse::<usize>()
                            .map_err(|_| Error::Parse(format!("bad label segment {seg:?}")))
                    };
                    Ok((parse(s)?, parse(d)?))
                })
                .collect::<Result<Vec<_>>>()?;
            if segments.is_empty() {
                return Err(Error::Parse("empty label line".into()));
            }
            Ok(DomainLabel { segments })
        })
        .collect()
}

pub fn read_corpus(tokens: &Path, labels: Option<&Path>) -> Result<Corpus> {
    let sequences = read_tokens(tokens)?;
    let labels = match labels {
        Some(p) => read_labels(p)?,
        None => vec![DomainLabel::single(0); sequences.len()],
    };
    if labels.len() != sequences.len() {
        return Err(Error::Parse(
            "label count differs from sequence count".into(),
        ));
    }
    Ok(Corpus { sequences, labels })
}
