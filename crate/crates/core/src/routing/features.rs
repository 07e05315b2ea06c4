use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{hidden_features, LmConfig, Token};
use crate::params::ParamTree;

/// Mean of the last-block hidden rows over the first `prefix_len` tokens.
pub fn extract_prefix_feature(
    tokens: &[Token],
    params: &ParamTree,
    cfg: &LmConfig,
    prefix_len: usize,
) -> Result<Vec<f64>> {
    if prefix_len == 0 || tokens.len() < prefix_len {
        return Err(Error::SequenceTooShort {
            len: tokens.len(),
            required: prefix_len.max(1),
        });
    }
    // Causality: the prefix rows do not depend on later tokens.
    let h = hidden_features(&tokens[..prefix_len], params, cfg)?;
    let z = h.mean_rows(0, prefix_len);
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prefix feature".into()));
    }
    Ok(z)
}

/// Prefix features of the given corpus documents, in order.
pub fn prefix_features(
    corpus: &Corpus,
    docs: &[usize],
    params: &ParamTree,
    cfg: &LmConfig,
    prefix_len: usize,
) -> Result<Vec<Vec<f64>>> {
    docs.iter()
        .map(|&d| extract_prefix_feature(corpus.seq(d), params, cfg, prefix_len))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn prefix_feature_matches_hidden_mean_and_is_causal() {
        let cfg = LmConfig {
            vocab_size: 8,
            seq_len: 16,
            hidden_dim: 8,
            mlp_dim: 16,
            ..LmConfig::default()
        };
        let p = init_params(&cfg).unwrap();
        let a: Vec<Token> = (0..16).map(|i| (i * 3 % 8) as Token).collect();
        let mut b = a.clone();
        b[12] = 7;
        b[15] = 1;
        let za = extract_prefix_feature(&a, &p, &cfg, 8).unwrap();
        let zb = extract_prefix_feature(&b, &p, &cfg, 8).unwrap();
        assert_eq!(za, zb);
        let full = hidden_features(&a, &p, &cfg).unwrap().mean_rows(0, 8);
        for (x, y) in za.iter().zip(&full) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(
            extract_prefix_feature(&a[..5], &p, &cfg, 8),
            Err(Error::SequenceTooShort { .. })
        ));
    }
}
