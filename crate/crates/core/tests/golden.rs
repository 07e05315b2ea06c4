//! Frozen forward-pass logits of the default model at its default seed.
//! Regenerate with `DIPACO_BLESS=1 cargo test -p dipaco-core --test golden`
//! after an intentional change to initialization or the forward pass.

use std::path::PathBuf;

use dipaco_core::io::{decode_golden, encode_golden};
use dipaco_core::model::{forward_lm, init_params, LmConfig, Token};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_logits.bin")
}

#[test]
fn default_model_logits_match_golden_file() {
    let lm = LmConfig::default();
    let params = init_params(&lm).unwrap();
    let tokens: Vec<Token> = (0..lm.seq_len)
        .map(|i| ((i * 7 + 3) % lm.vocab_size) as Token)
        .collect();
    let logits = forward_lm(&tokens, &params, &lm).unwrap();
    assert_eq!(logits.shape(), [lm.seq_len, lm.vocab_size]);
    let path = golden_path();
    if std::env::var_os("DIPACO_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, encode_golden(&logits)).unwrap();
    }
    let golden = decode_golden(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(golden.shape(), logits.shape());
    // Summation order inside dgemm may differ across CPU kernels.
    let diff = golden.max_abs_diff(&logits);
    assert!(diff < 1e-12, "max diff {diff}");
}
