use dipaco_core::data::{generate, Corpus, CorpusConfig};
use dipaco_core::model::{init_params, LmConfig};
use dipaco_core::modular::ModularConfig;
use dipaco_core::routing::{Shard, ShardSet};
use dipaco_core::trainer::{LoopState, TrainPlan, TrainRun, TrainState};

#[test]
fn resuming_from_a_saved_loop_state_is_bit_exact() {
    let lm = LmConfig {
        vocab_size: 16,
        seq_len: 12,
        hidden_dim: 8,
        n_heads: 2,
        mlp_dim: 16,
        n_blocks: 2,
        ..LmConfig::default()
    };
    let corpus = generate(&CorpusConfig {
        seq_len: 12,
        vocab: 16,
        prefix_len: 4,
        seqs_per_domain: 6,
        markers: 2,
        ..CorpusConfig::default()
    })
    .unwrap();
    let cfg = ModularConfig::for_lm(&lm, &[2, 1]).unwrap();
    let shards = ShardSet {
        num_docs: corpus.len(),
        overlap: 1,
        shards: (0..2)
            .map(|p| {
                let docs: Vec<usize> = (0..corpus.len()).filter(|d| d % 2 == p).collect();
                Shard {
                    path: p,
                    val: docs[..2].to_vec(),
                    train: docs[2..].to_vec(),
                }
            })
            .collect(),
        router_docs: vec![],
    };
    let full = TrainPlan {
        outer_steps: 4,
        inner_steps: 3,
        batch_size: 2,
        prefix_len: 4,
        early_stop: true,
        seed: 5,
        ..TrainPlan::default()
    };
    let init = init_params(&lm).unwrap();
    fn run<'a>(
        cfg: &'a ModularConfig,
        lm: &'a LmConfig,
        corpus: &'a Corpus,
        plan: &'a TrainPlan,
    ) -> TrainRun<'a> {
        TrainRun {
            cfg,
            lm,
            corpus,
            plan,
        }
    }
    let reference = run(&cfg, &lm, &corpus, &full)
        .train(&init, shards.clone(), None)
        .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = TrainPlan {
        outer_steps: 2,
        ..full.clone()
    };
    let start = LoopState::start(TrainState::new(&cfg, &init, shards, &first).unwrap());
    run(&cfg, &lm, &corpus, &first)
        .train_loop(start, None, &mut |s| s.save(dir.path()))
        .unwrap();
    let loaded = LoopState::load(dir.path(), &cfg, &full).unwrap();
    assert_eq!(loaded.next_step, 2);
    let resumed = run(&cfg, &lm, &corpus, &full)
        .train_loop(loaded, None, &mut |_| Ok(()))
        .unwrap();

    assert!(resumed.store.bit_eq(&reference.store));
    assert_eq!(resumed.metrics.len(), reference.metrics.len());
    for (a, b) in resumed.metrics.iter().zip(&reference.metrics) {
        assert_eq!((a.step, a.path, a.split), (b.step, b.path, b.split));
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }
    for (a, b) in resumed.selected.iter().zip(&reference.selected) {
        let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
        assert_eq!(a.0, b.0);
        assert!(a.1.bit_eq(&b.1));
    }
}
