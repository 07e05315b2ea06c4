//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test -p dipaco-core --test acceptance -- 1 7`.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use dipaco_core::data::{generate, Corpus, CorpusConfig};
use dipaco_core::experiment::{
    alternation_trial, corpus_features, docs_of, evaluate_run, evaluate_with_chunks,
    fit_run_chunk_router, make_dataset, make_shards, pretrain, train_mode, Dataset,
    ExperimentConfig, TrainMode,
};
use dipaco_core::harness::{run_simulation, FaultPlan, HarnessConfig, RowKind};
use dipaco_core::model::{init_params, loss_and_grad, LmConfig, Token};
use dipaco_core::modular::{materialize_path, ModularConfig, ModuleKey};
use dipaco_core::optim::{
    adamw_step_accum, sgd_step, AdamWConfig, AdamWState, LrSchedule, OuterConfig,
};
use dipaco_core::params::ParamTree;
use dipaco_core::routing::{
    calibrate_bias, fit_discriminative, hard_marginal, kmeans_assign, kmeans_fit, pair_id,
    product_kmeans_assign, shard_dataset, CalibrationConfig, Centroids, DiscriminativeConfig,
    LinearRouter, ProductCentroids, Router, ScoreMatrix, Shard, ShardConfig, ShardSet, TargetDist,
};
use dipaco_core::tensor::Tensor;
use dipaco_core::trainer::{
    compute_outer_delta, nll_on_docs, task_seed, Contribution, InnerOpt, MetricSplit, TrainPlan,
    TrainRun,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<(bool, String), String>;

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn within(t0: Instant, limit: Duration) -> (bool, String) {
    let el = t0.elapsed();
    (
        el < limit,
        format!("{:.1}s/{}s", el.as_secs_f64(), limit.as_secs()),
    )
}

// ---------------------------------------------------------------- fixtures

fn tiny_lm() -> LmConfig {
    LmConfig {
        vocab_size: 16,
        seq_len: 16,
        hidden_dim: 16,
        n_heads: 2,
        mlp_dim: 32,
        n_blocks: 2,
        ..LmConfig::default()
    }
}

fn tiny_corpus(per_domain: usize) -> Corpus {
    generate(&CorpusConfig {
        seq_len: 16,
        vocab: 16,
        prefix_len: 4,
        seqs_per_domain: per_domain,
        markers: 2,
        ..CorpusConfig::default()
    })
    .unwrap()
}

fn sample_batch<'a>(
    corpus: &'a Corpus,
    docs: &[usize],
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<&'a [Token]> {
    (0..batch)
        .map(|_| corpus.seq(docs[rng.random_range(0..docs.len())]))
        .collect()
}

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

/// Shard `p` feeds path `p`, documents dealt round-robin; the first of
/// each shard is held out for validation when `val` is set.
fn round_robin(n: usize, paths: usize, val: bool) -> ShardSet {
    ShardSet {
        num_docs: n,
        overlap: 1,
        shards: (0..paths)
            .map(|p| {
                let docs: Vec<usize> = (0..n).filter(|d| d % paths == p).collect();
                let split = usize::from(val);
                Shard {
                    path: p,
                    train: docs[split..].to_vec(),
                    val: docs[..split].to_vec(),
                }
            })
            .collect(),
        router_docs: vec![],
    }
}

// ---------------------------------------------------------------- 1

fn gradcheck() -> Outcome {
    let t0 = Instant::now();
    let lm = LmConfig {
        vocab_size: 12,
        seq_len: 10,
        hidden_dim: 12,
        n_heads: 2,
        mlp_dim: 24,
        n_blocks: 2,
        seed: 3,
        ..LmConfig::default()
    };
    let params = init_params(&lm).map_err(e)?;
    let n_params = params.num_params();
    if n_params > 5000 {
        return Ok((false, format!("{n_params} parameters")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seqs: Vec<Vec<Token>> = (0..2)
        .map(|_| {
            (0..lm.seq_len)
                .map(|_| rng.random_range(0..12) as Token)
                .collect()
        })
        .collect();
    let batch: Vec<&[Token]> = seqs.iter().map(Vec::as_slice).collect();
    let loss = |p: &ParamTree| loss_and_grad(p, &lm, &batch, 2).map(|(l, _)| l);
    let (_, grads) = loss_and_grad(&params, &lm, &batch, 2).map_err(e)?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for (name, t) in params.iter() {
        for i in 0..t.len() {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[i] += h;
            let up = loss(&p).map_err(e)?;
            p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * h;
            let down = loss(&p).map_err(e)?;
            let fd = (up - down) / (2.0 * h);
            let an = grads.get(name).unwrap().data()[i];
            // Floored so that gradients that vanish identically (key
            // biases under softmax shift invariance) compare absolutely.
            let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_at = format!("{name}[{i}] (fd {fd:.3e}, autodiff {an:.3e})");
            }
        }
    }
    let (fast, time) = within(t0, Duration::from_secs(30));
    Ok((
        worst < 1e-4 && fast,
        format!("{n_params} params, max rel err {worst:.2e} at {worst_at}, {time}"),
    ))
}

// ---------------------------------------------------------------- 2

fn degeneracy_sgd() -> Outcome {
    let (lm, corpus) = (tiny_lm(), tiny_corpus(12));
    let cfg = ModularConfig::for_lm(&lm, &[1]).map_err(e)?;
    let init = init_params(&lm).map_err(e)?;
    let docs: Vec<usize> = (0..corpus.len()).collect();
    let shards = ShardSet {
        num_docs: corpus.len(),
        overlap: 1,
        shards: vec![Shard {
            path: 0,
            train: docs.clone(),
            val: vec![],
        }],
        router_docs: vec![],
    };
    let lr = 0.05;
    let plan = TrainPlan {
        outer_steps: 200,
        inner_steps: 1,
        batch_size: 2,
        prefix_len: 4,
        inner: InnerOpt::Sgd { lr },
        outer: OuterConfig {
            lr: 1.0,
            momentum: 0.0,
        },
        early_stop: false,
        seed: 11,
        ..TrainPlan::default()
    };
    let out = run(&cfg, &lm, &corpus, &plan)
        .train(&init, shards, None)
        .map_err(e)?;
    let mut p = init.clone();
    for t in 0..plan.outer_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(task_seed(plan.seed, t, 0));
        let batch = sample_batch(&corpus, &docs, plan.batch_size, &mut rng);
        let (_, g) = loss_and_grad(&p, &lm, &batch, plan.prefix_len).map_err(e)?;
        sgd_step(&mut p, &g, lr).map_err(e)?;
    }
    let got = materialize_path(&out.store, &cfg, 0).map_err(e)?;
    Ok((
        got.bit_eq(&p) && !p.bit_eq(&init),
        format!("200 steps, max diff {:.1e}", got.max_abs_diff(&p)),
    ))
}

// ---------------------------------------------------------------- 3

/// DiLoCo by hand: AdamW replicas from the global parameters, shard-size
/// weighted mean update, Nesterov outer step.
fn reference_diloco(
    init: &ParamTree,
    corpus: &Corpus,
    lm: &LmConfig,
    shards: &ShardSet,
    plan: &TrainPlan,
    adam: &AdamWConfig,
) -> Result<ParamTree, String> {
    let mut theta = init.clone();
    let mut velocity = init.zeros_like();
    let mut states: Vec<AdamWState> = shards
        .shards
        .iter()
        .map(|_| AdamWState::new(init, adam.clone()))
        .collect();
    let total: usize = shards.shards.iter().map(|s| s.train.len()).sum();
    for t in 0..plan.outer_steps {
        let mut delta = theta.zeros_like();
        for (i, s) in shards.shards.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(task_seed(plan.seed, t, i));
            let mut local = theta.clone();
            let mut acc = theta.zeros_like();
            for _ in 0..plan.inner_steps {
                let batch = sample_batch(corpus, &s.train, plan.batch_size, &mut rng);
                let (_, g) = loss_and_grad(&local, lm, &batch, plan.prefix_len).map_err(e)?;
                adamw_step_accum(&mut local, &g, &mut states[i], Some(&mut acc)).map_err(e)?;
            }
            let alpha = s.train.len() as f64 / total as f64;
            if i == 0 {
                acc.scale(alpha);
                delta = acc;
            } else {
                delta.axpy(alpha, &acc).map_err(e)?;
            }
        }
        let (lr, mu) = (plan.outer.lr, plan.outer.momentum);
        for (((_, p), (_, d)), (_, v)) in
            theta.iter_mut().zip(delta.iter()).zip(velocity.iter_mut())
        {
            for ((p, d), v) in p.data_mut().iter_mut().zip(d.data()).zip(v.data_mut()) {
                *v = mu * *v + d;
                *p -= lr * (mu * *v + d);
            }
        }
    }
    Ok(theta)
}

fn degeneracy_diloco() -> Outcome {
    let (lm, corpus) = (tiny_lm(), tiny_corpus(12));
    let cfg = ModularConfig::for_lm(&lm, &[1, 1]).map_err(e)?;
    let init = init_params(&lm).map_err(e)?;
    let workers = 4;
    let shards = ShardSet::iid(
        corpus.len(),
        workers,
        0,
        &ShardConfig {
            val_frac: 0.1,
            router_data_frac: 0.0,
            seed: 2,
            ..ShardConfig::default()
        },
    )
    .map_err(e)?;
    let adam = AdamWConfig {
        schedule: LrSchedule::cosine(3e-3, 2, 15),
        ..AdamWConfig::default()
    };
    let plan = TrainPlan {
        outer_steps: 5,
        inner_steps: 3,
        batch_size: 2,
        prefix_len: 4,
        inner: InnerOpt::Adamw(adam.clone()),
        early_stop: false,
        seed: 5,
        ..TrainPlan::default()
    };
    let out = run(&cfg, &lm, &corpus, &plan)
        .train(&init, shards.clone(), None)
        .map_err(e)?;
    let reference = reference_diloco(&init, &corpus, &lm, &shards, &plan, &adam)?;
    let got = materialize_path(&out.store, &cfg, 0).map_err(e)?;
    Ok((
        got.bit_eq(&reference) && shards.len() == workers,
        format!(
            "P={workers}, T=5, max diff {:.1e}",
            got.max_abs_diff(&reference)
        ),
    ))
}

// ---------------------------------------------------------------- 4

fn flat_isolation() -> Outcome {
    let (lm, corpus) = (tiny_lm(), tiny_corpus(12));
    let k = 4;
    let cfg = ModularConfig::flat(&lm, k).map_err(e)?;
    if cfg.num_levels() != 1 || cfg.path_count() != k {
        return Ok((false, "layout is not L=1, K=4".into()));
    }
    let init = init_params(&lm).map_err(e)?;
    let plan = TrainPlan {
        outer_steps: 3,
        inner_steps: 2,
        batch_size: 2,
        prefix_len: 4,
        early_stop: false,
        seed: 1,
        ..TrainPlan::default()
    };
    let base = round_robin(corpus.len(), k, false);
    let r = run(&cfg, &lm, &corpus, &plan);
    let reference = r.train(&init, base.clone(), None).map_err(e)?;
    let paths = |o: &dipaco_core::trainer::TrainOutcome| -> Result<Vec<ParamTree>, String> {
        (0..k)
            .map(|p| materialize_path(&o.store, &cfg, p).map_err(e))
            .collect()
    };
    let ref_paths = paths(&reference)?;
    let mut ok = true;
    let mut changed = 0;
    for j in 0..k {
        // Path j trains on different data; every other path must not notice.
        let mut altered = base.clone();
        altered.shards[j].train.reverse();
        altered.shards[j].train.truncate(3);
        let got = paths(&r.train(&init, altered, None).map_err(e)?)?;
        for p in 0..k {
            if p == j {
                changed += usize::from(!got[p].bit_eq(&ref_paths[p]));
            } else {
                ok &= got[p].bit_eq(&ref_paths[p]);
            }
        }
    }
    let moved = ref_paths.iter().filter(|p| !p.bit_eq(&init)).count();
    Ok((
        ok && changed == k && moved == k,
        format!("{k} perturbations, other paths identical: {ok}, perturbed paths changed: {changed}/{k}"),
    ))
}

// ---------------------------------------------------------------- 5

fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    let g = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| (0..d).map(|_| g.sample(rng)).collect())
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn routing_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut bad = BTreeMap::<&str, usize>::new();
    let instances = 1000;
    for _ in 0..instances {
        let d = rng.random_range(1..6) * 2;
        let k = rng.random_range(1..9);
        let centers = random_points(&mut rng, k, d);
        let z = random_points(&mut rng, 1, d).remove(0);
        let c = Centroids {
            centers: centers.clone(),
        };

        // Nearest centroid, lowest index on ties.
        let mut best = 0;
        for i in 1..k {
            if dist(&z, &centers[i]) < dist(&z, &centers[best]) {
                best = i;
            }
        }
        if kmeans_assign(&z, &c) != best {
            *bad.entry("kmeans").or_default() += 1;
        }

        // Product pair: scan every pair of half-centroids.
        let k2 = rng.random_range(1..6);
        let h = d / 2;
        let first = random_points(&mut rng, k, h);
        let second = random_points(&mut rng, k2, h);
        let mut best_pair = (0, 0);
        let mut best_cost = f64::INFINITY;
        for i in 0..k {
            for j in 0..k2 {
                let cost = dist(&z[..h], &first[i]) + dist(&z[h..], &second[j]);
                if cost < best_cost {
                    best_cost = cost;
                    best_pair = (i, j);
                }
            }
        }
        let pc = ProductCentroids {
            first: Centroids { centers: first },
            second: Centroids { centers: second },
        };
        if product_kmeans_assign(&z, &pc).map_err(e)? != best_pair
            || pc.route(&z) != pair_id(best_pair.0, best_pair.1, k2)
        {
            *bad.entry("product").or_default() += 1;
        }

        // Top-2 overlap: the two nearest centroids and nothing else.
        if k >= 2 {
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| {
                dist(&z, &centers[a])
                    .total_cmp(&dist(&z, &centers[b]))
                    .then(a.cmp(&b))
            });
            let want = vec![order[0], order[1]];
            let feats = vec![z.clone()];
            let set = shard_dataset(
                &c,
                &feats,
                &ShardConfig {
                    overlap: 2,
                    val_frac: 0.0,
                    router_data_frac: 0.0,
                    ..ShardConfig::default()
                },
            )
            .map_err(e)?;
            let mut holders: Vec<usize> = set
                .shards
                .iter()
                .filter(|s| s.train.contains(&0))
                .map(|s| s.path)
                .collect();
            holders.sort_unstable();
            let mut sorted_want = want.clone();
            sorted_want.sort_unstable();
            if c.top_n(&z, 2) != want || holders != sorted_want {
                *bad.entry("top2").or_default() += 1;
            }
        }
    }

    let mut non_monotone = 0;
    for s in 0..50u64 {
        let n = rng.random_range(20..120);
        let d = rng.random_range(1..8);
        let k = rng.random_range(1..7);
        let pts = random_points(&mut rng, n, d);
        let fit = kmeans_fit(&pts, k, 50, s).map_err(e)?;
        if fit.objective_trace.windows(2).any(|w| w[1] > w[0]) {
            non_monotone += 1;
        }
    }
    let mismatches: usize = bad.values().sum();
    Ok((
        mismatches == 0 && non_monotone == 0,
        format!(
            "{instances} instances, mismatches {bad:?}, non-monotone Lloyd traces {non_monotone}/50"
        ),
    ))
}

// ---------------------------------------------------------------- 6

fn discriminative_router() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (n, classes, d) = (500, 8, 6);
    let noise = Normal::new(0.0, 0.6).unwrap();
    let means = random_points(&mut rng, classes, d)
        .into_iter()
        .map(|m| m.into_iter().map(|v| 4.0 * v).collect::<Vec<f64>>())
        .collect::<Vec<_>>();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let feats: Vec<Vec<f64>> = labels
        .iter()
        .map(|&c| {
            means[c]
                .iter()
                .map(|m| m + noise.sample(&mut rng))
                .collect()
        })
        .collect();
    // Path scores whose argmax is the true class.
    let totals: Vec<Vec<f64>> = labels
        .iter()
        .map(|&c| {
            (0..classes)
                .map(|p| {
                    if p == c {
                        -1.0
                    } else {
                        -2.0 - rng.random::<f64>()
                    }
                })
                .collect()
        })
        .collect();
    let scores = ScoreMatrix {
        prefix_len: 0,
        tokens: vec![vec![]; n],
        totals,
    };
    let fit = fit_discriminative(&feats, &scores, &DiscriminativeConfig::default()).map_err(e)?;
    let hits = feats
        .iter()
        .zip(&labels)
        .filter(|(z, &y)| fit.router.route(z) == y)
        .count();
    let recovery = hits as f64 / n as f64;

    // Calibration from a badly skewed router on overlapping features.
    let g = Normal::new(0.0, 1.0).unwrap();
    let cal_feats: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| g.sample(&mut rng)).collect())
        .collect();
    let weight = Tensor::new(
        vec![classes, d],
        (0..classes * d).map(|_| g.sample(&mut rng)).collect(),
    )
    .map_err(e)?;
    let mut skewed = LinearRouter {
        weight,
        bias: (0..classes).map(|c| 3.0 - c as f64).collect(),
    };
    let target: Vec<f64> = vec![1.0 / classes as f64; classes];
    let before = tv(&hard_marginal(&skewed, &cal_feats), &target);
    calibrate_bias(
        &mut skewed,
        &cal_feats,
        &target,
        &CalibrationConfig::default(),
    )
    .map_err(e)?;
    let after = tv(&hard_marginal(&skewed, &cal_feats), &target);

    // The fitted discriminative router against a custom target.
    let custom: Vec<f64> = {
        let raw: Vec<f64> = (0..classes).map(|c| 1.0 + c as f64).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    };
    let cfg = DiscriminativeConfig {
        target: TargetDist::Custom(custom.clone()),
        ..DiscriminativeConfig::default()
    };
    let custom_fit = fit_discriminative(&cal_feats, &scores, &cfg).map_err(e)?;
    let custom_tv = tv(&hard_marginal(&custom_fit.router, &cal_feats), &custom);

    Ok((
        recovery >= 0.95 && after <= 0.05 && custom_tv <= 0.05,
        format!(
            "label recovery {recovery:.3}, calibration TV {before:.3} -> {after:.4}, custom-target TV {custom_tv:.4}"
        ),
    ))
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

// ---------------------------------------------------------------- 7

fn tree(values: Vec<f64>) -> ParamTree {
    let mut t = ParamTree::new();
    t.insert("w", Tensor::new(vec![values.len()], values).unwrap());
    t
}

fn outer_algebra() -> Outcome {
    let key = ModuleKey::new(0, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut notes = Vec::new();

    let mut equal_ok = true;
    for p in 1..=8 {
        let contributions: Vec<Contribution> = (0..p)
            .map(|i| Contribution {
                shard: i,
                shard_size: 100,
                delta: tree((0..16).map(|_| rng.random::<f64>() - 0.5).collect()),
            })
            .collect();
        let reweighed = compute_outer_delta(key, &contributions, true, false).map_err(e)?;
        let uniform = compute_outer_delta(key, &contributions, false, false).map_err(e)?;
        equal_ok &= reweighed.delta.bit_eq(&uniform.delta);
    }
    notes.push(format!("equal-shard reweigh == uniform: {equal_ok}"));

    // Basis deltas expose the weights directly.
    let contributions = vec![
        Contribution {
            shard: 0,
            shard_size: 100,
            delta: tree(vec![1.0, 0.0]),
        },
        Contribution {
            shard: 1,
            shard_size: 300,
            delta: tree(vec![0.0, 1.0]),
        },
    ];
    let d = compute_outer_delta(key, &contributions, true, false).map_err(e)?;
    let alpha = d.delta.get("w").unwrap().data().to_vec();
    let alpha_ok = alpha == [0.25, 0.75];
    notes.push(format!("alpha {alpha:?}"));

    let mut rescale_ok = true;
    let mut worst = 0.0f64;
    for p in 1..=8usize {
        let contributions: Vec<Contribution> = (0..p)
            .map(|i| Contribution {
                shard: i,
                shard_size: 10 + i,
                delta: tree((0..16).map(|_| rng.random::<f64>() - 0.5).collect()),
            })
            .collect();
        let plain = compute_outer_delta(key, &contributions, true, false).map_err(e)?;
        let scaled = compute_outer_delta(key, &contributions, true, true).map_err(e)?;
        let mut expect = plain.delta.clone();
        expect.scale((p as f64).sqrt());
        rescale_ok &= scaled.delta.bit_eq(&expect) && scaled.contributors == p;
        let ratio = scaled.delta.norm() / plain.delta.norm();
        worst = worst.max((ratio - (p as f64).sqrt()).abs());
    }
    rescale_ok &= worst < 1e-12;
    notes.push(format!(
        "sqrt rescale exact for P=1..8, norm ratio err {worst:.1e}"
    ));
    Ok((equal_ok && alpha_ok && rescale_ok, notes.join(", ")))
}

// ---------------------------------------------------------------- 8

fn harness_equivalence() -> Outcome {
    let t0 = Instant::now();
    let lm = LmConfig::default();
    let corpus = generate(&CorpusConfig {
        seqs_per_domain: 40,
        ..CorpusConfig::default()
    })
    .map_err(e)?;
    let cfg = ModularConfig::for_lm(&lm, &[2, 2]).map_err(e)?;
    let init = init_params(&lm).map_err(e)?;
    let plan = TrainPlan {
        outer_steps: 6,
        inner_steps: 20,
        batch_size: 4,
        prefix_len: CorpusConfig::default().prefix_len,
        early_stop: true,
        seed: 3,
        ..TrainPlan::default()
    };
    let shards = round_robin(corpus.len(), 4, true);
    let r = run(&cfg, &lm, &corpus, &plan);
    let reference = r.train(&init, shards.clone(), None).map_err(e)?;
    let hcfg = HarnessConfig {
        ticks_per_step: 0.5,
        ..HarnessConfig::default()
    };
    let simulate = |faults: &FaultPlan| {
        let dir = tempfile::tempdir().map_err(e)?;
        run_simulation(&r, &init, shards.clone(), &hcfg, faults, dir.path()).map_err(e)
    };
    let matches = |sim: &dipaco_core::harness::SimOutcome| {
        sim.store.bit_eq(&reference.store)
            && sim.metrics.len() == reference.metrics.len()
            && sim
                .metrics
                .iter()
                .zip(&reference.metrics)
                .all(|(a, b)| a.loss.to_bits() == b.loss.to_bits())
            && sim
                .selected
                .iter()
                .zip(&reference.selected)
                .all(|(a, b)| match (a, b) {
                    (Some((ma, pa)), Some((mb, pb))) => ma.step == mb.step && pa.bit_eq(pb),
                    (None, None) => true,
                    _ => false,
                })
    };
    let once = |sim: &dipaco_core::harness::SimOutcome| {
        let mut per: BTreeMap<(usize, usize), Vec<ModuleKey>> = BTreeMap::new();
        for row in sim.registry.rows() {
            if row.kind == RowKind::Contribution {
                if let (Some(shard), Some(m)) = (row.shard, row.module) {
                    per.entry((row.phase, shard)).or_default().push(m);
                }
            }
        }
        let mut ok = per.len() == plan.outer_steps * 4;
        for ((_, path), mods) in &per {
            let want = cfg.path_modules(*path).unwrap();
            let mut got = mods.clone();
            got.sort();
            ok &= got == want;
        }
        ok
    };
    let clean = simulate(&FaultPlan::none())?;
    let faults = FaultPlan::preempt_every_worker_each_phase(hcfg.workers, plan.outer_steps);
    let faulty = simulate(&faults)?;
    let preempted = faulty.count_events("preempted");
    let ok = [
        matches(&clean),
        once(&clean),
        matches(&faulty),
        once(&faulty),
    ];
    let (fast, time) = within(t0, Duration::from_secs(300));
    Ok((
        ok.iter().all(|&b| b) && preempted >= hcfg.workers * plan.outer_steps && fast,
        format!(
            "empty plan identical {}, once {}; preempted plan ({preempted} preemptions) identical {}, once {}; {time}",
            ok[0], ok[1], ok[2], ok[3]
        ),
    ))
}

// ---------------------------------------------------------------- 9-11

struct Prepared {
    cfg: ExperimentConfig,
    ds: Dataset,
    base: ParamTree,
    feats: Vec<Vec<f64>>,
}

fn prepare(cfg: ExperimentConfig) -> Result<Prepared, String> {
    let ds = make_dataset(&cfg.data, &cfg.test).map_err(e)?;
    let (base, _) = pretrain(
        &cfg.model,
        &ds.train,
        &[],
        &cfg.pretrain,
        cfg.data.prefix_len,
    )
    .map_err(e)?;
    let feats = corpus_features(&ds.train, &base, &cfg.model, cfg.data.prefix_len).map_err(e)?;
    Ok(Prepared {
        cfg,
        ds,
        base,
        feats,
    })
}

fn seeded(seed: u64, outer: usize, inner: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.seed = seed;
    cfg.data.seqs_per_domain = 2000;
    cfg.model.seed = seed;
    cfg.pretrain.seed = seed;
    cfg.routing.seed = seed;
    cfg.plan.seed = seed;
    cfg.plan.outer_steps = outer;
    cfg.plan.inner_steps = inner;
    cfg.plan.inner = InnerOpt::Adamw(AdamWConfig {
        schedule: LrSchedule::cosine(3e-3, 50, (outer * inner) as u64),
        ..AdamWConfig::default()
    });
    cfg
}

fn test_ppl(p: &Prepared, mode: TrainMode) -> Result<f64, String> {
    let (shards, router) = make_shards(&p.cfg, mode, &p.feats).map_err(e)?;
    let run =
        train_mode(&p.cfg, mode, &p.ds.train, &p.feats, &p.base, shards, router).map_err(e)?;
    let docs = docs_of(&p.ds.test);
    Ok(
        evaluate_run(&run, &docs, &p.base, &p.cfg.model, &p.cfg.eval)
            .map_err(e)?
            .ppl,
    )
}

fn more_paths_generalize() -> Outcome {
    let t0 = Instant::now();
    let mut votes = 0;
    let mut rows = Vec::new();
    for seed in 0..3 {
        let p = prepare(seeded(seed, 20, 100))?;
        if p.cfg.plan.outer_steps * p.cfg.plan.inner_steps != 2000 {
            return Ok((false, "T*tau != 2000".into()));
        }
        let dense = test_ppl(&p, TrainMode::Dense)?;
        let grid = test_ppl(&p, TrainMode::Dipaco)?;
        let flat = test_ppl(&p, TrainMode::Flat)?;
        let holds = dense > grid && grid >= flat;
        votes += usize::from(holds);
        rows.push(format!(
            "seed {seed}: {dense:.3} > {grid:.3} >= {flat:.3} {holds}"
        ));
    }
    let (fast, time) = within(t0, Duration::from_secs(900));
    Ok((
        votes >= 2 && fast,
        format!(
            "dense > 2x2 >= flat-4 [{}], {votes}/3 seeds, {time}",
            rows.join("; ")
        ),
    ))
}

fn frequent_routing() -> Outcome {
    let mut ok_seeds = 0;
    let mut exact = true;
    let mut rows = Vec::new();
    for seed in 0..3 {
        let mut cfg = seeded(seed, 10, 100);
        cfg.data.seq_len = 128;
        cfg.model.seq_len = 128;
        cfg.test.switch_prob = 0.5;
        cfg.test.seqs_per_domain = 200;
        let p = prepare(cfg)?;
        let cfg = &p.cfg;
        let (shards, router) = make_shards(cfg, TrainMode::Dipaco, &p.feats).map_err(e)?;
        let run = train_mode(
            cfg,
            TrainMode::Dipaco,
            &p.ds.train,
            &p.feats,
            &p.base,
            shards,
            router,
        )
        .map_err(e)?;
        let docs = docs_of(&p.ds.test);
        let w0 = evaluate_run(&run, &docs, &p.base, &cfg.model, &cfg.eval).map_err(e)?;
        let mut ec = cfg.eval.clone();
        ec.route_every = 32;
        let chunk = fit_run_chunk_router(
            &run,
            &docs_of(&p.ds.chunk_router),
            &p.base,
            &cfg.model,
            &ec,
            &cfg.routing,
        )
        .map_err(e)?;
        let w32 =
            evaluate_with_chunks(&run, Some(&chunk), &docs, &p.base, &cfg.model, &ec).map_err(e)?;
        ec.route_every = cfg.data.seq_len;
        let full =
            evaluate_with_chunks(&run, Some(&chunk), &docs, &p.base, &cfg.model, &ec).map_err(e)?;
        exact &= full.ppl.to_bits() == w0.ppl.to_bits();
        ok_seeds += usize::from(w32.ppl <= w0.ppl);
        rows.push(format!(
            "seed {seed}: W=32 {:.4} vs W=0 {:.4}, full {:.4}",
            w32.ppl, w0.ppl, full.ppl
        ));
    }
    Ok((
        ok_seeds == 3 && exact,
        format!("{}; full length == W=0: {exact}", rows.join("; ")),
    ))
}

fn discriminative_phase() -> Outcome {
    let mut decreased = 0;
    let mut increased = 0;
    let mut rows = Vec::new();
    for seed in 0..3 {
        let mut cfg = seeded(seed, 20, 100);
        cfg.data.prefix_strength = 0.1;
        cfg.routing.router_data_frac = 0.2;
        cfg.test.seqs_per_domain = 500;
        let p = prepare(cfg)?;
        let trial = alternation_trial(
            &p.cfg,
            &p.ds.train,
            &p.feats,
            &p.base,
            TrainMode::Dipaco,
            10,
        )
        .map_err(e)?;
        let docs = docs_of(&p.ds.test);
        let ppl = |r| {
            evaluate_run(r, &docs, &p.base, &p.cfg.model, &p.cfg.eval)
                .map(|rep| rep.ppl)
                .map_err(e)
        };
        let gen = ppl(&trial.generative)?;
        let disc = ppl(&trial.discriminative)?;
        decreased += usize::from(disc < gen);
        increased += usize::from(disc > gen);
        rows.push(format!(
            "seed {seed}: discriminative {disc:.4} vs generative {gen:.4}"
        ));
    }
    Ok((
        increased == 0 && decreased >= 2,
        format!("{}; decreased in {decreased}/3", rows.join("; ")),
    ))
}

// ---------------------------------------------------------------- 12

fn early_stopping() -> Outcome {
    let (lm, corpus) = (tiny_lm(), tiny_corpus(30));
    let cfg = ModularConfig::for_lm(&lm, &[1]).map_err(e)?;
    let init = init_params(&lm).map_err(e)?;
    // Six training documents and a large learning rate: the path memorizes.
    let shards = ShardSet {
        num_docs: corpus.len(),
        overlap: 1,
        shards: vec![Shard {
            path: 0,
            train: (0..6).collect(),
            val: (6..corpus.len()).collect(),
        }],
        router_docs: vec![],
    };
    let plan = TrainPlan {
        outer_steps: 30,
        inner_steps: 4,
        batch_size: 4,
        prefix_len: 4,
        inner: InnerOpt::Adamw(AdamWConfig {
            schedule: LrSchedule::Constant { lr: 3e-3 },
            weight_decay: 0.0,
            ..AdamWConfig::default()
        }),
        early_stop: true,
        seed: 4,
        ..TrainPlan::default()
    };
    let out = run(&cfg, &lm, &corpus, &plan)
        .train(&init, shards.clone(), None)
        .map_err(e)?;
    let val: Vec<f64> = out
        .metrics
        .iter()
        .filter(|m| m.split == MetricSplit::Val && m.path == 0)
        .map(|m| m.loss)
        .collect();
    let Some((meta, params)) = out.selected[0].as_ref() else {
        return Ok((false, "no checkpoint selected".into()));
    };
    let final_params = materialize_path(&out.store, &cfg, 0).map_err(e)?;
    let val_docs = &shards.shards[0].val;
    let mean_nll = |p: &ParamTree| -> Result<f64, String> {
        let (total, count) = nll_on_docs(p, &corpus, val_docs, &lm, plan.prefix_len).map_err(e)?;
        Ok(total / count as f64)
    };
    let selected_loss = mean_nll(params)?;
    let final_loss = mean_nll(&final_params)?;
    let min = val.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((
        selected_loss <= final_loss && meta.val_loss == min,
        format!(
            "selected step {} val {selected_loss:.4} <= final val {final_loss:.4} (overfit by {:.3})",
            meta.step,
            final_loss - min
        ),
    ))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("gradcheck", gradcheck),
        ("degeneracy A: one path equals SGD", degeneracy_sgd),
        ("degeneracy B: all-shared equals DiLoCo", degeneracy_diloco),
        ("flat MoE isolation", flat_isolation),
        ("routing oracles", routing_oracles),
        ("discriminative router", discriminative_router),
        ("outer-delta algebra", outer_algebra),
        ("harness equivalence", harness_equivalence),
        ("more paths generalize better", more_paths_generalize),
        ("frequent test-time routing", frequent_routing),
        ("discriminative resharding", discriminative_phase),
        ("early stopping", early_stopping),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let (pass, detail) = match check() {
            Ok(r) => r,
            Err(msg) => (false, format!("error: {msg}")),
        };
        failed += usize::from(!pass);
        println!(
            "{} {n:>2} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
