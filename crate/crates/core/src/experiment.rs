//! Declarative experiment configuration and the end-to-end pipeline:
//! data generation, dense pretraining, sharding, training in each mode
//! and routed evaluation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_domains, sample_corpus, Corpus, CorpusConfig};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, fit_chunk_router, ChunkRouterConfig, EvalConfig, EvalReport, FeatureRouting,
};
use crate::harness::HarnessConfig;
use crate::model::{init_params, LmConfig, Token};
use crate::modular::{LevelSpec, ModularConfig, StoreView};
use crate::optim::{AdamWConfig, LrSchedule};
use crate::params::ParamTree;
use crate::routing::{
    kmeans_fit, prefix_features, product_kmeans_fit, shard_dataset, AnyRouter, CalibrationConfig,
    Centroids, DiscriminativeConfig, DiscriminativeResharder, LinearRouter, LogRegConfig,
    Resharder, Router, ShardConfig, ShardSet,
};
use crate::trainer::{
    inner_phase, InnerOpt, InnerState, TrainOutcome, TrainPlan, TrainRun, TrainState,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Path-composed modules over routed shards.
    #[default]
    Dipaco,
    /// Every module shared; workers get iid shards.
    Diloco,
    /// One level: fully independent routed paths.
    Flat,
    /// A single path on all the data with one worker.
    Dense,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dipaco" => Ok(TrainMode::Dipaco),
            "diloco" => Ok(TrainMode::Diloco),
            "flat" => Ok(TrainMode::Flat),
            "dense" => Ok(TrainMode::Dense),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterKind {
    #[default]
    Kmeans,
    Product,
    /// k-means bootstrap, then discriminative resharding during training.
    Discriminative,
}

impl std::str::FromStr for RouterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(RouterKind::Kmeans),
            "product" => Ok(RouterKind::Product),
            "discriminative" => Ok(RouterKind::Discriminative),
            other => Err(Error::Config(format!("unknown router {other:?}"))),
        }
    }
}

/// Held-out test documents drawn from the training domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestSplit {
    pub seqs_per_domain: usize,
    pub switch_prob: f64,
    pub seed: u64,
    /// Held-out documents, drawn like the test set, for fitting the chunk
    /// router.
    pub router_seqs_per_domain: usize,
}

impl Default for TestSplit {
    fn default() -> Self {
        TestSplit {
            seqs_per_domain: 50,
            switch_prob: 0.0,
            seed: 1_000_003,
            router_seqs_per_domain: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 300,
            batch_size: 8,
            lr: 3e-3,
            warmup: 20,
            weight_decay: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModularSection {
    pub mode: TrainMode,
    /// Modules per level, blocks split contiguously across levels.
    pub levels: Vec<usize>,
    /// Explicit level layout; overrides `levels` in dipaco mode.
    pub custom: Vec<LevelSpec>,
    /// Replica count in diloco mode; 0 uses the dipaco path count.
    pub diloco_workers: usize,
}

impl Default for ModularSection {
    fn default() -> Self {
        ModularSection {
            mode: TrainMode::Dipaco,
            levels: vec![2, 2],
            custom: Vec::new(),
            diloco_workers: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingSection {
    pub router: RouterKind,
    pub overlap: usize,
    pub kmeans_iters: usize,
    pub router_data_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
    pub l2: f64,
    pub logreg_iters: usize,
    pub calibration_iters: usize,
}

impl Default for RoutingSection {
    fn default() -> Self {
        RoutingSection {
            router: RouterKind::Kmeans,
            overlap: 1,
            kmeans_iters: 100,
            router_data_frac: 0.05,
            val_frac: 0.05,
            seed: 0,
            l2: 1e-4,
            logreg_iters: 5000,
            calibration_iters: 200,
        }
    }
}

impl RoutingSection {
    pub fn shard_config(&self) -> ShardConfig {
        ShardConfig {
            overlap: self.overlap,
            router_data_frac: self.router_data_frac,
            val_frac: self.val_frac,
            seed: self.seed,
        }
    }

    pub fn discriminative(&self) -> DiscriminativeConfig {
        DiscriminativeConfig {
            logreg: LogRegConfig {
                l2: self.l2,
                max_iters: self.logreg_iters,
                ..LogRegConfig::default()
            },
            calibration: CalibrationConfig {
                max_iters: self.calibration_iters,
                ..CalibrationConfig::default()
            },
            ..DiscriminativeConfig::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: CorpusConfig,
    pub test: TestSplit,
    pub model: LmConfig,
    pub pretrain: PretrainConfig,
    pub modular: ModularSection,
    pub routing: RoutingSection,
    pub plan: TrainPlan,
    pub harness: HarnessConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.plan.validate()?;
        self.harness.validate()?;
        if self.model.vocab_size != self.data.vocab || self.model.seq_len < self.data.seq_len {
            return Err(Error::Config(
                "model vocab must equal the corpus vocab and cover its sequence length".into(),
            ));
        }
        if self.plan.prefix_len != self.data.prefix_len
            || self.eval.prefix_len != self.data.prefix_len
        {
            return Err(Error::Config(
                "plan, eval and data prefix lengths must agree".into(),
            ));
        }
        if self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain batch_size must be positive".into()));
        }
        self.modular_config(self.modular.mode)?;
        Ok(())
    }

    /// Module layout trained in `mode`.
    pub fn modular_config(&self, mode: TrainMode) -> Result<ModularConfig> {
        let lm = &self.model;
        match mode {
            TrainMode::Dipaco if !self.modular.custom.is_empty() => {
                let shapes = lm.param_shapes();
                ModularConfig::new(&self.modular.custom, shapes.iter().map(|(n, _)| n.as_str()))
            }
            TrainMode::Dipaco => ModularConfig::for_lm(lm, &self.modular.levels),
            TrainMode::Diloco => {
                ModularConfig::for_lm(lm, &vec![1; self.modular.levels.len().max(1)])
            }
            TrainMode::Flat => ModularConfig::flat(lm, self.dipaco_paths()?),
            TrainMode::Dense => ModularConfig::flat(lm, 1),
        }
    }

    fn dipaco_paths(&self) -> Result<usize> {
        Ok(self.modular_config(TrainMode::Dipaco)?.path_count())
    }

    pub fn diloco_workers(&self) -> Result<usize> {
        match self.modular.diloco_workers {
            0 => self.dipaco_paths(),
            n => Ok(n),
        }
    }
}

/// Training corpus and held-out test corpus over the same domains.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Corpus,
    pub test: Corpus,
    pub chunk_router: Corpus,
}

pub fn make_dataset(data: &CorpusConfig, test: &TestSplit) -> Result<Dataset> {
    let domains = make_domains(data)?;
    let train = sample_corpus(&domains, data, data.seed)?;
    let test_cfg = CorpusConfig {
        seqs_per_domain: test.seqs_per_domain,
        switch_prob: test.switch_prob,
        ..data.clone()
    };
    let held_out = sample_corpus(&domains, &test_cfg, data.seed.wrapping_add(test.seed))?;
    let router_cfg = CorpusConfig {
        seqs_per_domain: test.router_seqs_per_domain,
        ..test_cfg
    };
    let chunk_router = sample_corpus(
        &domains,
        &router_cfg,
        data.seed.wrapping_add(test.seed).wrapping_add(1),
    )?;
    Ok(Dataset {
        train,
        test: held_out,
        chunk_router,
    })
}

/// Dense base model trained with AdamW on `docs` (all documents when
/// empty). Returns the parameters and the per-step losses.
pub fn pretrain(
    lm: &LmConfig,
    corpus: &Corpus,
    docs: &[usize],
    cfg: &PretrainConfig,
    prefix_len: usize,
) -> Result<(ParamTree, Vec<f64>)> {
    let init = init_params(lm)?;
    if cfg.steps == 0 {
        return Ok((init, Vec::new()));
    }
    let all: Vec<usize>;
    let docs = if docs.is_empty() {
        all = (0..corpus.len()).collect();
        &all
    } else {
        docs
    };
    let adam = AdamWConfig {
        schedule: LrSchedule::cosine(cfg.lr, cfg.warmup, cfg.steps as u64),
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut state = InnerState::new(&init, &InnerOpt::Adamw(adam));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e7_7a1);
    let r = inner_phase(
        &init,
        docs,
        corpus,
        lm,
        cfg.steps,
        cfg.batch_size,
        prefix_len,
        &mut state,
        &mut rng,
    )?;
    Ok((r.params, r.losses))
}

/// Generative router with `paths` paths over `features` of `fit_docs`.
pub fn fit_generative_router(
    kind: RouterKind,
    modular: &ModularConfig,
    features: &[Vec<f64>],
    fit_docs: &[usize],
    iters: usize,
    seed: u64,
) -> Result<AnyRouter> {
    let points: Vec<Vec<f64>> = fit_docs.iter().map(|&d| features[d].clone()).collect();
    let paths = modular.path_count();
    if paths == 1 {
        let dim = features.first().map_or(0, Vec::len);
        return Ok(AnyRouter::KMeans(Centroids {
            centers: vec![vec![0.0; dim]],
        }));
    }
    match kind {
        RouterKind::Kmeans | RouterKind::Discriminative => Ok(AnyRouter::KMeans(
            kmeans_fit(&points, paths, iters, seed)?.centroids,
        )),
        RouterKind::Product => {
            let sizes: Vec<usize> = modular
                .levels()
                .iter()
                .filter(|l| !l.path_specific)
                .map(|l| l.modules)
                .collect();
            match sizes[..] {
                [a, b] if a == b => Ok(AnyRouter::Product(product_kmeans_fit(
                    &points, a, iters, seed,
                )?)),
                _ => Err(Error::Config(format!(
                    "product k-means needs two equal routed levels, got {sizes:?}"
                ))),
            }
        }
    }
}

/// Shards for `mode`: routed for dipaco and flat, iid replicas otherwise.
/// Returns the shard set and the router that produced it.
pub fn make_shards(
    cfg: &ExperimentConfig,
    mode: TrainMode,
    features: &[Vec<f64>],
) -> Result<(ShardSet, AnyRouter)> {
    let modular = cfg.modular_config(mode)?;
    let shard_cfg = cfg.routing.shard_config();
    let n = features.len();
    let single = || {
        AnyRouter::KMeans(Centroids {
            centers: vec![vec![0.0; features.first().map_or(0, Vec::len)]],
        })
    };
    match mode {
        TrainMode::Dipaco | TrainMode::Flat => {
            let (router_docs, _) =
                crate::routing::split_router_data(n, shard_cfg.router_data_frac, shard_cfg.seed);
            let fit_docs: Vec<usize> = (0..n)
                .filter(|d| router_docs.binary_search(d).is_err())
                .collect();
            let router = fit_generative_router(
                cfg.routing.router,
                &modular,
                features,
                &fit_docs,
                cfg.routing.kmeans_iters,
                cfg.routing.seed,
            )?;
            let shards = shard_dataset(&router, features, &shard_cfg)?;
            if let Some(empty) = shards.shards.iter().position(|s| s.train.is_empty()) {
                return Err(Error::EmptyShard(empty));
            }
            Ok((shards, router))
        }
        TrainMode::Diloco => Ok((
            ShardSet::iid(
                n,
                cfg.diloco_workers()?,
                0,
                &ShardConfig {
                    overlap: 1,
                    ..shard_cfg
                },
            )?,
            single(),
        )),
        TrainMode::Dense => Ok((
            ShardSet::iid(
                n,
                1,
                0,
                &ShardConfig {
                    overlap: 1,
                    ..shard_cfg
                },
            )?,
            single(),
        )),
    }
}

/// Everything a finished training run produces.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub modular: ModularConfig,
    pub outcome: TrainOutcome,
    /// Router for evaluation: the latest discriminative fit if resharding
    /// happened, else the generative router.
    pub router: AnyRouter,
}

/// Trains `mode` from `base` on `shards` with the sequential trainer,
/// resharding discriminatively when the config asks for it.
pub fn train_mode(
    cfg: &ExperimentConfig,
    mode: TrainMode,
    corpus: &Corpus,
    features: &[Vec<f64>],
    base: &ParamTree,
    shards: ShardSet,
    router: AnyRouter,
) -> Result<RunArtifacts> {
    let modular = cfg.modular_config(mode)?;
    let run = TrainRun {
        cfg: &modular,
        lm: &cfg.model,
        corpus,
        plan: &cfg.plan,
    };
    let routed = matches!(mode, TrainMode::Dipaco | TrainMode::Flat);
    if routed && cfg.routing.router == RouterKind::Discriminative {
        let mut resharder = DiscriminativeResharder::new(
            corpus,
            features,
            &cfg.model,
            cfg.plan.prefix_len,
            cfg.routing.discriminative(),
        );
        let outcome = run.train(base, shards, Some(&mut resharder as &mut dyn Resharder))?;
        let router = resharder
            .latest_router()
            .cloned()
            .map_or(router, AnyRouter::Linear);
        return Ok(RunArtifacts {
            modular,
            outcome,
            router,
        });
    }
    let outcome = run.train(base, shards, None)?;
    Ok(RunArtifacts {
        modular,
        outcome,
        router,
    })
}

/// The plan for one stage of `steps` outer steps; a cosine horizon is
/// fitted to the stage.
pub fn stage_plan(plan: &TrainPlan, steps: usize) -> TrainPlan {
    let mut stage = plan.clone();
    stage.outer_steps = steps;
    stage.reshard_at = None;
    if let InnerOpt::Adamw(AdamWConfig {
        schedule: LrSchedule::CosineWarmup { total_steps, .. },
        ..
    }) = &mut stage.inner
    {
        *total_steps = (steps * plan.inner_steps) as u64;
    }
    stage
}

pub struct AlternationTrial {
    pub ancestor: RunArtifacts,
    /// Continued on the ancestor's shards with its generative router.
    pub generative: RunArtifacts,
    /// Continued after one discriminative reshard of the ancestor's paths.
    pub discriminative: RunArtifacts,
}

/// Trains a generatively routed `mode` ancestor for `ancestor_steps` outer steps,
/// then continues it for the rest of `cfg.plan.outer_steps` twice: once
/// on its own shards and once after a single discriminative reshard. Both
/// continuations restart the inner schedule and outer velocity and share
/// every seed.
pub fn alternation_trial(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    features: &[Vec<f64>],
    base: &ParamTree,
    mode: TrainMode,
    ancestor_steps: usize,
) -> Result<AlternationTrial> {
    if !matches!(mode, TrainMode::Dipaco | TrainMode::Flat) {
        return Err(Error::Config(format!("{mode:?} runs are not routed")));
    }
    if ancestor_steps == 0 || ancestor_steps >= cfg.plan.outer_steps {
        return Err(Error::Config(format!(
            "ancestor steps {ancestor_steps} must lie in 1..{}",
            cfg.plan.outer_steps
        )));
    }
    let mut gen_cfg = cfg.clone();
    if gen_cfg.routing.router == RouterKind::Discriminative {
        gen_cfg.routing.router = RouterKind::Kmeans;
    }
    let (shards, router) = make_shards(&gen_cfg, mode, features)?;
    let modular = cfg.modular_config(mode)?;
    let first = stage_plan(&cfg.plan, ancestor_steps);
    let ancestor = TrainRun {
        cfg: &modular,
        lm: &cfg.model,
        corpus,
        plan: &first,
    }
    .train(base, shards, None)?;

    let mut second = stage_plan(&cfg.plan, cfg.plan.outer_steps - ancestor_steps);
    second.seed = cfg.plan.seed.wrapping_add(1);
    let run = TrainRun {
        cfg: &modular,
        lm: &cfg.model,
        corpus,
        plan: &second,
    };
    let state =
        TrainState::continue_from(&modular, &ancestor.store, ancestor.shards.clone(), &second)?;
    let generative = run.train_from(state, None)?;

    let mut resharder = DiscriminativeResharder::new(
        corpus,
        features,
        &cfg.model,
        cfg.plan.prefix_len,
        cfg.routing.discriminative(),
    );
    let view = StoreView {
        store: &ancestor.store,
        cfg: &modular,
    };
    let resharded = resharder.reshard(0, &view, &ancestor.shards)?;
    let linear = resharder
        .latest_router()
        .cloned()
        .ok_or_else(|| Error::Routing("discriminative refit produced no router".into()))?;
    let state = TrainState::continue_from(&modular, &ancestor.store, resharded, &second)?;
    let discriminative = run.train_from(state, None)?;

    Ok(AlternationTrial {
        ancestor: RunArtifacts {
            modular: modular.clone(),
            outcome: ancestor,
            router: router.clone(),
        },
        generative: RunArtifacts {
            modular: modular.clone(),
            outcome: generative,
            router,
        },
        discriminative: RunArtifacts {
            modular,
            outcome: discriminative,
            router: AnyRouter::Linear(linear),
        },
    })
}

/// Routed perplexity of `docs` under the run's evaluation parameters.
pub fn evaluate_run(
    run: &RunArtifacts,
    docs: &[&[Token]],
    base: &ParamTree,
    lm: &LmConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    evaluate_with_chunks(run, None, docs, base, lm, cfg)
}

/// Path parameters evaluation uses: early-stopped or final.
pub fn eval_paths(run: &RunArtifacts, early_stopped: bool) -> Result<Vec<ParamTree>> {
    if early_stopped {
        run.outcome.final_paths(&run.modular)
    } else {
        (0..run.modular.path_count())
            .map(|p| crate::modular::materialize_path(&run.outcome.store, &run.modular, p))
            .collect()
    }
}

/// As [`evaluate_run`], re-routing chunks with `chunk` when given.
pub fn evaluate_with_chunks(
    run: &RunArtifacts,
    chunk: Option<&dyn Router>,
    docs: &[&[Token]],
    base: &ParamTree,
    lm: &LmConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let paths = eval_paths(run, cfg.early_stopped)?;
    let policy = FeatureRouting {
        prefix: &run.router,
        chunk,
    };
    evaluate(&paths, &policy, docs, base, lm, cfg)
}

/// Chunk router for `run` fitted on `docs`, re-routing every
/// `cfg.route_every` tokens.
pub fn fit_run_chunk_router(
    run: &RunArtifacts,
    docs: &[&[Token]],
    base: &ParamTree,
    lm: &LmConfig,
    cfg: &EvalConfig,
    routing: &RoutingSection,
) -> Result<LinearRouter> {
    let paths = eval_paths(run, cfg.early_stopped)?;
    let chunk_cfg = ChunkRouterConfig {
        route_every: cfg.route_every,
        prefix_len: cfg.prefix_len,
        window: 0,
        feature_source: cfg.feature_source,
        logreg: routing.discriminative().logreg,
        calibration: routing.discriminative().calibration,
    };
    fit_chunk_router(docs, paths.as_slice(), base, lm, &chunk_cfg)
}

/// Prefix features of every document under `base`.
pub fn corpus_features(
    corpus: &Corpus,
    base: &ParamTree,
    lm: &LmConfig,
    prefix_len: usize,
) -> Result<Vec<Vec<f64>>> {
    let docs: Vec<usize> = (0..corpus.len()).collect();
    prefix_features(corpus, &docs, base, lm, prefix_len)
}

pub fn docs_of(corpus: &Corpus) -> Vec<&[Token]> {
    (0..corpus.len()).map(|d| corpus.seq(d)).collect()
}
