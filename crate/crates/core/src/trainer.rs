//! Path-parallel inner optimization, per-module outer updates and the
//! sequential reference training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, score_sequence, LmConfig, Token};
use crate::modular::{
    materialize_path, ModularConfig, ModuleEntry, ModuleKey, ModuleStore, StoreView,
};
use crate::optim::{
    adamw_step_accum, nesterov_outer_step, sgd_step_accum, AdamWConfig, AdamWState, NesterovState,
    OuterConfig,
};
use crate::params::ParamTree;
use crate::routing::{Resharder, ShardSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InnerOpt {
    Adamw(AdamWConfig),
    Sgd { lr: f64 },
}

impl Default for InnerOpt {
    fn default() -> Self {
        InnerOpt::Adamw(AdamWConfig::default())
    }
}

/// Inner optimizer state of one shard's worker; survives across phases.
#[derive(Clone, Debug, PartialEq)]
pub enum InnerState {
    Adamw(AdamWState),
    Sgd { lr: f64, step: u64 },
}

impl InnerState {
    pub fn new(params: &ParamTree, opt: &InnerOpt) -> Self {
        match opt {
            InnerOpt::Adamw(cfg) => InnerState::Adamw(AdamWState::new(params, cfg.clone())),
            InnerOpt::Sgd { lr } => InnerState::Sgd { lr: *lr, step: 0 },
        }
    }

    pub fn step_count(&self) -> u64 {
        match self {
            InnerState::Adamw(s) => s.step,
            InnerState::Sgd { step, .. } => *step,
        }
    }

    /// Moments under `m.` and `v.` plus a `step` scalar.
    pub fn to_blob(&self) -> Result<ParamTree> {
        let mut b = ParamTree::new();
        if let InnerState::Adamw(s) = self {
            b = s.m.prefixed("m.");
            b.merge(s.v.prefixed("v."))?;
        }
        b.insert("step", Tensor::scalar(self.step_count() as f64));
        Ok(b)
    }

    pub fn from_blob(blob: &ParamTree, opt: &InnerOpt) -> Result<Self> {
        let step = blob.require("step")?.item() as u64;
        Ok(match opt {
            InnerOpt::Adamw(cfg) => InnerState::Adamw(AdamWState {
                step,
                m: blob.strip_prefix("m."),
                v: blob.strip_prefix("v."),
                cfg: cfg.clone(),
            }),
            InnerOpt::Sgd { lr } => InnerState::Sgd { lr: *lr, step },
        })
    }

    fn apply(
        &mut self,
        params: &mut ParamTree,
        grads: &ParamTree,
        acc: &mut ParamTree,
    ) -> Result<()> {
        match self {
            InnerState::Adamw(s) => adamw_step_accum(params, grads, s, Some(acc)),
            InnerState::Sgd { lr, step } => {
                sgd_step_accum(params, grads, *lr, Some(acc))?;
                *step += 1;
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    /// Outer steps.
    pub outer_steps: usize,
    /// Inner steps per phase.
    pub inner_steps: usize,
    pub batch_size: usize,
    pub prefix_len: usize,
    pub reweigh: bool,
    pub rescale: bool,
    pub early_stop: bool,
    /// Outer step before which the resharder runs; `None` means a third
    /// of the way through when a resharder is supplied.
    pub reshard_at: Option<usize>,
    /// Paths trained per phase; `None` trains all of them.
    pub paths_per_phase: Option<usize>,
    pub inner: InnerOpt,
    pub outer: OuterConfig,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            outer_steps: 10,
            inner_steps: 50,
            batch_size: 4,
            prefix_len: 32,
            reweigh: true,
            rescale: false,
            early_stop: true,
            reshard_at: None,
            paths_per_phase: None,
            inner: InnerOpt::default(),
            outer: OuterConfig::default(),
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.outer_steps == 0 || self.inner_steps == 0 {
            return Err(Error::Config(
                "outer_steps and inner_steps must be at least 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.paths_per_phase == Some(0) {
            return Err(Error::Config("paths_per_phase must be at least 1".into()));
        }
        Ok(())
    }

    pub fn reshard_step(&self) -> usize {
        self.reshard_at.unwrap_or(self.outer_steps / 3)
    }
}

/// Seed for one (run, phase, shard) triple.
pub fn task_seed(seed: u64, phase: usize, shard: usize) -> u64 {
    let mut x = seed;
    for v in [phase as u64, shard as u64] {
        x = splitmix(x ^ splitmix(v.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct InnerResult {
    pub params: ParamTree,
    /// Sum of applied updates; equals start minus final parameters.
    pub update: ParamTree,
    pub losses: Vec<f64>,
}

/// `tau` inner steps on batches drawn with replacement from `docs`.
#[allow(clippy::too_many_arguments)]
pub fn inner_phase(
    start: &ParamTree,
    docs: &[usize],
    corpus: &Corpus,
    lm: &LmConfig,
    tau: usize,
    batch_size: usize,
    prefix_len: usize,
    state: &mut InnerState,
    rng: &mut ChaCha8Rng,
) -> Result<InnerResult> {
    if tau == 0 {
        return Err(Error::Config("inner phase needs at least one step".into()));
    }
    if docs.is_empty() {
        return Err(Error::EmptyShard(0));
    }
    let mut params = start.clone();
    let mut update = start.zeros_like();
    let mut losses = Vec::with_capacity(tau);
    for _ in 0..tau {
        let batch: Vec<&[Token]> = (0..batch_size)
            .map(|_| corpus.seq(docs[rng.random_range(0..docs.len())]))
            .collect();
        let (loss, grads) = loss_and_grad(&params, lm, &batch, prefix_len)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        state.apply(&mut params, &grads, &mut update)?;
        losses.push(loss);
    }
    Ok(InnerResult {
        params,
        update,
        losses,
    })
}

/// One module's share of a worker's phase result.
#[derive(Clone, Debug)]
pub struct Contribution {
    pub shard: usize,
    pub shard_size: usize,
    pub delta: ParamTree,
}

#[derive(Clone, Debug)]
pub struct OuterDelta {
    pub key: ModuleKey,
    pub delta: ParamTree,
    pub contributors: usize,
    pub shard_sizes: Vec<usize>,
}

/// Combines contributions, sorted by shard, into the module's outer
/// gradient: `sum_i alpha_i * delta_i`, with `alpha` proportional to shard
/// size when reweighing and uniform otherwise, then scaled by
/// `sqrt(contributors)` when rescaling.
pub fn compute_outer_delta(
    key: ModuleKey,
    contributions: &[Contribution],
    reweigh: bool,
    rescale: bool,
) -> Result<OuterDelta> {
    let mut sorted: Vec<&Contribution> = contributions.iter().collect();
    sorted.sort_by_key(|c| c.shard);
    let first = sorted
        .first()
        .ok_or_else(|| Error::Config(format!("module {key} has no contributors")))?;
    for c in &sorted[1..] {
        first.delta.check_congruent(&c.delta, "contributor delta")?;
    }
    let n = sorted.len();
    let total: usize = sorted.iter().map(|c| c.shard_size).sum();
    let alpha = |c: &Contribution| {
        if reweigh && total > 0 {
            c.shard_size as f64 / total as f64
        } else {
            1.0 / n as f64
        }
    };
    let mut delta = first.delta.clone();
    delta.scale(alpha(first));
    for c in &sorted[1..] {
        delta.axpy(alpha(c), &c.delta)?;
    }
    if rescale && n > 1 {
        delta.scale((n as f64).sqrt());
    }
    Ok(OuterDelta {
        key,
        delta,
        contributors: n,
        shard_sizes: sorted.iter().map(|c| c.shard_size).collect(),
    })
}

/// Outer delta from explicit pre- and post-phase parameters.
pub fn outer_delta_from_params(
    key: ModuleKey,
    theta_prev: &ParamTree,
    workers: &[(usize, usize, ParamTree)],
    reweigh: bool,
    rescale: bool,
) -> Result<OuterDelta> {
    let contributions = workers
        .iter()
        .map(|(shard, size, p)| {
            Ok(Contribution {
                shard: *shard,
                shard_size: *size,
                delta: theta_prev.sub(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    compute_outer_delta(key, &contributions, reweigh, rescale)
}

/// Applies each delta to its module only; other modules are untouched.
pub fn outer_phase(store: &mut ModuleStore, deltas: &[OuterDelta]) -> Result<()> {
    for d in deltas {
        let entry = store
            .get_mut(d.key)
            .ok_or_else(|| Error::MissingModule(d.key.to_string()))?;
        nesterov_outer_step(&mut entry.params, &d.delta, &mut entry.outer)?;
    }
    Ok(())
}

/// Shards trained in `phase`, ascending.
pub fn active_shards(
    plan: &TrainPlan,
    shards: &ShardSet,
    num_paths: usize,
    phase: usize,
) -> Vec<usize> {
    let all: Vec<usize> = (0..shards.len()).collect();
    let Some(k) = plan.paths_per_phase.filter(|&k| k < num_paths) else {
        return all;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed(plan.seed, phase, usize::MAX));
    let mut chosen = vec![false; num_paths];
    sample(&mut rng, num_paths, k)
        .into_iter()
        .for_each(|p| chosen[p] = true);
    all.into_iter()
        .filter(|&s| chosen[shards.shards[s].path])
        .collect()
}

/// Result of one shard's inner phase, as a worker reports it.
#[derive(Clone, Debug)]
pub struct PathTaskOutput {
    pub phase: usize,
    pub shard: usize,
    pub path: usize,
    pub update: ParamTree,
    pub state: InnerState,
    pub losses: Vec<f64>,
}

/// Runs the inner phase of `shard` against the current global modules.
#[allow(clippy::too_many_arguments)]
pub fn run_path_task(
    store: &ModuleStore,
    cfg: &ModularConfig,
    shards: &ShardSet,
    shard: usize,
    phase: usize,
    state: &InnerState,
    corpus: &Corpus,
    lm: &LmConfig,
    plan: &TrainPlan,
) -> Result<PathTaskOutput> {
    let path = shards
        .shards
        .get(shard)
        .ok_or(Error::EmptyShard(shard))?
        .path;
    let start = materialize_path(store, cfg, path)?;
    run_shard_phase(&start, shards, shard, phase, state, corpus, lm, plan)
}

/// Inner phase of `shard` from already materialized path parameters.
#[allow(clippy::too_many_arguments)]
pub fn run_shard_phase(
    start: &ParamTree,
    shards: &ShardSet,
    shard: usize,
    phase: usize,
    state: &InnerState,
    corpus: &Corpus,
    lm: &LmConfig,
    plan: &TrainPlan,
) -> Result<PathTaskOutput> {
    let s = shards.shards.get(shard).ok_or(Error::EmptyShard(shard))?;
    if s.train.is_empty() {
        return Err(Error::EmptyShard(shard));
    }
    let mut state = state.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed(plan.seed, phase, shard));
    let r = inner_phase(
        start,
        &s.train,
        corpus,
        lm,
        plan.inner_steps,
        plan.batch_size,
        plan.prefix_len,
        &mut state,
        &mut rng,
    )?;
    Ok(PathTaskOutput {
        phase,
        shard,
        path: s.path,
        update: r.update,
        state,
        losses: r.losses,
    })
}

/// Slices worker updates by module and computes every outer delta of the
/// phase, in module order.
pub fn phase_deltas(
    cfg: &ModularConfig,
    shards: &ShardSet,
    outputs: &[PathTaskOutput],
    plan: &TrainPlan,
) -> Result<Vec<OuterDelta>> {
    let mut per_module: BTreeMap<ModuleKey, Vec<Contribution>> = BTreeMap::new();
    for o in outputs {
        for key in cfg.path_modules(o.path)? {
            let delta = o.update.subset(cfg.level_names(key.level))?;
            let shard_size = shards.shards[o.shard].train.len();
            per_module.entry(key).or_default().push(Contribution {
                shard: o.shard,
                shard_size,
                delta,
            });
        }
    }
    per_module
        .into_iter()
        .map(|(key, c)| compute_outer_delta(key, &c, plan.reweigh, plan.rescale))
        .collect()
}

/// Total next-token NLL and scored-token count of `docs` under `params`.
pub fn nll_on_docs(
    params: &ParamTree,
    corpus: &Corpus,
    docs: &[usize],
    lm: &LmConfig,
    prefix_len: usize,
) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut count = 0;
    for &d in docs {
        let seq = corpus.seq(d);
        let s = score_sequence(seq, params, lm)?;
        for lp in &s.logprobs[prefix_len.saturating_sub(1).min(s.logprobs.len())..] {
            total -= lp;
            count += 1;
        }
    }
    Ok((total, count))
}

/// Validation documents of the shards feeding each path.
pub fn path_val_docs(shards: &ShardSet, num_paths: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num_paths];
    for s in &shards.shards {
        out[s.path].extend(&s.val);
    }
    for v in &mut out {
        v.sort_unstable();
        v.dedup();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricSplit {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub path: usize,
    pub split: MetricSplit,
    pub loss: f64,
}

impl MetricRecord {
    pub fn ppl(&self) -> f64 {
        self.loss.exp()
    }
}

pub fn metrics_to_tsv(records: &[MetricRecord]) -> String {
    let mut out = String::from("step\tpath\tsplit\tloss\tppl\n");
    for r in records {
        let split = match r.split {
            MetricSplit::Train => "train",
            MetricSplit::Val => "val",
        };
        let _ = writeln!(
            out,
            "{}\t{}\t{split}\t{:.17e}\t{:.17e}",
            r.step,
            r.path,
            r.loss,
            r.ppl()
        );
    }
    out
}

pub fn metrics_from_tsv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let bad = || Error::Parse(format!("metrics row: {line:?}"));
        let c: Vec<&str> = line.split('\t').collect();
        if c.len() != 5 {
            return Err(bad());
        }
        let split = match c[2] {
            "train" => MetricSplit::Train,
            "val" => MetricSplit::Val,
            _ => return Err(bad()),
        };
        out.push(MetricRecord {
            step: c[0].parse().map_err(|_| bad())?,
            path: c[1].parse().map_err(|_| bad())?,
            split,
            loss: c[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    std::fs::write(path, metrics_to_tsv(records))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathCheckpointMeta {
    pub path: usize,
    pub step: usize,
    pub val_loss: f64,
}

/// Lowest validation loss per path; ties go to the earliest step.
pub fn early_stop_select(metas: &[PathCheckpointMeta]) -> BTreeMap<usize, PathCheckpointMeta> {
    let mut best: BTreeMap<usize, PathCheckpointMeta> = BTreeMap::new();
    for m in metas {
        match best.get(&m.path) {
            Some(b)
                if b.val_loss < m.val_loss || (b.val_loss == m.val_loss && b.step <= m.step) => {}
            _ => {
                best.insert(m.path, *m);
            }
        }
    }
    best
}

/// Everything the training loop carries between phases.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ModuleStore,
    pub shards: ShardSet,
    pub inner: Vec<InnerState>,
}

impl TrainState {
    pub fn new(
        cfg: &ModularConfig,
        init: &ParamTree,
        shards: ShardSet,
        plan: &TrainPlan,
    ) -> Result<Self> {
        check_layout(cfg, &shards)?;
        let store = ModuleStore::from_init(cfg, init, plan.outer)?;
        let inner = (0..shards.len())
            .map(|_| InnerState::new(init, &plan.inner))
            .collect();
        Ok(TrainState {
            store,
            shards,
            inner,
        })
    }

    /// Fresh run whose modules start from `store`'s parameters: zero
    /// outer velocity and new inner optimizer states, so schedules restart.
    pub fn continue_from(
        cfg: &ModularConfig,
        store: &ModuleStore,
        shards: ShardSet,
        plan: &TrainPlan,
    ) -> Result<Self> {
        check_layout(cfg, &shards)?;
        let mut fresh = ModuleStore::default();
        for key in cfg.module_keys() {
            let params = store
                .get(key)
                .ok_or_else(|| Error::MissingModule(key.to_string()))?
                .params
                .clone();
            let outer = NesterovState::new(&params, plan.outer);
            fresh.insert(key, ModuleEntry { params, outer });
        }
        let template = materialize_path(&fresh, cfg, 0)?;
        let inner = (0..shards.len())
            .map(|_| InnerState::new(&template, &plan.inner))
            .collect();
        Ok(TrainState {
            store: fresh,
            shards,
            inner,
        })
    }
}

/// Every path needs at least one shard and every shard a valid path.
pub fn check_layout(cfg: &ModularConfig, shards: &ShardSet) -> Result<()> {
    let p = cfg.path_count();
    let mut fed = vec![false; p];
    for (i, s) in shards.shards.iter().enumerate() {
        if s.path >= p {
            return Err(Error::Config(format!(
                "shard {i} feeds path {} of {p}",
                s.path
            )));
        }
        fed[s.path] = true;
    }
    if let Some(missing) = fed.iter().position(|f| !f) {
        return Err(Error::Config(format!(
            "{p} paths but no shard feeds path {missing}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub store: ModuleStore,
    pub shards: ShardSet,
    pub inner: Vec<InnerState>,
    pub metrics: Vec<MetricRecord>,
    pub metas: Vec<PathCheckpointMeta>,
    /// Early-stopped parameters per path, when early stopping is on.
    pub selected: Vec<Option<(PathCheckpointMeta, ParamTree)>>,
}

impl TrainOutcome {
    /// Parameters to evaluate for `path`: the early-stopped checkpoint if
    /// one exists, else the final modules.
    pub fn path_params(&self, cfg: &ModularConfig, path: usize) -> Result<ParamTree> {
        match self.selected.get(path) {
            Some(Some((_, p))) => Ok(p.clone()),
            _ => materialize_path(&self.store, cfg, path),
        }
    }

    pub fn final_paths(&self, cfg: &ModularConfig) -> Result<Vec<ParamTree>> {
        (0..cfg.path_count())
            .map(|p| self.path_params(cfg, p))
            .collect()
    }
}

pub struct TrainRun<'a> {
    pub cfg: &'a ModularConfig,
    pub lm: &'a LmConfig,
    pub corpus: &'a Corpus,
    pub plan: &'a TrainPlan,
}

/// Mean of per-shard mean losses, per path, for one phase.
pub fn train_records(step: usize, outputs: &[PathTaskOutput]) -> Vec<MetricRecord> {
    let mut by_path: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for o in outputs {
        by_path
            .entry(o.path)
            .or_default()
            .push(o.losses.iter().sum::<f64>() / o.losses.len() as f64);
    }
    by_path
        .into_iter()
        .map(|(path, v)| MetricRecord {
            step,
            path,
            split: MetricSplit::Train,
            loss: v.iter().sum::<f64>() / v.len() as f64,
        })
        .collect()
}

impl TrainRun<'_> {
    /// Validation loss of every path with validation documents.
    pub fn validate(
        &self,
        store: &ModuleStore,
        shards: &ShardSet,
        step: usize,
    ) -> Result<Vec<(PathCheckpointMeta, ParamTree)>> {
        let val = path_val_docs(shards, self.cfg.path_count());
        let mut out = Vec::new();
        for (path, docs) in val.iter().enumerate() {
            if docs.is_empty() {
                continue;
            }
            let params = materialize_path(store, self.cfg, path)?;
            let (nll, n) = nll_on_docs(&params, self.corpus, docs, self.lm, self.plan.prefix_len)?;
            out.push((
                PathCheckpointMeta {
                    path,
                    step,
                    val_loss: nll / n.max(1) as f64,
                },
                params,
            ));
        }
        Ok(out)
    }

    /// One full phase: inner phases of the active shards, then outer
    /// updates of every touched module.
    pub fn phase(&self, state: &mut TrainState, phase: usize) -> Result<Vec<PathTaskOutput>> {
        let active = active_shards(self.plan, &state.shards, self.cfg.path_count(), phase);
        let mut outputs = Vec::with_capacity(active.len());
        for &s in &active {
            outputs.push(run_path_task(
                &state.store,
                self.cfg,
                &state.shards,
                s,
                phase,
                &state.inner[s],
                self.corpus,
                self.lm,
                self.plan,
            )?);
        }
        let deltas = phase_deltas(self.cfg, &state.shards, &outputs, self.plan)?;
        outer_phase(&mut state.store, &deltas)?;
        for o in &outputs {
            state.inner[o.shard] = o.state.clone();
        }
        Ok(outputs)
    }

    /// Sequential reference implementation of the full training loop.
    pub fn train(
        &self,
        init: &ParamTree,
        shards: ShardSet,
        resharder: Option<&mut dyn Resharder>,
    ) -> Result<TrainOutcome> {
        self.plan.validate()?;
        let state = TrainState::new(self.cfg, init, shards, self.plan)?;
        self.train_from(state, resharder)
    }

    /// The training loop from an existing state.
    pub fn train_from(
        &self,
        state: TrainState,
        resharder: Option<&mut dyn Resharder>,
    ) -> Result<TrainOutcome> {
        self.train_loop(LoopState::start(state), resharder, &mut |_| Ok(()))
    }

    /// Runs outer steps `progress.next_step..outer_steps`, calling
    /// `on_step` after each one.
    pub fn train_loop(
        &self,
        mut progress: LoopState,
        mut resharder: Option<&mut dyn Resharder>,
        on_step: &mut dyn FnMut(&LoopState) -> Result<()>,
    ) -> Result<TrainOutcome> {
        self.plan.validate()?;
        let p = self.cfg.path_count();
        if progress.selected.len() != p {
            return Err(Error::Config(format!(
                "selection covers {} paths, layout has {p}",
                progress.selected.len()
            )));
        }
        for t in progress.next_step..self.plan.outer_steps {
            let LoopState {
                state,
                metrics,
                metas,
                selected,
                ..
            } = &mut progress;
            if let Some(r) = resharder.as_deref_mut() {
                if t == self.plan.reshard_step() && t > 0 {
                    let view = StoreView {
                        store: &state.store,
                        cfg: self.cfg,
                    };
                    let next = r.reshard(t, &view, &state.shards)?;
                    check_layout(self.cfg, &next)?;
                    if next.len() != state.shards.len() {
                        return Err(Error::Config("resharding changed the shard count".into()));
                    }
                    log::info!("resharded before outer step {t}");
                    state.shards = next;
                    // Earlier validation losses were measured on other documents.
                    selected.iter_mut().for_each(|s| *s = None);
                }
            }
            let outputs = self.phase(state, t)?;
            metrics.extend(train_records(t, &outputs));
            for (meta, params) in self.validate(&state.store, &state.shards, t)? {
                metrics.push(MetricRecord {
                    step: t,
                    path: meta.path,
                    split: MetricSplit::Val,
                    loss: meta.val_loss,
                });
                metas.push(meta);
                if self.plan.early_stop {
                    let better = match &selected[meta.path] {
                        Some((b, _)) => meta.val_loss < b.val_loss,
                        None => true,
                    };
                    if better {
                        selected[meta.path] = Some((meta, params));
                    }
                }
            }
            progress.next_step = t + 1;
            on_step(&progress)?;
            log::debug!("outer step {t} done");
        }
        let LoopState {
            state,
            metrics,
            metas,
            selected,
            ..
        } = progress;
        Ok(TrainOutcome {
            store: state.store,
            shards: state.shards,
            inner: state.inner,
            metrics,
            metas,
            selected,
        })
    }
}

/// A training run between outer steps: enough to resume it bit-exactly.
#[derive(Clone, Debug)]
pub struct LoopState {
    pub state: TrainState,
    pub next_step: usize,
    pub metrics: Vec<MetricRecord>,
    pub metas: Vec<PathCheckpointMeta>,
    pub selected: Vec<Option<(PathCheckpointMeta, ParamTree)>>,
}

impl LoopState {
    pub fn start(state: TrainState) -> Self {
        let paths = state
            .shards
            .shards
            .iter()
            .map(|s| s.path + 1)
            .max()
            .unwrap_or(0);
        LoopState {
            state,
            next_step: 0,
            metrics: Vec::new(),
            metas: Vec::new(),
            selected: vec![None; paths],
        }
    }

    /// Writes the state under `dir`: modules, inner states, shards,
    /// metrics and early-stopping selection.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_run(
            dir,
            RunParts {
                store: &self.state.store,
                shards: &self.state.shards,
                inner: &self.state.inner,
                metrics: &self.metrics,
                metas: &self.metas,
                selected: &self.selected,
            },
            self.next_step,
        )
    }

    pub fn load(dir: &Path, cfg: &ModularConfig, plan: &TrainPlan) -> Result<Self> {
        let (outcome, next_step) = load_run(dir, cfg, plan)?;
        if outcome.inner.len() != outcome.shards.len() {
            return Err(Error::Config(format!(
                "{} holds no inner optimizer states to resume from",
                dir.display()
            )));
        }
        Ok(LoopState {
            state: TrainState {
                store: outcome.store,
                shards: outcome.shards,
                inner: outcome.inner,
            },
            next_step,
            metrics: outcome.metrics,
            metas: outcome.metas,
            selected: outcome.selected,
        })
    }
}

impl TrainOutcome {
    /// Writes the finished run in the [`LoopState::save`] layout.
    pub fn save(&self, dir: &Path, steps: usize) -> Result<()> {
        save_run(
            dir,
            RunParts {
                store: &self.store,
                shards: &self.shards,
                inner: &self.inner,
                metrics: &self.metrics,
                metas: &self.metas,
                selected: &self.selected,
            },
            steps,
        )
    }

    /// Reads a saved run and the number of outer steps it completed.
    /// Inner states are empty when none were saved.
    pub fn load(dir: &Path, cfg: &ModularConfig, plan: &TrainPlan) -> Result<(Self, usize)> {
        load_run(dir, cfg, plan)
    }
}

struct RunParts<'a> {
    store: &'a ModuleStore,
    shards: &'a ShardSet,
    inner: &'a [InnerState],
    metrics: &'a [MetricRecord],
    metas: &'a [PathCheckpointMeta],
    selected: &'a [Option<(PathCheckpointMeta, ParamTree)>],
}

fn meta_row(out: &mut String, m: &PathCheckpointMeta) {
    writeln!(out, "{}\t{}\t{:e}", m.step, m.path, m.val_loss).expect("string write");
}

fn parse_meta(line: &str) -> Result<PathCheckpointMeta> {
    let f: Vec<&str> = line.split('\t').collect();
    let bad = || Error::Parse(format!("checkpoint meta row {line:?}"));
    if f.len() != 3 {
        return Err(bad());
    }
    Ok(PathCheckpointMeta {
        step: f[0].parse().map_err(|_| bad())?,
        path: f[1].parse().map_err(|_| bad())?,
        val_loss: f[2].parse().map_err(|_| bad())?,
    })
}

fn save_run(dir: &Path, run: RunParts<'_>, next_step: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::io::write_params(&dir.join("modules.bin"), &run.store.to_blob()?)?;
    if !run.inner.is_empty() {
        let mut inner = ParamTree::new();
        for (s, st) in run.inner.iter().enumerate() {
            inner.merge(st.to_blob()?.prefixed(&format!("shard{s}.")))?;
        }
        crate::io::write_params(&dir.join("inner.bin"), &inner)?;
    }
    crate::routing::write_shard_set(&dir.join("shards.tsv"), run.shards)?;
    write_metrics(&dir.join("metrics.tsv"), run.metrics)?;
    let mut metas = String::new();
    run.metas.iter().for_each(|m| meta_row(&mut metas, m));
    let mut chosen = String::new();
    let mut sel = ParamTree::new();
    for (path, s) in run.selected.iter().enumerate() {
        if let Some((m, params)) = s {
            meta_row(&mut chosen, m);
            sel.merge(params.prefixed(&format!("path{path}.")))?;
        }
    }
    std::fs::write(dir.join("metas.tsv"), metas)?;
    std::fs::write(dir.join("selected.tsv"), chosen)?;
    crate::io::write_params(&dir.join("selected.bin"), &sel)?;
    std::fs::write(dir.join("next_step"), format!("{next_step}\n"))?;
    Ok(())
}

fn load_run(dir: &Path, cfg: &ModularConfig, plan: &TrainPlan) -> Result<(TrainOutcome, usize)> {
    let read = |name: &str| std::fs::read_to_string(dir.join(name));
    let next_step: usize = read("next_step")?
        .trim()
        .parse()
        .map_err(|_| Error::Parse("next_step".into()))?;
    let store = ModuleStore::from_blob(
        cfg,
        &crate::io::read_params(&dir.join("modules.bin"))?,
        plan.outer,
    )?;
    let shards = crate::routing::read_shard_set(&dir.join("shards.tsv"))?;
    check_layout(cfg, &shards)?;
    let inner_path = dir.join("inner.bin");
    let inner = if inner_path.exists() {
        let blob = crate::io::read_params(&inner_path)?;
        (0..shards.len())
            .map(|s| InnerState::from_blob(&blob.strip_prefix(&format!("shard{s}.")), &plan.inner))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let metrics = metrics_from_tsv(&read("metrics.tsv")?)?;
    let metas = read("metas.tsv")?
        .lines()
        .filter(|l| !l.is_empty())
        .map(parse_meta)
        .collect::<Result<_>>()?;
    let sel_blob = crate::io::read_params(&dir.join("selected.bin"))?;
    let mut selected = vec![None; cfg.path_count()];
    for line in read("selected.tsv")?.lines().filter(|l| !l.is_empty()) {
        let m = parse_meta(line)?;
        if m.path >= selected.len() {
            return Err(Error::Parse(format!(
                "selected path {} out of range",
                m.path
            )));
        }
        selected[m.path] = Some((m, sel_blob.strip_prefix(&format!("path{}.", m.path))));
    }
    Ok((
        TrainOutcome {
            store,
            shards,
            inner,
            metrics,
            metas,
            selected,
        },
        next_step,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tree(v: &[f64]) -> ParamTree {
        let mut t = ParamTree::new();
        t.insert("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap());
        t
    }

    fn contrib(shard: usize, size: usize, v: &[f64]) -> Contribution {
        Contribution {
            shard,
            shard_size: size,
            delta: tree(v),
        }
    }

    #[test]
    fn reweigh_alphas() {
        let key = ModuleKey::new(0, 0);
        let d = compute_outer_delta(
            key,
            &[contrib(0, 100, &[4.0]), contrib(1, 300, &[8.0])],
            true,
            false,
        )
        .unwrap();
        assert!((d.delta.get("w").unwrap().data()[0] - (0.25 * 4.0 + 0.75 * 8.0)).abs() < 1e-15);
        let eq = [contrib(0, 50, &[1.0, 2.0]), contrib(1, 50, &[3.0, -1.0])];
        let a = compute_outer_delta(key, &eq, true, false).unwrap();
        let b = compute_outer_delta(key, &eq, false, false).unwrap();
        assert!(a.delta.bit_eq(&b.delta));
    }

    #[test]
    fn rescale_by_sqrt_contributors() {
        let key = ModuleKey::new(0, 0);
        let one = compute_outer_delta(key, &[contrib(0, 10, &[3.0])], false, true).unwrap();
        assert_eq!(one.delta.get("w").unwrap().data(), &[3.0]);
        let four: Vec<Contribution> = (0..4).map(|i| contrib(i, 10, &[1.0])).collect();
        let d = compute_outer_delta(key, &four, false, true).unwrap();
        assert!((d.delta.get("w").unwrap().data()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn contributor_order_does_not_matter() {
        let key = ModuleKey::new(0, 0);
        let a = [
            contrib(2, 7, &[0.1]),
            contrib(0, 3, &[0.7]),
            contrib(1, 5, &[-0.3]),
        ];
        let mut b = a.clone();
        b.reverse();
        let da = compute_outer_delta(key, &a, true, true).unwrap();
        let db = compute_outer_delta(key, &b, true, true).unwrap();
        assert!(da.delta.bit_eq(&db.delta));
    }

    #[test]
    fn mismatched_contributors_rejected() {
        let key = ModuleKey::new(0, 0);
        assert!(compute_outer_delta(
            key,
            &[contrib(0, 1, &[1.0]), contrib(1, 1, &[1.0, 2.0])],
            false,
            false
        )
        .is_err());
        assert!(compute_outer_delta(key, &[], false, false).is_err());
    }

    #[test]
    fn early_stop_rules() {
        let m = |step, val_loss| PathCheckpointMeta {
            path: 0,
            step,
            val_loss,
        };
        assert_eq!(
            early_stop_select(&[m(0, 3.0), m(1, 2.0), m(2, 1.0)])[&0].step,
            2
        );
        assert_eq!(
            early_stop_select(&[m(0, 3.0), m(1, 1.0), m(2, 2.0)])[&0].step,
            1
        );
        assert_eq!(
            early_stop_select(&[m(0, 2.0), m(1, 1.0), m(2, 1.0)])[&0].step,
            1
        );
        assert_eq!(early_stop_select(&[m(2, 1.0), m(1, 1.0)])[&0].step, 1);
    }

    #[test]
    fn metrics_roundtrip() {
        let r = vec![
            MetricRecord {
                step: 0,
                path: 1,
                split: MetricSplit::Train,
                loss: 2.5,
            },
            MetricRecord {
                step: 3,
                path: 0,
                split: MetricSplit::Val,
                loss: 0.1 + 0.2,
            },
        ];
        assert_eq!(metrics_from_tsv(&metrics_to_tsv(&r)).unwrap(), r);
    }

    #[test]
    fn task_seeds_differ() {
        assert_ne!(task_seed(0, 0, 1), task_seed(0, 1, 0));
        assert_eq!(task_seed(5, 2, 3), task_seed(5, 2, 3));
    }
}
