use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dipaco_core::eval::EvalConfig;
use dipaco_core::experiment::{
    docs_of, evaluate_with_chunks, fit_run_chunk_router, make_shards, ExperimentConfig, RouterKind,
    RunArtifacts, TrainMode,
};
use dipaco_core::harness::{events_to_tsv, run_simulation, FaultPlan};
use dipaco_core::io::{read_params, write_params};
use dipaco_core::modular::PathSource;
use dipaco_core::routing::{AnyRouter, DiscriminativeResharder, Resharder, Router, ShardSet};
use dipaco_core::trainer::{
    write_metrics, LoopState, MetricSplit, TrainOutcome, TrainRun, TrainState,
};

use crate::config::config_error;
use crate::workdir::{capture, mode_name, Workdir};
use crate::{EvalArgs, ShardArgs, SimulateArgs, StageArgs, TrainArgs};

pub fn make_data(args: &StageArgs, overrides: &[String]) -> Result<()> {
    let wd = Workdir::open(&args.out)?;
    let cfg = wd.config(args.config.as_deref(), overrides)?;
    wd.capture(&cfg)?;
    let ds = wd.dataset(&cfg)?;
    println!(
        "corpora: train {} test {} chunk-router {} sequences in {}",
        ds.train.len(),
        ds.test.len(),
        ds.chunk_router.len(),
        wd.root.join("data").display()
    );
    Ok(())
}

pub fn pretrain(args: &StageArgs, overrides: &[String]) -> Result<()> {
    let wd = Workdir::open(&args.out)?;
    let cfg = wd.config(args.config.as_deref(), overrides)?;
    wd.capture(&cfg)?;
    let ds = wd.dataset(&cfg)?;
    let base = wd.base(&cfg, &ds)?;
    println!(
        "base model: {} parameters in {}",
        base.num_params(),
        wd.root.join("base.bin").display()
    );
    Ok(())
}

/// Sets the routed layout so the router addresses `k` paths.
fn apply_k(cfg: &mut ExperimentConfig, k: usize) -> Result<()> {
    if k == 0 {
        return Err(config_error("--k must be positive"));
    }
    if cfg.routing.router == RouterKind::Product {
        cfg.modular.levels = vec![k, k];
        cfg.modular.custom.clear();
        return Ok(());
    }
    let paths = cfg.modular_config(TrainMode::Dipaco)?.path_count();
    if paths == k {
        return Ok(());
    }
    if cfg.modular.custom.is_empty() && cfg.modular.levels.len() == 1 {
        cfg.modular.levels = vec![k];
        return Ok(());
    }
    Err(config_error(format!(
        "--k {k} does not match the {paths} paths of the configured layout; set modular.levels"
    )))
}

pub fn shard(args: &ShardArgs, overrides: &[String]) -> Result<()> {
    let wd = Workdir::open(&args.out)?;
    let mut cfg = wd.config(args.config.as_deref(), overrides)?;
    if let Some(r) = args.router {
        cfg.routing.router = r;
    }
    if let Some(o) = args.overlap {
        cfg.routing.overlap = o as usize;
    }
    if let Some(k) = args.k {
        apply_k(&mut cfg, k)?;
    }
    cfg.validate()?;
    wd.capture(&cfg)?;
    let ds = wd.dataset(&cfg)?;
    let base = wd.base(&cfg, &ds)?;
    let feats = wd.features(&cfg, &ds, &base)?;
    let (shards, _) = wd.shards(&cfg, &feats)?;
    let sizes: Vec<String> = shards
        .shards
        .iter()
        .map(|s| format!("{}:{}", s.path, s.train.len()))
        .collect();
    println!(
        "{} shards (path:train docs) {}; {} router documents",
        shards.len(),
        sizes.join(" "),
        shards.router_docs.len()
    );
    Ok(())
}

/// Discriminative resharding that also records each refitted router.
struct RecordingResharder<'a> {
    inner: DiscriminativeResharder<'a>,
    router_path: PathBuf,
}

impl Resharder for RecordingResharder<'_> {
    fn reshard(
        &mut self,
        round: usize,
        paths: &dyn PathSource,
        current: &ShardSet,
    ) -> dipaco_core::Result<ShardSet> {
        let next = self.inner.reshard(round, paths, current)?;
        if let Some(r) = self.inner.latest_router() {
            write_params(
                &self.router_path,
                &AnyRouter::Linear(r.clone()).to_params()?,
            )?;
        }
        Ok(next)
    }
}

fn routed(mode: TrainMode) -> bool {
    matches!(mode, TrainMode::Dipaco | TrainMode::Flat)
}

fn write_run_file(dir: &Path, mode: TrainMode, workdir: &Path) -> Result<()> {
    let abs = std::fs::canonicalize(workdir)?;
    let mut t = toml::Table::new();
    t.insert("mode".into(), mode_name(mode).into());
    t.insert("workdir".into(), abs.display().to_string().into());
    std::fs::write(dir.join("run.toml"), t.to_string())?;
    Ok(())
}

fn read_run_file(dir: &Path) -> Result<(TrainMode, PathBuf)> {
    let path = dir.join("run.toml");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| config_error(format!("{} is not a run directory: {e}", dir.display())))?;
    let t: toml::Table = text
        .parse()
        .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let field = |k: &str| {
        t.get(k)
            .and_then(|v| v.as_str())
            .ok_or_else(|| config_error(format!("{} lacks {k}", path.display())))
    };
    let mode = field("mode")?.parse::<TrainMode>()?;
    Ok((mode, PathBuf::from(field("workdir")?)))
}

fn summarize(outcome: &TrainOutcome) {
    for (path, sel) in outcome.selected.iter().enumerate() {
        let last = outcome
            .metrics
            .iter()
            .rev()
            .find(|m| m.path == path && m.split == MetricSplit::Val);
        match (sel, last) {
            (Some((meta, _)), Some(last)) => println!(
                "path {path}: final val ppl {:.4}, selected step {} (val ppl {:.4})",
                last.ppl(),
                meta.step,
                meta.val_loss.exp()
            ),
            (None, Some(last)) => println!("path {path}: final val ppl {:.4}", last.ppl()),
            _ => println!("path {path}: no validation documents"),
        }
    }
}

pub fn train(args: &TrainArgs, overrides: &[String]) -> Result<()> {
    let wd = Workdir::open(&args.out)?;
    let mut cfg = wd.config(args.config.as_deref(), overrides)?;
    let mode = args.mode.unwrap_or(cfg.modular.mode);
    let dir = wd.root.join("train").join(mode_name(mode));
    let state_dir = dir.join("state");
    let resuming = args.resume && state_dir.join("next_step").exists();
    if args.resume && !resuming {
        log::warn!("nothing to resume in {}; starting afresh", dir.display());
    }
    if resuming && args.config.is_none() {
        cfg = crate::config::load(&dir.join("config.toml"), overrides)?;
    }
    cfg.modular.mode = mode;
    cfg.validate()?;
    if !wd.config_path().exists() {
        wd.capture(&cfg)?;
    }
    let ds = wd.dataset(&cfg)?;
    let base = wd.base(&cfg, &ds)?;
    let feats = wd.features(&cfg, &ds, &base)?;
    let (shards, router) = if routed(mode) {
        wd.shards(&cfg, &feats)?
    } else {
        make_shards(&cfg, mode, &feats)?
    };
    let modular = cfg.modular_config(mode)?;
    std::fs::create_dir_all(&dir)?;
    capture(&dir.join("config.toml"), &cfg)?;
    write_run_file(&dir, mode, &wd.root)?;
    let router_path = dir.join("router.bin");

    let progress = if resuming {
        let p = LoopState::load(&state_dir, &modular, &cfg.plan)?;
        log::info!("resuming {} at outer step {}", mode_name(mode), p.next_step);
        p
    } else {
        write_params(&router_path, &router.to_params()?)?;
        LoopState::start(TrainState::new(&modular, &base, shards, &cfg.plan)?)
    };
    let run = TrainRun {
        cfg: &modular,
        lm: &cfg.model,
        corpus: &ds.train,
        plan: &cfg.plan,
    };
    let mut resharder =
        (routed(mode) && cfg.routing.router == RouterKind::Discriminative).then(|| {
            RecordingResharder {
                inner: DiscriminativeResharder::new(
                    &ds.train,
                    &feats,
                    &cfg.model,
                    cfg.plan.prefix_len,
                    cfg.routing.discriminative(),
                ),
                router_path: router_path.clone(),
            }
        });
    let metrics_path = dir.join("metrics.tsv");
    let outcome = run.train_loop(
        progress,
        resharder.as_mut().map(|r| r as &mut dyn Resharder),
        &mut |s| {
            s.save(&state_dir)?;
            write_metrics(&metrics_path, &s.metrics)
        },
    )?;
    if outcome.metrics.is_empty() {
        log::warn!("no outer steps left to run");
    }
    println!(
        "{} trained {} outer steps in {}",
        mode_name(mode),
        cfg.plan.outer_steps,
        dir.display()
    );
    summarize(&outcome);
    Ok(())
}

pub fn simulate(args: &SimulateArgs, overrides: &[String]) -> Result<()> {
    let wd = Workdir::open(&args.out)?;
    let mut cfg = wd.config(args.config.as_deref(), overrides)?;
    if let Some(w) = args.workers {
        cfg.harness.workers = w;
    }
    if let Some(e) = args.executors {
        cfg.harness.executors = e;
    }
    cfg.validate()?;
    if !wd.config_path().exists() {
        wd.capture(&cfg)?;
    }
    let mode = cfg.modular.mode;
    if routed(mode) && cfg.routing.router == RouterKind::Discriminative {
        return Err(config_error(
            "the simulated harness does not reshard; use a generative router",
        ));
    }
    let faults = match &args.faults {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| config_error(format!("cannot read faults {}: {e}", p.display())))?;
            FaultPlan::from_toml(&text)?
        }
        None => FaultPlan::none(),
    };
    faults.validate(cfg.harness.workers, cfg.harness.executors)?;
    let ds = wd.dataset(&cfg)?;
    let base = wd.base(&cfg, &ds)?;
    let feats = wd.features(&cfg, &ds, &base)?;
    let (shards, router) = if routed(mode) {
        wd.shards(&cfg, &feats)?
    } else {
        make_shards(&cfg, mode, &feats)?
    };
    let modular = cfg.modular_config(mode)?;
    let dir = wd.root.join("simulate").join(mode_name(mode));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    std::fs::create_dir_all(&dir)?;
    capture(&dir.join("config.toml"), &cfg)?;
    write_run_file(&dir, mode, &wd.root)?;
    write_params(&dir.join("router.bin"), &router.to_params()?)?;
    let run = TrainRun {
        cfg: &modular,
        lm: &cfg.model,
        corpus: &ds.train,
        plan: &cfg.plan,
    };
    let sim = run_simulation(&run, &base, shards.clone(), &cfg.harness, &faults, &dir)?;
    std::fs::write(dir.join("events.tsv"), events_to_tsv(&sim.events))?;
    std::fs::write(dir.join("registry.tsv"), sim.registry.to_tsv())?;
    write_metrics(&dir.join("metrics.tsv"), &sim.metrics)?;
    let outcome = TrainOutcome {
        store: sim.store.clone(),
        shards,
        inner: Vec::new(),
        metrics: sim.metrics.clone(),
        metas: sim.metas.clone(),
        selected: sim.selected.clone(),
    };
    outcome.save(&dir.join("state"), cfg.plan.outer_steps)?;
    println!(
        "simulated {} outer steps in {} ticks: {} leases, {} preemptions, {} crashes, {} expired leases",
        cfg.plan.outer_steps,
        sim.ticks,
        sim.count_events("lease"),
        sim.count_events("preempted"),
        sim.count_events("crashed"),
        sim.count_events("lease-expired"),
    );
    summarize(&outcome);
    Ok(())
}

pub fn eval(args: &EvalArgs, overrides: &[String]) -> Result<()> {
    let dir = &args.checkpoints;
    let (mode, root) = read_run_file(dir)?;
    let mut cfg = crate::config::load(&dir.join("config.toml"), overrides)?;
    if let Some(w) = args.route_every {
        cfg.eval.route_every = w;
    }
    if let Some(e) = args.early_stop {
        cfg.eval.early_stopped = e;
    }
    cfg.validate()?;
    let wd = Workdir::open(&root)?;
    let ds = wd.dataset(&cfg)?;
    let base = wd.base(&cfg, &ds)?;
    let modular = cfg.modular_config(mode)?;
    let (outcome, _) = TrainOutcome::load(&dir.join("state"), &modular, &cfg.plan)?;
    let router = AnyRouter::from_params(&read_params(&dir.join("router.bin"))?)?;
    let run = RunArtifacts {
        modular,
        outcome,
        router,
    };
    let ec: &EvalConfig = &cfg.eval;
    let scored = cfg.data.seq_len.saturating_sub(ec.prefix_len);
    let chunk = if ec.route_every > 0 && ec.route_every < scored {
        Some(fit_run_chunk_router(
            &run,
            &docs_of(&ds.chunk_router),
            &base,
            &cfg.model,
            ec,
            &cfg.routing,
        )?)
    } else {
        None
    };
    let report = evaluate_with_chunks(
        &run,
        chunk.as_ref().map(|c| c as &dyn Router),
        &docs_of(&ds.test),
        &base,
        &cfg.model,
        ec,
    )?;
    let out = dir.join(format!("eval-w{}.json", ec.route_every));
    std::fs::write(&out, report.to_json()?)?;
    println!(
        "ppl {:.6} over {} tokens (route every {}, {} switches, {} checkpoints); report {}",
        report.ppl,
        report.total_tokens,
        ec.route_every,
        report.switches,
        if ec.early_stopped {
            "early-stopped"
        } else {
            "final"
        },
        out.display()
    );
    Ok(())
}
