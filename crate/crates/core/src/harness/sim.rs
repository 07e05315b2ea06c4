use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::faults::{Action, FaultPlan, Target, Trigger};
use super::queue::{Task, TaskId, TaskKind, TaskQueue};
use super::registry::{Registry, RegistryRow, RowKind};
use super::store::{CheckpointRef, CheckpointStore};
use crate::error::{Error, Result};
use crate::modular::{ModuleEntry, ModuleKey, ModuleStore};
use crate::optim::NesterovState;
use crate::params::ParamTree;
use crate::routing::ShardSet;
use crate::trainer::{
    active_shards, check_layout, compute_outer_delta, nll_on_docs, path_val_docs, run_shard_phase,
    Contribution, InnerState, MetricRecord, MetricSplit, PathCheckpointMeta, TrainRun,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub workers: usize,
    pub executors: usize,
    /// Lease lifetime without a heartbeat.
    pub lease_ticks: u64,
    pub snapshot_every: u64,
    /// Delay before the monitor restarts a crashed component.
    pub restart_delay: u64,
    /// How long a preempted worker stays away.
    pub preempt_downtime: u64,
    /// Ticks per inner step at speed 1.
    pub ticks_per_step: f64,
    pub eval_ticks: u64,
    /// Ticks without progress before the watchdog gives up.
    pub watchdog_ticks: u64,
    pub max_ticks: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            workers: 4,
            executors: 2,
            lease_ticks: 4,
            snapshot_every: 5,
            restart_delay: 3,
            preempt_downtime: 2,
            ticks_per_step: 1.0,
            eval_ticks: 1,
            watchdog_ticks: 500,
            max_ticks: 10_000_000,
        }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 || self.executors == 0 {
            return Err(Error::Config(
                "need at least one worker and one executor".into(),
            ));
        }
        if self.lease_ticks == 0 || self.snapshot_every == 0 || self.watchdog_ticks == 0 {
            return Err(Error::Config(
                "lease_ticks, snapshot_every and watchdog_ticks must be positive".into(),
            ));
        }
        if !(self.ticks_per_step.is_finite() && self.ticks_per_step > 0.0) {
            return Err(Error::Config("ticks_per_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub tick: u64,
    pub actor: String,
    pub event: String,
    pub task: Option<TaskId>,
}

pub fn events_to_tsv(events: &[Event]) -> String {
    let mut out = String::from("tick\tactor\tevent\ttask\n");
    for e in events {
        let task = e.task.map_or_else(|| "-".to_string(), |t| t.to_string());
        let _ = writeln!(out, "{}\t{}\t{}\t{task}", e.tick, e.actor, e.event);
    }
    out
}

#[derive(Clone, Debug)]
enum WorkerStatus {
    Idle,
    Busy {
        task: Task,
        finish: u64,
    },
    /// Away until the tick; `None` waits for the monitor.
    Down {
        until: Option<u64>,
    },
}

#[derive(Clone, Debug)]
struct Worker {
    status: WorkerStatus,
    speed: f64,
    /// Pending task-triggered fault: (fire tick, task, action).
    armed: Option<(u64, TaskId, Action)>,
}

#[derive(Clone, Debug, Default)]
struct Executor {
    alive: bool,
    restart_at: Option<u64>,
    modules: Vec<ModuleKey>,
    /// Registry rows already consumed.
    cursor: usize,
    /// Raw contributor deltas per (phase, module), keyed by shard.
    stash: BTreeMap<(usize, ModuleKey), BTreeMap<usize, ParamTree>>,
}

/// Final state and artifacts of a simulated run.
#[derive(Debug)]
pub struct SimOutcome {
    pub store: ModuleStore,
    pub metrics: Vec<MetricRecord>,
    pub metas: Vec<PathCheckpointMeta>,
    pub selected: Vec<Option<(PathCheckpointMeta, ParamTree)>>,
    pub events: Vec<Event>,
    pub registry: Registry,
    pub ticks: u64,
}

impl SimOutcome {
    pub fn count_events(&self, name: &str) -> usize {
        self.events.iter().filter(|e| e.event == name).count()
    }
}

/// Train tasks of `phase`, one per active shard.
pub fn phase_tasks(run: &TrainRun<'_>, shards: &ShardSet, phase: usize) -> Vec<TaskId> {
    active_shards(run.plan, shards, run.cfg.path_count(), phase)
        .into_iter()
        .map(|unit| TaskId {
            phase,
            unit,
            kind: TaskKind::Train,
        })
        .collect()
}

/// Enqueues every train task of `phase`; returns how many were added.
pub fn enqueue_phase(
    queue: &mut TaskQueue,
    run: &TrainRun<'_>,
    shards: &ShardSet,
    phase: usize,
) -> Result<usize> {
    let ids = phase_tasks(run, shards, phase);
    for id in &ids {
        let path = shards.shards[id.unit].path;
        queue.enqueue(Task {
            id: *id,
            path,
            shard: Some(id.unit),
            inputs: Vec::new(),
            inner_state: None,
            tau: run.plan.inner_steps,
        })?;
    }
    Ok(ids.len())
}

struct Sim<'r, 'a> {
    run: &'r TrainRun<'a>,
    shards: ShardSet,
    cfg: HarnessConfig,
    plan_faults: FaultPlan,
    fired: Vec<bool>,
    store: CheckpointStore,
    registry: Registry,
    queue: Option<TaskQueue>,
    queue_restart_at: Option<u64>,
    snapshot_path: PathBuf,
    workers: Vec<Worker>,
    executors: Vec<Executor>,
    events: Vec<Event>,
    now: u64,
    active: Vec<Vec<usize>>,
    val_docs: Vec<Vec<usize>>,
    last_progress: u64,
    progress_marker: (usize, usize),
}

impl<'r, 'a> Sim<'r, 'a> {
    fn log(&mut self, actor: impl Into<String>, event: &str, task: Option<TaskId>) {
        self.events.push(Event {
            tick: self.now,
            actor: actor.into(),
            event: event.to_string(),
            task,
        });
    }

    fn phases(&self) -> usize {
        self.run.plan.outer_steps
    }

    fn bootstrap(&mut self, init: &ParamTree) -> Result<()> {
        let mut rows = Vec::new();
        for key in self.run.cfg.module_keys() {
            let params = init.subset(self.run.cfg.level_names(key.level))?;
            let r = self
                .store
                .put(&crate::modular::module_blob(&params, &params.zeros_like())?)?;
            rows.push(RegistryRow {
                kind: RowKind::Module,
                phase: 0,
                path: None,
                shard: None,
                module: Some(key),
                checkpoint: Some(r),
                value: None,
            });
        }
        let state = InnerState::new(init, &self.run.plan.inner);
        let r = self.store.put(&state.to_blob()?)?;
        for s in 0..self.shards.len() {
            rows.push(RegistryRow {
                kind: RowKind::InnerState,
                phase: 0,
                path: None,
                shard: Some(s),
                module: None,
                checkpoint: Some(r.clone()),
                value: None,
            });
        }
        self.registry.append(rows)
    }

    /// Version of the inner state a shard's task at `phase` starts from.
    fn inner_version(&self, shard: usize, phase: usize) -> usize {
        (0..phase)
            .rev()
            .find(|&t| self.active[t].contains(&shard))
            .map_or(0, |t| t + 1)
    }

    fn module_refs(
        &self,
        path: usize,
        version: usize,
    ) -> Result<Option<Vec<(ModuleKey, CheckpointRef)>>> {
        let mut refs = Vec::new();
        for key in self.run.cfg.path_modules(path)? {
            match self.registry.module(version, key) {
                Some(row) => refs.push((
                    key,
                    row.checkpoint
                        .clone()
                        .expect("module rows carry checkpoints"),
                )),
                None => return Ok(None),
            }
        }
        Ok(Some(refs))
    }

    fn schedule(&mut self) -> Result<()> {
        let Some(mut queue) = self.queue.take() else {
            return Ok(());
        };
        let mut added = Vec::new();
        for t in 0..self.phases() {
            for &s in &self.active[t] {
                let id = TaskId {
                    phase: t,
                    unit: s,
                    kind: TaskKind::Train,
                };
                if queue.contains(id)
                    || self
                        .registry
                        .has(RowKind::InnerState, t + 1, None, Some(s), None)
                {
                    continue;
                }
                let path = self.shards.shards[s].path;
                let Some(inputs) = self.module_refs(path, t)? else {
                    continue;
                };
                let Some(state) = self.registry.inner_state(self.inner_version(s, t), s) else {
                    continue;
                };
                let inner_state = state.checkpoint.clone();
                queue.enqueue(Task {
                    id,
                    path,
                    shard: Some(s),
                    inputs,
                    inner_state,
                    tau: self.run.plan.inner_steps,
                })?;
                added.push(id);
            }
            for (p, docs) in self.val_docs.iter().enumerate() {
                let id = TaskId {
                    phase: t,
                    unit: p,
                    kind: TaskKind::Eval,
                };
                if docs.is_empty()
                    || queue.contains(id)
                    || self.registry.has(RowKind::Eval, t, Some(p), None, None)
                {
                    continue;
                }
                let Some(inputs) = self.module_refs(p, t + 1)? else {
                    continue;
                };
                queue.enqueue(Task {
                    id,
                    path: p,
                    shard: None,
                    inputs,
                    inner_state: None,
                    tau: 0,
                })?;
                added.push(id);
            }
        }
        self.queue = Some(queue);
        for id in added {
            self.log("queue", "enqueue", Some(id));
        }
        Ok(())
    }

    fn expected_contributors(&self, phase: usize, key: ModuleKey) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for &s in &self.active[phase] {
            if self
                .run
                .cfg
                .path_modules(self.shards.shards[s].path)?
                .contains(&key)
            {
                out.push(s);
            }
        }
        Ok(out)
    }

    fn executor_tick(&mut self, e: usize) -> Result<()> {
        if !self.executors[e].alive {
            return Ok(());
        }
        // Online intake: stash each new contribution as soon as it is registered.
        let new_rows: Vec<RegistryRow> = self.registry.rows()[self.executors[e].cursor..].to_vec();
        self.executors[e].cursor = self.registry.len();
        for row in new_rows {
            if row.kind != RowKind::Contribution {
                continue;
            }
            let (Some(key), Some(shard), Some(r)) =
                (row.module, row.shard, row.checkpoint.as_ref())
            else {
                continue;
            };
            if !self.executors[e].modules.contains(&key)
                || self
                    .registry
                    .has(RowKind::Module, row.phase + 1, None, None, Some(key))
            {
                continue;
            }
            let delta = self.store.get(r)?;
            self.executors[e]
                .stash
                .entry((row.phase, key))
                .or_default()
                .insert(shard, delta);
        }
        let modules = self.executors[e].modules.clone();
        for key in modules {
            let Some(t) = (0..self.phases()).find(|&t| {
                !self
                    .registry
                    .has(RowKind::Module, t + 1, None, None, Some(key))
            }) else {
                continue;
            };
            let Some(current) = self.registry.module(t, key).cloned() else {
                continue;
            };
            let expected = self.expected_contributors(t, key)?;
            let current_ref = current.checkpoint.expect("module rows carry checkpoints");
            let next_ref = if expected.is_empty() {
                current_ref
            } else {
                let stash = self.executors[e].stash.get(&(t, key));
                if expected
                    .iter()
                    .any(|s| !stash.is_some_and(|m| m.contains_key(s)))
                {
                    continue;
                }
                let stash = stash.expect("checked above");
                let contributions: Vec<Contribution> = expected
                    .iter()
                    .map(|&s| Contribution {
                        shard: s,
                        shard_size: self.shards.shards[s].train.len(),
                        delta: stash[&s].clone(),
                    })
                    .collect();
                let delta = compute_outer_delta(
                    key,
                    &contributions,
                    self.run.plan.reweigh,
                    self.run.plan.rescale,
                )?;
                let blob = self.store.get(&current_ref)?;
                let mut params = blob.strip_prefix("param.");
                let mut outer = NesterovState {
                    velocity: blob.strip_prefix("velocity."),
                    cfg: self.run.plan.outer,
                };
                crate::optim::nesterov_outer_step(&mut params, &delta.delta, &mut outer)?;
                self.store
                    .put(&crate::modular::module_blob(&params, &outer.velocity)?)?
            };
            self.registry.append(vec![RegistryRow {
                kind: RowKind::Module,
                phase: t + 1,
                path: None,
                shard: None,
                module: Some(key),
                checkpoint: Some(next_ref),
                value: None,
            }])?;
            self.executors[e].stash.remove(&(t, key));
            self.log(format!("executor{e}"), &format!("publish {key}"), None);
        }
        Ok(())
    }

    fn materialize(&self, inputs: &[(ModuleKey, CheckpointRef)]) -> Result<ParamTree> {
        let mut out = ParamTree::new();
        for (_, r) in inputs {
            out.merge(self.store.get(r)?.strip_prefix("param."))?;
        }
        Ok(out)
    }

    /// Runs a finished task and registers its results atomically.
    fn execute(&mut self, task: &Task) -> Result<Vec<RegistryRow>> {
        let start = self.materialize(&task.inputs)?;
        match task.id.kind {
            TaskKind::Train => {
                let shard = task.shard.expect("train tasks name a shard");
                let state_ref = task.inner_state.as_ref().ok_or_else(|| {
                    Error::MissingCheckpoint(format!("inner state for {}", task.id))
                })?;
                let state =
                    InnerState::from_blob(&self.store.get(state_ref)?, &self.run.plan.inner)?;
                let out = run_shard_phase(
                    &start,
                    &self.shards,
                    shard,
                    task.id.phase,
                    &state,
                    self.run.corpus,
                    self.run.lm,
                    self.run.plan,
                )?;
                let mut rows = Vec::new();
                for key in self.run.cfg.path_modules(task.path)? {
                    let slice = out.update.subset(self.run.cfg.level_names(key.level))?;
                    let r = self.store.put(&slice)?;
                    rows.push(RegistryRow {
                        kind: RowKind::Contribution,
                        phase: task.id.phase,
                        path: Some(task.path),
                        shard: Some(shard),
                        module: Some(key),
                        checkpoint: Some(r),
                        value: None,
                    });
                }
                let r = self.store.put(&out.state.to_blob()?)?;
                let mean = out.losses.iter().sum::<f64>() / out.losses.len() as f64;
                rows.push(RegistryRow {
                    kind: RowKind::InnerState,
                    phase: task.id.phase + 1,
                    path: Some(task.path),
                    shard: Some(shard),
                    module: None,
                    checkpoint: Some(r),
                    value: Some(mean),
                });
                Ok(rows)
            }
            TaskKind::Eval => {
                let docs = &self.val_docs[task.path];
                let (nll, n) = nll_on_docs(
                    &start,
                    self.run.corpus,
                    docs,
                    self.run.lm,
                    self.run.plan.prefix_len,
                )?;
                Ok(vec![RegistryRow {
                    kind: RowKind::Eval,
                    phase: task.id.phase,
                    path: Some(task.path),
                    shard: None,
                    module: None,
                    checkpoint: None,
                    value: Some(nll / n.max(1) as f64),
                }])
            }
        }
    }

    fn already_registered(&self, id: TaskId) -> bool {
        match id.kind {
            TaskKind::Train => {
                self.registry
                    .has(RowKind::InnerState, id.phase + 1, None, Some(id.unit), None)
            }
            TaskKind::Eval => self
                .registry
                .has(RowKind::Eval, id.phase, Some(id.unit), None, None),
        }
    }

    fn duration(&self, w: usize, task: &Task) -> u64 {
        match task.id.kind {
            TaskKind::Train => ((task.tau as f64 * self.cfg.ticks_per_step * self.workers[w].speed)
                .ceil() as u64)
                .max(1),
            TaskKind::Eval => self.cfg.eval_ticks.max(1),
        }
    }

    fn worker_tick(&mut self, w: usize) -> Result<()> {
        let actor = format!("worker{w}");
        if let WorkerStatus::Down { until: Some(until) } = self.workers[w].status {
            if until <= self.now {
                self.workers[w].status = WorkerStatus::Idle;
                self.log(actor.clone(), "rejoin", None);
            }
        }
        if let WorkerStatus::Busy { task, finish } = self.workers[w].status.clone() {
            if let Some(q) = self.queue.as_mut() {
                q.heartbeat(task.id, w, self.now, self.cfg.lease_ticks);
            }
            if finish <= self.now {
                self.workers[w].status = WorkerStatus::Idle;
                self.workers[w].armed = None;
                if self.already_registered(task.id) {
                    self.log(actor.clone(), "skip-registered", Some(task.id));
                } else {
                    let rows = self.execute(&task)?;
                    match self.registry.append(rows) {
                        Ok(()) => self.log(actor.clone(), "register", Some(task.id)),
                        Err(Error::Duplicate(_)) => {
                            self.log(actor.clone(), "duplicate-rejected", Some(task.id))
                        }
                        Err(e) => return Err(e),
                    }
                }
                if let Some(q) = self.queue.as_mut() {
                    q.complete(task.id);
                }
            }
        }
        if matches!(self.workers[w].status, WorkerStatus::Idle) {
            let leased = match self.queue.as_mut() {
                Some(q) => q.lease(w, self.now, self.cfg.lease_ticks),
                None => None,
            };
            if let Some(task) = leased {
                let finish = self.now + self.duration(w, &task);
                self.arm(w, &task);
                self.log(actor, "lease", Some(task.id));
                self.workers[w].status = WorkerStatus::Busy { task, finish };
            }
        }
        Ok(())
    }

    fn arm(&mut self, w: usize, task: &Task) {
        if task.id.kind != TaskKind::Train {
            return;
        }
        for (i, f) in self.plan_faults.faults.iter().enumerate() {
            if self.fired[i] || f.target != (Target::Worker { id: w }) {
                continue;
            }
            if let Trigger::WorkerTaskInPhase { phase, delay } = f.trigger {
                if phase == task.id.phase {
                    self.fired[i] = true;
                    self.workers[w].armed = Some((self.now + delay, task.id, f.action));
                    return;
                }
            }
        }
    }

    fn bring_down(&mut self, target: Target, action: Action) {
        match target {
            Target::Worker { id } => {
                let until = match action {
                    Action::Preempt => Some(self.now + self.cfg.preempt_downtime),
                    Action::Crash => None,
                };
                let lost = match &self.workers[id].status {
                    WorkerStatus::Busy { task, .. } => Some(task.id),
                    _ => None,
                };
                self.workers[id].status = WorkerStatus::Down { until };
                self.workers[id].armed = None;
                let name = if action == Action::Preempt {
                    "preempted"
                } else {
                    "crashed"
                };
                self.log(format!("worker{id}"), name, lost);
            }
            Target::Executor { id } => {
                let modules = std::mem::take(&mut self.executors[id].modules);
                self.executors[id] = Executor {
                    alive: false,
                    restart_at: Some(self.now + self.cfg.restart_delay),
                    modules,
                    cursor: 0,
                    stash: BTreeMap::new(),
                };
                self.log(format!("executor{id}"), "crashed", None);
            }
            Target::QueueServer => {
                self.queue = None;
                self.queue_restart_at = Some(self.now + self.cfg.restart_delay);
                self.log("queue", "crashed", None);
            }
        }
    }

    fn fire_faults(&mut self) {
        for i in 0..self.plan_faults.faults.len() {
            let f = self.plan_faults.faults[i];
            if let Trigger::AtTick { tick } = f.trigger {
                if !self.fired[i] && tick == self.now {
                    self.fired[i] = true;
                    self.bring_down(f.target, f.action);
                }
            }
        }
        for w in 0..self.workers.len() {
            if let Some((at, id, action)) = self.workers[w].armed {
                let running = matches!(&self.workers[w].status, WorkerStatus::Busy { task, .. } if task.id == id);
                if at <= self.now && running {
                    self.bring_down(Target::Worker { id: w }, action);
                }
            }
        }
    }

    fn monitor(&mut self) -> Result<()> {
        for w in 0..self.workers.len() {
            if matches!(self.workers[w].status, WorkerStatus::Down { until: None }) {
                // Crashed workers come back after the restart delay.
                self.workers[w].status = WorkerStatus::Down {
                    until: Some(self.now + self.cfg.restart_delay),
                };
                self.log(format!("worker{w}"), "restart-scheduled", None);
            }
        }
        for e in 0..self.executors.len() {
            if let Some(at) = self.executors[e].restart_at {
                if at <= self.now {
                    self.executors[e].alive = true;
                    self.executors[e].restart_at = None;
                    self.log(format!("executor{e}"), "restarted", None);
                }
            }
        }
        if let Some(at) = self.queue_restart_at {
            if at <= self.now {
                let q = if self.snapshot_path.exists() {
                    TaskQueue::load(&self.snapshot_path)?
                } else {
                    TaskQueue::new()
                };
                self.queue = Some(q);
                self.queue_restart_at = None;
                self.log("queue", "restored", None);
            }
        }
        Ok(())
    }

    fn queue_tick(&mut self) -> Result<()> {
        let Some(q) = self.queue.as_mut() else {
            return Ok(());
        };
        let expired = q.expire(self.now);
        for id in expired {
            self.log("queue", "lease-expired", Some(id));
        }
        self.schedule()?;
        if self.now.is_multiple_of(self.cfg.snapshot_every) {
            if let Some(q) = &self.queue {
                q.save(&self.snapshot_path)?;
            }
        }
        Ok(())
    }

    fn finished(&self) -> bool {
        let t = self.phases();
        let modules_done = self
            .run
            .cfg
            .module_keys()
            .into_iter()
            .all(|k| self.registry.has(RowKind::Module, t, None, None, Some(k)));
        let evals_done = (0..t).all(|phase| {
            self.val_docs.iter().enumerate().all(|(p, d)| {
                d.is_empty() || self.registry.has(RowKind::Eval, phase, Some(p), None, None)
            })
        });
        modules_done && evals_done
    }

    fn dump(&self) -> String {
        let mut s = format!("tick {} registry rows {}", self.now, self.registry.len());
        match &self.queue {
            Some(q) => {
                let _ = write!(
                    s,
                    "; queue pending {} in-flight {} done {}",
                    q.pending_len(),
                    q.in_flight_len(),
                    q.done_len()
                );
            }
            None => s.push_str("; queue down"),
        }
        for (i, w) in self.workers.iter().enumerate() {
            let st = match &w.status {
                WorkerStatus::Idle => "idle".to_string(),
                WorkerStatus::Busy { task, finish } => format!("busy {} until {finish}", task.id),
                WorkerStatus::Down { until } => format!("down until {until:?}"),
            };
            let _ = write!(s, "; worker{i} {st}");
        }
        for (i, e) in self.executors.iter().enumerate() {
            let _ = write!(s, "; executor{i} alive={} stash={}", e.alive, e.stash.len());
        }
        s
    }

    fn tick(&mut self) -> Result<()> {
        self.fire_faults();
        self.monitor()?;
        self.queue_tick()?;
        for e in 0..self.executors.len() {
            self.executor_tick(e)?;
        }
        for w in 0..self.workers.len() {
            self.worker_tick(w)?;
        }
        let marker = (self.registry.len(), self.events.len());
        if marker != self.progress_marker {
            self.progress_marker = marker;
            self.last_progress = self.now;
        }
        if self.now - self.last_progress > self.cfg.watchdog_ticks {
            return Err(Error::Deadlock(self.dump()));
        }
        Ok(())
    }

    fn collect(self) -> Result<SimOutcome> {
        let t_final = self.phases();
        let cfg = self.run.cfg;
        let mut store = ModuleStore::default();
        for key in cfg.module_keys() {
            let row = self
                .registry
                .module(t_final, key)
                .ok_or_else(|| Error::MissingModule(key.to_string()))?;
            let blob = self.store.get(
                row.checkpoint
                    .as_ref()
                    .expect("module rows carry checkpoints"),
            )?;
            store.insert(
                key,
                ModuleEntry {
                    params: blob.strip_prefix("param."),
                    outer: NesterovState {
                        velocity: blob.strip_prefix("velocity."),
                        cfg: self.run.plan.outer,
                    },
                },
            );
        }
        let mut metrics = Vec::new();
        let mut metas = Vec::new();
        let mut selected: Vec<Option<(PathCheckpointMeta, ParamTree)>> =
            vec![None; cfg.path_count()];
        for t in 0..t_final {
            let mut by_path: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for &s in &self.active[t] {
                let row = self
                    .registry
                    .inner_state(t + 1, s)
                    .ok_or_else(|| Error::MissingCheckpoint(format!("inner state {t}/{s}")))?;
                by_path
                    .entry(self.shards.shards[s].path)
                    .or_default()
                    .push(row.value.unwrap_or(f64::NAN));
            }
            for (path, v) in by_path {
                metrics.push(MetricRecord {
                    step: t,
                    path,
                    split: MetricSplit::Train,
                    loss: v.iter().sum::<f64>() / v.len() as f64,
                });
            }
            for (path, docs) in self.val_docs.iter().enumerate() {
                if docs.is_empty() {
                    continue;
                }
                let row = self
                    .registry
                    .eval(t, path)
                    .ok_or_else(|| Error::MissingCheckpoint(format!("eval {t}/{path}")))?;
                let meta = PathCheckpointMeta {
                    path,
                    step: t,
                    val_loss: row.value.unwrap_or(f64::NAN),
                };
                metrics.push(MetricRecord {
                    step: t,
                    path,
                    split: MetricSplit::Val,
                    loss: meta.val_loss,
                });
                metas.push(meta);
                if self.run.plan.early_stop
                    && selected[path]
                        .as_ref()
                        .is_none_or(|(b, _)| meta.val_loss < b.val_loss)
                {
                    let refs = self
                        .module_refs(path, t + 1)?
                        .ok_or_else(|| Error::MissingModule(format!("path {path} at {t}")))?;
                    selected[path] = Some((meta, self.materialize(&refs)?));
                }
            }
        }
        Ok(SimOutcome {
            store,
            metrics,
            metas,
            selected,
            events: self.events,
            registry: self.registry,
            ticks: self.now,
        })
    }
}

/// Drives the full training run through the simulated infrastructure.
/// Checkpoints and queue snapshots live under `workdir`.
pub fn run_simulation(
    run: &TrainRun<'_>,
    init: &ParamTree,
    shards: ShardSet,
    cfg: &HarnessConfig,
    faults: &FaultPlan,
    workdir: &Path,
) -> Result<SimOutcome> {
    run.plan.validate()?;
    cfg.validate()?;
    faults.validate(cfg.workers, cfg.executors)?;
    check_layout(run.cfg, &shards)?;
    let store = CheckpointStore::open(workdir.join("checkpoints"))?;
    let snapshot_path = workdir.join("queue.snapshot.json");
    if snapshot_path.exists() {
        std::fs::remove_file(&snapshot_path)?;
    }
    let keys = run.cfg.module_keys();
    let mut executors: Vec<Executor> = (0..cfg.executors)
        .map(|_| Executor {
            alive: true,
            ..Executor::default()
        })
        .collect();
    for (i, k) in keys.into_iter().enumerate() {
        executors[i % cfg.executors].modules.push(k);
    }
    let active = (0..run.plan.outer_steps)
        .map(|t| active_shards(run.plan, &shards, run.cfg.path_count(), t))
        .collect();
    let val_docs = path_val_docs(&shards, run.cfg.path_count());
    let mut sim = Sim {
        run,
        shards,
        cfg: cfg.clone(),
        plan_faults: faults.clone(),
        fired: vec![false; faults.faults.len()],
        store,
        registry: Registry::new(),
        queue: Some(TaskQueue::new()),
        queue_restart_at: None,
        snapshot_path,
        workers: (0..cfg.workers)
            .map(|w| Worker {
                status: WorkerStatus::Idle,
                speed: faults.speed(w),
                armed: None,
            })
            .collect(),
        executors,
        events: Vec::new(),
        now: 0,
        active,
        val_docs,
        last_progress: 0,
        progress_marker: (0, 0),
    };
    sim.bootstrap(init)?;
    while !sim.finished() {
        if sim.now >= cfg.max_ticks {
            return Err(Error::Deadlock(format!(
                "tick limit reached: {}",
                sim.dump()
            )));
        }
        sim.tick()?;
        sim.now += 1;
    }
    sim.log("monitor", "finished", None);
    sim.collect()
}
