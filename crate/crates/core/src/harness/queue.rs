use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::store::CheckpointRef;
use crate::error::{Error, Result};
use crate::modular::ModuleKey;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Train,
    Eval,
}

/// Tasks are unique per (phase, unit, kind); the unit is the shard of a
/// train task and the path of an eval task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId {
    pub phase: usize,
    pub unit: usize,
    pub kind: TaskKind,
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            TaskKind::Train => "train",
            TaskKind::Eval => "eval",
        };
        write!(f, "{k}:p{}:u{}", self.phase, self.unit)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub path: usize,
    pub shard: Option<usize>,
    /// One checkpoint per module of the path.
    pub inputs: Vec<(ModuleKey, CheckpointRef)>,
    pub inner_state: Option<CheckpointRef>,
    pub tau: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub worker: usize,
    pub deadline: u64,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    pending: Vec<Task>,
    in_flight: Vec<(Task, Lease)>,
    done: Vec<TaskId>,
}

/// Pending tasks, leased tasks with deadlines, and finished task ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskQueue {
    pending: VecDeque<Task>,
    in_flight: BTreeMap<TaskId, (Task, Lease)>,
    done: BTreeSet<TaskId>,
}

impl TaskQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, id: TaskId) -> bool {
        self.done.contains(&id)
            || self.in_flight.contains_key(&id)
            || self.pending.iter().any(|t| t.id == id)
    }

    pub fn enqueue(&mut self, task: Task) -> Result<()> {
        if self.contains(task.id) {
            return Err(Error::Duplicate(format!("task {}", task.id)));
        }
        self.pending.push_back(task);
        Ok(())
    }

    pub fn lease(&mut self, worker: usize, now: u64, ttl: u64) -> Option<Task> {
        let task = self.pending.pop_front()?;
        self.in_flight.insert(
            task.id,
            (
                task.clone(),
                Lease {
                    worker,
                    deadline: now + ttl,
                },
            ),
        );
        Some(task)
    }

    /// Extends the lease if `worker` still holds it.
    pub fn heartbeat(&mut self, id: TaskId, worker: usize, now: u64, ttl: u64) -> bool {
        match self.in_flight.get_mut(&id) {
            Some((_, lease)) if lease.worker == worker => {
                lease.deadline = now + ttl;
                true
            }
            _ => false,
        }
    }

    pub fn complete(&mut self, id: TaskId) {
        self.pending.retain(|t| t.id != id);
        self.in_flight.remove(&id);
        self.done.insert(id);
    }

    /// Returns expired leases to the front of the queue, in id order.
    pub fn expire(&mut self, now: u64) -> Vec<TaskId> {
        let expired: Vec<TaskId> = self
            .in_flight
            .iter()
            .filter(|(_, (_, l))| l.deadline <= now)
            .map(|(id, _)| *id)
            .collect();
        for id in expired.iter().rev() {
            let (task, _) = self.in_flight.remove(id).expect("listed above");
            self.pending.push_front(task);
        }
        expired
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn in_flight_len(&self) -> usize {
        self.in_flight.len()
    }

    pub fn done_len(&self) -> usize {
        self.done.len()
    }

    pub fn is_idle(&self) -> bool {
        self.pending.is_empty() && self.in_flight.is_empty()
    }

    pub fn snapshot(&self) -> Result<String> {
        let s = Snapshot {
            pending: self.pending.iter().cloned().collect(),
            in_flight: self.in_flight.values().cloned().collect(),
            done: self.done.iter().copied().collect(),
        };
        serde_json::to_string(&s).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn restore(text: &str) -> Result<Self> {
        let s: Snapshot =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("queue snapshot: {e}")))?;
        Ok(TaskQueue {
            pending: s.pending.into(),
            in_flight: s
                .in_flight
                .into_iter()
                .map(|(t, l)| (t.id, (t, l)))
                .collect(),
            done: s.done.into_iter().collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.snapshot()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::restore(&std::fs::read_to_string(path)?)
    }
}
