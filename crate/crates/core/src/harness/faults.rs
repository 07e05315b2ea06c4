use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Trigger {
    /// Fires at a fixed tick.
    AtTick { tick: u64 },
    /// Fires `delay` ticks after the target worker starts its first train
    /// task of `phase`, if that task is still running then.
    WorkerTaskInPhase { phase: usize, delay: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Target {
    Worker { id: usize },
    Executor { id: usize },
    QueueServer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    /// The component loses in-progress work and returns on its own.
    Preempt,
    /// The component loses all in-memory state until the monitor restarts it.
    Crash,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub trigger: Trigger,
    pub target: Target,
    pub action: Action,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultPlan {
    pub faults: Vec<Fault>,
    /// Per-worker duration multipliers; missing entries are 1.
    pub speeds: Vec<f64>,
}

impl FaultPlan {
    pub fn none() -> Self {
        Self::default()
    }

    /// Preempts each worker one tick into its first train task of every
    /// phase.
    pub fn preempt_every_worker_each_phase(workers: usize, phases: usize) -> Self {
        let faults = (0..phases)
            .flat_map(|phase| {
                (0..workers).map(move |id| Fault {
                    trigger: Trigger::WorkerTaskInPhase { phase, delay: 1 },
                    target: Target::Worker { id },
                    action: Action::Preempt,
                })
            })
            .collect();
        FaultPlan {
            faults,
            speeds: Vec::new(),
        }
    }

    pub fn speed(&self, worker: usize) -> f64 {
        self.speeds.get(worker).copied().unwrap_or(1.0)
    }

    pub fn validate(&self, workers: usize, executors: usize) -> Result<()> {
        if self.speeds.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("worker speeds must be positive".into()));
        }
        for f in &self.faults {
            match f.target {
                Target::Worker { id } if id >= workers => {
                    return Err(Error::Config(format!(
                        "fault targets worker {id} of {workers}"
                    )))
                }
                Target::Executor { id } if id >= executors => {
                    return Err(Error::Config(format!(
                        "fault targets executor {id} of {executors}"
                    )))
                }
                Target::Executor { .. } | Target::QueueServer
                    if matches!(f.trigger, Trigger::WorkerTaskInPhase { .. }) =>
                {
                    return Err(Error::Config("task triggers only apply to workers".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("fault plan: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("fault plan: {e}")))
    }
}
