//! Simulated distributed infrastructure: content-addressed checkpoints, an
//! append-only registry, a leasing task queue, executors, workers and a
//! monitor, all driven by a deterministic virtual clock.

mod faults;
mod queue;
mod registry;
mod sim;
mod store;

pub use faults::{Action, Fault, FaultPlan, Target, Trigger};
pub use queue::{Lease, Task, TaskId, TaskKind, TaskQueue};
pub use registry::{Registry, RegistryRow, RowKind};
pub use sim::{
    enqueue_phase, events_to_tsv, phase_tasks, run_simulation, Event, HarnessConfig, SimOutcome,
};
pub use store::{CheckpointRef, CheckpointStore};
