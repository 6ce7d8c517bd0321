//! Discrete-event simulation: one seeded generator, one ordered queue, one log.

mod engine;
mod live;
mod log;
mod queue;
mod report;

pub use engine::{
    load_and_plan, run, CraftLoad, DecideError, DecisionKind, Engine, Loadout, PendingDecision, SimError, EVENT_CAP,
};
pub use live::{CraftView, LiveHandle, LiveRunner, Snapshot, RING_CAPACITY};
pub use log::{parse_log, EventLog, LogEntry};
pub use queue::EventQueue;
pub use report::{Delivered, JobSummary, RunReport, RunStatus, Undelivered};
