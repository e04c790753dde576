//! Deterministic user-space simulator of the kernel/application boundary
//! spectrum.
//!
//! A simulated machine ("node") hosts one statically linked application plus
//! any number of ordinary companion processes. Every application<->kernel
//! transition is charged to a [`cost::CostLedger`] according to the active
//! [`config::BoundaryConfig`], so the same workload can be replayed under any
//! point of the spectrum — conventional trap-based processes, the linked base
//! model, check bypass, shared stacks, `ret`-based event returns, the two
//! page-fault stack policies, and application-level shortcuts — and the runs
//! differ only in accounted cost, never in results.
//!
//! Simulation is single-threaded and fully deterministic: tasks are
//! cooperative coroutines driven by [`sim::Sim::run`], blocking is a scheduler
//! state, and virtual time advances only through ledger charges, poll ticks,
//! and network delivery waits.

pub mod config;
pub mod cost;
pub mod error;
mod exec;
pub mod mem;
pub mod sched;
pub mod services;
pub mod sim;
pub mod task;
pub mod transition;

pub use config::{Baseline, BoundaryConfig, ConfigError, FlagSet};
pub use cost::{CostEvent, CostLedger, WeightError, WeightTable};
pub use error::SimError;
pub use mem::{DeadlockReport, FaultOutcome, FaultPath, VmaKind, PAGE_SIZE};
pub use sched::WaitId;
pub use services::{Fd, IoDirection};
pub use sim::{
    entry, AppEntry, NodeId, RunOutcome, Sim, SimBuilder, TaskCtx, TraceEvent, DEFAULT_SEED,
};
pub use task::{CloneFlags, ExecMode, PathKind, StackKind, StackRef, TaskId, TaskView};
pub use transition::{EnterCause, InterruptId, ReturnStep};
