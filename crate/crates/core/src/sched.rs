//! Deterministic cooperative scheduling: the run queue, FIFO wait queues,
//! signal bookkeeping, and run-to-completion mode.
//!
//! Preemption points are exactly kernel-exit checks, explicit yields, and
//! blocking; there is no timer tick. "Blocking" is a scheduler state, never a
//! host-thread block, which is what makes deadlocks reproducible.

use std::collections::VecDeque;

use rand::Rng;

use crate::cost::CostEvent;
use crate::error::SimError;
use crate::exec::Suspend;
use crate::sim::{AdvanceReason, TraceEvent, World};
use crate::task::{PathKind, SchedState, TaskId};

/// Handle to one FIFO wait queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WaitId(pub(crate) usize);

#[derive(Debug)]
pub(crate) struct WaitQueue {
    pub(crate) name: String,
    pub(crate) waiters: VecDeque<TaskId>,
}

impl World {
    pub(crate) fn alloc_wait_queue(&mut self, name: impl Into<String>) -> WaitId {
        let id = WaitId(self.wait_queues.len());
        self.wait_queues.push(WaitQueue {
            name: name.into(),
            waiters: VecDeque::new(),
        });
        id
    }

    pub(crate) fn wait_queue_name(&self, wq: WaitId) -> &str {
        &self.wait_queues[wq.0].name
    }

    /// Parks the current task on `wq`, recording the voluntary sleep.
    pub(crate) fn block_current(&mut self, task: TaskId, wq: WaitId) {
        debug_assert_eq!(self.current, Some(task));
        self.charge_for(task, CostEvent::SchedSleep, 1);
        self.task_mut(task).sched_state = SchedState::Blocked(wq);
        self.wait_queues[wq.0].waiters.push_back(task);
        self.suspend = Some(Suspend::Blocked);
        self.trace(TraceEvent::Block { task, wq });
    }

    /// Wakes the head waiter of `wq`. Waking an empty queue is a no-op.
    pub(crate) fn wake_one(&mut self, wq: WaitId) -> Option<TaskId> {
        let task = self.wait_queues[wq.0].waiters.pop_front()?;
        self.finish_wake(task, wq);
        Some(task)
    }

    /// Pulls `task` out of whatever queue it blocks on and readies it.
    /// Returns false if the task was not blocked.
    pub(crate) fn wake_task(&mut self, task: TaskId) -> bool {
        let SchedState::Blocked(wq) = self.task(task).sched_state else {
            return false;
        };
        let waiters = &mut self.wait_queues[wq.0].waiters;
        if let Some(pos) = waiters.iter().position(|t| *t == task) {
            waiters.remove(pos);
        }
        self.finish_wake(task, wq);
        true
    }

    fn finish_wake(&mut self, task: TaskId, wq: WaitId) {
        debug_assert!(matches!(self.task(task).sched_state, SchedState::Blocked(q) if q == wq));
        self.task_mut(task).sched_state = SchedState::Ready;
        self.ready.push_back(task);
        self.charge_for(task, CostEvent::SchedWakeup, 1);
        let bound = self.ledger.weights().wake_jitter;
        if bound > 0 {
            let jitter = self.jitter_rng.gen_range(0..bound);
            self.advance_raw(jitter, AdvanceReason::WakeJitter);
        }
        if let Some(current) = self.current {
            self.task_mut(current).need_resched = true;
        }
        self.trace(TraceEvent::Wake { task, wq });
    }

    /// Queues `sig` for the task. A blocked task is woken so the signal can
    /// be acted on; action itself happens at the next non-bypassed kernel
    /// exit.
    pub(crate) fn deliver_signal_inner(&mut self, task: TaskId, sig: u8) -> Result<(), SimError> {
        if self.task_opt(task).is_none() {
            return Err(SimError::UnknownTask(task));
        }
        self.task_mut(task).pending_signals.push_back(sig);
        self.trace(TraceEvent::SignalQueued { task, sig });
        self.wake_task(task);
        Ok(())
    }

    /// Toggles run-to-completion mode: while on, the task ignores resched at
    /// preemption points and its blocking receives poll instead of sleeping.
    pub(crate) fn set_kernel_execution_inner(
        &mut self,
        task: TaskId,
        on: bool,
    ) -> Result<(), SimError> {
        let tcb = self
            .task_opt(task)
            .ok_or(SimError::UnknownTask(task))?;
        if tcb.path_kind != PathKind::LinkedApp {
            return Err(SimError::KernelExecOnTrapProcess);
        }
        self.task_mut(task).kernel_execution = on;
        Ok(())
    }

    /// Round-robin pick. Returns `None` when only the idle task is runnable.
    pub(crate) fn pick_next(&mut self) -> Option<TaskId> {
        let next = self.ready.pop_front();
        match next {
            Some(task) => {
                self.task_mut(task).sched_state = SchedState::Current;
                self.current = Some(task);
                self.trace(TraceEvent::Schedule { task });
                Some(task)
            }
            None => None,
        }
    }

    pub(crate) fn finish_task(&mut self, task: TaskId) {
        self.task_mut(task).sched_state = SchedState::Terminated;
        self.current = None;
    }

    /// Count of non-idle tasks that have not terminated.
    pub(crate) fn live_tasks(&self) -> usize {
        self.tasks
            .iter()
            .flatten()
            .filter(|t| t.sched_state != SchedState::Terminated)
            .count()
    }
}
