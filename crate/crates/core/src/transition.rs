//! Application<->kernel transition paths: trap and linked entries, check
//! bypass, the iret return, and the staged `ret` return protocol with its
//! interrupt-deliverability gates.

use crate::cost::CostEvent;
use crate::error::SimError;
use crate::sim::{TaskCtx, TraceEvent, World};
use crate::task::{ExecMode, PathKind, SchedState, StackKind, TaskId};

/// What pushed the task into the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnterCause {
    Syscall,
    Fault,
    Interrupt,
}

/// Payload identifying an injected interrupt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterruptId(pub u32);

/// Saved pre-entry state. A frame is consumed exactly once by the matching
/// return operation; consumption is by move, so reuse cannot compile.
#[derive(Debug)]
pub(crate) struct Frame {
    pub(crate) task: TaskId,
    pub(crate) return_target: u64,
    /// Saved interrupt-enable flag; restored by PopFlags on the staged path.
    pub(crate) interrupts_enabled: bool,
    pub(crate) saved_stack: StackKind,
    pub(crate) entered_via: EnterCause,
    pub(crate) bypassed: bool,
    pub(crate) trap_path: bool,
    pub(crate) prior_mode: ExecMode,
}

/// Ordered steps of the staged `ret` return protocol. Interrupts become
/// deliverable only at/after [`ReturnStep::PopFlags`], by which point the
/// switch to the target stack has already happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ReturnStep {
    CopyRetAddrToUserStack,
    CopyFlagsToUserStack,
    SwitchToUserStack,
    PopFlags,
    PlainReturn,
}

impl ReturnStep {
    pub const ALL: [ReturnStep; 5] = [
        ReturnStep::CopyRetAddrToUserStack,
        ReturnStep::CopyFlagsToUserStack,
        ReturnStep::SwitchToUserStack,
        ReturnStep::PopFlags,
        ReturnStep::PlainReturn,
    ];

    /// True once saved flags are restored and interrupts may be delivered.
    pub fn permits_interrupts(self) -> bool {
        self >= ReturnStep::PopFlags
    }
}

/// A staged return currently executing.
#[derive(Debug)]
pub(crate) struct ReturnFlight {
    pub(crate) task: TaskId,
    pub(crate) site: u64,
    pub(crate) on_target_stack: bool,
    /// Interrupts queued during the protocol, awaiting the deliverability gate.
    pub(crate) pending: Vec<InterruptId>,
}

/// A test-armed interrupt injection: fire at `step` of staged return number
/// `site` (0-based, in execution order).
#[derive(Debug)]
pub(crate) struct ArmedInjection {
    pub(crate) site: u64,
    pub(crate) step: ReturnStep,
    pub(crate) id: InterruptId,
    pub(crate) fired: bool,
}

impl World {
    /// The task pays trap-path costs if it is a companion process or the
    /// whole configuration models an ordinary process.
    pub(crate) fn trap_path(&self, task: TaskId) -> bool {
        self.task(task).path_kind == PathKind::TrapProcess || self.config.is_trap()
    }

    /// Stack that kernel code runs on for this task, entered via `cause`.
    fn enter_destination(&self, task: TaskId, cause: EnterCause) -> StackKind {
        let tcb = self.task(task);
        if self.trap_path(task) || self.config.switches_stacks() {
            StackKind::KernelPinned
        } else {
            // Stackless configs keep running on whatever stack is current.
            let _ = cause;
            tcb.current_stack(false)
        }
    }

    /// Boundary entry: charges the entry events for the task's effective
    /// path, flips it to kernel mode, and captures the pre-entry frame.
    pub(crate) fn kernel_enter(
        &mut self,
        task: TaskId,
        cause: EnterCause,
    ) -> Result<Frame, SimError> {
        self.kernel_enter_to(task, cause, None)
    }

    /// Like [`World::kernel_enter`] but with an explicit handler stack
    /// destination (fault paths choose their stack by policy).
    pub(crate) fn kernel_enter_to(
        &mut self,
        task: TaskId,
        cause: EnterCause,
        dest: Option<StackKind>,
    ) -> Result<Frame, SimError> {
        let prior_mode = self.task(task).mode;
        if cause == EnterCause::Syscall && prior_mode == ExecMode::Kernel {
            return Err(SimError::ReentrantEnter(task));
        }
        let trap_path = self.trap_path(task);
        let from_stack = {
            let tcb = self.task(task);
            tcb.current_stack(trap_path || self.config.switches_stacks())
        };
        let to_stack = dest.unwrap_or_else(|| self.enter_destination(task, cause));
        let bypassed = !trap_path
            && cause == EnterCause::Syscall
            && self.config.byp()
            && self.task(task).byp_remaining > 0;
        if bypassed {
            // Bypass skips the check bundle; whether a stack switch happens
            // is governed by nss/nss_ps, not byp.
            self.task_mut(task).byp_remaining -= 1;
            if to_stack != from_stack {
                self.charge_for(task, CostEvent::StackSwitch, 1);
            }
        } else {
            if trap_path {
                self.charge_for(task, CostEvent::ModeSwitchEnter, 1);
            }
            self.charge_for(task, CostEvent::EntryChecks, 1);
            if to_stack != from_stack {
                self.charge_for(task, CostEvent::StackSwitch, 1);
            }
        }
        self.task_mut(task).mode = ExecMode::Kernel;
        if cause != EnterCause::Syscall {
            let depth = &mut self.task_mut(task).fault_depth;
            *depth += 1;
            debug_assert!(*depth <= 2, "fault nesting beyond one level");
        }
        self.frame_counter += 1;
        self.trace(TraceEvent::Enter {
            task,
            cause,
            bypassed,
        });
        Ok(Frame {
            task,
            return_target: self.frame_counter,
            interrupts_enabled: true,
            saved_stack: from_stack,
            entered_via: cause,
            bypassed,
            trap_path,
            prior_mode,
        })
    }

    /// Syscall exit: runs exit checks unless the transition was bypassed,
    /// delivers pending signals, and reports whether the caller must yield to
    /// honor a resched request. Consumes the frame.
    pub(crate) fn kernel_exit(&mut self, frame: Frame) -> bool {
        debug_assert_eq!(frame.entered_via, EnterCause::Syscall);
        debug_assert_ne!(frame.return_target, 0, "frame minted by kernel_enter");
        let task = frame.task;
        debug_assert_eq!(self.task(task).mode, ExecMode::Kernel);
        let from_stack = self.enter_destination(task, EnterCause::Syscall);
        let mut must_yield = false;
        if frame.bypassed {
            if from_stack != frame.saved_stack {
                self.charge_for(task, CostEvent::StackSwitch, 1);
            }
        } else {
            self.charge_for(task, CostEvent::ExitChecks, 1);
            if frame.trap_path {
                self.charge_for(task, CostEvent::ModeSwitchExit, 1);
            }
            if from_stack != frame.saved_stack {
                self.charge_for(task, CostEvent::StackSwitch, 1);
            }
            self.drain_signals(task);
            let tcb = self.task(task);
            if tcb.need_resched && !tcb.kernel_execution {
                self.task_mut(task).need_resched = false;
                must_yield = true;
            }
        }
        self.task_mut(task).mode = frame.prior_mode;
        self.trace(TraceEvent::Exit {
            task,
            bypassed: frame.bypassed,
        });
        must_yield
    }

    fn drain_signals(&mut self, task: TaskId) {
        while let Some(sig) = self.task_mut(task).pending_signals.pop_front() {
            self.delivered_signals.push((task, sig));
            self.trace(TraceEvent::SignalDelivered { task, sig });
        }
    }

    /// Return from a fault or interrupt. Without `ret` this is a single
    /// atomic iret; with `ret` the staged protocol runs step by step, firing
    /// armed injections and holding queued interrupts until the gate opens.
    /// Consumes the frame; the post-return task state is identical on both
    /// paths.
    pub(crate) fn return_from_event(&mut self, frame: Frame) {
        debug_assert_ne!(frame.entered_via, EnterCause::Syscall);
        let task = frame.task;
        if !self.config.ret() || frame.trap_path {
            self.charge_for(task, CostEvent::IretReturn, 1);
        } else {
            let site = self.return_site_counter;
            self.return_site_counter += 1;
            self.return_flight = Some(ReturnFlight {
                task,
                site,
                on_target_stack: false,
                pending: Vec::new(),
            });
            self.charge_for(task, CostEvent::RetReturn, 1);
            self.charge_for(task, CostEvent::StackSwitch, 1);
            for step in ReturnStep::ALL {
                self.trace(TraceEvent::ReturnProtocolStep { task, step });
                if step == ReturnStep::SwitchToUserStack {
                    self.return_flight.as_mut().unwrap().on_target_stack = true;
                }
                // Injections armed for this (site, step) become pending now.
                let mut fired: Vec<InterruptId> = Vec::new();
                for inj in &mut self.armed_injections {
                    if !inj.fired && inj.site == site && inj.step == step {
                        inj.fired = true;
                        fired.push(inj.id);
                    }
                }
                self.return_flight
                    .as_mut()
                    .unwrap()
                    .pending
                    .extend(fired);
                if step.permits_interrupts() && frame.interrupts_enabled {
                    let pending =
                        std::mem::take(&mut self.return_flight.as_mut().unwrap().pending);
                    for id in pending {
                        let flight = self.return_flight.as_ref().unwrap();
                        debug_assert!(
                            flight.on_target_stack && flight.task == task,
                            "interrupt delivered before the stack switch completed"
                        );
                        self.deliver_nested_interrupt(task, id, step);
                    }
                }
            }
            let flight = self.return_flight.take().unwrap();
            debug_assert!(flight.pending.is_empty());
        }
        if frame.entered_via != EnterCause::Syscall {
            self.task_mut(task).fault_depth -= 1;
        }
        self.task_mut(task).mode = frame.prior_mode;
    }

    /// Runs a nested interrupt: one-level entry, no-op handler, iret back.
    fn deliver_nested_interrupt(&mut self, task: TaskId, id: InterruptId, step: ReturnStep) {
        self.trace(TraceEvent::InterruptDelivered { task, id, step });
        let frame = self
            .kernel_enter_to(task, EnterCause::Interrupt, None)
            .expect("interrupt entry cannot be reentrant");
        // Handler body is empty; nested returns use the atomic path.
        self.charge_for(task, CostEvent::IretReturn, 1);
        self.task_mut(task).fault_depth -= 1;
        self.task_mut(task).mode = frame.prior_mode;
    }

    /// Queues an interrupt against the staged return currently in flight.
    pub(crate) fn inject_interrupt_now(
        &mut self,
        step: ReturnStep,
        id: InterruptId,
    ) -> Result<(), SimError> {
        let Some(flight) = self.return_flight.as_mut() else {
            return Err(SimError::NoReturnInFlight);
        };
        let site = flight.site;
        self.armed_injections.push(ArmedInjection {
            site,
            step,
            id,
            fired: false,
        });
        Ok(())
    }

    pub(crate) fn set_bypass_inner(&mut self, task: TaskId, n: u64) -> Result<(), SimError> {
        let tcb = self.task_opt(task).ok_or(SimError::UnknownTask(task))?;
        if tcb.path_kind != PathKind::LinkedApp {
            return Err(SimError::BypassOnTrapProcess);
        }
        self.task_mut(task).byp_remaining = n;
        Ok(())
    }
}

impl TaskCtx {
    /// Enters the kernel for a syscall-style service.
    pub(crate) fn enter_syscall(&self) -> Result<Frame, SimError> {
        self.world
            .borrow_mut()
            .kernel_enter(self.task, EnterCause::Syscall)
    }

    /// Exits the kernel, then yields if the exit checks asked for a resched.
    pub(crate) async fn finish_syscall(&self, frame: Frame) {
        let must_yield = self.world.borrow_mut().kernel_exit(frame);
        if must_yield {
            self.yield_now().await;
        }
    }

    /// Sets the number of upcoming transitions to bypass for this task.
    pub fn set_bypass(&self, n: u64) -> Result<(), SimError> {
        self.world.borrow_mut().set_bypass_inner(self.task, n)
    }

    /// Toggles run-to-completion mode for this task.
    pub fn set_kernel_execution(&self, on: bool) -> Result<(), SimError> {
        self.world
            .borrow_mut()
            .set_kernel_execution_inner(self.task, on)
    }
}

impl World {
    /// True while any task is blocked, used by tests that need to know the
    /// run stopped for lack of runnable work.
    pub(crate) fn any_blocked(&self) -> bool {
        self.tasks
            .iter()
            .flatten()
            .any(|t| matches!(t.sched_state, SchedState::Blocked(_)))
    }
}
