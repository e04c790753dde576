//! Tasks: the simulated thread/process control blocks.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::fmt;
use std::rc::Rc;

use crate::sched::WaitId;
use crate::services::FdTable;
use crate::sim::NodeId;

/// Unique task identifier. Task 0 is the idle task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(pub u64);

impl TaskId {
    pub const IDLE: TaskId = TaskId(0);
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which execution model the task is currently in. Every task is in exactly
/// one mode at every simulation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Application,
    Kernel,
}

/// How the task reaches kernel services.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    /// Ordinary companion process; always pays the trap path.
    TrapProcess,
    /// The application linked into the kernel.
    LinkedApp,
}

/// The kinds of stacks a task can own or run on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackKind {
    /// Ordinary demand-paged user stack.
    UserDemandPaged,
    /// Fixed-size pinned kernel stack.
    KernelPinned,
    /// Pinned user stack allocated from the kernel range (nss_ps).
    NssPinnedUser,
    /// Dedicated pinned stack for page-fault handling (pf_ss).
    FaultDedicated,
    /// Dedicated pinned stack for double-fault handling.
    DoubleFaultDedicated,
}

impl StackKind {
    /// Pinned stacks never page-fault.
    pub fn pinned(self) -> bool {
        !matches!(self, StackKind::UserDemandPaged)
    }
}

/// A task's binding to one of its stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackRef {
    pub kind: StackKind,
    /// Start page of the backing VMA for user-range stacks.
    pub vma: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CloneFlags {
    /// Copy the child's initial register state from the stack the parent's
    /// configuration actually runs kernel code on.
    pub clone_ukl: bool,
}

/// Scheduler state. A task is in exactly one of these at any time; `Ready`
/// and `Blocked` correspond to membership in the run queue or one wait queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedState {
    Current,
    Ready,
    Blocked(WaitId),
    Terminated,
}

/// The simulated thread control block.
#[derive(Debug)]
pub(crate) struct TaskControlBlock {
    pub(crate) id: TaskId,
    pub(crate) node: NodeId,
    pub(crate) parent: TaskId,
    pub(crate) mode: ExecMode,
    pub(crate) path_kind: PathKind,
    pub(crate) byp_remaining: u64,
    pub(crate) kernel_execution: bool,
    pub(crate) user_stack: StackRef,
    pub(crate) kernel_stack: StackRef,
    pub(crate) saved_stack_vma: Option<u64>,
    pub(crate) need_resched: bool,
    pub(crate) pending_signals: VecDeque<u8>,
    pub(crate) clone_flags: CloneFlags,
    pub(crate) cmdline: Vec<String>,
    pub(crate) sched_state: SchedState,
    /// Stack the initial continuation state was copied from at clone time.
    pub(crate) init_state_source: Option<StackKind>,
    /// Fault nesting depth; at most one nested fault/interrupt is legal.
    pub(crate) fault_depth: u8,
    /// Private queue this task parks on while waiting in a readiness poll.
    pub(crate) poll_wq: WaitId,
    pub(crate) fds: Rc<RefCell<FdTable>>,
}

impl TaskControlBlock {
    /// The stack the task is executing on right now (outside fault handling).
    pub(crate) fn current_stack(&self, switches_stacks: bool) -> StackKind {
        match self.mode {
            ExecMode::Application => self.user_stack.kind,
            ExecMode::Kernel => {
                if switches_stacks {
                    self.kernel_stack.kind
                } else {
                    self.user_stack.kind
                }
            }
        }
    }
}

/// Read-only snapshot of a task, for tests and reporting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskView {
    pub id: TaskId,
    pub node: NodeId,
    pub parent: TaskId,
    pub mode: ExecMode,
    pub path_kind: PathKind,
    pub byp_remaining: u64,
    pub kernel_execution: bool,
    pub user_stack: StackRef,
    pub kernel_stack: StackRef,
    pub saved_stack_vma: Option<u64>,
    pub need_resched: bool,
    pub pending_signals: Vec<u8>,
    pub clone_flags: CloneFlags,
    pub cmdline: Vec<String>,
    pub sched_state: SchedState,
    pub init_state_source: Option<StackKind>,
}

impl TaskControlBlock {
    pub(crate) fn view(&self) -> TaskView {
        TaskView {
            id: self.id,
            node: self.node,
            parent: self.parent,
            mode: self.mode,
            path_kind: self.path_kind,
            byp_remaining: self.byp_remaining,
            kernel_execution: self.kernel_execution,
            user_stack: self.user_stack,
            kernel_stack: self.kernel_stack,
            saved_stack_vma: self.saved_stack_vma,
            need_resched: self.need_resched,
            pending_signals: self.pending_signals.iter().copied().collect(),
            clone_flags: self.clone_flags,
            cmdline: self.cmdline.clone(),
            sched_state: self.sched_state,
            init_state_source: self.init_state_source,
        }
    }
}

/// Splits a kernel command line at the standalone `--` token and returns the
/// application arguments after it, honoring double-quoted segments. Returns
/// `None` on an unterminated quote.
pub(crate) fn parse_cmdline(kernel_cmdline: &str) -> Option<Vec<String>> {
    let mut tokens: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut in_quote = false;
    let mut chars = kernel_cmdline.chars();
    loop {
        match chars.next() {
            Some('"') => {
                in_quote = !in_quote;
            }
            Some(c) if c.is_whitespace() && !in_quote => {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
            }
            Some(c) => current.push(c),
            None => {
                if in_quote {
                    return None;
                }
                if !current.is_empty() {
                    tokens.push(current);
                }
                break;
            }
        }
    }
    let args = match tokens.iter().position(|t| t == "--") {
        Some(pos) => tokens[pos + 1..].to_vec(),
        None => Vec::new(),
    };
    Some(args)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cmdline_split_after_delimiter() {
        assert_eq!(
            parse_cmdline("sim.opts -- port=7000").unwrap(),
            vec!["port=7000".to_string()]
        );
        assert_eq!(
            parse_cmdline("x -- a b c").unwrap(),
            vec!["a".to_string(), "b".to_string(), "c".to_string()]
        );
    }

    #[test]
    fn cmdline_without_delimiter_is_empty() {
        assert_eq!(parse_cmdline("ro quiet").unwrap(), Vec::<String>::new());
    }

    #[test]
    fn cmdline_quotes_group_tokens() {
        assert_eq!(
            parse_cmdline(r#"k -- "a b" c"#).unwrap(),
            vec!["a b".to_string(), "c".to_string()]
        );
    }

    #[test]
    fn cmdline_unterminated_quote_is_rejected() {
        assert!(parse_cmdline(r#"k -- "a b"#).is_none());
    }
}
