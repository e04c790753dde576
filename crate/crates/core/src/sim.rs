//! The simulator instance: world state, task launch paths, and the
//! deterministic run loop.

use std::cell::RefCell;
use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::BoundaryConfig;
use crate::cost::{CostEvent, CostLedger, WeightTable};
use crate::error::SimError;
use crate::exec::{Suspend, TaskFuture, YieldNow};
use crate::mem::{AddressSpace, DeadlockReport, Vma};
use crate::sched::{WaitId, WaitQueue};
use crate::services::{Delivery, Fd, FdTable, SocketId, SocketState};
use crate::task::{
    parse_cmdline, CloneFlags, ExecMode, PathKind, SchedState, StackKind, StackRef,
    TaskControlBlock, TaskId, TaskView,
};
use crate::transition::{ArmedInjection, EnterCause, InterruptId, ReturnFlight, ReturnStep};

/// Fixed default seed: runs are deterministic unless the caller opts out.
pub const DEFAULT_SEED: u64 = 42;

const DEFAULT_KERNEL_BUDGET: u64 = 64 * 1024 * 1024;
const DEFAULT_RX_CAPACITY: usize = 64 * 1024;
const DEFAULT_MAX_TASKS: usize = 1024;
const DEFAULT_TURN_LIMIT: u64 = 500_000_000;

/// Identifier of one simulated machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

pub(crate) struct Node {
    pub(crate) space: AddressSpace,
    pub(crate) linked_app: Option<TaskId>,
}

/// Non-ledger virtual-time advances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvanceReason {
    PollTick,
    DeliveryWait,
    WakeJitter,
}

/// One observable simulation event, recorded when tracing is enabled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    Charge {
        task: TaskId,
        event: CostEvent,
        n: u64,
    },
    Advance {
        cycles: u64,
        reason: AdvanceReason,
    },
    Schedule {
        task: TaskId,
    },
    Block {
        task: TaskId,
        wq: WaitId,
    },
    Wake {
        task: TaskId,
        wq: WaitId,
    },
    SignalQueued {
        task: TaskId,
        sig: u8,
    },
    SignalDelivered {
        task: TaskId,
        sig: u8,
    },
    NetDeliver {
        socket: u32,
        bytes: u64,
    },
    Enter {
        task: TaskId,
        cause: EnterCause,
        bypassed: bool,
    },
    Exit {
        task: TaskId,
        bypassed: bool,
    },
    ReturnProtocolStep {
        task: TaskId,
        step: ReturnStep,
    },
    InterruptDelivered {
        task: TaskId,
        id: InterruptId,
        step: ReturnStep,
    },
    Fault {
        task: TaskId,
        page: u64,
        double: bool,
        handler_stack: StackKind,
    },
}

pub(crate) struct World {
    pub(crate) config: BoundaryConfig,
    pub(crate) ledger: CostLedger,
    pub(crate) clock: u64,
    pub(crate) jitter_rng: ChaCha8Rng,
    pub(crate) tasks: Vec<Option<TaskControlBlock>>,
    pub(crate) ready: VecDeque<TaskId>,
    pub(crate) current: Option<TaskId>,
    pub(crate) wait_queues: Vec<WaitQueue>,
    pub(crate) suspend: Option<Suspend>,
    pub(crate) nodes: Vec<Node>,
    pub(crate) sockets: Vec<SocketState>,
    pub(crate) deliveries: BTreeMap<SocketId, VecDeque<Delivery>>,
    pub(crate) delivery_seq: u64,
    pub(crate) poll_watches: Vec<(SocketId, TaskId)>,
    pub(crate) trace: Option<Vec<TraceEvent>>,
    pub(crate) dispatch_chain: Vec<&'static str>,
    pub(crate) rx_capacity: usize,
    pub(crate) max_tasks: usize,
    pub(crate) stack_fast_path: bool,
    pub(crate) kernel_budget: u64,
    pub(crate) return_flight: Option<ReturnFlight>,
    pub(crate) armed_injections: Vec<ArmedInjection>,
    pub(crate) return_site_counter: u64,
    pub(crate) frame_counter: u64,
    pub(crate) delivered_signals: Vec<(TaskId, u8)>,
    created_tasks: usize,
}

impl World {
    pub(crate) fn task(&self, id: TaskId) -> &TaskControlBlock {
        self.tasks[id.0 as usize]
            .as_ref()
            .expect("live task control block")
    }

    pub(crate) fn task_mut(&mut self, id: TaskId) -> &mut TaskControlBlock {
        self.tasks[id.0 as usize]
            .as_mut()
            .expect("live task control block")
    }

    pub(crate) fn task_opt(&self, id: TaskId) -> Option<&TaskControlBlock> {
        self.tasks.get(id.0 as usize).and_then(|t| t.as_ref())
    }

    pub(crate) fn trace(&mut self, event: TraceEvent) {
        if let Some(trace) = &mut self.trace {
            trace.push(event);
        }
    }

    /// Records `n` occurrences of `event` against `task`, advancing the
    /// clock by the charged cycles.
    pub(crate) fn charge_for(&mut self, task: TaskId, event: CostEvent, n: u64) {
        if n == 0 {
            return;
        }
        let cycles = self.ledger.charge_n(event, n);
        self.clock += cycles;
        self.trace(TraceEvent::Charge { task, event, n });
    }

    /// Advances virtual time without a ledger event (poll ticks, delivery
    /// waits, wakeup jitter).
    pub(crate) fn advance_raw(&mut self, cycles: u64, reason: AdvanceReason) {
        if cycles == 0 {
            return;
        }
        self.clock += cycles;
        self.trace(TraceEvent::Advance { cycles, reason });
    }

    fn add_node(&mut self) -> NodeId {
        let id = NodeId(self.nodes.len());
        let wq = self.alloc_wait_queue(format!("mm_lock.node{}", id.0));
        self.nodes.push(Node {
            space: AddressSpace::new(wq, self.kernel_budget),
            linked_app: None,
        });
        id
    }
}

/// Application entry point: receives the task context and returns the task
/// body future.
pub type AppEntry = Box<dyn FnOnce(TaskCtx) -> Pin<Box<dyn Future<Output = ()>>>>;

/// Wraps an `async fn(TaskCtx)`-style closure as an [`AppEntry`].
pub fn entry<F, Fut>(f: F) -> AppEntry
where
    F: FnOnce(TaskCtx) -> Fut + 'static,
    Fut: Future<Output = ()> + 'static,
{
    Box::new(move |ctx| Box::pin(f(ctx)))
}

type FuturesMap = BTreeMap<TaskId, TaskFuture>;

/// Handle a task body uses to reach the simulated kernel. Cloneable and
/// cheap; all state lives in the shared world.
#[derive(Clone)]
pub struct TaskCtx {
    pub(crate) world: Rc<RefCell<World>>,
    pub(crate) futures: Rc<RefCell<FuturesMap>>,
    pub(crate) task: TaskId,
}

impl TaskCtx {
    pub fn task_id(&self) -> TaskId {
        self.task
    }

    pub fn node(&self) -> NodeId {
        self.world.borrow().task(self.task).node
    }

    /// The application arguments this task was launched with.
    pub fn args(&self) -> Vec<String> {
        self.world.borrow().task(self.task).cmdline.clone()
    }

    /// Current virtual time in cycles.
    pub fn now(&self) -> u64 {
        self.world.borrow().clock
    }

    /// Cooperatively gives up the virtual CPU; the task stays runnable.
    pub fn yield_now(&self) -> impl Future<Output = ()> {
        YieldNow {
            ctx: self.clone(),
            polled: false,
        }
    }

    pub(crate) fn block_on(&self, wq: WaitId) -> impl Future<Output = ()> {
        crate::exec::BlockOn {
            ctx: self.clone(),
            wq,
            polled: false,
        }
    }

    /// Clones this task. The child inherits the descriptor table and node,
    /// gets fresh stacks per the stack policy, and (with `CLONE_UKL`) records
    /// which stack its initial register state was copied from: the parent's
    /// kernel stack when the configuration switches stacks, the user stack
    /// otherwise.
    pub async fn clone_task(
        &self,
        flags: CloneFlags,
        body: AppEntry,
    ) -> Result<TaskId, SimError> {
        let frame = self.enter_syscall()?;
        let result = create_task(
            &self.world,
            &self.futures,
            TaskSpec {
                node: self.node(),
                path_kind: self.world.borrow().task(self.task).path_kind,
                parent: self.task,
                args: Vec::new(),
                clone_flags: flags,
                clone_of: Some(self.task),
            },
            body,
        );
        self.finish_syscall(frame).await;
        result
    }
}

struct TaskSpec {
    node: NodeId,
    path_kind: PathKind,
    parent: TaskId,
    args: Vec<String>,
    clone_flags: CloneFlags,
    clone_of: Option<TaskId>,
}

fn create_task(
    world: &Rc<RefCell<World>>,
    futures: &Rc<RefCell<FuturesMap>>,
    spec: TaskSpec,
    body: AppEntry,
) -> Result<TaskId, SimError> {
    let id = {
        let mut w = world.borrow_mut();
        if w.created_tasks >= w.max_tasks {
            return Err(SimError::TooManyTasks(w.max_tasks));
        }
        w.created_tasks += 1;
        let id = TaskId(w.tasks.len() as u64);
        let user_stack = if spec.path_kind == PathKind::LinkedApp && w.config.nss_ps() {
            w.alloc_nss_stack(spec.node)?
        } else {
            w.alloc_user_stack(spec.node)
        };
        let kernel_stack = StackRef {
            kind: StackKind::KernelPinned,
            vma: None,
        };
        let saved_stack_vma = if spec.path_kind == PathKind::LinkedApp {
            user_stack.vma
        } else {
            None
        };
        let init_state_source = spec.clone_of.and_then(|parent| {
            if !spec.clone_flags.clone_ukl {
                return None;
            }
            let parent_switches =
                w.trap_path(parent) || w.config.switches_stacks();
            Some(if parent_switches {
                StackKind::KernelPinned
            } else {
                w.task(parent).user_stack.kind
            })
        });
        let fds = match spec.clone_of {
            Some(parent) => Rc::clone(&w.task(parent).fds),
            None => Rc::new(RefCell::new(FdTable::default())),
        };
        let poll_wq = w.alloc_wait_queue(format!("task{}.poll", id.0));
        let tcb = TaskControlBlock {
            id,
            node: spec.node,
            parent: spec.parent,
            mode: ExecMode::Application,
            path_kind: spec.path_kind,
            byp_remaining: 0,
            kernel_execution: false,
            user_stack,
            kernel_stack,
            saved_stack_vma,
            need_resched: false,
            pending_signals: VecDeque::new(),
            clone_flags: spec.clone_flags,
            cmdline: spec.args,
            sched_state: SchedState::Ready,
            init_state_source,
            fault_depth: 0,
            poll_wq,
            fds,
        };
        w.tasks.push(Some(tcb));
        w.ready.push_back(id);
        id
    };
    let ctx = TaskCtx {
        world: Rc::clone(world),
        futures: Rc::clone(futures),
        task: id,
    };
    futures.borrow_mut().insert(id, body(ctx));
    Ok(id)
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunOutcome {
    /// Every task terminated.
    Completed,
    /// No task can run and the wait-for graph over the mm lock has a cycle.
    Deadlock(DeadlockReport),
    /// No task can run, nothing is in flight, and tasks remain blocked.
    Stalled,
    /// The turn limit was reached.
    TurnLimit,
}

pub struct SimBuilder {
    config: BoundaryConfig,
    weights: WeightTable,
    seed: u64,
    record_trace: bool,
    dispatch_chain_len: usize,
    rx_capacity: usize,
    max_tasks: usize,
    stack_fast_path: bool,
    kernel_budget: u64,
}

impl Default for SimBuilder {
    fn default() -> Self {
        SimBuilder {
            config: BoundaryConfig::base(),
            weights: WeightTable::default(),
            seed: DEFAULT_SEED,
            record_trace: false,
            dispatch_chain_len: 5,
            rx_capacity: DEFAULT_RX_CAPACITY,
            max_tasks: DEFAULT_MAX_TASKS,
            stack_fast_path: true,
            kernel_budget: DEFAULT_KERNEL_BUDGET,
        }
    }
}

const CHAIN_LAYERS: [&str; 8] = [
    "syscall_stub",
    "vfs",
    "file_ops",
    "socket_glue",
    "protocol",
    "extra_5",
    "extra_6",
    "extra_7",
];

impl SimBuilder {
    pub fn config(mut self, config: BoundaryConfig) -> Self {
        self.config = config;
        self
    }

    pub fn weights(mut self, weights: WeightTable) -> Self {
        self.weights = weights;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn record_trace(mut self, on: bool) -> Self {
        self.record_trace = on;
        self
    }

    /// Depth of the layered dispatch chain (default 5, max 8).
    pub fn dispatch_chain_len(mut self, layers: usize) -> Self {
        assert!(layers <= CHAIN_LAYERS.len());
        self.dispatch_chain_len = layers;
        self
    }

    pub fn rx_capacity(mut self, bytes: usize) -> Self {
        self.rx_capacity = bytes;
        self
    }

    pub fn max_tasks(mut self, cap: usize) -> Self {
        self.max_tasks = cap;
        self
    }

    /// Test knob: disables the saved-stack-VMA lock-free fault fast path.
    pub fn stack_vma_fast_path(mut self, on: bool) -> Self {
        self.stack_fast_path = on;
        self
    }

    /// Kernel-range byte budget for pinned nss_ps stacks.
    pub fn kernel_stack_budget(mut self, bytes: u64) -> Self {
        self.kernel_budget = bytes;
        self
    }

    pub fn build(self) -> Sim {
        let mut world = World {
            config: self.config,
            ledger: CostLedger::new(self.weights),
            clock: 0,
            jitter_rng: ChaCha8Rng::seed_from_u64(self.seed),
            tasks: vec![None],
            ready: VecDeque::new(),
            current: None,
            wait_queues: Vec::new(),
            suspend: None,
            nodes: Vec::new(),
            sockets: Vec::new(),
            deliveries: BTreeMap::new(),
            delivery_seq: 0,
            poll_watches: Vec::new(),
            trace: if self.record_trace {
                Some(Vec::new())
            } else {
                None
            },
            dispatch_chain: CHAIN_LAYERS[..self.dispatch_chain_len].to_vec(),
            rx_capacity: self.rx_capacity,
            max_tasks: self.max_tasks,
            stack_fast_path: self.stack_fast_path,
            kernel_budget: self.kernel_budget,
            return_flight: None,
            armed_injections: Vec::new(),
            return_site_counter: 0,
            frame_counter: 0,
            delivered_signals: Vec::new(),
            created_tasks: 0,
        };
        world.add_node();
        Sim {
            world: Rc::new(RefCell::new(world)),
            futures: Rc::new(RefCell::new(BTreeMap::new())),
        }
    }
}

/// One simulator instance. Instances share nothing; distinct instances may
/// run on different host threads.
pub struct Sim {
    world: Rc<RefCell<World>>,
    futures: Rc<RefCell<FuturesMap>>,
}

impl Sim {
    pub fn builder() -> SimBuilder {
        SimBuilder::default()
    }

    pub fn config(&self) -> BoundaryConfig {
        self.world.borrow().config
    }

    /// Adds another simulated machine connected over loopback.
    pub fn add_node(&self) -> NodeId {
        self.world.borrow_mut().add_node()
    }

    /// Launches the application linked into `node`'s kernel. There is no
    /// binary to load: the launch jumps straight to the entry function,
    /// records zero boundary events, and parses the application arguments
    /// from the kernel command line after the `--` delimiter.
    pub fn launch_linked_app(
        &self,
        node: NodeId,
        kernel_cmdline: &str,
        body: AppEntry,
    ) -> Result<TaskId, SimError> {
        {
            let w = self.world.borrow();
            if w.nodes[node.0].linked_app.is_some() {
                return Err(SimError::SecondLinkedApp);
            }
        }
        let args = parse_cmdline(kernel_cmdline).ok_or(SimError::BadCmdline)?;
        let id = create_task(
            &self.world,
            &self.futures,
            TaskSpec {
                node,
                path_kind: PathKind::LinkedApp,
                parent: TaskId::IDLE,
                args,
                clone_flags: CloneFlags::default(),
                clone_of: None,
            },
            body,
        )?;
        self.world.borrow_mut().nodes[node.0].linked_app = Some(id);
        Ok(id)
    }

    /// Spawns an ordinary companion process; all of its kernel interactions
    /// use the trap path regardless of the configuration.
    pub fn spawn_process(
        &self,
        node: NodeId,
        args: &[&str],
        body: AppEntry,
    ) -> Result<TaskId, SimError> {
        create_task(
            &self.world,
            &self.futures,
            TaskSpec {
                node,
                path_kind: PathKind::TrapProcess,
                parent: TaskId::IDLE,
                args: args.iter().map(|s| s.to_string()).collect(),
                clone_flags: CloneFlags::default(),
                clone_of: None,
            },
            body,
        )
    }

    /// Connects two tasks with a pair of stream sockets over the simulated
    /// loopback link.
    pub fn socket_pair_over_loopback(
        &self,
        task_a: TaskId,
        task_b: TaskId,
    ) -> Result<(Fd, Fd), SimError> {
        self.world.borrow_mut().socket_pair(task_a, task_b)
    }

    pub fn set_nodelay(&self, task: TaskId, fd: Fd, on: bool) -> Result<(), SimError> {
        let mut w = self.world.borrow_mut();
        let id = w.resolve_socket(task, fd)?;
        w.sockets[id.0].nodelay = on;
        Ok(())
    }

    /// Runs until completion, deadlock, or stall.
    pub fn run(&self) -> RunOutcome {
        self.run_limited(DEFAULT_TURN_LIMIT)
    }

    /// Runs at most `max_turns` scheduling turns.
    pub fn run_limited(&self, max_turns: u64) -> RunOutcome {
        let waker = Waker::noop();
        let mut cx = Context::from_waker(waker);
        let mut turns: u64 = 0;
        loop {
            let picked = {
                let mut w = self.world.borrow_mut();
                w.deliver_due();
                w.pick_next()
            };
            let Some(tid) = picked else {
                let mut w = self.world.borrow_mut();
                if let Some(due) = w.earliest_due() {
                    // Idle: jump virtual time to the next delivery.
                    w.trace(TraceEvent::Schedule {
                        task: TaskId::IDLE,
                    });
                    let gap = due.saturating_sub(w.clock);
                    w.advance_raw(gap, AdvanceReason::DeliveryWait);
                    continue;
                }
                if w.live_tasks() == 0 {
                    return RunOutcome::Completed;
                }
                if let Some(report) = w.any_deadlock() {
                    return RunOutcome::Deadlock(report);
                }
                debug_assert!(w.any_blocked());
                return RunOutcome::Stalled;
            };
            turns += 1;
            if turns > max_turns {
                return RunOutcome::TurnLimit;
            }
            let mut fut = self
                .futures
                .borrow_mut()
                .remove(&tid)
                .expect("scheduled task has a body");
            match fut.as_mut().poll(&mut cx) {
                Poll::Ready(()) => {
                    self.world.borrow_mut().finish_task(tid);
                }
                Poll::Pending => {
                    self.futures.borrow_mut().insert(tid, fut);
                    let mut w = self.world.borrow_mut();
                    match w.suspend.take() {
                        Some(Suspend::Yield) => {
                            w.task_mut(tid).sched_state = SchedState::Ready;
                            w.ready.push_back(tid);
                        }
                        Some(Suspend::Blocked) => {}
                        None => panic!("task suspended outside a simulator primitive"),
                    }
                    w.current = None;
                }
            }
        }
    }

    /// Total accounted cycles (sum of event counts times weights).
    pub fn ledger_cycles(&self) -> u64 {
        self.world.borrow().ledger.accounted_cycles()
    }

    /// Virtual time: accounted cycles plus poll ticks, delivery waits, and
    /// wakeup jitter.
    pub fn clock(&self) -> u64 {
        self.world.borrow().clock
    }

    pub fn ledger_counts(&self) -> BTreeMap<CostEvent, u64> {
        self.world.borrow().ledger.counts()
    }

    pub fn weights(&self) -> WeightTable {
        self.world.borrow().ledger.weights().clone()
    }

    pub fn task_view(&self, task: TaskId) -> Option<TaskView> {
        self.world.borrow().task_opt(task).map(|t| t.view())
    }

    /// Recorded trace (empty unless the builder enabled tracing).
    pub fn trace(&self) -> Vec<TraceEvent> {
        self.world.borrow().trace.clone().unwrap_or_default()
    }

    /// Signals acted on at exit checks, in delivery order.
    pub fn delivered_signals(&self) -> Vec<(TaskId, u8)> {
        self.world.borrow().delivered_signals.clone()
    }

    /// Queues a signal for `task`; it is acted on at the task's next
    /// non-bypassed kernel exit.
    pub fn deliver_signal(&self, task: TaskId, sig: u8) -> Result<(), SimError> {
        self.world.borrow_mut().deliver_signal_inner(task, sig)
    }

    pub fn set_bypass(&self, task: TaskId, n: u64) -> Result<(), SimError> {
        self.world.borrow_mut().set_bypass_inner(task, n)
    }

    pub fn set_kernel_execution(&self, task: TaskId, on: bool) -> Result<(), SimError> {
        self.world.borrow_mut().set_kernel_execution_inner(task, on)
    }

    /// Arms a test interrupt to fire when staged return number `site`
    /// reaches `step`.
    pub fn arm_interrupt_injection(&self, site: u64, step: ReturnStep, id: InterruptId) {
        self.world
            .borrow_mut()
            .armed_injections
            .push(ArmedInjection {
                site,
                step,
                id,
                fired: false,
            });
    }

    /// Queues an interrupt against the staged return currently in flight;
    /// errors when none is.
    pub fn inject_interrupt_at(&self, step: ReturnStep, id: InterruptId) -> Result<(), SimError> {
        self.world.borrow_mut().inject_interrupt_now(step, id)
    }

    /// Reports a wait-for cycle over the node's mm lock, if any.
    pub fn deadlock_monitor(&self, node: NodeId) -> Option<DeadlockReport> {
        self.world.borrow().deadlock_monitor_inner(node)
    }

    /// Number of staged returns executed so far (injection site ordinals).
    pub fn return_sites_executed(&self) -> u64 {
        self.world.borrow().return_site_counter
    }

    /// Stream conservation: for every socket, bytes drained plus bytes still
    /// buffered or in flight equal the bytes its peer sent, and buffers never
    /// exceed capacity.
    pub fn stream_conservation_ok(&self) -> bool {
        let w = self.world.borrow();
        w.sockets.iter().all(|s| {
            let within_capacity = s.rx.len() + s.in_flight <= s.capacity;
            let balanced = match s.peer {
                Some(peer) => {
                    let sent = w.sockets[peer.0].total_sent;
                    sent == s.total_drained + s.rx.len() as u64 + s.in_flight as u64
                }
                None => true,
            };
            within_capacity && balanced
        })
    }

    /// Digest of the application-relevant final state: tasks (mode, stacks,
    /// bypass budget, signals), address spaces, and socket buffers. Excludes
    /// the ledger, the clock, and traces.
    pub fn state_digest(&self) -> String {
        let w = self.world.borrow();
        let mut text = String::new();
        for tcb in w.tasks.iter().flatten() {
            let _ = writeln!(
                text,
                "task {} node {} parent {} mode {:?} path {:?} byp {} ktc {} ustack {:?} sched {:?} sigs {:?} src {:?}",
                tcb.id,
                tcb.node.0,
                tcb.parent,
                tcb.mode,
                tcb.path_kind,
                tcb.byp_remaining,
                tcb.kernel_execution,
                tcb.user_stack,
                tcb.sched_state,
                tcb.pending_signals,
                tcb.init_state_source,
            );
        }
        for (n, node) in w.nodes.iter().enumerate() {
            let _ = writeln!(text, "node {} app {:?}", n, node.linked_app);
            for vma in node.space.vmas.values() {
                let _ = writeln!(
                    text,
                    "vma {}..{} {:?} pinned {}",
                    vma.start, vma.end, vma.kind, vma.pinned
                );
            }
            for page in &node.space.populated {
                let _ = writeln!(text, "page {page}");
            }
        }
        for (i, s) in w.sockets.iter().enumerate() {
            let _ = writeln!(
                text,
                "sock {} peer {:?} rx {:?} closed {} peer_closed {} drained {}",
                i, s.peer, s.rx, s.closed, s.peer_closed, s.total_drained
            );
        }
        for (task, sig) in &w.delivered_signals {
            let _ = writeln!(text, "sig {task} {sig}");
        }
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        hex_string(&hasher.finalize())
    }

    /// Name of a wait queue appearing in the trace, for tests.
    pub fn wait_queue_name(&self, wq: WaitId) -> String {
        self.world.borrow().wait_queue_name(wq).to_string()
    }

    /// VMAs of a node, for tests.
    pub fn vmas(&self, node: NodeId) -> Vec<Vma> {
        self.world.borrow().nodes[node.0]
            .space
            .vmas
            .values()
            .copied()
            .collect()
    }

    /// Populated page count of a node, for tests.
    pub fn populated_pages(&self, node: NodeId) -> usize {
        self.world.borrow().nodes[node.0].space.populated.len()
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(out, "{b:02x}");
    }
    out
}
