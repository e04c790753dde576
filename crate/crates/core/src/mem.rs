//! Simulated address space: the user/kernel split, demand-paged regions,
//! grow-down stacks, the mm lock, the three page-fault stack policies, and
//! the saved-stack-VMA deadlock-avoidance fast path.

use std::collections::{BTreeMap, BTreeSet};

use crate::cost::CostEvent;
use crate::error::SimError;
use crate::sched::WaitId;
use crate::sim::{NodeId, TaskCtx, TraceEvent, World};
use crate::task::{StackKind, StackRef, TaskId};
use crate::transition::EnterCause;

pub const PAGE_SIZE: u64 = 4096;

/// Demand-paged user stacks reserve 8 MiB.
pub(crate) const USER_STACK_PAGES: u64 = 2048;
/// Pinned nss_ps user stacks are fixed at 1 MiB.
pub(crate) const NSS_STACK_PAGES: u64 = 256;

const MMAP_BASE_PAGE: u64 = 0x1000;
const STACK_TOP_PAGE: u64 = 0x0800_0000;
/// First page of the pinned kernel portion of the address range.
pub(crate) const KERNEL_BASE_PAGE: u64 = 0x1000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VmaKind {
    Stack,
    Mmap,
    Heap,
}

/// One contiguous mapped region, in page units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vma {
    pub start: u64,
    pub end: u64,
    pub kind: VmaKind,
    pub pinned: bool,
}

impl Vma {
    pub fn contains(&self, page: u64) -> bool {
        page >= self.start && page < self.end
    }
}

/// Per-node virtual address space.
#[derive(Debug)]
pub(crate) struct AddressSpace {
    pub(crate) vmas: BTreeMap<u64, Vma>,
    pub(crate) populated: BTreeSet<u64>,
    pub(crate) mm_owner: Option<TaskId>,
    pub(crate) mm_wq: WaitId,
    mmap_bump: u64,
    stack_bump: u64,
    kernel_bump: u64,
    kernel_budget_pages: u64,
    kernel_used_pages: u64,
}

impl AddressSpace {
    pub(crate) fn new(mm_wq: WaitId, kernel_budget_bytes: u64) -> AddressSpace {
        AddressSpace {
            vmas: BTreeMap::new(),
            populated: BTreeSet::new(),
            mm_owner: None,
            mm_wq,
            mmap_bump: MMAP_BASE_PAGE,
            stack_bump: STACK_TOP_PAGE,
            kernel_bump: KERNEL_BASE_PAGE,
            kernel_budget_pages: kernel_budget_bytes / PAGE_SIZE,
            kernel_used_pages: 0,
        }
    }

    pub(crate) fn vma_of(&self, page: u64) -> Option<&Vma> {
        self.vmas
            .range(..=page)
            .next_back()
            .map(|(_, v)| v)
            .filter(|v| v.contains(page))
    }

    /// Lowest populated page of a stack VMA; grow-down faults are legal one
    /// page below it.
    pub(crate) fn stack_watermark(&self, vma: &Vma) -> Option<u64> {
        self.populated.range(vma.start..vma.end).next().copied()
    }
}

/// How a page touch was resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPath {
    /// The page was already populated; no events recorded.
    AlreadyPopulated,
    /// Ordinary page-fault vector.
    PageFault { handler_stack: StackKind },
    /// The fault escalated to a double fault (no usable stack to vector on).
    DoubleFault { handler_stack: StackKind },
    /// The double-fault handler itself had no usable stack. Must be
    /// unreachable in every valid configuration.
    TripleFault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultOutcome {
    pub page: u64,
    pub path: FaultPath,
    /// Whether the saved-stack-VMA lock-free fast path resolved the fault.
    pub fast_path: bool,
}

/// A cycle in the wait-for graph over the mm lock.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeadlockReport {
    pub cycle: Vec<TaskId>,
}

enum PageClass {
    Populated,
    NeedsFault { vma_start: u64 },
    SegFault,
}

impl World {
    /// Raw region allocator. The caller is responsible for lock discipline.
    pub(crate) fn mmap_pages(
        &mut self,
        node: NodeId,
        pages: u64,
        kind: VmaKind,
        pinned: bool,
    ) -> Result<u64, SimError> {
        debug_assert!(pages > 0);
        let space = &mut self.nodes[node.0].space;
        let start = space.mmap_bump;
        space.mmap_bump += pages;
        let vma = Vma {
            start,
            end: start + pages,
            kind,
            pinned,
        };
        space.vmas.insert(start, vma);
        if pinned {
            for page in start..start + pages {
                space.populated.insert(page);
            }
        } else if kind == VmaKind::Stack {
            // Fresh stacks come up with their top page populated so the
            // grow-down watermark is defined.
            space.populated.insert(start + pages - 1);
        }
        Ok(start)
    }

    /// Allocates a demand-paged user stack VMA.
    pub(crate) fn alloc_user_stack(&mut self, node: NodeId) -> StackRef {
        let space = &mut self.nodes[node.0].space;
        space.stack_bump -= USER_STACK_PAGES;
        let start = space.stack_bump;
        space.vmas.insert(
            start,
            Vma {
                start,
                end: start + USER_STACK_PAGES,
                kind: VmaKind::Stack,
                pinned: false,
            },
        );
        space.populated.insert(start + USER_STACK_PAGES - 1);
        StackRef {
            kind: StackKind::UserDemandPaged,
            vma: Some(start),
        }
    }

    /// Allocates a fixed-size pinned user stack from the kernel range.
    /// Fails when the configured kernel budget is exhausted.
    pub(crate) fn alloc_nss_stack(&mut self, node: NodeId) -> Result<StackRef, SimError> {
        let space = &mut self.nodes[node.0].space;
        if space.kernel_used_pages + NSS_STACK_PAGES > space.kernel_budget_pages {
            return Err(SimError::AddressSpaceExhausted(
                "kernel-range budget for pinned user stacks",
            ));
        }
        space.kernel_used_pages += NSS_STACK_PAGES;
        let start = space.kernel_bump;
        space.kernel_bump += NSS_STACK_PAGES;
        space.vmas.insert(
            start,
            Vma {
                start,
                end: start + NSS_STACK_PAGES,
                kind: VmaKind::Stack,
                pinned: true,
            },
        );
        for page in start..start + NSS_STACK_PAGES {
            space.populated.insert(page);
        }
        Ok(StackRef {
            kind: StackKind::NssPinnedUser,
            vma: Some(start),
        })
    }

    fn classify(&self, node: NodeId, page: u64) -> PageClass {
        let space = &self.nodes[node.0].space;
        if space.populated.contains(&page) {
            return PageClass::Populated;
        }
        match space.vma_of(page) {
            Some(vma) if vma.kind == VmaKind::Stack => {
                let watermark = space
                    .stack_watermark(vma)
                    .expect("stack VMA always has a populated watermark page");
                if page >= vma.start && page + 1 >= watermark {
                    // At most one page below the current low watermark.
                    PageClass::NeedsFault { vma_start: vma.start }
                } else {
                    PageClass::SegFault
                }
            }
            Some(vma) => PageClass::NeedsFault { vma_start: vma.start },
            None => PageClass::SegFault,
        }
    }

    fn populate(&mut self, node: NodeId, page: u64) {
        self.nodes[node.0].space.populated.insert(page);
    }

    pub(crate) fn try_acquire_mm(&mut self, node: NodeId, task: TaskId) -> bool {
        let space = &mut self.nodes[node.0].space;
        if space.mm_owner.is_none() {
            space.mm_owner = Some(task);
            true
        } else {
            false
        }
    }

    pub(crate) fn release_mm(&mut self, node: NodeId, task: TaskId) {
        let space = &mut self.nodes[node.0].space;
        assert_eq!(
            space.mm_owner,
            Some(task),
            "mm lock released by a non-owner"
        );
        space.mm_owner = None;
        let wq = space.mm_wq;
        self.wake_one(wq);
    }

    /// Reports a cycle in the wait-for graph over the node's mm lock,
    /// including the self-wait case.
    pub(crate) fn deadlock_monitor_inner(&self, node: NodeId) -> Option<DeadlockReport> {
        let space = &self.nodes[node.0].space;
        let owner = space.mm_owner?;
        let waiters = &self.wait_queues[space.mm_wq.0].waiters;
        if waiters.is_empty() {
            return None;
        }
        // Single lock: the only possible cycle is the owner waiting on its
        // own lock.
        if waiters.contains(&owner) {
            Some(DeadlockReport {
                cycle: vec![owner],
            })
        } else {
            None
        }
    }

    /// Deadlock check across every node, used when the run stalls.
    pub(crate) fn any_deadlock(&self) -> Option<DeadlockReport> {
        (0..self.nodes.len()).find_map(|n| self.deadlock_monitor_inner(NodeId(n)))
    }
}

impl TaskCtx {
    /// Explicitly takes this node's mm lock, blocking while another task
    /// holds it.
    pub async fn acquire_mm_lock(&self) {
        self.acquire_mm(self.node()).await;
    }

    /// Releases the mm lock. Panics if this task is not the owner; the lock
    /// is never released by a non-owner.
    pub fn release_mm_lock(&self) {
        let node = self.node();
        self.world.borrow_mut().release_mm(node, self.task);
    }

    async fn acquire_mm(&self, node: NodeId) {
        loop {
            let (acquired, wq) = {
                let mut w = self.world.borrow_mut();
                let ok = w.try_acquire_mm(node, self.task);
                (ok, w.nodes[node.0].space.mm_wq)
            };
            if acquired {
                return;
            }
            self.block_on(wq).await;
        }
    }

    /// mmap service: creates a demand-paged (or pinned) region under the mm
    /// lock. The lock is not recursive: calling with the lock already held by
    /// this task is an error. Under nss the service consumes one fresh page
    /// of the caller's user stack while the lock is held, which is what makes
    /// the fault fast path necessary.
    pub async fn sys_mmap(
        &self,
        length_bytes: u64,
        kind: VmaKind,
    ) -> Result<u64, SimError> {
        self.sys_mmap_inner(length_bytes, kind, false).await
    }

    /// Direct internal allocation of pinned, pre-populated memory (no
    /// automatic transition path exists for it; linked application only).
    pub async fn vmalloc(&self, length_bytes: u64) -> Result<u64, SimError> {
        {
            let w = self.world.borrow();
            if w.task(self.task).path_kind != crate::task::PathKind::LinkedApp {
                return Err(SimError::ShortcutOnTrapProcess);
            }
        }
        let node = self.node();
        if {
            let w = self.world.borrow();
            w.nodes[node.0].space.mm_owner == Some(self.task)
        } {
            return Err(SimError::MmLockHeld);
        }
        self.acquire_mm(node).await;
        let pages = length_bytes.div_ceil(PAGE_SIZE).max(1);
        let result = self
            .world
            .borrow_mut()
            .mmap_pages(node, pages, VmaKind::Mmap, true);
        self.world.borrow_mut().release_mm(node, self.task);
        result.map(|start| start * PAGE_SIZE)
    }

    async fn sys_mmap_inner(
        &self,
        length_bytes: u64,
        kind: VmaKind,
        pinned: bool,
    ) -> Result<u64, SimError> {
        let node = self.node();
        let frame = self.enter_syscall()?;
        self.world
            .borrow_mut()
            .charge_for(self.task, CostEvent::DispatchLayer, 1);
        let held_by_me = {
            let w = self.world.borrow();
            w.nodes[node.0].space.mm_owner == Some(self.task)
        };
        if held_by_me {
            self.finish_syscall(frame).await;
            return Err(SimError::MmLockHeld);
        }
        self.acquire_mm(node).await;
        let pages = length_bytes.div_ceil(PAGE_SIZE).max(1);
        let created = self.world.borrow_mut().mmap_pages(node, pages, kind, pinned);
        // Kernel code on a demand-paged user stack grows it while the lock
        // is held; that fault must resolve without re-taking the lock.
        let touch_stack = {
            let w = self.world.borrow();
            w.config.nss() && w.task(self.task).user_stack.kind == StackKind::UserDemandPaged
        };
        let mut touch_result = Ok(());
        if touch_stack {
            if let Some(addr) = self.next_stack_growth_addr() {
                touch_result = self.touch(addr).await.map(|_| ());
            }
        }
        self.world.borrow_mut().release_mm(node, self.task);
        self.finish_syscall(frame).await;
        touch_result?;
        created.map(|start| start * PAGE_SIZE)
    }

    /// Address of the next grow-down page of this task's own user stack.
    pub fn next_stack_growth_addr(&self) -> Option<u64> {
        let w = self.world.borrow();
        let tcb = w.task(self.task);
        let vma_start = tcb.user_stack.vma?;
        let space = &w.nodes[tcb.node.0].space;
        let vma = *space.vmas.get(&vma_start)?;
        if vma.pinned {
            return None;
        }
        let watermark = space.stack_watermark(&vma)?;
        if watermark == vma.start {
            return None;
        }
        Some((watermark - 1) * PAGE_SIZE)
    }

    /// Touches one byte of memory. Populated pages cost nothing; absent
    /// pages run the configured fault path and become populated.
    pub async fn touch(&self, addr: u64) -> Result<FaultOutcome, SimError> {
        let page = addr / PAGE_SIZE;
        let node = self.node();
        let classified = {
            let w = self.world.borrow();
            match w.classify(node, page) {
                PageClass::Populated => None,
                PageClass::NeedsFault { vma_start } => Some(Ok(vma_start)),
                PageClass::SegFault => Some(Err(SimError::SegFault(addr))),
            }
        };
        let vma_start = match classified {
            None => {
                return Ok(FaultOutcome {
                    page,
                    path: FaultPath::AlreadyPopulated,
                    fast_path: false,
                })
            }
            Some(Err(e)) => return Err(e),
            Some(Ok(v)) => v,
        };
        // Decide the fault path: which vector fires and which stack the
        // handler runs on. The handler stack must be usable: a pinned stack
        // always is; the current stack is not if the fault is the current
        // stack's own growth (nothing to push the exception state onto).
        let (path, handler_stack) = {
            let mut w = self.world.borrow_mut();
            let trap_path = w.trap_path(self.task);
            let cfg = w.config;
            let tcb = w.task(self.task);
            let current_stack = tcb.current_stack(trap_path || cfg.switches_stacks());
            let on_current_stack_vma = tcb.user_stack.vma == Some(vma_start)
                && current_stack == StackKind::UserDemandPaged;
            let initial: StackKind = if trap_path {
                StackKind::KernelPinned
            } else if cfg.pf_ss() {
                StackKind::FaultDedicated
            } else if cfg.switches_stacks() {
                StackKind::KernelPinned
            } else {
                current_stack
            };
            let initial_usable = initial.pinned() || !on_current_stack_vma;
            let (path, handler_stack) = if initial_usable {
                w.charge_for(self.task, CostEvent::PageFaultVector, 1);
                (
                    FaultPath::PageFault {
                        handler_stack: initial,
                    },
                    initial,
                )
            } else {
                // No usable stack to vector the page fault on: the hardware
                // raises a double fault, which always gets a dedicated
                // stack. The double-fault handler only knows how to branch
                // to page-fault handling under pf_df.
                assert!(
                    cfg.pf_df(),
                    "stackless fault without a fault-stack policy; \
                     unreachable for validated configs"
                );
                let df = StackKind::DoubleFaultDedicated;
                if !df.pinned() {
                    // Triple fault: the double-fault stack itself unusable.
                    return Ok(FaultOutcome {
                        page,
                        path: FaultPath::TripleFault,
                        fast_path: false,
                    });
                }
                w.charge_for(self.task, CostEvent::DoubleFaultVector, 1);
                (FaultPath::DoubleFault { handler_stack: df }, df)
            };
            w.trace(TraceEvent::Fault {
                task: self.task,
                page,
                double: matches!(path, FaultPath::DoubleFault { .. }),
                handler_stack,
            });
            (path, handler_stack)
        };
        let frame = self
            .world
            .borrow_mut()
            .kernel_enter_to(self.task, EnterCause::Fault, Some(handler_stack))
            .expect("fault entry is never reentrant-checked");
        let fast_path = self.handle_page_fault(node, page, vma_start).await;
        self.world.borrow_mut().return_from_event(frame);
        Ok(FaultOutcome {
            page,
            path,
            fast_path,
        })
    }

    /// The fault handler body: the saved-stack-VMA fast path populates
    /// without touching the mm lock; every other fault takes the lock.
    /// Population itself is free; only vectoring costs.
    async fn handle_page_fault(&self, node: NodeId, page: u64, vma_start: u64) -> bool {
        let fast = {
            let w = self.world.borrow();
            w.stack_fast_path && w.task(self.task).saved_stack_vma == Some(vma_start)
        };
        if fast {
            self.world.borrow_mut().populate(node, page);
            return true;
        }
        // Slow path: look the VMA up under the lock. If this task already
        // holds the lock, it waits on itself; the deadlock monitor sees the
        // self-cycle.
        self.acquire_mm(node).await;
        self.world.borrow_mut().populate(node, page);
        self.world.borrow_mut().release_mm(node, self.task);
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vma_lookup_and_watermark() {
        let mut space = AddressSpace::new(WaitId(0), 64 * 1024 * 1024);
        space.vmas.insert(
            100,
            Vma {
                start: 100,
                end: 110,
                kind: VmaKind::Stack,
                pinned: false,
            },
        );
        space.populated.insert(109);
        let vma = *space.vma_of(105).unwrap();
        assert_eq!(vma.start, 100);
        assert_eq!(space.stack_watermark(&vma), Some(109));
        assert!(space.vma_of(110).is_none());
    }
}
