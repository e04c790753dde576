//! Minimal cooperative executor plumbing. Tasks are plain futures polled one
//! at a time by the run loop; suspension happens only through the two
//! primitives below, so the scheduler always knows why a task stopped.

use std::future::Future;
use std::pin::Pin;
use std::task::{Context, Poll};

use crate::sched::WaitId;
use crate::sim::TaskCtx;

pub(crate) type TaskFuture = Pin<Box<dyn Future<Output = ()>>>;

/// Why the current task's poll returned `Pending`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Suspend {
    /// Voluntary yield; the task goes back onto the ready queue.
    Yield,
    /// The task parked itself on a wait queue.
    Blocked,
}

pub(crate) struct YieldNow {
    pub(crate) ctx: TaskCtx,
    pub(crate) polled: bool,
}

impl Future for YieldNow {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        if self.polled {
            Poll::Ready(())
        } else {
            self.polled = true;
            self.ctx.world.borrow_mut().suspend = Some(Suspend::Yield);
            Poll::Pending
        }
    }
}

pub(crate) struct BlockOn {
    pub(crate) ctx: TaskCtx,
    pub(crate) wq: WaitId,
    pub(crate) polled: bool,
}

impl Future for BlockOn {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        if self.polled {
            Poll::Ready(())
        } else {
            self.polled = true;
            let task = self.ctx.task;
            let wq = self.wq;
            self.ctx.world.borrow_mut().block_current(task, wq);
            Poll::Pending
        }
    }
}
