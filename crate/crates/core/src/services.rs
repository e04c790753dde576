//! Kernel service bodies: the fd table, the layered dispatch chain, an
//! in-memory reliable byte-stream transport with loopback delivery between
//! nodes, readiness polling, and the deep-shortcut entry points.
//!
//! Full-path I/O pays one `DispatchLayer` per chain layer plus one `CopyByte`
//! per byte; shortcuts call the transport directly and pay copies only. Both
//! paths share the same transport routines, so byte semantics are identical
//! by construction.

use std::collections::{BTreeMap, VecDeque};

use crate::cost::CostEvent;
use crate::error::SimError;
use crate::sched::WaitId;
use crate::sim::{AdvanceReason, TaskCtx, TraceEvent, World};
use crate::task::{PathKind, TaskId};

/// A small-integer file descriptor. 0-2 are reserved; open fds are dense
/// from 3 upward and closed numbers are reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fd(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum FileObject {
    Socket(SocketId),
}

/// Per-thread-group descriptor table.
#[derive(Debug, Default)]
pub struct FdTable {
    slots: BTreeMap<u32, FileObject>,
}

impl FdTable {
    pub(crate) fn insert(&mut self, obj: FileObject) -> Fd {
        let mut n = 3;
        while self.slots.contains_key(&n) {
            n += 1;
        }
        self.slots.insert(n, obj);
        Fd(n)
    }

    pub(crate) fn get(&self, fd: Fd) -> Option<FileObject> {
        self.slots.get(&fd.0).copied()
    }

    pub(crate) fn remove(&mut self, fd: Fd) -> Option<FileObject> {
        self.slots.remove(&fd.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) struct SocketId(pub(crate) usize);

/// One end of a connected byte stream.
#[derive(Debug)]
pub(crate) struct SocketState {
    pub(crate) peer: Option<SocketId>,
    pub(crate) rx: VecDeque<u8>,
    pub(crate) capacity: usize,
    /// Bytes already sent toward this socket but not yet delivered.
    pub(crate) in_flight: usize,
    pub(crate) nodelay: bool,
    pub(crate) rx_wq: WaitId,
    pub(crate) space_wq: WaitId,
    pub(crate) closed: bool,
    pub(crate) peer_closed: bool,
    /// Bytes this socket has pushed toward its peer.
    pub(crate) total_sent: u64,
    /// Bytes the owner has drained out of `rx`.
    pub(crate) total_drained: u64,
}

/// A segment en route to `dst`.
#[derive(Debug)]
pub(crate) struct Delivery {
    pub(crate) due: u64,
    pub(crate) seq: u64,
    pub(crate) bytes: Vec<u8>,
}

/// The four full-path I/O operations. Read/RecvFrom drain the stream,
/// Write/SendTo feed it; the pairs differ only in label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IoDirection {
    Read,
    Write,
    SendTo,
    RecvFrom,
}

impl IoDirection {
    pub fn is_receive(self) -> bool {
        matches!(self, IoDirection::Read | IoDirection::RecvFrom)
    }

    pub fn name(self) -> &'static str {
        match self {
            IoDirection::Read => "read",
            IoDirection::Write => "write",
            IoDirection::SendTo => "sendto",
            IoDirection::RecvFrom => "recvfrom",
        }
    }
}

impl World {
    pub(crate) fn socket_pair(
        &mut self,
        task_a: TaskId,
        task_b: TaskId,
    ) -> Result<(Fd, Fd), SimError> {
        for t in [task_a, task_b] {
            if self.task_opt(t).is_none() {
                return Err(SimError::UnknownTask(t));
            }
        }
        let capacity = self.rx_capacity;
        let id_a = SocketId(self.sockets.len());
        let id_b = SocketId(self.sockets.len() + 1);
        for id in [id_a, id_b] {
            let rx_wq = self.alloc_wait_queue(format!("sock{}.rx", id.0));
            let space_wq = self.alloc_wait_queue(format!("sock{}.space", id.0));
            self.sockets.push(SocketState {
                peer: None,
                rx: VecDeque::new(),
                capacity,
                in_flight: 0,
                nodelay: false,
                rx_wq,
                space_wq,
                closed: false,
                peer_closed: false,
                total_sent: 0,
                total_drained: 0,
            });
        }
        self.sockets[id_a.0].peer = Some(id_b);
        self.sockets[id_b.0].peer = Some(id_a);
        let fd_a = self.task(task_a).fds.borrow_mut().insert(FileObject::Socket(id_a));
        let fd_b = self.task(task_b).fds.borrow_mut().insert(FileObject::Socket(id_b));
        Ok((fd_a, fd_b))
    }

    pub(crate) fn resolve_socket(&self, task: TaskId, fd: Fd) -> Result<SocketId, SimError> {
        let tcb = self.task_opt(task).ok_or(SimError::UnknownTask(task))?;
        let obj = tcb.fds.borrow().get(fd).ok_or(SimError::BadFd(fd.0))?;
        let FileObject::Socket(id) = obj;
        Ok(id)
    }

    /// Space left for bytes heading to `dst` (buffered plus in flight).
    pub(crate) fn socket_space(&self, dst: SocketId) -> usize {
        let s = &self.sockets[dst.0];
        s.capacity.saturating_sub(s.rx.len() + s.in_flight)
    }

    /// Queues `bytes` toward `dst` after the delivery delay. Without
    /// TCP_NODELAY the segment coalesces onto a still-undelivered tail
    /// segment for the same destination.
    pub(crate) fn enqueue_delivery(&mut self, dst: SocketId, bytes: Vec<u8>) {
        debug_assert!(bytes.len() <= self.socket_space(dst));
        self.sockets[dst.0].in_flight += bytes.len();
        let nodelay = self.sockets[dst.0].nodelay;
        let queue = self.deliveries.entry(dst).or_default();
        if !nodelay {
            if let Some(tail) = queue.back_mut() {
                if tail.due > self.clock {
                    tail.bytes.extend_from_slice(&bytes);
                    return;
                }
            }
        }
        let due = self.clock + self.ledger.weights().delivery_delay;
        self.delivery_seq += 1;
        let seq = self.delivery_seq;
        queue.push_back(Delivery { due, seq, bytes });
    }

    /// Moves every due segment into its destination buffer and wakes
    /// receivers (or their poll watches). Delivery itself is free; the copy
    /// was paid at send time.
    pub(crate) fn deliver_due(&mut self) {
        loop {
            // Earliest due segment across sockets, ordered by (due, seq).
            let mut best: Option<(u64, u64, SocketId)> = None;
            for (dst, q) in &self.deliveries {
                if let Some(front) = q.front() {
                    if front.due <= self.clock {
                        let key = (front.due, front.seq, *dst);
                        if best.map_or(true, |b| (b.0, b.1) > (front.due, front.seq)) {
                            best = Some(key);
                        }
                    }
                }
            }
            let Some((_, _, dst)) = best else { break };
            let delivery = self.deliveries.get_mut(&dst).unwrap().pop_front().unwrap();
            let n = delivery.bytes.len();
            let sock = &mut self.sockets[dst.0];
            sock.in_flight -= n;
            sock.rx.extend(delivery.bytes);
            let rx_wq = sock.rx_wq;
            self.trace(TraceEvent::NetDeliver {
                socket: dst.0 as u32,
                bytes: n as u64,
            });
            if self.wake_one(rx_wq).is_none() {
                self.wake_poll_watchers(dst);
            }
        }
    }

    pub(crate) fn earliest_due(&self) -> Option<u64> {
        self.deliveries
            .values()
            .filter_map(|q| q.front())
            .map(|d| d.due)
            .min()
    }

    fn wake_poll_watchers(&mut self, socket: SocketId) {
        let watchers: Vec<TaskId> = self
            .poll_watches
            .iter()
            .filter(|(s, _)| *s == socket)
            .map(|(_, t)| *t)
            .collect();
        for task in watchers {
            self.poll_watches.retain(|(_, t)| *t != task);
            self.wake_task(task);
        }
    }

    /// A socket is readable when bytes are buffered or the stream has ended.
    pub(crate) fn socket_readable(&self, id: SocketId) -> bool {
        let s = &self.sockets[id.0];
        !s.rx.is_empty() || (s.peer_closed && s.in_flight == 0)
    }

    pub(crate) fn close_socket(&mut self, task: TaskId, fd: Fd) -> Result<(), SimError> {
        let id = self.resolve_socket(task, fd)?;
        self.task(task).fds.borrow_mut().remove(fd);
        self.sockets[id.0].closed = true;
        if let Some(peer) = self.sockets[id.0].peer {
            self.sockets[peer.0].peer_closed = true;
            let rx_wq = self.sockets[peer.0].rx_wq;
            if self.wake_one(rx_wq).is_none() {
                self.wake_poll_watchers(peer);
            }
        }
        Ok(())
    }
}

/// Outcome of one non-blocking attempt inside a transport loop.
enum Wait {
    DoneBytes(Vec<u8>),
    DoneCount(usize),
    Closed,
    Interrupted,
    Park(WaitId),
    Poll,
}

impl TaskCtx {
    /// Returns this task's parent id. The service body records nothing; the
    /// call is a pure boundary-cost probe.
    pub async fn sys_getppid(&self) -> Result<TaskId, SimError> {
        let frame = self.enter_syscall()?;
        let ppid = self.world.borrow().task(self.task).parent;
        self.finish_syscall(frame).await;
        Ok(ppid)
    }

    /// Full-path receive: boundary, dispatch chain, then the transport.
    pub async fn sys_recv(
        &self,
        fd: Fd,
        dir: IoDirection,
        len: usize,
    ) -> Result<Vec<u8>, SimError> {
        debug_assert!(dir.is_receive());
        let socket = self.world.borrow().resolve_socket(self.task, fd)?;
        let frame = self.enter_syscall()?;
        self.charge_chain();
        let result = self.transport_recv(socket, len).await;
        self.finish_syscall(frame).await;
        result
    }

    /// Full-path send; moves at most the available buffer space and returns
    /// the byte count actually moved.
    pub async fn sys_send(
        &self,
        fd: Fd,
        dir: IoDirection,
        data: &[u8],
    ) -> Result<usize, SimError> {
        debug_assert!(!dir.is_receive());
        let socket = self.world.borrow().resolve_socket(self.task, fd)?;
        let frame = self.enter_syscall()?;
        self.charge_chain();
        let result = self.transport_send(socket, data).await;
        self.finish_syscall(frame).await;
        result
    }

    /// Deep shortcut: calls the transport receive directly, skipping the
    /// boundary and the whole dispatch chain.
    pub async fn shortcut_recv(&self, fd: Fd, len: usize) -> Result<Vec<u8>, SimError> {
        self.require_linked()?;
        let socket = self.world.borrow().resolve_socket(self.task, fd)?;
        self.transport_recv(socket, len).await
    }

    /// Deep shortcut send, symmetric to [`TaskCtx::shortcut_recv`].
    pub async fn shortcut_send(&self, fd: Fd, data: &[u8]) -> Result<usize, SimError> {
        self.require_linked()?;
        let socket = self.world.borrow().resolve_socket(self.task, fd)?;
        self.transport_send(socket, data).await
    }

    /// Readiness poll over a set of descriptors. Blocks until at least one
    /// is readable (or a signal is pending); in run-to-completion mode it
    /// polls instead of sleeping.
    pub async fn sys_poll(&self, fds: &[Fd]) -> Result<Vec<Fd>, SimError> {
        let mut sockets = Vec::with_capacity(fds.len());
        {
            let w = self.world.borrow();
            for fd in fds {
                sockets.push((*fd, w.resolve_socket(self.task, *fd)?));
            }
        }
        let frame = self.enter_syscall()?;
        self.world
            .borrow_mut()
            .charge_for(self.task, CostEvent::DispatchLayer, 1);
        let result = loop {
            {
                let w = self.world.borrow();
                let ready: Vec<Fd> = sockets
                    .iter()
                    .filter(|(_, s)| w.socket_readable(*s))
                    .map(|(fd, _)| *fd)
                    .collect();
                if !ready.is_empty() {
                    break ready;
                }
                if !w.task(self.task).pending_signals.is_empty() {
                    break Vec::new();
                }
            }
            if self.kernel_execution() {
                self.poll_tick();
                self.yield_now().await;
            } else {
                let wq = {
                    let mut w = self.world.borrow_mut();
                    for (_, s) in &sockets {
                        w.poll_watches.push((*s, self.task));
                    }
                    w.task(self.task).poll_wq
                };
                self.block_on(wq).await;
                self.world
                    .borrow_mut()
                    .poll_watches
                    .retain(|(_, t)| *t != self.task);
            }
        };
        self.finish_syscall(frame).await;
        Ok(result)
    }

    /// kill(2) analog: queues a signal for a task. A blocked target is woken;
    /// the signal is acted on at the target's next non-bypassed kernel exit.
    pub async fn sys_kill(&self, target: TaskId, sig: u8) -> Result<(), SimError> {
        let frame = self.enter_syscall()?;
        let result = self.world.borrow_mut().deliver_signal_inner(target, sig);
        self.finish_syscall(frame).await;
        result
    }

    /// Closes a descriptor; the peer observes end-of-stream after draining.
    pub async fn sys_close(&self, fd: Fd) -> Result<(), SimError> {
        let frame = self.enter_syscall()?;
        let result = self.world.borrow_mut().close_socket(self.task, fd);
        self.finish_syscall(frame).await;
        result
    }

    fn require_linked(&self) -> Result<(), SimError> {
        if self.world.borrow().task(self.task).path_kind != PathKind::LinkedApp {
            return Err(SimError::ShortcutOnTrapProcess);
        }
        Ok(())
    }

    fn charge_chain(&self) {
        let mut w = self.world.borrow_mut();
        let layers = w.dispatch_chain.len() as u64;
        w.charge_for(self.task, CostEvent::DispatchLayer, layers);
    }

    fn kernel_execution(&self) -> bool {
        self.world.borrow().task(self.task).kernel_execution
    }

    fn poll_tick(&self) {
        let mut w = self.world.borrow_mut();
        let tick = w.ledger.weights().poll_tick;
        w.advance_raw(tick, AdvanceReason::PollTick);
    }

    /// Shared transport receive: drains buffered bytes, blocking (or polling
    /// under run-to-completion) while the stream is empty and still open.
    async fn transport_recv(&self, socket: SocketId, len: usize) -> Result<Vec<u8>, SimError> {
        loop {
            let step = {
                let mut w = self.world.borrow_mut();
                let (rx_len, peer_closed, in_flight, rx_wq) = {
                    let s = &w.sockets[socket.0];
                    (s.rx.len(), s.peer_closed, s.in_flight, s.rx_wq)
                };
                if rx_len > 0 {
                    let n = len.min(rx_len);
                    let (bytes, space_wq) = {
                        let s = &mut w.sockets[socket.0];
                        s.total_drained += n as u64;
                        let bytes: Vec<u8> = s.rx.drain(..n).collect();
                        (bytes, s.space_wq)
                    };
                    w.charge_for(self.task, CostEvent::CopyByte, n as u64);
                    w.wake_one(space_wq);
                    Wait::DoneBytes(bytes)
                } else if peer_closed && in_flight == 0 {
                    Wait::DoneBytes(Vec::new())
                } else if !w.task(self.task).pending_signals.is_empty() {
                    Wait::Interrupted
                } else if w.task(self.task).kernel_execution {
                    Wait::Poll
                } else {
                    Wait::Park(rx_wq)
                }
            };
            match step {
                Wait::DoneBytes(bytes) => return Ok(bytes),
                Wait::DoneCount(_) | Wait::Closed => unreachable!(),
                Wait::Interrupted => return Err(SimError::Interrupted),
                Wait::Poll => {
                    self.poll_tick();
                    self.yield_now().await;
                }
                Wait::Park(wq) => self.block_on(wq).await,
            }
        }
    }

    /// Shared transport send: waits for buffer space, then copies what fits
    /// and queues it for delivery.
    async fn transport_send(&self, socket: SocketId, data: &[u8]) -> Result<usize, SimError> {
        if data.is_empty() {
            return Ok(0);
        }
        loop {
            let step = {
                let mut w = self.world.borrow_mut();
                let (closed, peer) = {
                    let s = &w.sockets[socket.0];
                    (s.closed, s.peer)
                };
                match peer {
                    None => Wait::Closed,
                    Some(dst) if closed || w.sockets[dst.0].closed => Wait::Closed,
                    Some(dst) => {
                        let space = w.socket_space(dst);
                        if space > 0 {
                            let n = data.len().min(space);
                            w.charge_for(self.task, CostEvent::CopyByte, n as u64);
                            w.sockets[socket.0].total_sent += n as u64;
                            w.enqueue_delivery(dst, data[..n].to_vec());
                            Wait::DoneCount(n)
                        } else if !w.task(self.task).pending_signals.is_empty() {
                            Wait::Interrupted
                        } else if w.task(self.task).kernel_execution {
                            Wait::Poll
                        } else {
                            Wait::Park(w.sockets[dst.0].space_wq)
                        }
                    }
                }
            };
            match step {
                Wait::DoneCount(n) => return Ok(n),
                Wait::DoneBytes(_) => unreachable!(),
                Wait::Closed => return Err(SimError::PeerClosed),
                Wait::Interrupted => return Err(SimError::Interrupted),
                Wait::Poll => {
                    self.poll_tick();
                    self.yield_now().await;
                }
                Wait::Park(wq) => self.block_on(wq).await,
            }
        }
    }

    /// Sets TCP_NODELAY on the descriptor's socket.
    pub fn set_nodelay(&self, fd: Fd, on: bool) -> Result<(), SimError> {
        let mut w = self.world.borrow_mut();
        let id = w.resolve_socket(self.task, fd)?;
        w.sockets[id.0].nodelay = on;
        Ok(())
    }
}
