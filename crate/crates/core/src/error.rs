//! Simulator error types.

use thiserror::Error;

use crate::config::ConfigError;
use crate::task::TaskId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("SecondLinkedApp: this node already has a linked application")]
    SecondLinkedApp,
    #[error("BadCmdline: unterminated quote in kernel command line")]
    BadCmdline,
    #[error("TooManyTasks: task cap ({0}) reached")]
    TooManyTasks(usize),
    #[error("BypassOnTrapProcess: bypass is only available to the linked application")]
    BypassOnTrapProcess,
    #[error("KernelExecOnTrapProcess: kernel execution mode is only available to the linked application")]
    KernelExecOnTrapProcess,
    #[error("ShortcutOnTrapProcess: shortcuts are only available to the linked application")]
    ShortcutOnTrapProcess,
    #[error("ReentrantEnter: syscall entry while task {0} is already in kernel mode")]
    ReentrantEnter(TaskId),
    #[error("BadFd: fd {0} is not open")]
    BadFd(u32),
    #[error("PeerClosed: the peer socket is closed")]
    PeerClosed,
    #[error("Interrupted: blocking call interrupted by a pending signal")]
    Interrupted,
    #[error("SegFault: address {0:#x} is outside every mapped region")]
    SegFault(u64),
    #[error("MmLockHeld: mm lock is already held by this task")]
    MmLockHeld,
    #[error("AddressSpaceExhausted: {0}")]
    AddressSpaceExhausted(&'static str),
    #[error("NoReturnInFlight: no staged return protocol is active")]
    NoReturnInFlight,
    #[error("UnknownTask: task {0} does not exist")]
    UnknownTask(TaskId),
    #[error("Config: {0}")]
    Config(#[from] ConfigError),
}
