//! Stack-management strategies for coroutine frames.
//!
//! Four policies implement [`StackStrategy`]:
//!
//! * [`FixedStack`]: one contiguous heap block per coroutine.
//! * [`SegmentedStack`]: a doubly linked chain of heap segments, grown at
//!   explicit check points (see [`crate::effects::grow_stack`]) and kept
//!   around after shrinking so a hot call site does not re-allocate.
//! * [`KernelOvercommit`]: a large no-reserve mapping with a guard page; the
//!   kernel commits pages on first touch.
//! * [`UserOvercommit`]: a fully inaccessible reservation whose pages are
//!   committed by a process-wide `SIGSEGV` handler, doubling the commit size
//!   on every fault.
//!
//! The process default is picked from `EFFSTACK_STRATEGY`.

mod fixed;
mod overcommit;
mod registry;
mod segmented;

use std::fmt;
use std::io;
use std::ptr::NonNull;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use thiserror::Error;

pub use fixed::FixedStack;
pub use overcommit::{KernelOvercommit, UserOvercommit};
pub(crate) use registry::RawStderr;
pub use registry::{
    dump_regions, fault_handler_installed, live_regions, lookup_region, RegionInfo, RegionKind, REGISTRY_CAPACITY,
};
pub use segmented::{SegmentChain, SegmentedStack, StackSegment, SEGMENT_CANARY};

/// Environment variable naming the process default strategy.
pub const STRATEGY_ENV: &str = "EFFSTACK_STRATEGY";

/// Default frame size of the fixed and overcommit strategies.
pub const DEFAULT_FRAME_SIZE: usize = 150 * 1024;

/// Default frame size of the segmented strategy.
pub const SEGMENTED_DEFAULT_FRAME_SIZE: usize = 1024;

/// Default minimum size of a growth segment.
pub const DEFAULT_MIN_SEGMENT_SIZE: usize = 0;

/// Headroom that library or foreign code may use below any check point.
///
/// Segmented stacks only grow where code asks for it, so anything that
/// calls into code without check points (the standard library, libc,
/// formatting) must first make sure this much space is available.
pub const SYSCALL_SEGMENT_SIZE: usize = 8 * 1024;

/// Byte written over fresh frames in debug builds.
pub const DEBUG_FILL: u8 = 0x13;

#[derive(Debug, Error)]
pub enum StackError {
    #[error("frame of {requested} bytes is smaller than the {minimum}-byte bootstrap minimum")]
    FrameTooSmall { requested: usize, minimum: usize },
    #[error("allocating a {size}-byte stack frame failed")]
    OutOfMemory { size: usize },
    #[error("{op} failed: {source}")]
    Os {
        op: &'static str,
        #[source]
        source: io::Error,
    },
    #[error("fault-region registry is full ({capacity} live regions)")]
    RegistryFull { capacity: usize },
    #[error("unknown stack strategy `{0}` (expected fixed, segmented, overcommit-kernel or overcommit-user)")]
    UnknownStrategy(String),
}

impl StackError {
    pub(crate) fn os(op: &'static str) -> Self {
        StackError::Os { op, source: io::Error::last_os_error() }
    }
}

/// The four stack-management policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    Fixed,
    Segmented,
    OvercommitKernel,
    OvercommitUser,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Fixed,
        StrategyKind::Segmented,
        StrategyKind::OvercommitKernel,
        StrategyKind::OvercommitUser,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Fixed => "fixed",
            StrategyKind::Segmented => "segmented",
            StrategyKind::OvercommitKernel => "overcommit-kernel",
            StrategyKind::OvercommitUser => "overcommit-user",
        }
    }

    /// A fresh strategy instance with default configuration.
    pub fn build(self) -> Arc<dyn StackStrategy> {
        match self {
            StrategyKind::Fixed => Arc::new(FixedStack::default()),
            StrategyKind::Segmented => Arc::new(SegmentedStack::default()),
            StrategyKind::OvercommitKernel => Arc::new(KernelOvercommit::default()),
            StrategyKind::OvercommitUser => Arc::new(UserOvercommit::default()),
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = StackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| StackError::UnknownStrategy(s.to_owned()))
    }
}

/// Allocation counters kept by every strategy instance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StackStats {
    /// Frames handed out and not yet released.
    pub live_frames: usize,
    /// Frames handed out over the strategy's lifetime.
    pub frames_created: usize,
    /// Growth segments allocated (segmented strategy only).
    pub growth_segments: usize,
}

#[derive(Debug, Default)]
pub(crate) struct StatCounters {
    live: AtomicUsize,
    created: AtomicUsize,
    growth: AtomicUsize,
}

impl StatCounters {
    pub(crate) fn frame_created(&self) {
        self.live.fetch_add(1, Ordering::Relaxed);
        self.created.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn frame_released(&self) {
        let prev = self.live.fetch_sub(1, Ordering::Relaxed);
        debug_assert!(prev > 0, "stack frame released more often than created");
    }

    pub(crate) fn add_growth(&self, n: usize) {
        self.growth.fetch_add(n, Ordering::Relaxed);
    }

    pub(crate) fn snapshot(&self) -> StackStats {
        StackStats {
            live_frames: self.live.load(Ordering::Relaxed),
            frames_created: self.created.load(Ordering::Relaxed),
            growth_segments: self.growth.load(Ordering::Relaxed),
        }
    }
}

/// The allocator interface a stack-management policy implements.
pub trait StackStrategy: Send + Sync + fmt::Debug {
    fn kind(&self) -> StrategyKind;

    fn name(&self) -> &'static str {
        self.kind().name()
    }

    /// Frame size used when a coroutine is created without an explicit size.
    fn default_frame_size(&self) -> usize;

    /// Allocates a frame of `frame_size` usable bytes.
    ///
    /// The returned frame's initial stack pointer is 16-byte aligned and lies
    /// at the top of the frame.
    fn init_stack_frame(&self, frame_size: usize) -> Result<StackFrame, StackError>;

    /// Returns every resource behind `frame` to the system.
    fn release_stack_frame(&self, frame: StackFrame);

    /// Bytes of `frame` currently backed by memory.
    ///
    /// Exact for the user-level overcommit strategy, best effort (resident
    /// page count) for the kernel strategy, and the allocated size for the
    /// heap strategies.
    fn committed_bytes(&self, frame: &StackFrame) -> usize;

    fn stats(&self) -> StackStats;
}

/// A stack frame owned by a coroutine. Released exactly once through the
/// strategy that created it.
#[derive(Debug)]
pub struct StackFrame {
    base: NonNull<u8>,
    size: usize,
    initial_sp: usize,
    kind: FrameKind,
}

#[derive(Debug)]
pub(crate) enum FrameKind {
    Heap,
    Segments(SegmentChain),
    Region { slot: usize, guard: usize },
}

// Frames are plain memory; moving one to another thread is fine as long as
// no code runs on it concurrently, which the coroutine owner guarantees.
unsafe impl Send for StackFrame {}

impl StackFrame {
    /// Lowest address of the allocation or reservation (guard included).
    pub fn base(&self) -> *mut u8 {
        self.base.as_ptr()
    }

    /// Total bytes allocated or reserved, guard and headers included.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn initial_sp(&self) -> usize {
        self.initial_sp
    }

    /// Lowest address code may legitimately write to in the initial frame.
    pub fn usable_low(&self) -> usize {
        match &self.kind {
            FrameKind::Heap => self.base.as_ptr() as usize,
            FrameKind::Segments(chain) => chain.head_usable_low(),
            FrameKind::Region { guard, .. } => self.base.as_ptr() as usize + guard,
        }
    }

    /// True if `addr` lies inside memory this frame may run on.
    pub fn contains(&self, addr: usize) -> bool {
        match &self.kind {
            FrameKind::Segments(chain) => chain.contains(addr),
            _ => addr >= self.usable_low() && addr <= self.initial_sp,
        }
    }

    pub fn segments(&self) -> Option<&SegmentChain> {
        match &self.kind {
            FrameKind::Segments(chain) => Some(chain),
            _ => None,
        }
    }

    pub fn segments_mut(&mut self) -> Option<&mut SegmentChain> {
        match &mut self.kind {
            FrameKind::Segments(chain) => Some(chain),
            _ => None,
        }
    }

    /// Registry slot of an overcommit region.
    pub fn region_slot(&self) -> Option<usize> {
        match self.kind {
            FrameKind::Region { slot, .. } => Some(slot),
            _ => None,
        }
    }
}

/// System page size, queried once.
pub fn page_size() -> usize {
    static PAGE: OnceLock<usize> = OnceLock::new();
    *PAGE.get_or_init(|| {
        let v = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
        if v <= 0 {
            4096
        } else {
            v as usize
        }
    })
}

pub(crate) fn round_up_to_page(size: usize) -> usize {
    let page = page_size();
    size.div_ceil(page) * page
}

pub(crate) fn align_down(addr: usize, align: usize) -> usize {
    addr & !(align - 1)
}

/// The process default strategy, chosen by `EFFSTACK_STRATEGY` (defaults to
/// `fixed` when unset).
pub fn default_strategy() -> Result<Arc<dyn StackStrategy>, StackError> {
    static DEFAULT: OnceLock<Result<Arc<dyn StackStrategy>, String>> = OnceLock::new();
    DEFAULT
        .get_or_init(|| match std::env::var(STRATEGY_ENV) {
            Ok(name) => name.trim().parse::<StrategyKind>().map(StrategyKind::build).map_err(|_| name),
            Err(_) => Ok(StrategyKind::Fixed.build()),
        })
        .clone()
        .map_err(StackError::UnknownStrategy)
}

#[cfg(debug_assertions)]
pub(crate) fn debug_fill(ptr: *mut u8, len: usize) {
    unsafe { std::ptr::write_bytes(ptr, DEBUG_FILL, len) }
}

#[cfg(not(debug_assertions))]
pub(crate) fn debug_fill(_ptr: *mut u8, _len: usize) {}
