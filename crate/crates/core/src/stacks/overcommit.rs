use std::ptr::{self, NonNull};

use super::registry::{self, RegionKind};
use super::{
    page_size, round_up_to_page, FrameKind, StackError, StackFrame, StackStats, StackStrategy, StatCounters,
    StrategyKind, DEFAULT_FRAME_SIZE,
};
use crate::ctx::MIN_BOOTSTRAP_STACK;

struct Reservation {
    base: NonNull<u8>,
    total: usize,
    guard: usize,
    allowed: usize,
}

fn reserve(frame_size: usize, prot: libc::c_int) -> Result<Reservation, StackError> {
    if frame_size < MIN_BOOTSTRAP_STACK {
        return Err(StackError::FrameTooSmall { requested: frame_size, minimum: MIN_BOOTSTRAP_STACK });
    }
    let guard = page_size();
    let allowed = round_up_to_page(frame_size);
    let total = guard + allowed;
    let addr = unsafe {
        libc::mmap(
            ptr::null_mut(),
            total,
            prot,
            libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
            -1,
            0,
        )
    };
    if addr == libc::MAP_FAILED {
        return Err(StackError::os("mmap"));
    }
    Ok(Reservation { base: NonNull::new(addr.cast()).expect("mmap returned null"), total, guard, allowed })
}

fn unmap(base: *mut u8, total: usize) {
    let rc = unsafe { libc::munmap(base.cast(), total) };
    debug_assert_eq!(rc, 0, "munmap of a stack region failed");
}

fn into_frame(r: Reservation, slot: usize) -> StackFrame {
    StackFrame {
        base: r.base,
        size: r.total,
        initial_sp: r.base.as_ptr() as usize + r.total,
        kind: FrameKind::Region { slot, guard: r.guard },
    }
}

fn region_slot(frame: &StackFrame, strategy: &str) -> usize {
    frame.region_slot().unwrap_or_else(|| panic!("frame was not created by the {strategy} strategy"))
}

/// A no-reserve read/write mapping whose pages the kernel commits on first
/// touch, with an inaccessible guard page at the bottom.
#[derive(Debug)]
pub struct KernelOvercommit {
    frame_size: usize,
    counters: StatCounters,
}

impl KernelOvercommit {
    pub fn new(frame_size: usize) -> Self {
        KernelOvercommit { frame_size, counters: StatCounters::default() }
    }
}

impl Default for KernelOvercommit {
    fn default() -> Self {
        KernelOvercommit::new(DEFAULT_FRAME_SIZE)
    }
}

impl StackStrategy for KernelOvercommit {
    fn kind(&self) -> StrategyKind {
        StrategyKind::OvercommitKernel
    }

    fn default_frame_size(&self) -> usize {
        self.frame_size
    }

    fn init_stack_frame(&self, frame_size: usize) -> Result<StackFrame, StackError> {
        let r = reserve(frame_size, libc::PROT_READ | libc::PROT_WRITE)?;
        let base = r.base.as_ptr();
        if unsafe { libc::mprotect(base.cast(), r.guard, libc::PROT_NONE) } != 0 {
            let err = StackError::os("mprotect (guard page)");
            unmap(base, r.total);
            return Err(err);
        }
        // Registered only so a guard-page hit is reported as an overflow.
        let slot = match registry::register(RegionKind::Kernel, base as usize, r.total, r.guard, r.allowed) {
            Ok(slot) => slot,
            Err(e) => {
                unmap(base, r.total);
                return Err(e);
            }
        };
        self.counters.frame_created();
        Ok(into_frame(r, slot))
    }

    fn release_stack_frame(&self, frame: StackFrame) {
        registry::deregister(region_slot(&frame, "overcommit-kernel"));
        unmap(frame.base(), frame.size());
        self.counters.frame_released();
    }

    /// Resident pages of the stack area, as reported by `mincore`.
    fn committed_bytes(&self, frame: &StackFrame) -> usize {
        let page = page_size();
        let low = frame.usable_low();
        let len = frame.initial_sp() - low;
        let mut vec = vec![0u8; len / page];
        let rc = unsafe { libc::mincore(low as *mut libc::c_void, len, vec.as_mut_ptr()) };
        if rc != 0 {
            return 0;
        }
        vec.iter().filter(|&&v| v & 1 == 1).count() * page
    }

    fn stats(&self) -> StackStats {
        self.counters.snapshot()
    }
}

/// A fully inaccessible reservation committed by this crate's `SIGSEGV`
/// handler. Each absorbed fault commits as many pages as are already
/// committed (one page for the first), working down from the top.
#[derive(Debug)]
pub struct UserOvercommit {
    frame_size: usize,
    counters: StatCounters,
}

impl UserOvercommit {
    pub fn new(frame_size: usize) -> Self {
        UserOvercommit { frame_size, counters: StatCounters::default() }
    }
}

impl Default for UserOvercommit {
    fn default() -> Self {
        UserOvercommit::new(DEFAULT_FRAME_SIZE)
    }
}

impl StackStrategy for UserOvercommit {
    fn kind(&self) -> StrategyKind {
        StrategyKind::OvercommitUser
    }

    fn default_frame_size(&self) -> usize {
        self.frame_size
    }

    fn init_stack_frame(&self, frame_size: usize) -> Result<StackFrame, StackError> {
        let r = reserve(frame_size, libc::PROT_NONE)?;
        let base = r.base.as_ptr();
        let slot = match registry::register(RegionKind::User, base as usize, r.total, r.guard, r.allowed) {
            Ok(slot) => slot,
            Err(e) => {
                unmap(base, r.total);
                return Err(e);
            }
        };
        self.counters.frame_created();
        Ok(into_frame(r, slot))
    }

    fn release_stack_frame(&self, frame: StackFrame) {
        registry::deregister(region_slot(&frame, "overcommit-user"));
        unmap(frame.base(), frame.size());
        self.counters.frame_released();
    }

    fn committed_bytes(&self, frame: &StackFrame) -> usize {
        registry::region(region_slot(frame, "overcommit-user")).map_or(0, |r| r.committed)
    }

    fn stats(&self) -> StackStats {
        self.counters.snapshot()
    }
}
