//! Process-wide table of overcommit regions and the `SIGSEGV` handler that
//! commits user-level regions on demand.
//!
//! Slots are fixed; each carries a sequence counter so the signal handler can
//! read a consistent snapshot without taking a lock. Writers serialize on a
//! mutex. The handler is installed when the first region appears and the
//! previous disposition is put back when the last one goes away. Each thread
//! that owns a region gets an alternate signal stack so overflow faults can
//! be reported even though the faulting stack is exhausted.

use std::cell::{RefCell, UnsafeCell};
use std::fmt::{self, Write as _};
use std::mem::MaybeUninit;
use std::ptr;
use std::sync::atomic::{fence, AtomicBool, AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{page_size, StackError};

/// Number of regions that may be live at once across the process.
pub const REGISTRY_CAPACITY: usize = 4096;

/// Size of the alternate signal stack this crate installs when a thread has
/// none or only a small one.
const ALT_STACK_SIZE: usize = 64 * 1024;

/// Smallest pre-existing alternate stack the handler is willing to run on.
const ALT_STACK_MIN: usize = 16 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RegionKind {
    /// Readable and writable from the start; only the guard is watched.
    Kernel = 1,
    /// Inaccessible until committed by the fault handler.
    User = 2,
}

impl RegionKind {
    fn from_raw(v: u8) -> Option<Self> {
        match v {
            1 => Some(RegionKind::Kernel),
            2 => Some(RegionKind::User),
            _ => None,
        }
    }
}

/// A consistent snapshot of one registered region.
///
/// Layout of a region, low to high: `guard` bytes that are never
/// accessible, then `allowed` bytes of stack. Stacks grow down, so the
/// committed part of a user region is the top `committed` bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionInfo {
    pub slot: usize,
    pub kind: RegionKind,
    pub base: usize,
    pub total: usize,
    pub guard: usize,
    pub allowed: usize,
    pub committed: usize,
}

impl RegionInfo {
    pub fn top(&self) -> usize {
        self.base + self.total
    }

    /// Lowest committed address; equal to `top()` when nothing is committed.
    pub fn frontier(&self) -> usize {
        self.top() - self.committed
    }

    pub fn in_guard(&self, addr: usize) -> bool {
        addr >= self.base && addr < self.base + self.guard
    }

    pub fn contains(&self, addr: usize) -> bool {
        addr >= self.base && addr < self.top()
    }
}

struct Slot {
    seq: AtomicU64,
    kind: AtomicU8,
    base: AtomicUsize,
    total: AtomicUsize,
    guard: AtomicUsize,
    allowed: AtomicUsize,
    committed: AtomicUsize,
}

impl Slot {
    const fn new() -> Self {
        Slot {
            seq: AtomicU64::new(0),
            kind: AtomicU8::new(0),
            base: AtomicUsize::new(0),
            total: AtomicUsize::new(0),
            guard: AtomicUsize::new(0),
            allowed: AtomicUsize::new(0),
            committed: AtomicUsize::new(0),
        }
    }

    /// Lock-free consistent read. Returns `None` for free slots.
    fn read(&self, index: usize) -> Option<RegionInfo> {
        loop {
            let s1 = self.seq.load(Ordering::Acquire);
            if s1 & 1 == 1 {
                std::hint::spin_loop();
                continue;
            }
            let kind = self.kind.load(Ordering::Relaxed);
            let info = RegionKind::from_raw(kind).map(|kind| RegionInfo {
                slot: index,
                kind,
                base: self.base.load(Ordering::Relaxed),
                total: self.total.load(Ordering::Relaxed),
                guard: self.guard.load(Ordering::Relaxed),
                allowed: self.allowed.load(Ordering::Relaxed),
                committed: self.committed.load(Ordering::Relaxed),
            });
            fence(Ordering::Acquire);
            if self.seq.load(Ordering::Relaxed) == s1 {
                return info;
            }
        }
    }

    /// Must be called with the registry mutex held.
    fn write(&self, kind: u8, base: usize, total: usize, guard: usize, allowed: usize) {
        self.seq.fetch_add(1, Ordering::Relaxed);
        fence(Ordering::Release);
        self.kind.store(kind, Ordering::Relaxed);
        self.base.store(base, Ordering::Relaxed);
        self.total.store(total, Ordering::Relaxed);
        self.guard.store(guard, Ordering::Relaxed);
        self.allowed.store(allowed, Ordering::Relaxed);
        self.committed.store(0, Ordering::Relaxed);
        self.seq.fetch_add(1, Ordering::Release);
    }
}

static SLOTS: [Slot; REGISTRY_CAPACITY] = [const { Slot::new() }; REGISTRY_CAPACITY];

/// One past the highest slot ever used; bounds the handler's scan.
static HIGH_WATER: AtomicUsize = AtomicUsize::new(0);

static LIVE: AtomicUsize = AtomicUsize::new(0);

static INSTALLED: AtomicBool = AtomicBool::new(false);

/// Serializes every registry mutation and handler (un)installation.
static WRITER: Mutex<()> = Mutex::new(());

struct SavedAction(UnsafeCell<MaybeUninit<libc::sigaction>>);

// Written only under `WRITER` while this crate's handler is not installed,
// read by the handler only while it is.
unsafe impl Sync for SavedAction {}

static PREVIOUS_ACTION: SavedAction = SavedAction(UnsafeCell::new(MaybeUninit::zeroed()));

/// Number of live registered regions in the process.
pub fn live_regions() -> usize {
    LIVE.load(Ordering::Acquire)
}

/// True while this crate's fault handler is the `SIGSEGV` disposition.
pub fn fault_handler_installed() -> bool {
    INSTALLED.load(Ordering::Acquire)
}

/// The registered region containing `addr`, if any.
pub fn lookup_region(addr: usize) -> Option<RegionInfo> {
    let hw = HIGH_WATER.load(Ordering::Acquire);
    SLOTS[..hw]
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.read(i))
        .find(|r| r.contains(addr))
}

pub(crate) fn region(slot: usize) -> Option<RegionInfo> {
    SLOTS.get(slot).and_then(|s| s.read(slot))
}

/// Adds a region, installing the handler and this thread's alternate signal
/// stack if needed. Returns the slot index.
pub(crate) fn register(
    kind: RegionKind,
    base: usize,
    total: usize,
    guard: usize,
    allowed: usize,
) -> Result<usize, StackError> {
    thread_alt_stack_acquire()?;
    let result = (|| {
        let _w = WRITER.lock().unwrap_or_else(|e| e.into_inner());
        let free = SLOTS
            .iter()
            .position(|s| s.kind.load(Ordering::Relaxed) == 0)
            .ok_or(StackError::RegistryFull { capacity: REGISTRY_CAPACITY })?;
        if LIVE.load(Ordering::Relaxed) == 0 && !INSTALLED.load(Ordering::Relaxed) {
            unsafe { install_handler()? };
        }
        SLOTS[free].write(kind as u8, base, total, guard, allowed);
        if free >= HIGH_WATER.load(Ordering::Relaxed) {
            HIGH_WATER.store(free + 1, Ordering::Release);
        }
        LIVE.fetch_add(1, Ordering::Release);
        Ok(free)
    })();
    if result.is_err() {
        thread_alt_stack_release();
    }
    result
}

/// Removes a region. When it was the last one the previous `SIGSEGV`
/// disposition is restored.
pub(crate) fn deregister(slot: usize) {
    {
        let _w = WRITER.lock().unwrap_or_else(|e| e.into_inner());
        let s = &SLOTS[slot];
        assert_ne!(s.kind.load(Ordering::Relaxed), 0, "region slot {slot} released twice");
        s.write(0, 0, 0, 0, 0);
        if LIVE.fetch_sub(1, Ordering::AcqRel) == 1 && INSTALLED.load(Ordering::Relaxed) {
            unsafe { restore_handler() };
        }
    }
    thread_alt_stack_release();
}

unsafe fn install_handler() -> Result<(), StackError> {
    let saved = (*PREVIOUS_ACTION.0.get()).as_mut_ptr();
    if libc::sigaction(libc::SIGSEGV, ptr::null(), saved) != 0 {
        return Err(StackError::os("sigaction"));
    }
    let mut action: libc::sigaction = std::mem::zeroed();
    action.sa_sigaction = on_fault as *const () as usize;
    action.sa_flags = libc::SA_SIGINFO | libc::SA_ONSTACK;
    libc::sigemptyset(&mut action.sa_mask);
    if libc::sigaction(libc::SIGSEGV, &action, ptr::null_mut()) != 0 {
        return Err(StackError::os("sigaction"));
    }
    INSTALLED.store(true, Ordering::Release);
    Ok(())
}

unsafe fn restore_handler() {
    let saved = (*PREVIOUS_ACTION.0.get()).as_ptr();
    libc::sigaction(libc::SIGSEGV, saved, ptr::null_mut());
    INSTALLED.store(false, Ordering::Release);
}

extern "C" fn on_fault(sig: libc::c_int, info: *mut libc::siginfo_t, uctx: *mut libc::c_void) {
    let addr = unsafe { (*info).si_addr() } as usize;
    let Some(region) = lookup_region(addr) else {
        unsafe { delegate(sig, info, uctx) };
        return;
    };
    if region.in_guard(addr) {
        fatal(format_args!(
            "effstack: stack overflow: fault at {addr:#x} hit the guard page of region {} [{:#x}, {:#x})",
            region.slot,
            region.base,
            region.top()
        ));
    }
    if region.kind == RegionKind::Kernel {
        // The kernel commits these pages itself; anything else is not ours.
        unsafe { delegate(sig, info, uctx) };
        return;
    }
    if addr >= region.frontier() {
        fatal(format_args!(
            "effstack: fault in already committed region: {addr:#x} is above frontier {:#x} of region {}",
            region.frontier(),
            region.slot
        ));
    }
    let page = page_size();
    let step = if region.committed == 0 { page } else { region.committed };
    let step = step.min(region.allowed - region.committed);
    let new_frontier = region.frontier() - step;
    let rc = unsafe {
        libc::mprotect(new_frontier as *mut libc::c_void, step, libc::PROT_READ | libc::PROT_WRITE)
    };
    if rc != 0 {
        fatal(format_args!(
            "effstack: mprotect failed inside the fault handler (errno {}) committing {step} bytes at {new_frontier:#x}",
            std::io::Error::last_os_error().raw_os_error().unwrap_or(0)
        ));
    }
    SLOTS[region.slot].committed.store(region.committed + step, Ordering::Release);
}

unsafe fn delegate(sig: libc::c_int, info: *mut libc::siginfo_t, uctx: *mut libc::c_void) {
    let old = &*(*PREVIOUS_ACTION.0.get()).as_ptr();
    let handler = old.sa_sigaction;
    if handler == libc::SIG_DFL || handler == libc::SIG_IGN {
        // Put the default action back; returning re-executes the faulting
        // instruction, which then terminates the process as usual.
        let mut dfl: libc::sigaction = std::mem::zeroed();
        dfl.sa_sigaction = libc::SIG_DFL;
        libc::sigaction(sig, &dfl, ptr::null_mut());
    } else if old.sa_flags & libc::SA_SIGINFO != 0 {
        let f: extern "C" fn(libc::c_int, *mut libc::siginfo_t, *mut libc::c_void) = std::mem::transmute(handler);
        f(sig, info, uctx);
    } else {
        let f: extern "C" fn(libc::c_int) = std::mem::transmute(handler);
        f(sig);
    }
}

/// Formats into a fixed buffer and writes with `write(2)`, so it is usable
/// from a signal handler.
pub(crate) struct RawStderr {
    buf: [u8; 512],
    len: usize,
}

impl RawStderr {
    pub(crate) const fn new() -> Self {
        RawStderr { buf: [0; 512], len: 0 }
    }

    pub(crate) fn flush(&mut self) {
        let mut off = 0;
        while off < self.len {
            let n = unsafe { libc::write(2, self.buf[off..].as_ptr().cast(), self.len - off) };
            if n <= 0 {
                break;
            }
            off += n as usize;
        }
        self.len = 0;
    }
}

impl fmt::Write for RawStderr {
    fn write_str(&mut self, s: &str) -> fmt::Result {
        for &b in s.as_bytes() {
            if self.len == self.buf.len() {
                self.flush();
            }
            self.buf[self.len] = b;
            self.len += 1;
        }
        Ok(())
    }
}

/// Writes every live region to stderr. Async-signal-safe.
pub fn dump_regions() {
    let mut w = RawStderr::new();
    let hw = HIGH_WATER.load(Ordering::Acquire);
    let _ = writeln!(w, "effstack: {} live region(s)", LIVE.load(Ordering::Acquire));
    for (i, slot) in SLOTS[..hw].iter().enumerate() {
        if let Some(r) = slot.read(i) {
            let _ = writeln!(
                w,
                "  slot {i}: {:?} base={:#x} top={:#x} guard={} allowed={} committed={}",
                r.kind,
                r.base,
                r.top(),
                r.guard,
                r.allowed,
                r.committed
            );
        }
    }
    w.flush();
}

fn fatal(msg: fmt::Arguments<'_>) -> ! {
    let mut w = RawStderr::new();
    let _ = writeln!(w, "{msg}");
    w.flush();
    dump_regions();
    unsafe { libc::abort() }
}

struct ThreadAltStack {
    regions: usize,
    /// Our own mapping, when the thread had no usable alternate stack.
    mapping: Option<(usize, usize)>,
    previous: libc::stack_t,
}

impl ThreadAltStack {
    unsafe fn uninstall(&mut self) {
        if let Some((addr, len)) = self.mapping.take() {
            libc::sigaltstack(&self.previous, ptr::null_mut());
            libc::munmap(addr as *mut libc::c_void, len);
        }
    }
}

impl Drop for ThreadAltStack {
    fn drop(&mut self) {
        unsafe { self.uninstall() }
    }
}

thread_local! {
    static ALT_STACK: RefCell<ThreadAltStack> = const {
        RefCell::new(ThreadAltStack {
            regions: 0,
            mapping: None,
            previous: libc::stack_t { ss_sp: ptr::null_mut(), ss_flags: libc::SS_DISABLE, ss_size: 0 },
        })
    };
}

fn thread_alt_stack_acquire() -> Result<(), StackError> {
    ALT_STACK.with(|cell| {
        let mut st = cell.borrow_mut();
        if st.regions == 0 {
            unsafe {
                let mut current: libc::stack_t = std::mem::zeroed();
                if libc::sigaltstack(ptr::null(), &mut current) != 0 {
                    return Err(StackError::os("sigaltstack"));
                }
                let usable = current.ss_flags & libc::SS_DISABLE == 0 && current.ss_size >= ALT_STACK_MIN;
                if !usable {
                    let len = ALT_STACK_SIZE;
                    let addr = libc::mmap(
                        ptr::null_mut(),
                        len,
                        libc::PROT_READ | libc::PROT_WRITE,
                        libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
                        -1,
                        0,
                    );
                    if addr == libc::MAP_FAILED {
                        return Err(StackError::os("mmap (alternate signal stack)"));
                    }
                    let ss = libc::stack_t { ss_sp: addr, ss_flags: 0, ss_size: len };
                    if libc::sigaltstack(&ss, ptr::null_mut()) != 0 {
                        let err = StackError::os("sigaltstack");
                        libc::munmap(addr, len);
                        return Err(err);
                    }
                    st.previous = current;
                    st.mapping = Some((addr as usize, len));
                }
            }
        }
        st.regions += 1;
        Ok(())
    })
}

fn thread_alt_stack_release() {
    // Regions released on a thread other than their creator leave that
    // thread's count alone; the creator cleans up at thread exit.
    let _ = ALT_STACK.try_with(|cell| {
        let mut st = cell.borrow_mut();
        if st.regions == 0 {
            return;
        }
        st.regions -= 1;
        if st.regions == 0 {
            unsafe { st.uninstall() }
        }
    });
}

#[cfg(test)]
pub(crate) fn thread_owns_alt_stack() -> bool {
    ALT_STACK.with(|c| c.borrow().mapping.is_some())
}
