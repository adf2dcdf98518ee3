use std::alloc::{alloc, dealloc, Layout};
use std::ptr::NonNull;

use super::{
    align_down, debug_fill, FrameKind, StackError, StackFrame, StackStats, StackStrategy, StatCounters,
    StrategyKind, DEFAULT_FRAME_SIZE,
};
use crate::ctx::{MIN_BOOTSTRAP_STACK, STACK_ALIGN};

/// One contiguous heap allocation per coroutine.
///
/// Overflowing the frame is not detected; in debug builds fresh frames are
/// filled with [`super::DEBUG_FILL`] so stray reads are easy to spot.
#[derive(Debug)]
pub struct FixedStack {
    frame_size: usize,
    counters: StatCounters,
}

impl FixedStack {
    pub fn new(frame_size: usize) -> Self {
        FixedStack { frame_size, counters: StatCounters::default() }
    }
}

impl Default for FixedStack {
    fn default() -> Self {
        FixedStack::new(DEFAULT_FRAME_SIZE)
    }
}

impl StackStrategy for FixedStack {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Fixed
    }

    fn default_frame_size(&self) -> usize {
        self.frame_size
    }

    fn init_stack_frame(&self, frame_size: usize) -> Result<StackFrame, StackError> {
        if frame_size < MIN_BOOTSTRAP_STACK {
            return Err(StackError::FrameTooSmall { requested: frame_size, minimum: MIN_BOOTSTRAP_STACK });
        }
        let layout = Layout::from_size_align(frame_size, STACK_ALIGN)
            .map_err(|_| StackError::OutOfMemory { size: frame_size })?;
        let base = NonNull::new(unsafe { alloc(layout) }).ok_or(StackError::OutOfMemory { size: frame_size })?;
        debug_fill(base.as_ptr(), frame_size);
        self.counters.frame_created();
        Ok(StackFrame {
            base,
            size: frame_size,
            initial_sp: align_down(base.as_ptr() as usize + frame_size, STACK_ALIGN),
            kind: FrameKind::Heap,
        })
    }

    fn release_stack_frame(&self, frame: StackFrame) {
        debug_assert!(matches!(frame.kind, FrameKind::Heap), "frame was not created by the fixed strategy");
        let layout = Layout::from_size_align(frame.size, STACK_ALIGN).expect("layout was valid at allocation");
        unsafe { dealloc(frame.base.as_ptr(), layout) };
        self.counters.frame_released();
    }

    fn committed_bytes(&self, frame: &StackFrame) -> usize {
        frame.size
    }

    fn stats(&self) -> StackStats {
        self.counters.snapshot()
    }
}
