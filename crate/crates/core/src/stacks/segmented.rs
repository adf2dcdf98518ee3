use std::alloc::{alloc, dealloc, Layout};
use std::ptr::{self, NonNull};
use std::sync::Arc;

use super::{
    debug_fill, FrameKind, StackError, StackFrame, StackStats, StackStrategy, StatCounters, StrategyKind,
    DEFAULT_MIN_SEGMENT_SIZE, SEGMENTED_DEFAULT_FRAME_SIZE,
};
use crate::ctx::{MIN_BOOTSTRAP_STACK, STACK_ALIGN};

/// Value stored in every segment header; a changed canary means something
/// wrote past the bottom of the segment below it.
pub const SEGMENT_CANARY: usize = 0x9999_9999_9999_9999;

/// Header placed at the lowest address of every segment. Usable stack bytes
/// follow immediately after it.
#[repr(C)]
#[derive(Debug)]
pub struct StackSegment {
    pub prev: *mut StackSegment,
    pub next: *mut StackSegment,
    /// Usable bytes, header excluded.
    pub size: usize,
    pub canary: usize,
}

const HEADER: usize = std::mem::size_of::<StackSegment>();
const _: () = assert!(HEADER.is_multiple_of(STACK_ALIGN));

fn round16(n: usize) -> usize {
    n.div_ceil(STACK_ALIGN) * STACK_ALIGN
}

fn segment_layout(size: usize) -> Layout {
    Layout::from_size_align(HEADER + size, STACK_ALIGN).expect("segment size overflows a layout")
}

impl StackSegment {
    /// Allocates a segment with `size` usable bytes (rounded up to 16) and
    /// unlinked neighbours.
    pub fn init(size: usize) -> Result<NonNull<StackSegment>, StackError> {
        let size = round16(size);
        let raw = unsafe { alloc(segment_layout(size)) } as *mut StackSegment;
        let seg = NonNull::new(raw).ok_or(StackError::OutOfMemory { size: HEADER + size })?;
        unsafe {
            seg.as_ptr().write(StackSegment { prev: ptr::null_mut(), next: ptr::null_mut(), size, canary: SEGMENT_CANARY });
            debug_fill((raw as *mut u8).add(HEADER), size);
        }
        Ok(seg)
    }

    /// # Safety
    /// `seg` must come from [`StackSegment::init`] and be unlinked from any
    /// chain still in use.
    unsafe fn free(seg: NonNull<StackSegment>) {
        let s = seg.as_ref();
        debug_assert_eq!(s.canary, SEGMENT_CANARY, "segment canary at {:p} was overwritten", seg.as_ptr());
        dealloc(seg.as_ptr() as *mut u8, segment_layout(s.size));
    }

    pub fn usable_low(&self) -> usize {
        self as *const StackSegment as usize + HEADER
    }

    pub fn top(&self) -> usize {
        self.usable_low() + self.size
    }
}

/// The segments backing one coroutine, with a cursor at the segment code is
/// currently running on.
///
/// Segments past the cursor are retained after
/// [`release_growth_frame`](SegmentChain::release_growth_frame) so that
/// repeatedly crossing the same boundary allocates only once.
#[derive(Debug)]
pub struct SegmentChain {
    head: NonNull<StackSegment>,
    current: NonNull<StackSegment>,
    min_segment_size: usize,
    growth_allocations: usize,
    counters: Option<Arc<StatCounters>>,
}

impl SegmentChain {
    /// A chain of one segment with `frame_size` usable bytes.
    pub fn new(frame_size: usize, min_segment_size: usize) -> Result<Self, StackError> {
        let head = StackSegment::init(frame_size)?;
        Ok(SegmentChain { head, current: head, min_segment_size, growth_allocations: 0, counters: None })
    }

    pub fn head(&self) -> &StackSegment {
        unsafe { self.head.as_ref() }
    }

    pub fn current(&self) -> &StackSegment {
        unsafe { self.current.as_ref() }
    }

    pub fn at_head(&self) -> bool {
        self.head == self.current
    }

    /// Growth segments this chain has allocated over its lifetime.
    pub fn growth_allocations(&self) -> usize {
        self.growth_allocations
    }

    pub(crate) fn head_usable_low(&self) -> usize {
        self.head().usable_low()
    }

    /// Moves the cursor to a segment with room for `needed + param_bytes`
    /// bytes, allocating one only if the retained next segment is missing
    /// or too small. Copies `param_bytes` bytes from `old_stack_top` to the
    /// top of that segment and returns the 16-byte aligned stack pointer
    /// just below them.
    ///
    /// # Safety
    /// `old_stack_top` must be readable for `param_bytes` bytes.
    pub unsafe fn allocate_growth_frame(
        &mut self,
        needed: usize,
        old_stack_top: *const u8,
        param_bytes: usize,
    ) -> Result<usize, StackError> {
        let param_room = round16(param_bytes);
        let want = needed + param_room;
        let cur = self.current.as_ptr();
        let next = (*cur).next;
        let seg = if next.is_null() || (*next).size < want {
            let seg = StackSegment::init(want.max(self.min_segment_size))?.as_ptr();
            (*seg).prev = cur;
            (*seg).next = next;
            if !next.is_null() {
                (*next).prev = seg;
            }
            (*cur).next = seg;
            self.growth_allocations += 1;
            if let Some(c) = &self.counters {
                c.add_growth(1);
            }
            seg
        } else {
            next
        };
        self.current = NonNull::new_unchecked(seg);
        let sp = (*seg).top() - param_room;
        if param_bytes > 0 {
            ptr::copy_nonoverlapping(old_stack_top, sp as *mut u8, param_bytes);
        }
        Ok(sp)
    }

    /// Steps the cursor back to the previous segment, keeping the vacated
    /// one linked for reuse. Returns the first usable address of the
    /// segment now current.
    ///
    /// Panics when the cursor is already at the head.
    pub fn release_growth_frame(&mut self) -> usize {
        assert!(!self.at_head(), "release_growth_frame called at the head of the segment chain");
        let prev = self.current().prev;
        self.current = NonNull::new(prev).expect("non-head segment without a predecessor");
        prev as usize + HEADER
    }

    /// Segments from head to tail.
    pub fn segments(&self) -> Vec<&StackSegment> {
        let mut out = Vec::new();
        let mut p = self.head.as_ptr() as *const StackSegment;
        while !p.is_null() {
            let s = unsafe { &*p };
            out.push(s);
            p = s.next;
        }
        out
    }

    /// Checks link symmetry and canaries. Returns the number of segments.
    pub fn verify(&self) -> Result<usize, String> {
        let forward = self.segments();
        if !forward[0].prev.is_null() {
            return Err("head segment has a predecessor".into());
        }
        let mut backward = Vec::new();
        let mut p = *forward.last().unwrap() as *const StackSegment;
        while !p.is_null() {
            if backward.len() > forward.len() {
                return Err("prev links form a cycle".into());
            }
            let s = unsafe { &*p };
            backward.push(s as *const StackSegment);
            p = s.prev;
        }
        backward.reverse();
        let fwd: Vec<*const StackSegment> = forward.iter().map(|s| *s as *const StackSegment).collect();
        if fwd != backward {
            return Err("next and prev links disagree".into());
        }
        if let Some(bad) = forward.iter().find(|s| s.canary != SEGMENT_CANARY) {
            return Err(format!("canary of segment at {:p} was overwritten", *bad));
        }
        if !fwd.contains(&(self.current.as_ptr() as *const StackSegment)) {
            return Err("cursor is not on the chain".into());
        }
        Ok(forward.len())
    }

    pub(crate) fn contains(&self, addr: usize) -> bool {
        self.segments().iter().any(|s| addr >= s.usable_low() && addr <= s.top())
    }

    fn free_all(&mut self) {
        let mut p = self.head.as_ptr();
        while let Some(seg) = NonNull::new(p) {
            p = unsafe { seg.as_ref().next };
            unsafe { StackSegment::free(seg) };
        }
    }
}

/// A chain of heap segments grown at explicit check points.
#[derive(Debug)]
pub struct SegmentedStack {
    frame_size: usize,
    min_segment_size: usize,
    counters: Arc<StatCounters>,
}

impl SegmentedStack {
    pub fn new(frame_size: usize, min_segment_size: usize) -> Self {
        SegmentedStack { frame_size, min_segment_size, counters: Arc::default() }
    }

    pub fn min_segment_size(&self) -> usize {
        self.min_segment_size
    }
}

impl Default for SegmentedStack {
    fn default() -> Self {
        SegmentedStack::new(SEGMENTED_DEFAULT_FRAME_SIZE, DEFAULT_MIN_SEGMENT_SIZE)
    }
}

impl StackStrategy for SegmentedStack {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Segmented
    }

    fn default_frame_size(&self) -> usize {
        self.frame_size
    }

    fn init_stack_frame(&self, frame_size: usize) -> Result<StackFrame, StackError> {
        if frame_size < MIN_BOOTSTRAP_STACK {
            return Err(StackError::FrameTooSmall { requested: frame_size, minimum: MIN_BOOTSTRAP_STACK });
        }
        let mut chain = SegmentChain::new(frame_size, self.min_segment_size)?;
        chain.counters = Some(self.counters.clone());
        self.counters.frame_created();
        let head = chain.head;
        let (size, initial_sp) = {
            let h = chain.head();
            (HEADER + h.size, h.top())
        };
        Ok(StackFrame { base: head.cast(), size, initial_sp, kind: FrameKind::Segments(chain) })
    }

    fn release_stack_frame(&self, frame: StackFrame) {
        match frame.kind {
            FrameKind::Segments(mut chain) => chain.free_all(),
            _ => panic!("frame was not created by the segmented strategy"),
        }
        self.counters.frame_released();
    }

    fn committed_bytes(&self, frame: &StackFrame) -> usize {
        match &frame.kind {
            FrameKind::Segments(chain) => chain.segments().iter().map(|s| HEADER + s.size).sum(),
            _ => 0,
        }
    }

    fn stats(&self) -> StackStats {
        self.counters.snapshot()
    }
}

impl Drop for SegmentChain {
    fn drop(&mut self) {
        // Chains owned by a frame are freed by `release_stack_frame`, which
        // consumes the frame; stand-alone chains free themselves here.
        if self.counters.is_none() {
            self.free_all();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(chain: &SegmentChain) -> Vec<usize> {
        chain.segments().iter().map(|s| s.size).collect()
    }

    #[test]
    fn init_segment_sets_header() {
        let chain = SegmentChain::new(1024, 0).unwrap();
        let h = chain.head();
        assert_eq!(h.size, 1024);
        assert!(h.prev.is_null() && h.next.is_null());
        assert_eq!(h.canary, 0x9999999999999999);
        assert_eq!(h.top() % 16, 0);
    }

    #[test]
    fn header_only_segment_is_allowed() {
        let mut chain = SegmentChain::new(0, 0).unwrap();
        assert_eq!(chain.head().size, 0);
        let sp = unsafe { chain.allocate_growth_frame(64, ptr::null(), 0).unwrap() };
        assert_eq!(sp, chain.current().top());
        assert_eq!(chain.growth_allocations(), 1);
    }

    #[test]
    fn first_growth_links_both_ways() {
        let mut chain = SegmentChain::new(1024, 0).unwrap();
        let params = [7u8; 24];
        let sp = unsafe { chain.allocate_growth_frame(4096, params.as_ptr(), params.len()).unwrap() };
        assert_eq!(sp % 16, 0);
        let segs = chain.segments();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].next as *const _, segs[1] as *const _);
        assert_eq!(segs[1].prev as *const _, segs[0] as *const _);
        let copied = unsafe { std::slice::from_raw_parts(sp as *const u8, 24) };
        assert_eq!(copied, &params);
        assert_eq!(chain.verify(), Ok(2));
    }

    #[test]
    fn release_then_regrow_reuses_the_retained_segment() {
        let mut chain = SegmentChain::new(1024, 0).unwrap();
        let first = unsafe { chain.allocate_growth_frame(2048, ptr::null(), 0).unwrap() };
        let back = chain.release_growth_frame();
        assert!(chain.at_head());
        assert_eq!(back, chain.head().usable_low());
        assert!(!chain.head().next.is_null());
        for _ in 0..1000 {
            let again = unsafe { chain.allocate_growth_frame(2048, ptr::null(), 0).unwrap() };
            assert_eq!(again, first);
            chain.release_growth_frame();
        }
        assert_eq!(chain.growth_allocations(), 1);
    }

    #[test]
    fn too_small_retained_segment_gets_a_new_one_spliced_in_front() {
        let mut chain = SegmentChain::new(1024, 0).unwrap();
        unsafe { chain.allocate_growth_frame(512, ptr::null(), 0).unwrap() };
        chain.release_growth_frame();
        unsafe { chain.allocate_growth_frame(4096, ptr::null(), 0).unwrap() };
        assert_eq!(shape(&chain), vec![1024, 4096, 512]);
        assert_eq!(chain.current().size, 4096);
        assert_eq!(chain.verify(), Ok(3));
    }

    #[test]
    fn min_segment_size_is_a_floor() {
        let mut chain = SegmentChain::new(1024, 16 * 1024).unwrap();
        unsafe { chain.allocate_growth_frame(100, ptr::null(), 0).unwrap() };
        assert_eq!(chain.current().size, 16 * 1024);
    }

    #[test]
    #[should_panic(expected = "head of the segment chain")]
    fn releasing_at_the_head_panics() {
        let mut chain = SegmentChain::new(1024, 0).unwrap();
        chain.release_growth_frame();
    }

    #[test]
    fn strategy_accounts_for_every_segment() {
        let s = SegmentedStack::default();
        let mut f = s.init_stack_frame(1024).unwrap();
        assert_eq!(s.committed_bytes(&f), 1024 + HEADER);
        unsafe { f.segments_mut().unwrap().allocate_growth_frame(8192, ptr::null(), 0).unwrap() };
        assert_eq!(s.committed_bytes(&f), 1024 + 8192 + 2 * HEADER);
        assert_eq!(s.stats().growth_segments, 1);
        s.release_stack_frame(f);
        assert_eq!(s.stats().live_frames, 0);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Grow(usize),
        Release,
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![(0usize..6000).prop_map(Op::Grow), Just(Op::Release)]
    }

    proptest! {
        #[test]
        fn chain_links_and_canaries_survive_any_interleaving(ops in prop::collection::vec(op(), 0..200)) {
            let mut chain = SegmentChain::new(1024, 0).unwrap();
            let mut depth = 0usize;
            for op in ops {
                match op {
                    Op::Grow(n) => {
                        let sp = unsafe { chain.allocate_growth_frame(n, ptr::null(), 0).unwrap() };
                        prop_assert!(sp % 16 == 0);
                        prop_assert!(chain.current().size >= n);
                        // Scribble over the whole usable area; canaries must survive.
                        let cur = chain.current();
                        unsafe { ptr::write_bytes(cur.usable_low() as *mut u8, 0xAB, cur.size) };
                        depth += 1;
                    }
                    Op::Release if depth > 0 => {
                        chain.release_growth_frame();
                        depth -= 1;
                    }
                    Op::Release => {}
                }
                let n = chain.verify().map_err(TestCaseError::fail)?;
                prop_assert!(n > depth);
            }
        }
    }
}
