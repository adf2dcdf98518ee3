//! Coroutines and effect handling.
//!
//! A [`Coroutine`] owns a stack frame from some [`StackStrategy`] and runs a
//! closure on it. [`Coroutine::resume`] runs it until it performs an effect,
//! yields, exits or returns, and hands back a two-word [`Request`]
//! describing why it stopped. Effects are declared with
//! [`declare_effects!`](crate::declare_effects) and raised with [`perform`];
//! the handler is the nearest resumer (walking outwards from the current
//! coroutine) whose [`EffectSet`] includes the effect.
//!
//! Coroutines that are resuming a child stay `Running` while the child runs,
//! so every coroutine on the active chain reports `Running`; exactly one of
//! them, the innermost, is current.
//!
//! Yielding to an ancestor transfers control straight to that ancestor's
//! resumer. The coroutines in between are suspended as a unit with it and
//! cannot be resumed on their own; resuming the ancestor continues the
//! innermost one.

use std::any::{Any, TypeId};
use std::cell::{Cell, UnsafeCell};
use std::fmt;
use std::marker::PhantomData;
use std::ops::{BitOr, BitOrAssign};
use std::panic::{self, AssertUnwindSafe};
use std::ptr::{self, NonNull};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::ctx::{self, ResumeContext, MIN_BOOTSTRAP_STACK, STACK_ALIGN};
use crate::stacks::{self, StackError, StackFrame, StackStrategy};
use crate::Word;

/// An effect tag. User effects use `0..=63`; larger values are reserved.
pub type EffectId = u64;

/// Highest user effect id.
pub const MAX_EFFECT_ID: EffectId = 63;

/// Tag of the request produced when a coroutine returns or exits.
pub const RETURN: EffectId = u64::MAX;

const PANIC: EffectId = u64::MAX - 1;

/// Set on the tag of requests whose payload is a typed envelope built by
/// [`perform`] or [`throw`].
const TYPED: u64 = 1 << 32;

/// Stack guaranteed to a coroutine body when it starts. Besides ordinary
/// library calls this has to cover unwinding a panic out of the body, which
/// takes roughly twice the syscall headroom.
pub const BODY_STACK_RESERVE: usize = 32 * 1024;

const ENVELOPE_MAGIC: u64 = 0x5EFF_E4E1_0BE5_0001;
#[cfg(debug_assertions)]
const ENVELOPE_POISON: u64 = 0xDEAD_DEAD_DEAD_DEAD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoroutineState {
    Running,
    Suspended,
    Finished,
}

#[derive(Debug, Error)]
pub enum CoroutineError {
    #[error("coroutine has finished")]
    Finished,
    #[error("coroutine is running")]
    Running,
    #[error("coroutine is suspended inside a yield to one of its ancestors; resume that ancestor instead")]
    Captured,
    #[error("not running inside a coroutine")]
    NotInCoroutine,
    #[error("target coroutine is not the current coroutine or one of its ancestors")]
    NotAncestor,
    #[error(transparent)]
    Stack(#[from] StackError),
}

/// A set of effect ids, one bit per id.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct EffectSet(u64);

impl EffectSet {
    pub const EMPTY: EffectSet = EffectSet(0);
    pub const ALL: EffectSet = EffectSet(u64::MAX);

    /// The set containing only `id`.
    pub const fn handles(id: EffectId) -> EffectSet {
        assert!(id <= MAX_EFFECT_ID, "effect ids must be in 0..=63");
        EffectSet(1 << id)
    }

    pub const fn of<E: Effect>() -> EffectSet {
        EffectSet::handles(E::ID)
    }

    pub const fn from_bits(bits: u64) -> EffectSet {
        EffectSet(bits)
    }

    pub const fn bits(self) -> u64 {
        self.0
    }

    pub const fn with(self, id: EffectId) -> EffectSet {
        EffectSet(self.0 | EffectSet::handles(id).0)
    }

    pub const fn contains(self, id: EffectId) -> bool {
        id <= MAX_EFFECT_ID && self.0 & (1 << id) != 0
    }
}

impl BitOr for EffectSet {
    type Output = EffectSet;

    fn bitor(self, rhs: EffectSet) -> EffectSet {
        EffectSet(self.0 | rhs.0)
    }
}

impl BitOrAssign for EffectSet {
    fn bitor_assign(&mut self, rhs: EffectSet) {
        self.0 |= rhs.0;
    }
}

impl fmt::Debug for EffectSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EffectSet({:#018x})", self.0)
    }
}

/// Conversion between a value and the single machine word it travels in.
pub trait WordRepr: Sized {
    fn to_word(self) -> Word;
    fn from_word(word: Word) -> Self;
}

macro_rules! int_word_repr {
    ($($t:ty),*) => {$(
        impl WordRepr for $t {
            fn to_word(self) -> Word { self as Word }
            fn from_word(word: Word) -> Self { word as $t }
        }
    )*};
}

int_word_repr!(usize, isize, u64, i64, u32, i32, u16, i16, u8, i8);

impl WordRepr for () {
    fn to_word(self) -> Word {
        0
    }
    fn from_word(_: Word) -> Self {}
}

impl WordRepr for bool {
    fn to_word(self) -> Word {
        self as Word
    }
    fn from_word(word: Word) -> Self {
        word != 0
    }
}

impl WordRepr for f64 {
    fn to_word(self) -> Word {
        self.to_bits() as Word
    }
    fn from_word(word: Word) -> Self {
        f64::from_bits(word as u64)
    }
}

impl WordRepr for f32 {
    fn to_word(self) -> Word {
        self.to_bits() as Word
    }
    fn from_word(word: Word) -> Self {
        f32::from_bits(word as u32)
    }
}

impl<T> WordRepr for *const T {
    fn to_word(self) -> Word {
        self as Word
    }
    fn from_word(word: Word) -> Self {
        word as *const T
    }
}

impl<T> WordRepr for *mut T {
    fn to_word(self) -> Word {
        self as Word
    }
    fn from_word(word: Word) -> Self {
        word as *mut T
    }
}

/// A declared effect: a payload type with a fixed id and reply type.
///
/// Usually implemented through [`declare_effects!`](crate::declare_effects).
pub trait Effect: Sized + 'static {
    const ID: EffectId;
    const NAME: &'static str;
    type Reply: WordRepr;
}

/// Declares effect payload structs and their [`Effect`] impls.
///
/// ```
/// effstack::declare_effects! {
///     /// Ask the handler for the next number.
///     pub effect Next = 0 {} -> u64;
///     pub effect Log = 1 { line: &'static str, level: u8 } -> ();
/// }
/// assert_eq!(<Log as effstack::Effect>::ID, 1);
/// ```
///
/// Ids must be distinct and in `0..=63`; both are checked at compile time
/// within one invocation.
#[macro_export]
macro_rules! declare_effects {
    ($(
        $(#[$meta:meta])*
        $vis:vis effect $name:ident = $id:literal { $($field:ident : $fty:ty),* $(,)? } -> $reply:ty;
    )+) => {
        $(
            $(#[$meta])*
            #[derive(Debug, Clone)]
            $vis struct $name { $(pub $field: $fty),* }

            impl $crate::Effect for $name {
                const ID: $crate::EffectId = $id;
                const NAME: &'static str = stringify!($name);
                type Reply = $reply;
            }
        )+

        const _: () = {
            let ids: &[$crate::EffectId] = &[$($id),+];
            let mut i = 0;
            while i < ids.len() {
                assert!(ids[i] <= $crate::effects::MAX_EFFECT_ID, "effect ids must be in 0..=63");
                let mut j = i + 1;
                while j < ids.len() {
                    assert!(ids[i] != ids[j], "duplicate effect id in declare_effects!");
                    j += 1;
                }
                i += 1;
            }
        };
    };
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
struct RawRequest {
    effect: u64,
    payload: Word,
}

#[repr(C)]
struct EnvelopeHeader {
    magic: u64,
    type_id: TypeId,
}

#[repr(C)]
struct Envelope<E> {
    header: EnvelopeHeader,
    args: E,
}

/// Why a coroutine stopped: an effect tag and one word of payload.
///
/// For effects the payload is the address of the arguments on the
/// performer's stack, valid until the coroutine is resumed again; the borrow
/// on the coroutine enforces that. For [`RETURN`] it is the return value.
#[repr(C)]
pub struct Request<'a> {
    effect: u64,
    payload: Word,
    _coroutine: PhantomData<&'a mut Coroutine>,
}

const _: () = assert!(std::mem::size_of::<Request<'static>>() == 2 * std::mem::size_of::<Word>());

impl<'a> Request<'a> {
    /// The effect id, or [`RETURN`].
    pub fn effect(&self) -> EffectId {
        if self.effect == RETURN {
            RETURN
        } else {
            self.effect & !TYPED
        }
    }

    pub fn is_return(&self) -> bool {
        self.effect == RETURN
    }

    /// The raw payload word.
    pub fn payload_word(&self) -> Word {
        self.payload
    }

    /// The returned value. Meaningful only when [`is_return`](Self::is_return).
    pub fn return_value(&self) -> Word {
        debug_assert!(self.is_return(), "return_value() on a non-return request");
        self.payload
    }

    /// True if this request was raised by `perform::<E>` or `throw::<E>`.
    pub fn is<E: Effect>(&self) -> bool {
        self.payload::<E>().is_some()
    }

    /// Typed view of the arguments passed to `perform::<E>`.
    pub fn payload<E: Effect>(&self) -> Option<&'a E> {
        if self.effect != (E::ID | TYPED) || self.payload == 0 {
            return None;
        }
        unsafe {
            let header = &*(self.payload as *const EnvelopeHeader);
            if header.magic != ENVELOPE_MAGIC || header.type_id != TypeId::of::<E>() {
                return None;
            }
            Some(&(*(self.payload as *const Envelope<E>)).args)
        }
    }
}

impl fmt::Debug for Request<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_return() {
            write!(f, "Request::Return({:#x})", self.payload)
        } else {
            write!(f, "Request {{ effect: {}, payload: {:#x} }}", self.effect(), self.payload)
        }
    }
}

type Body = Box<dyn FnOnce(Word) -> Word>;

struct Inner {
    state: Cell<CoroutineState>,
    /// Suspended as an intermediate of a yield to an ancestor.
    captured: Cell<bool>,
    parent: Cell<*const Inner>,
    /// Innermost coroutine of the chain suspended together with this one.
    leaf: Cell<*const Inner>,
    handled: Cell<EffectSet>,
    /// Where this coroutine continues when it is the leaf of a resume.
    resume_point: UnsafeCell<ResumeContext>,
    /// Where control goes when this coroutine stops.
    return_point: UnsafeCell<ResumeContext>,
    frame: UnsafeCell<Option<StackFrame>>,
    strategy: Arc<dyn StackStrategy>,
    entry: Cell<Option<Body>>,
    #[cfg(debug_assertions)]
    pending_envelope: Cell<usize>,
}

thread_local! {
    static CURRENT: Cell<*const Inner> = const { Cell::new(ptr::null()) };
}

fn current_ptr() -> *const Inner {
    CURRENT.with(|c| c.get())
}

fn set_current(p: *const Inner) {
    CURRENT.with(|c| c.set(p))
}

/// A suspendable computation with its own stack.
///
/// Dropping a suspended coroutine releases its stack without running the
/// destructors of values still live on it.
pub struct Coroutine {
    inner: NonNull<Inner>,
}

/// A non-owning handle used to name a coroutine on the active chain.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct CoroutineRef(*const Inner);

impl fmt::Debug for CoroutineRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CoroutineRef({:p})", self.0)
    }
}

impl CoroutineRef {
    /// State of the referenced coroutine.
    ///
    /// # Safety
    /// The coroutine must still exist.
    pub unsafe fn state(self) -> CoroutineState {
        (*self.0).state.get()
    }

    /// Handled set declared at its most recent resume.
    ///
    /// # Safety
    /// The coroutine must still exist.
    pub unsafe fn handled(self) -> EffectSet {
        (*self.0).handled.get()
    }
}

/// Where [`locate_handler`] found a handler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Handler {
    /// The resumer of this coroutine handles the effect.
    Coroutine(CoroutineRef),
    /// Nobody on the chain does; the process default handler applies.
    Default,
}

impl Coroutine {
    /// A coroutine running `entry(argument)` on a frame of the default
    /// strategy's default size.
    pub fn new(entry: fn(Word) -> Word, argument: Word) -> Result<Coroutine, CoroutineError> {
        Coroutine::from_fn(move |_| entry(argument))
    }

    pub fn new_sized(entry: fn(Word) -> Word, argument: Word, frame_size: usize) -> Result<Coroutine, CoroutineError> {
        Coroutine::from_fn_sized(move |_| entry(argument), frame_size)
    }

    /// A coroutine running `f`. `f` receives the reply word of the first
    /// resume.
    pub fn from_fn(f: impl FnOnce(Word) -> Word + 'static) -> Result<Coroutine, CoroutineError> {
        Coroutine::with_strategy(stacks::default_strategy()?, None, f)
    }

    pub fn from_fn_sized(
        f: impl FnOnce(Word) -> Word + 'static,
        frame_size: usize,
    ) -> Result<Coroutine, CoroutineError> {
        Coroutine::with_strategy(stacks::default_strategy()?, Some(frame_size), f)
    }

    /// A coroutine on an explicit strategy; `frame_size` defaults to the
    /// strategy's default.
    pub fn with_strategy(
        strategy: Arc<dyn StackStrategy>,
        frame_size: Option<usize>,
        f: impl FnOnce(Word) -> Word + 'static,
    ) -> Result<Coroutine, CoroutineError> {
        let size = frame_size.unwrap_or_else(|| strategy.default_frame_size());
        if size < MIN_BOOTSTRAP_STACK {
            return Err(StackError::FrameTooSmall { requested: size, minimum: MIN_BOOTSTRAP_STACK }.into());
        }
        if strategy.kind() == stacks::StrategyKind::Segmented {
            ensure_scratch_stack();
        }
        let frame = strategy.init_stack_frame(size)?;
        let initial_sp = frame.initial_sp();
        let inner = Box::new(Inner {
            state: Cell::new(CoroutineState::Suspended),
            captured: Cell::new(false),
            parent: Cell::new(ptr::null()),
            leaf: Cell::new(ptr::null()),
            handled: Cell::new(EffectSet::EMPTY),
            resume_point: UnsafeCell::new(ResumeContext::empty()),
            return_point: UnsafeCell::new(ResumeContext::empty()),
            frame: UnsafeCell::new(Some(frame)),
            strategy,
            entry: Cell::new(Some(Box::new(f))),
            #[cfg(debug_assertions)]
            pending_envelope: Cell::new(0),
        });
        let inner = NonNull::from(Box::leak(inner));
        unsafe {
            let p = inner.as_ptr();
            (*p).leaf.set(p);
            *(*p).resume_point.get() = ctx::context_bootstrap(coroutine_entry, p as usize, initial_sp);
        }
        Ok(Coroutine { inner })
    }

    fn inner(&self) -> &Inner {
        unsafe { self.inner.as_ref() }
    }

    pub fn state(&self) -> CoroutineState {
        self.inner().state.get()
    }

    /// The parent of the most recent activation, if it was a coroutine.
    pub fn parent(&self) -> Option<CoroutineRef> {
        let p = self.inner().parent.get();
        (!p.is_null()).then_some(CoroutineRef(p))
    }

    pub fn handle(&self) -> CoroutineRef {
        CoroutineRef(self.inner.as_ptr())
    }

    pub fn handled_effects(&self) -> EffectSet {
        self.inner().handled.get()
    }

    pub fn strategy(&self) -> &Arc<dyn StackStrategy> {
        &self.inner().strategy
    }

    pub fn frame(&self) -> &StackFrame {
        unsafe { (*self.inner().frame.get()).as_ref().expect("coroutine frame already released") }
    }

    /// Bytes of this coroutine's frame currently backed by memory.
    pub fn committed_bytes(&self) -> usize {
        self.strategy().committed_bytes(self.frame())
    }

    /// Stack pointer saved at the most recent suspension.
    pub fn saved_stack_pointer(&self) -> usize {
        unsafe { (*self.inner().resume_point.get()).stack_pointer }
    }

    /// Runs the coroutine until it stops, delivering `reply` as the value of
    /// the perform or yield it is suspended in. `handled` is the set of
    /// effects the caller handles for this activation.
    pub fn resume(&mut self, reply: Word, handled: EffectSet) -> Result<Request<'_>, CoroutineError> {
        let k = self.inner();
        match k.state.get() {
            CoroutineState::Finished => return Err(CoroutineError::Finished),
            CoroutineState::Running => return Err(CoroutineError::Running),
            CoroutineState::Suspended if k.captured.get() => return Err(CoroutineError::Captured),
            CoroutineState::Suspended => {}
        }
        Ok(unsafe { resume_unchecked(self.inner.as_ptr(), reply, handled) })
    }

    /// [`resume`](Self::resume) with every effect handled.
    pub fn resume_handling_all(&mut self, reply: Word) -> Result<Request<'_>, CoroutineError> {
        self.resume(reply, EffectSet::ALL)
    }

    /// [`resume`](Self::resume) with a typed reply to a `perform::<E>`.
    pub fn resume_with<E: Effect>(&mut self, reply: E::Reply, handled: EffectSet) -> Result<Request<'_>, CoroutineError> {
        self.resume(reply.to_word(), handled)
    }
}

impl fmt::Debug for Coroutine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Coroutine")
            .field("at", &self.inner.as_ptr())
            .field("state", &self.state())
            .field("strategy", &self.strategy().name())
            .finish()
    }
}

impl Drop for Coroutine {
    fn drop(&mut self) {
        let k = self.inner();
        if k.state.get() == CoroutineState::Running || k.captured.get() {
            eprintln!(
                "effstack: deleting a coroutine that is {} ({:p})",
                if k.captured.get() { "captured by an ancestor's suspension" } else { "running" },
                self.inner.as_ptr()
            );
            std::process::abort();
        }
        unsafe {
            let inner = Box::from_raw(self.inner.as_ptr());
            if let Some(frame) = (*inner.frame.get()).take() {
                inner.strategy.release_stack_frame(frame);
            }
        }
    }
}

/// Moves `c` to `to`. Debug builds abort on anything but
/// Suspended -> Running, Running -> Suspended and Running -> Finished.
#[inline(always)]
unsafe fn transition(c: *const Inner, to: CoroutineState) {
    #[cfg(debug_assertions)]
    {
        use CoroutineState::*;
        let from = (*c).state.get();
        if !matches!((from, to), (Suspended, Running) | (Running, Suspended) | (Running, Finished)) {
            // Panicking here could unwind across a context switch.
            eprintln!("effstack: illegal coroutine state transition {from:?} -> {to:?} at {c:p}");
            std::process::abort();
        }
    }
    (*c).state.set(to);
}

unsafe fn resume_unchecked<'a>(k: *const Inner, reply: Word, handled: EffectSet) -> Request<'a> {
    let caller = current_ptr();
    let leaf = (*k).leaf.get();
    (*k).parent.set(caller);
    (*k).handled.set(handled);
    let mut c = leaf;
    loop {
        transition(c, CoroutineState::Running);
        (*c).captured.set(false);
        if c == k {
            break;
        }
        c = (*c).parent.get();
    }
    (*k).leaf.set(k);
    #[cfg(debug_assertions)]
    {
        let env = (*k).pending_envelope.replace(0);
        if env != 0 {
            (*(env as *mut EnvelopeHeader)).magic = ENVELOPE_POISON;
        }
    }
    set_current(leaf);
    let ret = ctx::context_switch((*k).return_point.get(), (*leaf).resume_point.get(), reply);
    set_current(caller);
    let raw = *(ret as *const RawRequest);
    if raw.effect == PANIC {
        let payload = Box::from_raw(raw.payload as *mut Box<dyn Any + Send>);
        panic::resume_unwind(*payload);
    }
    Request { effect: raw.effect, payload: raw.payload, _coroutine: PhantomData }
}

unsafe extern "C" fn coroutine_entry(argument: usize, first_reply: usize) -> ! {
    let k = argument as *const Inner;
    let req = grow_stack(BODY_STACK_RESERVE, || run_body(k, first_reply));
    transition(k, CoroutineState::Finished);
    ctx::context_restore((*k).return_point.get(), &req as *const RawRequest as usize)
}

unsafe fn run_body(k: *const Inner, first_reply: Word) -> RawRequest {
    let body = (*k).entry.take().expect("coroutine entered twice");
    match panic::catch_unwind(AssertUnwindSafe(move || body(first_reply))) {
        Ok(value) => RawRequest { effect: RETURN, payload: value },
        Err(p) => RawRequest { effect: PANIC, payload: Box::into_raw(Box::new(p)) as Word },
    }
}

/// The running coroutine, if any.
pub fn current_coroutine() -> Option<CoroutineRef> {
    let p = current_ptr();
    (!p.is_null()).then_some(CoroutineRef(p))
}

fn check_chain(target: *const Inner) -> Result<*const Inner, CoroutineError> {
    let cur = current_ptr();
    if cur.is_null() {
        return Err(CoroutineError::NotInCoroutine);
    }
    let mut c = cur;
    while !c.is_null() {
        if c == target {
            return Ok(cur);
        }
        c = unsafe { (*c).parent.get() };
    }
    Err(CoroutineError::NotAncestor)
}

unsafe fn suspend_chain(cur: *const Inner, target: *const Inner, effect: u64, payload: Word) -> Word {
    let mut c = cur;
    loop {
        transition(c, CoroutineState::Suspended);
        (*c).captured.set(c != target);
        if c == target {
            break;
        }
        c = (*c).parent.get();
    }
    (*target).leaf.set(cur);
    let req = RawRequest { effect, payload };
    ctx::context_switch((*cur).resume_point.get(), (*target).return_point.get(), &req as *const RawRequest as usize)
}

unsafe fn finish_chain(cur: *const Inner, target: *const Inner, effect: u64, payload: Word) -> ! {
    let mut c = cur;
    loop {
        transition(c, CoroutineState::Finished);
        (*c).captured.set(false);
        if c == target {
            break;
        }
        c = (*c).parent.get();
    }
    let req = RawRequest { effect, payload };
    ctx::context_restore((*target).return_point.get(), &req as *const RawRequest as usize)
}

fn check_tag(effect: EffectId) {
    assert!(effect <= MAX_EFFECT_ID || effect == RETURN, "effect id {effect} is outside 0..=63");
}

/// Suspends every coroutine from the current one up to `target` and hands
/// `Request { effect, payload }` to `target`'s resumer. Returns the reply
/// word once `target` is resumed.
pub fn yield_to(target: CoroutineRef, effect: EffectId, payload: Word) -> Result<Word, CoroutineError> {
    check_tag(effect);
    let cur = check_chain(target.0)?;
    Ok(unsafe { suspend_chain(cur, target.0, effect, payload) })
}

/// Finishes every coroutine from the current one up to `target`; `target`'s
/// resumer receives a [`RETURN`] request carrying `payload`.
///
/// Values live on the abandoned stacks are not dropped.
///
/// # Panics
/// When not called from a coroutine, or `target` is not on the active
/// chain.
pub fn exit(target: CoroutineRef, payload: Word) -> ! {
    let cur = check_chain(target.0).unwrap_or_else(|e| panic!("exit: {e}"));
    unsafe { finish_chain(cur, target.0, RETURN, payload) }
}

/// The nearest coroutine, starting at the current one, whose resumer
/// declared `effect` handled.
pub fn locate_handler(effect: EffectId) -> Handler {
    let mut c = current_ptr();
    while !c.is_null() {
        unsafe {
            if (*c).handled.get().contains(effect) {
                return Handler::Coroutine(CoroutineRef(c));
            }
            c = (*c).parent.get();
        }
    }
    Handler::Default
}

/// Signature of the handler for effects nobody on the chain handles.
pub type DefaultHandler = fn(EffectId, &'static str) -> !;

static DEFAULT_HANDLER: AtomicUsize = AtomicUsize::new(0);

/// Replaces the process-wide handler for unhandled effects.
pub fn set_default_handler(handler: DefaultHandler) {
    DEFAULT_HANDLER.store(handler as usize, Ordering::Release);
}

fn run_default_handler(effect: EffectId, name: &'static str) -> ! {
    let h = DEFAULT_HANDLER.load(Ordering::Acquire);
    if h != 0 {
        let h: DefaultHandler = unsafe { std::mem::transmute::<usize, DefaultHandler>(h) };
        h(effect, name)
    }
    abort_unhandled(effect, name)
}

fn abort_unhandled(effect: EffectId, name: &'static str) -> ! {
    eprintln!("effstack: unhandled effect `{name}` (id {effect})");
    let mut c = current_ptr();
    let mut depth = 0;
    while !c.is_null() {
        unsafe {
            eprintln!("  #{depth} coroutine {c:p} handles {:?}", (*c).handled.get());
            c = (*c).parent.get();
        }
        depth += 1;
    }
    eprintln!("  #{depth} <root>");
    std::process::abort()
}

/// Performs effect `E` and returns the handler's reply.
///
/// The arguments stay on this coroutine's stack while the handler looks at
/// them. Runs the default handler when nobody handles `E`.
pub fn perform<E: Effect>(args: E) -> E::Reply {
    let target = match locate_handler(E::ID) {
        Handler::Coroutine(c) => c.0,
        Handler::Default => run_default_handler(E::ID, E::NAME),
    };
    let env = Envelope { header: EnvelopeHeader { magic: ENVELOPE_MAGIC, type_id: TypeId::of::<E>() }, args };
    let addr = &env as *const Envelope<E> as Word;
    let cur = current_ptr();
    #[cfg(debug_assertions)]
    unsafe {
        (*target).pending_envelope.set(addr)
    };
    let reply = unsafe { suspend_chain(cur, target, E::ID | TYPED, addr) };
    drop(env);
    E::Reply::from_word(reply)
}

/// Performs an effect given by id with a raw payload word.
pub fn perform_raw(effect: EffectId, payload: Word) -> Word {
    check_tag(effect);
    match locate_handler(effect) {
        Handler::Coroutine(c) => unsafe { suspend_chain(current_ptr(), c.0, effect, payload) },
        Handler::Default => run_default_handler(effect, "<raw>"),
    }
}

/// Like [`perform`], but the performer and every coroutine up to the
/// handler finish; the handler cannot resume them.
pub fn throw<E: Effect>(args: E) -> ! {
    let target = match locate_handler(E::ID) {
        Handler::Coroutine(c) => c.0,
        Handler::Default => run_default_handler(E::ID, E::NAME),
    };
    let env = Envelope { header: EnvelopeHeader { magic: ENVELOPE_MAGIC, type_id: TypeId::of::<E>() }, args };
    let addr = &env as *const Envelope<E> as Word;
    unsafe { finish_chain(current_ptr(), target, E::ID | TYPED, addr) }
}

pub fn throw_raw(effect: EffectId, payload: Word) -> ! {
    check_tag(effect);
    match locate_handler(effect) {
        Handler::Coroutine(c) => unsafe { finish_chain(current_ptr(), c.0, effect, payload) },
        Handler::Default => run_default_handler(effect, "<raw>"),
    }
}

/// Runs `f` with at least `needed` bytes of stack available.
///
/// On segmented stacks this is the growth check: when the current segment
/// is too short, `f` runs on the next segment of the chain (allocated on
/// first use, retained afterwards). Every other strategy calls `f` directly.
/// `needed` must cover the frame of `f` itself plus every frame `f` pushes
/// before the next `grow_stack` runs, including the callee frame in which
/// that next check sits. Code that calls into the standard library or libc
/// from a segmented coroutine should reserve at least
/// [`SYSCALL_SEGMENT_SIZE`](crate::stacks::SYSCALL_SEGMENT_SIZE).
#[inline]
pub fn grow_stack<R>(needed: usize, f: impl FnOnce() -> R) -> R {
    let cur = current_ptr();
    if cur.is_null() {
        return f();
    }
    let chain = unsafe {
        match (*(*cur).frame.get()).as_mut().and_then(|fr| fr.segments_mut()) {
            Some(chain) => chain as *mut stacks::SegmentChain,
            None => return f(),
        }
    };
    let sp = ctx::current_stack_pointer();
    let (low, top) = unsafe { ((*chain).current().usable_low(), (*chain).current().top()) };
    if sp < low || sp > top || sp - low >= needed {
        return f();
    }
    grow_and_call(chain, needed, f)
}

#[inline(never)]
fn grow_and_call<R, F: FnOnce() -> R>(chain: *mut stacks::SegmentChain, needed: usize, f: F) -> R {
    struct Thunk<F, R> {
        f: Option<F>,
        result: Option<std::thread::Result<R>>,
    }

    unsafe extern "C" fn run<F: FnOnce() -> R, R>(p: *mut u8) {
        let t = &mut *(p as *mut Thunk<F, R>);
        let f = t.f.take().expect("growth thunk ran twice");
        t.result = Some(panic::catch_unwind(AssertUnwindSafe(f)));
    }

    let new_sp = unsafe { allocate_on_scratch(chain, needed) };
    let mut thunk = Thunk { f: Some(f), result: None };
    unsafe {
        ctx::call_on_stack(&mut thunk as *mut Thunk<F, R> as *mut u8, run::<F, R>, new_sp);
        (*chain).release_growth_frame();
    }
    match thunk.result.expect("growth thunk did not run") {
        Ok(r) => r,
        Err(p) => panic::resume_unwind(p),
    }
}

const SCRATCH_STACK_SIZE: usize = 64 * 1024;

struct ScratchStack(Cell<*mut u8>);

impl Drop for ScratchStack {
    fn drop(&mut self) {
        let p = self.0.get();
        if !p.is_null() {
            let layout = std::alloc::Layout::from_size_align(SCRATCH_STACK_SIZE, STACK_ALIGN).unwrap();
            unsafe { std::alloc::dealloc(p, layout) };
        }
    }
}

thread_local! {
    // Segment allocation calls into the allocator, which may need more stack
    // than a nearly full segment has left, so it runs here instead.
    static SCRATCH: ScratchStack = const { ScratchStack(Cell::new(ptr::null_mut())) };
}

fn ensure_scratch_stack() {
    SCRATCH.with(|s| {
        if s.0.get().is_null() {
            let layout = std::alloc::Layout::from_size_align(SCRATCH_STACK_SIZE, STACK_ALIGN).unwrap();
            let p = unsafe { std::alloc::alloc(layout) };
            if p.is_null() {
                std::alloc::handle_alloc_error(layout);
            }
            s.0.set(p);
        }
    })
}

unsafe fn allocate_on_scratch(chain: *mut stacks::SegmentChain, needed: usize) -> usize {
    struct Job {
        chain: *mut stacks::SegmentChain,
        needed: usize,
        sp: usize,
    }

    unsafe extern "C" fn job(p: *mut u8) {
        let j = &mut *(p as *mut Job);
        match (*j.chain).allocate_growth_frame(j.needed, ptr::null(), 0) {
            Ok(sp) => j.sp = sp,
            Err(e) => {
                let mut w = stacks::RawStderr::new();
                let _ = fmt::Write::write_fmt(&mut w, format_args!("effstack: segmented stack growth failed: {e}\n"));
                w.flush();
                libc::abort();
            }
        }
    }

    let mut j = Job { chain, needed, sp: 0 };
    let scratch = SCRATCH.with(|s| s.0.get());
    if scratch.is_null() {
        // Segmented coroutines created on another thread; fall back to the
        // current stack.
        job(&mut j as *mut Job as *mut u8);
    } else {
        ctx::call_on_stack(&mut j as *mut Job as *mut u8, job, scratch as usize + SCRATCH_STACK_SIZE);
    }
    j.sp
}
