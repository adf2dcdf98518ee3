//! Machine-context capture and restore for x86-64 System V.
//!
//! A [`ResumeContext`] holds everything needed to continue a suspended
//! computation: the code address, the stack and frame pointers, the
//! callee-saved general purpose registers and the floating-point control
//! words. Caller-saved state is the compiler's problem because every switch
//! is an ordinary `extern "C"` call.
//!
//! Signal masks are not saved or restored across switches.

use core::arch::naked_asm;

#[cfg(not(all(target_arch = "x86_64", unix)))]
compile_error!("effstack context switching is only implemented for x86-64 unix targets");

/// Number of general purpose callee-saved registers besides `rsp`/`rbp`
/// (`rbx`, `r12`, `r13`, `r14`, `r15`).
pub const CALLEE_SAVED: usize = 5;

/// Required stack-pointer alignment at every switch boundary.
pub const STACK_ALIGN: usize = 16;

/// Smallest stack region [`context_bootstrap`] accepts.
pub const MIN_BOOTSTRAP_STACK: usize = 1024;

/// Saved execution state of a suspended computation.
///
/// The layout is relied upon by the assembly below; do not reorder.
#[repr(C)]
#[derive(Debug, Clone)]
pub struct ResumeContext {
    pub instruction_address: usize,
    pub stack_pointer: usize,
    pub frame_pointer: usize,
    /// `rbx`, `r12`, `r13`, `r14`, `r15` in that order.
    pub callee_saved: [usize; CALLEE_SAVED],
    /// `mxcsr` in the low 32 bits, x87 control word in bits 32..48.
    fp_control: u64,
    live: bool,
}

impl ResumeContext {
    /// An empty context. Switching to it is a contract violation.
    pub const fn empty() -> Self {
        ResumeContext {
            instruction_address: 0,
            stack_pointer: 0,
            frame_pointer: 0,
            callee_saved: [0; CALLEE_SAVED],
            fp_control: 0,
            live: false,
        }
    }

    /// True if this context was produced by a bootstrap or a save and has
    /// not been switched to since.
    pub fn is_live(&self) -> bool {
        self.live
    }
}

impl Default for ResumeContext {
    fn default() -> Self {
        Self::empty()
    }
}

/// Entry point signature for a bootstrapped context.
///
/// The first argument is the word given to [`context_bootstrap`], the second
/// is the payload of the switch that first enters the context. The function
/// must never return: it leaves by switching away for good.
pub type EntryFn = unsafe extern "C" fn(argument: usize, payload: usize) -> !;

/// Builds a context that, when switched to, runs `entry(argument, payload)`
/// on the stack whose highest usable address is `initial_sp`.
///
/// # Safety
///
/// `initial_sp` must be the top of a writable region of at least
/// [`MIN_BOOTSTRAP_STACK`] bytes that outlives the context.
pub unsafe fn context_bootstrap(entry: EntryFn, argument: usize, initial_sp: usize) -> ResumeContext {
    debug_assert!(
        initial_sp.is_multiple_of(STACK_ALIGN),
        "initial stack pointer {initial_sp:#x} is not {STACK_ALIGN}-byte aligned"
    );
    let mut callee_saved = [0usize; CALLEE_SAVED];
    callee_saved[1] = entry as usize;
    callee_saved[2] = argument;
    ResumeContext {
        instruction_address: bootstrap_trampoline as *const () as usize,
        stack_pointer: initial_sp,
        frame_pointer: 0,
        callee_saved,
        fp_control: current_fp_control(),
        live: true,
    }
}

/// Saves the current state into `save_into` and continues at `restore_from`.
///
/// Returns the payload handed to whichever later switch restores
/// `save_into`.
///
/// # Safety
///
/// `restore_from` must be live, and the stack it refers to must still be
/// allocated. Both contexts must stay at a fixed address until the switch
/// back happens.
#[inline(always)]
pub unsafe fn context_switch(
    save_into: *mut ResumeContext,
    restore_from: *mut ResumeContext,
    payload: usize,
) -> usize {
    debug_assert!(
        (*restore_from).live,
        "switching to a context that is not live (already resumed or never saved)"
    );
    (*restore_from).live = false;
    (*save_into).live = true;
    raw_switch(save_into, restore_from, payload)
}

/// Continues at `restore_from` without saving the current state.
///
/// # Safety
///
/// Same requirements as [`context_switch`]. The current stack is abandoned.
#[inline(always)]
pub unsafe fn context_restore(restore_from: *mut ResumeContext, payload: usize) -> ! {
    debug_assert!((*restore_from).live, "restoring a context that is not live");
    (*restore_from).live = false;
    raw_restore(restore_from, payload)
}

/// Runs `f(argument)` with the stack pointer moved to `new_sp`, then returns
/// to the original stack.
///
/// # Safety
///
/// `new_sp` must be 16-byte aligned and top a writable region big enough for
/// `f`. `f` must not unwind.
pub unsafe fn call_on_stack(argument: *mut u8, f: unsafe extern "C" fn(*mut u8), new_sp: usize) {
    debug_assert!(new_sp.is_multiple_of(STACK_ALIGN));
    raw_call_on_stack(argument, f, new_sp)
}

/// Current value of the stack pointer.
#[inline(always)]
pub fn current_stack_pointer() -> usize {
    let sp: usize;
    unsafe {
        core::arch::asm!("mov {}, rsp", out(reg) sp, options(nomem, nostack, preserves_flags));
    }
    sp
}

fn current_fp_control() -> u64 {
    let mut mxcsr: u32 = 0;
    let mut fpucw: u16 = 0;
    unsafe {
        core::arch::asm!(
            "stmxcsr [{m}]",
            "fnstcw [{c}]",
            m = in(reg) &mut mxcsr,
            c = in(reg) &mut fpucw,
            options(nostack, preserves_flags),
        );
    }
    u64::from(mxcsr) | (u64::from(fpucw) << 32)
}

#[unsafe(naked)]
unsafe extern "C" fn raw_switch(
    _save_into: *mut ResumeContext,
    _restore_from: *mut ResumeContext,
    _payload: usize,
) -> usize {
    naked_asm!(
        // Save. The return address becomes the resume point and the stack
        // pointer is recorded as it will be after `ret`.
        "mov r8, [rsp]",
        "lea r9, [rsp + 8]",
        "mov [rdi + 0], r8",
        "mov [rdi + 8], r9",
        "mov [rdi + 16], rbp",
        "mov [rdi + 24], rbx",
        "mov [rdi + 32], r12",
        "mov [rdi + 40], r13",
        "mov [rdi + 48], r14",
        "mov [rdi + 56], r15",
        "stmxcsr [rdi + 64]",
        "fnstcw [rdi + 68]",
        // Restore.
        "mov rbp, [rsi + 16]",
        "mov rbx, [rsi + 24]",
        "mov r12, [rsi + 32]",
        "mov r13, [rsi + 40]",
        "mov r14, [rsi + 48]",
        "mov r15, [rsi + 56]",
        "ldmxcsr [rsi + 64]",
        "fldcw [rsi + 68]",
        "mov rsp, [rsi + 8]",
        "mov rax, rdx",
        "jmp qword ptr [rsi + 0]",
    )
}

#[unsafe(naked)]
unsafe extern "C" fn raw_restore(_restore_from: *mut ResumeContext, _payload: usize) -> ! {
    naked_asm!(
        "mov rbp, [rdi + 16]",
        "mov rbx, [rdi + 24]",
        "mov r12, [rdi + 32]",
        "mov r13, [rdi + 40]",
        "mov r14, [rdi + 48]",
        "mov r15, [rdi + 56]",
        "ldmxcsr [rdi + 64]",
        "fldcw [rdi + 68]",
        "mov rsp, [rdi + 8]",
        "mov rax, rsi",
        "jmp qword ptr [rdi + 0]",
    )
}

// Entered by a jump with rsp == initial_sp (16-byte aligned), r12 = entry,
// r13 = argument and rax = payload of the first switch.
#[unsafe(naked)]
unsafe extern "C" fn bootstrap_trampoline() -> ! {
    naked_asm!(
        "mov rdi, r13",
        "mov rsi, rax",
        "call r12",
        "ud2",
    )
}

#[unsafe(naked)]
unsafe extern "C" fn raw_call_on_stack(_argument: *mut u8, _f: unsafe extern "C" fn(*mut u8), _new_sp: usize) {
    naked_asm!(
        "push rbp",
        "mov rbp, rsp",
        "mov rsp, rdx",
        "call rsi",
        "mov rsp, rbp",
        "pop rbp",
        "ret",
    )
}

/// Helpers for checking that switches preserve callee-saved registers.
pub mod probe {
    /// Registers covered by [`call_with_salted_registers`]:
    /// `rbx`, `rbp`, `r12`, `r13`, `r14`, `r15`.
    pub const SALTED: usize = 6;

    /// Loads `salts` into the callee-saved registers, calls `f(argument)`,
    /// and writes the register values observed after `f` returns into
    /// `observed`.
    ///
    /// # Safety
    ///
    /// `f` must be a valid function that does not unwind.
    pub unsafe fn call_with_salted_registers(
        salts: &[u64; SALTED],
        f: unsafe extern "C" fn(*mut u8),
        argument: *mut u8,
        observed: &mut [u64; SALTED],
    ) {
        raw_salted_call(salts, f, argument, observed)
    }

    #[unsafe(naked)]
    unsafe extern "C" fn raw_salted_call(
        _salts: *const [u64; SALTED],
        _f: unsafe extern "C" fn(*mut u8),
        _argument: *mut u8,
        _observed: *mut [u64; SALTED],
    ) {
        core::arch::naked_asm!(
            "push rbp",
            "push rbx",
            "push r12",
            "push r13",
            "push r14",
            "push r15",
            "push rcx",
            "mov rbx, [rdi + 0]",
            "mov rbp, [rdi + 8]",
            "mov r12, [rdi + 16]",
            "mov r13, [rdi + 24]",
            "mov r14, [rdi + 32]",
            "mov r15, [rdi + 40]",
            "mov rdi, rdx",
            "call rsi",
            "pop rcx",
            "mov [rcx + 0], rbx",
            "mov [rcx + 8], rbp",
            "mov [rcx + 16], r12",
            "mov [rcx + 24], r13",
            "mov [rcx + 32], r14",
            "mov [rcx + 40], r15",
            "pop r15",
            "pop r14",
            "pop r13",
            "pop r12",
            "pop rbx",
            "pop rbp",
            "ret",
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::alloc::{alloc, dealloc, Layout};

    struct TestStack {
        base: *mut u8,
        layout: Layout,
    }

    impl TestStack {
        fn new(size: usize) -> Self {
            let layout = Layout::from_size_align(size, 16).unwrap();
            let base = unsafe { alloc(layout) };
            assert!(!base.is_null());
            TestStack { base, layout }
        }

        fn top(&self) -> usize {
            self.base as usize + self.layout.size()
        }
    }

    impl Drop for TestStack {
        fn drop(&mut self) {
            unsafe { dealloc(self.base, self.layout) }
        }
    }

    struct PingPong {
        host: ResumeContext,
        guest: ResumeContext,
        observed_argument: usize,
        observed_local: usize,
        received: Vec<usize>,
    }

    unsafe extern "C" fn ping_pong_entry(argument: usize, payload: usize) -> ! {
        let state = &mut *(argument as *mut PingPong);
        let local = 0u8;
        state.observed_argument = argument;
        state.observed_local = &local as *const u8 as usize;
        let mut incoming = payload;
        loop {
            state.received.push(incoming);
            incoming = context_switch(&mut state.guest, &mut state.host, incoming + 2);
        }
    }

    #[test]
    fn bootstrap_runs_entry_on_the_new_stack() {
        let stack = TestStack::new(16 * 1024);
        let mut state = Box::new(PingPong {
            host: ResumeContext::empty(),
            guest: ResumeContext::empty(),
            observed_argument: 0,
            observed_local: 0,
            received: Vec::new(),
        });
        let arg = &mut *state as *mut PingPong as usize;
        unsafe {
            state.guest = context_bootstrap(ping_pong_entry, arg, stack.top());
            let reply = context_switch(&mut state.host, &mut state.guest, 7);
            assert_eq!(reply, 9);
            let reply = context_switch(&mut state.host, &mut state.guest, 40);
            assert_eq!(reply, 42);
        }
        assert_eq!(state.observed_argument, arg);
        assert!(state.observed_local < stack.top());
        assert!(state.observed_local >= stack.base as usize);
        assert_eq!(state.received, vec![7, 40]);
    }

    #[test]
    fn saved_stack_pointer_is_stable_across_round_trips() {
        let stack = TestStack::new(16 * 1024);
        let mut state = Box::new(PingPong {
            host: ResumeContext::empty(),
            guest: ResumeContext::empty(),
            observed_argument: 0,
            observed_local: 0,
            received: Vec::with_capacity(2_000),
        });
        let arg = &mut *state as *mut PingPong as usize;
        let mut first_sp = None;
        unsafe {
            state.guest = context_bootstrap(ping_pong_entry, arg, stack.top());
            for i in 0..1_000 {
                let reply = context_switch(&mut state.host, &mut state.guest, i);
                assert_eq!(reply, i + 2);
                assert_eq!(state.guest.stack_pointer % STACK_ALIGN, 0);
                let sp = *first_sp.get_or_insert(state.guest.stack_pointer);
                assert_eq!(sp, state.guest.stack_pointer);
            }
        }
    }

    #[test]
    #[cfg(debug_assertions)]
    #[should_panic(expected = "not 16-byte aligned")]
    fn misaligned_bootstrap_is_rejected() {
        let stack = TestStack::new(4096);
        let _ = unsafe { context_bootstrap(ping_pong_entry, 0, stack.top() - 8) };
    }

    #[test]
    #[cfg(debug_assertions)]
    #[should_panic(expected = "not live")]
    fn switching_to_a_consumed_context_is_rejected() {
        let mut host = ResumeContext::empty();
        let mut dead = ResumeContext::empty();
        unsafe {
            context_switch(&mut host, &mut dead, 0);
        }
    }

    unsafe extern "C" fn add_one(arg: *mut u8) {
        let v = &mut *(arg as *mut u64);
        *v += 1;
    }

    #[test]
    fn call_on_stack_uses_the_given_stack() {
        let stack = TestStack::new(8 * 1024);
        let mut value = 41u64;
        unsafe {
            call_on_stack(&mut value as *mut u64 as *mut u8, add_one, stack.top());
        }
        assert_eq!(value, 42);
    }

    #[test]
    fn salted_registers_survive_a_plain_call() {
        let salts = [1, 2, 3, 4, 5, 6];
        let mut observed = [0; probe::SALTED];
        let mut value = 0u64;
        unsafe {
            probe::call_with_salted_registers(&salts, add_one, &mut value as *mut u64 as *mut u8, &mut observed);
        }
        assert_eq!(salts, observed);
        assert_eq!(value, 1);
    }
}
