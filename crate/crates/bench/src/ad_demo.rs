//! Reverse-mode automatic differentiation built from two layers of effect
//! handlers.
//!
//! The `example` coroutine computes `1 + sum_{i=1..iters} (1 - x)^i` using
//! reverse-layer operations (ids 3-5). Those are handled by [`handle`],
//! which recurses once per operation and computes every primal value through
//! forward-layer operations (ids 0-2). The forward layer is answered by
//! [`evaluate`] on the root stack. Each level of `handle` keeps a fresh
//! adjoint on its own stack frame, so the recursion depth grows with the
//! number of operations and makes the program a stack-growth stress test.

use std::cell::Cell;
use std::rc::Rc;
use std::sync::Arc;

use effstack::stacks::{StackStrategy, SYSCALL_SEGMENT_SIZE};
use effstack::{declare_effects, grow_stack, perform, Coroutine, CoroutineError, Effect, EffectSet, WordRepr};

/// The point at which the derivative is reported.
pub const DEFAULT_X: f64 = 0.5;

/// Iterations used by the demo binary and the `ad` benchmark.
pub const DEFAULT_ITERS: usize = 100;

/// Stack each level of [`handle`] reserves before it resumes the child and
/// performs forward effects.
const HANDLE_STACK_RESERVE: usize = SYSCALL_SEGMENT_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op1 {
    Negate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op2 {
    Add,
    Multiply,
}

/// A value paired with the adjoint it accumulates into.
#[derive(Debug, Clone, Copy)]
pub struct Prop {
    pub v: f64,
    pub dv: *mut f64,
}

declare_effects! {
    pub effect EAp0 = 0 { value: f64 } -> *const f64;
    pub effect EAp1 = 1 { op: Op1, arg1: f64 } -> *const f64;
    pub effect EAp2 = 2 { op: Op2, arg1: f64, arg2: f64 } -> *const f64;
    pub effect RAp0 = 3 { value: f64 } -> *const Prop;
    pub effect RAp1 = 4 { op: Op1, arg1: Prop } -> *const Prop;
    pub effect RAp2 = 5 { op: Op2, arg1: Prop, arg2: Prop } -> *const Prop;
}

pub const E_SMOOTH: EffectSet = EffectSet::of::<EAp0>().with(EAp1::ID).with(EAp2::ID);
pub const R_SMOOTH: EffectSet = EffectSet::of::<RAp0>().with(RAp1::ID).with(RAp2::ID);

// Forward layer. The reply points at the evaluator's `value`, valid until
// the evaluator resumes again, so it is read immediately.

pub fn e_c(x: f64) -> f64 {
    unsafe { *perform(EAp0 { value: x }) }
}

pub fn e_n(x: f64) -> f64 {
    unsafe { *perform(EAp1 { op: Op1::Negate, arg1: x }) }
}

pub fn e_a(x: f64, y: f64) -> f64 {
    unsafe { *perform(EAp2 { op: Op2::Add, arg1: x, arg2: y }) }
}

pub fn e_m(x: f64, y: f64) -> f64 {
    unsafe { *perform(EAp2 { op: Op2::Multiply, arg1: x, arg2: y }) }
}

// Reverse layer.

pub fn r_c(x: f64) -> Prop {
    unsafe { *perform(RAp0 { value: x }) }
}

pub fn r_n(x: Prop) -> Prop {
    unsafe { *perform(RAp1 { op: Op1::Negate, arg1: x }) }
}

pub fn r_a(x: Prop, y: Prop) -> Prop {
    unsafe { *perform(RAp2 { op: Op2::Add, arg1: x, arg2: y }) }
}

pub fn r_m(x: Prop, y: Prop) -> Prop {
    unsafe { *perform(RAp2 { op: Op2::Multiply, arg1: x, arg2: y }) }
}

/// State shared by the pieces of one run: the input, the result and
/// instrumentation counters.
#[derive(Debug)]
pub struct AdRun {
    x_value: f64,
    dx: Box<Cell<f64>>,
    result: Cell<Option<Prop>>,
    forward_effects: Cell<usize>,
    reverse_ops: Cell<usize>,
    depth: Cell<usize>,
    max_depth: Cell<usize>,
}

impl AdRun {
    pub fn new(x: f64) -> Rc<Self> {
        Rc::new(AdRun {
            x_value: x,
            dx: Box::new(Cell::new(0.0)),
            result: Cell::new(None),
            forward_effects: Cell::new(0),
            reverse_ops: Cell::new(0),
            depth: Cell::new(0),
            max_depth: Cell::new(0),
        })
    }

    /// The input as a reverse-layer value, accumulating into `dx`.
    pub fn x(&self) -> Prop {
        Prop { v: self.x_value, dv: self.dx.as_ptr() }
    }

    pub fn derivative(&self) -> f64 {
        self.dx.get()
    }
}

/// What one AD run produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdOutcome {
    /// Forward value of the accumulation.
    pub value: f64,
    /// Adjoint of x.
    pub derivative: f64,
    /// Forward-layer effects answered by the evaluator.
    pub forward_effects: usize,
    /// Reverse-layer operations handled by `handle`.
    pub reverse_ops: usize,
    /// Deepest nesting of `handle`.
    pub max_depth: usize,
}

/// The differentiated program: stores `1 + sum (1 - x)^i` in the run result.
pub fn example(run: &AdRun, iters: usize) {
    let x = run.x();
    let mut acc = r_c(1.0);
    let mut prev = r_c(1.0);
    for _ in 0..iters {
        prev = r_m(prev, r_n(r_a(x, r_c(-1.0))));
        acc = r_a(acc, prev);
    }
    run.result.set(Some(acc));
}

/// Resumes `child` with `response` and handles its next reverse operation,
/// recursing until the child finishes, then applies the chain rule on the
/// way back out.
pub fn handle(run: &AdRun, child: &mut Coroutine, response: Option<&Prop>) {
    grow_stack(HANDLE_STACK_RESERVE, || handle_level(run, child, response))
}

#[inline(never)]
fn handle_level(run: &AdRun, child: &mut Coroutine, response: Option<&Prop>) {
    let reply = response.map_or(std::ptr::null(), |p| p as *const Prop);
    let depth = run.depth.get() + 1;
    run.depth.set(depth);
    run.max_depth.set(run.max_depth.get().max(depth));

    let req = child.resume(reply.to_word(), R_SMOOTH).expect("reverse child could not be resumed");
    if req.is_return() {
        let result = run.result.get().expect("example finished without a result");
        unsafe { *result.dv = 1.0 };
        run.depth.set(depth - 1);
        return;
    }
    run.reverse_ops.set(run.reverse_ops.get() + 1);

    if let Some(p) = req.payload::<RAp0>() {
        let value = p.value;
        let v = e_c(value);
        let mut dv = 0.0;
        let r = Prop { v, dv: &mut dv };
        handle(run, child, Some(&r));
    } else if let Some(p) = req.payload::<RAp1>() {
        let (op, arg1) = (p.op, p.arg1);
        let v = match op {
            Op1::Negate => e_n(arg1.v),
        };
        let mut dv = 0.0;
        let r = Prop { v, dv: &mut dv };
        handle(run, child, Some(&r));
        let dx = arg1.dv;
        unsafe {
            match op {
                Op1::Negate => *dx = e_a(*dx, e_n(dv)),
            }
        }
    } else if let Some(p) = req.payload::<RAp2>() {
        let (op, arg1, arg2) = (p.op, p.arg1, p.arg2);
        let v = match op {
            Op2::Add => e_a(arg1.v, arg2.v),
            Op2::Multiply => e_m(arg1.v, arg2.v),
        };
        let mut dv = 0.0;
        let r = Prop { v, dv: &mut dv };
        handle(run, child, Some(&r));
        let (x, y) = (arg1.v, arg2.v);
        let (dx, dy) = (arg1.dv, arg2.dv);
        unsafe {
            match op {
                Op2::Add => {
                    *dx = e_a(*dx, dv);
                    *dy = e_a(*dy, dv);
                }
                Op2::Multiply => {
                    *dx = e_a(*dx, e_m(y, dv));
                    *dy = e_a(*dy, e_m(x, dv));
                }
            }
        }
    } else {
        panic!("unexpected effect {} reached the reverse handler", req.effect());
    }
    run.depth.set(depth - 1);
}

/// Answers forward-layer effects until `k` returns; yields the return value.
pub fn evaluate(run: &AdRun, k: &mut Coroutine) -> Result<usize, CoroutineError> {
    let mut value = 0.0f64;
    let reply = &mut value as *mut f64 as *const f64;
    let mut req = k.resume(0, E_SMOOTH)?;
    loop {
        if req.is_return() {
            return Ok(req.return_value());
        }
        run.forward_effects.set(run.forward_effects.get() + 1);
        let v = if let Some(p) = req.payload::<EAp0>() {
            p.value
        } else if let Some(p) = req.payload::<EAp1>() {
            match p.op {
                Op1::Negate => -p.arg1,
            }
        } else if let Some(p) = req.payload::<EAp2>() {
            match p.op {
                Op2::Add => p.arg1 + p.arg2,
                Op2::Multiply => p.arg1 * p.arg2,
            }
        } else {
            panic!("unexpected effect {} reached the evaluator", req.effect());
        };
        unsafe { *(reply as *mut f64) = v };
        req = k.resume(reply.to_word(), E_SMOOTH)?;
    }
}

/// Runs the whole program at `x` with every coroutine on `strategy`.
///
/// `frame_size` applies to both coroutines; `None` uses the strategy
/// default.
pub fn run_ad(
    strategy: &Arc<dyn StackStrategy>,
    iters: usize,
    x: f64,
    frame_size: Option<usize>,
) -> Result<AdOutcome, CoroutineError> {
    let run = AdRun::new(x);
    let (r, s) = (run.clone(), strategy.clone());
    let mut reverse = Coroutine::with_strategy(strategy.clone(), frame_size, move |_| {
        let child_run = r.clone();
        let mut child = Coroutine::with_strategy(s, frame_size, move |_| {
            example(&child_run, iters);
            0
        })
        .expect("creating the example coroutine failed");
        handle(&r, &mut child, None);
        0
    })?;
    evaluate(&run, &mut reverse)?;
    let value = run.result.get().map_or(f64::NAN, |p| p.v);
    Ok(AdOutcome {
        value,
        derivative: run.derivative(),
        forward_effects: run.forward_effects.get(),
        reverse_ops: run.reverse_ops.get(),
        max_depth: run.max_depth.get(),
    })
}

/// Closed-form forward value `1 + sum_{i=1..iters} (1 - x)^i`.
pub fn closed_form_value(iters: usize, x: f64) -> f64 {
    let mut acc = 1.0;
    let mut term = 1.0;
    for _ in 0..iters {
        term *= 1.0 - x;
        acc += term;
    }
    acc
}

/// Term-wise derivative `sum_{i=1..iters} -i (1 - x)^(i-1)`.
pub fn closed_form_derivative(iters: usize, x: f64) -> f64 {
    let mut sum = 0.0;
    let mut pow = 1.0;
    for i in 1..=iters {
        sum -= i as f64 * pow;
        pow *= 1.0 - x;
    }
    sum
}
