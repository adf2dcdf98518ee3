//! Stackful coroutines with effect handlers, running on one of four
//! interchangeable stack-management strategies.
//!
//! ```
//! use effstack::{declare_effects, Coroutine, EffectSet};
//!
//! declare_effects! {
//!     pub effect ReadFile = 0 { filename: &'static str } -> *const String;
//! }
//!
//! let mut k = Coroutine::from_fn(|_| {
//!     let text = effstack::perform(ReadFile { filename: "example.txt" });
//!     unsafe { (&*text).len() }
//! })
//! .unwrap();
//!
//! let contents = String::from("file contents");
//! let req = k.resume(0, EffectSet::of::<ReadFile>()).unwrap();
//! assert_eq!(req.payload::<ReadFile>().unwrap().filename, "example.txt");
//! let req = k.resume_with::<ReadFile>(&contents, EffectSet::of::<ReadFile>()).unwrap();
//! assert!(req.is_return());
//! assert_eq!(req.return_value(), 13);
//! ```

pub mod ctx;
pub mod effects;
pub mod stacks;

pub use effects::{
    current_coroutine, exit, grow_stack, locate_handler, perform, perform_raw, set_default_handler, throw,
    throw_raw, yield_to, Coroutine, CoroutineError, CoroutineRef, CoroutineState, Effect, EffectId, EffectSet,
    Handler, Request, WordRepr, RETURN,
};
pub use stacks::{default_strategy, StackError, StackFrame, StackStrategy, StrategyKind};

/// A machine word, the unit passed across every switch.
pub type Word = usize;
