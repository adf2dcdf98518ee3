//! The five benchmark workloads and the median-of-repeats harness.

use std::collections::BTreeMap;
use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use effstack::stacks::{StackStrategy, StrategyKind, SYSCALL_SEGMENT_SIZE};
use effstack::{
    current_coroutine, declare_effects, grow_stack, perform, yield_to, Coroutine, CoroutineError, EffectSet, StackError,
};
use thiserror::Error;

use crate::ad_demo;

/// Timed samples per measurement unless overridden.
pub const DEFAULT_REPEATS: usize = 31;

/// Smallest accepted repeat count.
pub const MIN_REPEATS: usize = 5;

/// Untimed runs before the first sample.
pub const WARMUPS: usize = 3;

pub const DEFAULT_SWITCH_FRAME_SIZE: usize = 150 * 1024;
pub const DEFAULT_COMPLEX_ITERS: usize = 10_000;
pub const DEFAULT_EXPAND_DEPTH: usize = 100;
pub const DEFAULT_MT_THREADS: usize = 4;
pub const DEFAULT_MT_ITERS: usize = 10_000;

/// `run_async` calls per thread in the multi-threaded benchmark.
pub const MT_RUNS_PER_THREAD: usize = 1000;

/// Native stack of each multi-threaded worker. The handler recursion of
/// `run_async` is `iterations` levels deep on this stack.
const MT_THREAD_STACK: usize = 256 * 1024 * 1024;

const EXPAND_FRAME_BYTES: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BenchId {
    Switch,
    Complex,
    Expand,
    Mt,
    Ad,
}

impl BenchId {
    pub const ALL: [BenchId; 5] = [BenchId::Switch, BenchId::Complex, BenchId::Expand, BenchId::Mt, BenchId::Ad];

    pub fn name(self) -> &'static str {
        match self {
            BenchId::Switch => "switch",
            BenchId::Complex => "complex",
            BenchId::Expand => "expand",
            BenchId::Mt => "mt",
            BenchId::Ad => "ad",
        }
    }
}

impl fmt::Display for BenchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BenchId::ALL.into_iter().find(|b| b.name() == s).ok_or_else(|| format!("unknown benchmark `{s}`"))
    }
}

/// Deterministic result of a benchmark run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputValue {
    Int(i64),
    Real(f64),
}

impl fmt::Display for OutputValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutputValue::Int(v) => write!(f, "{v}"),
            // Shortest representation that round-trips, so equal outputs
            // print identically and parse back bit-exactly.
            OutputValue::Real(v) => write!(f, "{v:?}"),
        }
    }
}

impl FromStr for OutputValue {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(v) = s.parse::<i64>() {
            return Ok(OutputValue::Int(v));
        }
        s.parse::<f64>().map(OutputValue::Real).map_err(|_| format!("bad output value `{s}`"))
    }
}

/// One measurement row.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub benchmark: BenchId,
    pub strategy: StrategyKind,
    pub params: BTreeMap<String, u64>,
    pub repeats: usize,
    pub median_ns: u64,
    pub output_value: Option<OutputValue>,
    /// Every timed sample, in nanoseconds. Not part of the CSV output.
    pub samples: Vec<u64>,
}

impl BenchRecord {
    fn new(benchmark: BenchId, strategy: StrategyKind, params: &[(&str, usize)], samples: Vec<u64>) -> Self {
        BenchRecord {
            benchmark,
            strategy,
            params: params.iter().map(|&(k, v)| (k.to_owned(), v as u64)).collect(),
            repeats: samples.len(),
            median_ns: median(&samples),
            output_value: None,
            samples,
        }
    }

    /// `key=value` pairs joined by `;`, keys in sorted order.
    pub fn params_field(&self) -> String {
        self.params.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
    }

    pub fn parse_params(field: &str) -> Result<BTreeMap<String, u64>, String> {
        field
            .split(';')
            .filter(|p| !p.is_empty())
            .map(|pair| {
                let (k, v) = pair.split_once('=').ok_or_else(|| format!("bad parameter `{pair}`"))?;
                let v = v.parse().map_err(|_| format!("bad parameter value in `{pair}`"))?;
                Ok((k.to_owned(), v))
            })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{0} is not run under the fixed strategy: a fixed frame cannot grow")]
    Skipped(BenchId),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("repeats must be at least {MIN_REPEATS}, got {0}")]
    TooFewRepeats(usize),
    #[error(transparent)]
    Coroutine(#[from] CoroutineError),
    #[error(transparent)]
    Stack(#[from] StackError),
}

/// Median of `samples`; the mean of the middle pair for even counts.
pub fn median(samples: &[u64]) -> u64 {
    if samples.is_empty() {
        return 0;
    }
    let mut v = samples.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// Runs `f` `WARMUPS` times untimed, then `repeats` times timed.
fn sample<F>(repeats: usize, mut f: F) -> Result<Vec<u64>, BenchError>
where
    F: FnMut() -> Result<u64, BenchError>,
{
    if repeats < MIN_REPEATS {
        return Err(BenchError::TooFewRepeats(repeats));
    }
    for _ in 0..WARMUPS {
        f()?;
    }
    (0..repeats).map(|_| f()).collect()
}

fn elapsed_ns(start: Instant) -> u64 {
    start.elapsed().as_nanos() as u64
}

fn verify(cond: bool, msg: impl FnOnce() -> String) -> Result<(), BenchError> {
    if cond {
        Ok(())
    } else {
        Err(BenchError::Verify(msg()))
    }
}

/// Cold-start switch latency: a fresh coroutine whose body yields once,
/// timing the resume that starts it and the resume that finishes it.
pub fn bench_switch(
    strategy: &Arc<dyn StackStrategy>,
    frame_size: usize,
    repeats: usize,
) -> Result<BenchRecord, BenchError> {
    let samples = sample(repeats, || {
        let mut k = Coroutine::with_strategy(strategy.clone(), Some(frame_size), |_| {
            let me = current_coroutine().expect("switch body runs inside a coroutine");
            yield_to(me, 0, 0).expect("yield to self failed");
            0
        })?;
        let start = Instant::now();
        let first = k.resume_handling_all(0)?.is_return();
        let second = k.resume_handling_all(0)?.is_return();
        let t = elapsed_ns(start);
        verify(!first && second, || "switch body did not yield exactly once".into())?;
        Ok(t)
    })?;
    Ok(BenchRecord::new(BenchId::Switch, strategy.kind(), &[("frame_size", frame_size)], samples))
}

declare_effects! {
    pub effect ComplexYield = 0 {} -> ();
}

fn extra_work(global: &Mutex<i64>) {
    let mut sum = 0i64;
    for i in 0..100 {
        sum += black_box(i);
    }
    *global.lock().unwrap() += sum;
}

/// Effect-heavy loop: the coroutine performs `iterations` effects, each
/// answered after a short critical section.
pub fn bench_complex(
    strategy: &Arc<dyn StackStrategy>,
    iterations: usize,
    repeats: usize,
) -> Result<BenchRecord, BenchError> {
    let handles = EffectSet::of::<ComplexYield>();
    let mut returned = 0;
    let samples = sample(repeats, || {
        let global = Mutex::new(0i64);
        let mut k = Coroutine::with_strategy(strategy.clone(), None, move |n| {
            for i in 0..n {
                black_box(i * 2);
                perform(ComplexYield {});
            }
            n
        })?;
        let start = Instant::now();
        let mut req = k.resume(iterations, handles)?;
        while !req.is_return() {
            extra_work(&global);
            req = k.resume(0, handles)?;
        }
        let t = elapsed_ns(start);
        returned = req.return_value();
        let total = *global.lock().unwrap();
        verify(returned == iterations, || format!("coroutine returned {returned}, expected {iterations}"))?;
        verify(total == iterations as i64 * 4950, || format!("accumulator is {total}, expected {}", iterations * 4950))?;
        Ok(t)
    })?;
    let mut rec = BenchRecord::new(BenchId::Complex, strategy.kind(), &[("iters", iterations)], samples);
    rec.output_value = Some(OutputValue::Int(returned as i64));
    Ok(rec)
}

declare_effects! {
    pub effect FillStack = 0 {} -> ();
}

#[inline(never)]
fn fill_stack_rec(depth: usize, max_depth: usize) {
    // Room for this level's buffer and for the next level's frame, which
    // is allocated before that level reaches its own check.
    grow_stack(2 * EXPAND_FRAME_BYTES + 512, || {
        let mut buffer = [0u8; EXPAND_FRAME_BYTES];
        black_box(&mut buffer);
        if depth < max_depth {
            fill_stack_rec(depth + 1, max_depth);
        } else {
            grow_stack(SYSCALL_SEGMENT_SIZE, || perform(FillStack {}));
        }
        black_box(&buffer);
    })
}

/// Stack expansion: recursion with a 1 KiB local per level down to
/// `max_depth`, then one effect. Times the resume that runs the descent.
pub fn bench_expand(
    strategy: &Arc<dyn StackStrategy>,
    max_depth: usize,
    repeats: usize,
) -> Result<BenchRecord, BenchError> {
    if strategy.kind() == StrategyKind::Fixed {
        return Err(BenchError::Skipped(BenchId::Expand));
    }
    let samples = sample(repeats, || {
        let mut k = Coroutine::with_strategy(strategy.clone(), None, |d| {
            fill_stack_rec(0, d);
            0
        })?;
        let start = Instant::now();
        let reached = k.resume_handling_all(max_depth)?.is::<FillStack>();
        let t = elapsed_ns(start);
        verify(reached, || "expansion did not reach the bottom".into())?;
        if strategy.kind() == StrategyKind::OvercommitUser {
            let committed = k.committed_bytes();
            let lower = max_depth * EXPAND_FRAME_BYTES;
            verify(committed >= lower, || format!("committed {committed} bytes, below the {lower} touched"))?;
        }
        verify(k.resume_handling_all(0)?.is_return(), || "expansion did not finish".into())?;
        Ok(t)
    })?;
    Ok(BenchRecord::new(BenchId::Expand, strategy.kind(), &[("depth", max_depth)], samples))
}

declare_effects! {
    pub effect AsyncOp = 0 { x: i64 } -> ();
}

const ASYNC_MIX: i64 = 0xABCDEF;

pub fn concurrent_operation(x: i64, y: i64) -> i64 {
    x.wrapping_add(y) ^ ASYNC_MIX
}

fn handle_async_op_rec(k: &mut Coroutine) -> i64 {
    let req = k.resume(0, EffectSet::of::<AsyncOp>()).expect("async coroutine could not be resumed");
    if req.is_return() {
        return req.return_value() as i64;
    }
    let x = req.payload::<AsyncOp>().expect("unexpected effect in async handler").x;
    concurrent_operation(x, handle_async_op_rec(k))
}

/// Drives a coroutine that performs `async_op(i)` for `i = iterations..1`
/// and returns `thread_id`, folding the results with
/// [`concurrent_operation`].
pub fn run_async(strategy: &Arc<dyn StackStrategy>, iterations: i64, thread_id: i64) -> Result<i64, BenchError> {
    let mut k = Coroutine::with_strategy(strategy.clone(), None, move |_| {
        let mut i = iterations;
        while i > 0 {
            perform(AsyncOp { x: i });
            i -= 1;
        }
        thread_id as usize
    })?;
    Ok(handle_async_op_rec(&mut k))
}

/// The value `run_async` must produce, computed without coroutines.
pub fn run_async_oracle(iterations: i64, thread_id: i64) -> i64 {
    (1..=iterations).fold(thread_id, |acc, i| concurrent_operation(i, acc))
}

/// Multi-threaded asynchronous operations: `num_threads` workers, each
/// running [`MT_RUNS_PER_THREAD`] `run_async` calls. The median is taken
/// over the individual `run_async` durations of all threads.
pub fn bench_mt(
    strategy: &Arc<dyn StackStrategy>,
    num_threads: usize,
    iterations: usize,
) -> Result<BenchRecord, BenchError> {
    let workers: Vec<_> = (0..num_threads)
        .map(|t| {
            let strategy = strategy.clone();
            std::thread::Builder::new()
                .name(format!("mt-{}", t + 1))
                .stack_size(MT_THREAD_STACK)
                .spawn(move || -> Result<(i64, Vec<u64>), BenchError> {
                    let thread_id = t as i64 + 1;
                    let mut local = 0i64;
                    let mut samples = Vec::with_capacity(MT_RUNS_PER_THREAD);
                    for _ in 0..MT_RUNS_PER_THREAD {
                        let start = Instant::now();
                        local = local.wrapping_add(run_async(&strategy, iterations as i64, thread_id)?);
                        samples.push(elapsed_ns(start));
                    }
                    Ok((local, samples))
                })
                .expect("spawning a benchmark thread failed")
        })
        .collect();

    let mut total = 0i64;
    let mut samples = Vec::new();
    for w in workers {
        let (local, s) = w.join().unwrap_or_else(|p| std::panic::resume_unwind(p))?;
        total = total.wrapping_add(local);
        samples.extend(s);
    }
    let expected = (1..=num_threads as i64)
        .map(|t| run_async_oracle(iterations as i64, t).wrapping_mul(MT_RUNS_PER_THREAD as i64))
        .fold(0i64, i64::wrapping_add);
    verify(total == expected, || format!("aggregated result {total}, expected {expected}"))?;

    let mut rec =
        BenchRecord::new(BenchId::Mt, strategy.kind(), &[("iters", iterations), ("threads", num_threads)], samples);
    rec.output_value = Some(OutputValue::Int(total));
    Ok(rec)
}

/// Reverse-mode AD at the default point; the output is the derivative.
pub fn bench_ad(
    strategy: &Arc<dyn StackStrategy>,
    iters: usize,
    frame_size: Option<usize>,
    repeats: usize,
) -> Result<BenchRecord, BenchError> {
    let mut derivative = None;
    let samples = sample(repeats, || {
        let start = Instant::now();
        let out = ad_demo::run_ad(strategy, iters, ad_demo::DEFAULT_X, frame_size)?;
        let t = elapsed_ns(start);
        if let Some(prev) = derivative {
            verify(prev == out.derivative, || format!("derivative changed between runs: {prev} vs {}", out.derivative))?;
        }
        derivative = Some(out.derivative);
        Ok(t)
    })?;
    let derivative = derivative.unwrap_or(f64::NAN);
    let expected = ad_demo::closed_form_derivative(iters, ad_demo::DEFAULT_X);
    verify((derivative - expected).abs() <= 1e-4 * expected.abs().max(1.0), || {
        format!("derivative {derivative}, expected {expected}")
    })?;
    let mut params = vec![("iters", iters)];
    if let Some(f) = frame_size {
        params.push(("frame_size", f));
    }
    let mut rec = BenchRecord::new(BenchId::Ad, strategy.kind(), &params, samples);
    rec.output_value = Some(OutputValue::Real(derivative));
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_counts() {
        assert_eq!(median(&[5, 1, 3]), 3);
        assert_eq!(median(&[4, 1, 3, 2]), 2);
        assert_eq!(median(&[]), 0);
    }

    #[test]
    fn repeat_count_is_exact_and_bounded_below() {
        let s = StrategyKind::Fixed.build();
        let rec = bench_switch(&s, DEFAULT_SWITCH_FRAME_SIZE, 101).unwrap();
        assert_eq!(rec.samples.len(), 101);
        assert_eq!(rec.repeats, 101);
        assert_eq!(rec.output_value, None);
        assert!(matches!(bench_switch(&s, DEFAULT_SWITCH_FRAME_SIZE, 4), Err(BenchError::TooFewRepeats(4))));
    }

    #[test]
    fn async_base_cases() {
        let s = StrategyKind::Fixed.build();
        assert_eq!(run_async(&s, 0, 3).unwrap(), 3);
        assert_eq!(run_async(&s, 1, 1).unwrap(), 0xABCDED);
        assert_eq!(run_async(&s, 200, 2).unwrap(), run_async_oracle(200, 2));
    }

    #[test]
    fn mt_with_zero_iterations_sums_thread_ids() {
        let rec = bench_mt(&StrategyKind::Fixed.build(), 3, 0).unwrap();
        assert_eq!(rec.output_value, Some(OutputValue::Int(1000 * (1 + 2 + 3))));
        assert_eq!(rec.samples.len(), 3 * MT_RUNS_PER_THREAD);
    }

    #[test]
    fn expand_is_skipped_under_fixed_and_trivial_at_depth_zero() {
        assert!(matches!(
            bench_expand(&StrategyKind::Fixed.build(), 100, 5),
            Err(BenchError::Skipped(BenchId::Expand))
        ));
        for kind in [StrategyKind::Segmented, StrategyKind::OvercommitKernel, StrategyKind::OvercommitUser] {
            bench_expand(&kind.build(), 0, 5).unwrap();
        }
    }

    #[test]
    fn complex_returns_the_iteration_count() {
        for kind in StrategyKind::ALL {
            let rec = bench_complex(&kind.build(), 50, 5).unwrap();
            assert_eq!(rec.output_value, Some(OutputValue::Int(50)));
        }
    }

    #[test]
    fn params_round_trip() {
        let rec = bench_mt(&StrategyKind::Fixed.build(), 1, 0).unwrap();
        assert_eq!(rec.params_field(), "iters=0;threads=1");
        assert_eq!(BenchRecord::parse_params(&rec.params_field()).unwrap(), rec.params);
    }

    #[test]
    fn output_values_print_round_trip() {
        for v in [OutputValue::Int(216540330000), OutputValue::Real(-3.9999999999999996), OutputValue::Real(-4.0)] {
            assert_eq!(v.to_string().parse::<OutputValue>().unwrap(), v);
        }
    }
}
