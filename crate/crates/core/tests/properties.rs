use std::cell::RefCell;
use std::rc::Rc;

use effstack::stacks::StrategyKind;
use effstack::{
    current_coroutine, declare_effects, exit, locate_handler, perform, yield_to, Coroutine, CoroutineError,
    CoroutineRef, CoroutineState, EffectSet, Handler, Word,
};
use proptest::prelude::*;

const SMALL_FRAME: usize = 32 * 1024;

fn lookup_oracle(sets: &[u64], effect: u64) -> Option<usize> {
    (0..sets.len()).rev().find(|&i| sets[i] & (1 << effect) != 0)
}

struct Nest {
    sets: Vec<u64>,
    refs: RefCell<Vec<CoroutineRef>>,
    found: RefCell<Vec<Option<usize>>>,
}

fn nest_level(n: Rc<Nest>, level: usize, kind: StrategyKind) -> Word {
    n.refs.borrow_mut().push(current_coroutine().unwrap());
    if level + 1 < n.sets.len() {
        let n2 = n.clone();
        let mut child =
            Coroutine::with_strategy(kind.build(), Some(SMALL_FRAME), move |_| nest_level(n2, level + 1, kind)).unwrap();
        let req = child.resume(0, EffectSet::from_bits(n.sets[level + 1])).unwrap();
        assert!(req.is_return());
        return req.return_value();
    }
    let refs = n.refs.borrow().clone();
    let found = (0..64)
        .map(|e| match locate_handler(e) {
            Handler::Default => None,
            Handler::Coroutine(c) => Some(refs.iter().position(|r| *r == c).expect("handler is on the chain")),
        })
        .collect();
    *n.found.borrow_mut() = found;
    level
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn locate_handler_agrees_with_a_chain_walk(sets in prop::collection::vec(any::<u64>().prop_map(|b| b & (b >> 3)), 1..=8), pick in 0usize..4) {
        let kind = StrategyKind::ALL[pick];
        let n = Rc::new(Nest { sets: sets.clone(), refs: RefCell::new(Vec::new()), found: RefCell::new(Vec::new()) });
        let n2 = n.clone();
        let mut root = Coroutine::with_strategy(kind.build(), Some(SMALL_FRAME), move |_| nest_level(n2, 0, kind)).unwrap();
        let req = root.resume(0, EffectSet::from_bits(sets[0])).unwrap();
        prop_assert_eq!(req.return_value(), sets.len() - 1);
        let found = n.found.borrow();
        for e in 0..64u64 {
            prop_assert_eq!(found[e as usize], lookup_oracle(&sets, e), "effect {}", e);
        }
    }
}

declare_effects! {
    effect Echo = 7 { word: usize } -> usize;
}

proptest! {
    #[test]
    fn replies_arrive_unchanged(words in prop::collection::vec(any::<usize>(), 1..64), pick in 0usize..4) {
        let n = words.len();
        let mut k = Coroutine::with_strategy(StrategyKind::ALL[pick].build(), None, move |first| {
            let mut last = first;
            for _ in 0..n {
                last = perform(Echo { word: last });
            }
            last
        })
        .unwrap();
        let mut sent = 0usize;
        for w in &words {
            let req = k.resume(sent, EffectSet::of::<Echo>()).unwrap();
            prop_assert_eq!(req.payload::<Echo>().unwrap().word, sent);
            sent = *w;
        }
        let req = k.resume(sent, EffectSet::of::<Echo>()).unwrap();
        prop_assert_eq!(req.return_value(), *words.last().unwrap());
    }

    #[test]
    fn yield_replies_arrive_unchanged(words in prop::collection::vec(any::<usize>(), 1..64)) {
        let n = words.len();
        let mut k = Coroutine::from_fn(move |_| {
            let me = current_coroutine().unwrap();
            let mut acc = 0usize;
            for i in 0..n {
                acc = acc.wrapping_add(yield_to(me, 0, i).unwrap());
            }
            acc
        })
        .unwrap();
        let mut expect = 0usize;
        let mut reply = 0;
        for (i, w) in words.iter().enumerate() {
            let req = k.resume_handling_all(reply).unwrap();
            prop_assert_eq!(req.payload_word(), i);
            reply = *w;
            expect = expect.wrapping_add(*w);
        }
        prop_assert_eq!(k.resume_handling_all(reply).unwrap().return_value(), expect);
    }
}

#[derive(Debug, Clone)]
enum Op {
    Yield(u8),
    YieldToParent(u8),
    Spawn(Vec<Op>, u8),
    Exit(u8),
    Return(u8),
}

fn script(depth: u32) -> BoxedStrategy<Vec<Op>> {
    let leaf = prop_oneof![
        4 => any::<u8>().prop_map(Op::Yield),
        2 => any::<u8>().prop_map(Op::YieldToParent),
        1 => any::<u8>().prop_map(Op::Exit),
        1 => any::<u8>().prop_map(Op::Return),
    ];
    if depth == 0 {
        return prop::collection::vec(leaf, 0..8).boxed();
    }
    let op = prop_oneof![4 => leaf, 1 => (script(depth - 1), 0u8..6).prop_map(|(s, n)| Op::Spawn(s, n))];
    prop::collection::vec(op, 0..8).boxed()
}

type Trace = Rc<RefCell<Vec<String>>>;

/// Interprets `ops` as a coroutine body. `parent` is the coroutine that
/// spawned this one, if any.
fn interpret(ops: Vec<Op>, parent: Option<CoroutineRef>, trace: Trace, kind: StrategyKind) -> Word {
    let me = current_coroutine().unwrap();
    let mut acc: Word = 0;
    for op in ops {
        assert_eq!(unsafe { me.state() }, CoroutineState::Running);
        if let Some(p) = parent {
            assert_eq!(unsafe { p.state() }, CoroutineState::Running);
        }
        match op {
            Op::Yield(v) => acc = acc.wrapping_add(yield_to(me, 3, v as Word).unwrap()),
            Op::YieldToParent(v) => match parent {
                Some(p) => acc = acc.wrapping_add(yield_to(p, 4, v as Word).unwrap()),
                None => assert!(yield_to(me, 3, v as Word).is_ok()),
            },
            Op::Exit(v) => {
                trace.borrow_mut().push(format!("exit {v}"));
                exit(me, acc.wrapping_add(v as Word))
            }
            Op::Return(v) => return acc.wrapping_add(v as Word),
            Op::Spawn(child_ops, steps) => {
                let t = trace.clone();
                let mut child =
                    Coroutine::with_strategy(kind.build(), Some(64 * 1024), move |_| interpret(child_ops, Some(me), t, kind))
                        .unwrap();
                for step in 0..steps {
                    assert_eq!(child.state(), CoroutineState::Suspended);
                    let req = child.resume(step as Word, EffectSet::handles(3)).unwrap();
                    if req.is_return() {
                        let v = req.return_value();
                        trace.borrow_mut().push(format!("child returned {v}"));
                        acc = acc.wrapping_add(v);
                        assert_eq!(child.state(), CoroutineState::Finished);
                        assert!(matches!(child.resume(0, EffectSet::EMPTY), Err(CoroutineError::Finished)));
                        break;
                    }
                    trace.borrow_mut().push(format!("child yielded {}", req.payload_word()));
                    assert_eq!(child.state(), CoroutineState::Suspended);
                }
                // Dropped mid-flight or finished; both are allowed.
            }
        }
    }
    acc
}

fn drive(ops: Vec<Op>, kind: StrategyKind) -> Vec<String> {
    let trace: Trace = Rc::default();
    let t = trace.clone();
    let mut k = Coroutine::with_strategy(kind.build(), Some(64 * 1024), move |_| interpret(ops, None, t, kind)).unwrap();
    let mut reply = 1;
    loop {
        assert_eq!(k.state(), CoroutineState::Suspended);
        let req = k.resume(reply, EffectSet::handles(3) | EffectSet::handles(4)).unwrap();
        if req.is_return() {
            trace.borrow_mut().push(format!("returned {}", req.return_value()));
            break;
        }
        trace.borrow_mut().push(format!("root got {} {}", req.effect(), req.payload_word()));
        reply += 1;
    }
    assert_eq!(k.state(), CoroutineState::Finished);
    assert!(matches!(k.resume(0, EffectSet::EMPTY), Err(CoroutineError::Finished)));
    let out = trace.borrow().clone();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    /// Illegal transitions abort the process in debug builds, so passing
    /// here also means none occurred. Every strategy must produce the same
    /// trace for the same script.
    #[test]
    fn random_interleavings_are_legal_and_strategy_independent(ops in script(2)) {
        let reference = drive(ops.clone(), StrategyKind::Fixed);
        for kind in [StrategyKind::Segmented, StrategyKind::OvercommitKernel, StrategyKind::OvercommitUser] {
            prop_assert_eq!(&drive(ops.clone(), kind), &reference, "{}", kind);
        }
    }
}
