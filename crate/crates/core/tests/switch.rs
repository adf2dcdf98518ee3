//! Callee-saved registers and the saved stack pointer across yield/resume.

use effstack::ctx::probe::{call_with_salted_registers, SALTED};
use effstack::stacks::StrategyKind;
use effstack::{current_coroutine, yield_to, Coroutine, EffectSet, Word};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

unsafe extern "C" fn yield_once(_: *mut u8) {
    let me = current_coroutine().expect("inside a coroutine");
    yield_to(me, 0, 0).expect("yield to self");
}

unsafe extern "C" fn resume_once(k: *mut u8) {
    let k = &mut *(k as *mut Coroutine);
    k.resume_handling_all(0).expect("resume");
}

struct Outcome {
    round_trips: usize,
    guest_mismatches: usize,
    host_mismatches: usize,
    sp_changes: usize,
}

/// Salts the registers on both sides of every switch, with salts drawn from
/// `seed`, for `round_trips` yield/resume pairs.
fn salted_round_trips(kind: StrategyKind, round_trips: usize, seed: u64) -> Outcome {
    let mut k = Coroutine::with_strategy(kind.build(), None, move |_| {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed ^ 0x5a5a);
        let mut mismatches: Word = 0;
        for _ in 0..round_trips {
            let salts: [u64; SALTED] = rng.gen();
            let mut seen = [0u64; SALTED];
            unsafe { call_with_salted_registers(&salts, yield_once, std::ptr::null_mut(), &mut seen) };
            mismatches += (seen != salts) as Word;
        }
        mismatches
    })
    .unwrap();

    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut host_mismatches = 0;
    let mut sp_changes = 0;
    let mut first_sp = None;
    for _ in 0..round_trips {
        let salts: [u64; SALTED] = rng.gen();
        let mut seen = [0u64; SALTED];
        unsafe {
            call_with_salted_registers(&salts, resume_once, &mut k as *mut Coroutine as *mut u8, &mut seen);
        }
        host_mismatches += (seen != salts) as usize;
        let sp = k.saved_stack_pointer();
        if *first_sp.get_or_insert(sp) != sp {
            sp_changes += 1;
        }
    }
    let guest_mismatches = k.resume(0, EffectSet::ALL).unwrap().return_value();
    Outcome { round_trips, guest_mismatches, host_mismatches, sp_changes }
}

#[test]
fn one_million_salted_round_trips_per_strategy() {
    for kind in StrategyKind::ALL {
        let o = salted_round_trips(kind, 1_000_000, 0xC0FFEE);
        assert_eq!(o.round_trips, 1_000_000);
        assert_eq!(o.guest_mismatches, 0, "{kind}: coroutine side lost register state");
        assert_eq!(o.host_mismatches, 0, "{kind}: host side lost register state");
        assert_eq!(o.sp_changes, 0, "{kind}: saved stack pointer drifted");
    }
}

proptest! {
    #[test]
    fn arbitrary_salts_survive(seed in any::<u64>(), pick in 0usize..4) {
        let o = salted_round_trips(StrategyKind::ALL[pick], 64, seed);
        prop_assert_eq!((o.guest_mismatches, o.host_mismatches, o.sp_changes), (0, 0, 0));
    }
}

#[test]
fn floating_point_control_state_follows_each_context() {
    fn mxcsr() -> u32 {
        let mut v = 0u32;
        unsafe { std::arch::asm!("stmxcsr [{}]", in(reg) &mut v) };
        v
    }
    fn set_mxcsr(v: u32) {
        unsafe { std::arch::asm!("ldmxcsr [{}]", in(reg) &v) };
    }
    let host = mxcsr();
    let mut k = Coroutine::from_fn(move |_| {
        // Round toward zero inside the coroutine only.
        set_mxcsr((mxcsr() & !0x6000) | 0x6000);
        let me = current_coroutine().unwrap();
        yield_to(me, 0, 0).unwrap();
        (mxcsr() & 0x6000) as Word
    })
    .unwrap();
    k.resume_handling_all(0).unwrap();
    assert_eq!(mxcsr(), host);
    assert_eq!(k.resume_handling_all(0).unwrap().return_value(), 0x6000);
    assert_eq!(mxcsr(), host);
}
