use effstack::stacks::StrategyKind;
use effstack::Coroutine;
use effstack_bench::ad_demo::{self, closed_form_derivative, closed_form_value, e_a, e_c, e_m, e_n, evaluate, AdRun};
use effstack_bench::bench::{run_async, run_async_oracle};
use proptest::prelude::*;

fn any_strategy() -> impl Strategy<Value = StrategyKind> {
    (0usize..4).prop_map(|i| StrategyKind::ALL[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adjoint_matches_central_differences(x in 0.01f64..0.99, iters in 0usize..=20, kind in any_strategy()) {
        let s = kind.build();
        let h = 1e-5;
        let f = |x| ad_demo::run_ad(&s, iters, x, None).unwrap().value;
        let fd = (f(x + h) - f(x - h)) / (2.0 * h);
        let out = ad_demo::run_ad(&s, iters, x, None).unwrap();
        prop_assert!((out.derivative - fd).abs() <= 1e-6 * out.derivative.abs().max(1.0),
            "adjoint {} vs finite difference {}", out.derivative, fd);
        prop_assert!((out.value - closed_form_value(iters, x)).abs() < 1e-12);
        prop_assert!((out.derivative - closed_form_derivative(iters, x)).abs() < 1e-9);
    }

    #[test]
    fn ad_output_is_identical_across_strategies(iters in 0usize..=40) {
        let outs: Vec<_> = StrategyKind::ALL
            .iter()
            .map(|k| ad_demo::run_ad(&k.build(), iters, ad_demo::DEFAULT_X, None).unwrap())
            .collect();
        for o in &outs[1..] {
            prop_assert_eq!(o.derivative.to_bits(), outs[0].derivative.to_bits());
            prop_assert_eq!(o.value.to_bits(), outs[0].value.to_bits());
            prop_assert_eq!(o.max_depth, outs[0].max_depth);
        }
        prop_assert_eq!(outs[0].reverse_ops, 2 + 5 * iters);
    }

    #[test]
    fn run_async_matches_the_fold(iters in 0i64..300, thread_id in 1i64..64, kind in any_strategy()) {
        prop_assert_eq!(run_async(&kind.build(), iters, thread_id).unwrap(), run_async_oracle(iters, thread_id));
    }

    #[test]
    fn forward_layer_matches_plain_arithmetic(a in -1e6f64..1e6, b in -1e6f64..1e6, c in -1e6f64..1e6) {
        let run = AdRun::new(0.0);
        let mut k = Coroutine::from_fn(move |_| {
            let v = e_a(e_m(e_c(a), e_n(b)), e_c(c));
            v.to_bits() as usize
        })
        .unwrap();
        let bits = evaluate(&run, &mut k).unwrap();
        prop_assert_eq!(f64::from_bits(bits as u64), a * -b + c);
    }
}
