use negprompt_core::math::{cosine_sim, l2_normalize, softmax_stable};
use proptest::prelude::*;

fn vec_strategy(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..max)
}

proptest! {
    #[test]
    fn softmax_shift_invariant(x in vec_strategy(20), c in -200.0f64..200.0) {
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let a = softmax_stable(&x).unwrap();
        let b = softmax_stable(&shifted).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one(x in vec_strategy(40)) {
        let s: f64 = softmax_stable(&x).unwrap().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_symmetric(
        a in prop::collection::vec(-5.0f64..5.0, 6),
        b in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        if let (Ok(x), Ok(y)) = (cosine_sim(&a, &b), cosine_sim(&b, &a)) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
            prop_assert!((-1.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn normalize_is_idempotent(v in prop::collection::vec(-1e3f64..1e3, 1..30)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        let once = l2_normalize(&v).unwrap();
        let twice = l2_normalize(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
