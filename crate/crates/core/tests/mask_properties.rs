use maskbench::masking::{self, *};
use maskbench::tensor::BLOCKED;
use proptest::prelude::*;
use proptest::strategy::Strategy as _;

fn state(t: usize, warm: usize, total: usize, norms: Vec<f64>) -> MaskScheduleState {
    let mut s = MaskScheduleState::new(masking::Strategy::Ggsm, warm, total, 1.0).unwrap();
    s.t = t;
    s.lagged_norms = Some(norms.clone());
    s.frozen_norms = Some(norms);
    s
}

fn schedule() -> impl proptest::strategy::Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (1usize..24, 0usize..50, 1usize..50).prop_flat_map(|(len, warm, extra)| {
        let total = warm + extra;
        (
            Just(len),
            Just(warm),
            Just(total),
            prop::collection::vec(0.0f64..10.0, len),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn ggsm_is_column_constant_and_well_formed((len, warm, total, norms) in schedule(), t in 0usize..120) {
        let m = ggsm_mask(len, &state(t, warm, total, norms)).unwrap();
        m.check_invariants().unwrap();
        for j in 0..len {
            for i in 0..j {
                prop_assert_eq!(m.get(i, j).to_bits(), m.get(0, j).to_bits());
                prop_assert!(m.get(i, j) > BLOCKED);
            }
        }
    }

    #[test]
    fn ggsm_endpoints((len, warm, total, norms) in schedule(), past in 0usize..10) {
        let end = ggsm_mask(len, &state(total + past, warm, total, norms.clone())).unwrap();
        prop_assert_eq!(end, bidirectional_mask(len).unwrap());
        let at_warm = ggsm_mask(len, &state(warm, warm, total, norms.clone())).unwrap();
        let frozen = soft_mask_from_norms(len, &norms, 1.0, 0.0).unwrap();
        prop_assert_eq!(at_warm, frozen);
    }

    #[test]
    fn ggsm_opens_monotonically((len, warm, total, norms) in schedule()) {
        let mut prev = ggsm_mask(len, &state(warm, warm, total, norms.clone())).unwrap();
        for t in warm + 1..=total {
            let m = ggsm_mask(len, &state(t, warm, total, norms.clone())).unwrap();
            for (a, b) in prev.as_slice().iter().zip(m.as_slice()) {
                prop_assert!(b >= a);
            }
            prev = m;
        }
    }

    #[test]
    fn zero_norms_give_half_visibility(len in 2usize..30, warm in 1usize..20, t_frac in 0.0f64..1.0) {
        let t = (t_frac * warm as f64) as usize;
        let m = ggsm_mask(len, &state(t, warm, warm + 5, vec![0.0; len])).unwrap();
        for i in 0..len {
            for j in i + 1..len {
                prop_assert!((m.get(i, j) - 0.5f64.ln()).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn every_recipe_keeps_the_lower_triangle_open(len in 1usize..30, cut in 0usize..30, epoch in 0usize..20) {
        causal_mask(len).unwrap().check_invariants().unwrap();
        bidirectional_mask(len).unwrap().check_invariants().unwrap();
        block_hybrid_mask(len, cut.min(len - 1)).unwrap().check_invariants().unwrap();
        global_query_mask(len).unwrap().0.check_invariants().unwrap();
        span_scheduler_mask(len, epoch, SpanSchedule::Linear, 10).unwrap().check_invariants().unwrap();
        span_scheduler_mask(len, epoch, SpanSchedule::Cosine, 10).unwrap().check_invariants().unwrap();
    }
}
