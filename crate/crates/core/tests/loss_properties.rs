use maskbench::contrastive::*;
use proptest::prelude::*;

// Direct transcription: −log(e^{p/τ} / (e^{p/τ} + Σ m·e^{s/τ})) without any stabilisation.
fn brute_loss(b: usize, ua: &[f64], uu: &[f64], aa: &[f64], tau: f64, margin: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..b {
        let p = ua[i * b + i];
        let mut z = (p / tau).exp();
        for j in 0..b {
            if j == i {
                continue;
            }
            for s in [ua[i * b + j], uu[i * b + j], aa[i * b + j]] {
                let m = if s > p + margin { 0.0 } else { 1.0 };
                z += m * (s / tau).exp();
            }
        }
        total += -((p / tau).exp() / z).ln();
    }
    total / b as f64
}

fn brute_factor(s: f64, p: f64, margin: f64) -> u8 {
    let mut m = 1;
    if s > p + margin {
        m = 0;
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn loss_matches_explicit_loops(
        ua in prop::collection::vec(-1.0f64..1.0, 9),
        uu in prop::collection::vec(-1.0f64..1.0, 9),
        aa in prop::collection::vec(-1.0f64..1.0, 9),
        tau in 0.05f64..1.0,
        margin in 0.0f64..0.5,
    ) {
        let cfg = LossConfig { temperature: tau, margin };
        let got = info_nce(&SimilarityBundle::new(3, ua.clone(), uu.clone(), aa.clone()).unwrap(), &cfg).unwrap();
        let want = brute_loss(3, &ua, &uu, &aa, tau, margin);
        prop_assert!((got.total - want).abs() <= 1e-10, "{} vs {}", got.total, want);
    }

    #[test]
    fn loss_gradient_matches_finite_differences(
        ua in prop::collection::vec(-1.0f64..1.0, 4),
        uu in prop::collection::vec(-1.0f64..1.0, 4),
        aa in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let cfg = LossConfig { temperature: 0.5, margin: 10.0 };
        let f = |ua: &[f64], uu: &[f64], aa: &[f64]| brute_loss(2, ua, uu, aa, cfg.temperature, cfg.margin);
        let (_, g) = info_nce_with_grad(&SimilarityBundle::new(2, ua.clone(), uu.clone(), aa.clone()).unwrap(), &cfg).unwrap();
        let h = 1e-6;
        for k in 0..4 {
            let mut p = ua.clone();
            let mut m = ua.clone();
            p[k] += h;
            m[k] -= h;
            let fd = (f(&p, &uu, &aa) - f(&m, &uu, &aa)) / (2.0 * h);
            prop_assert!((fd - g.d_ua[k]).abs() < 1e-7);
        }
    }
}

#[test]
fn mask_factor_matches_indicator_on_random_triples() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let s: f64 = rng.gen_range(-1.0..1.0);
        let p: f64 = rng.gen_range(-1.0..1.0);
        let margin: f64 = rng.gen_range(0.0..0.5);
        assert_eq!(mask_factor(s, p, margin), brute_factor(s, p, margin));
        assert_eq!(mask_factors(&[s], &[p], margin), vec![brute_factor(s, p, margin)]);
    }
}
