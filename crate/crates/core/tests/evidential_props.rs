use evprobe::evidential::{
    aleatoric_uncertainty, aleatoric_uncertainty_with, epistemic_uncertainty, score_response_logtoku,
    uncertainty_bounds, AuVariant, EvidenceTransform, EvidenceVector,
};
use evprobe::special::digamma;
use proptest::prelude::*;

fn ev(values: Vec<f64>) -> EvidenceVector {
    EvidenceVector::new(values, EvidenceTransform::Relu).unwrap()
}

fn evidence() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![Just(0.0), 0.0..1e-6, 0.0..1.0, 0.0..100.0, 0.0..1e6],
        2..=20,
    )
}

#[test]
fn closed_forms() {
    assert!((aleatoric_uncertainty(&ev(vec![1.0, 1.0])) - 0.5).abs() < 1e-9);
    assert!((aleatoric_uncertainty(&ev(vec![3.0, 1.0])) - 11.0 / 24.0).abs() < 1e-9);
    assert!((aleatoric_uncertainty(&ev(vec![0.0; 4])) - 4f64.ln()).abs() < 1e-9);
    assert_eq!(epistemic_uncertainty(&ev(vec![0.0, 0.0])), 1.0);
    assert_eq!(epistemic_uncertainty(&ev(vec![1.0, 1.0])), 0.5);
    assert!((epistemic_uncertainty(&ev(vec![9.0; 10])) - 0.1).abs() < 1e-15);
}

#[test]
fn uniform_evidence_is_nondecreasing_toward_ln_k() {
    for k in [2usize, 5, 10] {
        let au: Vec<f64> = [0.1, 1.0, 10.0, 100.0]
            .iter()
            .map(|&c| aleatoric_uncertainty(&ev(vec![c; k])))
            .collect();
        assert!(au.windows(2).all(|w| w[0] <= w[1]), "{au:?}");
        assert!(au.iter().all(|&a| a <= (k as f64).ln() + 1e-9));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn au_within_zero_and_ln_k(e in evidence()) {
        let k = e.len() as f64;
        for variant in [AuVariant::Evidence, AuVariant::Alpha] {
            let au = aleatoric_uncertainty_with(&ev(e.clone()), variant);
            prop_assert!((0.0..=k.ln() + 1e-9).contains(&au), "{au}");
        }
    }

    #[test]
    fn eu_range_and_unit_only_at_zero(e in evidence()) {
        let eu = epistemic_uncertainty(&ev(e.clone()));
        prop_assert!(eu > 0.0 && eu <= 1.0);
        prop_assert_eq!(eu == 1.0, e.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn eu_strictly_decreases_in_each_component(e in evidence(), idx in any::<prop::sample::Index>(), bump in 1e-3..10.0) {
        let k = idx.index(e.len());
        let mut more = e.clone();
        more[k] += bump;
        prop_assert!(epistemic_uncertainty(&ev(more)) < epistemic_uncertainty(&ev(e)));
    }

    #[test]
    fn au_is_permutation_invariant(e in evidence(), seed in any::<u64>()) {
        let mut p = e.clone();
        let n = p.len();
        // Fisher-Yates driven by the seed
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            p.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = aleatoric_uncertainty(&ev(e));
        let b = aleatoric_uncertainty(&ev(p));
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn digamma_recurrence(x in 1e-3..1e4f64) {
        let lhs = digamma(x + 1.0).unwrap() - digamma(x).unwrap();
        prop_assert!((lhs - 1.0 / x).abs() <= 1e-10);
    }

    #[test]
    fn logtoku_falls_back_to_mean(r in prop::collection::vec(-5.0..0.0f64, 1..12), extra in 0usize..5) {
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let got = score_response_logtoku(&r, r.len() + extra).unwrap();
        prop_assert!((got - mean).abs() < 1e-12);
    }

    #[test]
    fn bounds_sandwich_the_mean(s in prop::collection::vec(0.0..1.0f64, 1..30), k in 1usize..15) {
        let b = uncertainty_bounds(&s, k).unwrap();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        prop_assert!(b.lower <= mean + 1e-12 && mean <= b.upper + 1e-12);
    }
}
