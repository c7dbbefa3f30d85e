use mahakit::metrics::{auroc, fpr_at_tpr, rejected_class_coverage, tpr_threshold};
use mahakit::synth::oracle::pair_count_auroc;
use proptest::prelude::*;

/// Scores drawn from a small integer grid so ties are common.
fn tied_scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-6i32..6).prop_map(|v| v as f64 * 0.5), 1..max_len)
}

fn any_scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![(-1e3f64..1e3), (-6i32..6).prop_map(|v| v as f64)],
        1..max_len,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auroc_equals_pair_counting(id in any_scores(250), ood in any_scores(250)) {
        prop_assert_eq!(auroc(&id, &ood).unwrap(), pair_count_auroc(&id, &ood));
    }

    #[test]
    fn swap_antisymmetry(id in tied_scores(200), ood in tied_scores(200)) {
        prop_assert_eq!(auroc(&id, &ood).unwrap() + auroc(&ood, &id).unwrap(), 1.0);
    }

    #[test]
    fn monotone_transforms_change_nothing(id in any_scores(200), ood in any_scores(200), target in 0.05f64..=1.0) {
        let f = |v: &f64| (v / 100.0).atan() * 3.0 + 7.0;
        let g = |v: &f64| -(-v / 300.0).exp();
        let base = fpr_at_tpr(&id, &ood, target).unwrap();
        for t in [&f as &dyn Fn(&f64) -> f64, &g] {
            let ti: Vec<f64> = id.iter().map(t).collect();
            let to: Vec<f64> = ood.iter().map(t).collect();
            // only strictly increasing on the sample: skip if rounding merged two values
            let distinct = |a: &[f64], b: &[f64]| {
                let mut x: Vec<f64> = a.iter().chain(&id).copied().collect();
                let mut y: Vec<f64> = b.iter().chain(&ti).copied().collect();
                x.sort_by(f64::total_cmp);
                y.sort_by(f64::total_cmp);
                x.dedup();
                y.dedup();
                x.len() == y.len()
            };
            prop_assume!(distinct(&ood, &to));
            let r = fpr_at_tpr(&ti, &to, target).unwrap();
            prop_assert_eq!(r.fpr_at_tpr, base.fpr_at_tpr);
            prop_assert_eq!(r.auroc, base.auroc);
            prop_assert_eq!(r.tpr_achieved, base.tpr_achieved);
        }
    }

    #[test]
    fn fpr_bounds_and_target_monotonicity(id in tied_scores(300), ood in tied_scores(300), a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let rl = fpr_at_tpr(&id, &ood, lo).unwrap();
        let rh = fpr_at_tpr(&id, &ood, hi).unwrap();
        for r in [&rl, &rh] {
            prop_assert!((0.0..=1.0).contains(&r.fpr_at_tpr));
            prop_assert!(r.tpr_achieved >= r.tpr_target - 1e-9);
        }
        prop_assert!(rl.fpr_at_tpr <= rh.fpr_at_tpr);
    }

    #[test]
    fn rejected_classes_are_below_threshold(id in tied_scores(100), seed in 0usize..5) {
        let labels: Vec<usize> = (0..id.len()).map(|i| (i + seed) % 4).collect();
        let t = tpr_threshold(&id, 0.95).unwrap();
        let want: std::collections::BTreeSet<usize> =
            id.iter().zip(&labels).filter(|(s, _)| **s < t).map(|(_, c)| *c).collect();
        prop_assert_eq!(rejected_class_coverage(&id, &labels, t).unwrap(), want.len());
    }
}

#[test]
fn hand_cases() {
    let id: Vec<f64> = (1..=20).map(f64::from).collect();
    // T is the 19th largest = 2; OOD at or above 2 counts
    let r = fpr_at_tpr(&id, &[0.0, 1.0, 2.0, 3.0], 0.95).unwrap();
    assert_eq!(r.threshold, 2.0);
    assert_eq!(r.fpr_at_tpr, 0.5);
    assert_eq!(r.tpr_achieved, 0.95);
    // ties at T are accepted on both sides
    let r = fpr_at_tpr(&[1.0, 1.0, 1.0, 1.0], &[1.0, 0.0], 0.95).unwrap();
    assert_eq!(r.fpr_at_tpr, 0.5);
    assert_eq!(auroc(&[1.0], &[1.0]).unwrap(), 0.5);
    assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 0.0);
}
