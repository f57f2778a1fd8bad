use ehtl::corpus::{phq8_to_binary, segment_response, split_by_speaker, Split, MAX_SEGMENT_SECS, MIN_SEGMENT_SECS};
use ehtl::eval::{auc, cer, delong_test, eer_point, roc_curve, trapezoidal_auc};
use proptest::prelude::*;

fn scored_set() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..200)
        .prop_flat_map(|n| (prop::collection::vec(0u8..12, n), prop::collection::vec(any::<bool>(), n)))
        .prop_filter("both classes", |(_, l)| l.iter().any(|&x| x) && l.iter().any(|&x| !x))
        .prop_map(|(s, l)| (s.into_iter().map(|v| v as f64 / 11.0).collect(), l))
}

fn paired_set() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (4usize..60)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(-3.0f64..3.0, n),
                prop::collection::vec(-3.0f64..3.0, n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("both classes", |(_, _, l)| l.iter().any(|&x| x) && l.iter().any(|&x| !x))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn auc_equals_trapezoid((s, l) in scored_set()) {
        let a = auc(&s, &l).unwrap();
        let t = trapezoidal_auc(&roc_curve(&s, &l).unwrap());
        prop_assert!((a - t).abs() <= 1e-12, "{a} vs {t}");
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn auc_invariant_under_monotone_maps((s, l) in scored_set()) {
        let a = auc(&s, &l).unwrap();
        let cubic: Vec<f64> = s.iter().map(|x| x * x * x + 2.0 * x - 7.0).collect();
        let expo: Vec<f64> = s.iter().map(|x| (3.0 * x).exp()).collect();
        prop_assert_eq!(auc(&cubic, &l).unwrap(), a);
        prop_assert_eq!(auc(&expo, &l).unwrap(), a);
        let flipped: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert!((auc(&flipped, &l).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn delong_self_and_antisymmetry((a, b, l) in paired_set()) {
        prop_assert_eq!(delong_test(&a, &a, &l).unwrap().p_value, 1.0);
        let ab = delong_test(&a, &b, &l).unwrap();
        let ba = delong_test(&b, &a, &l).unwrap();
        prop_assert_eq!(ab.z, -ba.z);
        prop_assert_eq!(ab.p_value, ba.p_value);
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
    }

    #[test]
    fn eer_is_balanced((s, l) in scored_set()) {
        let e = eer_point(&s, &l).unwrap();
        prop_assert!((e.sensitivity - e.specificity).abs() < 1e-6);
        prop_assert!((0.0..=1.0).contains(&e.eer));
        prop_assert!((e.eer - (1.0 - e.sensitivity)).abs() < 1e-12);
    }

    #[test]
    fn cer_bounds(r in "[a-e]{1,12}", h in "[a-e]{0,12}") {
        let c = cer(&r, &h).unwrap();
        let (nr, nh) = (r.len() as f64, h.len() as f64);
        prop_assert!(c <= (nr + nh) / nr + 1e-12);
        prop_assert!(c >= (nr - nh).abs() / nr - 1e-12);
        prop_assert_eq!(cer(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn segmentation_tiles_the_response(secs in 1.0f64..120.0, sr in prop::sample::select(vec![8000u32, 16000])) {
        let n = (secs * sr as f64) as usize;
        let segs = segment_response(n, sr, 0).unwrap();
        prop_assert!(!segs.is_empty());
        prop_assert_eq!(segs[0].start, 0);
        for w in segs.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
        }
        for s in &segs {
            let d = s.duration_secs(sr);
            prop_assert!((MIN_SEGMENT_SECS - 1e-9..=MAX_SEGMENT_SECS + 1e-9).contains(&d));
        }
        let dropped = n - segs.last().unwrap().end;
        prop_assert!((dropped as f64) < MIN_SEGMENT_SECS * sr as f64);
    }

    #[test]
    fn phq8_is_monotone(a in 0i64..=24, b in 0i64..=24) {
        if a <= b {
            prop_assert!(phq8_to_binary(a).unwrap() <= phq8_to_binary(b).unwrap());
        }
    }

    #[test]
    fn speaker_split_is_a_partition(n in 3usize..80, seed in any::<u64>()) {
        let speakers: Vec<String> = (0..n).map(|i| format!("spk{i}")).collect();
        let map = split_by_speaker(&speakers, [0.5, 0.2, 0.3], seed).unwrap();
        prop_assert_eq!(map.len(), n);
        for s in Split::ALL {
            prop_assert!(map.values().any(|&v| v == s));
        }
    }
}

#[test]
fn phq8_out_of_range_rejected() {
    assert!(phq8_to_binary(-1).is_err());
    assert!(phq8_to_binary(25).is_err());
}
