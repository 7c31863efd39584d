use proptest::prelude::*;

use softdrop::config::ExperimentConfig;
use softdrop::data::{parse_idx, IdxArray};
use softdrop::masking::{self, MaskMethod, MaskSpec};
use softdrop::model::Method;
use softdrop::rng::SeedLineage;
use softdrop::uncertainty::{self, PredictiveSummary};

fn normalized(weights: Vec<u32>) -> Vec<f64> {
    let s: u32 = weights.iter().sum();
    weights.iter().map(|&w| w as f64 / s as f64).collect()
}

/// `t` probability vectors over `k` classes with rational entries.
fn passes(
    t: std::ops::RangeInclusive<usize>,
    k: std::ops::RangeInclusive<usize>,
) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (t, k).prop_flat_map(|(t, k)| {
        prop::collection::vec(
            prop::collection::vec(0u32..50, k).prop_filter("non-zero row", |w| w.iter().any(|&v| v > 0)),
            t,
        )
        .prop_map(|rows| rows.into_iter().map(normalized).collect())
    })
}

fn method() -> impl Strategy<Value = MaskMethod> {
    prop::sample::select(MaskMethod::ALL.to_vec())
}

proptest! {
    #[test]
    fn mutual_information_is_bounded(ps in passes(1..=10, 2..=8)) {
        let k = ps[0].len();
        let mi = uncertainty::mutual_information(&ps).unwrap();
        let t = ps.len() as f64;
        let mean: Vec<f64> = (0..k).map(|j| ps.iter().map(|p| p[j]).sum::<f64>() / t).collect();
        let h = uncertainty::entropy(&mean).unwrap();
        prop_assert!(mi >= 0.0);
        prop_assert!(mi <= h + 1e-12);
        prop_assert!(h <= (k as f64).log2() + 1e-12);
    }

    #[test]
    fn mutual_information_ignores_pass_order(ps in passes(2..=8, 2..=6), seed in any::<u64>()) {
        let mut shuffled = ps.clone();
        let n = shuffled.len();
        shuffled.rotate_left((seed % n as u64) as usize);
        shuffled.reverse();
        let a = uncertainty::mutual_information(&ps).unwrap();
        let b = uncertainty::mutual_information(&shuffled).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mutual_information_ignores_class_order(ps in passes(1..=8, 2..=6)) {
        let flipped: Vec<Vec<f64>> = ps.iter().map(|p| p.iter().rev().copied().collect()).collect();
        let a = uncertainty::mutual_information(&ps).unwrap();
        let b = uncertainty::mutual_information(&flipped).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn identical_passes_carry_no_information(p in passes(1..=1, 2..=8), t in 1usize..12) {
        let ps = vec![p[0].clone(); t];
        prop_assert_eq!(uncertainty::mutual_information(&ps).unwrap(), 0.0);
        let s = PredictiveSummary::from_passes(ps, false).unwrap();
        prop_assert_eq!(s.mutual_information, 0.0);
        prop_assert!(s.std_per_class.iter().all(|&v| v == 0.0));
        prop_assert_eq!(&s.mean_softmax, &p[0]);
    }

    #[test]
    fn summary_votes_and_means_are_consistent(ps in passes(1..=12, 2..=6)) {
        let s = PredictiveSummary::from_passes(ps.clone(), false).unwrap();
        prop_assert_eq!(s.class_counts.iter().sum::<usize>(), ps.len());
        prop_assert!((s.mean_softmax.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let top = *s.class_counts.iter().max().unwrap();
        prop_assert_eq!(s.class_counts[s.popular_class], top);
        prop_assert_eq!(s.class_counts.iter().position(|&c| c == top), Some(s.popular_class));
        prop_assert!(s.std_per_class.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn retained_fraction_never_increases(
        items in prop::collection::vec((passes(1..=5, 3..=3), 0usize..3), 1..40),
        grid in 2usize..60,
    ) {
        let summaries: Vec<_> = items.iter().map(|(ps, _)| PredictiveSummary::from_passes(ps.clone(), false).unwrap()).collect();
        let labels: Vec<usize> = items.iter().map(|(_, y)| *y).collect();
        let curve = uncertainty::rejection_analysis(&summaries, &labels, &uncertainty::threshold_grid(grid)).unwrap();
        prop_assert_eq!(curve.retained_fraction[0], 1.0);
        prop_assert!(curve.retained_fraction.windows(2).all(|w| w[1] <= w[0]));
        for (f, a) in curve.retained_fraction.iter().zip(&curve.retained_accuracy) {
            prop_assert_eq!(*f == 0.0, a.is_none());
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..64)) {
        let (a, b): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let ab = uncertainty::dice_score(&a, &b).unwrap();
        prop_assert_eq!(ab, uncertainty::dice_score(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(uncertainty::dice_score(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn idx_round_trips(dims in prop::collection::vec(0usize..5, 1..5), fill in any::<u64>()) {
        let n: usize = dims.iter().product();
        let payload: Vec<u8> = (0..n).map(|i| (fill.rotate_left(i as u32 % 64) as u8) ^ i as u8).collect();
        let arr = IdxArray::new(dims, payload).unwrap();
        let bytes = arr.to_bytes();
        prop_assert_eq!(parse_idx(&bytes).unwrap(), arr);
        if !bytes.is_empty() && bytes.len() > 4 + 4 * bytes[3] as usize {
            prop_assert!(parse_idx(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn mask_entries_follow_their_law(m in method(), p in 0.0f64..0.95, seed in any::<u64>()) {
        let spec = MaskSpec::new(m, p).unwrap();
        let mask = masking::sample_mask(&spec, &[257], SeedLineage::new(seed, 1, 2)).unwrap();
        let again = masking::sample_mask(&spec, &[257], SeedLineage::new(seed, 1, 2)).unwrap();
        prop_assert_eq!(&mask, &again);
        for &v in mask.values.data() {
            match spec.bounds() {
                None => prop_assert!(v == 0.0 || v == 1.0),
                Some((a, b)) => prop_assert!(v == 1.0 || (a..b).contains(&v), "{} outside [{}, {})", v, a, b),
            }
        }
    }

    #[test]
    fn config_text_round_trips(
        method in prop::sample::select(Method::COMPARED.to_vec()),
        p in 0.0f64..0.99,
        epochs in 1usize..1000,
        seed in any::<u64>(),
        lr in 1e-6f64..10.0,
        dir in "[a-z/_ .-]{1,12}",
    ) {
        let p = method.mask_method().map(|_| p);
        let mut cfg = ExperimentConfig::desk(method, p);
        cfg.epochs = epochs;
        cfg.seed = seed;
        cfg.learning_rate = lr;
        cfg.output_dir = format!("runs/{dir}x").into();
        let text = cfg.to_key_values();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_key_values(), text);
        prop_assert_eq!(ExperimentConfig::parse(&cfg.to_json()).unwrap(), cfg);
    }
}

#[test]
fn mask_variance_orders_dropconnect_sdc_sdc_weak() {
    let n = 200_000;
    let empirical = |m: MaskMethod, p: f64| {
        let spec = MaskSpec::new(m, p).unwrap();
        let mask = masking::sample_mask(&spec, &[n], SeedLineage::new(3, 0, 0)).unwrap();
        let e = masking::expected_mask_value(&spec);
        let z: Vec<f64> = mask.values.data().iter().map(|v| v / e).collect();
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var, masking::normalized_mask_variance(&spec))
    };
    for p in [0.1, 0.3, 0.5, 0.7] {
        let (dc, dc_exact) = empirical(MaskMethod::Dropconnect, p);
        let (sdc, sdc_exact) = empirical(MaskMethod::Sdc, p);
        let (weak, weak_exact) = empirical(MaskMethod::SdcWeak, p);
        assert!(dc > sdc && sdc > weak, "p={p}: {dc} {sdc} {weak}");
        assert!((dc_exact - p / (1.0 - p)).abs() < 1e-12);
        for (got, want) in [(dc, dc_exact), (sdc, sdc_exact), (weak, weak_exact)] {
            assert!((got - want).abs() / want < 0.05, "p={p}: {got} vs {want}");
        }
    }
}

#[test]
fn collapsed_sdc_matches_dropconnect() {
    let r = masking::degenerate_equivalence_check(100_000, 0.5, 1e-9, 4).unwrap();
    assert!((r.ones_fraction_dropconnect - 0.5).abs() < 0.01);
    assert!((r.ones_fraction_soft - 0.5).abs() < 0.01);
    assert!(r.max_soft_gated_value < 1e-9);
    assert_eq!(r.cdf_distance, 0.0);
}
