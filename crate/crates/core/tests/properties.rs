use layerskip::nn::{cross_entropy, log_softmax, softmax};
use layerskip::schedules::{
    layer_scale_d, sample_drop_mask, time_scale_s, DropoutSchedule, EarlyExitLossSchedule,
    ExitCurriculum, TimeCurriculum,
};
use proptest::prelude::*;

fn curriculum() -> impl Strategy<Value = (usize, ExitCurriculum)> {
    (1usize..=64).prop_flat_map(|l| {
        (
            Just(l),
            prop_oneof![
                (1..=l).prop_map(|r| ExitCurriculum::Rotational { dilation: r }),
                Just(ExitCurriculum::Gradual),
                Just(ExitCurriculum::All),
            ],
        )
    })
}

proptest! {
    #[test]
    fn softmax_sums_to_one(xs in proptest::collection::vec(-50f32..50.0, 1..300)) {
        let p = softmax(&xs).unwrap();
        let s: f64 = p.iter().map(|&v| v as f64).sum();
        prop_assert!((s - 1.0).abs() <= 1e-6, "{}", s);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn softmax_shift_invariant(xs in proptest::collection::vec(-50f64..50.0, 1..100), c in -20f64..20.0) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        for (a, b) in softmax(&xs).unwrap().iter().zip(softmax(&shifted).unwrap()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_is_negative_log_softmax(
        xs in proptest::collection::vec(-50f32..50.0, 2..100),
        pick in any::<prop::sample::Index>(),
    ) {
        let t = pick.index(xs.len());
        let ce = cross_entropy(&xs, t).unwrap();
        let ls = log_softmax(&xs).unwrap()[t];
        prop_assert!(ce >= 0.0);
        prop_assert!((ce + ls).abs() <= 1e-6 * (1.0 + ce.abs()), "{} {}", ce, ls);
    }

    #[test]
    fn layer_scale_monotone_with_endpoints(n in 2usize..=64) {
        prop_assert_eq!(layer_scale_d(0, n), 0.0);
        prop_assert!((layer_scale_d(n - 1, n) - 1.0).abs() < 1e-12);
        for l in 1..n {
            prop_assert!(layer_scale_d(l, n) > layer_scale_d(l - 1, n));
        }
    }

    #[test]
    fn time_scale_monotone_with_endpoints(total in 2usize..=100_000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let s = |t| time_scale_s(t, total, TimeCurriculum::Exponential).unwrap();
        prop_assert_eq!(s(0), 0.0);
        prop_assert!((s(total - 1) - 1.0).abs() < 1e-12);
        let (t0, t1) = ((a * total as f64) as usize, (b * total as f64) as usize);
        let (lo, hi) = (t0.min(t1), t0.max(t1));
        prop_assert!(s(lo) <= s(hi));
        if lo < hi {
            prop_assert!(s(lo) < s(hi));
        }
    }

    #[test]
    fn rotation_enables_each_layer_once_per_period(
        n in 1usize..=64,
        r_frac in 0.0f64..1.0,
        t0 in 0usize..10_000,
    ) {
        let r = 1 + ((n - 1) as f64 * r_frac) as usize;
        let s = EarlyExitLossSchedule::new(0.2, ExitCurriculum::Rotational { dilation: r }, 20_000, n).unwrap();
        for l in 0..n {
            prop_assert_eq!((t0..t0 + r).filter(|&t| s.enabled(t, l)).count(), 1);
        }
        prop_assert!((0..n).filter(|&l| s.enabled(t0, l)).count() <= n.div_ceil(r));
    }

    #[test]
    fn exit_weights_sum_to_one(
        (n, c) in curriculum(),
        e_scale in 0.0f64..=1.0,
        total in 1usize..=100_000,
        frac in 0.0f64..1.0,
    ) {
        let s = EarlyExitLossSchedule::new(e_scale, c, total, n).unwrap();
        let t = ((total as f64 * frac) as usize).min(total - 1);
        let w = s.weights(t);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (l, &x) in w.iter().enumerate() {
            prop_assert!(x >= 0.0);
            if !s.enabled(t, l) {
                prop_assert_eq!(x, 0.0);
            }
        }
    }
}

#[test]
fn mean_layer_scale_closed_form() {
    for n in 2usize..=64 {
        let k = (n - 1) as f64;
        let closed =
            ((2f64.powf(n as f64 / k) - 1.0) / (2f64.powf(1.0 / k) - 1.0)) / n as f64 - 1.0;
        let mean = (0..n).map(|l| layer_scale_d(l, n)).sum::<f64>() / n as f64;
        assert!((mean - closed).abs() < 1e-9, "L={n}: {mean} vs {closed}");
    }
}

#[test]
fn drop_frequency_within_three_sigma() {
    let draws = 100_000;
    for (p_max, t) in [(0.5, 3), (0.2, 70), (1.0, 99)] {
        let s = DropoutSchedule::new(p_max, TimeCurriculum::Exponential, 100, 8, 11).unwrap();
        let mask = sample_drop_mask(&s, t, draws).unwrap();
        for l in 0..8 {
            let p = s.rate(l, t).unwrap();
            let hits = mask.layer(l).iter().filter(|&&d| d).count() as f64;
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (hits - draws as f64 * p).abs() <= 3.0 * sigma.max(1e-9),
                "layer {l} t {t}: {hits} drops, expected {}",
                draws as f64 * p
            );
        }
    }
}
