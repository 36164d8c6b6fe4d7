use proptest::prelude::*;
use turbstoch::mstats::{
    ensemble_stats, fit_loglog_slope, flatness_curve, increment_pdf, log_s2_curve, skewness_curve, structure_function,
    PdfBins, ScaleSet, StatCurve, StatKind,
};

/// Pooled `(S₂, S₃, S₄)` by enumerating every ordered pair of positions.
fn brute_moments(fields: &[Vec<f64>], l: usize) -> [f64; 3] {
    let mut sums = [0.0; 3];
    let mut count = 0usize;
    for f in fields {
        for x in 0..f.len() {
            for y in x..f.len() {
                if y - x == l {
                    let d = f[y] - f[x];
                    sums[0] += d * d;
                    sums[1] += d * d * d;
                    sums[2] += d * d * d * d;
                    count += 1;
                }
            }
        }
    }
    sums.map(|s| s / count as f64)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

fn fields_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..60).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(-5.0..5.0f64, n), 1..4))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn statistics_match_pair_enumeration(fields in fields_strategy(), lag_frac in 0.0..1.0f64) {
        let n = fields[0].len();
        let l = 1 + ((n - 2) as f64 * lag_frac) as usize;
        let [s2, s3, s4] = brute_moments(&fields, l);
        prop_assert!(close(structure_function(&fields, l, 2).unwrap(), s2, 1e-12));
        // S₃ may cancel to near zero; compare on the scale of its terms
        prop_assert!((structure_function(&fields, l, 3).unwrap() - s3).abs() <= 1e-12 * s4.max(s2).max(1.0));
        prop_assert!(close(structure_function(&fields, l, 4).unwrap(), s4, 1e-12));
        prop_assume!(s2 > 1e-6);
        let scales = ScaleSet::from_lags(&[l]).unwrap();
        prop_assert!(close(log_s2_curve(&fields, &scales).unwrap().values[0], s2.ln(), 1e-12));
        prop_assert!((skewness_curve(&fields, &scales).unwrap().values[0] - s3 / s2.powf(1.5)).abs() <= 1e-9 * (1.0 + s4 / (s2 * s2)));
        prop_assert!(close(flatness_curve(&fields, &scales).unwrap().values[0], s4 / (s2 * s2), 1e-12));
    }

    #[test]
    fn statistics_ignore_offsets_and_scale_by_powers(
        fields in fields_strategy(),
        offset in -100.0..100.0f64,
        gain in 0.1..10.0f64,
    ) {
        let n = fields[0].len();
        let l = 1.max(n / 3);
        let moved: Vec<Vec<f64>> = fields.iter().map(|f| f.iter().map(|v| gain * v + offset).collect()).collect();
        let s2 = structure_function(&fields, l, 2).unwrap();
        prop_assume!(s2 > 1e-6);
        prop_assert!(close(structure_function(&moved, l, 2).unwrap(), gain * gain * s2, 1e-9));
        let scales = ScaleSet::from_lags(&[l]).unwrap();
        let f0 = flatness_curve(&fields, &scales).unwrap().values[0];
        let f1 = flatness_curve(&moved, &scales).unwrap().values[0];
        prop_assert!(close(f0, f1, 1e-8));
    }

    #[test]
    fn increment_pdf_integrates_to_one(seed in any::<u64>(), l in 1usize..50) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<f64> = (0..3000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pdf = increment_pdf(&[f], l, PdfBins { count: 41, range: 5.0 }).unwrap();
        let mass: f64 = pdf.density.iter().sum::<f64>() * pdf.bin_width();
        prop_assert!((mass - 1.0).abs() < 1e-12);
        prop_assert_eq!(pdf.edges.len(), 42);
    }

    #[test]
    fn log_spaced_integer_scales_are_strictly_increasing(min in 1usize..20, span in 1usize..5000, count in 2usize..80) {
        let s = ScaleSet::log_spaced_integers(min, min + span, count).unwrap();
        let v = s.values();
        prop_assert!(v.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(v[0] >= min as f64 && *v.last().unwrap() <= (min + span) as f64);
        prop_assert!(v.iter().all(|x| x.fract() == 0.0));
    }
}

#[test]
fn ensemble_mean_is_the_mean_of_single_field_curves() {
    let a: Vec<f64> = (0..200).map(|i| ((i * i) % 17) as f64).collect();
    let b: Vec<f64> = (0..200).map(|i| ((i * 7) % 23) as f64 * 0.5).collect();
    let scales = ScaleSet::from_lags(&[1, 3, 10]).unwrap();
    let e = ensemble_stats(&[a.clone(), b.clone()], &scales).unwrap();
    let ca = skewness_curve(&[a], &scales).unwrap();
    let cb = skewness_curve(&[b], &scales).unwrap();
    for i in 0..3 {
        let mean = 0.5 * (ca.values[i] + cb.values[i]);
        let sd = 0.5 * (ca.values[i] - cb.values[i]).abs();
        assert!(close(e.skewness.values[i], mean, 1e-12));
        assert!(close(e.skewness.std.as_ref().unwrap()[i], sd, 1e-9));
    }
}

#[test]
fn slope_fit_recovers_a_power_law() {
    let scales = ScaleSet::log_spaced(1.0, 1000.0, 30).unwrap();
    let values = scales.values().iter().map(|l| 0.3 + 0.75 * l.ln()).collect();
    let curve = StatCurve::new(scales, values, StatKind::LogS2).unwrap();
    let fit = fit_loglog_slope(&curve, (10.0, 500.0)).unwrap();
    assert!((fit.slope - 0.75).abs() < 1e-12);
}
