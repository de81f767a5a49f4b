use confforge::conditional::{fit_grouped, partition_bins, BinSource, BinSpec};
use confforge::conformal::{conformal_quantile, conformal_rank, fit_split, min_finite_size, PredictionInterval};
use confforge::metrics::{affine_calibrate, coverage, default_levels, ece};
use confforge::quantile_fit::{pinball_loss, qnt_heuristics_nonsym, qnt_heuristics_sym};
use confforge::record::{RegressionRecord, UncertaintyEstimate};
use confforge::scores::{heuristics_of, score_asymmetric, score_symmetric, sigma_to_delta, ScoreKind};
use confforge::split::split_harness;
use proptest::prelude::*;

fn records_from(rows: &[(f64, f64, f64)]) -> Vec<RegressionRecord> {
    rows.iter()
        .enumerate()
        .map(|(i, &(y_hat, sigma, y))| {
            RegressionRecord::new(format!("r{i}"), y_hat, UncertaintyEstimate::Sigma(sigma)).with_truth(y)
        })
        .collect()
}

fn row() -> impl Strategy<Value = (f64, f64, f64)> {
    (-10.0..10.0f64, 0.01..5.0f64, -10.0..10.0f64)
}

fn alpha_pct() -> impl Strategy<Value = f64> {
    (1u32..=19).prop_map(|k| f64::from(k) * 0.05)
}

proptest! {
    #[test]
    fn scores_are_non_negative_and_zero_at_prediction(y in -1e3..1e3f64, y_hat in -1e3..1e3f64, d in 1e-3..1e3f64, d2 in 1e-3..1e3f64) {
        prop_assert!(score_symmetric(y, y_hat, d).unwrap() >= 0.0);
        prop_assert!(score_asymmetric(y, y_hat, d, d2).unwrap() >= 0.0);
        prop_assert_eq!(score_symmetric(y_hat, y_hat, d).unwrap(), 0.0);
        prop_assert_eq!(score_asymmetric(y_hat, y_hat, d, d2).unwrap(), 0.0);
    }

    #[test]
    fn asymmetric_score_reduces_to_symmetric(y in -1e3..1e3f64, y_hat in -1e3..1e3f64, d in 1e-3..1e3f64) {
        prop_assert_eq!(score_asymmetric(y, y_hat, d, d).unwrap(), score_symmetric(y, y_hat, d).unwrap());
    }

    #[test]
    fn scores_are_shift_invariant(y in -10.0..10.0f64, y_hat in -10.0..10.0f64, d in 0.1..10.0f64, c in -10.0..10.0f64) {
        let base = score_symmetric(y, y_hat, d).unwrap();
        let shifted = score_symmetric(y + c, y_hat + c, d).unwrap();
        prop_assert!((base - shifted).abs() <= 1e-12 * (1.0 + base) + 4.0 * f64::EPSILON * (y.abs() + c.abs() + y_hat.abs()) / d);
    }

    #[test]
    fn scores_are_scale_covariant(y in -10.0..10.0f64, y_hat in -10.0..10.0f64, d in 0.1..10.0f64, d2 in 0.1..10.0f64, c in 0.01..100.0f64) {
        let s = score_symmetric(y, y_hat, d).unwrap();
        prop_assert!((score_symmetric(y, y_hat, c * d).unwrap() - s / c).abs() <= 1e-12 * (1.0 + s / c));
        let a = score_asymmetric(y, y_hat, d, d2).unwrap();
        prop_assert!((score_asymmetric(y, y_hat, c * d, c * d2).unwrap() - a / c).abs() <= 1e-12 * (1.0 + a / c));
    }

    #[test]
    fn sigma_to_delta_decreases_in_alpha(sigma in 0.01..10.0f64, a1 in 0.01..0.99f64, a2 in 0.01..0.99f64) {
        prop_assume!(a1 < a2);
        prop_assert!(sigma_to_delta(sigma, a1).unwrap() > sigma_to_delta(sigma, a2).unwrap());
    }

    #[test]
    fn quantile_is_monotone_in_alpha(scores in prop::collection::vec(0.0..10.0f64, 1..80), a1 in 0.01..0.99f64, a2 in 0.01..0.99f64) {
        prop_assume!(a1 < a2);
        prop_assert!(conformal_quantile(&scores, a1).unwrap() >= conformal_quantile(&scores, a2).unwrap());
    }

    #[test]
    fn calibration_duality_counts_the_rank(rows in prop::collection::vec(row(), 10..200), alpha in alpha_pct()) {
        let cal = records_from(&rows);
        let fit = fit_split(&cal, alpha, ScoreKind::Symmetric).unwrap();
        let mut distinct = fit.scores.clone();
        distinct.dedup();
        prop_assume!(distinct.len() == fit.scores.len() && fit.is_bounded());
        let below = fit.scores.iter().filter(|&&s| s <= fit.q_hat).count();
        prop_assert_eq!(below, conformal_rank(cal.len(), alpha));
    }

    #[test]
    fn interval_membership_is_dual_to_score(y_hat in -10.0..10.0f64, d in 1e-3..10.0f64, d2 in 1e-3..10.0f64, q in 0.0..5.0f64, offset in -1e-9..1e-9f64) {
        for (kind, u) in [
            (ScoreKind::Symmetric, UncertaintyEstimate::Delta(d)),
            (ScoreKind::Asymmetric, UncertaintyEstimate::Asymmetric { lo: d, hi: d2 }),
        ] {
            let rec = RegressionRecord::new("p", y_hat, u);
            let h = heuristics_of(&rec, 0.1, kind).unwrap();
            let iv = h.interval(q);
            for edge in [iv.lo, iv.hi] {
                let mut y = edge + offset;
                for _ in 0..4 {
                    prop_assert_eq!(iv.contains(y), h.score(y) <= q, "y={} kind={}", y, kind);
                    y = y.next_up();
                }
                let mut y = edge.next_down();
                for _ in 0..4 {
                    prop_assert_eq!(iv.contains(y), h.score(y) <= q, "y={} kind={}", y, kind);
                    y = y.next_down();
                }
            }
        }
    }

    #[test]
    fn scaling_every_delta_leaves_intervals_unchanged(rows in prop::collection::vec(row(), 10..100), c in 0.1..10.0f64, alpha in alpha_pct()) {
        let base = records_from(&rows);
        let scaled: Vec<RegressionRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, &(y_hat, s, y))| RegressionRecord::new(format!("r{i}"), y_hat, UncertaintyEstimate::Sigma(s * c)).with_truth(y))
            .collect();
        let f1 = fit_split(&base, alpha, ScoreKind::Symmetric).unwrap();
        let f2 = fit_split(&scaled, alpha, ScoreKind::Symmetric).unwrap();
        prop_assume!(f1.is_bounded());
        prop_assert!((f2.q_hat - f1.q_hat / c).abs() <= 1e-12 * f1.q_hat / c + 1e-300);
        for (a, b) in base.iter().zip(&scaled) {
            let i1 = f1.predict(a).unwrap();
            let i2 = f2.predict(b).unwrap();
            let ulps = |x: f64, y: f64| 4.0 * f64::EPSILON * x.abs().max(y.abs()).max(f64::MIN_POSITIVE);
            // the unscaled width is itself rounded, so compare relative to it
            let tol_lo = ulps(i1.lo, i2.lo) + 4.0 * f64::EPSILON * i1.width();
            let tol_hi = ulps(i1.hi, i2.hi) + 4.0 * f64::EPSILON * i1.width();
            prop_assert!((i1.lo - i2.lo).abs() <= tol_lo, "{:?} vs {:?}", i1, i2);
            prop_assert!((i1.hi - i2.hi).abs() <= tol_hi, "{:?} vs {:?}", i1, i2);
        }
    }

    #[test]
    fn fits_ignore_record_order(rows in prop::collection::vec(row(), 250..400), seed in any::<u64>(), alpha in alpha_pct()) {
        let cal = records_from(&rows);
        let mut shuffled = cal.clone();
        let n = shuffled.len();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(fit_split(&cal, alpha, ScoreKind::Symmetric).unwrap().q_hat, fit_split(&shuffled, alpha, ScoreKind::Symmetric).unwrap().q_hat);
        let g1: Vec<RegressionRecord> = cal.iter().enumerate().map(|(i, r)| r.clone().with_group(["a", "b"][i % 2])).collect();
        let mut g2 = g1.clone();
        g2.reverse();
        prop_assert_eq!(fit_grouped(&g1, alpha, ScoreKind::Symmetric, 10).unwrap(), fit_grouped(&g2, alpha, ScoreKind::Symmetric, 10).unwrap());
        let spec = BinSpec { min_bin_size: 100, max_bins: 20 };
        let p1 = partition_bins(&cal, &BinSource::PredictedUncertainty, &spec, 0.1, ScoreKind::Symmetric).unwrap();
        let p2 = partition_bins(&shuffled, &BinSource::PredictedUncertainty, &spec, 0.1, ScoreKind::Symmetric).unwrap();
        prop_assert_eq!(p1.boundaries, p2.boundaries);
        prop_assert_eq!(p1.bin_counts, p2.bin_counts);
        prop_assert_eq!(p1.bin_quantiles, p2.bin_quantiles);
    }

    #[test]
    fn mondrian_assignment_is_idempotent_on_calibration(rows in prop::collection::vec(row(), 200..700)) {
        let cal = records_from(&rows);
        let spec = BinSpec { min_bin_size: 50, max_bins: 20 };
        let p = partition_bins(&cal, &BinSource::PredictedUncertainty, &spec, 0.1, ScoreKind::Symmetric).unwrap();
        let mut counts = vec![0usize; p.n_bins()];
        let mut sorted: Vec<f64> = cal.iter().map(|r| heuristics_of(r, 0.1, ScoreKind::Symmetric).unwrap().spread()).collect();
        sorted.sort_by(f64::total_cmp);
        for r in &cal {
            counts[p.assign(r).unwrap()] += 1;
        }
        prop_assert_eq!(counts.iter().sum::<usize>(), cal.len());
        prop_assert_eq!(&counts, &p.bin_counts);
        for w in p.bin_means.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn single_group_or_bin_reproduces_split(rows in prop::collection::vec(row(), 20..200), alpha in alpha_pct()) {
        let cal = records_from(&rows);
        let split = fit_split(&cal, alpha, ScoreKind::Symmetric).unwrap();
        let grouped = fit_grouped(&cal, alpha, ScoreKind::Symmetric, 1).unwrap();
        prop_assert_eq!(grouped.quantiles[""].q_hat, split.q_hat);
        let spec = BinSpec { min_bin_size: cal.len(), max_bins: 1 };
        if cal.len() >= min_finite_size(0.1) {
            let p = partition_bins(&cal, &BinSource::PredictedUncertainty, &spec, 0.1, ScoreKind::Symmetric).unwrap();
            prop_assert_eq!(p.bin_quantiles[0], fit_split(&cal, 0.1, ScoreKind::Symmetric).unwrap().q_hat);
        }
    }

    #[test]
    fn coverage_is_shift_invariant(ivs in prop::collection::vec((-5000i32..5000, 0i32..3000, -6000i32..6000), 1..60), c in -100_000i32..100_000) {
        // values on a 1/1024 grid so every shift is exact
        let v = |k: i32| f64::from(k) / 1024.0;
        let c = v(c);
        let intervals: Vec<PredictionInterval> = ivs.iter().map(|&(lo, w, _)| PredictionInterval::new(v(lo), v(lo + w))).collect();
        let ys: Vec<f64> = ivs.iter().map(|t| v(t.2)).collect();
        let shifted: Vec<PredictionInterval> = intervals.iter().map(|i| PredictionInterval::new(i.lo + c, i.hi + c)).collect();
        let sys: Vec<f64> = ys.iter().map(|y| y + c).collect();
        prop_assert_eq!(coverage(&intervals, &ys).unwrap(), coverage(&shifted, &sys).unwrap());
    }

    #[test]
    fn heuristics_agree_for_centred_median(lo in -10_000i32..10_000, half in 1i32..10_000) {
        // dyadic endpoints keep the midpoint and both deltas exact
        let lo = f64::from(lo) / 1024.0;
        let hi = lo + f64::from(2 * half) / 1024.0;
        let mid = 0.5 * (lo + hi);
        let ns = qnt_heuristics_nonsym(lo, mid, hi);
        let s = qnt_heuristics_sym(lo, hi);
        prop_assert_eq!(ns.y_hat, s.y_hat);
        prop_assert_eq!(ns.delta_lo, s.delta);
        prop_assert_eq!(ns.delta_hi, s.delta);
    }

    #[test]
    fn pinball_is_zero_only_at_equality(y in -10.0..10.0f64, y_hat in -10.0..10.0f64, tau in 0.01..0.99f64) {
        let l = pinball_loss(y_hat, y, tau).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, y == y_hat);
    }

    #[test]
    fn splits_partition_and_are_deterministic(n in 20usize..120, k in 1usize..6, seed in any::<u64>()) {
        let recs: Vec<RegressionRecord> = (0..n)
            .map(|i| RegressionRecord::new(format!("r{i}"), 0.0, UncertaintyEstimate::Sigma(1.0)).with_truth(0.0).with_group(["x", "y"][i % 2]))
            .collect();
        let cal = n / 2;
        let a = split_harness(&recs, k, cal, seed, false).unwrap();
        let b = split_harness(&recs, k, cal, seed, false).unwrap();
        prop_assert_eq!(&a, &b);
        for plan in &a {
            prop_assert_eq!(plan.calibration.len() + plan.test.len(), n);
            prop_assert!(plan.calibration_ids(&recs).is_disjoint(&plan.test_ids(&recs)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn affine_fit_never_worsens_ece(rows in prop::collection::vec(row(), 100..400)) {
        let cal = records_from(&rows);
        prop_assume!(rows.iter().any(|r| r.0 != r.2));
        let levels = default_levels();
        let fit = affine_calibrate(&cal, &levels, 0.1).unwrap();
        let before = ece(&cal, &levels, 0.1).unwrap();
        prop_assert!(fit.ece_after <= before + 1e-15);
        prop_assert!((0.0..=1.0).contains(&fit.ece_after));
    }
}
