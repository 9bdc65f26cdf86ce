use chrono::{DateTime, Duration, TimeZone, Utc};
use proptest::prelude::*;

use reflex::analysis::{reflex_decide, DecisionMode, OperatingPoint, ReflexAction};
use reflex::cohort::{CbcEvent, LabelPolicy};
use reflex::domain::{Analyte, Gender, LabResult, ReferenceRanges};
use reflex::featurize::{historical_aggregates, FeatureMatrix, FeatureSchema, ScalerStats};
use reflex::learn::{split_monte_carlo, train_forest, train_logistic, ForestParams, Partition};
use reflex::metrics::{roc_curve, spearman_rho, wilson_ci};
use reflex::rules::{evaluate_rule, ReflexRule, RuleContext};

fn base() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2021, 3, 1, 9, 0, 0).unwrap()
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..20, n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(s, mut y)| {
                y[0] = true;
                y[1] = false;
                (s.into_iter().map(|v| v as f64 / 19.0).collect(), y)
            })
    })
}

proptest! {
    #[test]
    fn auroc_is_a_probability_and_flips_with_scores((s, y) in scored()) {
        let a = roc_curve(&s, &y).unwrap().area;
        prop_assert!((0.0..=1.0).contains(&a));
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let b = roc_curve(&neg, &y).unwrap().area;
        prop_assert!((a + b - 1.0).abs() < 1e-12);
        let squashed: Vec<f64> = s.iter().map(|v| v.powi(3) * 5.0 + 1.0).collect();
        prop_assert_eq!(roc_curve(&squashed, &y).unwrap().area, a);
    }

    #[test]
    fn roc_points_are_monotone((s, y) in scored()) {
        let c = roc_curve(&s, &y).unwrap();
        for w in c.points.windows(2) {
            prop_assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
        }
        prop_assert_eq!(c.points.last().copied(), Some((1.0, 1.0)));
    }

    #[test]
    fn wilson_interval_brackets_the_point(n in 1u64..500, frac in 0.0f64..=1.0) {
        let k = (frac * n as f64).round() as u64;
        let (lo, hi) = wilson_ci(k, n, 0.95).unwrap();
        let p = k as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p && p <= hi && hi <= 1.0);
    }

    #[test]
    fn spearman_is_bounded_and_symmetric(
        xs in prop::collection::vec(-100.0f64..100.0, 3..40),
        seed in any::<u64>(),
    ) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, v)| (v * 7.0 + (seed % 97) as f64 * i as f64).sin()).collect();
        if let (Ok(a), Ok(b)) = (spearman_rho(&xs, &ys), spearman_rho(&ys, &xs)) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
            prop_assert!((a - b).abs() < 1e-12);
        }
        if let Ok(r) = spearman_rho(&xs, &xs) {
            prop_assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregates_are_consistent(
        pts in prop::collection::vec((0i64..2000, -10.0f64..500.0), 0..50),
        a in 0i64..2000,
        len in 0i64..2000,
    ) {
        let mut series: Vec<(DateTime<Utc>, f64)> =
            pts.iter().map(|&(d, v)| (base() + Duration::days(d), v)).collect();
        series.sort_by_key(|p| p.0);
        let (start, end) = (base() + Duration::days(a), base() + Duration::days(a + len));
        let g = historical_aggregates(&series, start, end);
        let inside = series.iter().filter(|(t, _)| *t >= start && *t <= end).count();
        prop_assert_eq!(g.count, inside);
        if inside > 0 {
            let (mean, sum) = (g.mean.unwrap(), g.sum.unwrap());
            prop_assert!((sum - mean * inside as f64).abs() <= 1e-9 * sum.abs().max(1.0));
            prop_assert!(g.min.unwrap() <= mean && mean <= g.max.unwrap());
            prop_assert!(g.std >= 0.0);
        } else {
            prop_assert!(g.mean.is_none() && g.sum.is_none());
        }
    }

    #[test]
    fn splits_partition_patients(
        n_patients in 10usize..200,
        runs in 1usize..5,
        seed in any::<u64>(),
    ) {
        let ids: Vec<String> = (0..n_patients * 2).map(|i| format!("P{}", i % n_patients)).collect();
        let plan = split_monte_carlo(&ids, runs, (0.8, 0.1, 0.1), seed).unwrap();
        for run in 0..runs {
            let mut total = 0;
            for part in [Partition::Train, Partition::Tune, Partition::Test] {
                let rows = plan.rows(run, &ids, part);
                total += rows.len();
                for r in rows {
                    prop_assert_eq!(plan.partition_of(run, &ids[r]), Some(part));
                }
            }
            prop_assert_eq!(total, ids.len());
        }
        let again = split_monte_carlo(&ids, runs, (0.8, 0.1, 0.1), seed).unwrap();
        prop_assert_eq!(plan, again);
    }

    #[test]
    fn scaled_training_columns_are_standardized(
        vals in prop::collection::vec(prop::option::of(-50.0f64..50.0), 40),
    ) {
        let schema = FeatureSchema::new(true);
        let d = schema.len();
        let n = 20;
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            data[i * d] = 30.0 + i as f64;
            data[i * d + 2] = vals[i].unwrap_or(f64::NAN);
            data[i * d + 3] = vals[20 + i].unwrap_or(f64::NAN);
        }
        let m = FeatureMatrix::new(
            schema,
            (0..n).map(|i| format!("E{i}")).collect(),
            (0..n).map(|i| format!("P{i}")).collect(),
            (0..n).map(|i| i % 3 == 0).collect(),
            data,
        )
        .unwrap();
        let rows: Vec<usize> = (0..n).collect();
        let sc = ScalerStats::fit(&m, &rows).unwrap();
        let x = sc.transform_rows(&m, &rows);
        for c in 0..d {
            let mean = (0..n).map(|i| x[i * d + c]).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!(x.iter().all(|v| v.is_finite()));
            if sc.std[c] > 0.0 {
                let var = (0..n).map(|i| (x[i * d + c] - mean).powi(2)).sum::<f64>() / n as f64;
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rule_lattice_holds(
        hct in 20.0f64..55.0,
        mcv in 60.0f64..110.0,
        rdw in 10.0f64..20.0,
        male in any::<bool>(),
        prior in any::<bool>(),
    ) {
        use ReflexRule::*;
        let ranges = ReferenceRanges::default();
        let ctx = RuleContext {
            hct: Some(hct),
            mcv: Some(mcv),
            rdw: Some(rdw),
            gender: if male { Gender::Male } else { Gender::Female },
            prior_ferritin: prior,
        };
        let f = |r| evaluate_rule(r, &ctx, &ranges).unwrap();
        prop_assert!(!f(LowHctAndLowMcvAndHighRdw) || f(LowMcvAndHighRdw));
        prop_assert!(!f(LowMcvAndHighRdw) || f(LowMcv));
        prop_assert!(!f(LowMcv) || f(LowHctOrLowMcv));
        prop_assert!(!f(PriorFerritinAndLowMcv) || (f(PriorFerritin) && f(LowMcv)));
        prop_assert!(!f(PriorFerritinAndLowHct) || (f(PriorFerritin) && f(LowHct)));
    }

    #[test]
    fn refined_labels_only_add_recent_pre_cbc_ferritins(
        offsets in prop::collection::vec(-200i64..60 * 24 * 35, 0..6),
    ) {
        let t = base();
        let results: Vec<LabResult> = offsets
            .iter()
            .map(|&m| LabResult {
                patient_id: "P1".into(),
                analyte: Analyte::Ferritin,
                value: 20.0,
                collected_at: t + Duration::minutes(m),
            })
            .collect();
        let event = CbcEvent {
            event_id: "E".into(),
            patient_id: "P1".into(),
            t,
            cbc: [None; 9],
            label: false,
            age_years: 50.0,
            gender: Gender::Female,
        };
        let p = reflex::cohort::label_event(&event, &results, &LabelPolicy::primary());
        let r = reflex::cohort::label_event(&event, &results, &LabelPolicy::refined());
        prop_assert!(!p || r);
        let pre = offsets.iter().any(|&m| (-60..0).contains(&m));
        let post = offsets.iter().any(|&m| (0..=30 * 24 * 60).contains(&m));
        prop_assert_eq!(p, post);
        prop_assert_eq!(r, post || pre);
    }

    #[test]
    fn decisions_follow_the_threshold(p in 0.0f64..=1.0, thr in 0.0f64..=1.0, ordered in any::<bool>()) {
        let v1 = reflex_decide(p, OperatingPoint::new(DecisionMode::Variation1Cancel, thr).unwrap(), ordered).unwrap();
        prop_assert_eq!(v1.action == ReflexAction::CancelFerritin, ordered && p < thr);
        prop_assert!(v1.action != ReflexAction::AddFerritin);
        let v2 = reflex_decide(p, OperatingPoint::new(DecisionMode::Variation2Add, thr).unwrap(), ordered).unwrap();
        prop_assert_eq!(v2.action == ReflexAction::AddFerritin, !ordered && p >= thr);
        prop_assert!(v2.action != ReflexAction::CancelFerritin);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forest_predictions_are_probabilities_and_prefix_stable(
        seed in any::<u64>(),
        n in 30usize..120,
        depth in prop::option::of(1usize..6),
    ) {
        let d = 3;
        let x: Vec<f64> = (0..n * d).map(|i| ((i as u64).wrapping_mul(seed | 1) % 101) as f64 / 10.0).collect();
        let y: Vec<bool> = (0..n).map(|i| x[i * d] + x[i * d + 1] > 10.0 || i % 7 == 0).collect();
        prop_assume!(y.iter().any(|&v| v) && y.iter().any(|&v| !v));
        let params = ForestParams { n_trees: 12, max_depth: depth, min_samples_leaf: 2, ..ForestParams::default() };
        let big = train_forest(&x, d, &y, &params, seed, &[0]).unwrap();
        let small = train_forest(&x, d, &y, &ForestParams { n_trees: 5, ..params.clone() }, seed, &[0]).unwrap();
        prop_assert_eq!(&big.truncated(5), &small);
        for i in 0..n {
            let p = big.predict(&x[i * d..(i + 1) * d]);
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn logistic_converges_and_scores_are_probabilities(
        seed in any::<u64>(),
        l2 in prop::sample::select(vec![1e-3, 1e-2, 1e-1, 1.0]),
    ) {
        let n = 200;
        let d = 4;
        let x: Vec<f64> = (0..n * d)
            .map(|i| (((i as u64 + 1).wrapping_mul(seed | 1) >> 7) % 1000) as f64 / 250.0 - 2.0)
            .collect();
        let y: Vec<bool> = (0..n).map(|i| x[i * d] - x[i * d + 2] > 0.3 * ((i % 5) as f64 - 2.0)).collect();
        prop_assume!(y.iter().any(|&v| v) && y.iter().any(|&v| !v));
        let fit = train_logistic(&x, d, &y, l2, None).unwrap();
        prop_assert!(fit.converged);
        for i in 0..n {
            let p = fit.model.predict(&x[i * d..(i + 1) * d]);
            prop_assert!(p > 0.0 && p < 1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    // split thresholds sit exactly on training values, so a one-ulp drift
    // after reloading reroutes those rows
    #[test]
    fn forest_json_round_trip_is_exact(seed in any::<u64>()) {
        let d = 4;
        let n = 300;
        let x: Vec<f64> = (0..n * d)
            .map(|i| ((((i as u64) ^ seed).wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 11) as f64 / (1u64 << 53) as f64 - 0.5) / 0.29)
            .collect();
        let y: Vec<bool> = (0..n).map(|i| x[i * d] + 0.5 * x[i * d + 1] > 0.1).collect();
        prop_assume!(y.iter().any(|&v| v) && y.iter().any(|&v| !v));
        let params = ForestParams { n_trees: 8, min_samples_leaf: 1, ..ForestParams::default() };
        let f = train_forest(&x, d, &y, &params, seed, &[0]).unwrap();
        let back: reflex::learn::ForestModel = serde_json::from_str(&serde_json::to_string(&f).unwrap()).unwrap();
        prop_assert_eq!(&back, &f);
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            prop_assert_eq!(back.predict(row).to_bits(), f.predict(row).to_bits());
        }
    }
}
