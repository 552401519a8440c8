//! Group-wise conformal calibration and its Monte-Carlo harnesses.

use ldpm_core::conformal::{
    calibrate, conformal_quantile, conformal_rank, coverage, coverage_by_group, coverage_experiment,
    length_ratio_experiment, ConformalCalibration, GroupCalibration,
};
use proptest::prelude::*;

#[test]
fn zero_cutoff_gives_point_intervals() {
    let cal = ConformalCalibration {
        alpha: 0.1,
        groups: vec![GroupCalibration { scores: vec![0.0; 3], rank: 3, q: 0.0, degenerate: false }],
    };
    assert_eq!(cal.interval(1.25, 0).unwrap(), (1.25, 1.25));
}

#[test]
fn nineteen_scores_use_the_eighteenth() {
    let scores: Vec<f64> = (0..19).map(|k| (k as f64 * 7.3) % 5.0).collect();
    let groups = vec![0; 19];
    let cal = calibrate(&[0.0; 19], &scores, &groups, 1, 0.1).unwrap();
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(cal.groups[0].rank, 18);
    assert_eq!(cal.groups[0].q, sorted[17]);
}

#[test]
fn groups_are_calibrated_separately() {
    let pred = [0.0; 6];
    let truth = [0.1, -0.2, 0.3, 5.0, -6.0, 7.0];
    let groups = [0, 0, 0, 1, 1, 1];
    let cal = calibrate(&pred, &truth, &groups, 2, 0.5).unwrap();
    assert_eq!(cal.groups[0].q, 0.2);
    assert_eq!(cal.groups[1].q, 6.0);
    let iv: Vec<(f64, f64)> = groups.iter().map(|&g| cal.interval(0.0, g).unwrap()).collect();
    let by = coverage_by_group(&iv, &truth, &groups, 3).unwrap();
    assert_eq!(by, vec![Some(2.0 / 3.0), Some(2.0 / 3.0), None]);
}

#[test]
fn bad_inputs_are_rejected() {
    assert!(calibrate(&[0.0], &[0.0], &[0], 1, 1.0).is_err());
    assert!(calibrate(&[0.0], &[0.0], &[2], 1, 0.1).is_err());
    assert!(calibrate(&[0.0, 1.0], &[0.0], &[0], 1, 0.1).is_err());
    assert!(coverage_experiment(0, 10, 0.1, 2, 0).is_err());
}

#[test]
fn coverage_is_near_nominal_at_moderate_calibration_size() {
    let cov = coverage_experiment(500, 1000, 0.1, 200, 1).unwrap();
    let mean = cov.iter().sum::<f64>() / cov.len() as f64;
    assert!((0.87..=0.93).contains(&mean), "{mean}");
}

#[test]
fn equal_noise_gives_unit_length_ratio() {
    let r = length_ratio_experiment(1.0, 1.0, 1000, 0.1, 200, 2).unwrap();
    assert!((r.mean - 1.0).abs() < 0.05, "{}", r.mean);
}

#[test]
fn vanishing_joint_noise_gives_vanishing_ratio() {
    let r = length_ratio_experiment(1.0, 1e-6, 500, 0.1, 50, 3).unwrap();
    assert!(r.mean < 1e-5, "{}", r.mean);
}

#[test]
fn experiments_are_reproducible() {
    assert_eq!(coverage_experiment(50, 100, 0.1, 20, 9).unwrap(), coverage_experiment(50, 100, 0.1, 20, 9).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rank_matches_ceiling_formula(m in 1usize..5000, a in 1u32..99) {
        let alpha = a as f64 / 100.0;
        let rank = conformal_rank(m, alpha);
        // Integer oracle: ceil((m + 1)(100 - a) / 100).
        let num = (m as u64 + 1) * (100 - a as u64);
        let oracle = num.div_ceil(100) as usize;
        prop_assert_eq!(rank, oracle.max(1));
    }

    #[test]
    fn cutoff_covers_its_own_calibration_share(
        scores in proptest::collection::vec(0.0f64..10.0, 1..200),
        a in 1u32..50,
    ) {
        let alpha = a as f64 / 100.0;
        let mut s = scores.clone();
        s.sort_by(f64::total_cmp);
        let (q, rank, degenerate) = conformal_quantile(&s, alpha);
        let covered = s.iter().filter(|&&v| v <= q).count();
        prop_assert!(covered >= rank.min(s.len()));
        prop_assert_eq!(degenerate, rank > s.len());
        prop_assert!(covered as f64 >= (1.0 - alpha) * s.len() as f64 - 1e-9);
    }

    #[test]
    fn intervals_contain_the_prediction(y in -100.0f64..100.0, q in 0.0f64..10.0) {
        let cal = ConformalCalibration {
            alpha: 0.1,
            groups: vec![GroupCalibration { scores: vec![q], rank: 1, q, degenerate: false }],
        };
        let (lo, hi) = cal.interval(y, 0).unwrap();
        prop_assert!(lo <= y && y <= hi);
        prop_assert!((hi - lo - 2.0 * q).abs() < 1e-9);
        prop_assert_eq!(coverage(&[(lo, hi)], &[y]).unwrap(), 1.0);
    }

    #[test]
    fn smaller_alpha_never_shrinks_the_cutoff(scores in proptest::collection::vec(0.0f64..10.0, 2..100)) {
        let mut s = scores;
        s.sort_by(f64::total_cmp);
        let wide = conformal_quantile(&s, 0.05).0;
        let narrow = conformal_quantile(&s, 0.3).0;
        prop_assert!(wide >= narrow);
    }
}
