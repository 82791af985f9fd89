mod common;

use common::metrics::{auc_worst_deviation, dice_convention_violations, pairwise_auc};
use dualcorenet::metrics::{dice_coefficient, dice_from_probs, mean_std, roc_auc, EvalReport, RocCurve, SampleRecord};
use dualcorenet::plots::{emit_plots, gamma_sweep_figure, roc_figure, validation_loss_figure};
use dualcorenet::Error;
use proptest::prelude::*;

#[test]
fn auc_examples() {
    assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap().auc, 1.0);
    assert_eq!(roc_auc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap().auc, 0.5);
    let r = roc_auc(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0]).unwrap();
    assert_eq!(r.auc, 0.75);
    assert_eq!(pairwise_auc(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0]), 0.75);
    assert!(matches!(
        roc_auc(&[0.1, 0.2], &[1, 1]),
        Err(Error::DegenerateLabels { positives: 2, negatives: 0 })
    ));
    assert!(roc_auc(&[0.1, f64::NAN], &[1, 0]).is_err());
    assert!(roc_auc(&[0.1], &[1, 0]).is_err());
}

#[test]
fn auc_matches_pairwise_ranking_on_random_instances() {
    let worst = auc_worst_deviation(2024, 1000);
    println!("1000 instances, worst deviation {worst:e}");
    assert!(worst <= 1e-12);
}

#[test]
fn dice_examples() {
    let a = [true, true, false, false];
    assert_eq!(dice_coefficient(&a, &a).unwrap(), 1.0);
    let b = [false, true, true, false];
    assert_eq!(dice_coefficient(&a, &b).unwrap(), 0.5);
    assert_eq!(dice_coefficient(&[false; 5], &[false; 5]).unwrap(), 1.0);
    assert_eq!(dice_coefficient(&[true, false], &[false, true]).unwrap(), 0.0);
    assert!(dice_coefficient(&a, &[true]).is_err());
    assert_eq!(dice_from_probs(&[0.7, 0.2, 0.5, 0.49], &[1.0, 0.0, 1.0, 0.0]).unwrap(), 1.0);
}

#[test]
fn dice_conventions_hold_on_random_mask_pairs() {
    assert_eq!(dice_convention_violations(7, 10_000), 0);
}

fn check_curve(r: &RocCurve) {
    assert_eq!(r.points.first(), Some(&(0.0, 0.0)));
    assert_eq!(r.points.last(), Some(&(1.0, 1.0)));
    assert!(r.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
    assert_eq!(r.points.len(), r.thresholds.len());
    assert_eq!(r.thresholds[0], f64::INFINITY);
    assert!(r.thresholds.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(r.auc, RocCurve::trapezoid(&r.points));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn roc_curve_invariants(
        data in prop::collection::vec((0.0f64..1.0, 0u8..2), 2..40),
    ) {
        let (scores, labels): (Vec<f64>, Vec<u8>) = data.into_iter().unzip();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let r = roc_auc(&scores, &labels).unwrap();
        check_curve(&r);
        prop_assert!((0.0..=1.0).contains(&r.auc));
    }

    #[test]
    fn negating_tie_free_scores_complements_auc(
        data in prop::collection::btree_map(0u32..100_000, 0u8..2, 2..40),
    ) {
        let (scores, labels): (Vec<f64>, Vec<u8>) = data.into_iter().map(|(s, l)| (s as f64, l)).unzip();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = roc_auc(&scores, &labels).unwrap().auc;
        let b = roc_auc(&neg, &labels).unwrap().auc;
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }
}

fn record(i: usize, label: u8, p: f64, dice: f64) -> SampleRecord {
    SampleRecord {
        index: i,
        patient_id: format!("P{i}"),
        label,
        p_malignant: p,
        dice,
        dice_cnn: dice - 0.01,
    }
}

#[test]
fn report_aggregates_are_recomputable() {
    let samples = vec![
        record(0, 0, 0.2, 0.9),
        record(1, 1, 0.8, 0.8),
        record(2, 1, 0.6, 0.95),
        record(3, 0, 0.7, 0.85),
    ];
    let r = EvalReport::from_samples(samples.clone()).unwrap();
    let dice: Vec<f64> = samples.iter().map(|s| s.dice).collect();
    let mean = dice.iter().sum::<f64>() / 4.0;
    let std = (dice.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    assert!((r.mean_dice - mean).abs() < 1e-15);
    assert!((r.std_dice - std).abs() < 1e-15);
    assert_eq!(r.auc, Some(0.75));
    assert_eq!(r.accuracy(), 0.75);
    assert_eq!(mean_std(&dice), (r.mean_dice, r.std_dice));

    let one_class = EvalReport::from_samples(vec![record(0, 1, 0.3, 1.0)]).unwrap();
    assert_eq!(one_class.auc, None);
    assert!(EvalReport::from_samples(vec![]).is_err());
}

#[test]
fn roc_figure_has_one_series_per_curve_and_is_deterministic() {
    let curves: Vec<RocCurve> = [[0.9, 0.1, 0.6, 0.4], [0.9, 0.8, 0.3, 0.2], [0.2, 0.4, 0.6, 0.8]]
        .iter()
        .map(|s| roc_auc(s, &[1, 0, 1, 0]).unwrap())
        .collect();
    let labelled: Vec<(String, &RocCurve)> = ["fusion+lpl", "fusion+cgl", "fusion+both"]
        .iter()
        .zip(&curves)
        .map(|(l, c)| (l.to_string(), c))
        .collect();
    let f = roc_figure(&labelled);
    assert_eq!(f.series.len(), 3);
    assert_eq!(f.to_csv(), roc_figure(&labelled).to_csv());
    assert_eq!(f.to_svg(), roc_figure(&labelled).to_svg());
    assert_eq!(f.to_svg().matches("<polyline").count(), 3);

    let single = roc_figure(&labelled[..1]);
    assert_eq!(single.series.len(), 1);

    let g = gamma_sweep_figure("dice", &[(0.0, 0.8), (0.42, 0.85), (0.65, 0.86), (1.0, 0.84)]);
    assert_eq!(g.to_csv().lines().count(), 5);
    assert!(validation_loss_figure(&[]).series.is_empty());

    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(emit_plots(&[], dir.path()), Err(Error::EmptyInput)));
    let (svg, csv) = f.write(dir.path(), "roc").unwrap();
    assert_eq!(std::fs::read_to_string(csv).unwrap(), f.to_csv());
    assert!(std::fs::read_to_string(svg).unwrap().starts_with("<svg"));
}
