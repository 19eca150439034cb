use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_case(seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..300);
    let p_obj = rng.gen_range(0.0..1.0);
    let gt: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(p_obj))).collect();
    let s = (0..n)
        .map(|i| {
            let base: f64 = rng.gen();
            if rng.gen_bool(0.5) {
                (base * 0.5 + 0.5 * f64::from(gt[i])).clamp(0.0, 1.0)
            } else {
                base
            }
        })
        .collect();
    (s, gt)
}

fn oracle_pr(pred: &[u8], gt: &[u8]) -> (f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for i in 0..pred.len() {
        if pred[i] == 1 && gt[i] == 1 {
            tp += 1.0;
        } else if pred[i] == 1 {
            fp += 1.0;
        } else if gt[i] == 1 {
            fn_ += 1.0;
        }
    }
    let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
    let r = if tp + fn_ == 0.0 { 1.0 } else { tp / (tp + fn_) };
    (p, r)
}

fn oracle_e(pred: &[u8], gt: &[u8]) -> f64 {
    let n = pred.len() as f64;
    let mg = gt.iter().map(|&g| g as f64).sum::<f64>() / n;
    if mg == 0.0 || mg == 1.0 {
        let mut s = 0.0;
        for i in 0..pred.len() {
            s += (pred[i] as f64 - gt[i] as f64).abs();
        }
        return 1.0 - s / n;
    }
    let mp = pred.iter().map(|&p| p as f64).sum::<f64>() / n;
    let mut total = 0.0;
    for i in 0..pred.len() {
        let a = pred[i] as f64 - mp;
        let b = gt[i] as f64 - mg;
        let xi = 2.0 * a * b / (a * a + b * b + 1e-12);
        total += (1.0 + xi) * (1.0 + xi) / 4.0;
    }
    total / n
}

fn oracle_iou(pred: &[u8], gt: &[u8]) -> f64 {
    let mut inter = 0.0;
    let mut union = 0.0;
    for i in 0..pred.len() {
        if pred[i] == 1 && gt[i] == 1 {
            inter += 1.0;
        }
        if pred[i] == 1 || gt[i] == 1 {
            union += 1.0;
        }
    }
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

#[test]
fn mae_examples() {
    assert_eq!(mae(&[1.0, 0.0], &[1, 0]).unwrap(), 0.0);
    assert!((mae(&[0.8, 0.4], &[1, 0]).unwrap() - 0.3).abs() < 1e-15);
    assert!(mae(&[0.1], &[1, 0]).is_err());
}

#[test]
fn precision_recall_examples() {
    assert_eq!(precision_recall(&[1, 0, 1], &[1, 0, 1]).unwrap(), (1.0, 1.0));
    assert_eq!(precision_recall(&[1, 1, 1, 1], &[1, 1, 0, 0]).unwrap(), (0.5, 1.0));
    assert_eq!(precision_recall(&[0, 0], &[0, 0]).unwrap(), (0.0, 1.0));
}

#[test]
fn f_measure_examples() {
    assert_eq!(f_measure(1.0, 1.0, 0.3), 1.0);
    assert!((f_measure(0.5, 1.0, 0.3) - 0.65 / 1.15).abs() < 1e-12);
    assert!((f_measure(0.7, 0.2, 1e-9) - 0.7).abs() < 1e-6);
    assert_eq!(f_measure(0.0, 0.0, 0.3), 0.0);
}

#[test]
fn e_measure_examples() {
    // The ε stabiliser keeps ξ at 1 − ε/(φ_p² + φ_g²), here 1 − 2e-12.
    let gt = [1, 0, 1, 0, 0, 1];
    assert!((e_measure(&gt, &gt).unwrap() - 1.0).abs() < 1e-11);
    let balanced = [1, 1, 0, 0];
    let flipped = [0, 0, 1, 1];
    assert!(e_measure(&flipped, &balanced).unwrap().abs() < 1e-12);
    assert_eq!(e_measure(&[0, 1, 0, 0], &[0, 0, 0, 0]).unwrap(), 0.75);
}

#[test]
fn iou_examples() {
    assert_eq!(iou(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
    assert_eq!(iou(&[1, 0, 0], &[0, 1, 0]).unwrap(), 0.0);
    assert_eq!(iou(&[1, 1, 1, 1], &[1, 1, 0, 0]).unwrap(), 0.5);
    assert_eq!(iou(&[0, 0], &[0, 0]).unwrap(), 1.0);
}

#[test]
fn metrics_match_loop_oracles() {
    for seed in 0..100 {
        let (s, gt) = random_case(seed);
        let mut m = 0.0;
        for i in 0..s.len() {
            m += (s[i] - gt[i] as f64).abs();
        }
        assert!((mae(&s, &gt).unwrap() - m / s.len() as f64).abs() <= 1e-12);
        let pred = binarize(&s, 0.5);
        let (p, r) = precision_recall(&pred, &gt).unwrap();
        let (op, or) = oracle_pr(&pred, &gt);
        assert!((p - op).abs() <= 1e-12 && (r - or).abs() <= 1e-12);
        let of = if 0.3 * op + or == 0.0 { 0.0 } else { 1.3 * op * or / (0.3 * op + or) };
        assert!((f_measure(p, r, 0.3) - of).abs() <= 1e-12);
        let e = e_measure(&pred, &gt).unwrap();
        assert!((0.0..=1.0).contains(&e));
        assert!((e - oracle_e(&pred, &gt)).abs() <= 1e-12);
        assert!((iou(&pred, &gt).unwrap() - oracle_iou(&pred, &gt)).abs() <= 1e-12);
    }
}

#[test]
fn sweep_matches_per_threshold_recomputation() {
    let thresholds = default_thresholds();
    assert_eq!(thresholds.len(), 255);
    for seed in 0..100 {
        let (s, gt) = random_case(seed);
        let curve = threshold_sweep(&s, &gt, &thresholds, 0.3).unwrap();
        for (row, &t) in curve.iter().zip(&thresholds) {
            let pred: Vec<u8> = s.iter().map(|&x| u8::from(x >= t)).collect();
            let (p, r) = oracle_pr(&pred, &gt);
            assert_eq!(row.threshold, t);
            assert!((row.precision - p).abs() <= 1e-12);
            assert!((row.recall - r).abs() <= 1e-12);
            assert!((row.e_measure - oracle_e(&pred, &gt)).abs() <= 1e-12);
        }
        assert!(curve.windows(2).all(|w| w[1].recall <= w[0].recall));
    }
}

#[test]
fn binary_saliency_gives_perfect_interior_rows() {
    let gt = [1, 0, 0, 1, 1, 0];
    let s: Vec<f64> = gt.iter().map(|&g| g as f64).collect();
    for row in threshold_sweep(&s, &gt, &default_thresholds(), 0.3).unwrap() {
        assert_eq!((row.precision, row.recall, row.f_measure), (1.0, 1.0, 1.0));
    }
    let r = evaluate_sample("a", &s, &gt, EvalOptions::default()).unwrap();
    assert_eq!((r.mae, r.iou, r.f_measure), (0.0, 1.0, 1.0));
    assert!((r.e_measure - 1.0).abs() < 1e-11);
}

#[test]
fn sweep_rejects_unsorted_thresholds() {
    assert!(threshold_sweep(&[0.5], &[1], &[0.5, 0.4], 0.3).is_err());
    assert!(threshold_sweep(&[0.5], &[1], &[0.5, 0.5], 0.3).is_err());
}

#[test]
fn aggregate_single_sample_is_identity() {
    let (s, gt) = random_case(3);
    let r = evaluate_sample("x", &s, &gt, EvalOptions::default()).unwrap();
    let agg = aggregate(vec![r.clone()], EvalOptions::default()).unwrap();
    assert_eq!((agg.mae, agg.iou), (r.mae, r.iou));
    assert_eq!(agg.curve, r.curve);
    assert_eq!(agg.f_measure, r.f_measure);
}

#[test]
fn aggregate_means_and_curve_rows() {
    let mut samples = Vec::new();
    for seed in 0..4 {
        let (s, gt) = random_case(seed + 20);
        samples.push(evaluate_sample(&format!("s{seed}"), &s, &gt, EvalOptions::default()).unwrap());
    }
    samples[0].iou = 0.4;
    samples[1].iou = 0.6;
    let two = aggregate(samples[..2].to_vec(), EvalOptions::default()).unwrap();
    assert!((two.iou - 0.5).abs() < 1e-15);
    let agg = aggregate(samples.clone(), EvalOptions::default()).unwrap();
    for (i, row) in agg.curve.iter().enumerate() {
        let p: f64 = samples.iter().map(|s| s.curve[i].precision).sum::<f64>() / 4.0;
        let f: f64 = samples.iter().map(|s| s.curve[i].f_measure).sum::<f64>() / 4.0;
        assert!((row.precision - p).abs() <= 1e-15 && (row.f_measure - f).abs() <= 1e-15);
    }
    let best = agg.curve.iter().map(|r| r.f_measure).fold(0.0, f64::max);
    assert_eq!(agg.f_measure, best);
    assert!(aggregate(Vec::new(), EvalOptions::default()).is_err());
}

#[test]
fn curve_csv_round_trip_is_bit_exact() {
    let (s, gt) = random_case(9);
    let curve = threshold_sweep(&s, &gt, &default_thresholds(), 0.3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    write_curve_csv(&path, &curve).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("threshold,precision,recall,f_measure,e_measure\n"));
    assert_eq!(text.lines().count(), 256);
    let back = read_curve_csv(&path).unwrap();
    for (a, b) in back.iter().zip(&curve) {
        assert_eq!(a.threshold.to_bits(), b.threshold.to_bits());
        assert_eq!(a.e_measure.to_bits(), b.e_measure.to_bits());
        assert_eq!(a.f_measure.to_bits(), b.f_measure.to_bits());
    }
    assert_eq!(back, curve);
}

#[test]
fn report_text_is_flat_key_value() {
    let (s, gt) = random_case(2);
    let r = evaluate_sample("scene_1", &s, &gt, EvalOptions::default()).unwrap();
    let agg = aggregate(vec![r], EvalOptions::default()).unwrap();
    let kv = parse_report(&agg.to_text()).unwrap();
    let get = |k: &str| kv.iter().find(|(key, _)| key == k).unwrap().1.parse::<f64>().unwrap();
    assert_eq!(get("mae"), agg.mae);
    assert_eq!(get("iou"), agg.iou);
    assert_eq!(get("sample.scene_1.f_measure"), agg.samples[0].f_measure);
}

proptest! {
    #[test]
    fn scores_bounded_and_mae_symmetric(seed in 0u64..100_000) {
        let (s, gt) = random_case(seed);
        let flipped_s: Vec<f64> = s.iter().map(|x| 1.0 - x).collect();
        let flipped_g: Vec<u8> = gt.iter().map(|g| 1 - g).collect();
        let a = mae(&s, &gt).unwrap();
        prop_assert!((a - mae(&flipped_s, &flipped_g).unwrap()).abs() < 1e-12);
        let r = evaluate_sample("p", &s, &gt, EvalOptions::default()).unwrap();
        for v in [r.mae, r.f_measure, r.e_measure, r.iou] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let positives = gt.iter().filter(|&&g| g == 1).count();
        for row in &r.curve {
            let pred = binarize(&s, row.threshold);
            let c = Confusion::of(&pred, &gt).unwrap();
            prop_assert_eq!((c.tp + c.fn_) as usize, positives);
        }
    }
}
