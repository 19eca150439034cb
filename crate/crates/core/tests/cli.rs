use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geosal::metrics::{aggregate, evaluate_sample, EvalOptions};
use geosal::pcio::load_ply;

fn geosal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geosal")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = geosal(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = geosal(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

fn synth(dir: &Path, scenes: &str, points: &str, seed: &str) -> PathBuf {
    ok(&["synth", "--out", s(dir), "--scenes", scenes, "--points", points, "--seed", seed]);
    dir.to_path_buf()
}

/// A checkpoint trained for two epochs on four small scenes.
fn quick_model(root: &Path, xyz_only: bool) -> PathBuf {
    let data = synth(&root.join("train"), "4", "300", "11");
    let config = root.join("config.toml");
    std::fs::write(&config, format!("epochs = 2\narea_count = 4\narea_size = 8\nxyz_only = {xyz_only}\n")).unwrap();
    let model = root.join("model.gsm");
    let log = root.join("log.csv");
    ok(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&model), "--log", s(&log), "--quiet"]);
    model
}

#[test]
fn synth_is_deterministic_and_writes_a_manifest() {
    let t = tempfile::tempdir().unwrap();
    let a = synth(&t.path().join("a"), "3", "128", "5");
    let b = synth(&t.path().join("b"), "3", "128", "5");
    assert_eq!(files(&a), ["manifest.csv", "scene_0000.ply", "scene_0001.ply", "scene_0002.ply"]);
    for f in files(&a) {
        assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap(), "{f}");
    }
    let manifest = std::fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert!(manifest.starts_with("file,seed,points\n"));
    assert_eq!(manifest.lines().count(), 4);
    let c = load_ply(a.join("scene_0001.ply")).unwrap();
    assert_eq!(c.len(), 128);
    assert!(c.gt_mask().is_some());
}

#[test]
fn synth_point_range_is_respected() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    ok(&["synth", "--out", s(&d), "--scenes", "5", "--points", "100", "--max-points", "200"]);
    for i in 0..5 {
        let n = load_ply(d.join(format!("scene_{i:04}.ply"))).unwrap().len();
        assert!((100..=200).contains(&n), "{n}");
    }
}

#[test]
fn train_segment_and_eval_end_to_end() {
    let t = tempfile::tempdir().unwrap();
    let model = quick_model(t.path(), false);
    assert!(model.exists());
    assert!(files(t.path()).iter().all(|f| !f.contains("partial") && !f.contains("inprogress")));
    let log = std::fs::read_to_string(t.path().join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let gt = synth(&t.path().join("gt"), "2", "256", "21");
    let pred = t.path().join("pred");
    std::fs::create_dir(&pred).unwrap();
    for name in ["scene_0000.ply", "scene_0001.ply"] {
        let out = pred.join(name);
        ok(&["segment", "--model", s(&model), "--in", s(&gt.join(name)), "--out", s(&out)]);
        let c = load_ply(&out).unwrap();
        assert_eq!(c.len(), 256);
        let sal = c.saliency().unwrap();
        let mask = c.gt_mask().unwrap();
        assert!(sal.iter().zip(mask).all(|(&p, &m)| (p >= 0.5) == (m == 1)));
    }

    let report = t.path().join("report.txt");
    let curves = t.path().join("curves.csv");
    ok(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--report", s(&report), "--curves", s(&curves)]);
    let samples = ["scene_0000.ply", "scene_0001.ply"]
        .iter()
        .map(|n| {
            let p = load_ply(pred.join(n)).unwrap();
            let g = load_ply(gt.join(n)).unwrap();
            evaluate_sample(n, p.saliency().unwrap(), g.gt_mask().unwrap(), EvalOptions::default()).unwrap()
        })
        .collect();
    let expected = aggregate(samples, EvalOptions::default()).unwrap();
    assert_eq!(std::fs::read_to_string(&report).unwrap(), expected.to_text());
    let csv = std::fs::read_to_string(&curves).unwrap();
    assert_eq!(csv.lines().count(), expected.curve.len() + 1);
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let t = tempfile::tempdir().unwrap();
    let gt = synth(&t.path().join("gt"), "2", "200", "3");
    let pred = t.path().join("pred");
    std::fs::create_dir(&pred).unwrap();
    for name in ["scene_0000.ply", "scene_0001.ply"] {
        let c = load_ply(gt.join(name)).unwrap();
        let sal = c.gt_mask().unwrap().iter().map(|&m| f64::from(m)).collect();
        let c = c.with_saliency(sal).unwrap();
        geosal::pcio::save_ply(&c, pred.join(name), None, geosal::pcio::PlyEncoding::Ascii).unwrap();
    }
    let report = t.path().join("r.txt");
    let curves = t.path().join("c.csv");
    let stdout = ok(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--report", s(&report), "--curves", s(&curves)]);
    assert!(stdout.contains("mae 0.000000"), "{stdout}");
    assert!(stdout.contains("iou 1.000000"), "{stdout}");
    let only = t.path().join("only.csv");
    ok(&["curves", "--pred", s(&pred), "--gt", s(&gt), "--out", s(&only)]);
    assert_eq!(std::fs::read(&only).unwrap(), std::fs::read(&curves).unwrap());
}

#[test]
fn eval_lists_unmatched_files_and_writes_nothing() {
    let t = tempfile::tempdir().unwrap();
    let gt = synth(&t.path().join("gt"), "2", "100", "3");
    let pred = t.path().join("pred");
    std::fs::create_dir(&pred).unwrap();
    std::fs::copy(gt.join("scene_0000.ply"), pred.join("other.ply")).unwrap();
    let report = t.path().join("r.txt");
    let (c, err) = code(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--report", s(&report), "--curves", s(&t.path().join("c.csv"))]);
    assert_eq!(c, 2);
    assert!(err.contains("other.ply (no ground truth)"), "{err}");
    assert!(err.contains("scene_0000.ply (no prediction)"), "{err}");
    assert!(!report.exists());
    assert_eq!(files(t.path()), ["gt", "pred"]);
}

#[test]
fn segment_feature_mode_must_match_the_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let model = quick_model(t.path(), true);
    let input = t.path().join("train/scene_0000.ply");
    let out = t.path().join("seg.ply");
    let (c, err) = code(&["segment", "--model", s(&model), "--in", s(&input), "--out", s(&out)]);
    assert_eq!(c, 2);
    assert!(err.contains("xyz"), "{err}");
    assert!(!out.exists());
    ok(&["segment", "--model", s(&model), "--in", s(&input), "--out", s(&out), "--xyz-only"]);
    assert_eq!(load_ply(&out).unwrap().len(), 300);
}

#[test]
fn superpoints_colors_one_per_superpoint() {
    let t = tempfile::tempdir().unwrap();
    let d = synth(&t.path().join("d"), "1", "400", "8");
    let input = d.join("scene_0000.ply");
    let out = t.path().join("sp.ply");
    let stdout = ok(&["superpoints", "--in", s(&input), "--out", s(&out), "--k", "16"]);
    let count: usize = stdout.split_whitespace().nth(3).unwrap().parse().unwrap();
    let c = load_ply(&out).unwrap();
    assert_eq!(c.len(), 400);
    let distinct: std::collections::HashSet<[u64; 3]> = c.colors().iter().map(|p| p.map(f64::to_bits)).collect();
    assert_eq!(distinct.len(), count);

    let cloud = load_ply(&input).unwrap();
    let part = geosal::cli::superpoint_partition(&cloud, 16, None, 0, None).unwrap();
    assert_eq!(part.len(), count);

    let single = t.path().join("single.ply");
    let stdout = ok(&["superpoints", "--in", s(&input), "--out", s(&single), "--gamma", "0"]);
    assert!(stdout.contains("400 points in 400 superpoints"), "{stdout}");
}

#[test]
fn gradcheck_passes_and_corruption_is_reported() {
    let stdout = ok(&["gradcheck"]);
    assert!(stdout.contains("final_loss"));
    assert!(!stdout.contains("FAIL"));
    let out = geosal(&["gradcheck", "--corrupt", "row_softmax"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row_softmax"));
}

#[test]
fn usage_errors_exit_1_and_leave_no_outputs() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("x");
    assert_eq!(code(&[]).0, 1);
    assert_eq!(code(&["frobnicate"]).0, 1);
    assert_eq!(code(&["synth", "--out", s(&out)]).0, 1);
    assert_eq!(code(&["synth", "--out", s(&out), "--scenes", "two", "--points", "100"]).0, 1);
    assert_eq!(code(&["train", "--data", s(t.path()), "--out", s(&out), "--epochs", "3"]).0, 1);
    assert!(files(t.path()).is_empty());
    assert_eq!(code(&["--help"]).0, 0);
}

#[test]
fn data_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("missing.ply");
    let out = t.path().join("o.ply");
    let (c, err) = code(&["superpoints", "--in", s(&missing), "--out", s(&out)]);
    assert_eq!(c, 2);
    assert!(err.contains("missing.ply"), "{err}");
    let empty = t.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let (c, err) = code(&["train", "--data", s(&empty), "--out", s(&t.path().join("m.gsm")), "--quiet"]);
    assert_eq!(c, 2);
    assert!(err.contains("no .ply files"), "{err}");
    assert_eq!(code(&["synth", "--out", s(&t.path().join("s")), "--scenes", "1", "--points", "10"]).0, 2);
    assert_eq!(code(&["gradcheck", "--corrupt", "nope"]).0, 2);
    assert_eq!(files(t.path()), ["empty"]);
}
