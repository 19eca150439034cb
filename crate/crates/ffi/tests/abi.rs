use std::ffi::{CStr, CString};
use std::ptr;

use geosal::model::{predict, ModelConfig, ModelParams};
use geosal::pcio::{generate_scene, random_scene_spec};
use geosal_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(gs_last_error_message()) }.to_string_lossy().into_owned()
}

fn c_path(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

struct Arrays {
    xyz: Vec<f64>,
    rgb: Vec<f64>,
    labels: Vec<u8>,
}

fn scene_arrays(seed: u64, n: usize) -> Arrays {
    let c = generate_scene(&random_scene_spec(seed, n)).unwrap();
    Arrays {
        xyz: c.positions().iter().flatten().copied().collect(),
        rgb: c.colors().iter().flatten().copied().collect(),
        labels: c.gt_mask().unwrap().to_vec(),
    }
}

fn cloud_from(a: &Arrays) -> *mut GsCloud {
    let mut cloud = ptr::null_mut();
    let n = a.labels.len();
    let s = unsafe { gs_cloud_from_arrays(a.xyz.as_ptr(), a.rgb.as_ptr(), a.labels.as_ptr(), n, &mut cloud) };
    assert_eq!(s, GsStatus::Ok, "{}", last_error());
    cloud
}

#[test]
fn status_codes_are_stable() {
    let codes = [
        GsStatus::Ok,
        GsStatus::Null,
        GsStatus::Io,
        GsStatus::Parse,
        GsStatus::Shape,
        GsStatus::Invalid,
        GsStatus::Numerical,
        GsStatus::Panic,
    ];
    for (i, c) in codes.iter().enumerate() {
        assert_eq!(*c as i32, i as i32);
    }
}

#[test]
fn arrays_save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = c_path(&dir.path().join("a.ply"));
    let a = scene_arrays(1, 300);
    let cloud = cloud_from(&a);
    unsafe {
        assert_eq!(gs_cloud_len(cloud), 300);
        assert_eq!(gs_cloud_save(cloud, path.as_ptr()), GsStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(gs_cloud_load(path.as_ptr(), &mut back), GsStatus::Ok);
        assert_eq!(gs_cloud_len(back), 300);
        assert_eq!(last_error(), "");
        gs_cloud_free(back);
        gs_cloud_free(cloud);
    }
}

#[test]
fn xyz_only_cloud_is_accepted() {
    let a = scene_arrays(2, 64);
    let mut cloud = ptr::null_mut();
    unsafe {
        let s = gs_cloud_from_arrays(a.xyz.as_ptr(), ptr::null(), ptr::null(), 64, &mut cloud);
        assert_eq!(s, GsStatus::Ok);
        assert_eq!(gs_cloud_len(cloud), 64);
        gs_cloud_free(cloud);
    }
}

#[test]
fn null_arguments_report_null_and_name_the_argument() {
    let mut cloud = ptr::null_mut();
    unsafe {
        assert_eq!(gs_cloud_load(ptr::null(), &mut cloud), GsStatus::Null);
        assert!(last_error().contains("path"));
        assert!(cloud.is_null());
        let p = CString::new("x.ply").unwrap();
        assert_eq!(gs_cloud_load(p.as_ptr(), ptr::null_mut()), GsStatus::Null);
        assert!(last_error().contains("out"));
        assert_eq!(gs_cloud_from_arrays(ptr::null(), ptr::null(), ptr::null(), 3, &mut cloud), GsStatus::Null);
        assert!(last_error().contains("xyz"));
        assert_eq!(gs_cloud_save(ptr::null(), p.as_ptr()), GsStatus::Null);
        assert_eq!(gs_cloud_len(ptr::null()), 0);
        let mut sal = [0.0; 4];
        assert_eq!(gs_segment(ptr::null(), ptr::null_mut(), 0, sal.as_mut_ptr(), 4), GsStatus::Null);
        let mut m = GsMetrics::default();
        assert_eq!(gs_metrics(ptr::null(), ptr::null(), 0, &mut m), GsStatus::Null);
        gs_cloud_free(ptr::null_mut());
        gs_model_free(ptr::null_mut());
    }
}

#[test]
fn io_parse_and_invalid_errors_map_to_their_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = c_path(&dir.path().join("missing.ply"));
    let bad = dir.path().join("bad.ply");
    std::fs::write(&bad, "not a ply\n").unwrap();
    let bad = c_path(&bad);
    let mut cloud = ptr::null_mut();
    unsafe {
        assert_eq!(gs_cloud_load(missing.as_ptr(), &mut cloud), GsStatus::Io);
        assert!(!last_error().is_empty());
        assert_eq!(gs_cloud_load(bad.as_ptr(), &mut cloud), GsStatus::Parse);
        let xyz = [0.0, 0.0, 0.0, f64::NAN, 0.0, 0.0];
        assert_eq!(gs_cloud_from_arrays(xyz.as_ptr(), ptr::null(), ptr::null(), 2, &mut cloud), GsStatus::Invalid);
        let labels = [0u8, 2];
        let xyz = [0.0; 6];
        assert_eq!(gs_cloud_from_arrays(xyz.as_ptr(), ptr::null(), labels.as_ptr(), 2, &mut cloud), GsStatus::Invalid);
        assert!(cloud.is_null());
    }
}

#[test]
fn segment_matches_the_library_and_attaches_saliency() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("m.gsm");
    let params = ModelParams::init(ModelConfig::default(), 4).unwrap();
    params.save(&model_path).unwrap();
    let cpath = c_path(&model_path);
    let a = scene_arrays(3, 400);
    let cloud = cloud_from(&a);
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(gs_model_load(cpath.as_ptr(), &mut model), GsStatus::Ok, "{}", last_error());
        let mut sal = vec![0.0; 400];
        let mut short = vec![0.0; 10];
        assert_eq!(gs_segment(model, cloud, 7, short.as_mut_ptr(), 10), GsStatus::Invalid);
        assert!(last_error().contains("400"));
        assert_eq!(gs_segment(model, cloud, 7, sal.as_mut_ptr(), 400), GsStatus::Ok);
        let reference = generate_scene(&random_scene_spec(3, 400)).unwrap();
        assert_eq!(sal, predict(&reference, &params, 7).unwrap());
        let mut attached = vec![0.0; 400];
        assert_eq!(gs_cloud_saliency(cloud, attached.as_mut_ptr(), 400), GsStatus::Ok);
        assert_eq!(attached, sal);
        gs_model_free(model);
        gs_cloud_free(cloud);
    }
}

#[test]
fn saliency_is_invalid_before_segmenting() {
    let cloud = cloud_from(&scene_arrays(4, 64));
    let mut out = vec![0.0; 64];
    unsafe {
        assert_eq!(gs_cloud_saliency(cloud, out.as_mut_ptr(), 64), GsStatus::Invalid);
        assert!(last_error().contains("saliency"));
        gs_cloud_free(cloud);
    }
}

#[test]
fn partition_covers_every_point() {
    let cloud = cloud_from(&scene_arrays(5, 500));
    let mut ids = vec![u32::MAX; 500];
    let mut count = 0usize;
    unsafe {
        let s = gs_partition(cloud, ptr::null(), 16, -1.0, 0, ids.as_mut_ptr(), 500, &mut count);
        assert_eq!(s, GsStatus::Ok, "{}", last_error());
        assert!(count >= 1 && count <= 500);
        assert!(ids.iter().all(|&i| (i as usize) < count));
        for sp in 0..count as u32 {
            assert!(ids.contains(&sp));
        }
        let s = gs_partition(cloud, ptr::null(), 16, 0.0, 0, ids.as_mut_ptr(), 500, &mut count);
        assert_eq!(s, GsStatus::Ok);
        assert_eq!(count, 500);
        assert_eq!(gs_partition(cloud, ptr::null(), 16, -1.0, 0, ids.as_mut_ptr(), 500, ptr::null_mut()), GsStatus::Null);
        gs_cloud_free(cloud);
    }
}

#[test]
fn metrics_of_a_perfect_prediction() {
    let gt = [1u8, 0, 1, 1, 0];
    let sal: Vec<f64> = gt.iter().map(|&g| g as f64).collect();
    let mut m = GsMetrics::default();
    unsafe {
        assert_eq!(gs_metrics(sal.as_ptr(), gt.as_ptr(), 5, &mut m), GsStatus::Ok);
    }
    assert_eq!(m.mae, 0.0);
    assert_eq!(m.iou, 1.0);
    assert!((m.f_measure - 1.0).abs() < 1e-12);
}

#[test]
fn metrics_reject_out_of_range_saliency() {
    let gt = [1u8, 0];
    let sal = [1.5, 0.0];
    let mut m = GsMetrics::default();
    let s = unsafe { gs_metrics(sal.as_ptr(), gt.as_ptr(), 2, &mut m) };
    assert_ne!(s, GsStatus::Ok);
    assert!(!last_error().is_empty());
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/geosal.h")).unwrap();
    for name in [
        "gs_last_error_message",
        "gs_cloud_load",
        "gs_cloud_from_arrays",
        "gs_cloud_len",
        "gs_cloud_save",
        "gs_cloud_free",
        "gs_model_load",
        "gs_model_free",
        "gs_segment",
        "gs_partition",
        "gs_metrics",
        "gs_cloud_saliency",
        "GS_STATUS_PANIC = 7",
        "typedef struct GsCloud GsCloud",
    ] {
        assert!(header.contains(name), "{name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, "#include \"geosal.h\"\nint main(void) { return GS_STATUS_OK; }\n").unwrap();
    let status = std::process::Command::new(cc)
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if std::process::Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
