//! C ABI over the geosal toolkit.
//!
//! Clouds and models are opaque heap handles released with their `_free`
//! function. Every fallible call returns a [`GsStatus`]; on failure the
//! message is kept per thread and read with [`gs_last_error_message`].
//! Panics are caught at the boundary and reported as `GS_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use geosal::cli::superpoint_partition;
use geosal::metrics::{evaluate_sample, EvalOptions};
use geosal::model::{predict, ModelParams};
use geosal::pcio::{load_ply, save_ply, PlyEncoding, PointCloud};
use geosal::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GsStatus {
    Ok = 0,
    Null = 1,
    Io = 2,
    Parse = 3,
    Shape = 4,
    Invalid = 5,
    Numerical = 6,
    Panic = 7,
}

/// A point cloud with optional labels and saliency.
pub struct GsCloud(PointCloud);

/// A trained model loaded from a checkpoint.
pub struct GsModel(ModelParams);

/// Scores of one prediction against its ground truth.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GsMetrics {
    pub mae: f64,
    pub f_measure: f64,
    pub e_measure: f64,
    pub iou: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> GsStatus {
    match e {
        Error::Io { .. } => GsStatus::Io,
        Error::Parse { .. } => GsStatus::Parse,
        Error::Shape { .. } => GsStatus::Shape,
        Error::InvalidArgument(_) => GsStatus::Invalid,
        Error::Numerical(_) => GsStatus::Numerical,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f`, mapping errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GsStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            GsStatus::Null
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            GsStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Core(Error::InvalidArgument(format!("{what} is not valid UTF-8"))))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, needed: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    if len < needed {
        return Err(Failure::Core(Error::InvalidArgument(format!("{what} holds {len} values, {needed} needed"))));
    }
    Ok(std::slice::from_raw_parts_mut(p, needed))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn gs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Reads a PLY file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gs_cloud_load(path: *const c_char, out: *mut *mut GsCloud) -> GsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let cloud = load_ply(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(GsCloud(cloud)));
        Ok(())
    })
}

/// Builds a cloud from `n` xyz triples. `rgb` (triples in [0,1]) and
/// `labels` (0 or 1) may be null.
///
/// # Safety
/// Non-null arrays must hold `3n`, `3n` and `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gs_cloud_from_arrays(
    xyz: *const f64,
    rgb: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut *mut GsCloud,
) -> GsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let triples = |s: &[f64]| s.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
        let positions = triples(slice_arg(xyz, 3 * n, "xyz")?);
        let colors = if rgb.is_null() { None } else { Some(triples(slice_arg(rgb, 3 * n, "rgb")?)) };
        let mut cloud = PointCloud::new(positions, colors)?;
        if !labels.is_null() {
            cloud = cloud.with_mask(slice_arg(labels, n, "labels")?.to_vec())?;
        }
        *out = Box::into_raw(Box::new(GsCloud(cloud)));
        Ok(())
    })
}

/// Point count; 0 for a null handle.
///
/// # Safety
/// `cloud` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gs_cloud_len(cloud: *const GsCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.len())
}

/// Writes the cloud as binary PLY, including labels and saliency when set.
///
/// # Safety
/// `cloud` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gs_cloud_save(cloud: *const GsCloud, path: *const c_char) -> GsStatus {
    guard(|| {
        let c = handle(cloud, "cloud")?;
        save_ply(&c.0, path_arg(path, "path")?, None, PlyEncoding::BinaryLittleEndian)?;
        Ok(())
    })
}

/// # Safety
/// `cloud` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gs_cloud_free(cloud: *mut GsCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Loads a checkpoint (and its `.manifest` sibling).
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gs_model_load(path: *const c_char, out: *mut *mut GsModel) -> GsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let params = ModelParams::load(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(GsModel(params)));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gs_model_free(model: *mut GsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predicts per-point saliency into `saliency` (capacity `len`) and
/// attaches it to the cloud, so a following save includes it.
///
/// # Safety
/// Handles must be live; `saliency` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gs_segment(
    model: *const GsModel,
    cloud: *mut GsCloud,
    seed: u64,
    saliency: *mut f64,
    len: usize,
) -> GsStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let c = cloud.as_mut().ok_or(Failure::Null("cloud"))?;
        let out = out_slice(saliency, len, c.0.len(), "saliency")?;
        let s = predict(&c.0, &m.0, seed)?;
        out.copy_from_slice(&s);
        c.0 = c.0.clone().with_saliency(s)?;
        Ok(())
    })
}

/// Superpoint ids per point into `ids` (capacity `len`) and the superpoint
/// count into `count`. A negative `gamma` selects the percentile rule.
/// `model` may be null to cluster on the 9-channel input features.
///
/// # Safety
/// `cloud` must be live, `model` null or live, `ids` hold `len` values and
/// `count` be valid.
#[no_mangle]
pub unsafe extern "C" fn gs_partition(
    cloud: *const GsCloud,
    model: *const GsModel,
    k: usize,
    gamma: f64,
    seed: u64,
    ids: *mut u32,
    len: usize,
    count: *mut usize,
) -> GsStatus {
    guard(|| {
        let c = handle(cloud, "cloud")?;
        if count.is_null() {
            return Err(Failure::Null("count"));
        }
        let out = out_slice(ids, len, c.0.len(), "ids")?;
        let gamma = (gamma >= 0.0).then_some(gamma);
        let part = superpoint_partition(&c.0, k, gamma, seed, model.as_ref().map(|m| &m.0))?;
        out.copy_from_slice(part.sp_id_of_point());
        *count = part.len();
        Ok(())
    })
}

/// MAE, max F-measure (β² = 0.3), max E-measure and IoU at 0.5 of `n`
/// saliency values against binary ground truth.
///
/// # Safety
/// `saliency` and `gt` must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gs_metrics(saliency: *const f64, gt: *const u8, n: usize, out: *mut GsMetrics) -> GsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let s = slice_arg(saliency, n, "saliency")?;
        let g = slice_arg(gt, n, "gt")?;
        let r = evaluate_sample("ffi", s, g, EvalOptions::default())?;
        *out = GsMetrics {
            mae: r.mae,
            f_measure: r.f_measure,
            e_measure: r.e_measure,
            iou: r.iou,
        };
        Ok(())
    })
}

/// Copies the cloud's saliency into `out` (capacity `len`); `GS_STATUS_INVALID`
/// if none is attached.
///
/// # Safety
/// `cloud` must be live and `out` hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gs_cloud_saliency(cloud: *const GsCloud, out: *mut f64, len: usize) -> GsStatus {
    guard(|| {
        let c = handle(cloud, "cloud")?;
        let s = c
            .0
            .saliency()
            .ok_or_else(|| Error::InvalidArgument("cloud has no saliency".into()))?;
        out_slice(out, len, s.len(), "out")?.copy_from_slice(s);
        Ok(())
    })
}
