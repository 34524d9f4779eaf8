//! C interface to upfit.
//!
//! Every function returns an [`UpfitStatus`]; on failure the message is
//! available from [`upfit_last_error`] on the same thread. Handles are opaque
//! and owned by the caller, who releases them with the matching `_free`.
//! Parameter vectors use the layout `[pose (3 per joint) | shape | translation]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::OnceLock;

use nalgebra::Vector2;
use upfit::body_model::{load_model, mini, pose_mesh, surface_landmarks, BodyModel, ModelError};
use upfit::direct_predict::{load_dp_model, predict, DpError, DpModel};
use upfit::fitting::{build_ratio_table, fit, unpack_params, FitConfig, FitError, KeypointSet2D, RatioTable};
use upfit::render::{project, rasterize, Camera, Mask, RasterMode};

/// Bodies sampled for the ratio table built on first fit.
const RATIO_TABLE_SAMPLES: usize = 2000;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpfitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Fit = 5,
    Panic = 6,
}

/// Pinhole camera; x right, y down, z forward.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct UpfitCamera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpfitModelDims {
    pub n_joints: usize,
    pub n_shape: usize,
    pub n_params: usize,
    pub n_landmarks: usize,
    pub n_parts: usize,
}

/// A body model.
pub struct UpfitModel {
    model: BodyModel,
    table: OnceLock<Result<RatioTable, String>>,
}

/// A trained direct-prediction model.
pub struct UpfitDpModel {
    dp: DpModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(UpfitStatus, String);

type Res<T> = Result<T, Failure>;

fn fail<T>(status: UpfitStatus, msg: impl Into<String>) -> Res<T> {
    Err(Failure(status, msg.into()))
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match &e {
            ModelError::Io(_) => UpfitStatus::Io,
            ModelError::Parse(_) | ModelError::Invariant(_) => UpfitStatus::Format,
            ModelError::Dimension { .. } => UpfitStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<FitError> for Failure {
    fn from(e: FitError) -> Self {
        let status = match &e {
            FitError::UnknownKeypointSet(_)
            | FitError::InvalidKeypoints(_)
            | FitError::InvalidInput(_)
            | FitError::InvalidConfig(_) => UpfitStatus::InvalidArgument,
            _ => UpfitStatus::Fit,
        };
        Failure(status, e.to_string())
    }
}

impl From<DpError> for Failure {
    fn from(e: DpError) -> Self {
        let status = match &e {
            DpError::Io(_) => UpfitStatus::Io,
            DpError::Format(_) => UpfitStatus::Format,
            DpError::Dimension(_) | DpError::Degenerate => UpfitStatus::InvalidArgument,
            _ => UpfitStatus::Fit,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, turning errors and panics into a status and the last error.
fn guard(f: impl FnOnce() -> Res<()>) -> UpfitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            UpfitStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("internal error: {msg}"));
            UpfitStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Res<&'a T> {
    // SAFETY: the caller passes either null or a valid pointer.
    match unsafe { p.as_ref() } {
        Some(r) => Ok(r),
        None => fail(UpfitStatus::NullPointer, format!("{what} is null")),
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Res<&'a [T]> {
    if p.is_null() {
        return fail(UpfitStatus::NullPointer, format!("{what} is null"));
    }
    // SAFETY: the caller guarantees `len` readable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Res<&'a mut [T]> {
    if p.is_null() {
        return fail(UpfitStatus::NullPointer, format!("{what} is null"));
    }
    // SAFETY: the caller guarantees `len` writable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

unsafe fn string(p: *const c_char, what: &str) -> Res<String> {
    if p.is_null() {
        return fail(UpfitStatus::NullPointer, format!("{what} is null"));
    }
    // SAFETY: the caller passes a NUL-terminated string.
    match unsafe { CStr::from_ptr(p) }.to_str() {
        Ok(s) => Ok(s.to_string()),
        Err(_) => fail(UpfitStatus::InvalidArgument, format!("{what} is not UTF-8")),
    }
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Res<()> {
    if out.is_null() {
        return fail(UpfitStatus::NullPointer, "output handle pointer is null");
    }
    // SAFETY: `out` is non-null and points to writable storage for a pointer.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

fn camera(c: &UpfitCamera) -> Res<Camera> {
    Camera::new(c.focal, [c.cx, c.cy], c.width, c.height).or_else(|e| fail(UpfitStatus::InvalidArgument, e.to_string()))
}

fn check_len(what: &str, got: usize, expected: usize) -> Res<()> {
    if got != expected {
        return fail(UpfitStatus::InvalidArgument, format!("{what} has length {got}, expected {expected}"));
    }
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn upfit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn upfit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a handle on the built-in mini body model.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn upfit_model_mini(out: *mut *mut UpfitModel) -> UpfitStatus {
    guard(|| unsafe { put(out, UpfitModel { model: mini().clone(), table: OnceLock::new() }) })
}

/// Loads a body model file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn upfit_model_load(path: *const c_char, out: *mut *mut UpfitModel) -> UpfitStatus {
    guard(|| unsafe {
        let path = PathBuf::from(string(path, "path")?);
        let model = load_model(&path)?;
        put(out, UpfitModel { model, table: OnceLock::new() })
    })
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must come from `upfit_model_*` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn upfit_model_free(model: *mut UpfitModel) {
    if !model.is_null() {
        // SAFETY: created by Box::into_raw in `put`.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn upfit_model_dims(model: *const UpfitModel, out: *mut UpfitModelDims) -> UpfitStatus {
    guard(|| unsafe {
        let m = &as_ref(model, "model")?.model;
        let out = slice_mut(out, 1, "out")?;
        out[0] = UpfitModelDims {
            n_joints: m.n_joints(),
            n_shape: m.n_shape(),
            n_params: m.n_params(),
            n_landmarks: m.n_landmarks(),
            n_parts: m.n_parts(),
        };
        Ok(())
    })
}

/// Fits the model to 2D keypoints of the named keypoint set.
///
/// `points` holds `2 * n_points` pixel coordinates (x, y); `confidence`
/// holds `n_points` weights or is null for all ones. `silhouette` is null or
/// `width * height` bytes, nonzero inside the person. `config_json` is null
/// for defaults. Writes `n_params` values to `out_params` and the final
/// objective to `out_energy` when it is not null.
///
/// # Safety
/// Pointers must be valid for the stated lengths; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn upfit_fit(
    model: *const UpfitModel,
    cam: *const UpfitCamera,
    keypoint_set: *const c_char,
    points: *const f64,
    confidence: *const f64,
    n_points: usize,
    silhouette: *const u8,
    config_json: *const c_char,
    out_params: *mut f64,
    n_params: usize,
    out_energy: *mut f64,
) -> UpfitStatus {
    guard(|| unsafe {
        let handle = as_ref(model, "model")?;
        let m = &handle.model;
        let cam = camera(as_ref(cam, "camera")?)?;
        let set = string(keypoint_set, "keypoint_set")?;
        let xy = slice(points, 2 * n_points, "points")?;
        let conf = if confidence.is_null() { vec![1.0; n_points] } else { slice(confidence, n_points, "confidence")?.to_vec() };
        let sil = if silhouette.is_null() {
            None
        } else {
            let (w, h) = (cam.width as usize, cam.height as usize);
            let data = slice(silhouette, w * h, "silhouette")?.iter().map(|&v| (v != 0) as u8).collect();
            Some(Mask::from_vec(w, h, data).or_else(|e| fail(UpfitStatus::InvalidArgument, e.to_string()))?)
        };
        let cfg = if config_json.is_null() {
            FitConfig::default()
        } else {
            let cfg: FitConfig = serde_json::from_str(&string(config_json, "config_json")?)
                .or_else(|e| fail(UpfitStatus::InvalidArgument, format!("config: {e}")))?;
            cfg.validate()?;
            cfg
        };
        let out = slice_mut(out_params, n_params, "out_params")?;
        check_len("out_params", n_params, m.n_params())?;
        let table = handle
            .table
            .get_or_init(|| build_ratio_table(m, RATIO_TABLE_SAMPLES, 0).map_err(|e| e.to_string()))
            .as_ref()
            .or_else(|e| fail(UpfitStatus::Fit, e.clone()))?;
        let kp = KeypointSet2D::new(set, xy.chunks_exact(2).map(|c| Vector2::new(c[0], c[1])).collect(), conf);
        let result = fit(m, &cam, &kp, sil.as_ref(), &cfg, table)?;
        out.copy_from_slice(&result.params());
        if !out_energy.is_null() {
            *out_energy = result.energies.total;
        }
        Ok(())
    })
}

/// Renders the part mask of a configuration: part index + 1 per pixel, 0
/// for background, row-major `width * height` bytes.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn upfit_render_parts(
    model: *const UpfitModel,
    cam: *const UpfitCamera,
    params: *const f64,
    n_params: usize,
    out_mask: *mut u8,
    mask_len: usize,
) -> UpfitStatus {
    guard(|| unsafe {
        let m = &as_ref(model, "model")?.model;
        let cam = camera(as_ref(cam, "camera")?)?;
        let (pose, beta, t) = unpack_params(m, slice(params, n_params, "params")?)?;
        let out = slice_mut(out_mask, mask_len, "out_mask")?;
        check_len("out_mask", mask_len, cam.width as usize * cam.height as usize)?;
        let mesh = pose_mesh(m, &pose, &beta, &t)?;
        let (mask, _) = rasterize(&mesh, m, &cam, RasterMode::Parts);
        out.copy_from_slice(mask.data());
        Ok(())
    })
}

/// Projects the surface landmarks of a configuration: `2 * n_landmarks`
/// pixel coordinates.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn upfit_project_landmarks(
    model: *const UpfitModel,
    cam: *const UpfitCamera,
    params: *const f64,
    n_params: usize,
    out_points: *mut f64,
    points_len: usize,
) -> UpfitStatus {
    guard(|| unsafe {
        let m = &as_ref(model, "model")?.model;
        let cam = camera(as_ref(cam, "camera")?)?;
        let (pose, beta, t) = unpack_params(m, slice(params, n_params, "params")?)?;
        let out = slice_mut(out_points, points_len, "out_points")?;
        check_len("out_points", points_len, 2 * m.n_landmarks())?;
        let mesh = pose_mesh(m, &pose, &beta, &t)?;
        let pts = project(&surface_landmarks(&mesh, m), &cam).or_else(|e| fail(UpfitStatus::Fit, e.to_string()))?;
        for (o, p) in out.chunks_exact_mut(2).zip(&pts) {
            o[0] = p.x;
            o[1] = p.y;
        }
        Ok(())
    })
}

/// Loads a direct-prediction model file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn upfit_dp_load(path: *const c_char, out: *mut *mut UpfitDpModel) -> UpfitStatus {
    guard(|| unsafe {
        let path = PathBuf::from(string(path, "path")?);
        let dp = load_dp_model(&path)?;
        put(out, UpfitDpModel { dp })
    })
}

/// Releases a direct-prediction handle; null is ignored.
///
/// # Safety
/// `dp` must come from `upfit_dp_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn upfit_dp_free(dp: *mut UpfitDpModel) {
    if !dp.is_null() {
        // SAFETY: created by Box::into_raw in `put`.
        drop(unsafe { Box::from_raw(dp) });
    }
}

/// Predicts a configuration from `n_points` surface landmarks (`2 *
/// n_points` pixel coordinates).
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn upfit_dp_predict(
    dp: *const UpfitDpModel,
    model: *const UpfitModel,
    cam: *const UpfitCamera,
    points: *const f64,
    n_points: usize,
    out_params: *mut f64,
    n_params: usize,
) -> UpfitStatus {
    guard(|| unsafe {
        let dp = &as_ref(dp, "dp")?.dp;
        let m = &as_ref(model, "model")?.model;
        let cam = camera(as_ref(cam, "camera")?)?;
        let xy = slice(points, 2 * n_points, "points")?;
        let out = slice_mut(out_params, n_params, "out_params")?;
        check_len("out_params", n_params, m.n_params())?;
        let pts: Vec<Vector2<f64>> = xy.chunks_exact(2).map(|c| Vector2::new(c[0], c[1])).collect();
        let pred = predict(dp, m, &pts, &cam)?;
        out.copy_from_slice(&pred.to_fit_result(&m.surface_set_name()).params());
        Ok(())
    })
}
