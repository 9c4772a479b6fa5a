//! C ABI over `enerf-core`.
//!
//! Datasets and models are opaque heap handles freed by their `_free`
//! function. Every fallible call returns an [`EnerfStatus`]; on failure the
//! message is kept per thread and read with [`enerf_last_error_message`].
//! Render outputs go into caller-owned buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use enerf_core::checkpoint;
use enerf_core::dataset::{load_dataset, save_dataset, SceneDataset};
use enerf_core::geometry::{Camera, Mat3, Vec3};
use enerf_core::networks::ModelWeights;
use enerf_core::renderer::{render_image, RenderConfig, SamplingMode};
use enerf_core::scenegen::{generate_scene, SceneSpec};
use enerf_core::Error;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnerfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Checkpoint = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Sampling strategy for [`enerf_render_view`] and [`enerf_render_pose`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnerfMode {
    Guided = 0,
    Uniform = 1,
}

/// Opaque multi-view dataset.
pub struct EnerfDataset(SceneDataset);

/// Opaque trained weights.
pub struct EnerfModel(ModelWeights);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> EnerfStatus {
    match e {
        Error::Io { .. } | Error::MissingView { .. } => EnerfStatus::Io,
        Error::Format { .. } | Error::Json(_) => EnerfStatus::Format,
        Error::Checkpoint(_) => EnerfStatus::Checkpoint,
        _ => EnerfStatus::InvalidArgument,
    }
}

struct Fail(EnerfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, records any failure and converts panics into [`EnerfStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EnerfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EnerfStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            EnerfStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(EnerfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(EnerfStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut *mut T, what: &str) -> Result<&'a mut *mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn enerf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// excluding the terminator, or 0 when there is no error.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn enerf_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a dataset directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn enerf_dataset_load(dir: *const c_char, out: *mut *mut EnerfDataset) -> EnerfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = load_dataset(&path_arg(dir, "dir")?)?;
        *out = Box::into_raw(Box::new(EnerfDataset(ds)));
        Ok(())
    })
}

/// Generates a preset scene (`"plane-sphere"` or `"micro"`).
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn enerf_dataset_generate(
    preset: *const c_char,
    seed: u64,
    out: *mut *mut EnerfDataset,
) -> EnerfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let spec = SceneSpec::preset(str_arg(preset, "preset")?, seed)?;
        *out = Box::into_raw(Box::new(EnerfDataset(generate_scene(&spec)?)));
        Ok(())
    })
}

/// Writes a dataset directory.
///
/// # Safety
/// `ds` must come from this library; `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn enerf_dataset_save(ds: *const EnerfDataset, dir: *const c_char) -> EnerfStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        save_dataset(&ds.0, &path_arg(dir, "dir")?)?;
        Ok(())
    })
}

/// Number of views and the shared image size.
///
/// # Safety
/// `ds` must come from this library; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn enerf_dataset_info(
    ds: *const EnerfDataset,
    views: *mut usize,
    width: *mut usize,
    height: *mut usize,
) -> EnerfStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        if views.is_null() || width.is_null() || height.is_null() {
            return Err(null("out pointer"));
        }
        *views = ds.0.views.len();
        *width = ds.0.width();
        *height = ds.0.height();
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn enerf_dataset_free(ds: *mut EnerfDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn enerf_model_load(path: *const c_char, out: *mut *mut EnerfModel) -> EnerfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let w = checkpoint::load(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(EnerfModel(w)));
        Ok(())
    })
}

/// Freshly initialized, untrained weights.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn enerf_model_init(seed: u64, out: *mut *mut EnerfModel) -> EnerfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(EnerfModel(ModelWeights::init(seed))));
        Ok(())
    })
}

/// Writes a checkpoint.
///
/// # Safety
/// `model` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn enerf_model_save(model: *const EnerfModel, path: *const c_char) -> EnerfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        checkpoint::save(&m.0, &path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn enerf_model_free(model: *mut EnerfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn render_into(
    ds: *const EnerfDataset,
    model: *const EnerfModel,
    cam: impl FnOnce(&SceneDataset) -> Result<Camera, Fail>,
    mode: EnerfMode,
    n_samples: usize,
    rgb: *mut f32,
    rgb_len: usize,
    depth: *mut f32,
    depth_len: usize,
) -> EnerfStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        let cam = cam(&ds.0)?;
        let npix = cam.width * cam.height;
        if rgb_len < 3 * npix || (!depth.is_null() && depth_len < npix) {
            return Err(Fail(
                EnerfStatus::BufferTooSmall,
                format!("need {} rgb and {npix} depth floats", 3 * npix),
            ));
        }
        let cfg = RenderConfig {
            mode: match mode {
                EnerfMode::Guided => SamplingMode::Guided,
                EnerfMode::Uniform => SamplingMode::Uniform,
            },
            n_samples,
            ..Default::default()
        };
        if n_samples == 0 {
            return Err(Fail(EnerfStatus::InvalidArgument, "n_samples must be positive".into()));
        }
        let out = render_image(&ds.0, &m.0, &cam, &cfg)?;
        std::slice::from_raw_parts_mut(rgb, 3 * npix).copy_from_slice(&out.image.data);
        if !depth.is_null() {
            std::slice::from_raw_parts_mut(depth, npix).copy_from_slice(&out.depth_mvs);
        }
        Ok(())
    })
}

/// Renders dataset view `view_id` into `rgb` (H·W·3 floats, row-major RGB)
/// and, when `depth` is not null, the predicted depth (H·W floats).
///
/// # Safety
/// Handles must come from this library; `rgb`/`depth` must be valid for
/// `rgb_len`/`depth_len` floats.
#[no_mangle]
pub unsafe extern "C" fn enerf_render_view(
    ds: *const EnerfDataset,
    model: *const EnerfModel,
    view_id: usize,
    mode: EnerfMode,
    n_samples: usize,
    rgb: *mut f32,
    rgb_len: usize,
    depth: *mut f32,
    depth_len: usize,
) -> EnerfStatus {
    let cam = |ds: &SceneDataset| -> Result<Camera, Fail> {
        let mut c = ds.view(view_id)?.camera.clone();
        (c.near, c.far) = (ds.near, ds.far);
        Ok(c)
    };
    render_into(ds, model, cam, mode, n_samples, rgb, rgb_len, depth, depth_len)
}

/// Renders an arbitrary world-to-camera pose `x_cam = R·x + t` with
/// intrinsics `k`; matrices are row-major.
///
/// # Safety
/// As [`enerf_render_view`]; `k` and `r` point to 9 doubles, `t` to 3.
#[no_mangle]
pub unsafe extern "C" fn enerf_render_pose(
    ds: *const EnerfDataset,
    model: *const EnerfModel,
    k: *const f64,
    r: *const f64,
    t: *const f64,
    width: usize,
    height: usize,
    mode: EnerfMode,
    n_samples: usize,
    rgb: *mut f32,
    rgb_len: usize,
    depth: *mut f32,
    depth_len: usize,
) -> EnerfStatus {
    let cam = |ds: &SceneDataset| -> Result<Camera, Fail> {
        if k.is_null() || r.is_null() || t.is_null() {
            return Err(null("pose matrix"));
        }
        let k = Mat3::from_row_slice(std::slice::from_raw_parts(k, 9));
        let r = Mat3::from_row_slice(std::slice::from_raw_parts(r, 9));
        let t = Vec3::from_row_slice(std::slice::from_raw_parts(t, 3));
        Ok(Camera::new(k, r, t, width, height, ds.near, ds.far)?)
    };
    render_into(ds, model, cam, mode, n_samples, rgb, rgb_len, depth, depth_len)
}
