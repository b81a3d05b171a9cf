//! C ABI over a trained run directory.
//!
//! Every fallible function returns a [`VdlsStatus`]; on failure the message is
//! available from [`vdls_last_error`] on the same thread. Handles are opaque
//! and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use vdl_surrogate::ensemble::Volume;
use vdl_surrogate::pipeline::{Run, Session};
use vdl_surrogate::render::{ImageRgb, TransferFunction};
use vdl_surrogate::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VdlsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Mismatch = 5,
    MissingArtifact = 6,
    Diverged = 7,
    Panic = 8,
}

/// A loaded surrogate: three autoencoders and three predictors.
pub struct VdlsSession {
    inner: Session,
}

/// A fused volume on the ensemble grid, in data units.
pub struct VdlsVolume {
    inner: Volume,
}

/// An 8-bit RGB image, row-major, top row first.
pub struct VdlsImage {
    inner: ImageRgb,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> VdlsStatus {
    match e {
        Error::Shape(_) | Error::Invalid(_) => VdlsStatus::InvalidArgument,
        Error::Io { .. } => VdlsStatus::Io,
        Error::Format(_) | Error::Json { .. } => VdlsStatus::Format,
        Error::Mismatch(_) => VdlsStatus::Mismatch,
        Error::Missing { .. } => VdlsStatus::MissingArtifact,
        Error::Diverged(_) => VdlsStatus::Diverged,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (VdlsStatus, String)>) -> VdlsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            VdlsStatus::Ok
        }
        Ok(Err((s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            VdlsStatus::Panic
        }
    }
}

trait IntoFfi<T> {
    fn ffi(self) -> Result<T, (VdlsStatus, String)>;
}

impl<T> IntoFfi<T> for vdl_surrogate::Result<T> {
    fn ffi(self) -> Result<T, (VdlsStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (VdlsStatus, String) {
    (VdlsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], (VdlsStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn string<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, (VdlsStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| (VdlsStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn vdls_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vdls_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads the trained surrogate recorded in `run_dir`.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vdls_session_open(run_dir: *const c_char, out: *mut *mut VdlsSession) -> VdlsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = string(run_dir, "run_dir")?;
        let run = Run::open(Path::new(dir)).ffi()?;
        let inner = Session::load(run).ffi()?;
        *out = Box::into_raw(Box::new(VdlsSession { inner }));
        Ok(())
    })
}

/// # Safety
/// `session` must come from [`vdls_session_open`] or be null.
#[no_mangle]
pub unsafe extern "C" fn vdls_session_free(session: *mut VdlsSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// # Safety
/// `session` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn vdls_session_param_count(session: *const VdlsSession, out: *mut usize) -> VdlsStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = s.inner.space().dim();
        Ok(())
    })
}

/// Range of parameter `index`.
///
/// # Safety
/// `session`, `lo` and `hi` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn vdls_session_param_range(
    session: *const VdlsSession,
    index: usize,
    lo: *mut f64,
    hi: *mut f64,
) -> VdlsStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        let (lo, hi) = (lo.as_mut().ok_or_else(|| null("lo"))?, hi.as_mut().ok_or_else(|| null("hi"))?);
        let r = s.inner.space().ranges.get(index).ok_or_else(|| (VdlsStatus::InvalidArgument, format!("no parameter {index}")))?;
        (*lo, *hi) = *r;
        Ok(())
    })
}

/// Predicts and fuses the volume for `params` as seen from `viewpoint`.
///
/// # Safety
/// `params` must hold `n_params` values, `viewpoint` three, and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn vdls_session_infer(
    session: *const VdlsSession,
    params: *const f64,
    n_params: usize,
    viewpoint: *const f64,
    out: *mut *mut VdlsVolume,
) -> VdlsStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let p = slice(params, n_params, "params")?;
        let v = slice(viewpoint, 3, "viewpoint")?;
        let fused = s.inner.fuse(p, [v[0], v[1], v[2]]).ffi()?;
        let inner = fused.to_grid(s.inner.extents).ffi()?.denormalize();
        *out = Box::into_raw(Box::new(VdlsVolume { inner }));
        Ok(())
    })
}

/// # Safety
/// `volume` must come from [`vdls_session_infer`] or be null.
#[no_mangle]
pub unsafe extern "C" fn vdls_volume_free(volume: *mut VdlsVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// Grid extents and a borrowed pointer to the `x`-major values.
///
/// # Safety
/// All pointers must be valid; `extents` must have room for three values.
/// `data` stays valid until the volume is freed.
#[no_mangle]
pub unsafe extern "C" fn vdls_volume_data(
    volume: *const VdlsVolume,
    extents: *mut usize,
    data: *mut *const f32,
    len: *mut usize,
) -> VdlsStatus {
    guard(|| {
        let v = volume.as_ref().ok_or_else(|| null("volume"))?;
        if extents.is_null() || data.is_null() || len.is_null() {
            return Err(null("output pointer"));
        }
        std::slice::from_raw_parts_mut(extents, 3).copy_from_slice(&v.inner.extents);
        *data = v.inner.values.as_ptr();
        *len = v.inner.values.len();
        Ok(())
    })
}

/// Renders the prediction for `params` from `viewpoint` with the built-in
/// high-opacity transfer function. `tf_json` may be null or a JSON
/// transfer function.
///
/// # Safety
/// `params` must hold `n_params` values, `viewpoint` three; `tf_json` null or
/// NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn vdls_session_render(
    session: *const VdlsSession,
    params: *const f64,
    n_params: usize,
    viewpoint: *const f64,
    tf_json: *const c_char,
    out: *mut *mut VdlsImage,
) -> VdlsStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let p = slice(params, n_params, "params")?;
        let v = slice(viewpoint, 3, "viewpoint")?;
        let tf = if tf_json.is_null() {
            TransferFunction::high_opacity()
        } else {
            serde_json_tf(string(tf_json, "tf_json")?)?
        };
        let camera = s.inner.run.camera([v[0], v[1], v[2]]).ffi()?;
        let inner = s.inner.render(p, &camera, &tf, &s.inner.run.render_settings()).ffi()?;
        *out = Box::into_raw(Box::new(VdlsImage { inner }));
        Ok(())
    })
}

fn serde_json_tf(text: &str) -> Result<TransferFunction, (VdlsStatus, String)> {
    let tf: TransferFunction = vdl_surrogate::io::parse_json(text).ffi()?;
    tf.validate().ffi()?;
    Ok(tf)
}

/// # Safety
/// `image` must come from [`vdls_session_render`] or be null.
#[no_mangle]
pub unsafe extern "C" fn vdls_image_free(image: *mut VdlsImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Size and a borrowed pointer to `width * height * 3` RGB bytes.
///
/// # Safety
/// All pointers must be valid. `pixels` stays valid until the image is freed.
#[no_mangle]
pub unsafe extern "C" fn vdls_image_pixels(
    image: *const VdlsImage,
    width: *mut usize,
    height: *mut usize,
    pixels: *mut *const u8,
) -> VdlsStatus {
    guard(|| {
        let img = image.as_ref().ok_or_else(|| null("image"))?;
        if width.is_null() || height.is_null() || pixels.is_null() {
            return Err(null("output pointer"));
        }
        *width = img.inner.width;
        *height = img.inner.height;
        *pixels = img.inner.pixels.as_ptr();
        Ok(())
    })
}

/// # Safety
/// `image` must be valid and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vdls_image_write_png(image: *const VdlsImage, path: *const c_char) -> VdlsStatus {
    guard(|| {
        let img = image.as_ref().ok_or_else(|| null("image"))?;
        let path = string(path, "path")?;
        img.inner.save_png(Path::new(path)).ffi()
    })
}

/// Sensitivity of parameter `index` at `n` evenly spaced values of its range,
/// holding the other parameters at `params`. Writes `n` values to each of
/// `values` and `sensitivities`.
///
/// # Safety
/// `params` must hold `n_params` values; `values` and `sensitivities` must
/// have room for `n` values each.
#[no_mangle]
pub unsafe extern "C" fn vdls_session_sensitivity(
    session: *const VdlsSession,
    params: *const f64,
    n_params: usize,
    index: usize,
    n: usize,
    values: *mut f64,
    sensitivities: *mut f64,
) -> VdlsStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        let p = slice(params, n_params, "params")?;
        if values.is_null() || sensitivities.is_null() {
            return Err(null("output buffer"));
        }
        let c = s.inner.sensitivity(p, index, n).ffi()?;
        std::slice::from_raw_parts_mut(values, n).copy_from_slice(&c.values);
        std::slice::from_raw_parts_mut(sensitivities, n).copy_from_slice(&c.sensitivities);
        Ok(())
    })
}
