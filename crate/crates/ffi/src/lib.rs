//! C ABI over the `prompt-sid` library.
//!
//! Images and models are opaque heap handles released with their `_free`
//! function. Every fallible call returns a [`PsidStatus`]; on failure the
//! message is available from [`psid_last_error`] on the same thread.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use prompt_sid::train::ModelState;
use prompt_sid::{checkpoint, metrics, Error, ImageTensor, NoiseSpec, Rng};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsidStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Checkpoint = 6,
    NonFinite = 7,
    Panic = 8,
}

/// Opaque image handle (`h × w × c` floats, row-major, channel-last).
pub struct PsidImage {
    inner: ImageTensor,
}

/// Opaque handle to a trained model loaded from a checkpoint.
pub struct PsidModel {
    state: ModelState,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(err: &Error) -> PsidStatus {
    match err {
        Error::Io { .. } => PsidStatus::Io,
        Error::Decode { .. } | Error::Encode { .. } => PsidStatus::Format,
        Error::Shape(_) => PsidStatus::Shape,
        Error::InvalidArgument(_) | Error::Config(_) => PsidStatus::InvalidArgument,
        Error::NonFinite(_) => PsidStatus::NonFinite,
        Error::Checkpoint(_) => PsidStatus::Checkpoint,
    }
}

struct Fail(PsidStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PsidStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PsidStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            PsidStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(PsidStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(PsidStatus::InvalidArgument, "string is not UTF-8".into()))
}

unsafe fn image_ref<'a>(p: *const PsidImage) -> Result<&'a ImageTensor, Fail> {
    p.as_ref().map(|i| &i.inner).ok_or_else(|| null("image"))
}

unsafe fn emit_image(out: *mut *mut PsidImage, img: ImageTensor) {
    *out = Box::into_raw(Box::new(PsidImage { inner: img }));
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn psid_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn psid_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `h·w·c` floats from `data` into a new image.
///
/// # Safety
/// `data` must point to `h·w·c` readable floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn psid_image_new(
    h: u32,
    w: u32,
    c: u32,
    data: *const f32,
    out: *mut *mut PsidImage,
) -> PsidStatus {
    guard(|| {
        if data.is_null() || out.is_null() {
            return Err(null("data or out"));
        }
        let n = (h as usize)
            .checked_mul(w as usize)
            .and_then(|v| v.checked_mul(c as usize))
            .ok_or_else(|| Fail(PsidStatus::InvalidArgument, "image too large".into()))?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        emit_image(
            out,
            ImageTensor::from_vec(h as usize, w as usize, c as usize, values)?,
        );
        Ok(())
    })
}

/// Loads a PNG (8-bit gray/RGB) or PSID file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn psid_image_load(
    path: *const c_char,
    out: *mut *mut PsidImage,
) -> PsidStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let img = prompt_sid::load_image(path_arg(path)?)?;
        emit_image(out, img);
        Ok(())
    })
}

/// Writes `.psid` losslessly, anything else as PNG.
///
/// # Safety
/// `img` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn psid_image_save(img: *const PsidImage, path: *const c_char) -> PsidStatus {
    guard(|| {
        prompt_sid::save_image(image_ref(img)?, path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `img` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn psid_image_free(img: *mut PsidImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// # Safety
/// `img` must be a live handle; the out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn psid_image_dims(
    img: *const PsidImage,
    h: *mut u32,
    w: *mut u32,
    c: *mut u32,
) -> PsidStatus {
    guard(|| {
        let i = image_ref(img)?;
        if h.is_null() || w.is_null() || c.is_null() {
            return Err(null("dimension output"));
        }
        *h = i.h() as u32;
        *w = i.w() as u32;
        *c = i.c() as u32;
        Ok(())
    })
}

/// Pointer to the image's `h·w·c` floats, valid while the handle lives.
/// Null for a null handle.
///
/// # Safety
/// `img` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn psid_image_data(img: *const PsidImage) -> *const f32 {
    img.as_ref()
        .map_or(ptr::null(), |i| i.inner.data().as_ptr())
}

/// Adds noise described by `spec` (`gaussian:25`, `poisson:30`, ...).
///
/// # Safety
/// `img` must be a live handle; `spec` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn psid_add_noise(
    img: *const PsidImage,
    spec: *const c_char,
    seed: u64,
    out: *mut *mut PsidImage,
) -> PsidStatus {
    guard(|| {
        let i = image_ref(img)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let spec: NoiseSpec = path_arg(spec)?.parse()?;
        emit_image(out, prompt_sid::apply_noise(i, spec, &mut Rng::new(seed))?);
        Ok(())
    })
}

/// Loads a training checkpoint for inference.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn psid_model_load(
    path: *const c_char,
    out: *mut *mut PsidModel,
) -> PsidStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let state = checkpoint::load(path_arg(path)?, None)?;
        *out = Box::into_raw(Box::new(PsidModel { state }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn psid_model_free(model: *mut PsidModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Channel count the model expects.
///
/// # Safety
/// `model` must be a live handle; `channels` writable.
#[no_mangle]
pub unsafe extern "C" fn psid_model_channels(
    model: *const PsidModel,
    channels: *mut u32,
) -> PsidStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if channels.is_null() {
            return Err(null("channels"));
        }
        *channels = m.state.model.config().channels as u32;
        Ok(())
    })
}

/// Denoises `img` with the EMA weights; `seed` fixes the diffusion start.
///
/// # Safety
/// `model` and `img` must be live handles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn psid_model_denoise(
    model: *const PsidModel,
    img: *const PsidImage,
    seed: u64,
    out: *mut *mut PsidImage,
) -> PsidStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let i = image_ref(img)?;
        if out.is_null() {
            return Err(null("out"));
        }
        emit_image(out, m.state.denoise(i, &mut Rng::new(seed))?);
        Ok(())
    })
}

/// PSNR in dB; `+inf` for identical images.
///
/// # Safety
/// `a`, `b` must be live handles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn psid_psnr(
    a: *const PsidImage,
    b: *const PsidImage,
    peak: f64,
    out: *mut f64,
) -> PsidStatus {
    guard(|| {
        let (a, b) = (image_ref(a)?, image_ref(b)?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = metrics::psnr(a, b, peak)?;
        Ok(())
    })
}

/// Mean SSIM (11×11 Gaussian window, unit peak).
///
/// # Safety
/// `a`, `b` must be live handles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn psid_ssim(
    a: *const PsidImage,
    b: *const PsidImage,
    out: *mut f64,
) -> PsidStatus {
    guard(|| {
        let (a, b) = (image_ref(a)?, image_ref(b)?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = metrics::ssim(a, b)?;
        Ok(())
    })
}
