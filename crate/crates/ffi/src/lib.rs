//! C ABI over the directcaps library.
//!
//! Every fallible function returns a [`DcStatus`]. On failure the message is
//! kept per thread and can be read with [`dc_last_error`]. Model handles are
//! opaque and must not be used from two threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use directcaps::data::{bicubic_resize, Image};
use directcaps::evaluation::{mcnemar, ContingencyTable, McNemar};
use directcaps::model::Model;
use directcaps::training::Trainer;
use directcaps::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Corrupt = 5,
    Numeric = 6,
    Panic = 7,
}

/// Loaded model; create with [`dc_model_load`], release with [`dc_model_free`].
pub struct DcModel {
    model: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> DcStatus {
    match e {
        Error::Shape { .. } => DcStatus::Shape,
        Error::InvalidArgument(_) | Error::Config(_) => DcStatus::InvalidArgument,
        Error::Io { .. } => DcStatus::Io,
        Error::Corrupt { .. } | Error::VersionMismatch { .. } | Error::Image { .. } => DcStatus::Corrupt,
        Error::NonFinite { .. }
        | Error::NonFiniteGradient { .. }
        | Error::Divergence { .. }
        | Error::GradCheck(_)
        | Error::Backward(_) => DcStatus::Numeric,
    }
}

enum Failure {
    Status(DcStatus, String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(DcStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Status(DcStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any error or panic and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DcStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DcStatus::Panic
        }
    }
}

fn checked_len(dims: &[usize]) -> Result<usize, Failure> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| invalid("buffer size overflows"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null if it
/// succeeded. Valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn dc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads the model stored in a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dc_model_load(path: *const c_char, out: *mut *mut DcModel) -> DcStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let trainer = Trainer::load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(DcModel { model: trainer.model }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`dc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dc_model_free(model: *mut DcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the class count and the expected `channels x height x width`
/// input geometry. Any output pointer may be null.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_model_info(
    model: *const DcModel,
    num_classes: *mut usize,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> DcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = &m.model.config;
        for (dst, v) in [(num_classes, c.num_classes), (channels, c.channels), (height, c.height), (width, c.width)] {
            if !dst.is_null() {
                *dst = v;
            }
        }
        Ok(())
    })
}

/// Scores `count` images laid out as `[count, C, H, W]` with values in
/// `[0, 1]`. Writes `count * num_classes` capsule lengths to `scores`.
/// Low-resolution probes must be upsampled to the model size first, for
/// example with [`dc_bicubic_resize`].
///
/// # Safety
/// `pixels` must hold `pixels_len` floats and `scores` `scores_len` floats.
#[no_mangle]
pub unsafe extern "C" fn dc_model_predict(
    model: *mut DcModel,
    pixels: *const f32,
    pixels_len: usize,
    count: usize,
    scores: *mut f32,
    scores_len: usize,
) -> DcStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if scores.is_null() {
            return Err(null("scores"));
        }
        let (k, c, h, w) = {
            let cfg = &m.model.config;
            (cfg.num_classes, cfg.channels, cfg.height, cfg.width)
        };
        let per_image = checked_len(&[c, h, w])?;
        if count == 0 {
            return Err(invalid("count must be positive"));
        }
        if pixels_len != checked_len(&[count, per_image])? {
            return Err(invalid(format!(
                "expected {count} x {c}x{h}x{w} = {} pixels, got {pixels_len}",
                count * per_image
            )));
        }
        if scores_len != checked_len(&[count, k])? {
            return Err(invalid(format!("expected {} score slots, got {scores_len}", count * k)));
        }
        let src = std::slice::from_raw_parts(pixels, pixels_len);
        let images = src
            .chunks_exact(per_image)
            .map(|chunk| Image::new(c, h, w, chunk.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&Image> = images.iter().collect();
        let rows = m.model.scores(&refs)?;
        let dst = std::slice::from_raw_parts_mut(scores, scores_len);
        for (slot, v) in dst.iter_mut().zip(rows.iter().flatten()) {
            *slot = *v;
        }
        Ok(())
    })
}

/// Bicubic resize of a planar `[C, H, W]` image, as used to build
/// low-resolution probes and to upsample them again.
///
/// # Safety
/// `src` must hold `channels * height * width` floats and `dst`
/// `channels * out_height * out_width` floats.
#[no_mangle]
pub unsafe extern "C" fn dc_bicubic_resize(
    src: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    dst: *mut f32,
    out_height: usize,
    out_width: usize,
) -> DcStatus {
    guard(|| {
        if src.is_null() {
            return Err(null("src"));
        }
        if dst.is_null() {
            return Err(null("dst"));
        }
        let n_in = checked_len(&[channels, height, width])?;
        let n_out = checked_len(&[channels, out_height, out_width])?;
        let img = Image::new(channels, height, width, std::slice::from_raw_parts(src, n_in).to_vec())?;
        let out = bicubic_resize(&img, out_height, out_width)?;
        std::slice::from_raw_parts_mut(dst, n_out).copy_from_slice(out.data());
        Ok(())
    })
}

/// Continuity-corrected McNemar test on the discordant counts `b` and `c`.
/// Fails with `InvalidArgument` when `b + c == 0`.
///
/// # Safety
/// Non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_mcnemar(b: u64, c: u64, statistic: *mut f64, significant: *mut bool) -> DcStatus {
    guard(|| {
        let table = ContingencyTable { a: 0, b, c, d: 0 };
        match mcnemar(&table) {
            McNemar::NoDiscordantPairs => Err(invalid("no discordant pairs")),
            McNemar::Tested {
                statistic: s,
                significant: sig,
                ..
            } => {
                if !statistic.is_null() {
                    *statistic = s;
                }
                if !significant.is_null() {
                    *significant = sig;
                }
                Ok(())
            }
        }
    })
}
