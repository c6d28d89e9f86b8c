//! C ABI over the `wecolora` library.
//!
//! Models are opaque `WclModel` handles owned by the caller and released with
//! [`wcl_model_free`]. Every fallible call returns a [`WclStatus`]; on failure
//! [`wcl_last_error`] describes the most recent error on the calling thread.
//! Images are passed as contiguous `f32` buffers of `channels×size×size`
//! values per image, in `[-1, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use wecolora::{merge_adapters, DistillConfig, Error, Tensor, ViTConfig, ViTModel};

/// Result of every fallible call. Values 2-4 match the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WclStatus {
    Ok = 0,
    /// Null pointer, invalid UTF-8 or a too-small output buffer.
    InvalidArgument = 1,
    /// Configuration, contract or dimension error.
    Config = 2,
    /// Format, corruption, parse or I/O error.
    Format = 3,
    /// Non-finite values during training.
    Numeric = 4,
    /// A panic was caught at the boundary.
    Internal = 5,
}

/// Opaque model handle.
pub struct WclModel {
    model: ViTModel,
}

/// Model geometry reported by [`wcl_model_dims`].
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WclDims {
    pub image_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub tokens: usize,
    pub has_adapters: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(WclStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            2 => WclStatus::Config,
            4 => WclStatus::Numeric,
            _ => WclStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(WclStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> WclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            WclStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            WclStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn model_arg<'a>(p: *const WclModel) -> Result<&'a ViTModel, Failure> {
    p.as_ref().map(|m| &m.model).ok_or_else(|| invalid("model handle is null"))
}

unsafe fn images_arg(model: &ViTModel, pixels: *const f32, count: usize) -> Result<Vec<Tensor>, Failure> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if pixels.is_null() {
        return Err(invalid("pixel buffer is null"));
    }
    let c = &model.config;
    let per = c.channels * c.image_size * c.image_size;
    let data = std::slice::from_raw_parts(pixels, per * count);
    data.chunks_exact(per)
        .map(|chunk| {
            Tensor::new([c.channels, c.image_size, c.image_size], chunk.to_vec()).map_err(Failure::from)
        })
        .collect()
}

unsafe fn write_out(out: *mut *mut WclModel, model: ViTModel) -> Result<(), Failure> {
    if out.is_null() {
        return Err(invalid("output handle pointer is null"));
    }
    *out = Box::into_raw(Box::new(WclModel { model }));
    Ok(())
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn wcl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wcl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Randomly initialized model from a JSON ViT config (missing fields take
/// defaults; null or empty means all defaults).
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn wcl_model_init(config_json: *const c_char, seed: u64, out: *mut *mut WclModel) -> WclStatus {
    guard(|| {
        let text = if config_json.is_null() { "" } else { str_arg(config_json, "config")? };
        let config: ViTConfig = if text.trim().is_empty() {
            ViTConfig::default()
        } else {
            serde_json::from_str(text).map_err(|e| Failure(WclStatus::Config, format!("bad model config: {e}")))?
        };
        write_out(out, ViTModel::init_random(&config, seed)?)
    })
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wcl_model_load(path: *const c_char, out: *mut *mut WclModel) -> WclStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        write_out(out, wecolora::load_checkpoint(&path)?)
    })
}

/// Saves a checkpoint. Unmerged adapters are stored as separate tensors.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn wcl_model_save(model: *const WclModel, path: *const c_char) -> WclStatus {
    guard(|| {
        let m = model_arg(model)?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let tags: &[&str] = if m.has_adapters() { &["ffi", "unmerged"] } else { &["ffi"] };
        wecolora::save_checkpoint(m, tags, &path)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn wcl_model_free(model: *mut WclModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wcl_model_dims(model: *const WclModel, out: *mut WclDims) -> WclStatus {
    guard(|| {
        let m = model_arg(model)?;
        let out = out.as_mut().ok_or_else(|| invalid("output pointer is null"))?;
        *out = WclDims {
            image_size: m.config.image_size,
            channels: m.config.channels,
            dim: m.config.dim,
            depth: m.blocks.len(),
            tokens: m.config.tokens(),
            has_adapters: m.has_adapters(),
        };
        Ok(())
    })
}

/// Final-norm features of one image, `tokens×dim` values in row-major order
/// (row 0 is CLS). `out_len` must be at least `tokens·dim`.
///
/// # Safety
/// `pixels` must hold `channels·size·size` floats; `out` must hold `out_len`.
#[no_mangle]
pub unsafe extern "C" fn wcl_model_features(
    model: *const WclModel,
    pixels: *const f32,
    out: *mut f32,
    out_len: usize,
) -> WclStatus {
    guard(|| {
        let m = model_arg(model)?;
        let img = images_arg(m, pixels, 1)?;
        let need = m.config.tokens() * m.config.dim;
        if out.is_null() || out_len < need {
            return Err(invalid(format!("output buffer needs {need} floats")));
        }
        let feats = m.features(&img[0])?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(feats.data());
        Ok(())
    })
}

/// Distills a student from `teacher` on `count` unlabeled images. The
/// settings are a JSON distillation config; null or empty uses defaults.
/// The returned student has its adapters merged.
///
/// # Safety
/// `pixels` must hold `count` images; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wcl_distill(
    teacher: *const WclModel,
    pixels: *const f32,
    count: usize,
    config_json: *const c_char,
    out: *mut *mut WclModel,
) -> WclStatus {
    guard(|| {
        let t = model_arg(teacher)?;
        let images = images_arg(t, pixels, count)?;
        let text = if config_json.is_null() { "" } else { str_arg(config_json, "config")? };
        let config: DistillConfig = if text.trim().is_empty() {
            DistillConfig::default()
        } else {
            serde_json::from_str(text)
                .map_err(|e| Failure(WclStatus::Config, format!("bad distillation config: {e}")))?
        };
        let outcome = wecolora::run_distillation(t, &images, &config)?;
        write_out(out, outcome.student)
    })
}

/// Folds attached adapters into the base weights in place.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wcl_model_merge(model: *mut WclModel) -> WclStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| invalid("model handle is null"))?;
        merge_adapters(&mut m.model)?;
        Ok(())
    })
}
