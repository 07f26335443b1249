//! C ABI over the `cwss` crate.
//!
//! Every function returns a `CwssStatus`; on failure the message is kept per
//! thread and can be read with `cwss_last_error_message`. Models are opaque
//! handles created by `cwss_model_load` or `cwss_model_init` and released
//! with `cwss_model_free`. Images are `3 × S × S` floats in `[0, 1]`,
//! channel-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::OnceLock;

use cwss::capsule::forward_classify;
use cwss::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use cwss::config::ArchPreset;
use cwss::error::{CheckpointError, Error};
use cwss::model::CapsNetParams;
use cwss::saliency::SmoothGradConfig;
use cwss::taxonomy::{self, Mode, NUM_MASK_LABELS};
use cwss::tensor::Tensor;
use cwss::wsss::{self, PipelineConfig};

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CwssStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Data = 5,
    Numeric = 6,
    Io = 7,
    CheckpointTruncated = 8,
    CheckpointBadMagic = 9,
    CheckpointVersion = 10,
    CheckpointChecksum = 11,
    CheckpointMalformed = 12,
    ArchitectureMismatch = 13,
    Panic = 14,
}

/// Segmentation modes accepted by `cwss_segment`.
pub const CWSS_MODE_MORPHOLOGICAL: i32 = 0;
pub const CWSS_MODE_FUNCTIONAL: i32 = 1;

/// Opaque model handle.
pub struct CwssModel {
    params: CapsNetParams,
}

/// Options for `cwss_segment`; start from `cwss_segment_options_default`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CwssSegmentOptions {
    pub threshold: f32,
    pub blur_sigma: f32,
    pub samples: u32,
    pub sigma: f32,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> CwssStatus {
    match e {
        Error::Shape { .. } => CwssStatus::Shape,
        Error::InvalidArgument { .. } | Error::Autodiff(_) => CwssStatus::InvalidArgument,
        Error::Numeric(_) => CwssStatus::Numeric,
        Error::Config(_) => CwssStatus::Config,
        Error::Data(_) => CwssStatus::Data,
        Error::Checkpoint(c) => match c {
            CheckpointError::Truncated(_) => CwssStatus::CheckpointTruncated,
            CheckpointError::BadMagic => CwssStatus::CheckpointBadMagic,
            CheckpointError::UnsupportedVersion { .. } => CwssStatus::CheckpointVersion,
            CheckpointError::ChecksumMismatch { .. } => CwssStatus::CheckpointChecksum,
            CheckpointError::Malformed(_) => CwssStatus::CheckpointMalformed,
            CheckpointError::ArchitectureMismatch(_) => CwssStatus::ArchitectureMismatch,
        },
        Error::Io { .. } => CwssStatus::Io,
    }
}

/// Runs `f`, recording its error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (CwssStatus, String)>) -> CwssStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CwssStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CwssStatus::Panic
        }
    }
}

fn lift(e: Error) -> (CwssStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (CwssStatus, String) {
    (CwssStatus::NullPointer, format!("{} is null", what))
}

fn invalid(msg: String) -> (CwssStatus, String) {
    (CwssStatus::InvalidArgument, msg)
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (CwssStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{} is not UTF-8", what)))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const CwssModel) -> Result<&'a CwssModel, (CwssStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn image_arg(model: &CwssModel, data: *const f32, len: usize) -> Result<Tensor, (CwssStatus, String)> {
    if data.is_null() {
        return Err(null("image"));
    }
    let shape = model.params.arch.image_shape();
    let expected: usize = shape.iter().product();
    if len != expected {
        return Err((
            CwssStatus::Shape,
            format!("image has {} values, the model expects {} ({:?})", len, expected, shape),
        ));
    }
    let values = std::slice::from_raw_parts(data, len).to_vec();
    Tensor::new(shape.to_vec(), values).map_err(lift)
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn cwss_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cwss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Number of tissue classes (length of the score vector).
#[no_mangle]
pub extern "C" fn cwss_num_classes() -> u32 {
    taxonomy::NUM_CLASSES as u32
}

/// Code of a mask label (`0..29`), e.g. `"S.M"` or `"Background"`; null when out of range.
#[no_mangle]
pub extern "C" fn cwss_class_code(label: u32) -> *const c_char {
    static CODES: OnceLock<Vec<CString>> = OnceLock::new();
    let codes = CODES.get_or_init(|| {
        (0..NUM_MASK_LABELS)
            .map(|l| CString::new(taxonomy::code_of(l).unwrap_or("?")).unwrap_or_default())
            .collect()
    });
    codes.get(label as usize).map_or(ptr::null(), |c| c.as_ptr())
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cwss_model_load(path: *const c_char, out: *mut *mut CwssModel) -> CwssStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let ckpt = load_checkpoint(&path).map_err(lift)?;
        *out = Box::into_raw(Box::new(CwssModel { params: ckpt.params }));
        Ok(())
    })
}

/// Creates a freshly initialized model. `preset` is `"full"`, `"compact"` or `"tiny"`.
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cwss_model_init(preset: *const c_char, seed: u64, out: *mut *mut CwssModel) -> CwssStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let name = path_arg(preset, "preset")?;
        let preset = match name.to_str() {
            Some("full") => ArchPreset::Full,
            Some("compact") => ArchPreset::Compact,
            Some("tiny") => ArchPreset::Tiny,
            _ => return Err(invalid(format!("unknown preset {:?}", name))),
        };
        let params = CapsNetParams::init(&preset.build(), seed).map_err(lift)?;
        *out = Box::into_raw(Box::new(CwssModel { params }));
        Ok(())
    })
}

/// Writes the model parameters to a checkpoint file.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cwss_model_save(model: *const CwssModel, path: *const c_char) -> CwssStatus {
    guard(|| {
        let model = model_ref(model)?;
        let path = path_arg(path, "path")?;
        let ckpt = Checkpoint {
            params: model.params.clone(),
            state: None,
        };
        save_checkpoint(&path, &ckpt).map_err(lift)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cwss_model_free(model: *mut CwssModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square input images; 0 for a null model.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn cwss_model_input_size(model: *const CwssModel) -> u32 {
    model.as_ref().map_or(0, |m| m.params.arch.input_size as u32)
}

/// Class scores (capsule lengths) for one image.
///
/// # Safety
/// `image` must point to `image_len` floats and `scores` to `scores_len` floats.
#[no_mangle]
pub unsafe extern "C" fn cwss_classify(
    model: *const CwssModel,
    image: *const f32,
    image_len: usize,
    scores: *mut f32,
    scores_len: usize,
) -> CwssStatus {
    guard(|| {
        let model = model_ref(model)?;
        let image = image_arg(model, image, image_len)?;
        if scores.is_null() {
            return Err(null("scores"));
        }
        let n = model.params.arch.num_classes;
        if scores_len != n {
            return Err((
                CwssStatus::Shape,
                format!("scores buffer holds {}, need {}", scores_len, n),
            ));
        }
        let (s, _, _) = forward_classify(&image, &model.params).map_err(lift)?;
        std::slice::from_raw_parts_mut(scores, n).copy_from_slice(s.data());
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn cwss_segment_options_default() -> CwssSegmentOptions {
    let p = PipelineConfig::default();
    CwssSegmentOptions {
        threshold: p.threshold,
        blur_sigma: p.blur_sigma,
        samples: p.smoothgrad.samples as u32,
        sigma: p.smoothgrad.sigma,
        seed: p.smoothgrad.seed,
    }
}

/// Label mask (`S × S` bytes, row-major) for one image. `options` may be null
/// for the defaults.
///
/// # Safety
/// `image` must point to `image_len` floats, `mask` to `mask_len` bytes, and
/// `options` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn cwss_segment(
    model: *const CwssModel,
    image: *const f32,
    image_len: usize,
    mode: i32,
    options: *const CwssSegmentOptions,
    mask: *mut u8,
    mask_len: usize,
) -> CwssStatus {
    guard(|| {
        let model = model_ref(model)?;
        let image = image_arg(model, image, image_len)?;
        let mode = match mode {
            CWSS_MODE_MORPHOLOGICAL => Mode::Morphological,
            CWSS_MODE_FUNCTIONAL => Mode::Functional,
            m => return Err(invalid(format!("unknown mode {}", m))),
        };
        if mask.is_null() {
            return Err(null("mask"));
        }
        let size = model.params.arch.input_size;
        if mask_len != size * size {
            return Err((
                CwssStatus::Shape,
                format!("mask buffer holds {}, need {}", mask_len, size * size),
            ));
        }
        let o = options
            .as_ref()
            .copied()
            .unwrap_or_else(|| cwss_segment_options_default());
        let cfg = PipelineConfig {
            threshold: o.threshold,
            blur_sigma: o.blur_sigma,
            smoothgrad: SmoothGradConfig {
                samples: o.samples as usize,
                sigma: o.sigma,
                seed: o.seed,
            },
        };
        let maps = wsss::run_pipeline(&model.params, &image, mode, &cfg).map_err(lift)?;
        std::slice::from_raw_parts_mut(mask, mask_len).copy_from_slice(maps.mask.data());
        Ok(())
    })
}
