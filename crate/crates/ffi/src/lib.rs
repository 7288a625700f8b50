//! C ABI over the personalization engine.
//!
//! Every function returns an [`MsmStatus`]; on failure a human-readable
//! message is available from [`msm_last_error_message`] on the same thread.
//! Images cross the boundary as interleaved RGB `double` arrays with values
//! in `[0, 1]`, row-major, `height * width * 3` long.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use msm::corpus::{PreferredPair, PreferredSet};
use msm::nets::NetConfig;
use msm::personalize::{personalize_batch, Method, PreparedSet};
use msm::{Error, Image};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Decode = 4,
    Checkpoint = 5,
    EmptyPreferredSet = 6,
    Io = 7,
    Config = 8,
    BufferTooSmall = 9,
    Panic = 10,
    Internal = 11,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsmMethod {
    Masked = 0,
    Average = 1,
    Weighted = 2,
}

impl From<MsmMethod> for Method {
    fn from(m: MsmMethod) -> Self {
        match m {
            MsmMethod::Masked => Method::Masked,
            MsmMethod::Average => Method::Average,
            MsmMethod::Weighted => Method::Weighted,
        }
    }
}

/// Opaque trained model.
pub struct MsmModel {
    inner: Arc<msm::nets::MsmModel>,
}

/// Opaque preferred-pair session bound to a model.
pub struct MsmSession {
    model: Arc<msm::nets::MsmModel>,
    pairs: Vec<PreferredPair>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(MsmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidInput(_) | Error::NotEnoughData(_) => MsmStatus::InvalidArgument,
            Error::DimensionMismatch { .. } => MsmStatus::DimensionMismatch,
            Error::Config { .. } => MsmStatus::Config,
            Error::Decode(_) => MsmStatus::Decode,
            Error::Checkpoint(_) | Error::Json(_) => MsmStatus::Checkpoint,
            Error::EmptyPreferredSet => MsmStatus::EmptyPreferredSet,
            Error::Io(_) => MsmStatus::Io,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MsmStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MsmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MsmStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MsmStatus::Panic
        }
    }
}

unsafe fn image_arg(data: *const f64, height: usize, width: usize, what: &str) -> Result<Image, Fail> {
    if data.is_null() {
        return Err(null(what));
    }
    let n = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| Fail(MsmStatus::InvalidArgument, format!("`{what}` dimensions overflow")))?;
    let px = std::slice::from_raw_parts(data, n).to_vec();
    Ok(Image::from_vec(height, width, px)?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn msm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library on this thread.
#[no_mangle]
pub extern "C" fn msm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads an msm-v1 checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msm_model_load(path: *const c_char, out: *mut *mut MsmModel) -> MsmStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| Fail(MsmStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = msm::checkpoint::load(std::path::Path::new(path))?;
        *out = Box::into_raw(Box::new(MsmModel { inner: Arc::new(ck.model) }));
        Ok(())
    })
}

/// Loads an msm-v1 checkpoint from memory.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msm_model_from_bytes(data: *const u8, len: usize, out: *mut *mut MsmModel) -> MsmStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = msm::checkpoint::from_bytes(std::slice::from_raw_parts(data, len))?;
        *out = Box::into_raw(Box::new(MsmModel { inner: Arc::new(ck.model) }));
        Ok(())
    })
}

/// Untrained model with the given square working size and seed; for tests
/// and plumbing checks.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msm_model_new_untrained(image_size: usize, seed: u64, out: *mut *mut MsmModel) -> MsmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = NetConfig { embed_input_size: image_size, enhancer_input_size: image_size, transformer_layers: 2, seed, ..NetConfig::default() };
        let model = msm::nets::MsmModel::new(cfg)?;
        *out = Box::into_raw(Box::new(MsmModel { inner: Arc::new(model) }));
        Ok(())
    })
}

/// Side length preferred pairs are resized to.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn msm_model_image_size(model: *const MsmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.cfg.enhancer_input_size)
}

/// # Safety
/// `model` must be NULL or a handle not yet freed. Sessions created from it
/// stay valid.
#[no_mangle]
pub unsafe extern "C" fn msm_model_free(model: *mut MsmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msm_session_new(model: *const MsmModel, out: *mut *mut MsmSession) -> MsmStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(MsmSession { model: model.inner.clone(), pairs: Vec::new() }));
        Ok(())
    })
}

/// # Safety
/// `session` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msm_session_free(session: *mut MsmSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Number of preferred pairs held.
///
/// # Safety
/// `session` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn msm_session_len(session: *const MsmSession) -> usize {
    session.as_ref().map_or(0, |s| s.pairs.len())
}

/// Appends a preferred pair; both images share `height x width` and are
/// resized to the model's working size. `out_count` may be NULL.
///
/// # Safety
/// Image pointers must hold `height * width * 3` doubles.
#[no_mangle]
pub unsafe extern "C" fn msm_session_add_pair(
    session: *mut MsmSession,
    original: *const f64,
    retouched: *const f64,
    height: usize,
    width: usize,
    out_count: *mut usize,
) -> MsmStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let side = s.model.cfg.enhancer_input_size;
        let x = image_arg(original, height, width, "original")?.resize(side, side)?;
        let y = image_arg(retouched, height, width, "retouched")?.resize(side, side)?;
        s.pairs.push(PreferredPair::new(x, y, 0)?);
        if let Some(c) = out_count.as_mut() {
            *c = s.pairs.len();
        }
        Ok(())
    })
}

/// Removes the pair at `index`. `out_count` may be NULL.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn msm_session_remove_pair(session: *mut MsmSession, index: usize, out_count: *mut usize) -> MsmStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        if index >= s.pairs.len() {
            return Err(Fail(MsmStatus::InvalidArgument, format!("index {index} out of range ({} pairs)", s.pairs.len())));
        }
        s.pairs.remove(index);
        if let Some(c) = out_count.as_mut() {
            *c = s.pairs.len();
        }
        Ok(())
    })
}

/// Personalizes one image. `out_pixels` receives `height * width * 3`
/// doubles. For the masked method the per-pair attention is written to
/// `out_attention` (capacity `attention_cap`, may be NULL when 0) and its
/// length to `out_attention_len`; other methods report length 0.
///
/// # Safety
/// All non-NULL pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn msm_session_enhance(
    session: *const MsmSession,
    method: MsmMethod,
    unseen: *const f64,
    height: usize,
    width: usize,
    out_pixels: *mut f64,
    out_attention: *mut f64,
    attention_cap: usize,
    out_attention_len: *mut usize,
) -> MsmStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        if out_pixels.is_null() {
            return Err(null("out_pixels"));
        }
        let x = image_arg(unseen, height, width, "unseen")?;
        if s.pairs.is_empty() {
            return Err(Error::EmptyPreferredSet.into());
        }
        let set = PreferredSet::new("ffi", s.pairs.clone())?;
        let prepared = PreparedSet::new(&s.model, &set)?;
        let (img, _, att) = personalize_batch(&s.model, &prepared, method.into(), &[&x])?.remove(0);
        let att = att.unwrap_or_default();
        if att.len() > attention_cap {
            return Err(Fail(MsmStatus::BufferTooSmall, format!("attention needs {} slots, got {attention_cap}", att.len())));
        }
        if !att.is_empty() && out_attention.is_null() {
            return Err(null("out_attention"));
        }
        std::slice::from_raw_parts_mut(out_pixels, img.data().len()).copy_from_slice(img.data());
        if !att.is_empty() {
            std::slice::from_raw_parts_mut(out_attention, att.len()).copy_from_slice(&att);
        }
        if let Some(n) = out_attention_len.as_mut() {
            *n = att.len();
        }
        Ok(())
    })
}
