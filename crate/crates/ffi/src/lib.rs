//! C ABI over `stylecl`: style banks, checkpoints and gap metrics.
//!
//! Every function returns a [`StyleclStatus`]. On failure a message is kept
//! per thread and can be read with [`stylecl_last_error`]. Images are
//! row-major `H x W x 3` floats in `[0, 1]`, channel fastest.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use stylecl::eval;
use stylecl::model::{predict, Checkpoint, SegModel};
use stylecl::numerics::Tensor3;
use stylecl::style::{extract_style, StyleBank};
use stylecl::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StyleclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Protocol = 6,
    Division = 7,
    Internal = 8,
}

/// Opaque style bank.
pub struct StyleclBank {
    inner: StyleBank,
}

/// Opaque segmentation model loaded from a checkpoint.
pub struct StyleclModel {
    inner: SegModel<f32>,
    step: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> StyleclStatus {
    match e {
        Error::Dimension(_) | Error::Shape(_) => StyleclStatus::Shape,
        Error::Io { .. } => StyleclStatus::Io,
        Error::Format { .. } => StyleclStatus::Format,
        Error::Protocol(_) => StyleclStatus::Protocol,
        Error::Division(_) => StyleclStatus::Division,
        Error::Config { .. } | Error::Label(_) | Error::EmptyDataset(_) | Error::Refused(_) => {
            StyleclStatus::InvalidArgument
        }
        Error::Invariant(_) => StyleclStatus::Internal,
    }
}

struct Fail(StyleclStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(StyleclStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> StyleclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            StyleclStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            StyleclStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(StyleclStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn image_arg(data: *const f32, h: usize, w: usize) -> Result<Tensor3<f32>, Fail> {
    if data.is_null() {
        return Err(null("image"));
    }
    let n = h
        .checked_mul(w)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| Fail(StyleclStatus::Shape, "image too large".into()))?;
    Ok(Tensor3::from_vec(
        h,
        w,
        3,
        std::slice::from_raw_parts(data, n).to_vec(),
    )?)
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn stylecl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn stylecl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Relative gap `(oracle - miou) / oracle` in percent.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn stylecl_delta(
    miou: f64,
    oracle_miou: f64,
    out: *mut f64,
) -> StyleclStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = eval::delta(miou, oracle_miou)?;
        Ok(())
    })
}

/// Mean of `len` gaps.
///
/// # Safety
/// `deltas` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stylecl_delta_bar(
    deltas: *const f64,
    len: usize,
    out: *mut f64,
) -> StyleclStatus {
    guard(|| {
        if deltas.is_null() {
            return Err(null("deltas"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = eval::delta_bar(std::slice::from_raw_parts(deltas, len))?;
        Ok(())
    })
}

/// Creates an empty bank for `h x w` images.
///
/// # Safety
/// `out` must be valid for writes. Free the result with [`stylecl_bank_free`].
#[no_mangle]
pub unsafe extern "C" fn stylecl_bank_new(
    h: usize,
    w: usize,
    beta: f64,
    out: *mut *mut StyleclBank,
) -> StyleclStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let inner = StyleBank::new(h, w, beta)?;
        *out = Box::into_raw(Box::new(StyleclBank { inner }));
        Ok(())
    })
}

/// Loads a bank file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn stylecl_bank_load(
    path: *const c_char,
    out: *mut *mut StyleclBank,
) -> StyleclStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let inner = StyleBank::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(StyleclBank { inner }));
        Ok(())
    })
}

/// # Safety
/// `bank` and `path` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stylecl_bank_save(
    bank: *const StyleclBank,
    path: *const c_char,
) -> StyleclStatus {
    guard(|| {
        let bank = bank.as_ref().ok_or_else(|| null("bank"))?;
        bank.inner.save(&path_arg(path)?)?;
        Ok(())
    })
}

/// Extracts the mean style of `count` images and appends it as the next
/// step.
///
/// # Safety
/// `images` must hold `count * h * w * 3` floats, `h x w` matching the bank.
#[no_mangle]
pub unsafe extern "C" fn stylecl_bank_add_style(
    bank: *mut StyleclBank,
    images: *const f32,
    count: usize,
) -> StyleclStatus {
    guard(|| {
        let bank = bank.as_mut().ok_or_else(|| null("bank"))?;
        if images.is_null() {
            return Err(null("images"));
        }
        let (h, w) = bank.inner.image_size();
        let per = h * w * 3;
        let imgs = (0..count)
            .map(|i| image_arg(images.add(i * per), h, w))
            .collect::<Result<Vec<_>, Fail>>()?;
        let token = extract_style(&imgs, bank.inner.beta(), bank.inner.len() as u32)?;
        bank.inner = bank.inner.clone().with_token(token)?;
        Ok(())
    })
}

/// Number of stored styles, or 0 for a null bank.
///
/// # Safety
/// `bank` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn stylecl_bank_len(bank: *const StyleclBank) -> usize {
    bank.as_ref().map_or(0, |b| b.inner.len())
}

/// Renders an `h x w` image in style `step`, writing `h * w * 3` floats.
///
/// # Safety
/// `image` and `out` must each hold `h * w * 3` floats.
#[no_mangle]
pub unsafe extern "C" fn stylecl_bank_apply(
    bank: *const StyleclBank,
    step: u32,
    image: *const f32,
    h: usize,
    w: usize,
    out: *mut f32,
) -> StyleclStatus {
    guard(|| {
        let bank = bank.as_ref().ok_or_else(|| null("bank"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let img = image_arg(image, h, w)?;
        let styled = bank.inner.apply(&img, step)?;
        ptr::copy_nonoverlapping(styled.data().as_ptr(), out, styled.data().len());
        Ok(())
    })
}

/// # Safety
/// `bank` must be null or come from this library, and not be used after.
#[no_mangle]
pub unsafe extern "C" fn stylecl_bank_free(bank: *mut StyleclBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn stylecl_model_load(
    path: *const c_char,
    out: *mut *mut StyleclModel,
) -> StyleclStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ck = Checkpoint::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(StyleclModel {
            inner: ck.model,
            step: ck.step,
        }));
        Ok(())
    })
}

/// Output channel count, or 0 for a null model.
///
/// # Safety
/// `model` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn stylecl_model_num_classes(model: *const StyleclModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_classes())
}

/// Protocol step the checkpoint was saved at.
///
/// # Safety
/// `model` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stylecl_model_step(
    model: *const StyleclModel,
    out: *mut u32,
) -> StyleclStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.step;
        Ok(())
    })
}

/// Copies the class id of every output channel into `out` (capacity `cap`).
///
/// # Safety
/// `out` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn stylecl_model_layout(
    model: *const StyleclModel,
    out: *mut u8,
    cap: usize,
) -> StyleclStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let layout = m.inner.layout();
        if cap < layout.len() {
            return Err(Fail(
                StyleclStatus::Shape,
                format!("layout needs {} entries, buffer holds {cap}", layout.len()),
            ));
        }
        ptr::copy_nonoverlapping(layout.as_ptr(), out, layout.len());
        Ok(())
    })
}

/// Writes `h * w * C` logits.
///
/// # Safety
/// `image` must hold `h * w * 3` floats and `logits` `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn stylecl_model_forward(
    model: *const StyleclModel,
    image: *const f32,
    h: usize,
    w: usize,
    logits: *mut f32,
    cap: usize,
) -> StyleclStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if logits.is_null() {
            return Err(null("logits"));
        }
        let out = m.inner.forward(&image_arg(image, h, w)?)?;
        if cap < out.data().len() {
            return Err(Fail(
                StyleclStatus::Shape,
                format!(
                    "logits need {} floats, buffer holds {cap}",
                    out.data().len()
                ),
            ));
        }
        ptr::copy_nonoverlapping(out.data().as_ptr(), logits, out.data().len());
        Ok(())
    })
}

/// Writes the predicted class id of each of the `h * w` pixels.
///
/// # Safety
/// `image` must hold `h * w * 3` floats and `labels` `h * w` bytes.
#[no_mangle]
pub unsafe extern "C" fn stylecl_model_predict(
    model: *const StyleclModel,
    image: *const f32,
    h: usize,
    w: usize,
    labels: *mut u8,
) -> StyleclStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        let pred = predict(&m.inner, &image_arg(image, h, w)?)?;
        ptr::copy_nonoverlapping(pred.as_ptr(), labels, pred.len());
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library, and not be used after.
#[no_mangle]
pub unsafe extern "C" fn stylecl_model_free(model: *mut StyleclModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
