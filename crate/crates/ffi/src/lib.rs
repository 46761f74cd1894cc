//! C ABI over the pneumoseg library.
//!
//! Objects cross the boundary as opaque handles created by `ps_*_load` or
//! `ps_*_new` functions and released with the matching `ps_*_free`. Every
//! fallible call returns a [`PsStatus`]; on failure the message is kept per
//! thread and can be read with [`ps_last_error`]. Panics never unwind into
//! the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use pneumoseg::error::Error;
use pneumoseg::evaluate::dice;
use pneumoseg::model::Model;
use pneumoseg::quantify::quantify;
use pneumoseg::volume_io::{load_mask_any, load_volume, save_mask, CtVolume, LabelMask, Spacing};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsStatus {
    PsOk = 0,
    /// A required pointer argument was null.
    PsErrNullArgument = 1,
    /// A string argument was not valid UTF-8.
    PsErrInvalidString = 2,
    PsErrIo = 3,
    PsErrFormat = 4,
    PsErrData = 5,
    PsErrNumeric = 6,
    PsErrConfig = 7,
    /// A caller-supplied buffer is too small.
    PsErrBufferTooSmall = 8,
    /// Internal fault; the library caught a panic.
    PsErrInternal = 9,
}

/// Trained segmentation model.
pub struct PsModel(Model);

/// CT volume in Hounsfield units.
pub struct PsVolume(CtVolume);

/// Label mask (0 background, 1 GGO, 2 high-opacity).
pub struct PsMask(LabelMask);

/// Lesion volumes in millilitres. `burden_pct` and `lung_ml` are valid only
/// when `has_lung` is non-zero.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PsQuantReport {
    pub ggo_ml: f64,
    pub high_opacity_ml: f64,
    pub total_pneumonia_ml: f64,
    pub lung_ml: f64,
    pub burden_pct: f64,
    pub has_lung: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> PsStatus {
    match err {
        Error::Io { .. } => PsStatus::PsErrIo,
        Error::Format { .. } => PsStatus::PsErrFormat,
        Error::Data(_) => PsStatus::PsErrData,
        Error::Numeric(_) => PsStatus::PsErrNumeric,
        Error::Config(_) => PsStatus::PsErrConfig,
    }
}

/// Failure inside a wrapper, before mapping to a status.
enum Fail {
    Lib(Error),
    Status(PsStatus, &'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            PsStatus::PsOk
        }
        Ok(Err(Fail::Lib(e))) => {
            set_last_error(&e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_last_error(msg);
            s
        }
        Err(_) => {
            set_last_error("internal error");
            PsStatus::PsErrInternal
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Status(PsStatus::PsErrNullArgument, "null path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail::Status(PsStatus::PsErrInvalidString, "path is not valid UTF-8"))
}

unsafe fn deref<'a, T>(p: *const T) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or(Fail::Status(PsStatus::PsErrNullArgument, "null handle"))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Status(
            PsStatus::PsErrNullArgument,
            "null output pointer",
        ));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn null_out<T>(out: *mut *mut T) {
    if !out.is_null() {
        // SAFETY: caller supplied a writable pointer slot.
        unsafe { *out = std::ptr::null_mut() };
    }
}

/// Message for the most recent failed call on this thread; empty after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ps_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a weight file written by the library or its command-line tool.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_model_load(path: *const c_char, out: *mut *mut PsModel) -> PsStatus {
    null_out(out);
    guard(|| put(out, PsModel(Model::load(path_arg(path)?)?)))
}

/// # Safety
/// `model` must come from [`ps_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ps_model_free(model: *mut PsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// In-plane resolution the model works at, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_model_image_size(model: *const PsModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.spec.image_size())
}

/// Trainable parameter count, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_model_num_params(model: *const PsModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.store.num_params())
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_volume_load(path: *const c_char, out: *mut *mut PsVolume) -> PsStatus {
    null_out(out);
    guard(|| put(out, PsVolume(load_volume(path_arg(path)?)?)))
}

/// Copies `depth * rows * cols` voxels (z-major, then y, then x) into a new
/// volume with spacing in millimetres.
///
/// # Safety
/// `voxels` must point to `depth * rows * cols` readable values and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn ps_volume_new(
    depth: usize,
    rows: usize,
    cols: usize,
    dz: f64,
    dy: f64,
    dx: f64,
    voxels: *const i16,
    out: *mut *mut PsVolume,
) -> PsStatus {
    null_out(out);
    guard(|| {
        if voxels.is_null() {
            return Err(Fail::Status(
                PsStatus::PsErrNullArgument,
                "null voxel buffer",
            ));
        }
        let n = depth
            .checked_mul(rows)
            .and_then(|v| v.checked_mul(cols))
            .ok_or(Fail::Status(PsStatus::PsErrData, "volume size overflows"))?;
        let data = std::slice::from_raw_parts(voxels, n).to_vec();
        let vol = CtVolume::new(
            "volume",
            [depth, rows, cols],
            Spacing::new(dz, dy, dx)?,
            data,
        )?;
        put(out, PsVolume(vol))
    })
}

/// Writes depth, rows and cols into `shape[0..3]`.
///
/// # Safety
/// `volume` must be live and `shape` must have room for three values.
#[no_mangle]
pub unsafe extern "C" fn ps_volume_shape(volume: *const PsVolume, shape: *mut usize) -> PsStatus {
    guard(|| {
        let v = deref(volume)?;
        if shape.is_null() {
            return Err(Fail::Status(
                PsStatus::PsErrNullArgument,
                "null shape buffer",
            ));
        }
        std::slice::from_raw_parts_mut(shape, 3).copy_from_slice(&v.0.shape());
        Ok(())
    })
}

/// # Safety
/// `volume` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ps_volume_free(volume: *mut PsVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// Segments `volume`, processing `batch_size` samples per forward pass.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ps_model_predict(
    model: *const PsModel,
    volume: *const PsVolume,
    batch_size: usize,
    out: *mut *mut PsMask,
) -> PsStatus {
    null_out(out);
    guard(|| {
        let mask = deref(model)?
            .0
            .predict_volume(&deref(volume)?.0, batch_size.max(1))?;
        put(out, PsMask(mask))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_load(path: *const c_char, out: *mut *mut PsMask) -> PsStatus {
    null_out(out);
    guard(|| put(out, PsMask(load_mask_any(path_arg(path)?)?)))
}

/// # Safety
/// `mask` must be live and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_save(mask: *const PsMask, path: *const c_char) -> PsStatus {
    guard(|| Ok(save_mask(&deref(mask)?.0, path_arg(path)?)?))
}

/// Writes depth, rows and cols into `shape[0..3]`.
///
/// # Safety
/// `mask` must be live and `shape` must have room for three values.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_shape(mask: *const PsMask, shape: *mut usize) -> PsStatus {
    guard(|| {
        let m = deref(mask)?;
        if shape.is_null() {
            return Err(Fail::Status(
                PsStatus::PsErrNullArgument,
                "null shape buffer",
            ));
        }
        std::slice::from_raw_parts_mut(shape, 3).copy_from_slice(&m.0.shape());
        Ok(())
    })
}

/// Copies the labels into `buf`, which must hold at least the voxel count.
///
/// # Safety
/// `mask` must be live and `buf` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_labels(mask: *const PsMask, buf: *mut u8, len: usize) -> PsStatus {
    guard(|| {
        let labels = deref(mask)?.0.labels();
        if buf.is_null() {
            return Err(Fail::Status(
                PsStatus::PsErrNullArgument,
                "null label buffer",
            ));
        }
        if len < labels.len() {
            return Err(Fail::Status(
                PsStatus::PsErrBufferTooSmall,
                "label buffer too small",
            ));
        }
        std::slice::from_raw_parts_mut(buf, labels.len()).copy_from_slice(labels);
        Ok(())
    })
}

/// # Safety
/// `mask` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_free(mask: *mut PsMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Lesion volumes of `mask`. Spacing comes from the mask header unless all
/// of `dz`, `dy`, `dx` are positive. `lung` may be null, in which case the
/// mask's own lung field (if any) gives the burden.
///
/// # Safety
/// `mask` must be live, `lung` null or live, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ps_quantify(
    mask: *const PsMask,
    lung: *const PsMask,
    dz: f64,
    dy: f64,
    dx: f64,
    out: *mut PsQuantReport,
) -> PsStatus {
    guard(|| {
        let m = &deref(mask)?.0;
        if out.is_null() {
            return Err(Fail::Status(
                PsStatus::PsErrNullArgument,
                "null report pointer",
            ));
        }
        let spacing = if dz > 0.0 && dy > 0.0 && dx > 0.0 {
            Spacing::new(dz, dy, dx)?
        } else {
            m.spacing()
                .ok_or(Fail::Status(PsStatus::PsErrData, "mask carries no spacing"))?
        };
        let lung = lung.as_ref().map(|l| &l.0);
        let r = quantify("mask", m, lung, spacing)?;
        *out = PsQuantReport {
            ggo_ml: r.ggo_ml,
            high_opacity_ml: r.high_opacity_ml,
            total_pneumonia_ml: r.total_pneumonia_ml,
            lung_ml: r.lung_ml.unwrap_or(0.0),
            burden_pct: r.burden_pct.unwrap_or(0.0),
            has_lung: i32::from(r.burden_pct.is_some()),
        };
        Ok(())
    })
}

/// Dice overlap of one class between two masks of equal shape.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ps_dice(
    pred: *const PsMask,
    reference: *const PsMask,
    class_code: u8,
    out: *mut f64,
) -> PsStatus {
    guard(|| {
        let d = dice(&deref(pred)?.0, &deref(reference)?.0, class_code)?;
        if out.is_null() {
            return Err(Fail::Status(
                PsStatus::PsErrNullArgument,
                "null result pointer",
            ));
        }
        *out = d;
        Ok(())
    })
}
