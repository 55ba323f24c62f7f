//! C interface: load a checkpoint and run inference, compute position fields
//! and evaluation metrics on caller-owned buffers.
//!
//! Every function returns a [`NerdStatus`]. On failure a message is kept per
//! thread and can be read with [`nerd_last_error`]. Arrays are row-major:
//! images are `batch x height x width x channels` doubles, masks are
//! `depth x height x width` bytes holding 0 or 1.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nerd::coords::{normalize_positions, position_field};
use nerd::heads::{segment, sigmoid, HeadKind};
use nerd::metrics::{connected_components, dice, lesion_counts, lesion_metrics, surface_distances, Connectivity};
use nerd::nn::Parameterized;
use nerd::{Error, Mask, SegModel, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NerdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Format = 5,
    Io = 6,
    UndefinedBoundary = 7,
    Internal = 8,
}

/// Head variant of a loaded model.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NerdHead {
    Baseline = 0,
    Nerdm = 1,
    Nerdc = 2,
}

/// Opaque handle to a model loaded from a checkpoint.
pub struct NerdModel {
    model: SegModel,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct NerdModelInfo {
    pub in_channels: usize,
    pub feature_channels: usize,
    pub param_count: usize,
    pub head: u32,
}

/// Lesion-wise scores as fractions. Undefined values are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct NerdLesionMetrics {
    pub ldice: f64,
    pub ltpr: f64,
    pub lfpr: f64,
    pub gt_lesions: usize,
    pub pred_lesions: usize,
}

/// Surface distances in physical units.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct NerdSurfaceMetrics {
    pub hd: f64,
    pub hd95: f64,
    pub asd: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with_borrow_mut(|e| *e = Some(c));
}

fn status_of(err: &Error) -> NerdStatus {
    match err {
        Error::InvalidArgument(_) | Error::EmptyDataset(_) => NerdStatus::InvalidArgument,
        Error::Shape(_) => NerdStatus::Shape,
        Error::Config(_) => NerdStatus::Config,
        Error::Format { .. } => NerdStatus::Format,
        Error::Io { .. } => NerdStatus::Io,
        Error::UndefinedBoundary(_) => NerdStatus::UndefinedBoundary,
        Error::ContractViolation(_) | Error::Generation(_) | Error::NonFiniteLoss { .. } => NerdStatus::Internal,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> NerdStatus {
    LAST_ERROR.with_borrow_mut(|e| *e = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => NerdStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            NerdStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            NerdStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(p)
    }
}

fn volume(len_of: [usize; 3]) -> Result<usize, Failure> {
    len_of
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Lib(Error::Shape(format!("invalid mask dimensions {len_of:?}"))))
}

/// # Safety
/// `data` must point to `d * h * w` readable bytes.
unsafe fn read_mask(data: *const u8, dims: [usize; 3], what: &'static str) -> Result<Mask, Failure> {
    let n = volume(dims)?;
    let data = non_null(data, what)?;
    Ok(Mask::from_vec(dims, std::slice::from_raw_parts(data, n).to_vec())?)
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn nerd_last_error() -> *const c_char {
    LAST_ERROR.with_borrow(|e| e.as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nerd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
/// The handle must be released with [`nerd_model_free`].
#[no_mangle]
pub unsafe extern "C" fn nerd_model_load(path: *const c_char, out: *mut *mut NerdModel) -> NerdStatus {
    guard(|| {
        let path = non_null(path, "path")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path).to_str().map_err(|_| Error::InvalidArgument("path is not valid UTF-8".into()))?;
        let model = SegModel::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(NerdModel { model }));
        Ok(())
    })
}

/// Releases a handle from [`nerd_model_load`]. NULL is ignored.
///
/// # Safety
/// `model` must come from [`nerd_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nerd_model_free(model: *mut NerdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn nerd_model_info(model: *const NerdModel, out: *mut NerdModelInfo) -> NerdStatus {
    guard(|| {
        let m = &(*non_null(model, "model")?).model;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let head = match m.head().kind() {
            HeadKind::Baseline => NerdHead::Baseline,
            HeadKind::Nerdm => NerdHead::Nerdm,
            HeadKind::Nerdc => NerdHead::Nerdc,
        };
        *out = NerdModelInfo {
            in_channels: m.config().backbone.in_channels,
            feature_channels: m.config().backbone.feature_channels,
            param_count: m.param_count(),
            head: head as u32,
        };
        Ok(())
    })
}

/// # Safety
/// `images` must hold `batch * height * width * channels` doubles.
unsafe fn logits(model: *const NerdModel, images: *const f64, shape: [usize; 4]) -> Result<nerd::heads::LogitMap, Failure> {
    let m = &(*non_null(model, "model")?).model;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Lib(Error::Shape(format!("invalid image shape {shape:?}"))))?;
    let images = non_null(images, "images")?;
    let x = Tensor::from_vec(shape, std::slice::from_raw_parts(images, n).to_vec())?;
    Ok(m.predict(&x)?)
}

/// Foreground probabilities, `batch * height * width` values written to `out`.
///
/// # Safety
/// `images` must hold `batch * height * width * channels` doubles and `out`
/// room for `batch * height * width`.
#[no_mangle]
pub unsafe extern "C" fn nerd_model_predict(
    model: *const NerdModel,
    images: *const f64,
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    out: *mut f64,
) -> NerdStatus {
    guard(|| {
        let l = logits(model, images, [batch, height, width, channels])?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let out = std::slice::from_raw_parts_mut(out, l.values.len());
        for (o, &v) in out.iter_mut().zip(&l.values) {
            *o = sigmoid(v);
        }
        Ok(())
    })
}

/// Binary masks thresholded at `threshold`, `batch * height * width` bytes.
///
/// # Safety
/// As [`nerd_model_predict`], with `out` holding bytes.
#[no_mangle]
pub unsafe extern "C" fn nerd_model_segment(
    model: *const NerdModel,
    images: *const f64,
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    threshold: f64,
    out: *mut u8,
) -> NerdStatus {
    guard(|| {
        let l = logits(model, images, [batch, height, width, channels])?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let mask = segment(&l, threshold)?;
        std::slice::from_raw_parts_mut(out, mask.data().len()).copy_from_slice(mask.data());
        Ok(())
    })
}

/// Distances of every pixel to the top, right, bottom and left borders,
/// `height * width * 4` values, optionally min-max normalized per channel.
///
/// # Safety
/// `out` must have room for `height * width * 4` doubles.
#[no_mangle]
pub unsafe extern "C" fn nerd_position_field(height: usize, width: usize, normalized: bool, out: *mut f64) -> NerdStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let mut field = position_field(height, width)?;
        if normalized {
            field = normalize_positions(field)?;
        }
        std::slice::from_raw_parts_mut(out, field.values().len()).copy_from_slice(field.values());
        Ok(())
    })
}

/// Voxel Dice of two masks, as a fraction.
///
/// # Safety
/// `pred` and `gt` must each hold `depth * height * width` bytes.
#[no_mangle]
pub unsafe extern "C" fn nerd_dice(pred: *const u8, gt: *const u8, depth: usize, height: usize, width: usize, out: *mut f64) -> NerdStatus {
    guard(|| {
        let dims = [depth, height, width];
        let (p, g) = (read_mask(pred, dims, "pred")?, read_mask(gt, dims, "gt")?);
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = dice(&p, &g)?;
        Ok(())
    })
}

/// Lesion-wise metrics with the given connectivity (4, 8, 6 or 26).
///
/// # Safety
/// As [`nerd_dice`].
#[no_mangle]
pub unsafe extern "C" fn nerd_lesion_metrics(
    pred: *const u8,
    gt: *const u8,
    depth: usize,
    height: usize,
    width: usize,
    connectivity: u32,
    ldice_factor: u32,
    out: *mut NerdLesionMetrics,
) -> NerdStatus {
    guard(|| {
        let dims = [depth, height, width];
        let (p, g) = (read_mask(pred, dims, "pred")?, read_mask(gt, dims, "gt")?);
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let conn = Connectivity::try_from(connectivity)?;
        let counts = lesion_counts(&connected_components(&p, conn), &connected_components(&g, conn))?;
        let m = lesion_metrics(counts, ldice_factor);
        *out = NerdLesionMetrics {
            ldice: m.ldice.unwrap_or(f64::NAN),
            ltpr: m.ltpr.unwrap_or(f64::NAN),
            lfpr: m.lfpr.unwrap_or(f64::NAN),
            gt_lesions: counts.gl,
            pred_lesions: counts.pl,
        };
        Ok(())
    })
}

/// Hausdorff, 95th-percentile Hausdorff and average surface distance.
/// Returns `UndefinedBoundary` when either mask is empty.
///
/// # Safety
/// As [`nerd_dice`]; `spacing` must point to 3 doubles (depth, height, width).
#[no_mangle]
pub unsafe extern "C" fn nerd_surface_metrics(
    pred: *const u8,
    gt: *const u8,
    depth: usize,
    height: usize,
    width: usize,
    spacing: *const f64,
    out: *mut NerdSurfaceMetrics,
) -> NerdStatus {
    guard(|| {
        let dims = [depth, height, width];
        let (p, g) = (read_mask(pred, dims, "pred")?, read_mask(gt, dims, "gt")?);
        let spacing = non_null(spacing, "spacing")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let s = std::slice::from_raw_parts(spacing, 3);
        let d = surface_distances(&p, &g, [s[0], s[1], s[2]])?;
        *out = NerdSurfaceMetrics { hd: d.hd(), hd95: d.hd95(), asd: d.asd() };
        Ok(())
    })
}
