//! C interface to `ykd`.
//!
//! Every function returns a [`YkdStatus`]. On failure the message is kept
//! per thread and can be read with `ykd_last_error_message`. Handles are
//! opaque and must be released with their `*_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ndarray::{Array3, ArrayView2};

use ykd::analysis::linear_cka;
use ykd::averaging::average_into;
use ykd::infer::{infer, InferOptions};
use ykd::model::checkpoint::{load_checkpoint, load_for_inference, save_checkpoint};
use ykd::model::{Detection, ModelState};
use ykd::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YkdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    Format = 6,
    Utf8 = 7,
    OutOfRange = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// A loaded model.
pub struct YkdModel {
    state: ModelState,
}

/// Detections of one image.
pub struct YkdDetections {
    items: Vec<Detection>,
}

/// Plain view of one detection; the mask is read separately.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct YkdDetection {
    pub class_id: u32,
    pub score: f32,
    /// `x0, y0, x1, y1` in pixels.
    pub bbox: [f32; 4],
    pub source_branch: usize,
    pub mask_width: usize,
    pub mask_height: usize,
    pub mask_area: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> YkdStatus {
    match e {
        Error::InvalidInput(_) => YkdStatus::InvalidInput,
        Error::Record { .. } | Error::Json(_) | Error::Png(_) => YkdStatus::Format,
        Error::Shape(_) => YkdStatus::Shape,
        Error::Checkpoint(_) => YkdStatus::Checkpoint,
        Error::Io { .. } => YkdStatus::Io,
    }
}

/// Internal failure carrying its status and message.
struct Fail(YkdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> YkdStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => YkdStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            YkdStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail(YkdStatus::NullPointer, "path is null".into()));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(YkdStatus::Utf8, "path is not valid UTF-8".into()))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(YkdStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(YkdStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next call on the same thread.
#[no_mangle]
pub extern "C" fn ykd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ykd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint directory. With `inference_only` set, only the
/// latest head is read.
#[no_mangle]
pub unsafe extern "C" fn ykd_model_load(dir: *const c_char, inference_only: bool, out: *mut *mut YkdModel) -> YkdStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let dir = path_arg(dir)?;
        let state = if inference_only { load_for_inference(&dir)? } else { load_checkpoint(&dir)? };
        *out = Box::into_raw(Box::new(YkdModel { state }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ykd_model_save(model: *const YkdModel, dir: *const c_char) -> YkdStatus {
    guard(|| {
        let m = deref(model, "model")?;
        save_checkpoint(&m.state, &path_arg(dir)?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ykd_model_free(model: *mut YkdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of feature-extractor branches.
#[no_mangle]
pub unsafe extern "C" fn ykd_model_num_branches(model: *const YkdModel, out: *mut usize) -> YkdStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = deref(model, "model")?.state.fes.len();
        Ok(())
    })
}

/// Index of the latest step.
#[no_mangle]
pub unsafe extern "C" fn ykd_model_current_step(model: *const YkdModel, out: *mut usize) -> YkdStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = deref(model, "model")?.state.current_step();
        Ok(())
    })
}

/// Copies the latest head's class ids into `buf`. `written` always receives
/// the number of classes; a short buffer yields `BufferTooSmall`.
#[no_mangle]
pub unsafe extern "C" fn ykd_model_class_ids(model: *const YkdModel, buf: *mut u32, capacity: usize, written: *mut usize) -> YkdStatus {
    guard(|| {
        out_ptr(written, "written")?;
        let domain = &deref(model, "model")?.state.last_head().domain;
        *written = domain.len();
        if capacity < domain.len() {
            return Err(Fail(YkdStatus::BufferTooSmall, format!("need {} slots, got {capacity}", domain.len())));
        }
        out_ptr(buf, "buf")?;
        ptr::copy_nonoverlapping(domain.as_ptr(), buf, domain.len());
        Ok(())
    })
}

/// Runs every branch on one image given as planar `channels x height x
/// width` floats in `[0, 1]`.
#[no_mangle]
pub unsafe extern "C" fn ykd_infer(
    model: *const YkdModel,
    pixels: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    score_thresh: f32,
    out: *mut *mut YkdDetections,
) -> YkdStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let m = deref(model, "model")?;
        if pixels.is_null() {
            return Err(Fail(YkdStatus::NullPointer, "pixels is null".into()));
        }
        if channels != 3 || height == 0 || width == 0 {
            return Err(Fail(YkdStatus::Shape, format!("expected 3 x H x W pixels, got {channels} x {height} x {width}")));
        }
        let n = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Fail(YkdStatus::Shape, "image too large".into()))?;
        let data = std::slice::from_raw_parts(pixels, n).to_vec();
        let arr = Array3::from_shape_vec((channels, height, width), data).map_err(|e| Fail(YkdStatus::Shape, e.to_string()))?;
        let image = ykd::dataset::ImageSample {
            image_id: "ffi".into(),
            pixels: arr,
            annotations: Vec::new(),
        };
        let opts = InferOptions {
            score_thresh,
            ..InferOptions::default()
        };
        let items = infer(&m.state, &image, &opts)?;
        *out = Box::into_raw(Box::new(YkdDetections { items }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ykd_detections_len(dets: *const YkdDetections, out: *mut usize) -> YkdStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = deref(dets, "detections")?.items.len();
        Ok(())
    })
}

unsafe fn item<'a>(dets: *const YkdDetections, index: usize) -> Result<&'a Detection, Fail> {
    let d = deref(dets, "detections")?;
    d.items
        .get(index)
        .ok_or_else(|| Fail(YkdStatus::OutOfRange, format!("index {index} >= {}", d.items.len())))
}

#[no_mangle]
pub unsafe extern "C" fn ykd_detection_get(dets: *const YkdDetections, index: usize, out: *mut YkdDetection) -> YkdStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let d = item(dets, index)?;
        *out = YkdDetection {
            class_id: d.class_id,
            score: d.score,
            bbox: d.bbox.to_array(),
            source_branch: d.source_branch,
            mask_width: d.mask.width(),
            mask_height: d.mask.height(),
            mask_area: d.mask.area(),
        };
        Ok(())
    })
}

/// Copies the row-major 0/1 mask of detection `index`; `len` must be at
/// least `mask_width * mask_height`.
#[no_mangle]
pub unsafe extern "C" fn ykd_detection_mask(dets: *const YkdDetections, index: usize, buf: *mut u8, len: usize) -> YkdStatus {
    guard(|| {
        let d = item(dets, index)?;
        let data = d.mask.data();
        if len < data.len() {
            return Err(Fail(YkdStatus::BufferTooSmall, format!("need {} bytes, got {len}", data.len())));
        }
        out_ptr(buf, "buf")?;
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ykd_detections_free(dets: *mut YkdDetections) {
    if !dets.is_null() {
        drop(Box::from_raw(dets));
    }
}

/// New model equal to `later` with its latest head replaced by
/// `w_i * earlier_head + w_j * later_head`.
#[no_mangle]
pub unsafe extern "C" fn ykd_average_heads(
    earlier: *const YkdModel,
    later: *const YkdModel,
    w_i: f64,
    w_j: f64,
    out: *mut *mut YkdModel,
) -> YkdStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let e = deref(earlier, "earlier")?;
        let l = deref(later, "later")?;
        let state = average_into(&l.state, e.state.last_head(), w_i, w_j)?;
        *out = Box::into_raw(Box::new(YkdModel { state }));
        Ok(())
    })
}

/// Linear CKA between row-major `n x dx` and `n x dy` matrices.
#[no_mangle]
pub unsafe extern "C" fn ykd_linear_cka(x: *const f64, y: *const f64, n: usize, dx: usize, dy: usize, out: *mut f64) -> YkdStatus {
    guard(|| {
        out_ptr(out, "out")?;
        if x.is_null() || y.is_null() {
            return Err(Fail(YkdStatus::NullPointer, "input matrix is null".into()));
        }
        let xs = std::slice::from_raw_parts(x, n * dx);
        let ys = std::slice::from_raw_parts(y, n * dy);
        let xv = ArrayView2::from_shape((n, dx), xs).map_err(|e| Fail(YkdStatus::Shape, e.to_string()))?;
        let yv = ArrayView2::from_shape((n, dy), ys).map_err(|e| Fail(YkdStatus::Shape, e.to_string()))?;
        *out = linear_cka(xv, yv)?;
        Ok(())
    })
}
