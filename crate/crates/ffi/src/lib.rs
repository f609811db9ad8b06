//! C ABI over `thinsec-core`.
//!
//! Every fallible call returns a [`TsStatus`]; on failure a message is kept
//! per thread and can be read with [`ts_last_error`]. Handles are opaque and
//! must be released with the matching `*_free` function. Output arrays are
//! caller-allocated: pass the buffer length in elements and the call fails
//! with `TS_STATUS_BUFFER` if it is too short.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ndarray::{Array2, Array3, ArrayView2};
use thinsec_core::checkpoint::Checkpoint;
use thinsec_core::entropy::entropy_map;
use thinsec_core::metrics::{binarize, edge_metrics};
use thinsec_core::pipeline::{self, Sample};
use thinsec_core::synthdata::{self, ReadMode, SynthSpec, ANGLE_COUNT};
use thinsec_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TsStatus {
    Ok = 0,
    NullPointer = 1,
    Invalid = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Mismatch = 6,
    Runtime = 7,
    Buffer = 8,
    Panic = 9,
}

/// Parameters for [`ts_synth_generate`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TsSynthSpec {
    pub image_size: usize,
    pub n_grains: usize,
    pub seed: u64,
    pub noise_sigma: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct TsEdgeScores {
    pub miou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

/// One group of seven views with its masks.
pub struct TsGroup {
    sample: Sample,
}

/// A loaded checkpoint.
pub struct TsModel {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TsStatus {
    match e {
        Error::Invalid { .. } => TsStatus::Invalid,
        Error::Shape(_) | Error::MissingView(_) => TsStatus::Shape,
        Error::Io { .. } | Error::Image { .. } => TsStatus::Io,
        Error::Format { .. } => TsStatus::Format,
        Error::Mismatch(_) => TsStatus::Mismatch,
        _ => TsStatus::Runtime,
    }
}

struct Fail(TsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            TsStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(TsStatus::NullPointer, format!("{what} is NULL")))
    } else {
        Ok(())
    }
}

fn check_len(have: usize, need: usize, what: &str) -> Result<(), Fail> {
    if have < need {
        Err(Fail(TsStatus::Buffer, format!("{what} holds {have} elements, {need} needed")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Fail> {
    non_null(p, what)?;
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail(TsStatus::Invalid, format!("{what} is not UTF-8")))?;
    Ok(Path::new(s))
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ts_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Generates a synthetic group; `*out` receives a new handle.
///
/// # Safety
/// `spec` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ts_synth_generate(spec: *const TsSynthSpec, out: *mut *mut TsGroup) -> TsStatus {
    guard(|| {
        non_null(spec, "spec")?;
        non_null(out, "out")?;
        let s = &*spec;
        let spec = SynthSpec { image_size: s.image_size, n_grains: s.n_grains, noise_sigma: s.noise_sigma, ..SynthSpec::with_seed(s.seed) };
        let (g, e, m) = synthdata::generate_group(&spec)?;
        *out = Box::into_raw(Box::new(TsGroup { sample: Sample::new(g, e, Some(m)) }));
        Ok(())
    })
}

/// Reads `<root>/<group_id>/`; the semantic mask is optional.
///
/// # Safety
/// `root` and `group_id` must be NUL-terminated strings, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ts_group_load(root: *const c_char, group_id: *const c_char, out: *mut *mut TsGroup) -> TsStatus {
    guard(|| {
        non_null(out, "out")?;
        let root = path_arg(root, "root")?;
        let id = path_arg(group_id, "group_id")?.to_string_lossy().into_owned();
        let (g, e, m) = synthdata::read_group(root, &id, ReadMode::EdgeOnly)?;
        *out = Box::into_raw(Box::new(TsGroup { sample: Sample::new(g, e, m) }));
        Ok(())
    })
}

/// # Safety
/// `group` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ts_group_free(group: *mut TsGroup) {
    if !group.is_null() {
        drop(Box::from_raw(group));
    }
}

/// Image height and width of a group.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ts_group_dims(group: *const TsGroup, height: *mut usize, width: *mut usize) -> TsStatus {
    guard(|| {
        non_null(group, "group")?;
        non_null(height, "height")?;
        non_null(width, "width")?;
        let g = &(*group).sample.group;
        *height = g.height();
        *width = g.width();
        Ok(())
    })
}

/// Copies the views as `[7, H, W, 3]` values in `[0, 1]`.
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ts_group_views(group: *const TsGroup, buf: *mut f64, len: usize) -> TsStatus {
    guard(|| {
        non_null(group, "group")?;
        non_null(buf, "buf")?;
        let v = &(*group).sample.group.views;
        check_len(len, v.len(), "buf")?;
        for (i, x) in v.iter().enumerate() {
            *buf.add(i) = *x;
        }
        Ok(())
    })
}

/// Copies the edge mask as `[H, W]`.
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ts_group_edge(group: *const TsGroup, buf: *mut f64, len: usize) -> TsStatus {
    guard(|| {
        non_null(group, "group")?;
        non_null(buf, "buf")?;
        let e = &(*group).sample.edge;
        check_len(len, e.len(), "buf")?;
        for (i, x) in e.iter().enumerate() {
            *buf.add(i) = *x;
        }
        Ok(())
    })
}

/// Copies the per-pixel class indices as `[H, W]`. Fails with
/// `TS_STATUS_INVALID` when the group has no semantic mask.
///
/// # Safety
/// `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ts_group_semantic(group: *const TsGroup, buf: *mut u8, len: usize) -> TsStatus {
    guard(|| {
        non_null(group, "group")?;
        non_null(buf, "buf")?;
        let s = (*group).sample.semantic.as_ref().ok_or_else(|| Fail(TsStatus::Invalid, "group has no semantic mask".into()))?;
        check_len(len, s.len(), "buf")?;
        for (i, x) in s.iter().enumerate() {
            *buf.add(i) = *x;
        }
        Ok(())
    })
}

/// Color-entropy map of an 8-bit RGB image (`[H, W, 3]`, row-major) into
/// `out` (`[H, W]`).
///
/// # Safety
/// `rgb` must hold `height * width * 3` bytes and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ts_entropy_map(rgb: *const u8, height: usize, width: usize, tau: u32, out: *mut f64, out_len: usize) -> TsStatus {
    guard(|| {
        non_null(rgb, "rgb")?;
        non_null(out, "out")?;
        let n = height * width;
        check_len(out_len, n, "out")?;
        let pixels = std::slice::from_raw_parts(rgb, n * 3).to_vec();
        let image = Array3::from_shape_vec((height, width, 3), pixels).map_err(|e| Fail(TsStatus::Shape, e.to_string()))?;
        let map = entropy_map(&image, tau)?;
        for (i, x) in map.values.iter().enumerate() {
            *out.add(i) = *x;
        }
        Ok(())
    })
}

/// Loads a checkpoint written by training.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ts_model_load(path: *const c_char, out: *mut *mut TsModel) -> TsStatus {
    guard(|| {
        non_null(out, "out")?;
        let ckpt = Checkpoint::load(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(TsModel { ckpt }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ts_model_free(model: *mut TsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Training stage (1 = teacher, 2 = student) of a loaded model.
///
/// # Safety
/// `model` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn ts_model_stage(model: *const TsModel) -> u8 {
    if model.is_null() {
        0
    } else {
        (*model).ckpt.meta.stage
    }
}

/// Runs a model on one group.
///
/// `edge_out` receives the `[H, W]` edge probabilities. For stage-2 models
/// `semantic_out` (may be NULL) receives `[4, H, W]` class probabilities and
/// `prompt` (`[H, W]`) is the teacher map; pass NULL only when the model was
/// trained without it.
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn ts_model_predict(
    model: *const TsModel,
    group: *const TsGroup,
    prompt: *const f64,
    edge_out: *mut f64,
    edge_len: usize,
    semantic_out: *mut f64,
    semantic_len: usize,
) -> TsStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(group, "group")?;
        non_null(edge_out, "edge_out")?;
        let sample = &(*group).sample;
        let (h, w) = (sample.group.height(), sample.group.width());
        check_len(edge_len, h * w, "edge_out")?;
        let store: Option<BTreeMap<String, Array2<f64>>> = (!prompt.is_null()).then(|| {
            let p = ArrayView2::from_shape((h, w), std::slice::from_raw_parts(prompt, h * w)).expect("length matches").to_owned();
            BTreeMap::from([(sample.id().to_string(), p)])
        });
        let pred = pipeline::predict_samples(&(*model).ckpt, std::slice::from_ref(sample), store.as_ref())?
            .pop()
            .expect("one prediction per sample");
        for (i, x) in pred.edge.iter().enumerate() {
            *edge_out.add(i) = *x;
        }
        if let (false, Some(y)) = (semantic_out.is_null(), &pred.semantic) {
            check_len(semantic_len, y.len(), "semantic_out")?;
            for (i, x) in y.iter().enumerate() {
                *semantic_out.add(i) = *x;
            }
        }
        Ok(())
    })
}

/// Edge metrics of a probability map against a binary mask, both `[H, W]`.
///
/// # Safety
/// `pred` and `truth` must hold `height * width` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ts_edge_metrics(
    pred: *const f64,
    truth: *const f64,
    height: usize,
    width: usize,
    threshold: f64,
    out: *mut TsEdgeScores,
) -> TsStatus {
    guard(|| {
        non_null(pred, "pred")?;
        non_null(truth, "truth")?;
        non_null(out, "out")?;
        let n = height * width;
        let p = ArrayView2::from_shape((height, width), std::slice::from_raw_parts(pred, n)).expect("length matches").to_owned();
        let t = ArrayView2::from_shape((height, width), std::slice::from_raw_parts(truth, n)).expect("length matches").to_owned();
        let s = edge_metrics(&binarize(&p, threshold)?, &t)?;
        *out = TsEdgeScores { miou: s.miou, f1: s.f1, precision: s.precision, recall: s.recall, accuracy: s.accuracy };
        Ok(())
    })
}

/// Number of views per group.
#[no_mangle]
pub extern "C" fn ts_view_count() -> usize {
    ANGLE_COUNT
}
