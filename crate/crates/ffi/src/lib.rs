//! C ABI over the `ssada` toolkit.
//!
//! Every function returns an [`SsadaStatus`]; on failure the message is available
//! from [`ssada_last_error_message`] on the same thread. Models are opaque
//! [`SsadaModel`] handles released with [`ssada_model_free`]. Images are passed
//! as planar RGB `f32` in `[0, 1]` (`3 * height * width` values, channel-major);
//! probability maps are class-major `f64` (`num_classes * height * width`).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ssada::acquire::{confidence_score, entropy_score};
use ssada::datagen::{generate, DatasetSpec};
use ssada::model::{load_checkpoint, SegModel};
use ssada::trainer::{run, ExperimentConfig};
use ssada::weighting::{iou_weights, ClassIoUVector};
use ssada::{Error, Image, ProbabilityMap, Shape};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsadaStatus {
    Ok = 0,
    /// An argument or configuration violated a documented constraint.
    Validation = 1,
    /// A file could not be read or written.
    Io = 2,
    /// A file was malformed.
    Parse = 3,
    /// A precondition of the operation was broken (e.g. image size mismatch).
    Contract = 4,
    /// Training diverged.
    NonFinite = 5,
    /// A required pointer argument was null, or a string was not UTF-8.
    InvalidArgument = 6,
    /// An internal panic was caught at the boundary.
    Panic = 7,
}

/// A trained segmentation model.
pub struct SsadaModel {
    inner: SegModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SsadaStatus {
    match e {
        Error::Validation(_) => SsadaStatus::Validation,
        Error::Io { .. } => SsadaStatus::Io,
        Error::Parse { .. } => SsadaStatus::Parse,
        Error::Contract(_) => SsadaStatus::Contract,
        Error::NonFinite { .. } => SsadaStatus::NonFinite,
    }
}

enum Failure {
    Core(Error),
    Arg(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> SsadaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsadaStatus::Ok,
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_error(msg);
            SsadaStatus::InvalidArgument
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SsadaStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> FfiResult<()> {
    if p.is_null() {
        Err(Failure::Arg(format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Arg(format!("`{name}` is not valid UTF-8")))
}

unsafe fn model_ref<'a>(m: *const SsadaModel) -> FfiResult<&'a SegModel<f32>> {
    non_null(m, "model")?;
    Ok(&(*m).inner)
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn ssada_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ssada_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Renders the synthetic dataset into `out_dir`.
///
/// `spec_json` may be null for the default spec; `seed` replaces the spec's seed.
///
/// # Safety
/// String arguments must be null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ssada_generate_dataset(spec_json: *const c_char, out_dir: *const c_char, seed: u64) -> SsadaStatus {
    guard(|| {
        let out = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let mut spec: DatasetSpec = if spec_json.is_null() {
            DatasetSpec::default()
        } else {
            serde_json::from_str(str_arg(spec_json, "spec_json")?)
                .map_err(|e| Failure::Core(Error::validation(format!("dataset spec: {e}"))))?
        };
        spec.seed = seed;
        spec.validate()?;
        generate(&spec, &out)?;
        Ok(())
    })
}

/// Runs one training experiment described by an ExperimentConfig JSON object.
///
/// Writes `final_miou` (may be null) with the final target-val mIoU.
///
/// # Safety
/// String arguments must be NUL-terminated; `final_miou` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn ssada_train(
    config_json: *const c_char,
    run_dir: *const c_char,
    force: bool,
    final_miou: *mut f64,
) -> SsadaStatus {
    guard(|| {
        let cfg: ExperimentConfig = serde_json::from_str(str_arg(config_json, "config_json")?)
            .map_err(|e| Failure::Core(Error::validation(format!("experiment config: {e}"))))?;
        let dir = PathBuf::from(str_arg(run_dir, "run_dir")?);
        let summary = run(&cfg, &dir, force)?;
        if !final_miou.is_null() {
            *final_miou = summary.final_miou;
        }
        Ok(())
    })
}

/// Loads a model from a checkpoint file into `*out`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ssada_model_load(path: *const c_char, out: *mut *mut SsadaModel) -> SsadaStatus {
    guard(|| {
        non_null(out, "out")?;
        let ckpt = load_checkpoint::<f32>(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(SsadaModel { inner: ckpt.model }));
        Ok(())
    })
}

/// Releases a model. Null is accepted.
///
/// # Safety
/// `model` must come from [`ssada_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ssada_model_free(model: *mut SsadaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input height, width and class count of a model. Any output pointer may be null.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ssada_model_dims(
    model: *const SsadaModel,
    height: *mut usize,
    width: *mut usize,
    num_classes: *mut usize,
) -> SsadaStatus {
    guard(|| {
        let cfg = model_ref(model)?.config();
        for (p, v) in [(height, cfg.image_height), (width, cfg.image_width), (num_classes, cfg.num_classes)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Class probabilities for one image.
///
/// # Safety
/// `image` holds `image_len` floats; `probs` has room for `probs_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ssada_model_predict(
    model: *const SsadaModel,
    image: *const f32,
    image_len: usize,
    probs: *mut f64,
    probs_len: usize,
) -> SsadaStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(image, "image")?;
        non_null(probs, "probs")?;
        let cfg = m.config();
        let shape = Shape::new(cfg.image_height, cfg.image_width);
        let img = Image::from_data(shape, std::slice::from_raw_parts(image, image_len).to_vec())?;
        let p = m.predict(&img)?;
        if probs_len != p.data.len() {
            return Err(Error::contract(format!("probs buffer holds {probs_len}, need {}", p.data.len())).into());
        }
        std::slice::from_raw_parts_mut(probs, probs_len).copy_from_slice(&p.data);
        Ok(())
    })
}

unsafe fn prob_map(probs: *const f64, num_classes: usize, height: usize, width: usize) -> FfiResult<ProbabilityMap> {
    non_null(probs, "probs")?;
    let shape = Shape::new(height, width);
    let len = num_classes
        .checked_mul(shape.pixels())
        .ok_or_else(|| Failure::Arg("map size overflows".into()))?;
    let map = ProbabilityMap::from_data(num_classes, shape, std::slice::from_raw_parts(probs, len).to_vec())?;
    let n = shape.pixels();
    for px in 0..n {
        let column = (0..num_classes).map(|c| map.data[c * n + px]);
        if column.clone().any(|v| !(0.0..=1.0).contains(&v)) || (column.sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!("pixel {px} is not a probability distribution")).into());
        }
    }
    Ok(map)
}

/// Mean per-pixel entropy of a class-major probability map. Each pixel's
/// column must sum to 1 within 1e-6.
///
/// # Safety
/// `probs` holds `num_classes * height * width` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ssada_entropy_score(
    probs: *const f64,
    num_classes: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> SsadaStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = entropy_score(&prob_map(probs, num_classes, height, width)?);
        Ok(())
    })
}

/// Mean per-pixel maximum probability of a class-major probability map.
///
/// # Safety
/// As for [`ssada_entropy_score`].
#[no_mangle]
pub unsafe extern "C" fn ssada_confidence_score(
    probs: *const f64,
    num_classes: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> SsadaStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = confidence_score(&prob_map(probs, num_classes, height, width)?);
        Ok(())
    })
}

/// Class weights from per-class IoU. A NaN IoU marks an undefined class.
///
/// # Safety
/// `iou` and `weights` each hold `num_classes` doubles.
#[no_mangle]
pub unsafe extern "C" fn ssada_iou_weights(
    iou: *const f64,
    num_classes: usize,
    u: f64,
    weights: *mut f64,
) -> SsadaStatus {
    guard(|| {
        non_null(iou, "iou")?;
        non_null(weights, "weights")?;
        let v = ClassIoUVector {
            iou: std::slice::from_raw_parts(iou, num_classes)
                .iter()
                .map(|&x| (!x.is_nan()).then_some(x))
                .collect(),
        };
        let w = iou_weights(&v, u)?;
        std::slice::from_raw_parts_mut(weights, num_classes).copy_from_slice(&w.weights);
        Ok(())
    })
}
