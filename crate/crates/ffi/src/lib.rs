//! C ABI over `protoseg`: opaque model and case handles, integer status
//! codes and a thread-local last-error message.
//!
//! Volumes cross the boundary as flat buffers in `[h][w][d]` order (the last
//! axis varies fastest); multi-modal input is `[4][h][w][d]` in T1, T1ce, T2,
//! FLAIR order. Label buffers hold raw labels {0, 1, 2, 4}.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use protoseg::config::PhantomConfig;
use protoseg::data::{
    export_label, generate_phantom, load_case, normalize_case, remap_raw_label, LabelMap, LabelPolicy,
    MultiModalCase,
};
use protoseg::metrics::evaluate_case;
use protoseg::model::{Model, ModelConfig};
use protoseg::tensor::Tensor;
use protoseg::training::{load_checkpoint, predict_labels, sliding_window, tta_infer};
use protoseg::Error;

/// Status returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Invalid configuration or argument value.
    Config = 3,
    /// Shape or buffer length mismatch.
    Shape = 4,
    /// Bad input data (labels, volumes, files).
    Data = 5,
    /// Checkpoint missing, corrupt or incompatible.
    Checkpoint = 6,
    /// Operating-system I/O failure.
    Io = 7,
    /// A Rust panic was caught at the boundary.
    Panic = 8,
}

/// Trained or freshly initialised network.
pub struct PsModel {
    model: Model,
}

/// One multi-modal case with optional labels.
pub struct PsCase {
    case: MultiModalCase,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PsStatus {
    match e {
        Error::Config(_) | Error::Range(_) | Error::InvalidSpec(_) | Error::Level(_) | Error::Arity { .. } => {
            PsStatus::Config
        }
        Error::ShapeMismatch(_) | Error::CropTooLarge { .. } => PsStatus::Shape,
        Error::CheckpointVersion { .. } | Error::ConfigMismatch { .. } | Error::CorruptCheckpoint(_) => {
            PsStatus::Checkpoint
        }
        Error::Io(_) => PsStatus::Io,
        Error::Case { source, .. } => status_of(source),
        _ => PsStatus::Data,
    }
}

struct Failure(PsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), format!("{}: {e}", e.code()))
    }
}

fn fail<T>(status: PsStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Runs `f`, converting errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            PsStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(PsStatus::NullArgument, format!("{what} is null")))
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return fail(PsStatus::NullArgument, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Failure(PsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn dims_arg(dims: *const usize) -> Result<[usize; 3], Failure> {
    if dims.is_null() {
        return fail(PsStatus::NullArgument, "dims is null");
    }
    let d = [*dims, *dims.add(1), *dims.add(2)];
    if d.contains(&0) {
        return fail(PsStatus::Shape, format!("zero-sized dims {d:?}"));
    }
    Ok(d)
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return fail(PsStatus::NullArgument, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return fail(PsStatus::NullArgument, format!("{what} is null"));
    }
    if len != need {
        return fail(PsStatus::Shape, format!("{what} holds {len} elements, need {need}"));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return fail(PsStatus::NullArgument, "output handle pointer is null");
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn raw_labels(raw: &[u8], dims: [usize; 3]) -> Result<LabelMap, Failure> {
    let data = raw
        .iter()
        .map(|&v| remap_raw_label(v as i64))
        .collect::<Result<Vec<u8>, Error>>()?;
    Ok(LabelMap { dims, data })
}

/// Message of the last failed call on this thread, or null if none.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ps_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn ps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a network with default configuration and initialisation `seed`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ps_model_new(seed: u64, out: *mut *mut PsModel) -> PsStatus {
    guard(|| {
        let cfg = ModelConfig {
            init_seed: seed,
            ..ModelConfig::default()
        };
        put(out, PsModel { model: Model::new(&cfg)? })
    })
}

/// Loads the network stored in a training checkpoint.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` as in [`ps_model_new`].
#[no_mangle]
pub unsafe extern "C" fn ps_model_load(path: *const c_char, out: *mut *mut PsModel) -> PsStatus {
    guard(|| {
        let state = load_checkpoint(path_arg(path, "path")?, None)?;
        put(out, PsModel { model: state.model })
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ps_model_free(model: *mut PsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_model_parameter_count(model: *const PsModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.parameter_count())
}

unsafe fn run_model(
    model: *const PsModel,
    input: *const f64,
    dims: *const usize,
    window: usize,
    tta: bool,
) -> Result<(Tensor, usize), Failure> {
    let m = &as_ref(model, "model")?.model;
    let dims = dims_arg(dims)?;
    let n = dims.iter().product::<usize>();
    let x = Tensor::from_vec(&[4, dims[0], dims[1], dims[2]], slice_arg(input, 4 * n, "input")?.to_vec())?;
    let probs = if window == 0 {
        tta_infer(m, &x, tta)?
    } else {
        sliding_window(m, &x, [window; 3], tta)?
    };
    Ok((probs, n))
}

/// Class probabilities `[4][h][w][d]` (background, NCR/NET, ED, ET) for a
/// normalised 4-modality input. `window` 0 runs the whole volume at once;
/// otherwise a cubic sliding window of that side is used. `tta` averages
/// over the eight flip combinations.
///
/// # Safety
/// `input` must hold `4*h*w*d` values, `dims` three values and `out`
/// `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ps_model_predict_probs(
    model: *const PsModel,
    input: *const f64,
    dims: *const usize,
    window: usize,
    tta: bool,
    out: *mut f64,
    out_len: usize,
) -> PsStatus {
    guard(|| {
        let (probs, n) = run_model(model, input, dims, window, tta)?;
        out_slice(out, out_len, 4 * n, "out")?.copy_from_slice(probs.data());
        Ok(())
    })
}

/// Raw label map {0, 1, 2, 4} of the argmax prediction; see
/// [`ps_model_predict_probs`] for the arguments.
///
/// # Safety
/// As for [`ps_model_predict_probs`], with `out` holding `h*w*d` bytes.
#[no_mangle]
pub unsafe extern "C" fn ps_model_segment(
    model: *const PsModel,
    input: *const f64,
    dims: *const usize,
    window: usize,
    tta: bool,
    out: *mut u8,
    out_len: usize,
) -> PsStatus {
    guard(|| {
        let (probs, n) = run_model(model, input, dims, window, tta)?;
        let labels = predict_labels(&probs);
        for (o, &c) in out_slice(out, out_len, n, "out")?.iter_mut().zip(&labels.data) {
            *o = export_label(c);
        }
        Ok(())
    })
}

/// Generates synthetic phantom `index` of the dataset with `seed` on a
/// cubic grid of side `size`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ps_phantom_generate(seed: u64, index: usize, size: usize, out: *mut *mut PsCase) -> PsStatus {
    guard(|| {
        let cfg = PhantomConfig {
            seed,
            grid_size: [size; 3],
            count: index + 1,
            ..PhantomConfig::default()
        };
        let case = generate_phantom(&cfg.spec(index)?, &PhantomConfig::case_id(index))?;
        put(out, PsCase { case })
    })
}

/// Loads a case directory of `<id>_{t1,t1ce,t2,flair}.nii[.gz]` volumes
/// and, when present, `<id>_seg.nii[.gz]`.
///
/// # Safety
/// `dir` must be a nul-terminated string; `out` as in [`ps_phantom_generate`].
#[no_mangle]
pub unsafe extern "C" fn ps_case_load(dir: *const c_char, out: *mut *mut PsCase) -> PsStatus {
    guard(|| {
        let case = load_case(path_arg(dir, "dir")?, LabelPolicy::Optional)?;
        put(out, PsCase { case })
    })
}

/// # Safety
/// `case` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ps_case_free(case: *mut PsCase) {
    if !case.is_null() {
        drop(Box::from_raw(case));
    }
}

/// Writes the grid size `[h, w, d]`.
///
/// # Safety
/// `case` must be a live handle and `dims` must hold three writable values.
#[no_mangle]
pub unsafe extern "C" fn ps_case_dims(case: *const PsCase, dims: *mut usize) -> PsStatus {
    guard(|| {
        let d = as_ref(case, "case")?.case.dims();
        out_slice(dims, 3, 3, "dims")?.copy_from_slice(&d);
        Ok(())
    })
}

/// Z-scores every modality inside its brain mask, in place.
///
/// # Safety
/// `case` must be a live handle not aliased by another thread.
#[no_mangle]
pub unsafe extern "C" fn ps_case_normalize(case: *mut PsCase) -> PsStatus {
    guard(|| {
        let c = case
            .as_mut()
            .ok_or_else(|| Failure(PsStatus::NullArgument, "case is null".into()))?;
        c.case = normalize_case(&c.case)?;
        Ok(())
    })
}

/// Copies the `[4][h][w][d]` intensities.
///
/// # Safety
/// `out` must hold `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ps_case_input(case: *const PsCase, out: *mut f64, out_len: usize) -> PsStatus {
    guard(|| {
        let t = as_ref(case, "case")?.case.to_tensor();
        out_slice(out, out_len, t.len(), "out")?.copy_from_slice(t.data());
        Ok(())
    })
}

/// Copies the raw labels {0, 1, 2, 4}; `Data` if the case is unlabelled.
///
/// # Safety
/// `out` must hold `out_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ps_case_labels(case: *const PsCase, out: *mut u8, out_len: usize) -> PsStatus {
    guard(|| {
        let c = &as_ref(case, "case")?.case;
        let Some(labels) = c.labels.as_ref() else {
            return fail(PsStatus::Data, format!("case {} has no labels", c.case_id));
        };
        for (o, &v) in out_slice(out, out_len, labels.data.len(), "out")?.iter_mut().zip(&labels.data) {
            *o = export_label(v);
        }
        Ok(())
    })
}

/// Dice and HD95 (mm) of the TC, ET and WT regions between two raw label
/// maps. `spacing` may be null for 1 mm isotropic; `penalty` below zero
/// selects the grid diagonal for a region missing from one side only.
///
/// # Safety
/// `pred` and `truth` must hold `h*w*d` bytes, `spacing` null or three
/// values, and `dice`, `hd95` three writable values each.
#[no_mangle]
pub unsafe extern "C" fn ps_region_scores(
    pred: *const u8,
    truth: *const u8,
    dims: *const usize,
    spacing: *const f64,
    penalty: f64,
    dice: *mut f64,
    hd95: *mut f64,
) -> PsStatus {
    guard(|| {
        let dims = dims_arg(dims)?;
        let n = dims.iter().product::<usize>();
        let p = raw_labels(slice_arg(pred, n, "pred")?, dims)?;
        let t = raw_labels(slice_arg(truth, n, "truth")?, dims)?;
        let spacing = if spacing.is_null() {
            [1.0; 3]
        } else {
            [*spacing, *spacing.add(1), *spacing.add(2)]
        };
        let penalty = (penalty >= 0.0).then_some(penalty);
        let report = evaluate_case("ffi", &p, &t, spacing, penalty)?;
        let dice = out_slice(dice, 3, 3, "dice")?;
        let hd = out_slice(hd95, 3, 3, "hd95")?;
        for (i, s) in report.scores.iter().enumerate() {
            dice[i] = s.dice;
            hd[i] = s.hd95;
        }
        Ok(())
    })
}
