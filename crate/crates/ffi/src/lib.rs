//! C ABI over the core crate: load checkpoints, predict, export merged
//! weights and run experiments. Every call returns an [`MmloraStatus`]; on
//! failure [`mmlora_last_error`] describes the cause for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mmlora_core::autodiff::Matrix;
use mmlora_core::harness::{self, ExperimentConfig};
use mmlora_core::training::{Predictor, TrainedBundle};
use mmlora_core::{checkpoint, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmloraStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Io = 5,
    Corrupt = 6,
    Stage = 7,
    Training = 8,
    Panic = 9,
}

/// Opaque handle to a loaded checkpoint.
pub struct MmloraBundle {
    bundle: TrainedBundle,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(err: &Error) -> MmloraStatus {
    match err {
        Error::Io { .. } | Error::Csv { .. } => MmloraStatus::Io,
        Error::Corrupt(_) | Error::BadMagic(_) | Error::UnsupportedVersion(_) => MmloraStatus::Corrupt,
        Error::Stage { .. } => MmloraStatus::Stage,
        Error::Shape { .. } => MmloraStatus::InvalidArgument,
        e if e.is_config() => MmloraStatus::Config,
        _ => MmloraStatus::Training,
    }
}

struct Failure(MmloraStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MmloraStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MmloraStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            MmloraStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MmloraStatus::NullPointer, format!("`{what}` is null"))
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn text<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Failure(MmloraStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

/// # Safety
/// `h` must be null or a handle from [`mmlora_bundle_load`] not yet freed.
unsafe fn handle<'a>(h: *const MmloraBundle) -> Result<&'a TrainedBundle, Failure> {
    h.as_ref().map(|b| &b.bundle).ok_or_else(|| null("bundle"))
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mmlora_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mmlora_bundle_load(path: *const c_char, out: *mut *mut MmloraBundle) -> MmloraStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bundle = checkpoint::load(&PathBuf::from(text(path, "path")?))?;
        *out = Box::into_raw(Box::new(MmloraBundle { bundle }));
        Ok(())
    })
}

/// # Safety
/// `bundle` must be null or a handle from [`mmlora_bundle_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mmlora_bundle_free(bundle: *mut MmloraBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// # Safety
/// `bundle` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmlora_bundle_shape(
    bundle: *const MmloraBundle,
    modalities: *mut usize,
    input_dim: *mut usize,
    classes: *mut usize,
) -> MmloraStatus {
    guard(|| {
        let b = handle(bundle)?;
        if modalities.is_null() || input_dim.is_null() || classes.is_null() {
            return Err(null("out"));
        }
        *modalities = b.models.len();
        *input_dim = b.models[0].architecture().input;
        *classes = b.classes();
        Ok(())
    })
}

/// Class probabilities for `rows` samples. `inputs` holds one pointer per
/// modality, each to `rows * input_dim` row-major values; `out` receives
/// `rows * classes` values. Bundles with a fusion head predict through it,
/// all others average the per-modality distributions.
///
/// # Safety
/// Every pointer must be valid for the lengths described above.
#[no_mangle]
pub unsafe extern "C" fn mmlora_bundle_predict(
    bundle: *const MmloraBundle,
    inputs: *const *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> MmloraStatus {
    guard(|| {
        let b = handle(bundle)?;
        if inputs.is_null() || out.is_null() {
            return Err(null("inputs/out"));
        }
        if rows == 0 || out_len != rows * b.classes() {
            return Err(Failure(
                MmloraStatus::InvalidArgument,
                format!("out_len must be rows * classes = {}", rows * b.classes()),
            ));
        }
        let mut xs = Vec::with_capacity(b.models.len());
        for (i, m) in b.models.iter().enumerate() {
            let p = *inputs.add(i);
            if p.is_null() {
                return Err(null("inputs[i]"));
            }
            let dim = m.architecture().input;
            xs.push(Matrix::from_vec(rows, dim, std::slice::from_raw_parts(p, rows * dim).to_vec())?);
        }
        let predictor = match &b.fusion_head {
            Some(head) => Predictor::LateFusion {
                models: &b.models,
                head,
            },
            None => Predictor::Ensemble(&b.models),
        };
        let probs = predictor.predict(&xs)?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(probs.data());
        Ok(())
    })
}

/// # Safety
/// `bundle` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mmlora_bundle_export_merged(bundle: *const MmloraBundle, path: *const c_char) -> MmloraStatus {
    guard(|| {
        let b = handle(bundle)?;
        checkpoint::export_merged(b, &PathBuf::from(text(path, "path")?))?;
        Ok(())
    })
}

/// Runs an experiment from a JSON config document and hands back the
/// results CSV, to be released with [`mmlora_string_free`].
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out_csv` writable.
#[no_mangle]
pub unsafe extern "C" fn mmlora_run_experiment(config_json: *const c_char, out_csv: *mut *mut c_char) -> MmloraStatus {
    guard(|| {
        if out_csv.is_null() {
            return Err(null("out_csv"));
        }
        let config = ExperimentConfig::from_json(text(config_json, "config_json")?, "config_json")?;
        let report = harness::run(&config)?;
        harness::emit_report(&report, &report.run_dir, "results", &harness::Format::ALL)?;
        let csv = String::from_utf8(report.to_csv()?).expect("csv writer emits UTF-8");
        *out_csv = CString::new(csv).expect("csv has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mmlora_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
