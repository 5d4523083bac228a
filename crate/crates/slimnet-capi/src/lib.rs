//! C ABI for the optimizer: opaque model handles, status codes, and
//! library-allocated byte buffers.
//!
//! Conventions:
//! * Every fallible call returns an [`SnStatus`]; `SN_OK` means success.
//! * On failure, [`sn_last_error_message`] returns a thread-local,
//!   NUL-terminated description valid until the next failing call on the
//!   same thread.
//! * Models are opaque [`SnModel`] pointers created by `sn_model_load` /
//!   `sn_fuse` / `sn_optimize` and released with `sn_model_free`.
//! * Byte outputs (serialized models, report JSON) are returned as
//!   [`SnBuffer`] values owned by the library; release with
//!   `sn_buffer_free`. A zeroed `SnBuffer` is valid and free is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use slimnet::error::Error;
use slimnet::factorization::{RankGrid, Target};
use slimnet::flops::model_cost;
use slimnet::fusion::run_lossless_pass;
use slimnet::model::Model;
use slimnet::selector::{optimize_model, SelectorConfig};
use slimnet::serialize::{load_model_with_eps, save_model};

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnStatus {
    SnOk = 0,
    /// A pointer was null or an argument value was out of range.
    SnErrInvalidArgument = 1,
    /// Malformed manifest or weights blob.
    SnErrParse = 2,
    /// The model violates a structural invariant.
    SnErrValidation = 3,
    /// A decomposition failed numerically.
    SnErrNumeric = 4,
    /// Filesystem error surfaced by the core library.
    SnErrIo = 5,
    /// A panic was caught at the boundary; state is unchanged.
    SnErrPanic = 6,
}

/// Opaque handle to a loaded model.
pub struct SnModel {
    inner: Model,
}

/// A byte buffer allocated by this library. Free with [`sn_buffer_free`].
#[repr(C)]
pub struct SnBuffer {
    pub data: *mut u8,
    pub len: usize,
}

/// Options for [`sn_optimize`]. Obtain defaults from
/// [`sn_optimize_options_default`] and override fields as needed.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SnOptimizeOptions {
    /// Accuracy-vs-speed knob in [0, 1]; 1 admits only exact rewrites.
    pub p: f64,
    /// Accuracy threshold applied at the first representation layer; the
    /// threshold decays linearly to `p` at the last.
    pub start_threshold: f64,
    /// 0 = cpu, 1 = gpu (restricts intermediate widths to powers of two).
    pub target: i32,
    /// Maximum factorization chain depth (>= 1).
    pub max_chain: u32,
    /// When nonzero, `seed` is recorded in the report configuration.
    pub has_seed: i32,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(e: &Error) -> SnStatus {
    match e {
        Error::InvalidArgument(_) | Error::NotApplicable(_) => SnStatus::SnErrInvalidArgument,
        Error::Manifest { .. } | Error::Blob { .. } | Error::Json(_) => SnStatus::SnErrParse,
        Error::DanglingTensor { .. } | Error::Validation(_) | Error::Graph(_) => {
            SnStatus::SnErrValidation
        }
        Error::Numeric { .. } => SnStatus::SnErrNumeric,
        Error::Io(_) => SnStatus::SnErrIo,
    }
}

fn fail(e: Error) -> SnStatus {
    set_error(&e.to_string());
    status_of(&e)
}

fn invalid(msg: &str) -> SnStatus {
    set_error(msg);
    SnStatus::SnErrInvalidArgument
}

/// Runs `f` with panics converted to `SN_ERR_PANIC`.
fn guarded(f: impl FnOnce() -> SnStatus) -> SnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic at the C boundary".into());
            set_error(&msg);
            SnStatus::SnErrPanic
        }
    }
}

fn buffer_from(bytes: Vec<u8>) -> SnBuffer {
    let mut boxed = bytes.into_boxed_slice();
    let buf = SnBuffer { data: boxed.as_mut_ptr(), len: boxed.len() };
    std::mem::forget(boxed);
    buf
}

unsafe fn slice_arg<'a>(data: *const u8, len: usize) -> Option<&'a [u8]> {
    if data.is_null() && len != 0 {
        return None;
    }
    if len == 0 {
        return Some(&[]);
    }
    Some(std::slice::from_raw_parts(data, len))
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread. Never null.
#[no_mangle]
pub extern "C" fn sn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Parses a model from a JSON manifest and a weights blob. Batch-norm
/// layers without an explicit epsilon use 1e-5.
///
/// # Safety
/// `manifest`/`weights` must point to readable regions of the given
/// lengths; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sn_model_load(
    manifest: *const u8,
    manifest_len: usize,
    weights: *const u8,
    weights_len: usize,
    out: *mut *mut SnModel,
) -> SnStatus {
    sn_model_load_with_eps(manifest, manifest_len, weights, weights_len, 1e-5, out)
}

/// As [`sn_model_load`] with an explicit default batch-norm epsilon.
///
/// # Safety
/// Same contract as [`sn_model_load`].
#[no_mangle]
pub unsafe extern "C" fn sn_model_load_with_eps(
    manifest: *const u8,
    manifest_len: usize,
    weights: *const u8,
    weights_len: usize,
    default_bn_eps: f64,
    out: *mut *mut SnModel,
) -> SnStatus {
    if out.is_null() {
        return invalid("out pointer is null");
    }
    let (Some(manifest), Some(weights)) =
        (slice_arg(manifest, manifest_len), slice_arg(weights, weights_len))
    else {
        return invalid("null buffer with nonzero length");
    };
    guarded(|| match load_model_with_eps(manifest, weights, default_bn_eps as f32) {
        Ok(m) => {
            *out = Box::into_raw(Box::new(SnModel { inner: m }));
            SnStatus::SnOk
        }
        Err(e) => fail(e),
    })
}

/// Releases a model handle. Null is a no-op.
///
/// # Safety
/// `m` must be null or a pointer returned by this library that has not
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn sn_model_free(m: *mut SnModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Releases a buffer returned by this library. Zeroed buffers are a no-op.
///
/// # Safety
/// `buf` must be null or point to an `SnBuffer` previously filled by this
/// library whose `data` has not been freed.
#[no_mangle]
pub unsafe extern "C" fn sn_buffer_free(buf: *mut SnBuffer) {
    if buf.is_null() {
        return;
    }
    let b = &mut *buf;
    if !b.data.is_null() && b.len > 0 {
        drop(Box::from_raw(std::slice::from_raw_parts_mut(b.data, b.len)));
    }
    b.data = ptr::null_mut();
    b.len = 0;
}

/// Serializes a model to a manifest + weights pair.
///
/// # Safety
/// `m` must be a live model handle; `manifest`/`weights` must be valid
/// pointers to receive the buffers.
#[no_mangle]
pub unsafe extern "C" fn sn_model_save(
    m: *const SnModel,
    manifest: *mut SnBuffer,
    weights: *mut SnBuffer,
) -> SnStatus {
    if m.is_null() || manifest.is_null() || weights.is_null() {
        return invalid("null argument to sn_model_save");
    }
    guarded(|| {
        let (man, wts) = save_model(&(*m).inner);
        *manifest = buffer_from(man);
        *weights = buffer_from(wts);
        SnStatus::SnOk
    })
}

/// Re-runs structural validation on a model.
///
/// # Safety
/// `m` must be a live model handle.
#[no_mangle]
pub unsafe extern "C" fn sn_model_validate(m: *const SnModel) -> SnStatus {
    if m.is_null() {
        return invalid("null model");
    }
    guarded(|| match (*m).inner.check_valid() {
        Ok(()) => SnStatus::SnOk,
        Err(e) => fail(e),
    })
}

/// Number of nodes in the model graph (including the input node).
///
/// # Safety
/// `m` must be a live model handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sn_model_node_count(m: *const SnModel, out: *mut usize) -> SnStatus {
    if m.is_null() || out.is_null() {
        return invalid("null argument to sn_model_node_count");
    }
    *out = (*m).inner.nodes.len();
    SnStatus::SnOk
}

/// Total multiply count of one inference pass.
///
/// # Safety
/// `m` must be a live model handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sn_model_flops(m: *const SnModel, out: *mut u64) -> SnStatus {
    if m.is_null() || out.is_null() {
        return invalid("null argument to sn_model_flops");
    }
    guarded(|| match model_cost(&(*m).inner) {
        Ok(cost) => {
            *out = cost.total_flops;
            SnStatus::SnOk
        }
        Err(e) => fail(e),
    })
}

/// Applies the lossless fusion pass, producing a new model handle.
///
/// # Safety
/// `m` must be a live model handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sn_fuse(m: *const SnModel, out: *mut *mut SnModel) -> SnStatus {
    if m.is_null() || out.is_null() {
        return invalid("null argument to sn_fuse");
    }
    guarded(|| match run_lossless_pass(&(*m).inner) {
        Ok(fused) => {
            *out = Box::into_raw(Box::new(SnModel { inner: fused }));
            SnStatus::SnOk
        }
        Err(e) => fail(e),
    })
}

/// Default optimization options: p = 0.5, start threshold 0.99, cpu
/// target, chains up to depth 2, no seed.
#[no_mangle]
pub extern "C" fn sn_optimize_options_default() -> SnOptimizeOptions {
    let d = SelectorConfig::default();
    SnOptimizeOptions {
        p: d.p,
        start_threshold: d.start_threshold,
        target: 0,
        max_chain: d.max_chain as u32,
        has_seed: 0,
        seed: 0,
    }
}

/// Runs the full optimization pass (fusion, then approximation). On
/// success `out_model` receives the optimized model and, when
/// `out_report_json` is non-null, it receives the audit report as UTF-8
/// JSON.
///
/// # Safety
/// `m` must be a live model handle; `opts` may be null (defaults);
/// `out_model` must be valid; `out_report_json` may be null.
#[no_mangle]
pub unsafe extern "C" fn sn_optimize(
    m: *const SnModel,
    opts: *const SnOptimizeOptions,
    out_model: *mut *mut SnModel,
    out_report_json: *mut SnBuffer,
) -> SnStatus {
    if m.is_null() || out_model.is_null() {
        return invalid("null argument to sn_optimize");
    }
    let o = if opts.is_null() { sn_optimize_options_default() } else { *opts };
    let target = match o.target {
        0 => Target::Cpu,
        1 => Target::Gpu,
        other => return invalid(&format!("unknown target {other} (0 = cpu, 1 = gpu)")),
    };
    let cfg = SelectorConfig {
        p: o.p,
        start_threshold: o.start_threshold,
        target,
        grid: RankGrid::PowersOfTwo,
        max_chain: o.max_chain as usize,
        seed: (o.has_seed != 0).then_some(o.seed),
    };
    guarded(|| match optimize_model(&(*m).inner, &cfg) {
        Ok((optimized, report)) => {
            if !out_report_json.is_null() {
                match report.to_json() {
                    Ok(json) => *out_report_json = buffer_from(json.into_bytes()),
                    Err(e) => return fail(e),
                }
            }
            *out_model = Box::into_raw(Box::new(SnModel { inner: optimized }));
            SnStatus::SnOk
        }
        Err(e) => fail(e),
    })
}
