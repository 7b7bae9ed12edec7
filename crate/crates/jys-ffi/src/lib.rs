//! C ABI over the jys library: opaque handles, integer status codes, and a
//! thread-local error message. The header `include/jys.h` is generated by
//! cbindgen at build time.
//!
//! Ownership: every `*_new`/`*_optimize`/`*_from_json` returns a heap handle
//! the caller must release with the matching `*_free`; strings returned by
//! the library are released with `jys_string_free`. Output buffers are
//! caller-allocated. All functions are panic-safe (a caught panic reports
//! `JYS_STATUS_PANIC`).

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use libc::{c_char, c_double, c_int};

use jys::config::KernelConfig;
use jys::countdown::CountdownSpec;
use jys::data::DataFile;
use jys::kernels::KernelFamily;
use jys::klub::{klub_refinement, KlubConfig};
use jys::samplers::{path_rng, tau_leap_sample, StepKernel};
use jys::scheduler::{jump_your_steps, RefineObjective, Schedule, SearchConfig};
use jys::{DataDistribution, Error, ReverseOracle};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JysStatus {
    Ok = 0,
    /// Invalid arguments or configuration.
    Usage = 1,
    /// A verification check failed.
    Verification = 2,
    /// Numerical failure (integration, search, support mismatch, ...).
    Numerical = 3,
    /// A required pointer was null.
    NullPointer = 4,
    /// Internal panic; the library state is still consistent.
    Panic = 5,
}

/// Opaque forward-kernel handle.
pub struct JysKernel(jys::FactorizedKernel);
/// Opaque data-distribution handle.
pub struct JysData(DataDistribution);
/// Opaque exact-oracle handle.
pub struct JysOracle(ReverseOracle);
/// Opaque schedule handle.
pub struct JysSchedule(Schedule);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_for(e: &Error) -> JysStatus {
    match e {
        Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Domain(_) => {
            JysStatus::Usage
        }
        _ => JysStatus::Numerical,
    }
}

fn guard<F: FnOnce() -> JysStatus>(f: F) -> JysStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            JysStatus::Panic
        }
    }
}

/// Copy the last error message into `buf` (NUL-terminated, truncated to
/// `len`). Returns the full message length excluding the terminator.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null (then only the
/// required length is returned).
#[no_mangle]
pub unsafe extern "C" fn jys_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            // Always terminate.
            *buf.add(n - 1) = 0;
        }
        bytes.len() - 1
    })
}

/// Release a string allocated by this library.
///
/// # Safety
/// `s` must have been returned by a jys function and not freed before.
#[no_mangle]
pub unsafe extern "C" fn jys_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

fn kernel_family_from(code: c_int) -> Option<KernelFamily> {
    match code {
        0 => Some(KernelFamily::Uniform),
        1 => Some(KernelFamily::Absorbing),
        2 => Some(KernelFamily::Gaussian),
        _ => None,
    }
}

/// Create a forward kernel. `family`: 0 = uniform, 1 = absorbing,
/// 2 = gaussian. Returns null on error (see `jys_last_error_message`).
#[no_mangle]
pub extern "C" fn jys_kernel_new(
    family: c_int,
    vocab_size: usize,
    eps_min: c_double,
    horizon: c_double,
    gaussian_bandwidth: c_double,
    gaussian_truncation: usize,
) -> *mut JysKernel {
    let mut out = std::ptr::null_mut();
    guard(|| {
        let Some(family) = kernel_family_from(family) else {
            set_error("unknown kernel family code");
            return JysStatus::Usage;
        };
        let cfg = KernelConfig {
            family,
            vocab_size,
            eps_min,
            horizon,
            gaussian_bandwidth,
            gaussian_truncation,
        };
        match cfg.build() {
            Ok(kernel) => {
                out = Box::into_raw(Box::new(JysKernel(kernel)));
                JysStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_for(&e)
            }
        }
    });
    out
}

/// # Safety
/// `kernel` must be a live handle from `jys_kernel_new`.
#[no_mangle]
pub unsafe extern "C" fn jys_kernel_free(kernel: *mut JysKernel) {
    if !kernel.is_null() {
        drop(Box::from_raw(kernel));
    }
}

/// Exact countdown data law.
#[no_mangle]
pub extern "C" fn jys_data_countdown(seq_len: usize, value_count: usize) -> *mut JysData {
    let mut out = std::ptr::null_mut();
    guard(|| match CountdownSpec::new(seq_len, value_count) {
        Ok(spec) => {
            out = Box::into_raw(Box::new(JysData(jys::countdown::exact_distribution(spec))));
            JysStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_for(&e)
        }
    });
    out
}

/// Parse a data-distribution JSON document (`{"explicit": ...}` or
/// `{"markov": ...}`).
///
/// # Safety
/// `json` must be a valid NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn jys_data_from_json(json: *const c_char) -> *mut JysData {
    let mut out = std::ptr::null_mut();
    guard(|| {
        if json.is_null() {
            set_error("null json pointer");
            return JysStatus::NullPointer;
        }
        let text = match CStr::from_ptr(json).to_str() {
            Ok(t) => t,
            Err(_) => {
                set_error("json is not valid UTF-8");
                return JysStatus::Usage;
            }
        };
        let parsed: Result<DataFile, _> = serde_json_from(text);
        match parsed.and_then(|f| f.into_distribution().map_err(|e| e.to_string())) {
            Ok(data) => {
                out = Box::into_raw(Box::new(JysData(data)));
                JysStatus::Ok
            }
            Err(msg) => {
                set_error(&msg);
                JysStatus::Usage
            }
        }
    });
    out
}

fn serde_json_from(text: &str) -> Result<DataFile, String> {
    jys::data::parse_data_file(text).map_err(|e| e.to_string())
}

/// # Safety
/// `data` must be a live handle from a `jys_data_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn jys_data_free(data: *mut JysData) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Build the exact reverse oracle from a kernel and a data law (both are
/// copied; the input handles stay owned by the caller). `support_smoothing`
/// blends the data law locally toward uniform; pass 0 for the strict oracle.
///
/// # Safety
/// `kernel` and `data` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn jys_oracle_new(
    kernel: *const JysKernel,
    data: *const JysData,
    support_smoothing: c_double,
) -> *mut JysOracle {
    let mut out = std::ptr::null_mut();
    guard(|| {
        if kernel.is_null() || data.is_null() {
            set_error("null kernel or data handle");
            return JysStatus::NullPointer;
        }
        let built = ReverseOracle::new((*kernel).0.clone(), (*data).0.clone())
            .and_then(|o| o.with_smoothing(support_smoothing));
        match built {
            Ok(oracle) => {
                out = Box::into_raw(Box::new(JysOracle(oracle)));
                JysStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_for(&e)
            }
        }
    });
    out
}

/// # Safety
/// `oracle` must be a live handle from `jys_oracle_new`.
#[no_mangle]
pub unsafe extern "C" fn jys_oracle_free(oracle: *mut JysOracle) {
    if !oracle.is_null() {
        drop(Box::from_raw(oracle));
    }
}

/// Uniform schedule with `nfe` equal intervals over `[t_min, horizon]`.
#[no_mangle]
pub extern "C" fn jys_schedule_uniform(
    horizon: c_double,
    t_min: c_double,
    nfe: usize,
) -> *mut JysSchedule {
    let mut out = std::ptr::null_mut();
    guard(|| match Schedule::uniform(horizon, t_min, nfe) {
        Ok(s) => {
            out = Box::into_raw(Box::new(JysSchedule(s)));
            JysStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_for(&e)
        }
    });
    out
}

/// Optimize a schedule by hierarchical breakdown: `rounds` splits giving
/// `2^rounds` intervals. `objective`: 0 = sampled refinement bound,
/// 1 = exact path KL (enumerable spaces), 2 = exact endpoint KL (enumerable
/// spaces).
///
/// # Safety
/// `oracle` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn jys_schedule_optimize(
    oracle: *const JysOracle,
    rounds: u32,
    t_min: c_double,
    num_samples: usize,
    seed: u64,
    objective: c_int,
) -> *mut JysSchedule {
    let mut out = std::ptr::null_mut();
    guard(|| {
        if oracle.is_null() {
            set_error("null oracle handle");
            return JysStatus::NullPointer;
        }
        let oracle = &(*oracle).0;
        let objective = match objective {
            0 => RefineObjective::CoarseRefinement,
            1 => RefineObjective::ExactPathKl,
            2 => RefineObjective::EndpointKl,
            _ => {
                set_error("unknown objective code");
                return JysStatus::Usage;
            }
        };
        let search = SearchConfig::for_horizon(oracle.horizon()).with_objective(objective);
        let cfg = KlubConfig { num_samples, ..KlubConfig::default() };
        match jump_your_steps(oracle, rounds, t_min, &search, &cfg, seed) {
            Ok((schedule, _)) => {
                out = Box::into_raw(Box::new(JysSchedule(schedule)));
                JysStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_for(&e)
            }
        }
    });
    out
}

/// Number of timesteps (intervals + 1).
///
/// # Safety
/// `schedule` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn jys_schedule_len(schedule: *const JysSchedule) -> usize {
    if schedule.is_null() {
        return 0;
    }
    (*schedule).0.timesteps().len()
}

/// Copy the decreasing timesteps into `out`.
///
/// # Safety
/// `schedule` must be live and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn jys_schedule_timesteps(
    schedule: *const JysSchedule,
    out: *mut c_double,
    len: usize,
) -> JysStatus {
    guard(|| {
        if schedule.is_null() || out.is_null() {
            set_error("null schedule or output pointer");
            return JysStatus::NullPointer;
        }
        let ts = (*schedule).0.timesteps();
        if len < ts.len() {
            set_error("output buffer too small");
            return JysStatus::Usage;
        }
        std::ptr::copy_nonoverlapping(ts.as_ptr(), out, ts.len());
        JysStatus::Ok
    })
}

/// Serialize a schedule (with the kernel when provided) to the on-disk JSON
/// format; free the result with `jys_string_free`.
///
/// # Safety
/// Handles must be live; `kernel` may be null.
#[no_mangle]
pub unsafe extern "C" fn jys_schedule_to_json(
    schedule: *const JysSchedule,
    kernel: *const JysKernel,
    seed: u64,
) -> *mut c_char {
    let mut out = std::ptr::null_mut();
    guard(|| {
        if schedule.is_null() {
            set_error("null schedule handle");
            return JysStatus::NullPointer;
        }
        let kernel_ref = if kernel.is_null() { None } else { Some(&(*kernel).0) };
        let hash = match kernel_ref {
            Some(k) => jys::config::config_hash_hex(&KernelConfig::from_kernel(k)),
            None => "0".repeat(16),
        };
        let json = (*schedule).0.to_json(kernel_ref, &hash, seed);
        match CString::new(json) {
            Ok(c) => {
                out = c.into_raw();
                JysStatus::Ok
            }
            Err(_) => {
                set_error("schedule JSON contained an interior NUL");
                JysStatus::Panic
            }
        }
    });
    out
}

/// Parse a schedule JSON document.
///
/// # Safety
/// `json` must be a valid NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn jys_schedule_from_json(json: *const c_char) -> *mut JysSchedule {
    let mut out = std::ptr::null_mut();
    guard(|| {
        if json.is_null() {
            set_error("null json pointer");
            return JysStatus::NullPointer;
        }
        let text = match CStr::from_ptr(json).to_str() {
            Ok(t) => t,
            Err(_) => {
                set_error("json is not valid UTF-8");
                return JysStatus::Usage;
            }
        };
        match Schedule::from_json(text) {
            Ok((schedule, _)) => {
                out = Box::into_raw(Box::new(JysSchedule(schedule)));
                JysStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_for(&e)
            }
        }
    });
    out
}

/// # Safety
/// `schedule` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn jys_schedule_free(schedule: *mut JysSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Draw `ensemble` sequences by τ-leaping along the schedule, applying the
/// most-likely-token readout at the cutoff. Tokens are written row-major
/// into `out` (`ensemble × seq_len`). `step_kernel`: 0 = Euler,
/// 1 = hold-rate.
///
/// # Safety
/// `oracle` and `schedule` must be live; `out` must hold
/// `ensemble * jys_oracle_num_dims(oracle)` entries.
#[no_mangle]
pub unsafe extern "C" fn jys_sample_sequences(
    oracle: *const JysOracle,
    schedule: *const JysSchedule,
    ensemble: usize,
    seed: u64,
    step_kernel: c_int,
    out: *mut u32,
    out_len: usize,
) -> JysStatus {
    guard(|| {
        if oracle.is_null() || schedule.is_null() || out.is_null() {
            set_error("null handle or output pointer");
            return JysStatus::NullPointer;
        }
        let oracle = &(*oracle).0;
        let schedule = &(*schedule).0;
        let dims = oracle.num_dims();
        if out_len < ensemble * dims {
            set_error("output buffer too small");
            return JysStatus::Usage;
        }
        let kernel = match step_kernel {
            0 => StepKernel::Euler,
            1 => StepKernel::ExactHold,
            _ => {
                set_error("unknown step kernel code");
                return JysStatus::Usage;
            }
        };
        for i in 0..ensemble {
            let mut rng = path_rng(seed, i as u64);
            let path = match tau_leap_sample(oracle, schedule, None, &mut rng, kernel) {
                Ok(p) => p,
                Err(e) => {
                    set_error(&e.to_string());
                    return status_for(&e);
                }
            };
            let cleaned =
                match oracle.denoising_argmax(&path.final_state(), schedule.t_min().max(1e-12)) {
                    Ok(c) => c,
                    Err(e) => {
                        set_error(&e.to_string());
                        return status_for(&e);
                    }
                };
            for (d, &v) in cleaned.iter().enumerate() {
                *out.add(i * dims + d) = v as u32;
            }
        }
        JysStatus::Ok
    })
}

/// Sequence length of the oracle's data law.
///
/// # Safety
/// `oracle` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn jys_oracle_num_dims(oracle: *const JysOracle) -> usize {
    if oracle.is_null() {
        return 0;
    }
    (*oracle).0.num_dims()
}

/// Per-pair countdown violation rate of row-major `tokens`
/// (`n_sequences × seq_len`).
///
/// # Safety
/// `tokens` must hold `n_sequences * seq_len` entries.
#[no_mangle]
pub unsafe extern "C" fn jys_violation_rate(
    tokens: *const u32,
    n_sequences: usize,
    seq_len: usize,
    value_count: usize,
    out: *mut c_double,
) -> JysStatus {
    guard(|| {
        if tokens.is_null() || out.is_null() {
            set_error("null tokens or output pointer");
            return JysStatus::NullPointer;
        }
        let mut seqs = Vec::with_capacity(n_sequences);
        for i in 0..n_sequences {
            let row =
                std::slice::from_raw_parts(tokens.add(i * seq_len), seq_len);
            seqs.push(row.iter().map(|&v| v as usize).collect::<Vec<_>>());
        }
        match jys::countdown::violation_rate(&seqs, value_count) {
            Ok(v) => {
                *out = v;
                JysStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_for(&e)
            }
        }
    })
}

/// One refinement-bound estimate for the split `s → t → u`.
///
/// # Safety
/// `oracle` must be live; `out_value`/`out_stderr` must be writable.
#[no_mangle]
pub unsafe extern "C" fn jys_klub_refinement(
    oracle: *const JysOracle,
    s: c_double,
    t: c_double,
    u: c_double,
    num_samples: usize,
    seed: u64,
    out_value: *mut c_double,
    out_stderr: *mut c_double,
) -> JysStatus {
    guard(|| {
        if oracle.is_null() || out_value.is_null() || out_stderr.is_null() {
            set_error("null handle or output pointer");
            return JysStatus::NullPointer;
        }
        let cfg = KlubConfig { num_samples, ..KlubConfig::default() };
        match klub_refinement(&(*oracle).0, s, t, u, &cfg, seed) {
            Ok(est) => {
                *out_value = est.value;
                *out_stderr = est.standard_error;
                JysStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_for(&e)
            }
        }
    })
}

/// Run the quick verification suite; returns `JYS_STATUS_OK` when every
/// check passes and `JYS_STATUS_VERIFICATION` when any fails.
#[no_mangle]
pub extern "C" fn jys_verify_quick() -> JysStatus {
    guard(|| match jys::verify::run_suite(true) {
        Ok(results) => {
            if results.iter().all(|r| r.passed) {
                JysStatus::Ok
            } else {
                let failed: Vec<&str> = results
                    .iter()
                    .filter(|r| !r.passed)
                    .map(|r| r.name)
                    .collect();
                set_error(&format!("failed checks: {failed:?}"));
                JysStatus::Verification
            }
        }
        Err(e) => {
            set_error(&e.to_string());
            status_for(&e)
        }
    })
}
