//! C ABI over the sdeid pipeline.
//!
//! Conventions: opaque handles created by `*_load`/`*_from_json` and
//! released by the matching `*_free`; every fallible call returns an
//! [`SdeidStatus`] code and stores a message retrievable with
//! [`sdeid_last_error_message`]. Array arguments are caller-allocated
//! with their lengths passed explicitly. No call unwinds across the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sdeid::analysis::{escape_probability_analytic, EscapeProblem};
use sdeid::config::ExperimentConfig;
use sdeid::io::Checkpoint;
use sdeid::train::{surrogate_model, TrainMode};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SdeidStatus {
    Ok = 0,
    /// Invalid configuration, path, or argument.
    Config = 1,
    /// Numerical failure (blow-up, singular factorization, divergence).
    Numeric = 2,
    /// A required pointer was null.
    NullPointer = 3,
    /// A string argument was not valid UTF-8.
    Utf8 = 4,
    /// Internal panic; the message holds details.
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &sdeid::Error) -> SdeidStatus {
    match err.exit_code() {
        1 => SdeidStatus::Config,
        _ => SdeidStatus::Numeric,
    }
}

fn guarded(f: impl FnOnce() -> SdeidStatus) -> SdeidStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&msg);
            SdeidStatus::Panic
        }
    }
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, SdeidStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(SdeidStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        SdeidStatus::Utf8
    })
}

/// Opaque experiment-configuration handle.
pub struct SdeidConfig {
    inner: ExperimentConfig,
}

/// Opaque trained-model handle (a loaded weight checkpoint).
pub struct SdeidModel {
    inner: Checkpoint,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sdeid_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the most recent error message (UTF-8, NUL-terminated) into `buf`.
/// Returns the full message length in bytes (excluding the NUL); whatever
/// fits was written. A null or zero-length buffer just returns the length.
#[no_mangle]
pub unsafe extern "C" fn sdeid_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Load an experiment configuration from a JSON file.
/// On success `*out` owns the handle; release with [`sdeid_config_free`].
#[no_mangle]
pub unsafe extern "C" fn sdeid_config_load(path: *const c_char, out: *mut *mut SdeidConfig) -> SdeidStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null output pointer");
            return SdeidStatus::NullPointer;
        }
        let path = match cstr_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match ExperimentConfig::load(Path::new(path)) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(SdeidConfig { inner: cfg }));
                SdeidStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Parse and validate an experiment configuration from a JSON string.
#[no_mangle]
pub unsafe extern "C" fn sdeid_config_from_json(json: *const c_char, out: *mut *mut SdeidConfig) -> SdeidStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null output pointer");
            return SdeidStatus::NullPointer;
        }
        let json = match cstr_arg(json) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match ExperimentConfig::from_json(json) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(SdeidConfig { inner: cfg }));
                SdeidStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn sdeid_config_free(cfg: *mut SdeidConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Override the master seed (and the data seed) of a loaded configuration.
#[no_mangle]
pub unsafe extern "C" fn sdeid_config_set_seed(cfg: *mut SdeidConfig, seed: u64) -> SdeidStatus {
    guarded(|| {
        if cfg.is_null() {
            set_error("null config handle");
            return SdeidStatus::NullPointer;
        }
        let cfg = &mut (*cfg).inner;
        cfg.seed = seed;
        cfg.sim.seed = seed;
        SdeidStatus::Ok
    })
}

/// Simulate every grid node's ensemble and write the moment tables and
/// manifest into the configured output directory.
#[no_mangle]
pub unsafe extern "C" fn sdeid_run_simulate(cfg: *const SdeidConfig) -> SdeidStatus {
    guarded(|| {
        if cfg.is_null() {
            set_error("null config handle");
            return SdeidStatus::NullPointer;
        }
        match sdeid::pipeline::simulate(&(*cfg).inner) {
            Ok(()) => SdeidStatus::Ok,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Train surrogates from the simulated moments; `mode`: 0 = all-grid
/// baseline, 1 = RBMS-I, 2 = RBMS-II. Reports, curves, checkpoints and
/// sampled-node tables land in the output directory.
#[no_mangle]
pub unsafe extern "C" fn sdeid_run_train(cfg: *const SdeidConfig, mode: c_int) -> SdeidStatus {
    guarded(|| {
        if cfg.is_null() {
            set_error("null config handle");
            return SdeidStatus::NullPointer;
        }
        let mode = match mode {
            0 => TrainMode::Agf,
            1 => TrainMode::Rbms1,
            2 => TrainMode::Rbms2,
            other => {
                set_error(&format!("unknown training mode {other}"));
                return SdeidStatus::Config;
            }
        };
        match sdeid::pipeline::train(&(*cfg).inner, mode) {
            Ok(()) => SdeidStatus::Ok,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Escape-probability and density artifacts for a trained checkpoint.
#[no_mangle]
pub unsafe extern "C" fn sdeid_run_analyze(cfg: *const SdeidConfig, checkpoint_path: *const c_char) -> SdeidStatus {
    guarded(|| {
        if cfg.is_null() {
            set_error("null config handle");
            return SdeidStatus::NullPointer;
        }
        let path = match cstr_arg(checkpoint_path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match sdeid::pipeline::analyze(&(*cfg).inner, Path::new(path)) {
            Ok(()) => SdeidStatus::Ok,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Load a weight checkpoint written by training.
#[no_mangle]
pub unsafe extern "C" fn sdeid_checkpoint_load(path: *const c_char, out: *mut *mut SdeidModel) -> SdeidStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null output pointer");
            return SdeidStatus::NullPointer;
        }
        let path = match cstr_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Checkpoint::load(Path::new(path)) {
            Ok(ckpt) => {
                *out = Box::into_raw(Box::new(SdeidModel { inner: ckpt }));
                SdeidStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn sdeid_model_free(model: *mut SdeidModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// State dimension and noise-channel count of a loaded model.
#[no_mangle]
pub unsafe extern "C" fn sdeid_model_dims(
    model: *const SdeidModel,
    state_dim: *mut usize,
    noise_dim: *mut usize,
) -> SdeidStatus {
    guarded(|| {
        if model.is_null() || state_dim.is_null() || noise_dim.is_null() {
            set_error("null pointer argument");
            return SdeidStatus::NullPointer;
        }
        let ckpt = &(*model).inner;
        let n = ckpt.drift.output_dim();
        *state_dim = n;
        *noise_dim = ckpt.diffusion.output_dim() / n;
        SdeidStatus::Ok
    })
}

/// Learned drift field at `x` (length `state_dim`); `out` receives
/// `state_dim` values.
#[no_mangle]
pub unsafe extern "C" fn sdeid_model_drift(
    model: *const SdeidModel,
    x: *const c_double,
    x_len: usize,
    out: *mut c_double,
    out_len: usize,
) -> SdeidStatus {
    eval_field(model, x, x_len, out, out_len, true)
}

/// Learned diffusion field at `x`; `out` receives `state_dim * noise_dim`
/// row-major entries.
#[no_mangle]
pub unsafe extern "C" fn sdeid_model_diffusion(
    model: *const SdeidModel,
    x: *const c_double,
    x_len: usize,
    out: *mut c_double,
    out_len: usize,
) -> SdeidStatus {
    eval_field(model, x, x_len, out, out_len, false)
}

unsafe fn eval_field(
    model: *const SdeidModel,
    x: *const c_double,
    x_len: usize,
    out: *mut c_double,
    out_len: usize,
    drift: bool,
) -> SdeidStatus {
    guarded(|| {
        if model.is_null() || x.is_null() || out.is_null() {
            set_error("null pointer argument");
            return SdeidStatus::NullPointer;
        }
        let ckpt = &(*model).inner;
        let net = if drift { &ckpt.drift } else { &ckpt.diffusion };
        if x_len != net.input_dim() || out_len != net.output_dim() {
            set_error(&format!(
                "expected input length {} and output length {}, got {x_len} and {out_len}",
                net.input_dim(),
                net.output_dim()
            ));
            return SdeidStatus::Config;
        }
        let xs = std::slice::from_raw_parts(x, x_len);
        let os = std::slice::from_raw_parts_mut(out, out_len);
        os.copy_from_slice(&net.forward(xs));
        SdeidStatus::Ok
    })
}

/// Escape probability of the learned 1-D dynamics through `gamma1` before
/// `gamma2`, evaluated at `queries` (all strictly inside the interval) by
/// the quadrature route. `out` receives one probability per query.
#[no_mangle]
pub unsafe extern "C" fn sdeid_model_escape_probability(
    model: *const SdeidModel,
    gamma1: c_double,
    gamma2: c_double,
    queries: *const c_double,
    n_queries: usize,
    out: *mut c_double,
) -> SdeidStatus {
    guarded(|| {
        if model.is_null() || queries.is_null() || out.is_null() {
            set_error("null pointer argument");
            return SdeidStatus::NullPointer;
        }
        let ckpt = &(*model).inner;
        let qs = std::slice::from_raw_parts(queries, n_queries).to_vec();
        let surrogate = surrogate_model(&ckpt.drift, &ckpt.diffusion);
        let problem = match EscapeProblem::new(surrogate, gamma1, gamma2, qs) {
            Ok(p) => p,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        match escape_probability_analytic(&problem, 8000) {
            Ok(values) => {
                std::ptr::copy_nonoverlapping(values.as_ptr(), out, n_queries);
                SdeidStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config_json(dir: &str) -> CString {
        CString::new(format!(
            r#"{{
              "system": {{ "id": "grazing", "k": 0.5, "a": 10.0, "beta": 10.0, "c": 1.0, "x0": 1.0, "d": 0.1 }},
              "grid": {{ "bounds": [[0.1, 9.9]], "shape": [16] }},
              "sim": {{ "dt": 0.01, "steps": 5, "ensemble_size": 50, "seed": 7 }},
              "train": {{
                "initial_sample_count": 4, "batch_size": 4,
                "stage1": {{ "learning_rate": 0.01, "steps_per_round": 5, "agf_steps": 5, "gradient_clip": 100.0 }},
                "stage2": {{ "learning_rate": 0.01, "steps_per_round": 5, "agf_steps": 5, "gradient_clip": 100.0 }},
                "stop_threshold": null,
                "max_rounds": 1, "sample_budget": 8,
                "rbms": {{ "variant": "II", "m": 7, "n": 2, "r": 5 }},
                "hidden_layers": [4], "rk4_substeps": 1, "smooth_residuals": true
              }},
              "output_dir": "{dir}",
              "seed": 3
            }}"#
        ))
        .unwrap()
    }

    fn last_error() -> String {
        let mut buf = vec![0u8; 512];
        let n = unsafe { sdeid_last_error_message(buf.as_mut_ptr() as *mut c_char, buf.len()) };
        buf.truncate(n.min(511));
        String::from_utf8_lossy(&buf).into_owned()
    }

    #[test]
    fn version_is_a_nonempty_cstring() {
        let v = unsafe { CStr::from_ptr(sdeid_version()) };
        assert!(!v.to_str().unwrap().is_empty());
    }

    #[test]
    fn null_arguments_are_rejected_not_crashed() {
        let mut out: *mut SdeidConfig = std::ptr::null_mut();
        assert_eq!(
            unsafe { sdeid_config_load(std::ptr::null(), &mut out) },
            SdeidStatus::NullPointer
        );
        assert_eq!(
            unsafe { sdeid_run_simulate(std::ptr::null()) },
            SdeidStatus::NullPointer
        );
        let mut msg = vec![0u8; 128];
        let n = unsafe { sdeid_last_error_message(msg.as_mut_ptr() as *mut c_char, msg.len()) };
        assert!(n > 0);
    }

    #[test]
    fn bad_json_reports_config_error_with_message() {
        let mut out: *mut SdeidConfig = std::ptr::null_mut();
        let junk = CString::new("{ not json").unwrap();
        assert_eq!(
            unsafe { sdeid_config_from_json(junk.as_ptr(), &mut out) },
            SdeidStatus::Config
        );
        assert!(out.is_null());
        assert!(!last_error().is_empty());
    }

    #[test]
    fn full_loop_through_the_c_surface() {
        let dir = std::env::temp_dir().join(format!("sdeid_ffi_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let dir_str = dir.display().to_string();

        let json = tiny_config_json(&dir_str);
        let mut cfg: *mut SdeidConfig = std::ptr::null_mut();
        let s = unsafe { sdeid_config_from_json(json.as_ptr(), &mut cfg) };
        assert_eq!(s, SdeidStatus::Ok, "config parse failed: {}", last_error());
        assert_eq!(unsafe { sdeid_config_set_seed(cfg, 42) }, SdeidStatus::Ok);
        assert_eq!(unsafe { sdeid_run_simulate(cfg) }, SdeidStatus::Ok, "{}", last_error());
        assert_eq!(unsafe { sdeid_run_train(cfg, 0) }, SdeidStatus::Ok, "{}", last_error());

        let ckpt_path = CString::new(format!("{dir_str}/weights_agf.json")).unwrap();
        let mut model: *mut SdeidModel = std::ptr::null_mut();
        let s = unsafe { sdeid_checkpoint_load(ckpt_path.as_ptr(), &mut model) };
        assert_eq!(s, SdeidStatus::Ok, "{}", last_error());

        let mut n = 0usize;
        let mut m = 0usize;
        assert_eq!(unsafe { sdeid_model_dims(model, &mut n, &mut m) }, SdeidStatus::Ok);
        assert_eq!((n, m), (1, 1));

        let x = [5.0f64];
        let mut f = [0.0f64];
        assert_eq!(
            unsafe { sdeid_model_drift(model, x.as_ptr(), 1, f.as_mut_ptr(), 1) },
            SdeidStatus::Ok
        );
        assert!(f[0].is_finite());

        let mut g = [0.0f64];
        assert_eq!(
            unsafe { sdeid_model_diffusion(model, x.as_ptr(), 1, g.as_mut_ptr(), 1) },
            SdeidStatus::Ok
        );

        // shape errors are reported, not UB
        assert_eq!(
            unsafe { sdeid_model_drift(model, x.as_ptr(), 1, f.as_mut_ptr(), 3) },
            SdeidStatus::Config
        );

        let queries = [3.0f64, 5.0, 7.0];
        let mut pe = [0.0f64; 3];
        let s = unsafe {
            sdeid_model_escape_probability(model, 2.0, 9.9, queries.as_ptr(), 3, pe.as_mut_ptr())
        };
        assert_eq!(s, SdeidStatus::Ok, "{}", last_error());
        for v in pe {
            assert!((0.0..=1.0).contains(&v));
        }

        unsafe {
            sdeid_model_free(model);
            sdeid_config_free(cfg);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}