//! C ABI for moesched.
//!
//! Every fallible function returns a [`MoeStatus`]. On failure a message is
//! kept per thread and can be read with [`moesched_last_error`]. Objects are
//! exposed as opaque handles that the caller releases with the matching
//! `*_free` function; freeing `NULL` is a no-op. Panics never cross the
//! boundary and are reported as [`MoeStatus::Panic`].

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use moesched::cost::{fit_cost_params, CostParams};
use moesched::experiment::{run_experiment, ExperimentConfig, LoadedPredictor, PredictorChoice, TraceFileConfig};
use moesched::predictor::plan_residency;
use moesched::scheduler::SchedulerPolicy;
use moesched::sim::{compute_metrics, replay_golden, run_scenario, scenario_from_trace, Metrics, SimConfig, SimOutput};
use moesched::workload::{read_trace, write_trace, Trace};
use moesched::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    Io = 4,
    Format = 5,
    ChecksumMismatch = 6,
    VersionMismatch = 7,
    UnknownScenario = 8,
    Runtime = 9,
    Panic = 10,
}

impl From<&Error> for MoeStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::IndexOutOfRange { .. } | Error::ShapeMismatch { .. } | Error::Empty(_) => {
                MoeStatus::InvalidArgument
            }
            Error::InvalidConfig(_) | Error::InvalidSpec(_) | Error::DegenerateSamples(_) => MoeStatus::InvalidConfig,
            Error::Io { .. } => MoeStatus::Io,
            Error::Format { .. } | Error::Json(_) => MoeStatus::Format,
            Error::ChecksumMismatch { .. } => MoeStatus::ChecksumMismatch,
            Error::VersionMismatch { .. } => MoeStatus::VersionMismatch,
            Error::UnknownScenario(_) => MoeStatus::UnknownScenario,
            _ => MoeStatus::Runtime,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Message of the last failure on this thread, or `NULL` after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn moesched_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn moesched_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

struct Fail(MoeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(MoeStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MoeStatus::NullPointer, format!("{what} is NULL"))
}

/// Runs `f`, converting its error or panic into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MoeStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MoeStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {msg}"));
            MoeStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MoeStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Latency constants in microsecond ticks.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoeCostParams {
    pub t_io: u64,
    pub t_g: u64,
    pub t_attn: u64,
    pub beta: f64,
    pub startup: f64,
}

impl MoeCostParams {
    fn to_params(self) -> Result<CostParams, Fail> {
        Ok(CostParams::new(self.t_io, self.t_g, self.t_attn, self.beta, self.startup)?)
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MoeCostFit {
    pub beta: f64,
    pub startup: f64,
    pub r_squared: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MoeMetrics {
    pub makespan: u64,
    pub decode_latency: f64,
    pub throughput: f64,
    pub io_busy_fraction: f64,
    pub gpu_idle_fraction: f64,
    pub num_stages: u64,
    pub num_events: u64,
}

/// A routing trace.
pub struct MoeTrace(Trace);

/// The timeline and metrics of one simulation.
pub struct MoeSimResult {
    out: SimOutput,
    metrics: Metrics,
}

/// Generates a trace from a TOML config with `model`, `batch_size` and an
/// optional `[trace]` table.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn moesched_trace_generate(config_toml: *const c_char, seed: u64, out: *mut *mut MoeTrace) -> MoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = TraceFileConfig::parse(str_arg(config_toml, "config_toml")?)?;
        *out = Box::into_raw(Box::new(MoeTrace(cfg.generate(seed)?)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn moesched_trace_load(path: *const c_char, out: *mut *mut MoeTrace) -> MoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let trace = read_trace(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(MoeTrace(trace)));
        Ok(())
    })
}

/// # Safety
/// `trace` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn moesched_trace_save(trace: *const MoeTrace, path: *const c_char) -> MoeStatus {
    guard(|| {
        let trace = trace.as_ref().ok_or_else(|| null("trace"))?;
        write_trace(&trace.0, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Tokens in the trace (iterations x batch size); 0 for `NULL`.
///
/// # Safety
/// `trace` must be `NULL` or come from this library.
#[no_mangle]
pub unsafe extern "C" fn moesched_trace_num_tokens(trace: *const MoeTrace) -> u64 {
    trace.as_ref().map_or(0, |t| t.0.num_tokens() as u64)
}

/// # Safety
/// `trace` must be `NULL` or come from this library, and not be used after.
#[no_mangle]
pub unsafe extern "C" fn moesched_trace_free(trace: *mut MoeTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Simulates `trace` under `policy` (`presched`, `greedy`, `ondemand`,
/// `fixed:<c>`, `oracle`) with predictions from `predictor` (`stats`, `gate`,
/// `oracle_noise:<rate>`, `llapor:<checkpoint>`). Frequency tables and the
/// residency plan come from `profile`, or from `trace` when it is `NULL`.
///
/// # Safety
/// Handles must come from this library; strings must be NUL-terminated;
/// `params` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn moesched_simulate(
    trace: *const MoeTrace,
    profile: *const MoeTrace,
    policy: *const c_char,
    predictor: *const c_char,
    params: *const MoeCostParams,
    residency_budget_bytes: u64,
    seed: u64,
    out: *mut *mut MoeSimResult,
) -> MoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let trace = &trace.as_ref().ok_or_else(|| null("trace"))?.0;
        let profile = profile.as_ref().map_or(trace, |p| &p.0);
        let policy: SchedulerPolicy = str_arg(policy, "policy")?.parse()?;
        let choice: PredictorChoice = str_arg(predictor, "predictor")?.parse()?;
        let params = params.as_ref().ok_or_else(|| null("params"))?.to_params()?;
        let loaded = LoadedPredictor::load(&choice, profile)?;
        let resident: BTreeSet<(usize, usize)> =
            plan_residency(loaded.table(), residency_budget_bytes, trace.spec.expert_bytes).into_iter().collect();
        let mut cfg = SimConfig::new(params);
        cfg.initial_hit_rate = loaded.offline_hit_rate(profile, seed)?;
        let sc = scenario_from_trace(trace, loaded.source(), &resident, seed)?;
        let sim = run_scenario(&sc, &cfg, policy)?;
        let metrics = compute_metrics(&sim.timeline);
        *out = Box::into_raw(Box::new(MoeSimResult { out: sim, metrics }));
        Ok(())
    })
}

/// # Safety
/// `result` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn moesched_sim_metrics(result: *const MoeSimResult, out: *mut MoeMetrics) -> MoeStatus {
    guard(|| {
        let r = result.as_ref().ok_or_else(|| null("result"))?;
        let out = out_arg(out, "out")?;
        let m = &r.metrics;
        *out = MoeMetrics {
            makespan: m.makespan,
            decode_latency: m.decode_latency,
            throughput: m.throughput,
            io_busy_fraction: m.io_busy_fraction,
            gpu_idle_fraction: m.gpu_idle_fraction,
            num_stages: m.stage_latency.len() as u64,
            num_events: r.out.timeline.events.len() as u64,
        };
        Ok(())
    })
}

/// Writes the timeline as line-delimited JSON.
///
/// # Safety
/// `result` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn moesched_sim_save_timeline(result: *const MoeSimResult, path: *const c_char) -> MoeStatus {
    guard(|| {
        let r = result.as_ref().ok_or_else(|| null("result"))?;
        r.out.timeline.save(str_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `result` must be `NULL` or come from this library, and not be used after.
#[no_mangle]
pub unsafe extern "C" fn moesched_sim_free(result: *mut MoeSimResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Least-squares fit of `ticks = beta * tokens + startup` over `n` samples.
///
/// # Safety
/// `tokens` and `ticks` must point to `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn moesched_fit_cost(tokens: *const u32, ticks: *const f64, n: usize, out: *mut MoeCostFit) -> MoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if n > 0 && (tokens.is_null() || ticks.is_null()) {
            return Err(null("samples"));
        }
        let samples: Vec<(u32, f64)> = if n == 0 {
            Vec::new()
        } else {
            let (m, t) = (std::slice::from_raw_parts(tokens, n), std::slice::from_raw_parts(ticks, n));
            m.iter().copied().zip(t.iter().copied()).collect()
        };
        let fit = fit_cost_params(&samples)?;
        *out = MoeCostFit {
            beta: fit.beta,
            startup: fit.startup,
            r_squared: fit.r_squared,
        };
        Ok(())
    })
}

/// Replays a hand-derived scenario; `*passed` tells whether every run
/// matched tick for tick.
///
/// # Safety
/// `id` must be NUL-terminated and `passed` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn moesched_replay_golden(id: *const c_char, passed: *mut bool) -> MoeStatus {
    guard(|| {
        let passed = out_arg(passed, "passed")?;
        let (report, _) = replay_golden(str_arg(id, "id")?)?;
        *passed = report.passed();
        Ok(())
    })
}

/// Runs an experiment grid from a TOML config file into `out_dir` (or the
/// config's `out_dir` when `NULL`). Failed cells do not fail the call; their
/// count goes to `*failed_cells`.
///
/// # Safety
/// Strings must be NUL-terminated (`out_dir` may be `NULL`); `failed_cells`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn moesched_run_experiment(config_path: *const c_char, out_dir: *const c_char, failed_cells: *mut usize) -> MoeStatus {
    guard(|| {
        let failed = out_arg(failed_cells, "failed_cells")?;
        let cfg = ExperimentConfig::load(str_arg(config_path, "config_path")?)?;
        let dir = if out_dir.is_null() {
            cfg.out_dir
                .clone()
                .ok_or_else(|| Fail(MoeStatus::InvalidConfig, "no output directory given".into()))?
        } else {
            PathBuf::from(str_arg(out_dir, "out_dir")?)
        };
        *failed = run_experiment(&cfg, &dir)?.failed_cells();
        Ok(())
    })
}
