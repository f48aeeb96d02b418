use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::ptr;

use moesched_ffi::*;

const TRACE_TOML: &str = "model = \"mixtral-desk\"\nbatch_size = 4\n[trace]\niterations = 2\n";

fn cs(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = moesched_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn params() -> MoeCostParams {
    MoeCostParams {
        t_io: 4000,
        t_g: 200,
        t_attn: 3000,
        beta: 40.0,
        startup: 500.0,
    }
}

fn trace() -> *mut MoeTrace {
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { moesched_trace_generate(cs(TRACE_TOML).as_ptr(), 3, &mut t) }, MoeStatus::Ok);
    t
}

fn simulate(t: *const MoeTrace, policy: &str) -> (MoeStatus, MoeMetrics) {
    let mut r = ptr::null_mut();
    let status = unsafe {
        moesched_simulate(t, ptr::null(), cs(policy).as_ptr(), cs("stats").as_ptr(), &params(), 0, 1, &mut r)
    };
    let mut m = MoeMetrics::default();
    if status == MoeStatus::Ok {
        assert_eq!(unsafe { moesched_sim_metrics(r, &mut m) }, MoeStatus::Ok);
        unsafe { moesched_sim_free(r) };
    }
    (status, m)
}

#[test]
fn simulation_round_trip_is_deterministic() {
    let t = trace();
    assert_eq!(unsafe { moesched_trace_num_tokens(t) }, 8);
    let (s1, a) = simulate(t, "presched");
    let (s2, b) = simulate(t, "presched");
    assert_eq!((s1, s2), (MoeStatus::Ok, MoeStatus::Ok));
    assert_eq!(a, b);
    assert_eq!(a.num_stages, 2 * 16);
    assert!(a.makespan > 0 && a.num_events > 0);
    assert!(moesched_last_error().is_null());
    unsafe { moesched_trace_free(t) };
}

#[test]
fn trace_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = cs(dir.path().join("t.trace").to_str().unwrap());
    let t = trace();
    assert_eq!(unsafe { moesched_trace_save(t, path.as_ptr()) }, MoeStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { moesched_trace_load(path.as_ptr(), &mut back) }, MoeStatus::Ok);
    assert_eq!(simulate(t, "greedy").1, simulate(back, "greedy").1);
    unsafe {
        moesched_trace_free(t);
        moesched_trace_free(back);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let t = trace();
    assert_eq!(simulate(t, "lru").0, MoeStatus::InvalidConfig);
    assert!(last_error().contains("lru"));
    let mut r = ptr::null_mut();
    let s = unsafe { moesched_simulate(ptr::null(), ptr::null(), cs("presched").as_ptr(), cs("stats").as_ptr(), &params(), 0, 0, &mut r) };
    assert_eq!(s, MoeStatus::NullPointer);
    let bad = MoeCostParams { t_g: 5000, ..params() };
    let s = unsafe { moesched_simulate(t, ptr::null(), cs("presched").as_ptr(), cs("stats").as_ptr(), &bad, 0, 0, &mut r) };
    assert_eq!(s, MoeStatus::InvalidConfig);
    let mut passed = true;
    assert_eq!(unsafe { moesched_replay_golden(cs("nope").as_ptr(), &mut passed) }, MoeStatus::UnknownScenario);
    let mut missing = ptr::null_mut();
    assert_eq!(unsafe { moesched_trace_load(cs("/no/such/trace").as_ptr(), &mut missing) }, MoeStatus::Io);
    assert!(missing.is_null());
    unsafe {
        moesched_trace_free(ptr::null_mut());
        moesched_sim_free(ptr::null_mut());
        moesched_trace_free(t);
    }
}

#[test]
fn golden_scenarios_pass_through_the_abi() {
    for id in moesched::sim::GOLDEN_IDS {
        let mut passed = false;
        assert_eq!(unsafe { moesched_replay_golden(cs(id).as_ptr(), &mut passed) }, MoeStatus::Ok);
        assert!(passed, "{id}");
    }
}

#[test]
fn cost_fit_matches_the_line() {
    let tokens = [1u32, 2, 4, 8];
    let ticks: Vec<f64> = tokens.iter().map(|&m| 3.0 * f64::from(m) + 7.0).collect();
    let mut fit = MoeCostFit::default();
    assert_eq!(unsafe { moesched_fit_cost(tokens.as_ptr(), ticks.as_ptr(), 4, &mut fit) }, MoeStatus::Ok);
    assert!((fit.beta - 3.0).abs() < 1e-12 && (fit.startup - 7.0).abs() < 1e-12);
    assert_eq!(unsafe { moesched_fit_cost(ptr::null(), ptr::null(), 0, &mut fit) }, MoeStatus::InvalidConfig);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(moesched_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

/// Compiles `tests/c/smoke.c` against the generated header and the static
/// library, then runs it.
#[test]
fn c_program_links_and_runs() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap();
    let lib = [deps.join("../libmoesched_ffi.a"), deps.join("libmoesched_ffi.a")]
        .into_iter()
        .find(|p| p.is_file())
        .unwrap_or_else(|| panic!("libmoesched_ffi.a not found next to {}", deps.display()));
    let out = tempfile::tempdir().unwrap();
    let bin = out.path().join("smoke");
    let status = std::process::Command::new("cc")
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-std=c11")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("cc must be installed to check the C header");
    assert!(status.success(), "C compile failed");
    let run = std::process::Command::new(&bin).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "{stdout}{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout.contains("tokens=8") && stdout.contains("golden=1"), "{stdout}");
}
