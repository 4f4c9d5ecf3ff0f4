//! C interface to the platoon simulator.
//!
//! A `PsimSession` is an opaque handle owning one scenario configuration and,
//! after `psim_run`, its results. Every function returns a `PsimStatus`; on
//! failure `psim_last_error` gives a message for the calling thread.
//! Absent metric values are reported as NaN.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use platoonsim::cli::write_outputs;
use platoonsim::evaluation::{evaluate, MetricsReport};
use platoonsim::platooning::MergeAlgorithm;
use platoonsim::scenario::{builtin, load_config_file, run_with_bus, RunOutput, ScenarioConfig};
use platoonsim::v2x::MessageBus;
use platoonsim::world::{VehicleId, VehicleKind};
use platoonsim::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsimStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Simulation = 4,
    NotRun = 5,
    NotFound = 6,
    Io = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsimMergeAlgorithm {
    Heuristic = 0,
    Fuzzy = 1,
}

/// One simulation step of one vehicle.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PsimRecord {
    pub step: u64,
    pub station: f64,
    pub lane: i32,
    pub lateral_offset: f64,
    pub speed: f64,
    pub accel: f64,
}

/// Per-vehicle metrics. NaN marks a value that is not defined for the vehicle.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PsimMetrics {
    pub attc: f64,
    pub hazard_frequency: u32,
    pub avg_time_gap: f64,
    pub time_gap_std: f64,
    pub accel_std: f64,
    pub tcm: f64,
    pub maneuver_accel_std: f64,
}

/// Opaque simulation session.
pub struct PsimSession {
    config: ScenarioConfig,
    result: Option<(RunOutput, MessageBus, MetricsReport)>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: PsimStatus, msg: impl Into<String>) -> PsimStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> PsimStatus {
    let status = match e {
        Error::Config(_) => PsimStatus::Config,
        Error::Io(_) | Error::Csv(_) => PsimStatus::Io,
        _ => PsimStatus::Simulation,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> PsimStatus) -> PsimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == PsimStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(PsimStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, PsimStatus> {
    if p.is_null() {
        return Err(fail(PsimStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(PsimStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn session<'a>(h: *mut PsimSession) -> Result<&'a mut PsimSession, PsimStatus> {
    h.as_mut()
        .ok_or_else(|| fail(PsimStatus::NullArgument, "session is null"))
}

unsafe fn results<'a>(
    h: *const PsimSession,
) -> Result<&'a (RunOutput, MessageBus, MetricsReport), PsimStatus> {
    let s = h
        .as_ref()
        .ok_or_else(|| fail(PsimStatus::NullArgument, "session is null"))?;
    s.result
        .as_ref()
        .ok_or_else(|| fail(PsimStatus::NotRun, "psim_run has not completed"))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

fn new_session(config: ScenarioConfig, out: *mut *mut PsimSession) -> PsimStatus {
    let boxed = Box::new(PsimSession {
        config,
        result: None,
    });
    // SAFETY: caller checked `out` is non-null
    unsafe { *out = Box::into_raw(boxed) };
    PsimStatus::Ok
}

/// Creates a session for a builtin scenario (`cycle1`, `cycle2`, `merge_join`).
#[no_mangle]
pub unsafe extern "C" fn psim_session_builtin(
    name: *const c_char,
    out: *mut *mut PsimSession,
) -> PsimStatus {
    guard(|| {
        if out.is_null() {
            return fail(PsimStatus::NullArgument, "out is null");
        }
        let name = tri!(str_arg(name, "name"));
        match builtin(name, None) {
            Ok(cfg) => new_session(cfg, out),
            Err(e) => from_error(e),
        }
    })
}

/// Creates a session from a YAML scenario file.
#[no_mangle]
pub unsafe extern "C" fn psim_session_from_file(
    path: *const c_char,
    out: *mut *mut PsimSession,
) -> PsimStatus {
    guard(|| {
        if out.is_null() {
            return fail(PsimStatus::NullArgument, "out is null");
        }
        let path = tri!(str_arg(path, "path"));
        match load_config_file(Path::new(path)) {
            Ok(cfg) => new_session(cfg, out),
            Err(e) => from_error(e),
        }
    })
}

/// Releases a session. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn psim_session_free(h: *mut PsimSession) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Sets both the traffic seed and the V2X channel seed. Clears previous results.
#[no_mangle]
pub unsafe extern "C" fn psim_set_seed(h: *mut PsimSession, seed: u64) -> PsimStatus {
    guard(|| {
        let s = tri!(session(h));
        s.config.sim.seed = seed;
        s.config.channel.seed = seed;
        s.result = None;
        PsimStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn psim_set_steps(h: *mut PsimSession, steps: u64) -> PsimStatus {
    guard(|| {
        let s = tri!(session(h));
        s.config.sim.total_steps = steps;
        s.result = None;
        PsimStatus::Ok
    })
}

/// Per-recipient message drop probability in [0, 1].
#[no_mangle]
pub unsafe extern "C" fn psim_set_channel_drop(h: *mut PsimSession, p: f64) -> PsimStatus {
    guard(|| {
        let s = tri!(session(h));
        if !(0.0..=1.0).contains(&p) {
            return fail(
                PsimStatus::Config,
                format!("drop probability {p} not in [0, 1]"),
            );
        }
        s.config.channel.drop_probability = p;
        s.result = None;
        PsimStatus::Ok
    })
}

/// Merge-position algorithm used by every single CAV in the scenario, as a
/// `PsimMergeAlgorithm` value. Unknown values give `PSIM_STATUS_CONFIG`.
#[no_mangle]
pub unsafe extern "C" fn psim_set_merge_algorithm(
    h: *mut PsimSession,
    algorithm: u32,
) -> PsimStatus {
    guard(|| {
        let s = tri!(session(h));
        let algo = match algorithm {
            x if x == PsimMergeAlgorithm::Heuristic as u32 => MergeAlgorithm::Heuristic,
            x if x == PsimMergeAlgorithm::Fuzzy as u32 => MergeAlgorithm::Fuzzy,
            other => {
                return fail(
                    PsimStatus::Config,
                    format!("unknown merge algorithm {other}"),
                )
            }
        };
        s.config
            .cavs
            .iter_mut()
            .for_each(|c| c.merge_algorithm = algo);
        s.result = None;
        PsimStatus::Ok
    })
}

/// Runs the configured scenario to completion and evaluates it.
#[no_mangle]
pub unsafe extern "C" fn psim_run(h: *mut PsimSession) -> PsimStatus {
    guard(|| {
        let s = tri!(session(h));
        s.result = None;
        match run_with_bus(&s.config) {
            Ok((out, bus)) => {
                let report = evaluate(&out.traces, &out.events, out.dt);
                s.result = Some((out, bus, report));
                PsimStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Number of vehicles that appeared during the run.
#[no_mangle]
pub unsafe extern "C" fn psim_vehicle_count(h: *const PsimSession, out: *mut usize) -> PsimStatus {
    guard(|| {
        let (run, _, _) = tri!(results(h));
        let Some(out) = out.as_mut() else {
            return fail(PsimStatus::NullArgument, "out is null");
        };
        *out = run.traces.len();
        PsimStatus::Ok
    })
}

/// Id of the vehicle at `index`; `is_cav` is false for human-driven vehicles.
#[no_mangle]
pub unsafe extern "C" fn psim_vehicle_at(
    h: *const PsimSession,
    index: usize,
    id: *mut u32,
    is_cav: *mut bool,
) -> PsimStatus {
    guard(|| {
        let (run, _, _) = tri!(results(h));
        let (Some(id), Some(is_cav)) = (id.as_mut(), is_cav.as_mut()) else {
            return fail(PsimStatus::NullArgument, "output pointer is null");
        };
        let Some(t) = run.traces.get(index) else {
            return fail(
                PsimStatus::NotFound,
                format!("vehicle index {index} out of range"),
            );
        };
        *id = t.id.0;
        *is_cav = t.kind == VehicleKind::Cav;
        PsimStatus::Ok
    })
}

/// Copies up to `capacity` trace records of vehicle `id` into `buf` and sets
/// `written` to the full trace length. Pass a null `buf` to query the length.
#[no_mangle]
pub unsafe extern "C" fn psim_trace(
    h: *const PsimSession,
    id: u32,
    buf: *mut PsimRecord,
    capacity: usize,
    written: *mut usize,
) -> PsimStatus {
    guard(|| {
        let (run, _, _) = tri!(results(h));
        let Some(written) = written.as_mut() else {
            return fail(PsimStatus::NullArgument, "written is null");
        };
        let Some(t) = run.trace(VehicleId(id)) else {
            return fail(PsimStatus::NotFound, format!("no vehicle {id}"));
        };
        *written = t.records.len();
        if !buf.is_null() {
            for (i, r) in t.records.iter().take(capacity).enumerate() {
                *buf.add(i) = PsimRecord {
                    step: r.step,
                    station: r.station,
                    lane: r.lane,
                    lateral_offset: r.lateral_offset,
                    speed: r.speed,
                    accel: r.accel,
                };
            }
        }
        PsimStatus::Ok
    })
}

/// Metrics of CAV `id`.
#[no_mangle]
pub unsafe extern "C" fn psim_metrics(
    h: *const PsimSession,
    id: u32,
    out: *mut PsimMetrics,
) -> PsimStatus {
    guard(|| {
        let (_, _, report) = tri!(results(h));
        let Some(out) = out.as_mut() else {
            return fail(PsimStatus::NullArgument, "out is null");
        };
        let Some(r) = report.row(VehicleId(id)) else {
            return fail(PsimStatus::NotFound, format!("no metrics for vehicle {id}"));
        };
        let nan = |v: Option<f64>| v.unwrap_or(f64::NAN);
        *out = PsimMetrics {
            attc: nan(r.attc),
            hazard_frequency: r.hazard_frequency,
            avg_time_gap: nan(r.avg_time_gap),
            time_gap_std: nan(r.time_gap_std),
            accel_std: r.accel_std,
            tcm: nan(r.tcm),
            maneuver_accel_std: nan(r.maneuver_accel_std),
        };
        PsimStatus::Ok
    })
}

/// Writes traces, events, the report and (if `plot`) an SVG chart into `dir`.
#[no_mangle]
pub unsafe extern "C" fn psim_write_outputs(
    h: *const PsimSession,
    dir: *const c_char,
    plot: bool,
) -> PsimStatus {
    guard(|| {
        let (run, bus, _) = tri!(results(h));
        let dir = tri!(str_arg(dir, "dir"));
        match write_outputs(run, Some(bus), Path::new(dir), plot) {
            Ok(_) => PsimStatus::Ok,
            Err(e) => from_error(e),
        }
    })
}

/// Message describing the last failure on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn psim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn psim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
