use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use platoonsim::evaluation::evaluate;
use platoonsim::scenario::{builtin, run};
use platoonsim::world::VehicleId;
use platoonsim_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(psim_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn session(name: &str) -> *mut PsimSession {
    let name = CString::new(name).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(
        unsafe { psim_session_builtin(name.as_ptr(), &mut h) },
        PsimStatus::Ok
    );
    assert!(!h.is_null());
    h
}

#[test]
fn results_match_the_library() {
    let h = session("cycle1");
    unsafe {
        let mut m = PsimMetrics::default();
        assert_eq!(psim_metrics(h, 2, &mut m), PsimStatus::NotRun);
        assert_eq!(psim_set_steps(h, 400), PsimStatus::Ok);
        assert_eq!(psim_run(h), PsimStatus::Ok);

        let mut cfg = builtin("cycle1", None).unwrap();
        cfg.sim.total_steps = 400;
        let out = run(&cfg).unwrap();
        let report = evaluate(&out.traces, &out.events, out.dt);

        let mut n = 0usize;
        assert_eq!(psim_vehicle_count(h, &mut n), PsimStatus::Ok);
        assert_eq!(n, out.traces.len());
        for (i, t) in out.traces.iter().enumerate() {
            let (mut id, mut cav) = (0u32, false);
            assert_eq!(psim_vehicle_at(h, i, &mut id, &mut cav), PsimStatus::Ok);
            assert_eq!((VehicleId(id), cav), (t.id, t.is_cav()));

            let mut len = 0usize;
            assert_eq!(
                psim_trace(h, id, ptr::null_mut(), 0, &mut len),
                PsimStatus::Ok
            );
            let mut buf = vec![PsimRecord::default(); len];
            assert_eq!(
                psim_trace(h, id, buf.as_mut_ptr(), len, &mut len),
                PsimStatus::Ok
            );
            for (a, b) in buf.iter().zip(&t.records) {
                assert_eq!(
                    (a.step, a.station, a.speed, a.accel),
                    (b.step, b.station, b.speed, b.accel)
                );
            }

            let row = report.row(t.id).unwrap();
            assert_eq!(psim_metrics(h, id, &mut m), PsimStatus::Ok);
            assert_eq!(m.accel_std, row.accel_std);
            assert_eq!(m.avg_time_gap.is_nan(), row.avg_time_gap.is_none());
            assert!(m.tcm.is_nan());
        }
        let (mut id, mut cav) = (0u32, false);
        assert_eq!(
            psim_vehicle_at(h, 99, &mut id, &mut cav),
            PsimStatus::NotFound
        );
        assert!(last_error().contains("99"));
        psim_session_free(h);
    }
}

#[test]
fn configuration_errors() {
    let h = session("merge_join");
    unsafe {
        assert_eq!(psim_set_channel_drop(h, 1.5), PsimStatus::Config);
        assert_eq!(psim_set_merge_algorithm(h, 7), PsimStatus::Config);
        assert_eq!(
            psim_set_merge_algorithm(h, PsimMergeAlgorithm::Fuzzy as u32),
            PsimStatus::Ok
        );
        assert!(last_error().is_empty());
        let bad = CString::new("/nonexistent/x.yaml").unwrap();
        let mut other = ptr::null_mut();
        assert_eq!(
            psim_session_from_file(bad.as_ptr(), &mut other),
            PsimStatus::Config
        );
        assert!(other.is_null());
        assert_eq!(
            psim_session_builtin(ptr::null(), &mut other),
            PsimStatus::NullArgument
        );
        psim_session_free(h);
    }
}

#[test]
fn writes_outputs() {
    let h = session("cycle2");
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(psim_set_steps(h, 100), PsimStatus::Ok);
        assert_eq!(
            psim_write_outputs(h, path.as_ptr(), true),
            PsimStatus::NotRun
        );
        assert_eq!(psim_run(h), PsimStatus::Ok);
        assert_eq!(psim_write_outputs(h, path.as_ptr(), true), PsimStatus::Ok);
        psim_session_free(h);
    }
    assert!(dir.path().join("report.csv").exists());
    assert!(dir.path().join("plot.svg").exists());
}

#[test]
fn header_is_current() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/platoonsim.h"))
            .unwrap();
    for f in [
        "psim_session_builtin",
        "psim_session_from_file",
        "psim_session_free",
        "psim_set_seed",
        "psim_set_steps",
        "psim_set_channel_drop",
        "psim_set_merge_algorithm",
        "psim_run",
        "psim_vehicle_count",
        "psim_vehicle_at",
        "psim_trace",
        "psim_metrics",
        "psim_write_outputs",
        "psim_last_error",
        "psim_version",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
}

// Builds and runs a small C program against the header and the static library.
#[test]
fn c_program_links_and_runs() {
    let Ok(exe) = std::env::current_exe() else {
        return;
    };
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap().to_path_buf();
    let lib = profile_dir.join("libplatoonsim_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "platoonsim.h"
int main(void) {
    PsimSession *s = NULL;
    if (psim_session_builtin("cycle1", &s) != PSIM_STATUS_OK) return 1;
    if (psim_set_steps(s, 200) != PSIM_STATUS_OK) return 2;
    if (psim_run(s) != PSIM_STATUS_OK) return 3;
    PsimMetrics m;
    if (psim_metrics(s, 3, &m) != PSIM_STATUS_OK) return 4;
    printf("%.3f\n", m.avg_time_gap);
    if (psim_metrics(s, 42, &m) != PSIM_STATUS_NOT_FOUND) return 5;
    psim_session_free(s);
    return 0;
}
"#,
    )
    .unwrap();
    let bin: PathBuf = dir.path().join("demo");
    let cc = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(
        cc.status.success(),
        "{}",
        String::from_utf8_lossy(&cc.stderr)
    );
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.600");
}
