use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn platoonsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_platoonsim"))
        .args(args)
        .env_remove("PLATOONSIM_OUT")
        .output()
        .expect("binary runs")
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn run_cycle1_writes_traces_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = platoonsim(&[
        "run",
        "--scenario",
        "cycle1",
        "--seed",
        "7",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let files = read_dir_sorted(&out);
    let traces = files
        .iter()
        .filter(|(n, _)| n.starts_with("trace_"))
        .count();
    assert_eq!(traces, 5);
    for name in ["report.csv", "report.txt", "events.csv", "vehicles.csv"] {
        assert!(files.iter().any(|(n, _)| n == name), "missing {name}");
    }
    assert!(!files.iter().any(|(n, _)| n == "drops.csv"));

    let again = dir.path().join("b");
    let o = platoonsim(&[
        "run",
        "--scenario",
        "cycle1",
        "--seed",
        "7",
        "--out-dir",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(files, read_dir_sorted(&again));
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_platoonsim"))
        .args(["run", "--scenario", "cycle1", "--steps", "20"])
        .env("PLATOONSIM_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("report.csv").exists());
}

#[test]
fn fuzzy_merge_reports_tcm_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let o = platoonsim(&[
        "run",
        "--scenario",
        "merge_join",
        "--merge-algo",
        "fuzzy",
        "--plot",
        "--channel-drop",
        "0.1",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let joiner = report
        .lines()
        .find(|l| l.starts_with("10,"))
        .expect("joiner row");
    let tcm = joiner.split(',').nth(7).unwrap();
    assert!(tcm.parse::<f64>().is_ok(), "tcm {tcm}");
    assert!(fs::read_to_string(dir.path().join("plot.svg"))
        .unwrap()
        .starts_with("<svg"));
    assert!(dir.path().join("drops.csv").exists());
}

#[test]
fn bad_config_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.yaml");
    fs::write(&cfg, "sim:\n  dt: -1\n").unwrap();
    let o = platoonsim(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("sim.dt"));
}

#[test]
fn unwritable_out_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = platoonsim(&[
        "run",
        "--scenario",
        "cycle1",
        "--steps",
        "5",
        "--out-dir",
        blocker.join("sub").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
}

#[test]
fn compare_prints_both_algorithms() {
    let dir = tempfile::tempdir().unwrap();
    let o = platoonsim(&[
        "compare",
        "--scenario",
        "merge_join",
        "--seed",
        "3",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("heuristic") && text.contains("fuzzy"));
    let csv = fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("fuzzy").join("report.csv").exists());

    let o = platoonsim(&[
        "compare",
        "--scenario",
        "merge_join",
        "--merge-algo",
        "fuzzy",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let o = platoonsim(&[
        "compare",
        "--scenario",
        "merge_join",
        "--seed",
        "1",
        "--seed",
        "2",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
}

#[test]
fn list_outputs() {
    let o = platoonsim(&["list"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 3);
    let o = platoonsim(&["list", "--names-only"]);
    assert_eq!(
        String::from_utf8(o.stdout).unwrap(),
        "cycle1\ncycle2\nmerge_join\n"
    );
    let o = platoonsim(&[
        "list",
        "--config-dir",
        concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios"),
    ]);
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 6);
}
