//! Command-line front end: run a scenario, compare merge algorithms, list scenarios.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::evaluation::plot::render_svg;
use crate::evaluation::trace::{write_trace_csv, EventKind};
use crate::evaluation::{
    evaluate, min_time_gap_during_join, time_to_complete_maneuver, MetricsReport,
};
use crate::platooning::MergeAlgorithm;
use crate::scenario::{
    builtin, builtin_cycle2, load_config_file, run_with_bus, ProfileSource, RunOutput,
    ScenarioConfig, SpeedProfile, CATALOG,
};
use crate::v2x::MessageBus;
use crate::world::VehicleKind;

#[derive(Debug, Parser)]
#[command(
    name = "platoonsim",
    version,
    about = "Cooperative driving and platooning simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario and write traces, events and the metrics report.
    Run(RunArgs),
    /// Run a merge scenario once per algorithm under the same seed.
    Compare(CompareArgs),
    /// List builtin scenarios, plus any YAML scenarios in a directory.
    List(ListArgs),
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct ScenarioSource {
    /// Builtin scenario name (see `list`).
    #[arg(long)]
    pub scenario: Option<String>,
    /// Path to a YAML scenario file.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[command(flatten)]
    pub source: ScenarioSource,
    /// Output directory.
    #[arg(long, env = "PLATOONSIM_OUT", default_value = "out")]
    pub out_dir: PathBuf,
    /// Override the number of simulated steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Per-recipient V2X drop probability in [0, 1].
    #[arg(long)]
    pub channel_drop: Option<f64>,
    /// Speed-profile CSV (time_s,speed_mps) replacing the scenario's profile.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Also write an SVG chart of speed, acceleration and gaps.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Seed for background traffic and the V2X channel.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Merge-position algorithm for every single CAV.
    #[arg(long)]
    pub merge_algo: Option<MergeAlgorithm>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Algorithms to compare, comma separated (at least two).
    #[arg(
        long = "merge-algo",
        value_delimiter = ',',
        default_value = "heuristic,fuzzy"
    )]
    pub algorithms: Vec<MergeAlgorithm>,
    /// Seed shared by every run. May be repeated, but all values must agree.
    #[arg(long)]
    pub seed: Vec<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ListArgs {
    /// Directory of extra YAML scenarios to list after the builtins.
    #[arg(long)]
    pub config_dir: Option<PathBuf>,
    /// Print only names, one per line.
    #[arg(long)]
    pub names_only: bool,
}

/// Builds the scenario selected by `common`, with seed and drop overrides applied.
pub fn resolve_config(common: &CommonArgs, seed: Option<u64>) -> Result<ScenarioConfig> {
    let profile = common
        .profile
        .as_deref()
        .map(SpeedProfile::load)
        .transpose()?;
    let mut cfg = match (&common.source.scenario, &common.source.config) {
        (Some(name), None) => builtin(name, None)?,
        (None, Some(path)) => load_config_file(path)?,
        _ => {
            return Err(Error::Config(
                "give exactly one of --scenario or --config".into(),
            ))
        }
    };
    if let Some(p) = profile {
        if cfg.name == "cycle2" && common.source.scenario.is_some() {
            cfg = builtin_cycle2(p);
        } else if cfg.profiles.len() == 1 {
            for src in cfg.profiles.values_mut() {
                *src = ProfileSource::Inline(p.clone());
            }
        } else {
            return Err(Error::Config(
                "--profile needs a scenario with exactly one speed profile".into(),
            ));
        }
    }
    if let Some(s) = seed {
        cfg.sim.seed = s;
        cfg.channel.seed = s;
    }
    if let Some(n) = common.steps {
        cfg.sim.total_steps = n;
    }
    if let Some(p) = common.channel_drop {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!(
                "--channel-drop must be in [0, 1], got {p}"
            )));
        }
        cfg.channel.drop_probability = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn kind_str(kind: VehicleKind) -> &'static str {
    match kind {
        VehicleKind::Cav => "cav",
        VehicleKind::HumanDriven => "human",
    }
}

/// Writes every artifact of one run into `dir` and returns the report.
pub fn write_outputs(
    out: &RunOutput,
    bus_log: Option<&MessageBus>,
    dir: &Path,
    plot: bool,
) -> Result<MetricsReport> {
    fs::create_dir_all(dir).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", dir.display()),
        ))
    })?;
    let mut vehicles = csv::Writer::from_writer(create(&dir.join("vehicles.csv"))?);
    vehicles.write_record(["id", "kind", "length_m", "trace_file"])?;
    for t in &out.traces {
        let file = format!("trace_{}.csv", t.id);
        write_trace_csv(t, out.dt, create(&dir.join(&file))?)?;
        vehicles.write_record([
            t.id.to_string(),
            kind_str(t.kind).into(),
            t.length.to_string(),
            file,
        ])?;
    }
    vehicles.flush()?;
    out.events.write_csv(create(&dir.join("events.csv"))?)?;

    let report = evaluate(&out.traces, &out.events, out.dt);
    report.write_csv(create(&dir.join("report.csv"))?)?;
    let mut txt = create(&dir.join("report.txt"))?;
    txt.write_all(report.render_table().as_bytes())?;
    txt.flush()?;

    if let Some(bus) = bus_log.filter(|b| b.channel().drop_probability > 0.0) {
        bus.write_drop_log(create(&dir.join("drops.csv"))?)?;
    }
    if plot {
        let cavs: Vec<_> = out.traces.iter().filter(|t| t.is_cav()).collect();
        let mut svg = create(&dir.join("plot.svg"))?;
        svg.write_all(render_svg(&out.name, &out.traces, &cavs, out.dt).as_bytes())?;
        svg.flush()?;
    }
    Ok(report)
}

fn report_failure(err: &Error, dir: &Path) {
    if let Error::Invariant { dump, .. } = err {
        let path = dir.join("invariant_dump.csv");
        if fs::create_dir_all(dir)
            .and_then(|_| fs::write(&path, dump))
            .is_ok()
        {
            eprintln!("last steps written to {}", path.display());
        } else {
            eprintln!("{dump}");
        }
    }
}

pub fn cmd_run(args: &RunArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_config(&args.common, args.seed)?;
    if let Some(algo) = args.merge_algo {
        cfg.cavs.iter_mut().for_each(|c| c.merge_algorithm = algo);
    }
    let dir = &args.common.out_dir;
    let (out, bus) = run_with_bus(&cfg).inspect_err(|e| report_failure(e, dir))?;
    let report = write_outputs(&out, Some(&bus), dir, args.common.plot)?;
    writeln!(
        stdout,
        "{} ({} steps, seed {})",
        out.name, out.total_steps, cfg.sim.seed
    )?;
    write!(stdout, "{}", report.render_table())?;
    writeln!(stdout, "outputs in {}", dir.display())?;
    Ok(())
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub algorithm: MergeAlgorithm,
    pub tcm: Option<f64>,
    pub min_time_gap: Option<f64>,
    pub joiner_accel_std: Option<f64>,
}

pub fn compare(
    cfg: &ScenarioConfig,
    algorithms: &[MergeAlgorithm],
) -> Result<Vec<(ComparisonRow, RunOutput, MessageBus)>> {
    if algorithms.len() < 2 {
        return Err(Error::Config(
            "compare needs at least two algorithms".into(),
        ));
    }
    // each run owns its state, so they go in parallel
    let results: Vec<Result<(RunOutput, MessageBus)>> = std::thread::scope(|s| {
        let handles: Vec<_> = algorithms
            .iter()
            .map(|&algo| {
                let mut c = cfg.clone();
                c.cavs.iter_mut().for_each(|v| v.merge_algorithm = algo);
                s.spawn(move || run_with_bus(&c))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });
    algorithms
        .iter()
        .zip(results)
        .map(|(&algorithm, res)| {
            let (out, bus) = res?;
            let joiner = out
                .events
                .first(EventKind::JoinApproved, None)
                .and_then(|e| e.vehicle);
            let report = evaluate(&out.traces, &out.events, out.dt);
            let row = ComparisonRow {
                algorithm,
                tcm: time_to_complete_maneuver(&out.events, joiner, out.dt),
                min_time_gap: min_time_gap_during_join(&out.traces, &out.events),
                joiner_accel_std: joiner
                    .and_then(|id| report.row(id))
                    .and_then(|r| r.maneuver_accel_std),
            };
            Ok((row, out, bus))
        })
        .collect()
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.digits$}"))
}

pub fn cmd_compare(args: &CompareArgs, stdout: &mut dyn Write) -> Result<()> {
    let seed = match args.seed.as_slice() {
        [] => None,
        [first, rest @ ..] => {
            if rest.iter().any(|s| s != first) {
                return Err(Error::Config("compare runs must share one seed".into()));
            }
            Some(*first)
        }
    };
    if args.algorithms.len() < 2 {
        return Err(Error::Config(
            "compare needs at least two algorithms".into(),
        ));
    }
    let cfg = resolve_config(&args.common, seed)?;
    let dir = &args.common.out_dir;
    let rows = compare(&cfg, &args.algorithms).inspect_err(|e| report_failure(e, dir))?;

    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record([
        "algorithm",
        "tcm",
        "min_time_gap",
        "joiner_maneuver_acc_std",
    ])?;
    writeln!(stdout, "{} (seed {})", cfg.name, cfg.sim.seed)?;
    writeln!(
        stdout,
        "{:>10} {:>8} {:>13} {:>9}",
        "algorithm", "tcm", "min_time_gap", "man_acc"
    )?;
    for (row, out, bus) in &rows {
        write_outputs(
            out,
            Some(bus),
            &dir.join(row.algorithm.as_str()),
            args.common.plot,
        )?;
        writeln!(
            stdout,
            "{:>10} {:>8} {:>13} {:>9}",
            row.algorithm.as_str(),
            opt(row.tcm, 2),
            opt(row.min_time_gap, 3),
            opt(row.joiner_accel_std, 3)
        )?;
        let na = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        table.write_record([
            row.algorithm.as_str().to_string(),
            na(row.tcm),
            na(row.min_time_gap),
            na(row.joiner_accel_std),
        ])?;
    }
    let bytes = table.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    fs::write(dir.join("compare.csv"), bytes)?;
    writeln!(stdout, "outputs in {}", dir.display())?;
    Ok(())
}

/// (name, description) of builtins followed by the YAML scenarios in `dir`, sorted by file name.
pub fn catalog(dir: Option<&Path>) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = CATALOG
        .iter()
        .map(|(n, d)| (n.to_string(), d.to_string()))
        .collect();
    if let Some(dir) = dir {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| {
                Error::Io(std::io::Error::new(
                    e.kind(),
                    format!("{}: {e}", dir.display()),
                ))
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "yaml" || x == "yml"))
            .collect();
        files.sort();
        for f in files {
            let cfg = load_config_file(&f)?;
            let stem = f
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let name = if cfg.name.is_empty() { stem } else { cfg.name };
            out.push((name, cfg.description));
        }
    }
    Ok(out)
}

pub fn cmd_list(args: &ListArgs, stdout: &mut dyn Write) -> Result<()> {
    for (name, desc) in catalog(args.config_dir.as_deref())? {
        if args.names_only {
            writeln!(stdout, "{name}")?;
        } else {
            writeln!(stdout, "{name:<14} {desc}")?;
        }
    }
    Ok(())
}

/// Runs the parsed command; returns the process exit code.
pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> i32 {
    let res = match &cli.command {
        Command::Run(a) => cmd_run(a, stdout),
        Command::Compare(a) => cmd_compare(a, stdout),
        Command::List(a) => cmd_list(a, stdout),
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("platoonsim").chain(args.iter().copied()))
    }

    #[test]
    fn scenario_source_is_exclusive() {
        assert!(parse(&["run"]).is_err());
        assert!(parse(&["run", "--scenario", "cycle1", "--config", "x.yaml"]).is_err());
        assert!(parse(&["run", "--scenario", "cycle1"]).is_ok());
    }

    #[test]
    fn merge_algo_parses() {
        let Cli {
            command: Command::Run(r),
        } = parse(&["run", "--scenario", "merge_join", "--merge-algo", "fuzzy"]).unwrap()
        else {
            panic!()
        };
        assert_eq!(r.merge_algo, Some(MergeAlgorithm::Fuzzy));
        assert!(parse(&["run", "--scenario", "merge_join", "--merge-algo", "best"]).is_err());
    }

    #[test]
    fn overrides_apply() {
        let Cli {
            command: Command::Run(r),
        } = parse(&[
            "run",
            "--scenario",
            "cycle1",
            "--seed",
            "7",
            "--steps",
            "10",
            "--channel-drop",
            "0.25",
        ])
        .unwrap()
        else {
            panic!()
        };
        let cfg = resolve_config(&r.common, r.seed).unwrap();
        assert_eq!(
            (cfg.sim.seed, cfg.channel.seed, cfg.sim.total_steps),
            (7, 7, 10)
        );
        assert_eq!(cfg.channel.drop_probability, 0.25);
    }

    #[test]
    fn drop_probability_is_bounded() {
        let Cli {
            command: Command::Run(r),
        } = parse(&["run", "--scenario", "cycle1", "--channel-drop", "1.5"]).unwrap()
        else {
            panic!()
        };
        assert!(resolve_config(&r.common, None).is_err());
    }

    #[test]
    fn list_variants() {
        let mut buf = Vec::new();
        cmd_list(
            &ListArgs {
                config_dir: None,
                names_only: true,
            },
            &mut buf,
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "cycle1\ncycle2\nmerge_join\n"
        );
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("mine.yaml"), "description: custom\n").unwrap();
        let cat = catalog(Some(dir.path())).unwrap();
        assert_eq!(cat.len(), 4);
        assert_eq!(cat[3], ("mine".to_string(), "custom".to_string()));
    }

    #[test]
    fn compare_rejects_bad_inputs() {
        let Cli {
            command: Command::Compare(c),
        } = parse(&[
            "compare",
            "--scenario",
            "merge_join",
            "--merge-algo",
            "fuzzy",
        ])
        .unwrap()
        else {
            panic!()
        };
        assert!(cmd_compare(&c, &mut Vec::new()).is_err());
        let Cli {
            command: Command::Compare(c),
        } = parse(&[
            "compare",
            "--scenario",
            "merge_join",
            "--seed",
            "1",
            "--seed",
            "2",
        ])
        .unwrap()
        else {
            panic!()
        };
        let err = cmd_compare(&c, &mut Vec::new()).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }
}
