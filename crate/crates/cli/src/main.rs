use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use replab::engines::{run, RunResult, Scenario};
use replab::kernel::{read_trace, trace_to_string, TraceEvent};
use replab::metrics::Metrics;
use replab::refinement::{check_chain, explore, parse_chain, path_to_trace, CheckConfig, ExploreBounds, Mapping, Status};

/// Exit status when a run, check or replay finds a problem.
const FAILED: u8 = 1;
/// Exit status for unusable input.
const BAD_INPUT: u8 = 2;
/// Exit status when exploration hit its state cap.
const INCOMPLETE: u8 = 3;

#[derive(Parser)]
#[command(name = "replab", version, about = "Simulate and check Paxos, VSR and Zab")]
struct Cli {
    /// More detail on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write its trace and metrics.
    Run(RunArgs),
    /// Check a trace against a chain of refinement mappings.
    Check(CheckArgs),
    /// Run several scenarios and print their metrics side by side.
    Compare(CompareArgs),
    /// Exhaustively explore a bounded multi-consensus configuration.
    Explore(ExploreArgs),
    /// Re-run a scenario and confirm it reproduces a trace.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (TOML).
    config: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Trace output; defaults to <config stem>.trace.jsonl.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Metrics output; defaults to <config stem>.metrics.json.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    trace: PathBuf,
    /// Scenario the trace was produced from; supplies the topology.
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated mappings; defaults to the full chain for the protocol.
    #[arg(long)]
    chain: Option<String>,
    /// Write one verdict record per line.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Scenario files.
    #[arg(required = true, num_args = 2..)]
    configs: Vec<PathBuf>,
    /// Top-level keys the scenarios may differ in.
    #[arg(long, value_delimiter = ',', default_value = "protocol")]
    axes: Vec<String>,
    /// Override every scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExploreArgs {
    /// Bounds file (TOML).
    bounds: PathBuf,
    /// Write the counterexample or goal path as a trace.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    trace: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Metrics file to compare against the trace.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let verbose = cli.verbose;
    let result = match cli.cmd {
        Cmd::Run(a) => cmd_run(a, verbose),
        Cmd::Check(a) => cmd_check(a, verbose),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::Explore(a) => cmd_explore(a, verbose),
        Cmd::Replay(a) => cmd_replay(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(BAD_INPUT)
        }
    }
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut sc = Scenario::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    sc.validate().with_context(|| format!("in {}", path.display()))?;
    Ok(sc)
}

fn load_trace(path: &Path) -> Result<Vec<TraceEvent>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_trace(BufReader::new(file)).with_context(|| format!("in {}", path.display()))
}

fn sibling(config: &Path, suffix: &str) -> PathBuf {
    let stem = config.file_stem().map_or("scenario".into(), |s| s.to_string_lossy());
    PathBuf::from(format!("{stem}{suffix}"))
}

fn write_json_line<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.2}"))
}

fn cmd_run(a: RunArgs, verbose: u8) -> Result<u8> {
    let sc = load_scenario(&a.config, a.seed)?;
    let r = run(&sc)?;
    let metrics = Metrics::from_trace(&r.trace, sc.n);
    let trace_path = a.trace.unwrap_or_else(|| sibling(&a.config, ".trace.jsonl"));
    let metrics_path = a.metrics.unwrap_or_else(|| sibling(&a.config, ".metrics.json"));
    fs::write(&trace_path, trace_to_string(&r.trace)).with_context(|| format!("writing {}", trace_path.display()))?;
    write_json_line(&metrics_path, &metrics)?;
    summarize(&sc, &r, &metrics);
    if verbose > 0 {
        for (t, c) in &metrics.transitions {
            eprintln!("  {t}: {c}");
        }
    }
    eprintln!("trace: {}  metrics: {}", trace_path.display(), metrics_path.display());
    for v in &r.violations {
        eprintln!("violation: {v}");
    }
    Ok(if r.violations.is_empty() { 0 } else { FAILED })
}

fn summarize(sc: &Scenario, r: &RunResult, m: &Metrics) {
    println!(
        "{} n={} seed={}: {}/{} operations answered, {} decided, {} msgs/cmd, latency {}, {} recoveries, {} violations, ended at {}",
        sc.protocol,
        sc.n,
        sc.seed,
        r.completed,
        r.expected,
        m.commands_decided,
        fmt_opt(m.steady_decision_messages),
        fmt_opt(m.latency_mean),
        m.recoveries,
        r.violations.len(),
        r.end_time
    );
}

fn cmd_check(a: CheckArgs, verbose: u8) -> Result<u8> {
    let sc = load_scenario(&a.config, None)?;
    let trace = load_trace(&a.trace)?;
    let cfg = CheckConfig::for_scenario(&sc);
    let chain = match &a.chain {
        Some(c) => parse_chain(c).map_err(anyhow::Error::msg)?,
        None => Mapping::chain_for(cfg.mode),
    };
    let verdicts = check_chain(&trace, &cfg, &chain)?;
    let mut report = String::new();
    for v in &verdicts {
        report.push_str(&serde_json::to_string(v)?);
        report.push('\n');
        match &v.status {
            Status::Accepted => println!("{}: accepted ({} abstract events, {} stutters)", v.mapping, v.abstract_events, v.stutters),
            Status::NotReached => println!("{}: not reached", v.mapping),
            Status::Rejected { seq, reason, before, after } => {
                println!("{}: rejected at event {seq}: {reason}", v.mapping);
                if verbose > 0 {
                    eprintln!("before: {before}");
                    eprintln!("after: {after}");
                }
            }
        }
    }
    if let Some(path) = &a.report {
        fs::write(path, report).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(if verdicts.iter().all(|v| v.accepted()) { 0 } else { FAILED })
}

/// Scenarios are comparable when their TOML forms agree on every key
/// outside the declared axes.
fn incomparable(a: &Scenario, b: &Scenario, axes: &[String]) -> Result<Vec<String>> {
    let ta: toml::Table = toml::from_str(&a.to_toml())?;
    let tb: toml::Table = toml::from_str(&b.to_toml())?;
    let keys: std::collections::BTreeSet<&String> = ta.keys().chain(tb.keys()).collect();
    Ok(keys
        .into_iter()
        .filter(|k| !axes.contains(k) && ta.get(*k) != tb.get(*k))
        .cloned()
        .collect())
}

fn cmd_compare(a: CompareArgs) -> Result<u8> {
    let scenarios: Vec<Scenario> = a
        .configs
        .iter()
        .map(|p| load_scenario(p, a.seed))
        .collect::<Result<_>>()?;
    for (path, sc) in a.configs.iter().zip(&scenarios).skip(1) {
        let diff = incomparable(&scenarios[0], sc, &a.axes)?;
        if !diff.is_empty() {
            bail!(
                "{} differs from {} outside the declared axes: {}",
                path.display(),
                a.configs[0].display(),
                diff.join(", ")
            );
        }
    }
    let results: Vec<Result<(RunResult, Metrics)>> = std::thread::scope(|s| {
        let handles: Vec<_> = scenarios
            .iter()
            .map(|sc| {
                s.spawn(move || {
                    let r = run(sc)?;
                    let m = Metrics::from_trace(&r.trace, sc.n);
                    Ok((r, m))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scenario thread")).collect()
    });
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "{:<24} {:<6} {:>8} {:>9} {:>8} {:>10} {:>10} {:>10}",
        "scenario", "proto", "decided", "msgs/cmd", "latency", "recoveries", "end", "violations"
    )?;
    let mut failed = false;
    for ((path, sc), res) in a.configs.iter().zip(&scenarios).zip(results) {
        let (r, m) = res?;
        failed |= !r.violations.is_empty();
        let name = path.file_stem().map_or(String::new(), |s| s.to_string_lossy().into_owned());
        writeln!(
            out,
            "{:<24} {:<6} {:>8} {:>9} {:>8} {:>10} {:>10} {:>10}",
            name,
            sc.protocol.to_string(),
            m.commands_decided,
            fmt_opt(m.steady_decision_messages),
            fmt_opt(m.latency_mean),
            m.recoveries,
            r.end_time,
            r.violations.len()
        )?;
    }
    Ok(if failed { FAILED } else { 0 })
}

fn cmd_explore(a: ExploreArgs, verbose: u8) -> Result<u8> {
    let text = fs::read_to_string(&a.bounds).with_context(|| format!("reading {}", a.bounds.display()))?;
    let bounds: ExploreBounds = toml::from_str(&text).with_context(|| format!("in {}", a.bounds.display()))?;
    if bounds.n == 0 || bounds.replicas == 0 {
        bail!("bounds need at least one certifier and one replica");
    }
    let report = explore(&bounds);
    println!(
        "{} states, {} transitions, depth {}, complete {}",
        report.states, report.transitions, report.max_depth, report.complete
    );
    let path = match (&report.violation, &report.goal) {
        (Some(cx), _) => {
            println!("violation of {:?}: {} ({} steps)", cx.property, cx.reason, cx.path.len());
            Some(&cx.path)
        }
        (None, Some(g)) => {
            println!("goal reached in {} steps", g.len());
            Some(g)
        }
        (None, None) => {
            println!("no violation of {:?}", bounds.properties);
            None
        }
    };
    if let (Some(path), Some(out)) = (path, &a.trace) {
        fs::write(out, trace_to_string(&path_to_trace(path))).with_context(|| format!("writing {}", out.display()))?;
    }
    if verbose > 0 {
        for ev in path.into_iter().flatten() {
            eprintln!("  {}", serde_json::to_string(ev)?);
        }
    }
    if let Some(out) = &a.report {
        write_json_line(out, &report)?;
    }
    Ok(if report.violation.is_some() {
        FAILED
    } else if !report.complete {
        INCOMPLETE
    } else {
        0
    })
}

fn cmd_replay(a: ReplayArgs) -> Result<u8> {
    let sc = load_scenario(&a.config, None)?;
    let recorded = fs::read_to_string(&a.trace).with_context(|| format!("reading {}", a.trace.display()))?;
    let events = read_trace(recorded.as_bytes()).with_context(|| format!("in {}", a.trace.display()))?;
    let fresh = trace_to_string(&run(&sc)?.trace);
    let mut ok = true;
    if fresh == recorded {
        println!("trace reproduced: {} events", events.len());
    } else {
        ok = false;
        let line = fresh
            .lines()
            .zip(recorded.lines())
            .position(|(x, y)| x != y)
            .unwrap_or_else(|| fresh.lines().count().min(recorded.lines().count()))
            + 1;
        println!("trace differs from the re-run at line {line}");
    }
    if let Some(path) = &a.metrics {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let stored: Metrics = serde_json::from_str(&text).with_context(|| format!("in {}", path.display()))?;
        if stored == Metrics::from_trace(&events, sc.n) {
            println!("metrics match the trace");
        } else {
            ok = false;
            println!("metrics do not match the trace");
        }
    }
    Ok(if ok { 0 } else { FAILED })
}
