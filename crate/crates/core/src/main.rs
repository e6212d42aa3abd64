use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use splitmachine::harness::{self, Bounds, Counterexample, ExploreReport, ReplayOutcome};
use splitmachine::mailbox::{Mutant, Tick};
use splitmachine::manifest::MachineManifest;
use splitmachine::platform::Faults;
use splitmachine::scenarios::{self, RunOptions, ScenarioRun, ScenarioSpec, DEFAULT_MAX_TICKS};
use splitmachine::tcb::tcb_report;
use splitmachine::trace::{read_jsonl, write_jsonl};

#[derive(Parser)]
#[command(name = "splitmachine", version, about = "Split-trust machine emulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Machine manifest (JSON) replacing the built-in one.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Write the execution trace as JSON lines.
    #[arg(long, global = true)]
    trace_out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = DEFAULT_MAX_TICKS)]
    max_ticks: Tick,
    /// Seed for nonces and randomized inputs.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Fault to inject, `name` or `name:arg`. Repeatable.
    #[arg(long, global = true)]
    inject: Vec<String>,
    /// Print the result as JSON.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Power on and boot, then print the launch order and measurements.
    Boot,
    /// Run a built-in scenario or a scenario file.
    Run { scenario: String },
    /// Exhaustively check the mailbox, reset guard and arbiter.
    Check {
        /// `small`, `default`, or a JSON bounds file.
        #[arg(long, default_value = "default")]
        bounds: String,
        /// Skip the mutant suite.
        #[arg(long)]
        no_mutants: bool,
        /// Write counterexamples here as JSON.
        #[arg(long)]
        cex_dir: Option<PathBuf>,
        /// Replay a counterexample file instead of exploring.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Derive the trusted computing base from a trace. Without --manifest
    /// the built-in machine matching the trace is assumed.
    Tcb { trace: PathBuf },
}

fn usage(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn verdict(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn load_manifest(path: &Path) -> Result<MachineManifest, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let m: MachineManifest = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    m.validate().map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(m)
}

fn options(c: &Common) -> Result<RunOptions, String> {
    let mut faults = Faults::default();
    for f in &c.inject {
        faults.apply(f)?;
    }
    let manifest = c.manifest.as_deref().map(load_manifest).transpose()?;
    Ok(RunOptions { manifest, faults, max_ticks: c.max_ticks, seed: c.seed })
}

fn write_trace(c: &Common, run: &ScenarioRun) -> Result<(), String> {
    if let Some(p) = &c.trace_out {
        let f = File::create(p).map_err(|e| format!("{}: {e}", p.display()))?;
        write_jsonl(&run.trace, BufWriter::new(f)).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    Ok(())
}

fn print_run(run: &ScenarioRun, json: bool) {
    let r = &run.result;
    if json {
        println!("{}", serde_json::to_string_pretty(r).expect("result serializes"));
        return;
    }
    println!("scenario {}: {}", r.name, if r.passed { "PASS" } else { "FAIL" });
    for c in &r.checks {
        let mark = if c.passed { "ok  " } else { "FAIL" };
        if c.detail.is_empty() {
            println!("  {mark} {}", c.name);
        } else {
            println!("  {mark} {} ({})", c.name, c.detail);
        }
    }
    for a in &r.attacks {
        let mark = if a.blocked { "blocked" } else { "SUCCEEDED" };
        println!("  attack [{}] {}: {mark} ({})", a.category, a.attempt, a.detail);
    }
    for (k, v) in &r.phases {
        println!("  phase {k}: {v} ticks");
    }
    for (k, v) in &r.metrics {
        println!("  {k}: {v}");
    }
    if let Some(t) = &r.tcb {
        println!("  tcb: {t}");
    }
    if let Some(f) = &r.first_failure {
        println!("  first failure: {} at trace event {}", f.name, f.trace_offset);
    }
}

fn run_scenario(c: &Common, spec: &ScenarioSpec) -> ExitCode {
    let opts = match options(c) {
        Ok(o) => o,
        Err(e) => return usage(e),
    };
    let run = scenarios::run(spec, &opts);
    if let Err(e) = write_trace(c, &run) {
        return usage(e);
    }
    print_run(&run, c.json);
    verdict(run.result.passed)
}

fn bounds_arg(s: &str) -> Result<Bounds, String> {
    if let Some(b) = Bounds::preset(s) {
        return Ok(b);
    }
    let text = std::fs::read_to_string(s).map_err(|_| format!("unknown bounds {s:?}; use small, default or a JSON file"))?;
    serde_json::from_str(&text).map_err(|e| format!("{s}: {e}"))
}

fn save_cex(dir: &Path, label: &str, report: &ExploreReport) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    for (i, c) in report.violations.iter().enumerate() {
        let p = dir.join(format!("{label}-{i:02}-{}.json", c.property.name()));
        std::fs::write(&p, c.to_json()).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    Ok(())
}

fn check(c: &Common, bounds: &str, no_mutants: bool, cex_dir: Option<&Path>, replay: Option<&Path>) -> ExitCode {
    if let Some(p) = replay {
        let cex = match std::fs::read_to_string(p).map_err(|e| e.to_string()).and_then(|t| Counterexample::from_json(&t).map_err(|e| e.to_string())) {
            Ok(x) => x,
            Err(e) => return usage(format!("{}: {e}", p.display())),
        };
        let out = harness::replay(&cex);
        println!("replay of {} ({} actions): {:?}", cex.property, cex.len(), out);
        return verdict(out == ReplayOutcome::Confirmed);
    }
    let bounds = match bounds_arg(bounds) {
        Ok(b) => b,
        Err(e) => return usage(e),
    };
    let start = Instant::now();
    let shipped = match harness::explore(&bounds) {
        Ok(r) => r,
        Err(e) => return usage(e),
    };
    let mut ok = shipped.violations.is_empty();
    let mut reports = vec![("shipped".to_string(), shipped)];
    if !no_mutants {
        for m in Mutant::ALL {
            match harness::explore_mutant(&bounds, Some(m)) {
                Ok(r) => {
                    let caught = r.shortest().is_some_and(|x| harness::replay(x) == ReplayOutcome::Confirmed && x.len() <= 8);
                    ok &= caught;
                    reports.push((format!("{m:?}"), r));
                }
                Err(e) => return usage(e),
            }
        }
    }
    let elapsed = start.elapsed();
    if let Some(dir) = cex_dir {
        for (label, r) in &reports {
            if let Err(e) = save_cex(dir, label, r) {
                return usage(e);
            }
        }
    }
    if c.json {
        let all: Vec<&ExploreReport> = reports.iter().map(|(_, r)| r).collect();
        println!("{}", serde_json::to_string_pretty(&all).expect("report serializes"));
        return verdict(ok);
    }
    let (_, s) = &reports[0];
    println!(
        "shipped: {} states, {} transitions, {} properties, {} violations",
        s.states_explored,
        s.transitions,
        s.properties.len(),
        s.violations.len()
    );
    for v in &s.violations {
        println!("  VIOLATION {}: {} after {:?}", v.property, v.detail, v.actions.iter().map(|a| a.to_string()).collect::<Vec<_>>());
    }
    for (label, r) in reports.iter().skip(1) {
        match r.shortest() {
            Some(x) => println!(
                "mutant {label}: caught, {} properties violated, shortest {} in {} actions, replay {:?}",
                r.violated().len(),
                x.property,
                x.len(),
                harness::replay(x)
            ),
            None => println!("mutant {label}: NOT caught"),
        }
    }
    println!("elapsed {:.2}s", elapsed.as_secs_f64());
    verdict(ok)
}

fn tcb(c: &Common, path: &Path) -> ExitCode {
    let trace = match File::open(path).and_then(|f| read_jsonl(BufReader::new(f))) {
        Ok(t) => t,
        Err(e) => return usage(format!("{}: {e}", path.display())),
    };
    let manifest = match c.manifest.as_deref().map(load_manifest).transpose() {
        Ok(m) => m.unwrap_or_else(|| {
            let medical = trace.iter().any(|e| e.domain.is_some_and(|d| d.0 >= 8));
            if medical {
                MachineManifest::with_medical_devices()
            } else {
                MachineManifest::default_machine()
            }
        }),
        Err(e) => return usage(e),
    };
    let report = tcb_report(&trace, &manifest);
    if c.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        println!("{report}");
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = &cli.common;
    match &cli.cmd {
        Cmd::Boot => run_scenario(c, &ScenarioSpec::builtin("boot").expect("built-in")),
        Cmd::Run { scenario } => match scenarios::load(scenario) {
            Ok(spec) => run_scenario(c, &spec),
            Err(e) => usage(e),
        },
        Cmd::Check { bounds, no_mutants, cex_dir, replay } => check(c, bounds, *no_mutants, cex_dir.as_deref(), replay.as_deref()),
        Cmd::Tcb { trace } => tcb(c, trace),
    }
}
