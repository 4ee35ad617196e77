//! `dart`: run DartScript programs with state capture, list and restore
//! versions, replay, diff, replicate and benchmark.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dart_bench::{run_bench, sweep_volatility, BenchConfig, Workload};
use dart_core::capture::{CaptureConfig, FaultPlan, Trigger};
use dart_core::recovery::{
    diff_versions, globals_json, materialize, replay_to_statement, resume, run_captured,
    value_to_json, RunOptions, RunReport,
};
use dart_core::store::{import_pack, FsyncPolicy, RecordKind, StoreOptions, StoreReader};
use dart_core::vm::RunOutcome;
use dart_core::{parse, RecoveryError, StoreError, StrategyChoice, Vm};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_LOCKED: u8 = 3;

#[derive(Parser)]
#[command(name = "dart", version, about = "Durable, versioned state capture for DartScript programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a program with capture into a store.
    Run {
        program: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        capture: CaptureArgs,
    },
    /// List persisted versions.
    Log {
        store: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Restore a version: summarize it, print a root, or resume the program.
    Restore {
        store: PathBuf,
        /// Defaults to the latest persisted version.
        #[arg(long)]
        version: Option<u64>,
        #[arg(long, conflicts_with_all = ["inspect", "json"])]
        resume: bool,
        /// Print the named global as JSON.
        #[arg(long)]
        inspect: Option<String>,
        /// Print all globals as JSON.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        capture: CaptureArgs,
    },
    /// Reconstruct the state after a given statement.
    Replay {
        store: PathBuf,
        #[arg(long)]
        statement: u64,
        #[arg(long)]
        inspect: Option<String>,
    },
    /// Changes between two versions.
    Diff {
        store: PathBuf,
        v1: u64,
        v2: u64,
        #[arg(long)]
        json: bool,
    },
    /// Write a self-contained pack of a version range.
    Export {
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        from: Option<u64>,
        #[arg(long)]
        to: Option<u64>,
    },
    /// Create a store from a pack.
    Import {
        pack: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
    /// Measure capture overhead and storage on a synthetic workload.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct CaptureArgs {
    #[arg(long, conflicts_with = "every_millis")]
    every_statements: Option<u64>,
    #[arg(long)]
    every_millis: Option<u64>,
    #[arg(long, default_value = "idgraph")]
    strategy: StrategyChoice,
    /// Capture-time budget as a fraction of run time, in (0, 1].
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// `always`, `batch` or `batch:N`.
    #[arg(long, default_value = "always")]
    fsync: String,
    /// `serialize:P`, `store:P` or `kill:N` (stop as if killed after
    /// statement N). Repeatable.
    #[arg(long = "inject-fault")]
    faults: Vec<String>,
    /// Write per-snapshot statistics as JSON lines.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// static_plus_model, shuffle, volatility, deep_update or sweep.
    workload: String,
    #[arg(long)]
    iters: Option<u64>,
    /// Dataset size (static_plus_model).
    #[arg(long)]
    dataset_bytes: Option<u64>,
    /// Model size (static_plus_model, deep_update).
    #[arg(long)]
    model_bytes: Option<u64>,
    /// Item or object count (shuffle, volatility, sweep).
    #[arg(long)]
    count: Option<u64>,
    /// Item or object size (shuffle, volatility, sweep).
    #[arg(long)]
    item_bytes: Option<u64>,
    /// Replaced fraction per iteration (volatility).
    #[arg(long)]
    p: Option<f64>,
    #[arg(long, default_value = "auto")]
    strategy: StrategyChoice,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Write the per-snapshot CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write a gnuplot-style `version bytes` series here.
    #[arg(long)]
    series: Option<PathBuf>,
}

struct Parsed {
    options: RunOptions,
    stats: Option<PathBuf>,
}

/// Marks errors that are the caller's fault.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

impl CaptureArgs {
    fn parse(&self, seed: u64) -> Result<Parsed> {
        let mut capture = CaptureConfig {
            strategy: self.strategy,
            overhead_budget: self.budget,
            record_fingerprints: false,
            ..CaptureConfig::default()
        };
        if let Some(k) = self.every_statements {
            capture.trigger = Trigger::EveryStatements(k);
        }
        if let Some(t) = self.every_millis {
            capture.trigger = Trigger::EveryMillis(t);
        }
        if let Some(n) = self.checkpoint_every {
            capture.checkpoint_every = n;
        }
        let fsync = match self.fsync.as_str() {
            "always" => FsyncPolicy::Always,
            "batch" => FsyncPolicy::Batch(16),
            other => match other.strip_prefix("batch:").map(str::parse) {
                Some(Ok(n)) if n > 0 => FsyncPolicy::Batch(n),
                _ => return Err(usage(format!("bad --fsync `{other}` (always, batch, batch:N)"))),
            },
        };
        let mut kill = None;
        let mut faults = FaultPlan {
            seed,
            ..FaultPlan::default()
        };
        for f in &self.faults {
            let (what, arg) = f
                .split_once(':')
                .ok_or_else(|| usage(format!("bad --inject-fault `{f}`")))?;
            let prob = || -> Result<f64> {
                arg.parse::<f64>()
                    .ok()
                    .filter(|p| (0.0..=1.0).contains(p))
                    .ok_or_else(|| usage(format!("bad fault probability `{arg}`")))
            };
            match what {
                "serialize" => faults.serialize = prob()?,
                "store" => faults.store = prob()?,
                "kill" => {
                    kill = Some(arg.parse().map_err(|_| usage(format!("bad kill statement `{arg}`")))?)
                }
                _ => return Err(usage(format!("unknown fault kind `{what}` (serialize, store, kill)"))),
            }
        }
        capture.faults = faults;
        capture.validate().map_err(|e| usage(e.to_string()))?;
        Ok(Parsed {
            options: RunOptions {
                seed,
                capture,
                store: StoreOptions {
                    fsync,
                    ..StoreOptions::default()
                },
                kill_after_statement: kill,
            },
            stats: self.stats.clone(),
        })
    }
}

/// `println!` that reports a closed pipe as an error instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout(), $($arg)*)?
    };
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| matches!(c.downcast_ref::<std::io::Error>(), Some(io) if io.kind() == std::io::ErrorKind::BrokenPipe))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() || cause.is::<dart_core::vm::SyntaxError>() {
            return EXIT_USAGE;
        }
        let store = cause
            .downcast_ref::<StoreError>()
            .or_else(|| match cause.downcast_ref::<RecoveryError>() {
                Some(RecoveryError::Store(s)) => Some(s),
                _ => None,
            });
        if let Some(StoreError::Locked(_)) = store {
            return EXIT_LOCKED;
        }
        if let Some(RecoveryError::Syntax(_)) = cause.downcast_ref::<RecoveryError>() {
            return EXIT_USAGE;
        }
    }
    EXIT_FAILURE
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run {
            program,
            store,
            seed,
            capture,
        } => {
            let source = fs::read_to_string(&program)
                .map_err(|e| usage(format!("cannot read {}: {e}", program.display())))?;
            let parsed = capture.parse(seed)?;
            let report = run_captured(&store, &source, &parsed.options)?;
            finish_run(&store, report, &parsed)
        }
        Command::Log { store, json } => {
            log(&store, json)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Restore {
            store,
            version,
            resume: resume_run,
            inspect,
            json,
            capture,
        } => {
            let reader = StoreReader::open(&store)?;
            let version = match version {
                Some(v) => v,
                None => reader.latest_snapshot().map(|e| e.version).ok_or(StoreError::NoCheckpoint)?,
            };
            let source = reader.program()?.source;
            if resume_run {
                drop(reader);
                let parsed = capture.parse(0)?;
                let report = resume(&store, Some(version), &source, &parsed.options)?;
                return finish_run(&store, report, &parsed);
            }
            let state = materialize(&reader, version)?;
            let (vm, _) = state.to_vm(Arc::new(parse(&source)?))?;
            if let Some(name) = inspect {
                print_global(&vm, &name)?;
            } else if json {
                out!("{}", serde_json::to_string_pretty(&globals_json(&vm))?);
            } else {
                out!("version {version}");
                out!("statement {}", vm.statement_index());
                out!("frames {}", vm.frames().len());
                let names: Vec<&str> = vm.frames()[0].bindings.keys().map(String::as_str).collect();
                out!("globals {}", names.join(" "));
                out!("objects {}", vm.heap().len());
                out!("fingerprint {}", vm.fingerprint());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay {
            store,
            statement,
            inspect,
        } => {
            let reader = StoreReader::open(&store)?;
            let source = reader.program()?.source;
            let vm = replay_to_statement(&reader, &source, statement)?;
            match inspect {
                Some(name) => print_global(&vm, &name)?,
                None => print_result(&vm)?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Diff { store, v1, v2, json } => {
            let reader = StoreReader::open(&store)?;
            let report = diff_versions(&reader, v1, v2)?;
            if json {
                out!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                write!(std::io::stdout(), "{}", report.to_text())?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Export { store, out, from, to } => {
            let reader = StoreReader::open(&store)?;
            let versions = reader.versions();
            let lo = from.unwrap_or(1);
            let hi = to.or(versions.last().copied()).unwrap_or(0);
            let mut buf = Vec::new();
            let n = reader.export_pack(lo, hi, &mut buf)?;
            fs::write(&out, &buf).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("exported versions {lo}..={hi} ({n} bytes) to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Import { pack, store } => {
            let bytes = fs::read(&pack).map_err(|e| usage(format!("cannot read {}: {e}", pack.display())))?;
            let manifest = import_pack(&bytes, &store)?;
            eprintln!(
                "imported {} records into {}",
                manifest.entries.len(),
                store.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench(args) => bench(args),
    }
}

fn finish_run(store: &Path, report: RunReport, parsed: &Parsed) -> Result<ExitCode> {
    if let Some(path) = &parsed.stats {
        fs::write(path, report.stats.to_json_lines())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let versions = StoreReader::open(store)
        .map(|r| r.manifest().snapshot_entries().count())
        .unwrap_or(0);
    let skipped = report.stats.skipped;
    match report.outcome {
        Ok(RunOutcome::Completed) => {
            print_result(&report.vm)?;
            eprintln!("{versions} versions persisted, {skipped} snapshots skipped");
            Ok(ExitCode::SUCCESS)
        }
        Ok(RunOutcome::Stopped) => {
            eprintln!(
                "killed after statement {}; {versions} versions persisted",
                report.vm.statement_index()
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("runtime error: {e}");
            eprintln!("{versions} versions persisted, {skipped} snapshots skipped");
            Ok(ExitCode::from(EXIT_FAILURE))
        }
    }
}

/// Program output: the final globals, then the state fingerprint.
fn print_result(vm: &Vm) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string(&globals_json(vm))?)?;
    writeln!(out, "fingerprint {}", vm.fingerprint())?;
    Ok(())
}

fn print_global(vm: &Vm, name: &str) -> Result<()> {
    let v = vm
        .global(name)
        .ok_or_else(|| usage(format!("no global named `{name}`")))?;
    out!("{}", serde_json::to_string_pretty(&value_to_json(vm.heap(), v))?);
    Ok(())
}

fn log(store: &Path, json: bool) -> Result<()> {
    let reader = StoreReader::open(store)?;
    let rows = reader
        .manifest()
        .entries
        .iter()
        .filter(|e| matches!(e.kind, RecordKind::Delta | RecordKind::Checkpoint));
    if json {
        for e in rows {
            out!("{}", serde_json::to_string(e)?);
        }
        return Ok(());
    }
    out!("{:>8} {:>10} {:<10} {:>10} {:>6} strategy", "version", "statement", "kind", "bytes", "base");
    for e in rows {
        let base = e.base_version.map_or("-".to_string(), |b| b.to_string());
        let strategy = e.strategy.map_or("-".to_string(), |s| format!("{s:?}").to_lowercase());
        out!(
            "{:>8} {:>10} {:<10} {:>10} {:>6} {strategy}",
            e.version,
            e.statement_index,
            e.kind.name(),
            e.byte_size,
            base
        );
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<ExitCode> {
    let [spm, shuffle, vol, deep] = Workload::defaults();
    let cfg = BenchConfig {
        strategy: args.strategy,
        repetitions: args.repetitions.max(1),
        seed: args.seed,
        ..BenchConfig::default()
    };
    let workload = match args.workload.as_str() {
        "static_plus_model" => match spm {
            Workload::StaticPlusModel {
                dataset_bytes,
                model_bytes,
                iters,
            } => Workload::StaticPlusModel {
                dataset_bytes: args.dataset_bytes.unwrap_or(dataset_bytes),
                model_bytes: args.model_bytes.unwrap_or(model_bytes),
                iters: args.iters.unwrap_or(iters),
            },
            _ => unreachable!(),
        },
        "shuffle" => match shuffle {
            Workload::Shuffle {
                items,
                item_bytes,
                iters,
            } => Workload::Shuffle {
                items: args.count.unwrap_or(items),
                item_bytes: args.item_bytes.unwrap_or(item_bytes),
                iters: args.iters.unwrap_or(iters),
            },
            _ => unreachable!(),
        },
        "volatility" => match vol {
            Workload::Volatility {
                objects,
                object_bytes,
                p,
                iters,
            } => Workload::Volatility {
                objects: args.count.unwrap_or(objects),
                object_bytes: args.item_bytes.unwrap_or(object_bytes),
                p: args.p.unwrap_or(p),
                iters: args.iters.unwrap_or(iters),
            },
            _ => unreachable!(),
        },
        "deep_update" => match deep {
            Workload::DeepUpdate { model_bytes, iters } => Workload::DeepUpdate {
                model_bytes: args.model_bytes.unwrap_or(model_bytes),
                iters: args.iters.unwrap_or(iters),
            },
            _ => unreachable!(),
        },
        "sweep" => {
            let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
            let report = sweep_volatility(
                &grid,
                args.count.unwrap_or(64),
                args.item_bytes.unwrap_or(4096),
                args.iters.unwrap_or(10),
                args.seed,
            )?;
            if let Some(path) = &args.csv {
                fs::write(path, report.to_csv()?)?;
            }
            out!("{}", serde_json::to_string_pretty(&report)?);
            return Ok(ExitCode::SUCCESS);
        }
        other => {
            return Err(usage(format!(
                "unknown workload `{other}` (static_plus_model, shuffle, volatility, deep_update, sweep)"
            )))
        }
    };
    let report = run_bench(&workload, &cfg)?;
    if let Some(path) = &args.csv {
        fs::write(path, report.to_csv()?)?;
    }
    if let Some(path) = &args.series {
        fs::write(path, report.series_text())?;
    }
    out!("{}", report.to_json());
    if !report.failures.is_empty() {
        bail!("bench checks failed: {}", report.failures.join("; "));
    }
    Ok(ExitCode::SUCCESS)
}
