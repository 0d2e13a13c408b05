//! The `mastest` command line: run episodes, evolve controllers, execute
//! test plans and print merged timelines from tap files.
//!
//! Exit codes: 0 success or all tests passed, 1 a test failed, 2 usage,
//! config or I/O error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mastest_core::log_model::{BindingPattern, LogClock, LogEvent};
use mastest_core::neuroevolution::{
    demo_genome, evaluate_genome, run_observer, FitnessReport, GaConfig, Genome, NetworkTopology,
    ObserverOptions, DEFAULT_ENERGY_TARGET,
};
use mastest_core::streetlight_world::{FaultSpec, Telemetry, World, WorldConfig};
use mastest_core::topic_broker::{matches, Broker};
use mastest_core::trace_testkit::{
    load_test_plan, merge_timeline, parse_test_plan, render_timeline, TestCase, TestSession,
    TestVerdict, WaitMode, DEFAULT_PLAN, DEFAULT_WALL_TICK,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_TEST_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Simulated microseconds per tick used by test-mode timeouts.
const MICROS_PER_TICK: u64 = mastest_core::streetlight_world::TICK_MICROS;

#[derive(Debug, Parser)]
#[command(
    name = "mastest",
    version,
    about = "Log-driven testing of a self-organizing streetlight MAS"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one logged episode and print its metrics.
    Simulate(SimulateArgs),
    /// Evolve a controller genome.
    Evolve(EvolveArgs),
    /// Run a test plan against a logged episode.
    Test(TestArgs),
    /// Print tapped events matching a binding pattern, ordered by timestamp.
    Timeline(TimelineArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// World config (key=value). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Genome file. The shipped demo genome when omitted.
    #[arg(long)]
    pub genome: Option<PathBuf>,
    /// Fault to inject, `<kind>:<lightId>[,<lightId>...]`. Repeatable.
    #[arg(long = "fault")]
    pub faults: Vec<String>,
    /// Append every published event to this file.
    #[arg(long)]
    pub tap: Option<PathBuf>,
    /// Overrides the world rngSeed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the run manifest here.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvolveArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// GA config (key=value). Defaults apply when omitted.
    #[arg(long = "ga-config")]
    pub ga_config: Option<PathBuf>,
    /// Where to write the best genome.
    #[arg(long, default_value = "evolved.genome")]
    pub out: PathBuf,
    /// Per-generation history file. Defaults to `<out>.history`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub tap: Option<PathBuf>,
    /// Overrides the GA rngSeed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluate one genome at a time instead of using the thread pool.
    #[arg(long)]
    pub serial: bool,
    /// Publish world events of every evolution episode (serial mode only).
    #[arg(long)]
    pub log_episodes: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    /// Test plan. The shipped plan when omitted.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub genome: Option<PathBuf>,
    #[arg(long = "fault")]
    pub faults: Vec<String>,
    #[arg(long)]
    pub tap: Option<PathBuf>,
    /// Overrides the world rngSeed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Measure state timeouts in real time instead of simulation ticks.
    #[arg(long)]
    pub wallclock: bool,
    /// Print the full report of passing tests too.
    #[arg(long)]
    pub verbose: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TimelineArgs {
    /// Tap file written by another command.
    #[arg(long)]
    pub tap: PathBuf,
    /// Binding pattern selecting the events to show.
    #[arg(long, default_value = "#")]
    pub pattern: String,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

/// One per run, printed to stderr as a single JSON line.
#[derive(Debug, Default, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub configs: BTreeMap<String, BTreeMap<String, String>>,
    pub seed: Option<u64>,
    pub faults: Vec<String>,
    pub verdicts: Vec<String>,
    pub outputs: Vec<String>,
    pub exit_code: i32,
    pub error: Option<String>,
    pub wall_clock_unix_ms: u128,
}

/// Anything that ends a command with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl<E: std::fmt::Display> From<E> for UsageError {
    fn from(err: E) -> Self {
        UsageError(err.to_string())
    }
}

type CmdResult = Result<i32, UsageError>;

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let mut manifest = RunManifest {
        wall_clock_unix_ms: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis()),
        ..RunManifest::default()
    };
    let (result, manifest_path) = match &cli.command {
        Command::Simulate(a) => (simulate(a, &mut manifest, out), a.manifest.clone()),
        Command::Evolve(a) => (evolve(a, &mut manifest, out), a.manifest.clone()),
        Command::Test(a) => (test(a, &mut manifest, out), a.manifest.clone()),
        Command::Timeline(a) => (timeline(a, &mut manifest, out), a.manifest.clone()),
    };
    let code = match result {
        Ok(code) => code,
        Err(UsageError(message)) => {
            let _ = writeln!(err, "error: {message}");
            manifest.error = Some(message);
            EXIT_USAGE
        }
    };
    manifest.exit_code = code;
    let json = serde_json::to_string(&manifest).unwrap_or_default();
    let _ = writeln!(err, "manifest {json}");
    if let Some(path) = manifest_path {
        if let Err(e) = fs::write(&path, format!("{json}\n")) {
            let _ = writeln!(err, "error: cannot write manifest {}: {e}", path.display());
            return EXIT_USAGE;
        }
    }
    code
}

fn kv_map(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn read(path: &Path) -> Result<String, UsageError> {
    fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read {}: {e}", path.display())))
}

fn load_world(path: Option<&Path>, seed: Option<u64>) -> Result<WorldConfig, UsageError> {
    let mut config = match path {
        Some(p) => WorldConfig::from_kv(&read(p)?)?,
        None => WorldConfig::default(),
    };
    if let Some(seed) = seed {
        config.rng_seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn load_ga(path: Option<&Path>, seed: Option<u64>) -> Result<GaConfig, UsageError> {
    let mut config = match path {
        Some(p) => GaConfig::from_kv(&read(p)?)?,
        None => GaConfig::default(),
    };
    if let Some(seed) = seed {
        config.rng_seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn load_genome(path: Option<&Path>) -> Result<(Genome, NetworkTopology), UsageError> {
    match path {
        Some(p) => {
            Genome::from_text(&read(p)?).map_err(|e| UsageError(format!("{}: {e}", p.display())))
        }
        None => Ok(demo_genome()),
    }
}

/// Parses fault specs and checks their targets against the world.
fn load_faults(texts: &[String], world: &WorldConfig) -> Result<Vec<FaultSpec>, UsageError> {
    let faults = texts
        .iter()
        .map(|t| t.parse::<FaultSpec>())
        .collect::<Result<Vec<_>, _>>()?;
    World::new(world, &Telemetry::silent(), &faults)?;
    Ok(faults)
}

fn open_broker(tap: Option<&Path>, manifest: &mut RunManifest) -> Result<Broker, UsageError> {
    match tap {
        Some(path) => {
            manifest.outputs.push(path.display().to_string());
            Ok(Broker::with_tap(path)?)
        }
        None => Ok(Broker::new()),
    }
}

fn telemetry(broker: &Broker) -> Telemetry {
    Telemetry::new(Arc::new(broker.clone()), Arc::new(LogClock::new()))
}

pub fn format_report(report: &FitnessReport) -> String {
    let m = report.metrics;
    format!(
        "pPeople={} pTrip={} pEnergy={}\nfitness={} energyTargetMet={} peopleTargetMet={}\n",
        m.p_people,
        m.p_trip,
        m.p_energy,
        report.fitness,
        report.energy_target_met,
        report.people_target_met
    )
}

fn record_world(manifest: &mut RunManifest, world: &WorldConfig, faults: &[FaultSpec]) {
    manifest
        .configs
        .insert("world".into(), kv_map(&world.to_kv()));
    manifest.faults = faults.iter().map(ToString::to_string).collect();
}

fn record_genome(manifest: &mut RunManifest, path: Option<&Path>) {
    let source = path.map_or_else(|| "builtin-demo".to_string(), |p| p.display().to_string());
    manifest.configs.insert(
        "genome".into(),
        BTreeMap::from([("source".to_string(), source)]),
    );
}

fn simulate(args: &SimulateArgs, manifest: &mut RunManifest, out: &mut dyn Write) -> CmdResult {
    manifest.command = "simulate".into();
    let world = load_world(args.config.as_deref(), args.seed)?;
    manifest.seed = Some(world.rng_seed);
    let (genome, topology) = load_genome(args.genome.as_deref())?;
    record_genome(manifest, args.genome.as_deref());
    let faults = load_faults(&args.faults, &world)?;
    record_world(manifest, &world, &faults);
    let broker = open_broker(args.tap.as_deref(), manifest)?;
    let report = evaluate_genome(
        &world,
        &genome,
        &topology,
        &telemetry(&broker),
        DEFAULT_ENERGY_TARGET,
        &faults,
    )?;
    broker.shutdown()?;
    write!(out, "{}", format_report(&report))?;
    Ok(EXIT_OK)
}

fn evolve(args: &EvolveArgs, manifest: &mut RunManifest, out: &mut dyn Write) -> CmdResult {
    manifest.command = "evolve".into();
    let world = load_world(args.config.as_deref(), None)?;
    let ga = load_ga(args.ga_config.as_deref(), args.seed)?;
    manifest.seed = Some(ga.rng_seed);
    record_world(manifest, &world, &[]);
    manifest.configs.insert("ga".into(), kv_map(&ga.to_kv()));
    let broker = open_broker(args.tap.as_deref(), manifest)?;
    let options = ObserverOptions {
        log_episodes: args.log_episodes,
        parallel: !args.serial,
        faults: Vec::new(),
    };
    let result = run_observer(&world, &ga, &telemetry(&broker), &options)?;
    broker.shutdown()?;

    let history_path = args.history.clone().unwrap_or_else(|| {
        let mut name = args.out.clone().into_os_string();
        name.push(".history");
        PathBuf::from(name)
    });
    result.best.save(&result.topology, &args.out)?;
    fs::write(&history_path, result.history_text())?;
    manifest.outputs.push(args.out.display().to_string());
    manifest.outputs.push(history_path.display().to_string());

    for s in &result.history {
        writeln!(
            out,
            "generation {} best={} mean={}",
            s.generation, s.best, s.mean
        )?;
    }
    write!(out, "{}", format_report(&result.final_report))?;
    writeln!(out, "genome written to {}", args.out.display())?;
    Ok(EXIT_OK)
}

fn load_plan(path: Option<&Path>) -> Result<Vec<TestCase>, UsageError> {
    match path {
        Some(p) => load_test_plan(p).map_err(|e| UsageError(format!("{}: {e}", p.display()))),
        None => Ok(parse_test_plan(DEFAULT_PLAN)?),
    }
}

/// Runs `cases` against one fully logged evaluation of `genome`.
pub fn run_plan(
    cases: &[TestCase],
    world: &WorldConfig,
    genome: &Genome,
    topology: &NetworkTopology,
    faults: &[FaultSpec],
    broker: &Broker,
    wallclock: bool,
) -> Result<(Vec<TestVerdict>, FitnessReport), UsageError> {
    let mode = if wallclock {
        WaitMode::WallClock {
            per_tick: DEFAULT_WALL_TICK,
        }
    } else {
        WaitMode::SimTicks {
            micros_per_tick: MICROS_PER_TICK,
            origin: 0,
        }
    };
    let session = TestSession::start(broker, cases, mode)?;
    let report = evaluate_genome(
        world,
        genome,
        topology,
        &telemetry(broker),
        DEFAULT_ENERGY_TARGET,
        faults,
    );
    broker.shutdown()?;
    let verdicts = session.finish()?;
    Ok((verdicts, report?))
}

fn test(args: &TestArgs, manifest: &mut RunManifest, out: &mut dyn Write) -> CmdResult {
    manifest.command = "test".into();
    let cases = load_plan(args.plan.as_deref())?;
    let source = args
        .plan
        .as_ref()
        .map_or_else(|| "builtin".to_string(), |p| p.display().to_string());
    manifest.configs.insert(
        "plan".into(),
        BTreeMap::from([("source".to_string(), source)]),
    );
    let world = load_world(args.config.as_deref(), args.seed)?;
    manifest.seed = Some(world.rng_seed);
    let (genome, topology) = load_genome(args.genome.as_deref())?;
    record_genome(manifest, args.genome.as_deref());
    let faults = load_faults(&args.faults, &world)?;
    record_world(manifest, &world, &faults);
    let broker = open_broker(args.tap.as_deref(), manifest)?;

    let (verdicts, report) = run_plan(
        &cases,
        &world,
        &genome,
        &topology,
        &faults,
        &broker,
        args.wallclock,
    )?;
    for v in &verdicts {
        if args.verbose || !v.passed() {
            write!(out, "{}", v.report())?;
        }
    }
    for v in &verdicts {
        writeln!(out, "{}", v.summary_line())?;
        manifest.verdicts.push(v.summary_line());
    }
    write!(out, "{}", format_report(&report))?;
    Ok(if verdicts.iter().all(TestVerdict::passed) {
        EXIT_OK
    } else {
        EXIT_TEST_FAILED
    })
}

/// Reads a tap file back into events.
pub fn read_tap(path: &Path) -> Result<Vec<LogEvent>, UsageError> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            LogEvent::from_line(l)
                .map_err(|e| UsageError(format!("{} line {}: {e}", path.display(), n + 1)))
        })
        .collect()
}

fn timeline(args: &TimelineArgs, manifest: &mut RunManifest, out: &mut dyn Write) -> CmdResult {
    manifest.command = "timeline".into();
    let pattern: BindingPattern = args.pattern.parse()?;
    manifest.configs.insert(
        "timeline".into(),
        BTreeMap::from([
            ("tap".to_string(), args.tap.display().to_string()),
            ("pattern".to_string(), pattern.to_string()),
        ]),
    );
    let mut selected = Vec::new();
    for event in read_tap(&args.tap)? {
        if matches(&pattern, &event.routing_key()?) {
            selected.push(event);
        }
    }
    write!(out, "{}", render_timeline(&merge_timeline(selected)))?;
    Ok(EXIT_OK)
}
