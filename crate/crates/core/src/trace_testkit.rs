//! State-machine test applications driven by consumed log events.
//!
//! A [`TestCase`] lists the log patterns a run must produce, in order. It is
//! compiled into a [`TestMachine`] with one state per fired transition plus an
//! initial `start` state. Each state waits a bounded time for its expected
//! log; when that wait runs out the machine fails in the current state.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::log_model::{BindingPattern, LogEvent, LogModelError, LogType};
use crate::topic_broker::{
    covers, matches_segments, Broker, BrokerError, QueueHandle, RecvError, DEFAULT_QUEUE_CAPACITY,
};

pub const DEFAULT_MAX_WAIT_TICKS: u64 = 500;
/// Wall-clock length of one tick when `--wallclock` timeouts are used;
/// 500 ticks is then 5 s.
pub const DEFAULT_WALL_TICK: Duration = Duration::from_millis(10);
/// Bound by the always-on error monitor queue.
pub const ERROR_MONITOR_PATTERN: &str = "*.*.*.error.#";
pub const START_STATE: &str = "start";
/// The shipped seven-case plan for the streetlight neighbourhood.
pub const DEFAULT_PLAN: &str = include_str!("../plans/default.plan");

#[derive(Debug, Error)]
pub enum TestkitError {
    #[error(transparent)]
    InvalidPattern(#[from] LogModelError),
    #[error("queue {queue:?} cannot receive pattern {pattern}")]
    BindingMismatch { queue: String, pattern: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("transition needs at least one pattern and a positive wait")]
    InvalidTransition,
    #[error("test case {0:?} has no expected logs")]
    EmptyCase(String),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("reading test plan: {0}")]
    Io(#[from] std::io::Error),
    #[error("test machine thread for {0:?} panicked")]
    MachinePanicked(String),
}

pub type Result<T, E = TestkitError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Local,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubLevel {
    Framework,
    Scenario,
    Learning,
    Mas,
}

impl FromStr for Level {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "local" => Ok(Level::Local),
            "global" => Ok(Level::Global),
            _ => Err(format!("unknown level {s:?}")),
        }
    }
}

impl FromStr for SubLevel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "framework" => Ok(SubLevel::Framework),
            "scenario" => Ok(SubLevel::Scenario),
            "learning" => Ok(SubLevel::Learning),
            "mas" => Ok(SubLevel::Mas),
            _ => Err(format!("unknown sublevel {s:?}")),
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Local => "local",
            Level::Global => "global",
        })
    }
}

impl fmt::Display for SubLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubLevel::Framework => "framework",
            SubLevel::Scenario => "scenario",
            SubLevel::Learning => "learning",
            SubLevel::Mas => "mas",
        })
    }
}

/// One expected step: fires when any alternative matches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionSpec {
    alternatives: Vec<BindingPattern>,
    max_wait_ticks: u64,
}

impl TransitionSpec {
    pub fn new(alternatives: Vec<BindingPattern>, max_wait_ticks: u64) -> Result<Self> {
        if alternatives.is_empty() || max_wait_ticks == 0 {
            return Err(TestkitError::InvalidTransition);
        }
        Ok(Self {
            alternatives,
            max_wait_ticks,
        })
    }

    pub fn parse(alternatives: &[&str], max_wait_ticks: u64) -> Result<Self> {
        let parsed = alternatives
            .iter()
            .map(|p| p.parse())
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(parsed, max_wait_ticks)
    }

    pub fn alternatives(&self) -> &[BindingPattern] {
        &self.alternatives
    }

    pub fn max_wait_ticks(&self) -> u64 {
        self.max_wait_ticks
    }

    /// Name of the state this transition leads into: the pinned action
    /// word(s), or the raw pattern when the action slot is a wildcard.
    pub fn label(&self) -> String {
        let names: Vec<String> = self
            .alternatives
            .iter()
            .map(|p| p.action().map_or_else(|| p.to_string(), str::to_string))
            .collect();
        names.join("|")
    }

    pub fn accepts(&self, event: &LogEvent) -> bool {
        match event.routing_key() {
            Ok(key) => {
                let segments: Vec<&str> = key.segments().collect();
                self.alternatives
                    .iter()
                    .any(|p| matches_segments(p.segments(), &segments))
            }
            Err(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestCase {
    pub name: String,
    pub level: Level,
    pub sub_level: SubLevel,
    pub function: String,
    pub procedure: String,
    pub input: String,
    pub expected_value: String,
    pub validation: Vec<TransitionSpec>,
}

impl TestCase {
    pub fn new(
        name: &str,
        level: Level,
        sub_level: SubLevel,
        validation: Vec<TransitionSpec>,
    ) -> Self {
        Self {
            name: name.to_string(),
            level,
            sub_level,
            function: String::new(),
            procedure: String::new(),
            input: String::new(),
            expected_value: String::new(),
            validation,
        }
    }

    /// Every pattern the case can wait for, first occurrence order.
    pub fn patterns(&self) -> Vec<BindingPattern> {
        let mut seen = HashSet::new();
        self.validation
            .iter()
            .flat_map(|t| t.alternatives.iter())
            .filter(|p| seen.insert((*p).clone()))
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MachineStatus {
    Running { state: usize },
    Passed,
    Failed { state: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureCause {
    /// The state's maximum wait elapsed.
    Timeout,
    /// The event stream ended before the expected log arrived.
    StreamClosed,
}

impl fmt::Display for FailureCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureCause::Timeout => "timeout",
            FailureCause::StreamClosed => "stream closed",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TestMachine {
    name: String,
    specs: Vec<TransitionSpec>,
    states: Vec<String>,
    current: usize,
    failure: Option<FailureCause>,
    started_at: Option<u64>,
    entered_at: Option<u64>,
    trace: Vec<LogEvent>,
    fired: Vec<usize>,
}

/// Builds the machine for `case`: `validation.len() + 1` states.
pub fn compile(case: &TestCase) -> Result<TestMachine> {
    if case.validation.is_empty() {
        return Err(TestkitError::EmptyCase(case.name.clone()));
    }
    let mut states = vec![START_STATE.to_string()];
    states.extend(case.validation.iter().map(TransitionSpec::label));
    Ok(TestMachine {
        name: case.name.clone(),
        specs: case.validation.clone(),
        states,
        current: 0,
        failure: None,
        started_at: None,
        entered_at: None,
        trace: Vec::new(),
        fired: Vec::new(),
    })
}

impl TestMachine {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn current_state(&self) -> &str {
        &self.states[self.current]
    }

    pub fn trace(&self) -> &[LogEvent] {
        &self.trace
    }

    /// Trace indices of the events that fired each transition.
    pub fn fired(&self) -> &[usize] {
        &self.fired
    }

    pub fn status(&self) -> MachineStatus {
        if self.failure.is_some() {
            MachineStatus::Failed {
                state: self.current,
            }
        } else if self.current == self.specs.len() {
            MachineStatus::Passed
        } else {
            MachineStatus::Running {
                state: self.current,
            }
        }
    }

    pub fn is_terminal(&self) -> bool {
        !matches!(self.status(), MachineStatus::Running { .. })
    }

    /// Sets the reference time of the initial state.
    pub fn start(&mut self, at: u64) {
        if self.started_at.is_none() {
            self.started_at = Some(at);
            self.entered_at = Some(at);
        }
    }

    /// Feeds one event. Matching events advance the machine; others are
    /// recorded and ignored. Terminal machines are left untouched.
    pub fn step(&mut self, event: LogEvent) -> MachineStatus {
        if self.is_terminal() {
            return self.status();
        }
        if self.started_at.is_none() {
            self.start(event.timestamp());
        }
        let fires = self.specs[self.current].accepts(&event);
        if fires {
            self.fired.push(self.trace.len());
            self.entered_at = Some(event.timestamp());
            self.current += 1;
        }
        self.trace.push(event);
        self.status()
    }

    /// Records an event that arrived after the current state's deadline.
    fn record_late(&mut self, event: LogEvent) {
        if !self.is_terminal() {
            self.trace.push(event);
        }
    }

    pub fn fail(&mut self, cause: FailureCause) {
        if !self.is_terminal() {
            self.failure = Some(cause);
        }
    }

    fn wait_ticks(&self) -> u64 {
        self.specs[self.current].max_wait_ticks
    }

    pub fn verdict(&self, elapsed: Elapsed) -> TestVerdict {
        let passed = self.current == self.specs.len() && self.failure.is_none();
        let (failed_state, awaiting, missing) = if passed {
            (None, Vec::new(), Vec::new())
        } else {
            let awaiting = self.specs[self.current].alternatives.clone();
            let missing = self.specs[self.current..]
                .iter()
                .flat_map(|t| t.alternatives.iter().cloned())
                .collect();
            (Some(self.states[self.current].clone()), awaiting, missing)
        };
        TestVerdict {
            name: self.name.clone(),
            outcome: if passed { Outcome::Pass } else { Outcome::Fail },
            failed_state,
            cause: if passed { None } else { self.failure },
            awaiting,
            missing,
            elapsed,
            trace: self.trace.clone(),
            annotations: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elapsed {
    Ticks(u64),
    Wall(Duration),
}

impl fmt::Display for Elapsed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Elapsed::Ticks(t) => write!(f, "{t}ticks"),
            Elapsed::Wall(d) => write!(f, "{}ms", d.as_millis()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestVerdict {
    pub name: String,
    pub outcome: Outcome,
    /// State the machine was in when it failed.
    pub failed_state: Option<String>,
    pub cause: Option<FailureCause>,
    /// Alternatives of the transition the failed state was waiting for.
    pub awaiting: Vec<BindingPattern>,
    /// Every pattern from the failed state onward that never fired.
    pub missing: Vec<BindingPattern>,
    pub elapsed: Elapsed,
    pub trace: Vec<LogEvent>,
    /// Error-typed logs seen by the error monitor during the run.
    pub annotations: Vec<String>,
}

impl TestVerdict {
    pub fn passed(&self) -> bool {
        self.outcome == Outcome::Pass
    }

    /// `VERDICT <name> <PASS|FAIL> [<failedState>]`
    pub fn summary_line(&self) -> String {
        match &self.failed_state {
            Some(state) => format!("VERDICT {} {} {}", self.name, self.outcome, state),
            None => format!("VERDICT {} {}", self.name, self.outcome),
        }
    }

    /// Human-readable block: header, failure details and consumed timeline.
    pub fn report(&self) -> String {
        let mut out = format!("== {} : {} ({})\n", self.name, self.outcome, self.elapsed);
        if let Some(state) = &self.failed_state {
            let cause = self.cause.map_or_else(String::new, |c| format!(" ({c})"));
            out.push_str(&format!("   failed in state {state}{cause}\n"));
            for p in &self.awaiting {
                out.push_str(&format!("   awaiting {p}\n"));
            }
            for p in &self.missing {
                out.push_str(&format!("   missing  {p}\n"));
            }
        }
        for note in &self.annotations {
            out.push_str(&format!("   error log {note}\n"));
        }
        out.push_str("   consumed timeline:\n");
        for line in render_timeline(&self.trace).lines() {
            out.push_str("     ");
            out.push_str(line);
            out.push('\n');
        }
        out
    }
}

/// How per-state waits are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaitMode {
    /// Ticks derived from event timestamps; deterministic. A wait ends when
    /// an event arrives more than `max_wait` ticks after the state was
    /// entered, or when the stream closes.
    SimTicks { micros_per_tick: u64, origin: u64 },
    /// Real time: each tick lasts `per_tick`.
    WallClock { per_tick: Duration },
}

/// Drives `machine` over an already-ordered event stream in tick mode.
pub fn replay<I>(
    mut machine: TestMachine,
    events: I,
    micros_per_tick: u64,
    origin: u64,
) -> TestVerdict
where
    I: IntoIterator<Item = LogEvent>,
{
    machine.start(origin);
    let mut last = origin;
    let mut events = events.into_iter();
    while !machine.is_terminal() {
        let Some(event) = events.next() else {
            machine.fail(FailureCause::StreamClosed);
            break;
        };
        last = last.max(event.timestamp());
        let entered = machine.entered_at.unwrap_or(origin);
        let waited = event.timestamp().saturating_sub(entered) / micros_per_tick.max(1);
        if waited > machine.wait_ticks() {
            machine.record_late(event);
            machine.fail(FailureCause::Timeout);
            break;
        }
        machine.step(event);
    }
    let elapsed = last.saturating_sub(origin) / micros_per_tick.max(1);
    machine.verdict(Elapsed::Ticks(elapsed))
}

/// Checks statically that `queue` can receive every pattern of `machine`.
pub fn check_bindings(machine: &TestMachine, queue: &QueueHandle) -> Result<()> {
    for spec in &machine.specs {
        for pattern in &spec.alternatives {
            if !queue.bindings().iter().any(|b| covers(b, pattern)) {
                return Err(TestkitError::BindingMismatch {
                    queue: queue.name().to_string(),
                    pattern: pattern.to_string(),
                });
            }
        }
    }
    Ok(())
}

/// Consumes from `queue` until the machine passes or a wait runs out.
pub fn run(
    machine: TestMachine,
    broker: &Broker,
    queue: &QueueHandle,
    mode: WaitMode,
) -> Result<TestVerdict> {
    check_bindings(&machine, queue)?;
    let verdict = match mode {
        WaitMode::SimTicks {
            micros_per_tick,
            origin,
        } => {
            let stream = std::iter::from_fn(|| broker.recv(queue).ok());
            replay(machine, stream, micros_per_tick, origin)
        }
        WaitMode::WallClock { per_tick } => run_wall(machine, broker, queue, per_tick),
    };
    Ok(verdict)
}

fn run_wall(
    mut machine: TestMachine,
    broker: &Broker,
    queue: &QueueHandle,
    per_tick: Duration,
) -> TestVerdict {
    let started = Instant::now();
    let mut entered = started;
    while !machine.is_terminal() {
        let limit =
            per_tick.saturating_mul(u32::try_from(machine.wait_ticks()).unwrap_or(u32::MAX));
        let remaining = limit.saturating_sub(entered.elapsed());
        match broker.consume(queue, remaining) {
            Ok(event) => {
                let before = machine.current;
                machine.step(event);
                if machine.current != before {
                    entered = Instant::now();
                }
            }
            Err(RecvError::Timeout) => machine.fail(FailureCause::Timeout),
            Err(RecvError::QueueClosed) => machine.fail(FailureCause::StreamClosed),
        }
    }
    machine.verdict(Elapsed::Wall(started.elapsed()))
}

/// Stable sort by timestamp; equal timestamps keep arrival order.
pub fn merge_timeline(mut events: Vec<LogEvent>) -> Vec<LogEvent> {
    events.sort_by_key(LogEvent::timestamp);
    events
}

/// One line per event: timestamp, routing key, message.
pub fn render_timeline(events: &[LogEvent]) -> String {
    let mut out = String::new();
    for e in events {
        let key = e
            .routing_key()
            .map_or_else(|err| format!("<{err}>"), |k| k.to_string());
        out.push_str(&format!(
            "{:>12}  {}  {}\n",
            e.timestamp(),
            key,
            e.message()
        ));
    }
    out
}

/// Gathers verdicts from concurrently running machines.
#[derive(Debug, Default)]
pub struct VerdictCollector {
    verdicts: Mutex<BTreeMap<usize, TestVerdict>>,
}

impl VerdictCollector {
    pub fn submit(&self, index: usize, verdict: TestVerdict) {
        self.verdicts
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(index, verdict);
    }

    /// Verdicts ordered by submission index.
    pub fn collect(&self) -> Vec<TestVerdict> {
        self.verdicts
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .cloned()
            .collect()
    }
}

/// A set of test machines, each consuming its own queue on its own thread.
pub struct TestSession {
    broker: Broker,
    workers: Vec<(String, JoinHandle<Result<()>>)>,
    collector: Arc<VerdictCollector>,
    monitor: QueueHandle,
}

impl TestSession {
    /// Declares one queue per case (bound to the union of its patterns) plus
    /// the error monitor, then starts every machine.
    pub fn start(broker: &Broker, cases: &[TestCase], mode: WaitMode) -> Result<Self> {
        let monitor = broker.declare("error-monitor", &[ERROR_MONITOR_PATTERN])?;
        let collector = Arc::new(VerdictCollector::default());
        let mut prepared = Vec::with_capacity(cases.len());
        for case in cases {
            let machine = compile(case)?;
            let queue = broker.declare_queue(
                &format!("test-{}", case.name),
                &case.patterns(),
                DEFAULT_QUEUE_CAPACITY,
            )?;
            check_bindings(&machine, &queue)?;
            prepared.push((machine, queue));
        }
        let workers = prepared
            .into_iter()
            .enumerate()
            .map(|(index, (machine, queue))| {
                let name = machine.name().to_string();
                let broker = broker.clone();
                let collector = Arc::clone(&collector);
                let handle = thread::spawn(move || {
                    let verdict = run(machine, &broker, &queue, mode)?;
                    collector.submit(index, verdict);
                    Ok(())
                });
                (name, handle)
            })
            .collect();
        Ok(Self {
            broker: broker.clone(),
            workers,
            collector,
            monitor,
        })
    }

    /// Waits for every machine. In tick mode the broker must be shut down
    /// first so that machines still waiting see the end of the stream.
    pub fn finish(self) -> Result<Vec<TestVerdict>> {
        for (name, worker) in self.workers {
            worker
                .join()
                .map_err(|_| TestkitError::MachinePanicked(name))??;
        }
        let errors: Vec<String> = self
            .broker
            .drain(&self.monitor)
            .iter()
            .filter(|e| e.type_log() == LogType::Error)
            .filter_map(|e| e.routing_key().ok().map(|k| k.to_string()))
            .collect();
        let mut verdicts = self.collector.collect();
        for verdict in &mut verdicts {
            verdict.annotations = errors.clone();
        }
        Ok(verdicts)
    }
}

/// Reads a test plan file. See [`parse_test_plan`] for the format.
pub fn load_test_plan(path: &Path) -> Result<Vec<TestCase>> {
    parse_test_plan(&std::fs::read_to_string(path)?)
}

/// Parses the line-oriented plan format:
///
/// ```text
/// test <name> level=<local|global> sublevel=<framework|scenario|learning|mas>
/// function <text>            (optional descriptive lines)
/// procedure <text>
/// input <text>
/// expected <text>
/// expect <pattern>[|<pattern>...] within <N>ticks
/// ```
///
/// Blank lines and lines starting with `//` are ignored.
pub fn parse_test_plan(text: &str) -> Result<Vec<TestCase>> {
    let mut cases: Vec<(usize, TestCase)> = Vec::new();
    for (index, raw) in text.lines().enumerate() {
        let line_no = index + 1;
        let err = |message: String| TestkitError::Parse {
            line: line_no,
            message,
        };
        let line = raw.trim();
        if line.is_empty() || line.starts_with("//") {
            continue;
        }
        let (keyword, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        if keyword == "test" {
            cases.push((line_no, parse_header(rest).map_err(err)?));
            continue;
        }
        let Some((_, case)) = cases.last_mut() else {
            return Err(err(format!("{keyword:?} before any test header")));
        };
        match keyword {
            "function" => case.function = rest.to_string(),
            "procedure" => case.procedure = rest.to_string(),
            "input" => case.input = rest.to_string(),
            "expected" => case.expected_value = rest.to_string(),
            "expect" => case.validation.push(parse_expect(rest).map_err(err)?),
            other => return Err(err(format!("unknown directive {other:?}"))),
        }
    }
    cases
        .into_iter()
        .map(|(line, case)| {
            if case.validation.is_empty() {
                Err(TestkitError::Parse {
                    line,
                    message: format!("test {:?} has no expect lines", case.name),
                })
            } else {
                Ok(case)
            }
        })
        .collect()
}

fn parse_header(rest: &str) -> Result<TestCase, String> {
    let mut tokens = rest.split_whitespace();
    let name = tokens.next().ok_or("missing test name")?;
    let mut level = None;
    let mut sub_level = None;
    for token in tokens {
        match token.split_once('=') {
            Some(("level", v)) => level = Some(v.parse::<Level>()?),
            Some(("sublevel", v)) => sub_level = Some(v.parse::<SubLevel>()?),
            _ => return Err(format!("unexpected token {token:?}")),
        }
    }
    Ok(TestCase::new(
        name,
        level.ok_or("missing level=")?,
        sub_level.ok_or("missing sublevel=")?,
        Vec::new(),
    ))
}

fn parse_expect(rest: &str) -> Result<TransitionSpec, String> {
    let (patterns, wait) = match rest.rsplit_once(" within ") {
        Some((p, w)) => (p.trim(), Some(w.trim())),
        None => (rest, None),
    };
    let max_wait = match wait {
        None => DEFAULT_MAX_WAIT_TICKS,
        Some(w) => parse_ticks(w)?,
    };
    let alternatives = patterns
        .split('|')
        .map(|p| {
            p.trim()
                .parse::<BindingPattern>()
                .map_err(|e| e.to_string())
        })
        .collect::<Result<Vec<_>, _>>()?;
    TransitionSpec::new(alternatives, max_wait).map_err(|e| e.to_string())
}

fn parse_ticks(text: &str) -> Result<u64, String> {
    let digits = text
        .strip_suffix("ticks")
        .ok_or_else(|| format!("duration {text:?} must look like <N>ticks"))?;
    match digits.parse::<u64>() {
        Ok(0) | Err(_) => Err(format!("duration {text:?} must be a positive tick count")),
        Ok(n) => Ok(n),
    }
}
