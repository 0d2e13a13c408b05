//! In-process topic exchange.
//!
//! Queues are declared with one or more binding patterns. A published event is
//! appended once to every queue holding at least one matching binding. Each
//! queue is a bounded FIFO that drops its oldest event on overflow.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, RwLock};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::log_model::{
    BindingPattern, LogClock, LogEvent, LogModelError, LogType, RoutingKey, Segment, Tags,
};

pub const DEFAULT_QUEUE_CAPACITY: usize = 65_536;

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("queue {0:?} already declared")]
    DuplicateQueue(String),
    #[error("invalid binding: {0}")]
    InvalidPattern(String),
    #[error("routing key is {0} bytes, limit is 255")]
    KeyTooLong(usize),
    #[error("invalid event: {0}")]
    InvalidEvent(LogModelError),
    #[error("queue capacity must be positive")]
    ZeroCapacity,
    #[error("broker is shut down")]
    Closed,
    #[error("event tap: {0}")]
    Tap(#[from] io::Error),
}

impl From<LogModelError> for BrokerError {
    fn from(err: LogModelError) -> Self {
        match err {
            LogModelError::KeyTooLong { len } => BrokerError::KeyTooLong(len),
            LogModelError::InvalidPattern { .. } => BrokerError::InvalidPattern(err.to_string()),
            other => BrokerError::InvalidEvent(other),
        }
    }
}

/// Why [`Broker::consume`] returned without an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RecvError {
    #[error("no event within the wait limit")]
    Timeout,
    #[error("queue closed")]
    QueueClosed,
}

/// True iff `key` can be derived from `pattern`, where `*` consumes exactly
/// one segment and `#` consumes zero or more.
pub fn matches(pattern: &BindingPattern, key: &RoutingKey) -> bool {
    let key: Vec<&str> = key.segments().collect();
    matches_segments(pattern.segments(), &key)
}

/// Wildcard walk with backtracking to the most recent `#`.
pub fn matches_segments(pattern: &[Segment], key: &[&str]) -> bool {
    let (mut p, mut k) = (0, 0);
    // Pattern index just after the last `#`, and the key index it resumes from.
    let mut resume: Option<(usize, usize)> = None;
    while k < key.len() {
        if let Some(segment) = pattern.get(p) {
            match segment {
                Segment::Hash => {
                    resume = Some((p + 1, k));
                    p += 1;
                    continue;
                }
                Segment::Star => {
                    p += 1;
                    k += 1;
                    continue;
                }
                Segment::Word(w) if w == key[k] => {
                    p += 1;
                    k += 1;
                    continue;
                }
                Segment::Word(_) => {}
            }
        }
        match resume {
            Some((after_hash, from)) => {
                p = after_hash;
                k = from + 1;
                resume = Some((after_hash, from + 1));
            }
            None => return false,
        }
    }
    pattern[p..].iter().all(|s| *s == Segment::Hash)
}

/// True when every key matched by `narrow` is also matched by `wide`.
///
/// Conservative: it treats the segments of `narrow` as symbols, so a `false`
/// answer is possible for a few exotic equivalent pairs (e.g. `*.#` vs `#`).
pub fn covers(wide: &BindingPattern, narrow: &BindingPattern) -> bool {
    covers_segments(wide.segments(), narrow.segments())
}

fn covers_segments(wide: &[Segment], narrow: &[Segment]) -> bool {
    match wide.split_first() {
        None => narrow.is_empty(),
        Some((Segment::Hash, rest)) => {
            (0..=narrow.len()).any(|skip| covers_segments(rest, &narrow[skip..]))
        }
        Some((head, rest)) => match narrow.split_first() {
            None => false,
            Some((n, narrow_rest)) => {
                let ok = match (head, n) {
                    (Segment::Star, Segment::Word(_) | Segment::Star) => true,
                    (Segment::Word(a), Segment::Word(b)) => a == b,
                    _ => false,
                };
                ok && covers_segments(rest, narrow_rest)
            }
        },
    }
}

/// Counters for one queue. `delivered + dropped + buffered == matched`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueStats {
    pub matched: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub buffered: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BrokerStats {
    pub published: u64,
    pub unrouted: u64,
    pub queues: Vec<(String, QueueStats)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PublishReceipt {
    pub matched: usize,
}

#[derive(Debug, Default)]
struct QueueState {
    buffer: VecDeque<Arc<LogEvent>>,
    matched: u64,
    delivered: u64,
    dropped: u64,
    closed: bool,
}

#[derive(Debug)]
struct Queue {
    name: String,
    bindings: Vec<BindingPattern>,
    capacity: usize,
    state: Mutex<QueueState>,
    ready: Condvar,
}

impl Queue {
    fn lock(&self) -> MutexGuard<'_, QueueState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn accepts(&self, key: &[&str]) -> bool {
        self.bindings
            .iter()
            .any(|b| matches_segments(b.segments(), key))
    }

    fn push(&self, event: Arc<LogEvent>) {
        let mut state = self.lock();
        state.matched += 1;
        if state.buffer.len() == self.capacity {
            state.buffer.pop_front();
            state.dropped += 1;
        }
        state.buffer.push_back(event);
        drop(state);
        self.ready.notify_one();
    }

    fn stats(&self) -> QueueStats {
        let state = self.lock();
        QueueStats {
            matched: state.matched,
            delivered: state.delivered,
            dropped: state.dropped,
            buffered: state.buffer.len() as u64,
        }
    }
}

/// Consumer side of a declared queue. Movable between threads.
#[derive(Debug)]
pub struct QueueHandle {
    queue: Arc<Queue>,
}

impl QueueHandle {
    pub fn name(&self) -> &str {
        &self.queue.name
    }

    pub fn bindings(&self) -> &[BindingPattern] {
        &self.queue.bindings
    }

    pub fn stats(&self) -> QueueStats {
        self.queue.stats()
    }

    pub fn len(&self) -> usize {
        self.queue.lock().buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Default)]
struct Inner {
    queues: RwLock<Vec<Arc<Queue>>>,
    tap: Option<Mutex<BufWriter<File>>>,
    published: AtomicU64,
    unrouted: AtomicU64,
    closed: AtomicBool,
}

/// Shared, thread-safe topic exchange. Cloning yields another handle to the
/// same exchange.
#[derive(Debug, Clone, Default)]
pub struct Broker {
    inner: Arc<Inner>,
}

impl Broker {
    pub fn new() -> Self {
        Self::default()
    }

    /// A broker that also appends every published event to `path`.
    pub fn with_tap(path: &Path) -> Result<Self, BrokerError> {
        let file = File::create(path)?;
        Ok(Self {
            inner: Arc::new(Inner {
                tap: Some(Mutex::new(BufWriter::new(file))),
                ..Inner::default()
            }),
        })
    }

    pub fn declare_queue(
        &self,
        name: &str,
        patterns: &[BindingPattern],
        capacity: usize,
    ) -> Result<QueueHandle, BrokerError> {
        if patterns.is_empty() {
            return Err(BrokerError::InvalidPattern(format!(
                "queue {name:?} needs at least one binding"
            )));
        }
        if capacity == 0 {
            return Err(BrokerError::ZeroCapacity);
        }
        if self.inner.closed.load(Ordering::SeqCst) {
            return Err(BrokerError::Closed);
        }
        let mut queues = self.inner.queues.write().unwrap_or_else(|e| e.into_inner());
        if queues.iter().any(|q| q.name == name) {
            return Err(BrokerError::DuplicateQueue(name.to_string()));
        }
        let mut seen = HashSet::new();
        let bindings = patterns
            .iter()
            .filter(|p| seen.insert((*p).clone()))
            .cloned()
            .collect();
        let queue = Arc::new(Queue {
            name: name.to_string(),
            bindings,
            capacity,
            state: Mutex::new(QueueState::default()),
            ready: Condvar::new(),
        });
        queues.push(Arc::clone(&queue));
        Ok(QueueHandle { queue })
    }

    /// Parses `patterns` and declares the queue with default capacity.
    pub fn declare(&self, name: &str, patterns: &[&str]) -> Result<QueueHandle, BrokerError> {
        let parsed = patterns
            .iter()
            .map(|p| p.parse::<BindingPattern>())
            .collect::<Result<Vec<_>, _>>()?;
        self.declare_queue(name, &parsed, DEFAULT_QUEUE_CAPACITY)
    }

    pub fn publish(&self, event: LogEvent) -> Result<PublishReceipt, BrokerError> {
        if self.inner.closed.load(Ordering::SeqCst) {
            return Err(BrokerError::Closed);
        }
        let key = event.routing_key()?;
        let segments: Vec<&str> = key.segments().collect();
        // Holding the tap lock across fan-out keeps tap order equal to queue order.
        let mut tap = match &self.inner.tap {
            Some(tap) => {
                let mut writer = tap.lock().unwrap_or_else(|e| e.into_inner());
                writeln!(writer, "{}", event.to_line()?)?;
                Some(writer)
            }
            None => None,
        };
        let event = Arc::new(event);
        let queues = self.inner.queues.read().unwrap_or_else(|e| e.into_inner());
        let mut matched = 0;
        for queue in queues.iter().filter(|q| q.accepts(&segments)) {
            queue.push(Arc::clone(&event));
            matched += 1;
        }
        drop(queues);
        tap.take();
        self.inner.published.fetch_add(1, Ordering::SeqCst);
        if matched == 0 {
            self.inner.unrouted.fetch_add(1, Ordering::SeqCst);
        }
        Ok(PublishReceipt { matched })
    }

    /// Removes and returns the oldest buffered event, waiting at most
    /// `max_wait`. Buffered events are still handed out after shutdown;
    /// [`RecvError::QueueClosed`] is returned once the queue is drained.
    pub fn consume(&self, handle: &QueueHandle, max_wait: Duration) -> Result<LogEvent, RecvError> {
        let deadline = Instant::now().checked_add(max_wait);
        let queue = &handle.queue;
        let mut state = queue.lock();
        loop {
            if let Some(event) = state.buffer.pop_front() {
                state.delivered += 1;
                return Ok(Arc::unwrap_or_clone(event));
            }
            if state.closed {
                return Err(RecvError::QueueClosed);
            }
            let remaining = match deadline {
                Some(deadline) => {
                    let now = Instant::now();
                    if now >= deadline {
                        return Err(RecvError::Timeout);
                    }
                    deadline - now
                }
                None => Duration::from_secs(3600),
            };
            state = queue
                .ready
                .wait_timeout(state, remaining)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    /// Blocks until an event arrives or the queue is closed and drained.
    pub fn recv(&self, handle: &QueueHandle) -> Result<LogEvent, RecvError> {
        loop {
            match self.consume(handle, Duration::from_secs(3600)) {
                Err(RecvError::Timeout) => continue,
                other => return other,
            }
        }
    }

    /// Non-blocking drain of everything currently buffered.
    pub fn drain(&self, handle: &QueueHandle) -> Vec<LogEvent> {
        let mut state = handle.queue.lock();
        let events: Vec<_> = state.buffer.drain(..).map(Arc::unwrap_or_clone).collect();
        state.delivered += events.len() as u64;
        events
    }

    /// Stops accepting publications, flushes the tap and wakes every consumer.
    pub fn shutdown(&self) -> Result<(), BrokerError> {
        self.inner.closed.store(true, Ordering::SeqCst);
        if let Some(tap) = &self.inner.tap {
            tap.lock().unwrap_or_else(|e| e.into_inner()).flush()?;
        }
        let queues = self.inner.queues.read().unwrap_or_else(|e| e.into_inner());
        for queue in queues.iter() {
            queue.lock().closed = true;
            queue.ready.notify_all();
        }
        Ok(())
    }

    pub fn is_closed(&self) -> bool {
        self.inner.closed.load(Ordering::SeqCst)
    }

    pub fn stats(&self) -> BrokerStats {
        let queues = self.inner.queues.read().unwrap_or_else(|e| e.into_inner());
        BrokerStats {
            published: self.inner.published.load(Ordering::SeqCst),
            unrouted: self.inner.unrouted.load(Ordering::SeqCst),
            queues: queues.iter().map(|q| (q.name.clone(), q.stats())).collect(),
        }
    }
}

/// Destination for events produced by agents.
pub trait LogSink: Send + Sync {
    fn emit(&self, event: LogEvent) -> Result<(), BrokerError>;
}

impl LogSink for Broker {
    fn emit(&self, event: LogEvent) -> Result<(), BrokerError> {
        self.publish(event).map(|_| ())
    }
}

/// Discards everything after checking that the key is routable.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl LogSink for NullSink {
    fn emit(&self, event: LogEvent) -> Result<(), BrokerError> {
        event.routing_key()?;
        Ok(())
    }
}

/// Keeps every event in memory, in emission order.
#[derive(Debug, Default)]
pub struct MemorySink {
    events: Mutex<Vec<LogEvent>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> Vec<LogEvent> {
        self.events
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    pub fn len(&self) -> usize {
        self.events.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LogSink for MemorySink {
    fn emit(&self, event: LogEvent) -> Result<(), BrokerError> {
        event.routing_key()?;
        self.events
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(event);
        Ok(())
    }
}

/// Source location attached to an event: unit, operation and line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Site {
    pub unit: &'static str,
    pub operation: &'static str,
    pub line: u32,
}

/// `site!("Unit", "operation")` captures the calling line.
#[macro_export]
macro_rules! site {
    ($unit:expr, $operation:expr) => {
        $crate::topic_broker::Site {
            unit: $unit,
            operation: $operation,
            line: line!(),
        }
    };
}

/// Publishing context of one agent: fills agentType, agentName and the
/// timestamp on every event it emits.
#[derive(Clone)]
pub struct Publisher {
    sink: Arc<dyn LogSink>,
    clock: Arc<LogClock>,
    agent_type: String,
    agent_name: String,
    muted: bool,
}

impl fmt::Debug for Publisher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Publisher")
            .field("agent_type", &self.agent_type)
            .field("agent_name", &self.agent_name)
            .field("muted", &self.muted)
            .finish_non_exhaustive()
    }
}

impl Publisher {
    pub fn new(
        sink: Arc<dyn LogSink>,
        clock: Arc<LogClock>,
        agent_type: &str,
        agent_name: &str,
    ) -> Self {
        Self {
            sink,
            clock,
            agent_type: agent_type.to_string(),
            agent_name: agent_name.to_string(),
            muted: false,
        }
    }

    /// A muted publisher drops every event without building it.
    pub fn muted(mut self, muted: bool) -> Self {
        self.muted = muted;
        self
    }

    pub fn is_muted(&self) -> bool {
        self.muted
    }

    pub fn agent_name(&self) -> &str {
        &self.agent_name
    }

    pub fn clock(&self) -> &Arc<LogClock> {
        &self.clock
    }

    pub fn log(
        &self,
        type_log: LogType,
        site: Site,
        action: &str,
        resource: &str,
        message: impl Into<String>,
    ) -> Result<(), BrokerError> {
        if self.muted {
            return Ok(());
        }
        let tags = Tags {
            agent_type: self.agent_type.clone(),
            agent_name: self.agent_name.clone(),
            action: action.to_string(),
            type_log,
            source_unit: site.unit.to_string(),
            source_operation: site.operation.to_string(),
            source_line: site.line,
            resource: resource.to_string(),
        };
        let event = LogEvent::new(tags, message, &self.clock)?;
        self.sink.emit(event)
    }

    pub fn info(
        &self,
        site: Site,
        action: &str,
        resource: &str,
        message: impl Into<String>,
    ) -> Result<(), BrokerError> {
        self.log(LogType::Info, site, action, resource, message)
    }

    /// Like [`Publisher::info`], but only formats the message when it will be sent.
    pub fn info_with<M, F>(
        &self,
        site: Site,
        action: &str,
        resource: &str,
        message: F,
    ) -> Result<(), BrokerError>
    where
        M: Into<String>,
        F: FnOnce() -> M,
    {
        if self.muted {
            return Ok(());
        }
        self.log(LogType::Info, site, action, resource, message())
    }
}
