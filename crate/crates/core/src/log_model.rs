//! Annotated log events, their routing keys and the binding-pattern grammar.
//!
//! A [`LogEvent`] carries eight structured tags plus a timestamp and a free
//! text message. Only the eight tags form the routing key:
//!
//! ```text
//! agentType.agentName.action.typeLog.sourceUnit.sourceOperation.sourceLine.resource
//! ```
//!
//! The timestamp and message travel as payload so that dots in a message can
//! never shift segment positions.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

/// Upper bound on the encoded length of routing keys and binding patterns.
pub const MAX_KEY_BYTES: usize = 255;

/// Number of segments in every routing key.
pub const KEY_SEGMENTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LogModelError {
    #[error("invalid {tag} tag {value:?}: {reason}")]
    InvalidTag {
        tag: &'static str,
        value: String,
        reason: &'static str,
    },
    #[error("routing key is {len} bytes, limit is {MAX_KEY_BYTES}")]
    KeyTooLong { len: usize },
    #[error("invalid binding pattern {text:?}: {reason}")]
    InvalidPattern { text: String, reason: &'static str },
    #[error("malformed event line: {0}")]
    MalformedLine(String),
}

pub type Result<T, E = LogModelError> = std::result::Result<T, E>;

/// Severity of a log event. Always rendered lowercase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LogType {
    Info,
    Warning,
    Error,
}

impl LogType {
    pub fn as_str(self) -> &'static str {
        match self {
            LogType::Info => "info",
            LogType::Warning => "warning",
            LogType::Error => "error",
        }
    }
}

impl fmt::Display for LogType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LogType {
    type Err = LogModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "info" => Ok(LogType::Info),
            "warning" => Ok(LogType::Warning),
            "error" => Ok(LogType::Error),
            _ => Err(LogModelError::InvalidTag {
                tag: "typeLog",
                value: s.to_string(),
                reason: "expected info, warning or error",
            }),
        }
    }
}

/// Checks that `value` can appear as one segment of a routing key.
pub fn validate_word(tag: &'static str, value: &str) -> Result<()> {
    let reason = if value.is_empty() {
        "empty"
    } else if value.contains('.') {
        "contains '.'"
    } else if value.contains(['*', '#']) {
        "contains a wildcard character"
    } else if value.chars().any(char::is_whitespace) {
        "contains whitespace"
    } else {
        return Ok(());
    };
    Err(LogModelError::InvalidTag {
        tag,
        value: value.to_string(),
        reason,
    })
}

/// Monotonic event clock with microsecond granularity.
///
/// Every call to [`LogClock::stamp`] returns a value strictly greater than the
/// previous one. Simulations drive the clock forward with
/// [`LogClock::advance_to`] so that one simulated tick spans a fixed number of
/// microseconds.
#[derive(Debug, Default)]
pub struct LogClock {
    next: AtomicU64,
}

impl LogClock {
    pub const fn new() -> Self {
        Self {
            next: AtomicU64::new(0),
        }
    }

    pub const fn starting_at(micros: u64) -> Self {
        Self {
            next: AtomicU64::new(micros),
        }
    }

    /// The process-wide clock used by [`make_log_event`].
    pub fn global() -> &'static LogClock {
        static GLOBAL: LogClock = LogClock::new();
        &GLOBAL
    }

    pub fn stamp(&self) -> u64 {
        self.next.fetch_add(1, Ordering::SeqCst)
    }

    /// The value the next stamp will carry.
    pub fn peek(&self) -> u64 {
        self.next.load(Ordering::SeqCst)
    }

    /// Moves the clock forward to at least `micros`. Never moves it back.
    pub fn advance_to(&self, micros: u64) {
        self.next.fetch_max(micros, Ordering::SeqCst);
    }
}

/// The eight structured tags that make up a routing key.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Tags {
    pub agent_type: String,
    pub agent_name: String,
    pub action: String,
    pub type_log: LogType,
    pub source_unit: String,
    pub source_operation: String,
    pub source_line: u32,
    pub resource: String,
}

impl Tags {
    pub fn validate(&self) -> Result<()> {
        validate_word("agentType", &self.agent_type)?;
        validate_word("agentName", &self.agent_name)?;
        validate_word("action", &self.action)?;
        validate_word("sourceUnit", &self.source_unit)?;
        validate_word("sourceOperation", &self.source_operation)?;
        validate_word("resource", &self.resource)
    }
}

/// A published log record. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LogEvent {
    tags: Tags,
    timestamp: u64,
    message: String,
}

impl LogEvent {
    /// Validates `tags` and stamps the event from `clock`.
    pub fn new(tags: Tags, message: impl Into<String>, clock: &LogClock) -> Result<Self> {
        tags.validate()?;
        Ok(Self {
            tags,
            timestamp: clock.stamp(),
            message: message.into(),
        })
    }

    /// Builds an event with an explicit timestamp, e.g. when replaying a tap file.
    pub fn with_timestamp(tags: Tags, timestamp: u64, message: impl Into<String>) -> Result<Self> {
        tags.validate()?;
        Ok(Self {
            tags,
            timestamp,
            message: message.into(),
        })
    }

    pub fn tags(&self) -> &Tags {
        &self.tags
    }
    pub fn agent_type(&self) -> &str {
        &self.tags.agent_type
    }
    pub fn agent_name(&self) -> &str {
        &self.tags.agent_name
    }
    pub fn action(&self) -> &str {
        &self.tags.action
    }
    pub fn type_log(&self) -> LogType {
        self.tags.type_log
    }
    pub fn source_unit(&self) -> &str {
        &self.tags.source_unit
    }
    pub fn source_operation(&self) -> &str {
        &self.tags.source_operation
    }
    pub fn source_line(&self) -> u32 {
        self.tags.source_line
    }
    pub fn resource(&self) -> &str {
        &self.tags.resource
    }
    pub fn timestamp(&self) -> u64 {
        self.timestamp
    }
    pub fn message(&self) -> &str {
        &self.message
    }

    /// Canonical 8-segment routing key.
    pub fn routing_key(&self) -> Result<RoutingKey> {
        routing_key(self)
    }

    /// One tap-file line (without the trailing newline):
    /// routing key, tab, decimal timestamp, tab, escaped message.
    pub fn to_line(&self) -> Result<String> {
        let key = self.routing_key()?;
        Ok(format!(
            "{}\t{}\t{}",
            key,
            self.timestamp,
            escape_message(&self.message)
        ))
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let malformed = || LogModelError::MalformedLine(line.to_string());
        let mut parts = line.splitn(3, '\t');
        let key = parts.next().ok_or_else(malformed)?;
        let ts = parts.next().ok_or_else(malformed)?;
        let message = parts.next().ok_or_else(malformed)?;
        let segments: Vec<&str> = key.split('.').collect();
        if segments.len() != KEY_SEGMENTS {
            return Err(malformed());
        }
        let tags = Tags {
            agent_type: segments[0].to_string(),
            agent_name: segments[1].to_string(),
            action: segments[2].to_string(),
            type_log: segments[3].parse()?,
            source_unit: segments[4].to_string(),
            source_operation: segments[5].to_string(),
            source_line: segments[6].parse().map_err(|_| malformed())?,
            resource: segments[7].to_string(),
        };
        let timestamp = ts.parse().map_err(|_| malformed())?;
        let message = unescape_message(message).ok_or_else(malformed)?;
        Self::with_timestamp(tags, timestamp, message)
    }
}

fn escape_message(message: &str) -> String {
    let mut out = String::with_capacity(message.len());
    for c in message.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_message(text: &str) -> Option<String> {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next()? {
            '\\' => out.push('\\'),
            't' => out.push('\t'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            _ => return None,
        }
    }
    Some(out)
}

/// Builds an event stamped from the process-wide clock.
#[allow(clippy::too_many_arguments)]
pub fn make_log_event(
    agent_type: &str,
    agent_name: &str,
    action: &str,
    type_log: LogType,
    source_unit: &str,
    source_operation: &str,
    source_line: u32,
    resource: &str,
    message: &str,
) -> Result<LogEvent> {
    let tags = Tags {
        agent_type: agent_type.to_string(),
        agent_name: agent_name.to_string(),
        action: action.to_string(),
        type_log,
        source_unit: source_unit.to_string(),
        source_operation: source_operation.to_string(),
        source_line,
        resource: resource.to_string(),
    };
    LogEvent::new(tags, message, LogClock::global())
}

/// A validated, wildcard-free, dot-delimited key of at most 255 bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RoutingKey(String);

impl RoutingKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.0.split('.')
    }
}

impl fmt::Display for RoutingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for RoutingKey {
    type Err = LogModelError;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() > MAX_KEY_BYTES {
            return Err(LogModelError::KeyTooLong { len: s.len() });
        }
        for segment in s.split('.') {
            validate_word("segment", segment)?;
        }
        Ok(RoutingKey(s.to_string()))
    }
}

pub fn routing_key(event: &LogEvent) -> Result<RoutingKey> {
    let t = &event.tags;
    let key = format!(
        "{}.{}.{}.{}.{}.{}.{}.{}",
        t.agent_type,
        t.agent_name,
        t.action,
        t.type_log,
        t.source_unit,
        t.source_operation,
        t.source_line,
        t.resource
    );
    if key.len() > MAX_KEY_BYTES {
        return Err(LogModelError::KeyTooLong { len: key.len() });
    }
    Ok(RoutingKey(key))
}

/// One segment of a binding pattern.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Segment {
    Word(String),
    /// `*`: exactly one word.
    Star,
    /// `#`: zero or more words.
    Hash,
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Segment::Word(w) => f.write_str(w),
            Segment::Star => f.write_str("*"),
            Segment::Hash => f.write_str("#"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BindingPattern {
    segments: Vec<Segment>,
}

impl BindingPattern {
    /// Builds a pattern from segments, enforcing the same rules as parsing.
    pub fn from_segments(segments: Vec<Segment>) -> Result<Self> {
        let pattern = BindingPattern { segments };
        // Re-parse the rendered form so both constructors share one rule set.
        parse_binding_pattern(&pattern.to_string())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn has_wildcards(&self) -> bool {
        self.segments
            .iter()
            .any(|s| matches!(s, Segment::Star | Segment::Hash))
    }

    /// The word in the action position, if the pattern pins one.
    pub fn action(&self) -> Option<&str> {
        for (index, segment) in self.segments.iter().enumerate().take(3) {
            match segment {
                Segment::Hash => return None,
                Segment::Word(w) if index == 2 => return Some(w),
                _ => {}
            }
        }
        None
    }
}

impl fmt::Display for BindingPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, segment) in self.segments.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{segment}")?;
        }
        Ok(())
    }
}

impl FromStr for BindingPattern {
    type Err = LogModelError;

    fn from_str(s: &str) -> Result<Self> {
        parse_binding_pattern(s)
    }
}

impl From<&RoutingKey> for BindingPattern {
    fn from(key: &RoutingKey) -> Self {
        BindingPattern {
            segments: key
                .segments()
                .map(|s| Segment::Word(s.to_string()))
                .collect(),
        }
    }
}

pub fn parse_binding_pattern(text: &str) -> Result<BindingPattern> {
    let invalid = |reason| LogModelError::InvalidPattern {
        text: text.to_string(),
        reason,
    };
    if text.is_empty() {
        return Err(invalid("empty pattern"));
    }
    if text.len() > MAX_KEY_BYTES {
        return Err(invalid("longer than 255 bytes"));
    }
    let segments = text
        .split('.')
        .map(|segment| match segment {
            "" => Err(invalid("empty segment")),
            "*" => Ok(Segment::Star),
            "#" => Ok(Segment::Hash),
            w if w.contains(['*', '#']) => Err(invalid("wildcard embedded in a word")),
            w if w.chars().any(char::is_whitespace) => Err(invalid("whitespace in a word")),
            w => Ok(Segment::Word(w.to_string())),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BindingPattern { segments })
}
