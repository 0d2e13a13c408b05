//! Independent oracles shared by integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

/// Translates a binding pattern to a regex anchored against `"." + key`.
pub fn pattern_regex(pattern: &str) -> Regex {
    let mut re = String::from("^");
    for seg in pattern.split('.') {
        match seg {
            "*" => re.push_str(r"\.[^.]+"),
            "#" => re.push_str(r"(?:\.[^.]+)*"),
            word => {
                re.push_str(r"\.");
                re.push_str(&regex::escape(word));
            }
        }
    }
    re.push('$');
    Regex::new(&re).unwrap()
}

pub fn regex_matches(pattern: &str, key: &str) -> bool {
    pattern_regex(pattern).is_match(&format!(".{key}"))
}

/// A randomized expectation list and event trace.
#[derive(Debug, Clone)]
pub struct TraceCase {
    /// (alternatives, max wait in ticks) per transition.
    pub specs: Vec<(Vec<String>, u64)>,
    /// (routing key, timestamp), timestamps non-decreasing.
    pub events: Vec<(String, u64)>,
    pub micros_per_tick: u64,
    pub origin: u64,
}

const ACTIONS: [&str; 3] = ["alpha", "beta", "gamma"];
const NAMES: [&str; 2] = ["n1", "n2"];

pub fn key(name: &str, action: &str) -> String {
    format!("Agent.{name}.{action}.info.Unit.op.1.res")
}

fn random_pattern(rng: &mut ChaCha8Rng) -> String {
    let action = ACTIONS[rng.random_range(0..ACTIONS.len())];
    let name = NAMES[rng.random_range(0..NAMES.len())];
    match rng.random_range(0..5) {
        0 => format!("Agent.*.{action}.#"),
        1 => format!("Agent.{name}.{action}.#"),
        2 => format!("*.{name}.#"),
        3 => format!("Agent.{name}.*.info.*.*.*.res"),
        _ => format!("#.{action}.#"),
    }
}

pub fn random_trace_case(seed: u64) -> TraceCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let micros_per_tick = 1_000;
    let origin = rng.random_range(0..5) * micros_per_tick;
    let specs = (0..rng.random_range(1..=4))
        .map(|_| {
            let alternatives = (0..rng.random_range(1..=2))
                .map(|_| random_pattern(&mut rng))
                .collect();
            (alternatives, rng.random_range(1..=6))
        })
        .collect();
    let mut ts = origin;
    let events = (0..rng.random_range(0..=10))
        .map(|_| {
            ts += rng.random_range(0..=3 * micros_per_tick);
            let name = NAMES[rng.random_range(0..NAMES.len())];
            let action = ACTIONS[rng.random_range(0..ACTIONS.len())];
            (key(name, action), ts)
        })
        .collect();
    TraceCase {
        specs,
        events,
        micros_per_tick,
        origin,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleVerdict {
    Pass,
    /// Index of the state the machine is stuck in, and whether a deadline
    /// (rather than the end of the trace) ended it.
    Fail {
        state: usize,
        timed_out: bool,
    },
}

/// `table[j][i]`: does event `i` satisfy transition `j`?
fn acceptance_table(case: &TraceCase) -> Vec<Vec<bool>> {
    case.specs
        .iter()
        .map(|(alts, _)| {
            let res: Vec<Regex> = alts.iter().map(|p| pattern_regex(p)).collect();
            case.events
                .iter()
                .map(|(key, _)| {
                    let dotted = format!(".{key}");
                    res.iter().any(|r| r.is_match(&dotted))
                })
                .collect()
        })
        .collect()
}

fn ticks(case: &TraceCase, from: u64, to: u64) -> u64 {
    to.saturating_sub(from) / case.micros_per_tick
}

/// Is `firing` (strictly increasing trace indices) the way a machine that
/// fires on the first acceptable event and never waits past a deadline
/// would walk the first `firing.len()` transitions?
fn legal_prefix(case: &TraceCase, table: &[Vec<bool>], firing: &[usize]) -> bool {
    let mut entered = case.origin;
    let mut from = 0;
    for (j, &at) in firing.iter().enumerate() {
        let spec = &case.specs[j];
        for (i, (_, ts)) in case.events.iter().enumerate().take(at + 1).skip(from) {
            if ticks(case, entered, *ts) > spec.1 {
                return false;
            }
            if table[j][i] != (i == at) {
                return false;
            }
        }
        entered = case.events[at].1;
        from = at + 1;
    }
    true
}

fn combinations(
    n: usize,
    k: usize,
    start: usize,
    current: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
) {
    if current.len() == k {
        out.push(current.clone());
        return;
    }
    for i in start..n {
        current.push(i);
        combinations(n, k, i + 1, current, out);
        current.pop();
    }
}

/// Longest legal firing sequence by exhaustive enumeration, then how the
/// machine ends.
pub fn brute_force(case: &TraceCase) -> OracleVerdict {
    let n = case.events.len();
    let table = acceptance_table(case);
    let mut best: Vec<usize> = Vec::new();
    for k in (1..=case.specs.len().min(n)).rev() {
        let mut all = Vec::new();
        combinations(n, k, 0, &mut Vec::new(), &mut all);
        if let Some(first) = all.into_iter().find(|c| legal_prefix(case, &table, c)) {
            best = first;
            break;
        }
    }
    let k = best.len();
    if k == case.specs.len() {
        return OracleVerdict::Pass;
    }
    let entered = best.last().map_or(case.origin, |&i| case.events[i].1);
    let from = best.last().map_or(0, |&i| i + 1);
    let timed_out = case.events[from..]
        .iter()
        .any(|(_, ts)| ticks(case, entered, *ts) > case.specs[k].1);
    OracleVerdict::Fail {
        state: k,
        timed_out,
    }
}

/// Expected state name: `start`, or the action word(s) of the transition
/// that led into the state.
pub fn state_name(case: &TraceCase, state: usize) -> String {
    if state == 0 {
        return "start".into();
    }
    case.specs[state - 1]
        .0
        .iter()
        .map(|p| {
            let segs: Vec<&str> = p.split('.').collect();
            let pinned = segs.len() > 2 && !segs[..3].contains(&"#") && segs[2] != "*";
            if pinned {
                segs[2].to_string()
            } else {
                p.clone()
            }
        })
        .collect::<Vec<_>>()
        .join("|")
}
