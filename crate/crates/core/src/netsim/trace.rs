//! Scenario traces: one event per line with a fixed field order, followed
//! by the terminal assertions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::crypto::Digest;
use crate::types::Tick;

pub const TRACE_HEADER: &str = "# vtn-trace v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub time: Tick,
    pub actor: String,
    pub event: String,
    pub digest: Option<Digest>,
    /// Space separated `key=value` pairs.
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ScenarioTrace {
    pub scenario: String,
    pub seed: u64,
    pub events: Vec<TraceEvent>,
    pub assertions: Vec<Assertion>,
}

impl ScenarioTrace {
    pub fn new(scenario: &str, seed: u64) -> Self {
        Self {
            scenario: scenario.to_string(),
            seed,
            ..Default::default()
        }
    }

    pub fn record(&mut self, time: Tick, actor: &str, event: &str, digest: Option<Digest>, detail: String) {
        self.events.push(TraceEvent {
            time,
            actor: actor.to_string(),
            event: event.to_string(),
            digest,
            detail: detail.replace('\n', " "),
        });
    }

    pub fn assert(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.assertions.push(Assertion {
            name: name.to_string(),
            passed,
            detail: detail.into().replace('\n', " "),
        });
    }

    pub fn passed(&self) -> bool {
        !self.assertions.is_empty() && self.assertions.iter().all(|a| a.passed)
    }

    pub fn failed_assertions(&self) -> Vec<&Assertion> {
        self.assertions.iter().filter(|a| !a.passed).collect()
    }

    pub fn events_named<'a>(&'a self, event: &'a str) -> impl Iterator<Item = &'a TraceEvent> + 'a {
        self.events.iter().filter(move |e| e.event == event)
    }

    pub fn count(&self, event: &str) -> usize {
        self.events_named(event).count()
    }

    pub fn position(&self, event: &str) -> Option<usize> {
        self.events.iter().position(|e| e.event == event)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{TRACE_HEADER}");
        let _ = writeln!(out, "# scenario={} seed={}", self.scenario, self.seed);
        for e in &self.events {
            let digest = e.digest.map_or_else(|| "-".to_string(), |d| d.to_hex());
            let _ = write!(out, "t={} actor={} event={} digest={}", e.time, e.actor, e.event, digest);
            if !e.detail.is_empty() {
                let _ = write!(out, " {}", e.detail);
            }
            out.push('\n');
        }
        for a in &self.assertions {
            let result = if a.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "assert name={} result={} {}", a.name, result, a.detail);
        }
        let result = if self.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "# result={result}");
        out
    }
}

/// Counts recovered from rendered trace text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TraceSummary {
    pub scenario: String,
    pub seed: u64,
    pub passed: bool,
    pub assertions_passed: usize,
    pub assertions_failed: usize,
    pub event_counts: BTreeMap<String, usize>,
}

impl TraceSummary {
    pub fn events(&self, name: &str) -> usize {
        self.event_counts.get(name).copied().unwrap_or(0)
    }
}

fn field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    line.split(' ')
        .find_map(|tok| tok.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
}

/// Reads a rendered trace back. Returns `None` for text that is not a trace.
pub fn summarize(text: &str) -> Option<TraceSummary> {
    let mut lines = text.lines();
    if lines.next()? != TRACE_HEADER {
        return None;
    }
    let mut s = TraceSummary::default();
    let mut saw_result = false;
    for line in lines {
        if let Some(rest) = line.strip_prefix("# ") {
            if let Some(sc) = field(rest, "scenario") {
                s.scenario = sc.to_string();
                s.seed = field(rest, "seed")?.parse().ok()?;
            } else if let Some(r) = field(rest, "result") {
                s.passed = r == "PASS";
                saw_result = true;
            }
        } else if line.starts_with("assert ") {
            match field(line, "result")? {
                "PASS" => s.assertions_passed += 1,
                _ => s.assertions_failed += 1,
            }
        } else if line.starts_with("t=") {
            *s.event_counts.entry(field(line, "event")?.to_string()).or_default() += 1;
        }
    }
    saw_result.then_some(s)
}
