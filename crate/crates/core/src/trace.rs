//! Event trace shared by the whole simulated deployment.
//!
//! Every notable action (commit acks, deletions, lease grants, cache
//! fetches) is appended here with the logical time at which it happened.
//! Tests replay the trace as a global referee; `bench diff` compares two
//! exported traces line by line.

use std::cell::{Cell, RefCell};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub time_ms: u64,
    pub seq: u64,
    pub actor: String,
    pub kind: String,
    pub detail: String,
}

#[derive(Debug, Default)]
pub struct Trace {
    events: RefCell<Vec<TraceEvent>>,
    seq: Cell<u64>,
    enabled: Cell<bool>,
}

impl Trace {
    pub fn new() -> Trace {
        Trace { events: RefCell::new(Vec::new()), seq: Cell::new(0), enabled: Cell::new(true) }
    }

    pub fn disabled() -> Trace {
        let t = Trace::new();
        t.enabled.set(false);
        t
    }

    pub fn record(&self, time_ms: u64, actor: &str, kind: &str, detail: String) {
        if !self.enabled.get() {
            return;
        }
        let seq = self.seq.get();
        self.seq.set(seq + 1);
        self.events.borrow_mut().push(TraceEvent {
            time_ms,
            seq,
            actor: actor.to_string(),
            kind: kind.to_string(),
            detail,
        });
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.events.borrow().clone()
    }

    pub fn len(&self) -> usize {
        self.events.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.borrow().is_empty()
    }

    /// Newline-delimited "time,actor,event_kind,detail" records.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for e in self.events.borrow().iter() {
            let _ = writeln!(out, "{},{},{},{}", e.time_ms, e.actor, e.kind, e.detail);
        }
        out
    }
}

/// Parses one exported line back into its four fields. The detail field
/// may itself contain commas, so only the first three are split.
pub fn parse_line(line: &str) -> Option<(u64, &str, &str, &str)> {
    let mut parts = line.splitn(4, ',');
    let time = parts.next()?.parse().ok()?;
    let actor = parts.next()?;
    let kind = parts.next()?;
    let detail = parts.next().unwrap_or("");
    Some((time, actor, kind, detail))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn export_and_parse_round_trip() {
        let t = Trace::new();
        t.record(5, "node/1", "commit", "scn=9,lsn=3".to_string());
        let exported = t.export();
        let (time, actor, kind, detail) = parse_line(exported.trim()).unwrap();
        assert_eq!(time, 5);
        assert_eq!(actor, "node/1");
        assert_eq!(kind, "commit");
        assert_eq!(detail, "scn=9,lsn=3");
    }

    #[test]
    fn disabled_trace_records_nothing() {
        let t = Trace::disabled();
        t.record(1, "a", "b", String::new());
        assert!(t.is_empty());
    }
}
