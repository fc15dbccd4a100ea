use std::fmt;
use std::str::FromStr;

use crate::tree_model::StampToken;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    PushQuantile,
    PushGrad,
    Flush,
    GrowLayer,
    FinalizeTree,
    Kill,
    Restart,
}

impl EventKind {
    fn name(self) -> &'static str {
        match self {
            EventKind::PushQuantile => "push_quantile",
            EventKind::PushGrad => "push_grad",
            EventKind::Flush => "flush",
            EventKind::GrowLayer => "grow_layer",
            EventKind::FinalizeTree => "finalize_tree",
            EventKind::Kill => "kill",
            EventKind::Restart => "restart",
        }
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "push_quantile" => EventKind::PushQuantile,
            "push_grad" => EventKind::PushGrad,
            "flush" => EventKind::Flush,
            "grow_layer" => EventKind::GrowLayer,
            "finalize_tree" => EventKind::FinalizeTree,
            "kill" => EventKind::Kill,
            "restart" => EventKind::Restart,
            other => return Err(format!("unknown event {other:?}")),
        })
    }
}

/// One log line. `iteration` is the worker's batch counter, so
/// `(worker, iteration)` names the batch involved.
///
/// Outcomes: pushes are `accepted` or `stale`; flushes are
/// `layer;examples=N;weight=W` or `warm_up;examples=N;weight=W`;
/// `grow_layer` gives `splits=N`, `finalize_tree` gives `tree=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogEvent {
    pub iteration: u64,
    pub worker: u32,
    pub kind: EventKind,
    pub stamp: StampToken,
    pub outcome: String,
}

impl LogEvent {
    pub fn accepted(&self) -> bool {
        self.outcome == "accepted"
    }

    /// `key=value` field of the outcome.
    pub fn field(&self, key: &str) -> Option<&str> {
        self.outcome
            .split(';')
            .filter_map(|kv| kv.split_once('='))
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
    }
}

impl fmt::Display for LogEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.iteration,
            self.worker,
            self.kind.name(),
            self.stamp,
            self.outcome
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub events: Vec<LogEvent>,
}

impl RunLog {
    pub fn push(
        &mut self,
        iteration: u64,
        worker: u32,
        kind: EventKind,
        stamp: StampToken,
        outcome: impl Into<String>,
    ) {
        self.events.push(LogEvent {
            iteration,
            worker,
            kind,
            stamp,
            outcome: outcome.into(),
        });
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&e.to_string());
            s.push('\n');
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<Self, String> {
        let mut log = RunLog::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = |m: String| format!("line {}: {m}", i + 1);
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad(format!("expected 5 columns, found {}", cols.len())));
            }
            log.events.push(LogEvent {
                iteration: cols[0].parse().map_err(|_| bad("bad iteration".into()))?,
                worker: cols[1].parse().map_err(|_| bad("bad worker".into()))?,
                kind: cols[2].parse().map_err(bad)?,
                stamp: StampToken(cols[3].parse().map_err(|_| bad("bad stamp".into()))?),
                outcome: cols[4].to_string(),
            });
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_round_trip() {
        let mut log = RunLog::default();
        log.push(3, 1, EventKind::PushGrad, StampToken(2), "stale");
        log.push(4, 0, EventKind::Flush, StampToken(2), "layer;examples=50;weight=50");
        log.push(4, 0, EventKind::Kill, StampToken(3), "lost");
        let text = log.to_tsv();
        assert_eq!(text.lines().next().unwrap(), "3\t1\tpush_grad\t2\tstale");
        let back = RunLog::parse_tsv(&text).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.events[1].field("examples"), Some("50"));
        assert!(RunLog::parse_tsv("1\t2\tjump\t0\tok\n").is_err());
    }
}
