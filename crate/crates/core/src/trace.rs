//! Run traces: an append-only log of every model call and scheduler action.
//!
//! Every gateway call lands here with its request tag, so call-count
//! invariants (maps per node, reduces per sibling group, parses per chunk)
//! can be audited after a run.

use std::io::{BufRead, BufReader, Read, Write};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a chat request is for. Recorded on every call event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallTag {
    Parse,
    Summarize,
    Map,
    Reduce,
    Baseline,
}

/// Scheduler phase, present on map/reduce events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Map,
    Reduce,
}

impl CallTag {
    pub fn phase(self) -> Option<Phase> {
        match self {
            CallTag::Map => Some(Phase::Map),
            CallTag::Reduce => Some(Phase::Reduce),
            _ => None,
        }
    }
}

/// Kind of event recorded in a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// One logical chat completion (retries collapse into one event).
    ChatCall,
    /// One embedding batch request.
    EmbedCall,
    /// A fallback path was taken (parse repair exhausted, reduce fallback,
    /// clamped confidence, ...).
    Degradation,
}

/// Outcome of the logged action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Error(String),
    Degraded(String),
}

/// One trace record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Position in the finalized total order.
    pub seq: u64,
    /// Milliseconds since the trace was opened, at request start.
    pub started_ms: u64,
    /// Milliseconds since the trace was opened, at completion.
    pub finished_ms: u64,
    pub kind: EventKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tag: Option<CallTag>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub phase: Option<Phase>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub node_id: Option<String>,
    pub outcome: Outcome,
    /// User prompt for chat calls; fallback detail for degradations.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub detail: Option<String>,
}

/// Concurrent append-only log. Clones share the same underlying buffer.
#[derive(Clone)]
pub struct TraceLog {
    inner: Arc<Mutex<Vec<TraceEvent>>>,
    epoch: Instant,
}

impl Default for TraceLog {
    fn default() -> Self {
        Self::new()
    }
}

impl TraceLog {
    pub fn new() -> Self {
        Self {
            inner: Arc::new(Mutex::new(Vec::new())),
            epoch: Instant::now(),
        }
    }

    /// Milliseconds since this log was opened.
    pub fn now_ms(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    /// Append one event; `seq` is assigned under the lock.
    pub fn record(
        &self,
        started_ms: u64,
        kind: EventKind,
        tag: Option<CallTag>,
        node_id: Option<String>,
        outcome: Outcome,
        detail: Option<String>,
    ) {
        let finished_ms = self.now_ms();
        let mut events = self.inner.lock().expect("trace lock");
        let seq = events.len() as u64;
        events.push(TraceEvent {
            seq,
            started_ms,
            finished_ms,
            kind,
            tag,
            phase: tag.and_then(CallTag::phase),
            node_id,
            outcome,
            detail,
        });
    }

    /// Snapshot the log into an immutable trace with a total order.
    pub fn finalize(&self) -> RunTrace {
        let events = self.inner.lock().expect("trace lock").clone();
        RunTrace { events }
    }
}

/// Finalized, totally ordered event log of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub events: Vec<TraceEvent>,
}

impl RunTrace {
    /// Number of logical chat completions, optionally filtered by tag.
    pub fn count_calls(&self, tag_filter: Option<CallTag>) -> usize {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::ChatCall)
            .filter(|e| tag_filter.is_none_or(|t| e.tag == Some(t)))
            .count()
    }

    /// Events of a given kind.
    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// Write as line-delimited JSON records.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for event in &self.events {
            let line = serde_json::to_string(event)
                .map_err(|e| Error::MalformedBackendReply(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Read a trace back from line-delimited records, skipping blank lines.
    pub fn read_jsonl<R: Read>(input: R) -> Result<Self> {
        let reader = BufReader::new(input);
        let mut events = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event: TraceEvent =
                serde_json::from_str(&line).map_err(|e| Error::FormatError {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            events.push(event);
        }
        Ok(Self { events })
    }
}

/// Count chat completions in a finalized trace (free-function form).
pub fn count_calls(trace: &RunTrace, tag_filter: Option<CallTag>) -> usize {
    trace.count_calls(tag_filter)
}
