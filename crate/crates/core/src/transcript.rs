//! Ordered event log of one run, and its line-delimited trace encoding.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::seq::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Extend,
    Review,
    Trigger,
    Remask,
    Propose,
    ScoreCandidates,
    Select,
    Retain,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Payload {
    /// Block scores (review, extend under BoN, or selected window).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    /// Tokens of the block or window the event refers to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<TokenId>>,
    /// Candidate index for per-candidate events.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    /// Remask probability per window block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
    /// Masked in-block offsets per window block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<Vec<usize>>>,
    /// Masked window tokens after remasking.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked: Option<Vec<TokenId>>,
    /// Mask token id, on Remask events.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_id: Option<TokenId>,
    /// Per-candidate block scores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_scores: Option<Vec<Vec<f64>>>,
    /// Metric per candidate; for Select/Retain the original's metric comes first
    /// when it competed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Vec<f64>>,
    /// Chosen candidate index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub item: usize,
    pub event: EventKind,
    /// Inclusive block range.
    pub block_range: (usize, usize),
    pub payload: Payload,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    events: Vec<Event>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, item: usize, event: EventKind, block_range: (usize, usize), payload: Payload) {
        self.events.push(Event {
            item,
            event,
            block_range,
            payload,
        });
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.event == kind).count()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    /// Checks the ordering rules: Extend block indices never decrease per
    /// item, and each Trigger is closed by exactly one Select or Retain for
    /// the same item and window before the next Trigger or Extend.
    pub fn check_well_formed(&self) -> std::result::Result<(), String> {
        use std::collections::HashMap;
        let mut last_extend: HashMap<usize, usize> = HashMap::new();
        let mut open: HashMap<usize, (usize, usize)> = HashMap::new();
        for (i, e) in self.events.iter().enumerate() {
            match e.event {
                EventKind::Extend => {
                    if let Some(&prev) = last_extend.get(&e.item) {
                        if e.block_range.0 < prev {
                            return Err(format!("event {i}: extend went backwards"));
                        }
                    }
                    if open.contains_key(&e.item) {
                        return Err(format!("event {i}: extend inside an open trigger"));
                    }
                    last_extend.insert(e.item, e.block_range.0);
                }
                EventKind::Trigger => {
                    if open.insert(e.item, e.block_range).is_some() {
                        return Err(format!("event {i}: nested trigger"));
                    }
                }
                EventKind::Select | EventKind::Retain => {
                    if let Some(range) = open.remove(&e.item) {
                        if range != e.block_range {
                            return Err(format!("event {i}: closes a different window"));
                        }
                    }
                }
                _ => {}
            }
        }
        match open.keys().next() {
            Some(item) => Err(format!("item {item}: trigger never closed")),
            None => Ok(()),
        }
    }
}

/// One trace line: an event tagged with the run it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub run_id: String,
    pub item: usize,
    pub event: EventKind,
    pub block_range: (usize, usize),
    pub payload: Payload,
}

pub fn emit_trace<W: Write>(transcript: &Transcript, run_id: &str, mut out: W) -> Result<()> {
    for e in transcript.events() {
        let rec = TraceRecord {
            run_id: run_id.to_string(),
            item: e.item,
            event: e.event,
            block_range: e.block_range,
            payload: e.payload.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TraceRecord>> {
    let mut records = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_lines_carry_exact_field_names() {
        let mut t = Transcript::new();
        t.push(
            0,
            EventKind::Review,
            (0, 7),
            Payload {
                scores: Some(vec![0.95, 0.1]),
                ..Default::default()
            },
        );
        let mut buf = Vec::new();
        emit_trace(&t, "run-1", &mut buf).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            line,
            "{\"run_id\":\"run-1\",\"item\":0,\"event\":\"Review\",\"block_range\":[0,7],\"payload\":{\"scores\":[0.95,0.1]}}\n"
        );
        let back = read_trace(&buf[..]).unwrap();
        assert_eq!(back[0].event, EventKind::Review);
        assert_eq!(back[0].payload.scores, Some(vec![0.95, 0.1]));
    }

    #[test]
    fn well_formedness() {
        let mut t = Transcript::new();
        t.push(0, EventKind::Extend, (0, 0), Payload::default());
        t.push(0, EventKind::Trigger, (0, 0), Payload::default());
        assert!(t.check_well_formed().is_err());
        t.push(0, EventKind::Retain, (0, 0), Payload::default());
        t.check_well_formed().unwrap();
        t.push(0, EventKind::Extend, (0, 0), Payload::default());
        t.check_well_formed().unwrap();
    }
}
