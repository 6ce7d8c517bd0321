//! Line-delimited event log. Bus messages and simulator records share one
//! framing and one sequence counter.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::protocol::{encode, Message};

#[derive(Serialize)]
struct RecordRef<'a, P: Serialize> {
    seq: u64,
    t: f64,
    src: &'a str,
    dst: &'a str,
    kind: &'a str,
    payload: &'a P,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    lines: Vec<String>,
    next_seq: u64,
}

impl EventLog {
    pub fn new() -> Self {
        Self {
            lines: Vec::new(),
            next_seq: 1,
        }
    }

    pub fn next_seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    /// Appends an already-stamped bus message.
    pub fn push_message(&mut self, m: &Message) {
        self.lines.push(encode(m));
    }

    pub fn record<P: Serialize>(&mut self, t: f64, src: &str, dst: &str, kind: &str, payload: &P) -> u64 {
        let seq = self.next_seq();
        let line = serde_json::to_string(&RecordRef {
            seq,
            t,
            src,
            dst,
            kind,
            payload,
        })
        .expect("log records serialize");
        self.lines.push(line);
        seq
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// The whole log, one LF-terminated line per record.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.lines.iter().map(|l| l.len() + 1).sum());
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }
}

/// One parsed log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub t: f64,
    pub src: String,
    pub dst: String,
    pub kind: String,
    pub payload: Value,
}

pub fn parse_log(text: &str) -> Result<Vec<LogEntry>, (usize, serde_json::Error)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e)))
        .collect()
}
