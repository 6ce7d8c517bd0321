//! Paced mode: the engine advances with the wall clock and publishes a
//! snapshot plus new log lines after every tick. Other threads only see
//! the published copies and talk to the engine through the inbox.

use std::collections::VecDeque;
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::json;

use super::engine::{DecideError, Engine, PendingDecision};
use super::report::{JobSummary, RunReport};
use crate::mission::{Phase, Target};
use crate::world::Verdict;

pub const RING_CAPACITY: usize = 10_000;
const TICK: Duration = Duration::from_millis(10);
const REPLY_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CraftView {
    pub aircraft: String,
    pub phase: Phase,
    pub battery_pct: f64,
    pub x: f64,
    pub y: f64,
    pub alt: f64,
    pub current_stop: Option<String>,
    pub next_stop: Option<String>,
    pub eta_s: Option<f64>,
    pub remaining_stops: usize,
    pub delivered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub version: u64,
    pub t_s: f64,
    pub running: bool,
    pub fleet: Vec<CraftView>,
    pub jobs: Vec<JobSummary>,
    pub pending_decisions: Vec<PendingDecision>,
    pub delivered: usize,
    pub undelivered: usize,
}

impl Engine {
    pub fn snapshot(&self, version: u64) -> Snapshot {
        let fleet = self
            .crafts
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let m = &c.state;
                let pos = self.position_now(i);
                let next = m.pickups.front().map(|p| p.job.clone()).or_else(|| {
                    m.plan
                        .front()
                        .or(m.retry_queue.front())
                        .map(|s| s.address.clone())
                });
                let eta_s = match &m.current {
                    Some(Target::Deliver(s)) => Some(s.eta_s),
                    _ => m.plan.front().map(|s| s.eta_s),
                };
                CraftView {
                    aircraft: m.aircraft.clone(),
                    phase: m.phase,
                    battery_pct: 100.0 * m.battery_j / m.capacity_j,
                    x: pos.x,
                    y: pos.y,
                    alt: pos.alt,
                    current_stop: m.current_label(),
                    next_stop: next,
                    eta_s,
                    remaining_stops: m.remaining_stops(),
                    delivered: self.delivered.iter().filter(|d| d.aircraft == m.aircraft).count(),
                }
            })
            .collect();
        let report = self.report();
        Snapshot {
            version,
            t_s: self.now(),
            running: !self.is_finished(),
            fleet,
            jobs: report.jobs,
            pending_decisions: self.pending_decisions(),
            delivered: self.delivered.len(),
            undelivered: self.undelivered.len(),
        }
    }
}

enum Command {
    Decide {
        id: String,
        verdict: Verdict,
        reply: mpsc::Sender<Result<(), DecideError>>,
    },
}

struct Shared {
    snapshot: Option<Snapshot>,
    ring: VecDeque<String>,
    ring_capacity: usize,
    /// Seq of `ring[0]`; log seqs are contiguous from 1.
    first_seq: u64,
    inbox: Vec<Command>,
    stop_requested: bool,
    stopped: bool,
    report: Option<RunReport>,
}

/// Cloneable view of a paced run for other threads.
#[derive(Clone)]
pub struct LiveHandle(Arc<Mutex<Shared>>);

impl LiveHandle {
    fn lock(&self) -> MutexGuard<'_, Shared> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Latest published snapshot; `None` until the first tick.
    pub fn snapshot(&self) -> Option<Snapshot> {
        self.lock().snapshot.clone()
    }

    pub fn decide(&self, id: &str, verdict: Verdict) -> Result<(), DecideError> {
        let (tx, rx) = mpsc::channel();
        {
            let mut s = self.lock();
            if s.stopped {
                return Err(DecideError::Stopped);
            }
            s.inbox.push(Command::Decide {
                id: id.to_string(),
                verdict,
                reply: tx,
            });
        }
        rx.recv_timeout(REPLY_TIMEOUT).unwrap_or(Err(DecideError::Stopped))
    }

    /// Buffered log lines with seq greater than `since`. When the first
    /// wanted line has already left the buffer, a `gap` record comes first.
    pub fn events_since(&self, since: u64) -> Vec<String> {
        let s = self.lock();
        let mut out = Vec::new();
        if s.ring.is_empty() {
            return out;
        }
        let last = s.first_seq + s.ring.len() as u64 - 1;
        if since >= last {
            return out;
        }
        if since + 1 < s.first_seq {
            let gap = json!({
                "seq": s.first_seq - 1,
                "t": null,
                "src": "sim",
                "dst": "*",
                "kind": "gap",
                "payload": { "from_seq": since + 1, "to_seq": s.first_seq - 1 },
            });
            out.push(gap.to_string());
        }
        let skip = (since + 1).saturating_sub(s.first_seq) as usize;
        out.extend(s.ring.iter().skip(skip).cloned());
        out
    }

    pub fn request_stop(&self) {
        self.lock().stop_requested = true;
    }

    pub fn is_stopped(&self) -> bool {
        self.lock().stopped
    }

    pub fn report(&self) -> Option<RunReport> {
        self.lock().report.clone()
    }
}

pub struct LiveRunner {
    engine: Engine,
    handle: LiveHandle,
    pace: f64,
    published: usize,
    version: u64,
}

impl LiveRunner {
    pub fn new(engine: Engine, pace: f64) -> (Self, LiveHandle) {
        Self::with_capacity(engine, pace, RING_CAPACITY)
    }

    pub fn with_capacity(engine: Engine, pace: f64, ring_capacity: usize) -> (Self, LiveHandle) {
        assert!(pace > 0.0 && pace.is_finite(), "pace must be positive");
        let handle = LiveHandle(Arc::new(Mutex::new(Shared {
            snapshot: None,
            ring: VecDeque::new(),
            ring_capacity: ring_capacity.max(1),
            first_seq: 1,
            inbox: Vec::new(),
            stop_requested: false,
            stopped: false,
            report: None,
        })));
        let runner = Self {
            engine,
            handle: handle.clone(),
            pace,
            published: 0,
            version: 0,
        };
        (runner, handle)
    }

    /// Runs until quiescence or a stop request and hands the engine back.
    pub fn run(mut self) -> Engine {
        let start = Instant::now();
        loop {
            self.drain_inbox();
            let target = start.elapsed().as_secs_f64() * self.pace;
            self.engine.run_until(target);
            self.publish();
            if self.engine.is_finished() {
                break;
            }
            if self.handle.lock().stop_requested {
                self.engine.interrupt();
                self.publish();
                break;
            }
            thread::sleep(TICK);
        }
        let report = self.engine.report();
        let mut s = self.handle.lock();
        s.stopped = true;
        s.report = Some(report);
        for Command::Decide { reply, .. } in s.inbox.drain(..) {
            let _ = reply.send(Err(DecideError::Stopped));
        }
        drop(s);
        self.engine
    }

    fn drain_inbox(&mut self) {
        let commands: Vec<Command> = std::mem::take(&mut self.handle.lock().inbox);
        for Command::Decide { id, verdict, reply } in commands {
            let _ = reply.send(self.engine.decide(&id, verdict));
        }
    }

    fn publish(&mut self) {
        self.version += 1;
        let snapshot = self.engine.snapshot(self.version);
        let lines = self.engine.log().lines();
        let fresh = &lines[self.published..];
        let mut s = self.handle.lock();
        for l in fresh {
            s.ring.push_back(l.clone());
            if s.ring.len() > s.ring_capacity {
                s.ring.pop_front();
                s.first_seq += 1;
            }
        }
        s.snapshot = Some(snapshot);
        drop(s);
        self.published = lines.len();
    }
}
