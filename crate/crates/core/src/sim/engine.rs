use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use super::log::EventLog;
use super::queue::EventQueue;
use super::report::{Delivered, JobSummary, RunReport, RunStatus, Undelivered};
use crate::dispatch::{hail, replan_tick, update_tracked_drop, DropTarget, FleetView, Job, JobState, Replan};
use crate::dispenser::{assign_articles, read_manifest, screen_batch, Article, Assignment, CompartmentGrid, Manifest};
use crate::mission::{
    battery_guard, mission_step, transit_cost, vertical_cost, Action, AltitudeCommand, Event, Guard, Item,
    MissionState, Phase, PickupTask, StopTask, Target, BASE, OPERATOR,
};
use crate::planner::{drop_dispersion, plan_flight, FlightPlan, PlanError, PlanStop, SegmentMode};
use crate::protocol::{
    barcode_issue, perturb, signature_confidence, wrong_barcode, AlertContext, Barcode, Body, Draft, Message,
};
use crate::rng::SplitMix64;
use crate::world::{OperatorPolicy, Position, RecipientPolicy, Scenario, ScenarioError, Verdict};

/// Events processed before a run is declared stalled.
pub const EVENT_CAP: u64 = 2_000_000;

const SIM: &str = "sim";
const ALL: &str = "*";

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{source} (aircraft {aircraft})")]
    Infeasible {
        aircraft: String,
        #[source]
        source: PlanError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CraftLoad {
    pub aircraft: String,
    pub grid: CompartmentGrid,
    pub assignment: Assignment,
    pub manifest: Manifest,
    pub plan: FlightPlan,
}

/// Result of screening, packing and planning a scenario's articles.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Loadout {
    pub rejected: Vec<String>,
    pub crafts: Vec<CraftLoad>,
    /// Accepted articles no aircraft had room for.
    pub unplaced: Vec<String>,
}

/// Screens and packs the articles aircraft by aircraft (leftovers spill to
/// the next one), then plans one flight per aircraft.
pub fn load_and_plan(s: &Scenario) -> Result<Loadout, SimError> {
    s.validate()?;
    let p = &s.params.planner;
    let (accepted, rejected) = screen_batch(&s.articles);
    let mut remaining = accepted;
    let mut crafts = Vec::new();
    for ac in &s.fleet {
        let mut grid = CompartmentGrid::new(ac.rows, ac.cols);
        let assignment = assign_articles(&remaining, &mut grid);
        let placed: BTreeSet<&str> = assignment.placements.iter().map(|pl| pl.article.as_str()).collect();
        let (mine, rest): (Vec<Article>, Vec<Article>) =
            remaining.iter().cloned().partition(|a| placed.contains(a.id.as_str()));
        let manifest = read_manifest(&grid, &mine);
        let stops: Vec<PlanStop> = s
            .addresses
            .iter()
            .filter_map(|addr| {
                let articles: Vec<String> =
                    mine.iter().filter(|a| a.destination == addr.id).map(|a| a.id.clone()).collect();
                (!articles.is_empty()).then(|| PlanStop {
                    address: addr.id.clone(),
                    position: addr.position,
                    articles,
                })
            })
            .collect();
        let plan = if stops.is_empty() {
            FlightPlan::build(s.base, None, Vec::new(), Vec::new(), p, 0.0)
        } else {
            plan_flight(s.base, stops, p).map_err(|source| SimError::Infeasible {
                aircraft: ac.id.clone(),
                source,
            })?
        };
        crafts.push(CraftLoad {
            aircraft: ac.id.clone(),
            grid,
            assignment,
            manifest,
            plan,
        });
        remaining = rest;
    }
    Ok(Loadout {
        rejected: rejected.into_iter().map(|a| a.id).collect(),
        crafts,
        unplaced: remaining.into_iter().map(|a| a.id).collect(),
    })
}

#[derive(Debug, Clone)]
struct Flight {
    from: Position,
    to: Position,
    depart: f64,
    arrive: f64,
    energy: f64,
    charged: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Craft {
    pub(crate) state: MissionState,
    flight: Option<Flight>,
    last_t: f64,
    pub(crate) energy_used: f64,
    pub(crate) recharges: u32,
    pub(crate) min_battery: f64,
    guard_tripped: bool,
    guard_gen: u64,
}

#[derive(Debug, Clone)]
enum Pending {
    Mission { craft: usize, event: Event },
    Deliver(Message),
    Guard { craft: usize, gen: u64 },
    Hail(usize),
    Movement(usize),
    ReplanTick(String),
    Inject { decision: String, verdict: Verdict },
    Assistance(usize),
    LoadButton { craft: usize, job: String, requester: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    SignatureEscalation,
    AssistanceRequest,
}

/// An escalation or assistance request waiting on the operator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PendingDecision {
    pub id: String,
    pub kind: DecisionKind,
    pub aircraft: Option<String>,
    /// Party the answer goes to.
    pub party: String,
    pub stop: Option<String>,
    pub confidence: Option<f64>,
    pub context: Option<AlertContext>,
    pub deadline_t_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DecisionStatus {
    Pending,
    Decided,
    Expired,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum DecideError {
    #[error("unknown decision")]
    NotFound,
    #[error("decision already made")]
    AlreadyDecided,
    #[error("decision deadline passed")]
    Expired,
    #[error("engine stopped")]
    Stopped,
}

impl DecideError {
    pub fn code(self) -> &'static str {
        match self {
            DecideError::NotFound => "not_found",
            DecideError::AlreadyDecided => "already_decided",
            DecideError::Expired => "expired",
            DecideError::Stopped => "engine_stopped",
        }
    }
}

pub struct Engine {
    s: Scenario,
    rng: SplitMix64,
    queue: EventQueue<Pending>,
    log: EventLog,
    now: f64,
    last_event_t: f64,
    pub(crate) crafts: Vec<Craft>,
    pub(crate) jobs: BTreeMap<String, Job>,
    drop_stops: BTreeMap<String, String>,
    barcodes: BTreeMap<(String, String), String>,
    decisions: Vec<(PendingDecision, DecisionStatus)>,
    fixes: BTreeMap<(usize, String), usize>,
    assistance_seq: u32,
    loaded: BTreeSet<String>,
    pub(crate) delivered: Vec<Delivered>,
    pub(crate) undelivered: Vec<Undelivered>,
    rejected: Vec<String>,
    message_counts: BTreeMap<String, u64>,
    processed: u64,
    status: Option<RunStatus>,
    diagnostic: Option<String>,
}

/// Fast-mode run to quiescence.
fn is_stale(crafts: &[Craft], item: &Pending) -> bool {
    match item {
        Pending::Mission { craft, event } => event.wait().is_some_and(|w| w != crafts[*craft].state.wait),
        Pending::Guard { craft, gen } => *gen != crafts[*craft].guard_gen,
        _ => false,
    }
}

pub fn run(scenario: &Scenario) -> Result<(EventLog, RunReport), SimError> {
    let mut e = Engine::new(scenario.clone())?;
    e.run_to_end();
    let report = e.report();
    Ok((e.into_log(), report))
}

impl Engine {
    pub fn new(s: Scenario) -> Result<Self, SimError> {
        let loadout = load_and_plan(&s)?;
        let mut e = Engine {
            rng: SplitMix64::new(s.seed),
            queue: EventQueue::new(),
            log: EventLog::new(),
            now: 0.0,
            last_event_t: 0.0,
            crafts: Vec::new(),
            jobs: BTreeMap::new(),
            drop_stops: BTreeMap::new(),
            barcodes: BTreeMap::new(),
            decisions: Vec::new(),
            fixes: BTreeMap::new(),
            assistance_seq: 0,
            loaded: BTreeSet::new(),
            delivered: Vec::new(),
            undelivered: Vec::new(),
            rejected: loadout.rejected.clone(),
            message_counts: BTreeMap::new(),
            processed: 0,
            status: None,
            diagnostic: None,
            s,
        };
        e.log.record(
            0.0,
            SIM,
            ALL,
            "header",
            &json!({
                "seed": e.s.seed,
                "fleet": e.s.fleet.iter().map(|a| a.id.as_str()).collect::<Vec<_>>(),
                "articles": e.s.articles.len(),
            }),
        );
        e.log
            .record(0.0, SIM, ALL, "screening", &json!({ "rejected": loadout.rejected }));
        for load in loadout.crafts {
            e.load_craft(load);
        }
        for article in &loadout.unplaced {
            let stop = e.s.articles.iter().find(|a| &a.id == article).map(|a| a.destination.clone());
            e.retire(article, &stop.unwrap_or_default(), "no_capacity", 0);
        }
        for i in 0..e.crafts.len() {
            e.queue.push(0.0, Pending::Mission { craft: i, event: Event::Start });
        }
        for (k, h) in e.s.agents.hails.iter().enumerate() {
            e.queue.push(h.t_s, Pending::Hail(k));
        }
        for (k, m) in e.s.agents.movements.iter().enumerate() {
            e.queue.push(m.t_s, Pending::Movement(k));
        }
        for inj in &e.s.agents.injections {
            e.queue.push(
                inj.t_s,
                Pending::Inject {
                    decision: inj.decision.clone(),
                    verdict: inj.verdict,
                },
            );
        }
        for (k, a) in e.s.agents.assistance.iter().enumerate() {
            e.queue.push(a.t_s, Pending::Assistance(k));
        }
        Ok(e)
    }

    fn load_craft(&mut self, load: CraftLoad) {
        let id = load.aircraft.clone();
        self.log.record(
            0.0,
            &id,
            SIM,
            "assignment",
            &json!({ "aircraft": id, "placements": load.assignment.placements, "unplaced": load.assignment.unplaced }),
        );
        self.log
            .record(0.0, &id, SIM, "manifest", &json!({ "aircraft": id, "entries": load.manifest.entries }));
        self.log.record(
            0.0,
            &id,
            SIM,
            "plan",
            &json!({ "aircraft": id, "plan": load.plan.document(&self.s.params.planner) }),
        );
        let mut tasks = Vec::new();
        for (k, ps) in load.plan.stops.iter().enumerate() {
            let addr = self.s.address(&ps.address).cloned();
            let items: Vec<Item> = load
                .manifest
                .entries
                .iter()
                .filter(|m| m.destination == ps.address)
                .filter_map(|m| {
                    let art = self.s.articles.iter().find(|a| a.id == m.article)?;
                    Some(Item {
                        article: art.id.clone(),
                        region: m.region,
                        sensitive: art.sensitive,
                        ballast: art.ballast,
                        sender: art.sender.clone(),
                    })
                })
                .collect();
            let barcode = items
                .iter()
                .find(|i| i.sensitive)
                .map(|i| barcode_issue(&i.article, &mut self.rng));
            let addressee = addr.as_ref().and_then(|a| a.addressee().map(str::to_string));
            let scan_ack = addressee.as_ref().is_some_and(|r| self.s.agents.recipient(r).scan_ack);
            tasks.push(StopTask {
                address: ps.address.clone(),
                position: ps.position,
                items,
                signature: addr.and_then(|a| a.signature),
                addressee,
                barcode,
                scan_ack,
                attempts: 0,
                not_before: 0.0,
                eta_s: load.plan.etas_s[k],
                job: None,
            });
        }
        self.loaded.extend(load.manifest.entries.iter().map(|m| m.article.clone()));
        let capacity = self.s.params.planner.battery_capacity_j;
        let state = MissionState::new(&id, self.s.base, load.grid, tasks, capacity);
        self.crafts.push(Craft {
            state,
            flight: None,
            last_t: 0.0,
            energy_used: 0.0,
            recharges: 0,
            min_battery: capacity,
            guard_tripped: false,
            guard_gen: 0,
        });
    }

    pub fn scenario(&self) -> &Scenario {
        &self.s
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn into_log(self) -> EventLog {
        self.log
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn status(&self) -> Option<RunStatus> {
        self.status
    }

    pub fn is_finished(&self) -> bool {
        self.status.is_some()
    }

    pub fn mission(&self, aircraft: &str) -> Option<&MissionState> {
        self.crafts.iter().map(|c| &c.state).find(|m| m.aircraft == aircraft)
    }

    pub fn pending_decisions(&self) -> Vec<PendingDecision> {
        self.decisions
            .iter()
            .filter(|(_, st)| *st == DecisionStatus::Pending)
            .map(|(d, _)| d.clone())
            .collect()
    }

    /// Processes the next event. Returns false once the run is over.
    pub fn step(&mut self) -> bool {
        if self.status.is_some() {
            return false;
        }
        let Some((t, _, item)) = self.queue.pop() else {
            if self.crafts.iter().all(|c| c.state.phase == Phase::Done) {
                self.finish(RunStatus::Completed, None);
            } else {
                self.finish(
                    RunStatus::Stalled,
                    Some("event queue drained before every aircraft finished".into()),
                );
            }
            return false;
        };
        if is_stale(&self.crafts, &item) {
            return true;
        }
        self.now = self.now.max(t);
        self.last_event_t = self.now;
        self.processed += 1;
        self.dispatch(item);
        if self.processed >= EVENT_CAP {
            self.finish(RunStatus::Stalled, Some(format!("event cap of {EVENT_CAP} reached")));
        }
        true
    }

    pub fn run_to_end(&mut self) {
        while self.step() {}
    }

    /// Processes every event due by virtual time `t` and moves the clock there.
    pub fn run_until(&mut self, t: f64) {
        while self.status.is_none() {
            match self.queue.peek_time() {
                Some(next) if next > t => break,
                _ => {
                    self.step();
                }
            }
        }
        if self.status.is_none() {
            self.now = self.now.max(t);
            let crafts = &self.crafts;
            self.queue.retain(|item| !is_stale(crafts, item));
            if self.queue.is_empty() {
                self.step();
            }
        }
    }

    fn dispatch(&mut self, item: Pending) {
        match item {
            Pending::Mission { craft, event } => self.feed(craft, event),
            Pending::Deliver(m) => self.deliver(m),
            Pending::Guard { craft, .. } => {
                self.update_physics(craft);
                self.check_guard(craft);
                self.schedule_guard(craft);
            }
            Pending::Hail(k) => self.start_hail(k),
            Pending::Movement(k) => self.movement(k),
            Pending::ReplanTick(job) => {
                let fix = self.jobs.get_mut(&job).and_then(|j| replan_tick(j, self.now));
                if let Some(fix) = fix {
                    self.retarget(&job, fix);
                }
            }
            Pending::Inject { decision, verdict } => {
                let result = match self.decide(&decision, verdict) {
                    Ok(()) => "accepted",
                    Err(e) => e.code(),
                };
                self.log.record(
                    self.now,
                    SIM,
                    ALL,
                    "inject",
                    &json!({ "decision": decision, "verdict": verdict, "result": result }),
                );
            }
            Pending::Assistance(k) => {
                self.assistance_seq += 1;
                let party = self.s.agents.assistance[k].party.clone();
                let request = format!("{party}-a{}", self.assistance_seq);
                self.emit(Draft::new(&party, OPERATOR, Body::AssistanceRequest { request }));
            }
            Pending::LoadButton { craft, job, requester } => {
                let aircraft = self.crafts[craft].state.aircraft.clone();
                self.emit(Draft::new(&requester, &aircraft, Body::LoadComplete { job }));
            }
        }
    }

    // -----------------------------------------------------------------------
    // Aircraft

    fn feed(&mut self, i: usize, event: Event) {
        self.update_physics(i);
        self.check_guard(i);
        if event.wait().is_some_and(|w| w != self.crafts[i].state.wait) {
            self.schedule_guard(i);
            return;
        }
        self.step_mission(i, event);
        self.schedule_guard(i);
    }

    fn step_mission(&mut self, i: usize, event: Event) {
        let (next, actions) = mission_step(&self.crafts[i].state, self.now, &event, &self.s.params);
        let old = std::mem::replace(&mut self.crafts[i].state, next);
        self.apply(i, &old, actions);
    }

    fn update_physics(&mut self, i: usize) {
        let p_hover = self.s.params.planner.p_hover_w;
        let t = self.now;
        let c = &mut self.crafts[i];
        let mut spent = 0.0;
        if let Some(f) = &mut c.flight {
            let frac = if f.arrive > f.depart {
                ((t - f.depart) / (f.arrive - f.depart)).clamp(0.0, 1.0)
            } else {
                1.0
            };
            let due = f.energy * frac;
            spent = due - f.charged;
            f.charged = due;
            c.state.position = Position::new(
                f.from.x + (f.to.x - f.from.x) * frac,
                f.from.y + (f.to.y - f.from.y) * frac,
                f.from.alt + (f.to.alt - f.from.alt) * frac,
            );
            if frac >= 1.0 {
                c.flight = None;
            }
        } else if c.state.phase.is_hovering() {
            spent = p_hover * (t - c.last_t);
        }
        c.state.battery_j -= spent;
        c.energy_used += spent;
        c.last_t = t;
        c.min_battery = c.min_battery.min(c.state.battery_j);
    }

    fn check_guard(&mut self, i: usize) {
        let frac = self.s.params.mission.battery_critical_frac;
        let c = &mut self.crafts[i];
        if c.guard_tripped || battery_guard(c.state.battery_j, c.state.capacity_j, frac) == Guard::Continue {
            return;
        }
        c.guard_tripped = true;
        let id = c.state.aircraft.clone();
        let payload = json!({
            "aircraft": id,
            "battery_j": c.state.battery_j,
            "fraction": c.state.battery_j / c.state.capacity_j,
            "phase": c.state.phase,
        });
        self.log.record(self.now, &id, SIM, "battery", &payload);
        self.step_mission(i, Event::BatteryLow);
    }

    /// Schedules a check at the instant the battery would cross the critical
    /// fraction if the current flight or hover continues.
    fn schedule_guard(&mut self, i: usize) {
        let p_hover = self.s.params.planner.p_hover_w;
        let frac = self.s.params.mission.battery_critical_frac;
        let now = self.now;
        let c = &mut self.crafts[i];
        c.guard_gen += 1;
        if c.guard_tripped {
            return;
        }
        let margin = c.state.battery_j - frac * c.state.capacity_j;
        let rate = match &c.flight {
            Some(f) if f.arrive > f.depart => {
                if f.energy - f.charged < margin {
                    return;
                }
                f.energy / (f.arrive - f.depart)
            }
            Some(_) => return,
            None if c.state.phase.is_hovering() => p_hover,
            None => return,
        };
        if rate <= 0.0 || margin < 0.0 {
            return;
        }
        let at = now + margin / rate;
        let at = at + at.abs() * 1e-12 + 1e-9;
        let gen = c.guard_gen;
        self.queue.push(at, Pending::Guard { craft: i, gen });
    }

    fn start_flight(&mut self, i: usize, to: Position, dt: f64, energy: f64) {
        let c = &mut self.crafts[i];
        c.flight = Some(Flight {
            from: c.state.position,
            to,
            depart: self.now,
            arrive: self.now + dt,
            energy,
            charged: 0.0,
        });
    }

    fn gps_error(&mut self, i: usize, stop: &str) -> f64 {
        let errors = &self.s.agents.gps_errors;
        let list = errors
            .get(stop)
            .or_else(|| stop.split_once(':').and_then(|(_, a)| errors.get(a)));
        let Some(list) = list.filter(|l| !l.is_empty()) else {
            return 0.0;
        };
        let n = self.fixes.entry((i, stop.to_string())).or_insert(0);
        let e = list[(*n).min(list.len() - 1)];
        *n += 1;
        e
    }

    fn capture_noise(&self, stop: &str) -> f64 {
        let noise = &self.s.agents.capture_noise;
        noise
            .get(stop)
            .or_else(|| stop.split_once(':').and_then(|(_, a)| noise.get(a)))
            .copied()
            .unwrap_or(0.0)
    }

    fn apply(&mut self, i: usize, old: &MissionState, actions: Vec<Action>) {
        let p = self.s.params.planner.clone();
        let id = old.aircraft.clone();
        let mut phase = old.phase;
        for a in actions {
            let now = self.now;
            match a {
                Action::Transition { from, to, trigger } => {
                    let m = &self.crafts[i].state;
                    let stop = if to == Phase::EnRoute {
                        m.current_label()
                    } else {
                        old.current_label().or_else(|| m.current_label())
                    };
                    let payload = json!({
                        "aircraft": id, "from": from, "to": to, "trigger": trigger,
                        "stop": stop, "battery_j": m.battery_j,
                    });
                    self.log.record(now, &id, SIM, "transition", &payload);
                    phase = to;
                    if from == Phase::AwaitingOperator {
                        self.expire_decisions(&id);
                    }
                }
                Action::Emit(d) => self.emit(d),
                Action::FlyTo { wait, target, mode } => {
                    let stop = match &self.crafts[i].state.current {
                        Some(Target::Deliver(s)) if phase == Phase::EnRoute => Some(s.address.clone()),
                        _ => None,
                    };
                    let err = stop.map_or(0.0, |s| self.gps_error(i, &s));
                    let to = Position::new(target.x + err, target.y, target.alt);
                    let (dt, energy) = transit_cost(self.crafts[i].state.position, to, mode, &p);
                    self.start_flight(i, to, dt, energy);
                    let event = if phase == Phase::ReturningToBase {
                        Event::AtBase { wait }
                    } else {
                        Event::Arrived { wait, fix: to }
                    };
                    self.queue.push(now + dt, Pending::Mission { craft: i, event });
                }
                Action::Reposition { wait, target } => {
                    let from = self.crafts[i].state.position;
                    let stop = self.crafts[i].state.current_label().unwrap_or_default();
                    let err = self.gps_error(i, &stop);
                    let to = Position::new(target.x + err, target.y, from.alt);
                    let (dt, energy) = transit_cost(from, to, SegmentMode::Low, &p);
                    let settle = self.s.params.mission.reverify_s;
                    self.start_flight(i, to, dt + settle, energy + p.p_hover_w * settle);
                    let event = Event::Fix { wait, fix: to };
                    self.queue.push(now + dt + settle, Pending::Mission { craft: i, event });
                }
                Action::CommandAltitude { wait, command } => {
                    let from = self.crafts[i].state.position;
                    let alt = match command {
                        AltitudeCommand::DescendTo(a) | AltitudeCommand::AscendTo(a) => a,
                        AltitudeCommand::Hold => from.alt,
                    };
                    let (dt, energy) = vertical_cost(from.alt, alt, &p);
                    self.start_flight(i, from.with_alt(alt), dt, energy);
                    let event = Event::AltitudeReached { wait, alt };
                    self.queue.push(now + dt, Pending::Mission { craft: i, event });
                }
                Action::Land { wait } => {
                    let from = self.crafts[i].state.position;
                    let (dt, energy) = vertical_cost(from.alt, 0.0, &p);
                    self.start_flight(i, from.with_alt(0.0), dt, energy);
                    self.queue.push(now + dt, Pending::Mission { craft: i, event: Event::Landed { wait } });
                }
                Action::CaptureSignature { wait, stop } => {
                    let stored = self.crafts[i].state.current_stop().and_then(|s| s.signature.clone());
                    let confidence = match stored {
                        Some(sig) => {
                            let rel = self.capture_noise(&stop);
                            let captured = perturb(&sig, rel, &mut self.rng);
                            signature_confidence(&sig, &captured).unwrap_or(0.0)
                        }
                        None => 0.0,
                    };
                    let payload = json!({
                        "aircraft": id, "stop": stop, "confidence": confidence,
                        "threshold": self.s.params.mission.confidence_threshold,
                    });
                    self.log.record(now, &id, SIM, "signature", &payload);
                    let event = Event::SignatureCaptured { wait, confidence };
                    self.queue.push(now, Pending::Mission { craft: i, event });
                }
                Action::StartTimer { wait, after_s } => {
                    self.queue.push(now + after_s, Pending::Mission { craft: i, event: Event::Timeout { wait } });
                }
                Action::Orifice { region, state, token } => {
                    let payload = json!({
                        "aircraft": id, "region": region, "state": state, "token": token, "phase": phase,
                    });
                    self.log.record(now, &id, SIM, "orifice", &payload);
                }
                Action::Released {
                    article,
                    region,
                    stop,
                    ballast,
                } => {
                    let pos = self.crafts[i].state.position;
                    let est = drop_dispersion(pos.alt, self.s.wind.speed, ballast, &p);
                    let r = est.dispersion_radius_m * self.rng.next_f64().sqrt();
                    let theta = std::f64::consts::TAU * self.rng.next_f64();
                    let (lx, ly) = (pos.x + r * theta.cos(), pos.y + r * theta.sin());
                    let payload = json!({
                        "aircraft": id, "article": article, "region": region, "stop": stop,
                        "alt": pos.alt, "ballast": ballast, "radius_m": est.dispersion_radius_m,
                        "offset_m": r, "landing": { "x": lx, "y": ly },
                    });
                    self.log.record(now, &id, SIM, "dispense", &payload);
                    self.delivered.push(Delivered {
                        article,
                        aircraft: id.clone(),
                        stop,
                        t_s: now,
                        landing_x: lx,
                        landing_y: ly,
                        landing_offset_m: r,
                        dispersion_radius_m: est.dispersion_radius_m,
                    });
                }
                Action::Loaded(entry) => {
                    self.loaded.insert(entry.article.clone());
                    self.log.record(now, &id, SIM, "loaded", &json!({ "aircraft": id, "entry": entry }));
                }
                Action::Requeued { stop, attempts, reason } => {
                    let payload = json!({ "aircraft": id, "stop": stop, "attempts": attempts, "reason": reason });
                    self.log.record(now, &id, SIM, "requeue", &payload);
                }
                Action::Undeliverable {
                    stop,
                    articles,
                    reason,
                    attempts,
                } => {
                    for article in &articles {
                        self.retire(article, &stop, &reason, attempts);
                    }
                }
                Action::JobUpdate { job, state, reason } => self.job_update(&job, state, reason),
                Action::Recharged => {
                    let c = &mut self.crafts[i];
                    c.recharges += 1;
                    c.guard_tripped = false;
                    let payload = json!({ "aircraft": id, "battery_j": c.state.battery_j });
                    self.log.record(now, &id, SIM, "recharge", &payload);
                }
                Action::Ignored { event } => {
                    let payload = json!({ "aircraft": id, "event": event, "phase": phase });
                    self.log.record(now, &id, SIM, "ignored", &payload);
                }
                Action::Fault(reason) => {
                    self.log.record(now, &id, SIM, "fault", &json!({ "aircraft": id, "reason": reason }));
                }
            }
        }
    }

    fn retire(&mut self, article: &str, stop: &str, reason: &str, attempts: u32) {
        let payload = json!({ "article": article, "stop": stop, "reason": reason, "attempts": attempts });
        self.log.record(self.now, SIM, ALL, "undelivered", &payload);
        self.undelivered.push(Undelivered {
            article: article.to_string(),
            stop: stop.to_string(),
            reason: reason.to_string(),
            attempts,
        });
    }

    fn job_update(&mut self, job: &str, state: JobState, reason: Option<String>) {
        let result = match self.jobs.get_mut(job) {
            Some(j) => j.advance(state).map_err(|e| e.to_string()),
            None => Err(format!("unknown job {job}")),
        };
        let payload = json!({ "job": job, "state": state, "reason": reason, "error": result.err() });
        self.log.record(self.now, SIM, ALL, "job", &payload);
    }

    // -----------------------------------------------------------------------
    // Bus and parties

    fn emit(&mut self, d: Draft) {
        let seq = self.log.next_seq();
        let m = d.stamp(seq, self.now);
        self.log.push_message(&m);
        *self.message_counts.entry(m.body.kind().to_string()).or_insert(0) += 1;
        let at = self.now + self.s.params.mission.bus_latency_s;
        self.queue.push(at, Pending::Deliver(m));
    }

    fn craft_index(&self, id: &str) -> Option<usize> {
        self.crafts.iter().position(|c| c.state.aircraft == id)
    }

    fn deliver(&mut self, m: Message) {
        if let Some(i) = self.craft_index(&m.dst) {
            self.feed(
                i,
                Event::Received {
                    src: m.src,
                    body: m.body,
                },
            );
        } else if m.dst == BASE {
            self.base_receive(m);
        } else if m.dst == OPERATOR {
            self.operator_receive(m);
        } else if !m.dst.ends_with("/dispenser") {
            self.party_receive(m);
        }
    }

    fn base_receive(&mut self, m: Message) {
        match m.body {
            Body::PermissionRequest { stop, .. } => {
                self.emit(Draft::new(BASE, &m.src, Body::PermissionResponse { stop, granted: true }));
            }
            Body::HailRequest { job, position } => {
                let fleet: Vec<FleetView> = (0..self.crafts.len())
                    .map(|i| FleetView {
                        id: self.crafts[i].state.aircraft.clone(),
                        position: self.position_now(i),
                        available: self.crafts[i].state.available(),
                    })
                    .collect();
                match hail(position, &fleet, &self.s.params.planner) {
                    Ok(offer) => {
                        if let Some(j) = self.jobs.get_mut(&job) {
                            j.aircraft = Some(offer.aircraft.clone());
                        }
                        self.job_update(&job, JobState::Offered, None);
                        let body = Body::HailOffer {
                            job,
                            aircraft: offer.aircraft,
                            eta_s: offer.eta_s,
                        };
                        self.emit(Draft::new(BASE, &m.src, body));
                    }
                    Err(e) => self.job_update(&job, JobState::Failed, Some(e.to_string())),
                }
            }
            Body::BookingConfirm { job } => self.book(&job),
            _ => {}
        }
    }

    pub(crate) fn position_now(&self, i: usize) -> Position {
        let c = &self.crafts[i];
        match &c.flight {
            Some(f) if f.arrive > f.depart => {
                let frac = ((self.now - f.depart) / (f.arrive - f.depart)).clamp(0.0, 1.0);
                Position::new(
                    f.from.x + (f.to.x - f.from.x) * frac,
                    f.from.y + (f.to.y - f.from.y) * frac,
                    f.from.alt + (f.to.alt - f.from.alt) * frac,
                )
            }
            Some(f) => f.to,
            None => c.state.position,
        }
    }

    fn book(&mut self, job_id: &str) {
        let Some(job) = self.jobs.get(job_id).cloned() else {
            return;
        };
        let Some(i) = job.aircraft.as_deref().and_then(|a| self.craft_index(a)) else {
            return;
        };
        self.job_update(job_id, JobState::Booked, None);
        let Some(script) = self.s.agents.hails.iter().find(|h| h.job == job_id).cloned() else {
            return;
        };
        let (label, addressee, signature) = match &job.drop {
            DropTarget::Address(a) => {
                let addr = self.s.address(a);
                (
                    a.clone(),
                    addr.and_then(|x| x.addressee().map(str::to_string)),
                    addr.and_then(|x| x.signature.clone()),
                )
            }
            DropTarget::Tracked { recipient } => (recipient.clone(), Some(recipient.clone()), None),
        };
        let address = format!("{job_id}:{label}");
        self.drop_stops.insert(job_id.to_string(), address.clone());
        let mut article = script.article.clone();
        article.destination = address.clone();
        if article.sender.is_none() {
            article.sender = Some(job.requester.clone());
        }
        let barcode: Option<Barcode> = article.sensitive.then(|| barcode_issue(&article.id, &mut self.rng));
        if let (Some(code), Some(to)) = (&barcode, &addressee) {
            let body = Body::EnRouteNotice {
                stop: address.clone(),
                eta_s: self.now,
                articles: vec![article.id.clone()],
                barcode: Some(code.0.clone()),
            };
            self.emit(Draft::new(BASE, to, body));
        }
        let scan_ack = addressee.as_ref().is_some_and(|r| self.s.agents.recipient(r).scan_ack);
        let task = PickupTask {
            job: job_id.to_string(),
            requester: job.requester.clone(),
            position: job.pickup,
            article,
            drop: StopTask {
                address,
                position: job.drop_position,
                items: Vec::new(),
                signature,
                addressee,
                barcode,
                scan_ack,
                attempts: 0,
                not_before: 0.0,
                eta_s: 0.0,
                job: Some(job_id.to_string()),
            },
            region: None,
        };
        let at = self.now + self.s.params.mission.bus_latency_s;
        self.queue.push(
            at,
            Pending::Mission {
                craft: i,
                event: Event::AssignPickup(Box::new(task)),
            },
        );
    }

    fn operator_receive(&mut self, m: Message) {
        let policy = self.s.agents.operator;
        match m.body {
            Body::OperatorDecisionRequest {
                decision,
                stop,
                confidence,
                deadline_t_s,
                context,
            } => {
                let live = self
                    .craft_index(&m.src)
                    .map(|i| &self.crafts[i].state)
                    .is_some_and(|s| s.phase == Phase::AwaitingOperator && s.pending_decision.as_ref() == Some(&decision));
                let info = PendingDecision {
                    id: decision.clone(),
                    kind: DecisionKind::SignatureEscalation,
                    aircraft: Some(m.src.clone()),
                    party: m.src,
                    stop: Some(stop),
                    confidence: Some(confidence),
                    context: Some(context),
                    deadline_t_s: Some(deadline_t_s),
                };
                let status = if live {
                    DecisionStatus::Pending
                } else {
                    DecisionStatus::Expired
                };
                self.decisions.push((info, status));
                if live {
                    self.auto_decide(&decision, policy);
                }
            }
            Body::AssistanceRequest { request } => {
                let info = PendingDecision {
                    id: request.clone(),
                    kind: DecisionKind::AssistanceRequest,
                    aircraft: None,
                    party: m.src,
                    stop: None,
                    confidence: None,
                    context: None,
                    deadline_t_s: None,
                };
                self.decisions.push((info, DecisionStatus::Pending));
                self.auto_decide(&request, policy);
            }
            _ => {}
        }
    }

    fn auto_decide(&mut self, id: &str, policy: OperatorPolicy) {
        let verdict = match policy {
            OperatorPolicy::AutoApprove => Verdict::Approve,
            OperatorPolicy::AutoReject => Verdict::Reject,
            OperatorPolicy::Timeout | OperatorPolicy::Manual => return,
        };
        let _ = self.decide(id, verdict);
    }

    /// Answers a pending decision; the response goes out on the bus now.
    pub fn decide(&mut self, id: &str, verdict: Verdict) -> Result<(), DecideError> {
        if self.status.is_some() {
            return Err(DecideError::Stopped);
        }
        let now = self.now;
        let (info, status) = self
            .decisions
            .iter_mut()
            .find(|(d, _)| d.id == id)
            .ok_or(DecideError::NotFound)?;
        match *status {
            DecisionStatus::Decided => return Err(DecideError::AlreadyDecided),
            DecisionStatus::Expired => return Err(DecideError::Expired),
            DecisionStatus::Pending => {}
        }
        if info.deadline_t_s.is_some_and(|d| now >= d) {
            *status = DecisionStatus::Expired;
            return Err(DecideError::Expired);
        }
        *status = DecisionStatus::Decided;
        let info = info.clone();
        let body = match info.kind {
            DecisionKind::SignatureEscalation => Body::OperatorDecisionResponse {
                decision: info.id,
                verdict,
            },
            DecisionKind::AssistanceRequest => Body::AssistanceResolved { request: info.id },
        };
        self.emit(Draft::new(OPERATOR, &info.party, body));
        Ok(())
    }

    fn expire_decisions(&mut self, aircraft: &str) {
        for (d, st) in &mut self.decisions {
            if *st == DecisionStatus::Pending && d.aircraft.as_deref() == Some(aircraft) {
                *st = DecisionStatus::Expired;
            }
        }
    }

    fn party_receive(&mut self, m: Message) {
        let me = m.dst.clone();
        let policy = self.s.agents.recipient(&me).policy;
        match m.body {
            Body::EnRouteNotice {
                stop,
                barcode: Some(code),
                ..
            } => {
                self.barcodes.insert((me, stop), code);
            }
            Body::PermissionRequest { stop, .. } => {
                let body = match policy {
                    RecipientPolicy::Absent => return,
                    RecipientPolicy::AlwaysApprove | RecipientPolicy::PresentBarcode { .. } => {
                        Body::PermissionResponse { stop, granted: true }
                    }
                    RecipientPolicy::ApproveWithProb { p } => Body::PermissionResponse {
                        stop,
                        granted: self.rng.chance(p),
                    },
                    RecipientPolicy::Reschedule { earliest_s } if self.now < earliest_s => {
                        Body::RescheduleRequest { stop, earliest_s }
                    }
                    RecipientPolicy::Reschedule { .. } => Body::PermissionResponse { stop, granted: true },
                };
                self.emit(Draft::new(&me, &m.src, body));
            }
            Body::BarcodeChallenge { stop, .. } => {
                if policy == RecipientPolicy::Absent {
                    return;
                }
                let Some(code) = self.barcodes.get(&(me.clone(), stop.clone())).cloned() else {
                    return;
                };
                let code = match policy {
                    RecipientPolicy::PresentBarcode { correct: false } => wrong_barcode(&Barcode(code)).0,
                    _ => code,
                };
                self.emit(Draft::new(&me, &m.src, Body::BarcodeScan { stop, code }));
            }
            Body::HailOffer { job, .. } => {
                self.emit(Draft::new(&me, BASE, Body::BookingConfirm { job }));
            }
            Body::PickupArrival { job, aircraft } => {
                let Some(i) = self.craft_index(&aircraft) else {
                    return;
                };
                let lat = self.s.params.mission.bus_latency_s;
                self.queue.push(
                    self.now + lat,
                    Pending::Mission {
                        craft: i,
                        event: Event::TopLoad { job: job.clone() },
                    },
                );
                self.queue.push(
                    self.now + 2.0 * lat,
                    Pending::LoadButton {
                        craft: i,
                        job,
                        requester: me,
                    },
                );
            }
            _ => {}
        }
    }

    // -----------------------------------------------------------------------
    // Crowd jobs

    fn start_hail(&mut self, k: usize) {
        let h = self.s.agents.hails[k].clone();
        let pickup = match &h.pickup {
            crate::world::PickupSpec::Address(a) => self.s.address(a).map(|x| x.position),
            crate::world::PickupSpec::Position(p) => Some(*p),
        };
        let drop = match &h.drop {
            crate::world::DropSpec::Address(a) => self
                .s
                .address(a)
                .map(|x| (DropTarget::Address(a.clone()), x.position)),
            crate::world::DropSpec::Tracked { recipient, position } => Some((
                DropTarget::Tracked {
                    recipient: recipient.clone(),
                },
                *position,
            )),
        };
        let (Some(pickup), Some((target, drop_position))) = (pickup, drop) else {
            self.log.record(self.now, SIM, ALL, "fault", &json!({ "reason": format!("hail {} unresolvable", h.job) }));
            return;
        };
        self.jobs
            .insert(h.job.clone(), Job::new(&h.job, &h.requester, pickup, target, drop_position));
        let payload = json!({ "job": h.job, "state": JobState::Requested, "reason": null, "error": null });
        self.log.record(self.now, SIM, ALL, "job", &payload);
        let body = Body::HailRequest {
            job: h.job.clone(),
            position: pickup,
        };
        self.emit(Draft::new(&h.requester, BASE, body));
    }

    fn movement(&mut self, k: usize) {
        let mv = self.s.agents.movements[k].clone();
        self.log.record(
            self.now,
            &mv.recipient,
            SIM,
            "movement",
            &json!({ "recipient": mv.recipient, "position": mv.position }),
        );
        let interval = self.s.params.mission.replan_interval_s;
        let ids: Vec<String> = self
            .jobs
            .values()
            .filter(|j| matches!(&j.drop, DropTarget::Tracked { recipient } if *recipient == mv.recipient))
            .map(|j| j.id.clone())
            .collect();
        for id in ids {
            let job = self.jobs.get_mut(&id).expect("job listed");
            match job.state {
                JobState::Delivered | JobState::Failed => {}
                JobState::PickedUp => match update_tracked_drop(job, mv.position, self.now, interval) {
                    Ok(Replan::Now(fix)) => self.retarget(&id, fix),
                    Ok(Replan::Deferred { at_s }) => {
                        self.queue.push(at_s, Pending::ReplanTick(id));
                    }
                    Ok(Replan::Unchanged) | Err(_) => {}
                },
                _ => {
                    job.drop_position = mv.position;
                    self.retarget(&id, mv.position);
                }
            }
        }
    }

    fn retarget(&mut self, job: &str, position: Position) {
        let stop = self.drop_stops.get(job).cloned();
        let payload = json!({ "job": job, "stop": stop, "position": position });
        self.log.record(self.now, SIM, ALL, "replan", &payload);
        let craft = self.jobs.get(job).and_then(|j| j.aircraft.clone());
        if let (Some(address), Some(i)) = (stop, craft.and_then(|a| self.craft_index(&a))) {
            self.feed(i, Event::RetargetStop { address, position });
        }
    }

    // -----------------------------------------------------------------------
    // Termination

    /// Ends the run where it stands; loaded articles still aboard are
    /// recorded as unresolved.
    pub fn interrupt(&mut self) {
        if self.status.is_none() {
            self.finish(RunStatus::Interrupted, Some("stopped before quiescence".into()));
        }
    }

    fn finish(&mut self, status: RunStatus, diagnostic: Option<String>) {
        let resolved: BTreeSet<String> = self
            .delivered
            .iter()
            .map(|d| d.article.clone())
            .chain(self.undelivered.iter().map(|u| u.article.clone()))
            .collect();
        let open: Vec<String> = self.loaded.difference(&resolved).cloned().collect();
        for article in open {
            self.retire(&article, "", "unresolved", 0);
        }
        self.now = self.last_event_t;
        let payload = json!({ "status": status, "diagnostic": diagnostic, "makespan_s": self.last_event_t });
        self.log.record(self.last_event_t, SIM, ALL, "end", &payload);
        self.status = Some(status);
        self.diagnostic = diagnostic;
    }

    pub fn report(&self) -> RunReport {
        let by_craft = |f: &dyn Fn(&Craft) -> f64| -> BTreeMap<String, f64> {
            self.crafts.iter().map(|c| (c.state.aircraft.clone(), f(c))).collect()
        };
        RunReport {
            seed: self.s.seed,
            status: self.status.unwrap_or(RunStatus::Stalled),
            diagnostic: self.diagnostic.clone(),
            delivered: self.delivered.clone(),
            undelivered: self.undelivered.clone(),
            rejected: self.rejected.clone(),
            energy_used_j: by_craft(&|c| c.energy_used),
            recharges: self.crafts.iter().map(|c| (c.state.aircraft.clone(), c.recharges)).collect(),
            min_battery_j: by_craft(&|c| c.min_battery),
            makespan_s: self.last_event_t,
            message_counts: self.message_counts.clone(),
            jobs: self
                .jobs
                .values()
                .map(|j| JobSummary {
                    job: j.id.clone(),
                    state: j.state,
                    aircraft: j.aircraft.clone(),
                })
                .collect(),
        }
    }
}
