//! Per-aircraft delivery executive.
//!
//! [`mission_step`] is a pure transition function: it takes the current
//! [`MissionState`] and one [`Event`] and returns the next state together with
//! the [`Action`]s the simulator must carry out. The simulator owns physics
//! (positions, energy, clocks); the mission owns decisions and the dispenser.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dispatch::{confirm_load, JobState};
use crate::dispenser::{Article, CompartmentGrid, ManifestEntry, Orifice, RegionId};
use crate::planner::{apply_reschedule, segment_mode, FlightPlan, PlanStop, PlannerParams, SegmentMode};
use crate::protocol::{
    ack_chain, barcode_verify, AckContext, AlertContext, Barcode, Body, Draft, ScanResult,
};
use crate::world::{distance, Params, Position, SignatureVector, Verdict};

pub const BASE: &str = "base";
pub const OPERATOR: &str = "operator";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MissionParams {
    pub gps_tol_m: f64,
    pub battery_critical_frac: f64,
    pub confidence_threshold: f64,
    pub permission_timeout_s: f64,
    pub operator_timeout_s: f64,
    pub barcode_timeout_s: f64,
    pub max_reattempts: u32,
    pub max_reverify_loops: u32,
    /// Time to re-acquire a fix after an address re-verify.
    pub reverify_s: f64,
    pub bus_latency_s: f64,
    /// Minimum spacing between replans for a moving recipient.
    pub replan_interval_s: f64,
}

impl Default for MissionParams {
    fn default() -> Self {
        Self {
            gps_tol_m: 3.0,
            battery_critical_frac: 0.20,
            confidence_threshold: 0.85,
            permission_timeout_s: 30.0,
            operator_timeout_s: 60.0,
            barcode_timeout_s: 30.0,
            max_reattempts: 2,
            max_reverify_loops: 3,
            reverify_s: 2.0,
            bus_latency_s: 0.1,
            replan_interval_s: 10.0,
        }
    }
}

impl MissionParams {
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        for (name, v) in [
            ("gps_tol_m", self.gps_tol_m),
            ("permission_timeout_s", self.permission_timeout_s),
            ("operator_timeout_s", self.operator_timeout_s),
            ("barcode_timeout_s", self.barcode_timeout_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err((name, "must be > 0".into()));
            }
        }
        for (name, v) in [
            ("reverify_s", self.reverify_s),
            ("bus_latency_s", self.bus_latency_s),
            ("replan_interval_s", self.replan_interval_s),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err((name, "must be >= 0".into()));
            }
        }
        if !(0.0..1.0).contains(&self.battery_critical_frac) {
            return Err(("battery_critical_frac", "must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(("confidence_threshold", "must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    EnRoute,
    Arrived,
    GpsVerifying,
    AddressReverify,
    AltitudeCorrecting,
    HoverSafeDrop,
    AwaitingPermission,
    VerifyingSignature,
    AwaitingOperator,
    AwaitingBarcode,
    Dispensing,
    AwaitingAck,
    ClosingOrifice,
    PickupLanding,
    PickupLoading,
    ReturningToBase,
    Recharging,
    Done,
}

impl Phase {
    /// Phases that require the aircraft inside the band over a verified fix.
    pub fn is_safe_drop(self) -> bool {
        matches!(
            self,
            Phase::HoverSafeDrop
                | Phase::AwaitingPermission
                | Phase::VerifyingSignature
                | Phase::AwaitingOperator
                | Phase::AwaitingBarcode
                | Phase::Dispensing
        )
    }

    /// Phases during which the aircraft hovers and draws hover power.
    pub fn is_hovering(self) -> bool {
        self.is_safe_drop()
            || matches!(
                self,
                Phase::GpsVerifying | Phase::AddressReverify | Phase::AwaitingAck | Phase::ClosingOrifice
            )
    }

    pub fn is_landed(self) -> bool {
        matches!(self, Phase::PickupLanding | Phase::PickupLoading)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Hover,
    Landed,
}

/// Permission to open an orifice. Only the mission mints these: hover tokens
/// on entering the safe-drop hover over a verified address, landed tokens on
/// touchdown for top-loading.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SafeDropToken {
    kind: TokenKind,
    stop: String,
    issued_at_s: f64,
}

impl SafeDropToken {
    pub(crate) fn new(kind: TokenKind, stop: &str, issued_at_s: f64) -> Self {
        Self {
            kind,
            stop: stop.to_string(),
            issued_at_s,
        }
    }

    pub fn kind(&self) -> TokenKind {
        self.kind
    }

    pub fn stop(&self) -> &str {
        &self.stop
    }

    pub fn issued_at_s(&self) -> f64 {
        self.issued_at_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub article: String,
    pub region: RegionId,
    pub sensitive: bool,
    pub ballast: bool,
    pub sender: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopTask {
    pub address: String,
    pub position: Position,
    pub items: Vec<Item>,
    pub signature: Option<SignatureVector>,
    pub addressee: Option<String>,
    pub barcode: Option<Barcode>,
    /// The addressee acknowledges with their phone's scanner.
    pub scan_ack: bool,
    pub attempts: u32,
    pub not_before: f64,
    pub eta_s: f64,
    pub job: Option<String>,
}

impl StopTask {
    pub fn articles(&self) -> Vec<String> {
        self.items.iter().map(|i| i.article.clone()).collect()
    }

    fn plan_stop(&self) -> PlanStop {
        PlanStop {
            address: self.address.clone(),
            position: self.position,
            articles: self.articles(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickupTask {
    pub job: String,
    pub requester: String,
    pub position: Position,
    pub article: Article,
    /// Delivery leg appended once the article is aboard; `items` is filled in then.
    pub drop: StopTask,
    pub region: Option<RegionId>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Deliver(StopTask),
    Pickup(PickupTask),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "command", content = "alt")]
pub enum AltitudeCommand {
    DescendTo(f64),
    AscendTo(f64),
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GpsCheck {
    Match,
    Mismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guard {
    Continue,
    PauseAndReturn,
}

pub fn gps_verify(current: Position, target: Position, tol_m: f64) -> GpsCheck {
    if distance(current, target) <= tol_m {
        GpsCheck::Match
    } else {
        GpsCheck::Mismatch
    }
}

pub fn altitude_correction(current_alt: f64, band: [f64; 2]) -> AltitudeCommand {
    let mid = (band[0] + band[1]) / 2.0;
    if current_alt < band[0] {
        AltitudeCommand::AscendTo(mid)
    } else if current_alt > band[1] {
        AltitudeCommand::DescendTo(mid)
    } else {
        AltitudeCommand::Hold
    }
}

pub fn battery_guard(battery_j: f64, capacity_j: f64, critical_frac: f64) -> Guard {
    if battery_j < critical_frac * capacity_j {
        Guard::PauseAndReturn
    } else {
        Guard::Continue
    }
}

/// Time and energy to fly from `from` to `to`. Climb legs go up to cruise
/// first and come down to `to.alt` (cruise for stops, so the descent is left
/// to the altitude correction).
pub fn transit_cost(from: Position, to: Position, mode: SegmentMode, p: &PlannerParams) -> (f64, f64) {
    let d = distance(from, to);
    match mode {
        SegmentMode::Low => {
            let v = (to.alt - from.alt).abs();
            (d / p.speed_low_m_per_s + v / p.speed_vert_m_per_s, p.p_low_j_per_m * d + p.p_vert_j_per_m * v)
        }
        SegmentMode::Climb => {
            let v = (p.cruise_alt_m - from.alt).max(0.0) + (p.cruise_alt_m - to.alt).max(0.0);
            (
                d / p.speed_cruise_m_per_s + v / p.speed_vert_m_per_s,
                p.p_cruise_j_per_m * d + p.p_vert_j_per_m * v,
            )
        }
    }
}

pub fn vertical_cost(from_alt: f64, to_alt: f64, p: &PlannerParams) -> (f64, f64) {
    let v = (to_alt - from_alt).abs();
    (v / p.speed_vert_m_per_s, p.p_vert_j_per_m * v)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Start,
    Arrived { wait: u64, fix: Position },
    Fix { wait: u64, fix: Position },
    AltitudeReached { wait: u64, alt: f64 },
    Landed { wait: u64 },
    AtBase { wait: u64 },
    SignatureCaptured { wait: u64, confidence: f64 },
    Timeout { wait: u64 },
    Received { src: String, body: Body },
    /// The requester dropped the article into the open compartment.
    TopLoad { job: String },
    BatteryLow,
    AssignPickup(Box<PickupTask>),
    RetargetStop { address: String, position: Position },
}

impl Event {
    pub fn wait(&self) -> Option<u64> {
        match self {
            Event::Arrived { wait, .. }
            | Event::Fix { wait, .. }
            | Event::AltitudeReached { wait, .. }
            | Event::Landed { wait }
            | Event::AtBase { wait }
            | Event::SignatureCaptured { wait, .. }
            | Event::Timeout { wait } => Some(*wait),
            _ => None,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Event::Start => "start".into(),
            Event::Arrived { .. } => "arrived".into(),
            Event::Fix { .. } => "fix".into(),
            Event::AltitudeReached { .. } => "altitude_reached".into(),
            Event::Landed { .. } => "landed".into(),
            Event::AtBase { .. } => "at_base".into(),
            Event::SignatureCaptured { .. } => "signature_captured".into(),
            Event::Timeout { .. } => "timeout".into(),
            Event::Received { body, .. } => body.kind().into(),
            Event::TopLoad { .. } => "top_load".into(),
            Event::BatteryLow => "battery_low".into(),
            Event::AssignPickup(_) => "assign_pickup".into(),
            Event::RetargetStop { .. } => "retarget_stop".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Transition { from: Phase, to: Phase, trigger: String },
    Emit(Draft),
    FlyTo { wait: u64, target: Position, mode: SegmentMode },
    /// Short low move onto the corrected coordinates after a re-verify.
    Reposition { wait: u64, target: Position },
    CommandAltitude { wait: u64, command: AltitudeCommand },
    Land { wait: u64 },
    CaptureSignature { wait: u64, stop: String },
    StartTimer { wait: u64, after_s: f64 },
    Orifice { region: RegionId, state: Orifice, token: Option<SafeDropToken> },
    Released { article: String, region: RegionId, stop: String, ballast: bool },
    Loaded(ManifestEntry),
    Requeued { stop: String, attempts: u32, reason: String },
    Undeliverable { stop: String, articles: Vec<String>, reason: String, attempts: u32 },
    JobUpdate { job: String, state: JobState, reason: Option<String> },
    Recharged,
    Ignored { event: String },
    Fault(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissionState {
    pub aircraft: String,
    pub base: Position,
    pub phase: Phase,
    /// Physical position, kept current by the simulator.
    pub position: Position,
    pub at_base: bool,
    pub battery_j: f64,
    pub capacity_j: f64,
    pub grid: CompartmentGrid,
    pub plan: VecDeque<StopTask>,
    pub retry_queue: VecDeque<StopTask>,
    pub pickups: VecDeque<PickupTask>,
    pub current: Option<Target>,
    pub token: Option<SafeDropToken>,
    /// Id of the completion event the mission is waiting for; older ones are stale.
    pub wait: u64,
    pub reverify_loops: u32,
    pub verified: bool,
    pub decisions_issued: u32,
    pub pending_decision: Option<String>,
    pub last_alert: Option<AlertContext>,
    /// Battery fell below the critical fraction and no recharge has completed since.
    pub paused: bool,
    pause_pending: bool,
}

impl MissionState {
    pub fn new(aircraft: &str, base: Position, grid: CompartmentGrid, plan: Vec<StopTask>, capacity_j: f64) -> Self {
        Self {
            aircraft: aircraft.to_string(),
            base,
            phase: Phase::Idle,
            position: base,
            at_base: true,
            battery_j: capacity_j,
            capacity_j,
            grid,
            plan: plan.into(),
            retry_queue: VecDeque::new(),
            pickups: VecDeque::new(),
            current: None,
            token: None,
            wait: 0,
            reverify_loops: 0,
            verified: false,
            decisions_issued: 0,
            pending_decision: None,
            last_alert: None,
            paused: false,
            pause_pending: false,
        }
    }

    pub fn dispenser_id(&self) -> String {
        format!("{}/dispenser", self.aircraft)
    }

    pub fn current_stop(&self) -> Option<&StopTask> {
        match &self.current {
            Some(Target::Deliver(s)) => Some(s),
            _ => None,
        }
    }

    pub fn current_label(&self) -> Option<String> {
        match &self.current {
            Some(Target::Deliver(s)) => Some(s.address.clone()),
            Some(Target::Pickup(p)) => Some(p.job.clone()),
            None => None,
        }
    }

    pub fn remaining_stops(&self) -> usize {
        self.plan.len() + self.retry_queue.len() + self.pickups.len() + usize::from(self.current.is_some())
    }

    pub fn has_work(&self) -> bool {
        self.remaining_stops() > 0
    }

    /// Ready to take a hail: idle, finished, or heading home.
    pub fn available(&self) -> bool {
        matches!(self.phase, Phase::Idle | Phase::Done | Phase::ReturningToBase)
            && !self.paused
            && self.grid.regions().any(|r| r.article.is_none())
    }
}

pub fn mission_step(state: &MissionState, t: f64, event: &Event, params: &Params) -> (MissionState, Vec<Action>) {
    let mut m = state.clone();
    let mut cx = Ctx {
        t,
        p: params,
        out: Vec::new(),
    };
    m.handle(event, &mut cx);
    (m, cx.out)
}

struct Ctx<'a> {
    t: f64,
    p: &'a Params,
    out: Vec<Action>,
}

impl<'a> Ctx<'a> {
    fn planner(&self) -> &'a PlannerParams {
        &self.p.planner
    }

    fn mission(&self) -> &'a MissionParams {
        &self.p.mission
    }
}

impl MissionState {
    fn go(&mut self, cx: &mut Ctx, to: Phase, trigger: &str) {
        cx.out.push(Action::Transition {
            from: self.phase,
            to,
            trigger: trigger.to_string(),
        });
        self.phase = to;
    }

    fn emit(&self, cx: &mut Ctx, dst: &str, body: Body) {
        cx.out.push(Action::Emit(Draft::new(&self.aircraft, dst, body)));
    }

    fn next_wait(&mut self) -> u64 {
        self.wait += 1;
        self.wait
    }

    fn timer(&mut self, cx: &mut Ctx, after_s: f64) {
        let wait = self.next_wait();
        cx.out.push(Action::StartTimer { wait, after_s });
    }

    fn stop_mut(&mut self) -> Option<&mut StopTask> {
        match &mut self.current {
            Some(Target::Deliver(s)) => Some(s),
            _ => None,
        }
    }

    fn stop_address(&self) -> String {
        self.current_label().unwrap_or_default()
    }

    fn handle(&mut self, event: &Event, cx: &mut Ctx) {
        if let Some(w) = event.wait() {
            if w != self.wait {
                return;
            }
        }
        match (self.phase, event) {
            (_, Event::AssignPickup(task)) => {
                self.pickups.push_back((**task).clone());
                if matches!(self.phase, Phase::Done | Phase::ReturningToBase) && !self.paused {
                    self.advance(cx, "hail");
                }
            }
            (_, Event::RetargetStop { address, position }) => self.retarget(address, *position),
            (_, Event::BatteryLow) => self.on_battery_low(cx),
            (Phase::Idle, Event::Start) => {
                for s in &self.plan {
                    if let Some(to) = &s.addressee {
                        self.emit(
                            cx,
                            to,
                            Body::EnRouteNotice {
                                stop: s.address.clone(),
                                eta_s: s.eta_s,
                                articles: s.articles(),
                                barcode: s.barcode.as_ref().map(|b| b.0.clone()),
                            },
                        );
                    }
                }
                self.advance(cx, "start");
            }
            (Phase::EnRoute, Event::Arrived { fix, .. }) => match self.current {
                Some(Target::Deliver(_)) => {
                    self.go(cx, Phase::Arrived, "arrived");
                    self.go(cx, Phase::GpsVerifying, "verify");
                    self.verify(cx, *fix);
                }
                Some(Target::Pickup(_)) => {
                    self.go(cx, Phase::Arrived, "arrived");
                    self.go(cx, Phase::PickupLanding, "pickup");
                    let wait = self.next_wait();
                    cx.out.push(Action::Land { wait });
                }
                None => cx.out.push(Action::Fault("arrived without a target".into())),
            },
            (Phase::AddressReverify, Event::Fix { fix, .. }) => {
                self.go(cx, Phase::GpsVerifying, "fix");
                self.verify(cx, *fix);
            }
            (Phase::AltitudeCorrecting, Event::AltitudeReached { alt, .. }) => {
                match altitude_correction(*alt, cx.planner().safe_drop_band_m) {
                    AltitudeCommand::Hold => self.hover_entry(cx, "in_band"),
                    command => {
                        let wait = self.next_wait();
                        cx.out.push(Action::CommandAltitude { wait, command });
                    }
                }
            }
            (Phase::AwaitingPermission, Event::Received { body, .. }) => match body {
                Body::PermissionResponse { stop, granted } if *stop == self.stop_address() => {
                    if *granted {
                        self.after_permission(cx);
                    } else {
                        self.requeue(cx, "permission_denied");
                    }
                }
                Body::RescheduleRequest { stop, earliest_s } if *stop == self.stop_address() => {
                    self.reschedule(cx, *earliest_s);
                }
                _ => self.ignore(cx, event),
            },
            (Phase::AwaitingPermission, Event::Timeout { .. }) => self.requeue(cx, "permission_timeout"),
            (Phase::VerifyingSignature, Event::SignatureCaptured { confidence, .. }) => {
                if *confidence >= cx.mission().confidence_threshold {
                    self.handoff(cx, "signature_match");
                } else {
                    self.escalate(cx, *confidence);
                }
            }
            (Phase::AwaitingOperator, Event::Received { body, .. }) => match body {
                Body::OperatorDecisionResponse { decision, verdict }
                    if Some(decision) == self.pending_decision.as_ref() =>
                {
                    self.pending_decision = None;
                    match verdict {
                        Verdict::Approve => self.handoff(cx, "operator_approve"),
                        Verdict::Reject => self.requeue(cx, "operator_reject"),
                    }
                }
                _ => self.ignore(cx, event),
            },
            (Phase::AwaitingOperator, Event::Timeout { .. }) => {
                self.pending_decision = None;
                self.requeue(cx, "operator_timeout");
            }
            (Phase::AwaitingBarcode, Event::Received { body, .. }) => match body {
                Body::BarcodeScan { stop, code } if *stop == self.stop_address() => {
                    let expected = self.current_stop().and_then(|s| s.barcode.clone());
                    let scanned = Barcode(code.clone());
                    match expected.map(|e| barcode_verify(&e, &scanned)) {
                        Some(Ok(ScanResult::Matched)) => self.start_dispense(cx, "barcode_matched"),
                        _ => self.requeue(cx, "barcode_rejected"),
                    }
                }
                _ => self.ignore(cx, event),
            },
            (Phase::AwaitingBarcode, Event::Timeout { .. }) => self.requeue(cx, "barcode_timeout"),
            (Phase::Dispensing, Event::Timeout { .. }) => self.finish_dispense(cx),
            (Phase::PickupLanding, Event::Landed { .. }) => self.landed(cx),
            (Phase::PickupLoading, Event::TopLoad { job }) => self.top_load(cx, job),
            (Phase::PickupLoading, Event::Received { body, .. }) => match body {
                Body::LoadComplete { job } => self.load_complete(cx, job),
                _ => self.ignore(cx, event),
            },
            (Phase::PickupLoading, Event::Timeout { .. }) => {
                let job = self.stop_address();
                self.token = None;
                self.current = None;
                cx.out.push(Action::JobUpdate {
                    job,
                    state: JobState::Failed,
                    reason: Some("load_timeout".into()),
                });
                self.advance(cx, "load_timeout");
            }
            (Phase::ReturningToBase, Event::AtBase { .. }) => {
                self.at_base = true;
                if self.has_work() {
                    self.go(cx, Phase::Recharging, "at_base");
                    self.timer(cx, cx.planner().recharge_time_s);
                } else {
                    self.go(cx, Phase::Done, "at_base");
                }
            }
            (Phase::Recharging, Event::Timeout { .. }) => {
                self.battery_j = self.capacity_j;
                self.paused = false;
                cx.out.push(Action::Recharged);
                self.advance(cx, "recharged");
            }
            _ => self.ignore(cx, event),
        }
    }

    fn ignore(&self, cx: &mut Ctx, event: &Event) {
        cx.out.push(Action::Ignored { event: event.name() });
    }

    fn verify(&mut self, cx: &mut Ctx, fix: Position) {
        let Some(target) = self.current_stop().map(|s| s.position) else {
            cx.out.push(Action::Fault("verify without a stop".into()));
            return;
        };
        match gps_verify(fix, target, cx.mission().gps_tol_m) {
            GpsCheck::Match => {
                self.verified = true;
                self.go(cx, Phase::AltitudeCorrecting, "gps_match");
                match altitude_correction(fix.alt, cx.planner().safe_drop_band_m) {
                    AltitudeCommand::Hold => self.hover_entry(cx, "in_band"),
                    command => {
                        let wait = self.next_wait();
                        cx.out.push(Action::CommandAltitude { wait, command });
                    }
                }
            }
            GpsCheck::Mismatch => {
                if self.reverify_loops >= cx.mission().max_reverify_loops {
                    self.requeue(cx, "gps_mismatch");
                } else {
                    self.reverify_loops += 1;
                    self.go(cx, Phase::AddressReverify, "gps_mismatch");
                    let wait = self.next_wait();
                    cx.out.push(Action::Reposition { wait, target });
                }
            }
        }
    }

    fn hover_entry(&mut self, cx: &mut Ctx, trigger: &str) {
        self.go(cx, Phase::HoverSafeDrop, trigger);
        let stop = self.current_stop().cloned().expect("hover over a stop");
        self.token = Some(SafeDropToken::new(TokenKind::Hover, &stop.address, cx.t));
        let alert = AlertContext {
            aircraft: self.aircraft.clone(),
            stop: stop.address.clone(),
            articles: stop.articles(),
            position: self.position,
        };
        self.last_alert = Some(alert.clone());
        self.emit(cx, BASE, Body::DeliveryAlert(alert.clone()));
        if let Some(to) = &stop.addressee {
            self.emit(cx, to, Body::DeliveryAlert(alert));
        }
        self.go(cx, Phase::AwaitingPermission, "alerted");
        let grantor = stop.addressee.clone().unwrap_or_else(|| BASE.to_string());
        self.emit(
            cx,
            &grantor,
            Body::PermissionRequest {
                stop: stop.address.clone(),
                articles: stop.articles(),
            },
        );
        self.timer(cx, cx.mission().permission_timeout_s);
    }

    fn after_permission(&mut self, cx: &mut Ctx) {
        let stop = self.current_stop().expect("permission for a stop");
        if stop.signature.is_some() {
            let address = stop.address.clone();
            self.go(cx, Phase::VerifyingSignature, "permission_granted");
            let wait = self.next_wait();
            cx.out.push(Action::CaptureSignature { wait, stop: address });
        } else {
            self.handoff(cx, "permission_granted");
        }
    }

    fn escalate(&mut self, cx: &mut Ctx, confidence: f64) {
        let stop = self.stop_address();
        self.decisions_issued += 1;
        let decision = format!("{}-d{}", self.aircraft, self.decisions_issued);
        self.pending_decision = Some(decision.clone());
        self.emit(
            cx,
            BASE,
            Body::SignatureMismatch {
                stop: stop.clone(),
                confidence,
            },
        );
        self.go(cx, Phase::AwaitingOperator, "signature_low");
        let context = self.last_alert.clone().expect("alert precedes escalation");
        self.emit(
            cx,
            OPERATOR,
            Body::OperatorDecisionRequest {
                decision,
                stop,
                confidence,
                deadline_t_s: cx.t + cx.mission().operator_timeout_s,
                context,
            },
        );
        self.timer(cx, cx.mission().operator_timeout_s);
    }

    /// After permission (and signature or operator approval): barcode for
    /// sensitive articles, otherwise straight to dispensing.
    fn handoff(&mut self, cx: &mut Ctx, trigger: &str) {
        let stop = self.current_stop().cloned().expect("handoff at a stop");
        let sensitive = stop.items.iter().find(|i| i.sensitive);
        match sensitive {
            Some(item) => {
                self.go(cx, Phase::AwaitingBarcode, trigger);
                let to = stop.addressee.clone().unwrap_or_else(|| BASE.to_string());
                self.emit(
                    cx,
                    &to,
                    Body::BarcodeChallenge {
                        stop: stop.address.clone(),
                        article: item.article.clone(),
                    },
                );
                self.timer(cx, cx.mission().barcode_timeout_s);
            }
            None => self.start_dispense(cx, trigger),
        }
    }

    fn start_dispense(&mut self, cx: &mut Ctx, trigger: &str) {
        self.go(cx, Phase::Dispensing, trigger);
        let stop = self.current_stop().cloned().expect("dispense at a stop");
        let token = self.token.clone();
        for item in &stop.items {
            match self.grid.set_orifice(item.region, Orifice::Open, token.as_ref()) {
                Ok(()) => cx.out.push(Action::Orifice {
                    region: item.region,
                    state: Orifice::Open,
                    token: token.clone(),
                }),
                Err(e) => {
                    cx.out.push(Action::Fault(e.to_string()));
                    continue;
                }
            }
            match self.grid.dispense(item.region) {
                Ok(article) => cx.out.push(Action::Released {
                    article,
                    region: item.region,
                    stop: stop.address.clone(),
                    ballast: item.ballast,
                }),
                Err(e) => cx.out.push(Action::Fault(e.to_string())),
            }
        }
        self.timer(cx, cx.planner().dispense_dwell_s);
    }

    fn finish_dispense(&mut self, cx: &mut Ctx) {
        let stop = self.current_stop().cloned().expect("dispensing at a stop");
        for item in &stop.items {
            let _ = self.grid.set_orifice(item.region, Orifice::Closed, None);
            cx.out.push(Action::Orifice {
                region: item.region,
                state: Orifice::Closed,
                token: None,
            });
        }
        self.go(cx, Phase::AwaitingAck, "dwell_complete");
        for item in &stop.items {
            let ctx = AckContext {
                article: item.article.clone(),
                stop: stop.address.clone(),
                dispenser: self.dispenser_id(),
                base: BASE.to_string(),
                sender: item.sender.clone(),
                scanned_by: if stop.scan_ack { stop.addressee.clone() } else { None },
            };
            cx.out.extend(ack_chain(&ctx).into_iter().map(Action::Emit));
        }
        self.go(cx, Phase::ClosingOrifice, "acked");
        self.token = None;
        self.current = None;
        if let Some(job) = &stop.job {
            cx.out.push(Action::JobUpdate {
                job: job.clone(),
                state: JobState::Delivered,
                reason: None,
            });
        }
        self.advance(cx, "stop_complete");
    }

    fn requeue(&mut self, cx: &mut Ctx, reason: &str) {
        self.token = None;
        let Some(Target::Deliver(mut stop)) = self.current.take() else {
            cx.out.push(Action::Fault(format!("requeue without a stop ({reason})")));
            self.advance(cx, reason);
            return;
        };
        stop.attempts += 1;
        self.emit(
            cx,
            BASE,
            Body::AbortNotice {
                stop: stop.address.clone(),
                reason: reason.to_string(),
                attempts: stop.attempts,
            },
        );
        self.retire_or_requeue(cx, stop, reason);
        self.advance(cx, reason);
    }

    fn retire_or_requeue(&mut self, cx: &mut Ctx, stop: StopTask, reason: &str) {
        if stop.attempts > cx.mission().max_reattempts {
            cx.out.push(Action::Undeliverable {
                stop: stop.address.clone(),
                articles: stop.articles(),
                reason: reason.to_string(),
                attempts: stop.attempts,
            });
            if let Some(job) = &stop.job {
                cx.out.push(Action::JobUpdate {
                    job: job.clone(),
                    state: JobState::Failed,
                    reason: Some(reason.to_string()),
                });
            }
        } else {
            cx.out.push(Action::Requeued {
                stop: stop.address.clone(),
                attempts: stop.attempts,
                reason: reason.to_string(),
            });
            self.retry_queue.push_back(stop);
        }
    }

    fn reschedule(&mut self, cx: &mut Ctx, earliest_s: f64) {
        self.token = None;
        let Some(Target::Deliver(mut stop)) = self.current.take() else {
            return;
        };
        stop.attempts += 1;
        stop.not_before = earliest_s;
        let address = stop.address.clone();
        let addressee = stop.addressee.clone();
        self.emit(
            cx,
            BASE,
            Body::AbortNotice {
                stop: address.clone(),
                reason: "rescheduled".into(),
                attempts: stop.attempts,
            },
        );
        if stop.attempts > cx.mission().max_reattempts {
            self.retire_or_requeue(cx, stop, "rescheduled");
        } else {
            cx.out.push(Action::Requeued {
                stop: address.clone(),
                attempts: stop.attempts,
                reason: "rescheduled".into(),
            });
            self.plan.push_front(stop);
            let eta = self.reorder(cx, &address, earliest_s).map_or(earliest_s, |e| e.max(earliest_s));
            if let Some(s) = self.plan.iter_mut().find(|s| s.address == address) {
                s.eta_s = eta;
            }
            if let Some(to) = addressee {
                self.emit(cx, &to, Body::RescheduleConfirm { stop: address, eta_s: eta });
            }
        }
        self.advance(cx, "rescheduled");
    }

    /// Re-orders the remaining plan with the planner's reschedule rule and
    /// returns the revised ETA of `address`.
    fn reorder(&mut self, cx: &Ctx, address: &str, earliest_s: f64) -> Option<f64> {
        let stops: Vec<PlanStop> = self.plan.iter().map(StopTask::plan_stop).collect();
        let draft = FlightPlan::build(self.base, Some(self.position), stops, Vec::new(), cx.planner(), cx.t);
        let revised = apply_reschedule(&draft, address, earliest_s, cx.planner()).ok()?;
        let mut old: Vec<StopTask> = self.plan.drain(..).collect();
        for ps in &revised.stops {
            if let Some(k) = old.iter().position(|s| s.address == ps.address) {
                self.plan.push_back(old.remove(k));
            }
        }
        self.plan.extend(old);
        let idx = revised.position_of(address)?;
        Some(revised.etas_s[idx])
    }

    fn retarget(&mut self, address: &str, position: Position) {
        let hit = |s: &mut StopTask| {
            if s.address == address {
                s.position = position;
            }
        };
        if let Some(s) = self.stop_mut() {
            hit(s);
        }
        self.plan.iter_mut().for_each(hit);
        self.retry_queue.iter_mut().for_each(hit);
        for p in self.pickups.iter_mut() {
            hit(&mut p.drop);
        }
        if let Some(Target::Pickup(p)) = &mut self.current {
            hit(&mut p.drop);
        }
    }

    fn on_battery_low(&mut self, cx: &mut Ctx) {
        match self.phase {
            Phase::Idle | Phase::ReturningToBase | Phase::Recharging | Phase::Done => {}
            Phase::Dispensing | Phase::AwaitingAck | Phase::ClosingOrifice | Phase::PickupLanding | Phase::PickupLoading => {
                self.pause_pending = true;
            }
            _ => {
                self.token = None;
                self.pending_decision = None;
                match self.current.take() {
                    Some(Target::Deliver(s)) => self.plan.push_front(s),
                    Some(Target::Pickup(p)) => self.pickups.push_front(p),
                    None => {}
                }
                self.pause(cx);
            }
        }
    }

    fn pause(&mut self, cx: &mut Ctx) {
        let fraction = self.battery_j / self.capacity_j;
        self.emit(
            cx,
            BASE,
            Body::BatteryLow {
                battery_j: self.battery_j,
                fraction,
            },
        );
        let dispenser = self.dispenser_id();
        self.emit(
            cx,
            &dispenser,
            Body::PauseDeliveries {
                remaining_stops: self.remaining_stops(),
            },
        );
        self.paused = true;
        if self.at_base {
            self.go(cx, Phase::Recharging, "battery_low");
            self.timer(cx, cx.planner().recharge_time_s);
        } else {
            self.return_to_base(cx, "battery_low");
        }
    }

    fn return_to_base(&mut self, cx: &mut Ctx, trigger: &str) {
        self.go(cx, Phase::ReturningToBase, trigger);
        self.at_base = false;
        let wait = self.next_wait();
        cx.out.push(Action::FlyTo {
            wait,
            target: self.base.with_alt(0.0),
            mode: SegmentMode::Climb,
        });
    }

    fn leg_mode(&self, target: Position, p: &PlannerParams) -> SegmentMode {
        if self.at_base {
            SegmentMode::Climb
        } else {
            segment_mode(distance(self.position, target), p)
        }
    }

    fn arrival(target: Position, mode: SegmentMode, p: &PlannerParams) -> Position {
        match mode {
            SegmentMode::Low => target.with_alt(p.band_mid()),
            SegmentMode::Climb => target.with_alt(p.cruise_alt_m),
        }
    }

    /// Energy to reach `target`, work the stop with every timeout expiring,
    /// and still make it home.
    fn forecast(&self, target: Position, mode: SegmentMode, cx: &Ctx) -> f64 {
        let p = cx.planner();
        let mp = cx.mission();
        let arrive = Self::arrival(target, mode, p);
        let (_, there) = transit_cost(self.position, arrive, mode, p);
        let (_, settle) = vertical_cost(arrive.alt, p.band_mid(), p);
        let hover_s = mp.permission_timeout_s
            + mp.operator_timeout_s
            + mp.barcode_timeout_s
            + p.dispense_dwell_s
            + f64::from(mp.max_reverify_loops) * mp.reverify_s;
        let (_, home) = transit_cost(target.with_alt(p.band_mid()), self.base.with_alt(0.0), SegmentMode::Climb, p);
        there + settle + p.p_hover_w * hover_s + home
    }

    fn advance(&mut self, cx: &mut Ctx, trigger: &str) {
        self.token = None;
        self.verified = false;
        self.reverify_loops = 0;
        self.pending_decision = None;
        self.current = None;
        if self.pause_pending {
            self.pause_pending = false;
            self.pause(cx);
            return;
        }
        loop {
            let next = if let Some(p) = self.pickups.front() {
                Some((p.position, 0.0))
            } else {
                self.plan
                    .front()
                    .or(self.retry_queue.front())
                    .map(|s| (s.position, s.not_before))
            };
            let Some((target, not_before)) = next else {
                if self.at_base {
                    self.go(cx, Phase::Done, trigger);
                } else {
                    self.return_to_base(cx, trigger);
                }
                return;
            };
            let p = cx.planner();
            let mode = self.leg_mode(target, p);
            let arrive = Self::arrival(target, mode, p);
            let (dt, _) = transit_cost(self.position, arrive, mode, p);
            if not_before > cx.t + dt {
                if self.at_base {
                    self.go(cx, Phase::Recharging, "await_window");
                    let wait_s = (not_before - dt - cx.t).max(p.recharge_time_s);
                    self.timer(cx, wait_s);
                } else {
                    self.return_to_base(cx, "await_window");
                }
                return;
            }
            if self.battery_j < self.forecast(target, mode, cx) {
                if !self.at_base {
                    self.return_to_base(cx, "energy_reserve");
                    return;
                }
                if self.battery_j < self.capacity_j {
                    self.go(cx, Phase::Recharging, "energy_reserve");
                    self.timer(cx, p.recharge_time_s);
                    return;
                }
                self.drop_unreachable(cx);
                continue;
            }
            self.current = Some(if let Some(p) = self.pickups.pop_front() {
                Target::Pickup(p)
            } else if let Some(s) = self.plan.pop_front() {
                Target::Deliver(s)
            } else {
                Target::Deliver(self.retry_queue.pop_front().expect("checked above"))
            });
            self.at_base = false;
            self.go(cx, Phase::EnRoute, trigger);
            let wait = self.next_wait();
            cx.out.push(Action::FlyTo {
                wait,
                target: arrive,
                mode,
            });
            return;
        }
    }

    /// Even a full battery cannot serve the next task.
    fn drop_unreachable(&mut self, cx: &mut Ctx) {
        const REASON: &str = "insufficient_energy";
        if let Some(p) = self.pickups.pop_front() {
            cx.out.push(Action::JobUpdate {
                job: p.job,
                state: JobState::Failed,
                reason: Some(REASON.into()),
            });
            return;
        }
        let stop = self.plan.pop_front().or_else(|| self.retry_queue.pop_front());
        if let Some(stop) = stop {
            cx.out.push(Action::Undeliverable {
                stop: stop.address.clone(),
                articles: stop.articles(),
                reason: REASON.into(),
                attempts: stop.attempts,
            });
            if let Some(job) = stop.job {
                cx.out.push(Action::JobUpdate {
                    job,
                    state: JobState::Failed,
                    reason: Some(REASON.into()),
                });
            }
        }
    }

    fn landed(&mut self, cx: &mut Ctx) {
        let Some(Target::Pickup(task)) = &mut self.current else {
            cx.out.push(Action::Fault("landed without a pickup".into()));
            return;
        };
        let job = task.job.clone();
        let requester = task.requester.clone();
        match self.grid.make_room(&task.article) {
            Some(region) => {
                task.region = Some(region);
                self.token = Some(SafeDropToken::new(TokenKind::Landed, &job, cx.t));
                self.go(cx, Phase::PickupLoading, "landed");
                self.emit(
                    cx,
                    &requester,
                    Body::PickupArrival {
                        job,
                        aircraft: self.aircraft.clone(),
                    },
                );
                self.timer(cx, cx.mission().permission_timeout_s);
            }
            None => {
                self.current = None;
                cx.out.push(Action::JobUpdate {
                    job,
                    state: JobState::Failed,
                    reason: Some("no_room".into()),
                });
                self.advance(cx, "no_room");
            }
        }
    }

    fn top_load(&mut self, cx: &mut Ctx, job: &str) {
        let Some(Target::Pickup(task)) = &self.current else {
            return;
        };
        if task.job != job {
            cx.out.push(Action::Ignored {
                event: "top_load".into(),
            });
            return;
        }
        let (Some(region), Some(token)) = (task.region, self.token.clone()) else {
            cx.out.push(Action::Fault("top load without region or token".into()));
            return;
        };
        match self.grid.top_load(&task.article, region, &token) {
            Ok(entry) => {
                cx.out.push(Action::Orifice {
                    region,
                    state: Orifice::Open,
                    token: Some(token),
                });
                cx.out.push(Action::Orifice {
                    region,
                    state: Orifice::Closed,
                    token: None,
                });
                cx.out.push(Action::Loaded(entry));
            }
            Err(e) => cx.out.push(Action::Fault(e.to_string())),
        }
    }

    fn load_complete(&mut self, cx: &mut Ctx, job: &str) {
        let Some(Target::Pickup(task)) = &self.current else {
            return;
        };
        if task.job != job {
            return;
        }
        let Some(region) = task.region else {
            return;
        };
        if let Err(e) = confirm_load(self.phase, &self.grid, region) {
            cx.out.push(Action::Ignored {
                event: format!("LoadComplete ({e})"),
            });
            return;
        }
        let Some(Target::Pickup(task)) = self.current.take() else {
            unreachable!()
        };
        cx.out.push(Action::JobUpdate {
            job: task.job.clone(),
            state: JobState::PickedUp,
            reason: None,
        });
        let mut drop = task.drop;
        drop.items = vec![Item {
            article: task.article.id.clone(),
            region,
            sensitive: task.article.sensitive,
            ballast: task.article.ballast,
            sender: Some(task.requester.clone()),
        }];
        drop.job = Some(task.job.clone());
        let address = drop.address.clone();
        self.plan.push_back(drop);
        if let Some(eta) = self.reorder(cx, &address, cx.t) {
            if let Some(s) = self.plan.iter_mut().find(|s| s.address == address) {
                s.eta_s = eta;
            }
        }
        self.token = None;
        self.advance(cx, "load_complete");
    }
}
