mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use skydrop_core::audit::audit;
use skydrop_core::sim::{parse_log, run, DecideError, Engine, LogEntry, RunStatus, SimError};
use skydrop_core::world::{
    distance, load_scenario, InjectionScript, OperatorPolicy, Position, RecipientPolicy, RecipientSpec, Scenario,
    Verdict,
};

fn entries(s: &Scenario) -> (Vec<LogEntry>, skydrop_core::sim::RunReport) {
    let (log, report) = run(s).expect("scenario runs");
    (parse_log(&log.to_text()).expect("log parses"), report)
}

fn with_policy(mut s: Scenario, address: &str, policy: RecipientPolicy) -> Scenario {
    s.agents.recipients.insert(
        format!("r-{address}"),
        RecipientSpec {
            policy,
            scan_ack: false,
        },
    );
    s
}

fn kinds<'a>(log: &'a [LogEntry], kind: &'a str) -> impl Iterator<Item = &'a LogEntry> + 'a {
    log.iter().filter(move |e| e.kind == kind)
}

#[test]
fn single_drop_is_delivered() {
    let (log, report) = entries(&common::single_drop());
    assert_eq!(report.status, RunStatus::Completed);
    assert_eq!(report.delivered.len(), 1);
    assert!(report.undelivered.is_empty());
    let d = &report.delivered[0];
    assert_eq!((d.article.as_str(), d.stop.as_str()), ("a1", "A"));
    assert!(d.landing_offset_m <= d.dispersion_radius_m);
    assert!(audit(&log, &common::single_drop().params.mission).is_empty());
}

#[test]
fn absent_recipient_times_out_after_every_attempt() {
    let s = with_policy(common::single_drop(), "A", RecipientPolicy::Absent);
    let (log, report) = entries(&s);
    assert!(report.delivered.is_empty());
    assert_eq!(report.undelivered.len(), 1);
    let u = &report.undelivered[0];
    assert_eq!(u.reason, "permission_timeout");
    assert_eq!(u.attempts, s.params.mission.max_reattempts + 1);
    assert_eq!(kinds(&log, "AbortNotice").count(), 3);
    assert!(kinds(&log, "orifice").next().is_none());
}

#[test]
fn refusal_is_retried_then_abandoned() {
    let s = with_policy(common::single_drop(), "A", RecipientPolicy::ApproveWithProb { p: 0.0 });
    let (_, report) = entries(&s);
    assert_eq!(report.undelivered[0].reason, "permission_denied");
    assert_eq!(report.undelivered[0].attempts, 3);
}

#[test]
fn reschedule_waits_for_the_requested_time() {
    let s = with_policy(common::single_drop(), "A", RecipientPolicy::Reschedule { earliest_s: 900.0 });
    let (log, report) = entries(&s);
    assert_eq!(report.delivered.len(), 1);
    assert!(report.delivered[0].t_s >= 900.0);
    assert_eq!(report.message_counts.get("RescheduleRequest"), Some(&1));
    let confirm = kinds(&log, "RescheduleConfirm").next().expect("confirmation sent");
    assert_eq!(confirm.dst, "r-A");
    assert!(confirm.payload["eta_s"].as_f64().unwrap() >= 900.0);
}

fn sensitive_drop(correct: bool) -> Scenario {
    let mut s = common::single_drop();
    s.articles[0].sensitive = true;
    with_policy(s, "A", RecipientPolicy::PresentBarcode { correct })
}

#[test]
fn matching_barcode_releases_sensitive_article() {
    let (log, report) = entries(&sensitive_drop(true));
    assert_eq!(report.delivered.len(), 1);
    let notice = kinds(&log, "EnRouteNotice").next().unwrap();
    assert!(notice.payload["barcode"].is_string());
    let challenge = kinds(&log, "BarcodeChallenge").next().unwrap().seq;
    let dispense = kinds(&log, "dispense").next().unwrap().seq;
    assert!(challenge < dispense);
}

#[test]
fn wrong_barcode_never_opens_the_orifice() {
    let (log, report) = entries(&sensitive_drop(false));
    assert!(report.delivered.is_empty());
    assert_eq!(report.undelivered[0].reason, "barcode_rejected");
    assert!(kinds(&log, "orifice").next().is_none());
}

#[test]
fn gps_error_triggers_reverify_then_delivers() {
    let mut s = common::single_drop();
    s.agents.gps_errors.insert("A".into(), vec![12.0, 0.5]);
    let (log, report) = entries(&s);
    assert_eq!(report.delivered.len(), 1);
    let triggers: Vec<&str> = kinds(&log, "transition")
        .map(|e| e.payload["trigger"].as_str().unwrap())
        .collect();
    let mismatch = triggers.iter().position(|t| *t == "gps_mismatch").unwrap();
    let matched = triggers.iter().position(|t| *t == "gps_match").unwrap();
    assert!(mismatch < matched);
}

#[test]
fn persistent_gps_error_abandons_the_stop() {
    let mut s = common::single_drop();
    s.agents.gps_errors.insert("A".into(), vec![12.0]);
    let (log, report) = entries(&s);
    assert_eq!(report.undelivered[0].reason, "gps_mismatch");
    assert!(kinds(&log, "dispense").next().is_none());
}

#[test]
fn contraband_is_rejected_before_loading() {
    let mut s = common::single_drop();
    let mut bad = common::article("x1", "A");
    bad.contraband = true;
    s.articles.push(bad);
    let (log, report) = entries(&s);
    assert_eq!(report.rejected, vec!["x1".to_string()]);
    assert_eq!(report.delivered.len(), 1);
    let manifest = kinds(&log, "manifest").next().unwrap();
    assert!(!manifest.payload.to_string().contains("x1"));
}

#[test]
fn infeasible_leg_is_reported() {
    let mut s = common::single_drop();
    s.addresses[0].position = Position::ground(600_000.0, 0.0);
    let err = run(&s).unwrap_err();
    assert!(matches!(err, SimError::Infeasible { .. }));
    assert!(err.to_string().starts_with("infeasible_leg"));
}

#[test]
fn same_seed_same_bytes() {
    for seed in [3, 17, 40] {
        let s = common::mixed(seed);
        let a = run(&s).unwrap().0.to_text();
        let b = run(&s).unwrap().0.to_text();
        assert_eq!(a, b, "seed {seed}");
    }
}

#[test]
fn framing_sequence_is_contiguous() {
    let (log, _) = entries(&common::mixed(5));
    for (i, e) in log.iter().enumerate() {
        assert_eq!(e.seq, i as u64 + 1);
    }
    assert!(log.windows(2).all(|w| w[0].t <= w[1].t));
}

fn escalation_engine(operator: OperatorPolicy) -> Engine {
    Engine::new(common::escalation(&[3], operator, 7)).unwrap()
}

fn step_until_pending(e: &mut Engine) -> String {
    while e.pending_decisions().is_empty() {
        assert!(e.step(), "ran out of events before an escalation");
    }
    e.pending_decisions()[0].id.clone()
}

#[test]
fn manual_approval_is_consumed_once() {
    let mut e = escalation_engine(OperatorPolicy::Manual);
    let id = step_until_pending(&mut e);
    assert_eq!(id, "U1-d1");
    assert_eq!(e.decide("U1-d9", Verdict::Approve), Err(DecideError::NotFound));
    assert_eq!(e.decide(&id, Verdict::Approve), Ok(()));
    assert_eq!(e.decide(&id, Verdict::Approve), Err(DecideError::AlreadyDecided));
    assert!(e.pending_decisions().is_empty());
    e.run_to_end();
    let report = e.report();
    assert_eq!(report.delivered.len(), 10);
    assert_eq!(e.decide(&id, Verdict::Reject), Err(DecideError::Stopped));
}

#[test]
fn unanswered_escalation_expires() {
    let mut e = escalation_engine(OperatorPolicy::Manual);
    let id = step_until_pending(&mut e);
    let deadline = e.pending_decisions()[0].deadline_t_s.unwrap();
    e.run_until(deadline + 1.0);
    assert!(e.pending_decisions().is_empty());
    assert_eq!(e.decide(&id, Verdict::Approve), Err(DecideError::Expired));
    e.run_to_end();
    let log = parse_log(&e.log().to_text()).unwrap();
    let aborts: Vec<_> = kinds(&log, "AbortNotice").collect();
    assert_eq!(aborts[0].payload["reason"], "operator_timeout");
}

#[test]
fn scripted_injections_apply_in_order() {
    let mut probe = escalation_engine(OperatorPolicy::Manual);
    step_until_pending(&mut probe);
    let t = probe.now() + 1.0;
    let mut s = common::escalation(&[3], OperatorPolicy::Manual, 7);
    for verdict in [Verdict::Approve, Verdict::Reject] {
        s.agents.injections.push(InjectionScript {
            t_s: t,
            decision: "U1-d1".into(),
            verdict,
        });
    }
    let (log, report) = entries(&s);
    let results: Vec<(&str, &str)> = kinds(&log, "inject")
        .map(|e| (e.payload["verdict"].as_str().unwrap(), e.payload["result"].as_str().unwrap()))
        .collect();
    assert_eq!(results, vec![("approve", "accepted"), ("reject", "already_decided")]);
    assert_eq!(report.delivered.len(), 10);
    assert_eq!(kinds(&log, "OperatorDecisionResponse").count(), 1);
}

#[test]
fn rejected_escalations_are_retried_then_abandoned() {
    let s = common::escalation(&[2], OperatorPolicy::AutoReject, 11);
    let (log, report) = entries(&s);
    assert_eq!(report.delivered.len(), 9);
    assert_eq!(report.undelivered[0].reason, "operator_reject");
    assert_eq!(kinds(&log, "OperatorDecisionRequest").count(), 3);
}

#[test]
fn hailed_job_follows_the_recipient() {
    let (s, last_fix) = common::crowd(1);
    let (log, report) = entries(&s);
    assert_eq!(report.status, RunStatus::Completed);
    let states: Vec<&str> = kinds(&log, "job")
        .map(|e| e.payload["state"].as_str().unwrap())
        .collect();
    assert_eq!(states, ["requested", "offered", "booked", "picked_up", "delivered"]);
    let order = ["HailRequest", "HailOffer", "BookingConfirm", "PickupArrival", "LoadComplete"];
    let seqs: Vec<u64> = order.iter().map(|k| kinds(&log, k).next().unwrap().seq).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    let landed_open = kinds(&log, "orifice")
        .find(|e| e.payload["token"]["kind"] == "landed")
        .expect("top load through a landed token");
    assert!(landed_open.seq < seqs[4]);
    let d = &report.delivered[0];
    assert_eq!(d.stop, "J1:bob");
    let landing = Position::ground(d.landing_x, d.landing_y);
    assert!(distance(landing, last_fix) <= s.params.mission.gps_tol_m + d.dispersion_radius_m);
    assert!(audit(&log, &s.params.mission).is_empty());
}

#[test]
fn movements_inside_the_interval_are_coalesced() {
    let (s, _) = common::crowd(1);
    let (log, _) = entries(&s);
    let replans: Vec<f64> = kinds(&log, "replan").map(|e| e.t).collect();
    let picked = kinds(&log, "job").find(|e| e.payload["state"] == "picked_up").unwrap().t;
    let after: Vec<f64> = replans.into_iter().filter(|t| *t > picked).collect();
    assert!(after.windows(2).all(|w| w[1] - w[0] >= s.params.mission.replan_interval_s - 1e-9));
    assert_eq!(after.len(), 2);
}

#[test]
fn guard_trip_pauses_then_resumes_after_recharge() {
    let s = common::battery_drain(12, 27_000.0);
    let (log, report) = entries(&s);
    let trip = kinds(&log, "battery").next().expect("guard trips");
    assert_eq!(trip.payload["phase"], "Dispensing");
    let pause = kinds(&log, "PauseDeliveries").next().unwrap();
    let home = kinds(&log, "transition")
        .find(|e| e.seq > trip.seq && e.payload["to"] == "ReturningToBase")
        .unwrap();
    let recharge = kinds(&log, "recharge").next().unwrap();
    assert!(trip.seq < pause.seq && pause.seq < home.seq && home.seq < recharge.seq);
    let first_after = kinds(&log, "dispense").find(|e| e.seq > trip.seq).unwrap();
    assert!(first_after.seq > recharge.seq);
    assert_eq!(report.delivered.len(), 12);
    assert!(audit(&log, &s.params.mission).is_empty());
}

#[test]
fn scenario_json_round_trips() {
    for seed in 0..20 {
        let s = common::mixed(seed);
        assert_eq!(load_scenario(&s.to_json()).unwrap(), s);
    }
    let (s, _) = common::crowd(4);
    assert_eq!(load_scenario(&s.to_json()).unwrap(), s);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn run_invariants_hold(seed in 0u64..10_000) {
        let s = common::mixed(seed);
        let (log, report) = entries(&s);
        let capacity = s.params.planner.battery_capacity_j;
        for e in &log {
            if let Some(b) = e.payload.get("battery_j").and_then(|v| v.as_f64()) {
                prop_assert!(b >= -1e-6 && b <= capacity + 1e-6, "battery {} at seq {}", b, e.seq);
            }
            if e.kind == "dispense" {
                let offset = e.payload["offset_m"].as_f64().unwrap();
                prop_assert!(offset <= e.payload["radius_m"].as_f64().unwrap());
            }
        }
        for (craft, used) in &report.energy_used_j {
            let recharges = report.recharges[craft] as f64;
            prop_assert!(*used <= capacity * (recharges + 1.0) + 1e-6);
            prop_assert!(report.min_battery_j[craft] >= 0.0);
        }
        prop_assert_eq!(report.makespan_s, log.last().unwrap().t);
        let mut loaded = BTreeSet::new();
        for e in kinds(&log, "manifest") {
            for m in e.payload["entries"].as_array().unwrap() {
                loaded.insert(m["article"].as_str().unwrap().to_string());
            }
        }
        let mut settled = BTreeSet::new();
        for a in report.delivered.iter().map(|d| &d.article).chain(report.undelivered.iter().map(|u| &u.article)) {
            prop_assert!(settled.insert(a.clone()), "{} settled twice", a);
        }
        prop_assert!(loaded.is_subset(&settled));
        let violations = audit(&log, &s.params.mission);
        prop_assert!(violations.is_empty(), "{:?}", violations);
    }
}
