//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fail.

mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use skydrop_core::audit::{check_accounting, check_acks, check_attempts, check_orifices};
use skydrop_core::planner::*;
use skydrop_core::protocol::{decode, encode};
use skydrop_core::rng::SplitMix64;
use skydrop_core::sim::{parse_log, run, Engine, LogEntry, RunReport};
use skydrop_core::world::{distance, Address, InjectionScript, OperatorPolicy, Position, Scenario, Verdict};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn entries(s: &Scenario) -> (Vec<LogEntry>, RunReport) {
    let (log, report) = run(s).expect("scenario runs");
    (parse_log(&log.to_text()).expect("log parses"), report)
}

fn count(log: &[LogEntry], kind: &str) -> usize {
    log.iter().filter(|e| e.kind == kind).count()
}

fn closed_length(base: Position, pts: &[Position]) -> f64 {
    let mut here = base;
    let mut total = 0.0;
    for &p in pts {
        total += ((p.x - here.x).powi(2) + (p.y - here.y).powi(2)).sqrt();
        here = p;
    }
    total + ((base.x - here.x).powi(2) + (base.y - here.y).powi(2)).sqrt()
}

/// Heap's algorithm over every ordering.
fn oracle_tour(base: Position, pts: &[Position]) -> f64 {
    let mut a = pts.to_vec();
    let n = a.len();
    let mut c = vec![0; n];
    let mut best = closed_length(base, &a);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            best = best.min(closed_length(base, &a));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn route_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = SplitMix64::new(2024);
    let base = Position::default();
    let (mut not_worse, mut optimal, mut brute_agrees) = (0, 0, 0);
    const N: usize = 200;
    for _ in 0..N {
        let n = 6 + rng.below(3) as usize;
        let stops: Vec<Address> = (0..n)
            .map(|i| common::address(&format!("s{i}"), rng.uniform(-3000.0, 3000.0), rng.uniform(-3000.0, 3000.0)))
            .collect();
        let positions: Vec<Position> = stops.iter().map(|s| s.position).collect();
        let nn = tour_length(base, &stops, &nearest_neighbor(base, &stops));
        let opt = tour_length(base, &stops, &plan_route(base, &stops));
        let best = oracle_tour(base, &positions);
        let brute = tour_length(base, &stops, &brute_force_route(base, &stops).unwrap());
        not_worse += usize::from(opt <= nn + LENGTH_EPS);
        optimal += usize::from(opt <= best + 1e-6);
        brute_agrees += usize::from((brute - best).abs() <= 1e-6);
    }
    let secs = start.elapsed().as_secs_f64();
    let ratio = optimal as f64 / N as f64;
    check(
        not_worse == N && ratio >= 0.80 && brute_agrees == N && secs < 5.0,
        format!(
            "2-opt <= NN {not_worse}/{N}, optimal {optimal}/{N} (ratio {ratio:.3}), brute force agrees {brute_agrees}/{N}, {secs:.2} s"
        ),
    )
}

/// Cheapest climb/low assignment by direct enumeration of the energy model.
fn oracle_profile_energy(base: Position, pts: &[Position], p: &PlannerParams) -> f64 {
    let dh = p.cruise_alt_m - (p.safe_drop_band_m[0] + p.safe_drop_band_m[1]) / 2.0;
    let climb = |d: f64| p.p_cruise_j_per_m * d + 2.0 * p.p_vert_j_per_m * dh;
    let low = |d: f64| p.p_low_j_per_m * d;
    let ends = climb(distance(base, pts[0])) + climb(distance(*pts.last().unwrap(), base));
    let inner: Vec<f64> = pts.windows(2).map(|w| distance(w[0], w[1])).collect();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << inner.len()) {
        let e: f64 = inner
            .iter()
            .enumerate()
            .map(|(k, &x)| if mask & (1 << k) != 0 { climb(x) } else { low(x) })
            .sum();
        best = best.min(ends + e);
    }
    best + pts.len() as f64 * p.p_hover_w * p.dispense_dwell_s
}

fn altitude_profile() -> Outcome {
    let p = PlannerParams::default();
    let mut rng = SplitMix64::new(77);
    let base = Position::default();
    let (mut exact, mut oracle_agrees) = (0, 0);
    const N: usize = 100;
    for _ in 0..N {
        let n = 1 + rng.below(11) as usize;
        let pts: Vec<Position> = (0..n)
            .map(|_| Position::ground(rng.uniform(-2500.0, 2500.0), rng.uniform(-2500.0, 2500.0)))
            .collect();
        let profile = plan_altitude_profile(base, &pts, &p);
        let energy = profile_energy(base, &pts, &profile.modes, &p);
        let (_, best) = enumerate_altitude_profiles(base, &pts, &p).unwrap();
        exact += usize::from(energy == best);
        let oracle = oracle_profile_energy(base, &pts, &p);
        oracle_agrees += usize::from((energy - oracle).abs() <= 1e-9 * oracle);
    }
    let dh = p.cruise_alt_m - (p.safe_drop_band_m[0] + p.safe_drop_band_m[1]) / 2.0;
    let d_star = 2.0 * p.p_vert_j_per_m * dh / (p.p_low_j_per_m - p.p_cruise_j_per_m);
    check(
        exact == N && oracle_agrees == N && d_star == 648.0 && break_even_distance(&p) == d_star,
        format!("exact {exact}/{N}, oracle {oracle_agrees}/{N}, d* = {d_star} m"),
    )
}

fn safety_audit(runs: &[(Scenario, Vec<LogEntry>, RunReport)]) -> Outcome {
    let mut problems = Vec::new();
    let mut dispenses = 0;
    for (s, log, _) in runs {
        dispenses += count(log, "dispense");
        problems.extend(check_orifices(log));
        problems.extend(check_accounting(log));
        problems.extend(check_attempts(log, s.params.mission.max_reattempts));
    }
    check(
        problems.is_empty(),
        format!(
            "{} runs, {dispenses} dispenses, {} violations{}",
            runs.len(),
            problems.len(),
            problems.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
        ),
    )
}

fn battery_guard() -> Outcome {
    let (log, report) = entries(&common::battery_drain(12, 27_000.0));
    let Some(trip) = log.iter().find(|e| e.kind == "battery") else {
        return Err("guard never tripped".into());
    };
    let find = |pred: &dyn Fn(&LogEntry) -> bool| log.iter().find(|e| e.seq > trip.seq && pred(e)).map(|e| e.seq);
    let pause = find(&|e| e.kind == "PauseDeliveries");
    let home = find(&|e| e.kind == "transition" && e.payload["to"] == "ReturningToBase");
    let recharged = find(&|e| e.kind == "recharge");
    let dispensed_early = log
        .iter()
        .filter(|e| e.kind == "dispense" && e.seq > trip.seq)
        .any(|e| recharged.is_none_or(|r| e.seq < r));
    let remaining = log
        .iter()
        .find(|e| e.kind == "PauseDeliveries")
        .and_then(|e| e.payload["remaining_stops"].as_u64())
        .unwrap_or(0);
    let ordered = matches!((pause, home, recharged), (Some(p), Some(h), Some(r)) if p < h && h < r);
    check(
        ordered && !dispensed_early && remaining > 0 && report.delivered.len() == 12,
        format!(
            "tripped at t={:.1} s in {}, {remaining} stops left, pause before return: {ordered}, dispense before recharge: {dispensed_early}, delivered {}/12",
            trip.t,
            trip.payload["phase"].as_str().unwrap_or("?"),
            report.delivered.len()
        ),
    )
}

fn dispersion() -> Outcome {
    let p = PlannerParams::default();
    let mut points = 0;
    let mut narrower = 0;
    for hi in 1..=40 {
        for wi in 1..=30 {
            let (h, w) = (hi as f64 * 0.75, wi as f64 * 0.5);
            points += 1;
            let plain = drop_dispersion(h, w, false, &p).dispersion_radius_m;
            let ballast = drop_dispersion(h, w, true, &p).dispersion_radius_m;
            narrower += usize::from(ballast < plain);
        }
    }
    let expected = (2.0 * 6.0 / 9.81f64).sqrt() * 3.0 * 1.3;
    let got = drop_dispersion(6.0, 3.0, false, &p).dispersion_radius_m;
    let err = (got - expected).abs();
    check(
        narrower == points && err <= 1e-9,
        format!("ballast narrower at {narrower}/{points} grid points, h=6 wind=3 radius {got:.12} (error {err:.1e})"),
    )
}

fn determinism(runs: &[(Scenario, Vec<LogEntry>, RunReport)]) -> Outcome {
    let mut identical = 0;
    for (s, _, _) in runs {
        let a = run(s).unwrap().0.to_text();
        let b = run(s).unwrap().0.to_text();
        identical += usize::from(a == b);
    }
    let mut probe = Engine::new(common::escalation(&[3], OperatorPolicy::Manual, 7)).unwrap();
    while probe.pending_decisions().is_empty() && probe.step() {}
    let at = probe.now().ceil() + 1.0;
    let mut s = common::escalation(&[3], OperatorPolicy::Manual, 7);
    s.agents.injections.push(InjectionScript {
        t_s: at,
        decision: "U1-d1".into(),
        verdict: Verdict::Approve,
    });
    let a = run(&s).unwrap().0.to_text();
    let b = run(&s).unwrap().0.to_text();
    let accepted = a.contains("\"kind\":\"inject\"") && a.contains("\"result\":\"accepted\"");
    check(
        identical == runs.len() && a == b && accepted,
        format!(
            "{identical}/{} seeded runs byte-identical, injection at t={at} s accepted: {accepted}, replay identical: {}",
            runs.len(),
            a == b
        ),
    )
}

fn protocol(runs: &[(Scenario, Vec<LogEntry>, RunReport)]) -> Outcome {
    let mut rng = SplitMix64::new(10_000);
    let mut same = 0;
    const N: u64 = 10_000;
    for k in 0..N {
        let m = common::random_message(&mut rng, k, k + 1);
        let line = encode(&m);
        if let Ok(back) = decode(&line) {
            same += u64::from(back == m && encode(&back) == line);
        }
    }
    let mut acks = 0;
    let mut violations = 0;
    for (_, log, _) in runs {
        acks += log.iter().filter(|e| e.kind == "DeliveryAck" && e.dst == "base").count();
        violations += check_acks(log).len();
    }
    check(
        same == N && violations == 0,
        format!("{same}/{N} messages byte-identical, {acks} acks over {} runs, {violations} ack violations", runs.len()),
    )
}

fn escalation() -> Outcome {
    let noisy = [1, 4, 7];
    let (approve_log, approve) = entries(&common::escalation(&noisy, OperatorPolicy::AutoApprove, 5));
    let (reject_log, reject) = entries(&common::escalation(&noisy, OperatorPolicy::AutoReject, 5));
    let expected: BTreeSet<String> = noisy.iter().map(|k| format!("S{k}")).collect();
    let low_stops = |log: &[LogEntry]| -> BTreeSet<String> {
        log.iter()
            .filter(|e| e.kind == "signature" && e.payload["confidence"].as_f64().unwrap() < 0.85)
            .map(|e| e.payload["stop"].as_str().unwrap().to_string())
            .collect()
    };
    let escalated = |log: &[LogEntry]| -> BTreeSet<String> {
        log.iter()
            .filter(|e| e.kind == "OperatorDecisionRequest")
            .map(|e| e.payload["stop"].as_str().unwrap().to_string())
            .collect()
    };
    let requests = count(&approve_log, "OperatorDecisionRequest");
    let ok = requests == 3
        && low_stops(&approve_log) == expected
        && escalated(&approve_log) == expected
        && approve.delivered.len() == 10
        && escalated(&reject_log) == expected
        && reject.delivered.len() == 7;
    check(
        ok,
        format!(
            "auto-approve: {requests} requests, {} delivered; auto-reject: {} delivered, {} requests over {} stops after retries",
            approve.delivered.len(),
            reject.delivered.len(),
            count(&reject_log, "OperatorDecisionRequest"),
            escalated(&reject_log).len()
        ),
    )
}

fn crowd_flow() -> Outcome {
    let (s, last_fix) = common::crowd(1);
    let (log, report) = entries(&s);
    let order = ["HailRequest", "HailOffer", "BookingConfirm", "PickupArrival", "LoadComplete"];
    let seqs: Vec<Option<u64>> = order
        .iter()
        .map(|k| log.iter().find(|e| e.kind == *k).map(|e| e.seq))
        .collect();
    let flow = seqs.iter().all(Option::is_some) && seqs.windows(2).all(|w| w[0] < w[1]);
    let top_load = log
        .iter()
        .find(|e| e.kind == "orifice" && e.payload["token"]["kind"] == "landed")
        .map(|e| e.seq);
    let before_confirm = matches!((top_load, seqs[4]), (Some(t), Some(c)) if t < c);
    let replans = count(&log, "replan");
    let Some(d) = report.delivered.first() else {
        return Err("parcel not delivered".into());
    };
    let miss = distance(Position::ground(d.landing_x, d.landing_y), last_fix);
    let bound = s.params.mission.gps_tol_m + d.dispersion_radius_m;
    check(
        flow && before_confirm && replans > 0 && miss <= bound,
        format!("flow in order: {flow}, top load before confirm: {before_confirm}, {replans} replans, landed {miss:.2} m from last fix (bound {bound:.2} m)"),
    )
}

fn main() {
    let runs: Vec<(Scenario, Vec<LogEntry>, RunReport)> = (0..50)
        .map(|seed| {
            let s = common::mixed(seed);
            let (log, report) = entries(&s);
            (s, log, report)
        })
        .collect();

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("route oracle", Box::new(route_oracle)),
        ("altitude profile", Box::new(altitude_profile)),
        ("safety audit", Box::new(|| safety_audit(&runs))),
        ("battery guard", Box::new(battery_guard)),
        ("dispersion", Box::new(dispersion)),
        ("determinism", Box::new(|| determinism(&runs))),
        ("protocol round-trip", Box::new(|| protocol(&runs))),
        ("escalation", Box::new(escalation)),
        ("crowd flow", Box::new(crowd_flow)),
    ];
    let mut failed = 0;
    for (name, f) in &criteria {
        match f() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
