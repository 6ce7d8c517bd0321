#![allow(dead_code)]

use std::collections::BTreeMap;

use skydrop_core::dispenser::Article;
use skydrop_core::rng::SplitMix64;
use skydrop_core::world::{
    Address, AircraftConfig, Agents, OperatorPolicy, Params, Position, RecipientPolicy, RecipientSpec, Scenario,
    SignatureVector, Wind, SIGNATURE_DIM,
};

pub fn signature(rng: &mut SplitMix64) -> SignatureVector {
    let mut v = [0.0; SIGNATURE_DIM];
    for x in v.iter_mut() {
        *x = rng.uniform(0.1, 1.0);
    }
    SignatureVector(v)
}

pub fn address(id: &str, x: f64, y: f64) -> Address {
    Address {
        id: id.into(),
        position: Position::ground(x, y),
        signature: None,
        registered_contacts: vec![format!("r-{id}")],
    }
}

pub fn article(id: &str, destination: &str) -> Article {
    Article {
        id: id.into(),
        destination: destination.into(),
        width_cells: 1,
        length_cells: 1,
        mass_kg: 0.5,
        sensitive: false,
        ballast: false,
        contraband: false,
        sender: None,
    }
}

pub fn craft(id: &str, rows: u32, cols: u32) -> AircraftConfig {
    AircraftConfig {
        id: id.into(),
        rows,
        cols,
    }
}

pub fn scenario(addresses: Vec<Address>, articles: Vec<Article>, fleet: Vec<AircraftConfig>) -> Scenario {
    Scenario {
        base: Position::ground(0.0, 0.0),
        addresses,
        articles,
        fleet,
        wind: Wind {
            speed: 3.0,
            direction: 0.0,
        },
        agents: Agents::default(),
        params: Params::default(),
        seed: 1,
    }
}

/// One address, one article, an approving recipient.
pub fn single_drop() -> Scenario {
    scenario(vec![address("A", 300.0, 400.0)], vec![article("a1", "A")], vec![craft("U1", 2, 2)])
}

/// Ten stops, all with stored signatures; captures at the listed addresses
/// come back heavily distorted.
pub fn escalation(noisy: &[usize], operator: OperatorPolicy, seed: u64) -> Scenario {
    let mut rng = SplitMix64::new(seed ^ 0x5EED);
    let mut addresses = Vec::new();
    let mut articles = Vec::new();
    let mut noise = BTreeMap::new();
    for k in 0..10 {
        let angle = k as f64 * std::f64::consts::TAU / 10.0;
        let id = format!("S{k}");
        let mut a = address(&id, 500.0 * angle.cos(), 500.0 * angle.sin());
        a.signature = Some(signature(&mut rng));
        noise.insert(id.clone(), if noisy.contains(&k) { 3.0 } else { 0.05 });
        articles.push(article(&format!("p{k}"), &id));
        addresses.push(a);
    }
    let mut s = scenario(addresses, articles, vec![craft("U1", 4, 4)]);
    s.agents.capture_noise = noise;
    s.agents.operator = operator;
    s.params.planner.battery_capacity_j = 5_000_000.0;
    s.seed = seed;
    s
}

/// Randomized mixed-policy scenario used by the audit and determinism runs.
pub fn mixed(seed: u64) -> Scenario {
    let mut rng = SplitMix64::new(seed.wrapping_mul(0x9E37_79B9) ^ 0xABCD);
    let n = 5 + rng.below(6) as usize;
    let mut addresses = Vec::new();
    let mut articles = Vec::new();
    let mut recipients = BTreeMap::new();
    let mut noise = BTreeMap::new();
    let mut gps = BTreeMap::new();
    for k in 0..n {
        let id = format!("H{k}");
        let mut a = address(&id, rng.uniform(-1500.0, 1500.0), rng.uniform(-1500.0, 1500.0));
        if rng.chance(0.5) {
            a.signature = Some(signature(&mut rng));
            noise.insert(id.clone(), if rng.chance(0.3) { 2.5 } else { 0.02 });
        }
        if rng.chance(0.15) {
            a.registered_contacts.clear();
        }
        let policy = match rng.below(7) {
            0 => RecipientPolicy::Absent,
            1 => RecipientPolicy::ApproveWithProb { p: 0.5 },
            2 => RecipientPolicy::Reschedule {
                earliest_s: rng.uniform(500.0, 3000.0),
            },
            3 => RecipientPolicy::PresentBarcode { correct: rng.chance(0.5) },
            _ => RecipientPolicy::AlwaysApprove,
        };
        recipients.insert(
            format!("r-{id}"),
            RecipientSpec {
                policy,
                scan_ack: rng.chance(0.3),
            },
        );
        if rng.chance(0.2) {
            gps.insert(id.clone(), vec![rng.uniform(4.0, 20.0), 0.5]);
        }
        let count = 1 + rng.below(2) as usize;
        for j in 0..count {
            let mut art = article(&format!("{id}-{j}"), &id);
            art.sensitive = rng.chance(0.3);
            art.ballast = rng.chance(0.3);
            art.contraband = rng.chance(0.05);
            if rng.chance(0.2) {
                art.width_cells = 2;
            }
            if rng.chance(0.3) {
                art.sender = Some(format!("sender-{k}"));
            }
            articles.push(art);
        }
        addresses.push(a);
    }
    let fleet = if rng.chance(0.5) {
        vec![craft("U1", 4, 4)]
    } else {
        vec![craft("U1", 3, 4), craft("U2", 3, 3)]
    };
    let mut s = scenario(addresses, articles, fleet);
    s.agents.recipients = recipients;
    s.agents.capture_noise = noise;
    s.agents.gps_errors = gps;
    s.agents.operator = match rng.below(3) {
        0 => OperatorPolicy::AutoApprove,
        1 => OperatorPolicy::AutoReject,
        _ => OperatorPolicy::Timeout,
    };
    s.params.planner.battery_capacity_j = rng.uniform(60_000.0, 200_000.0);
    s.wind.speed = rng.uniform(0.0, 8.0);
    s.seed = seed;
    s
}

use skydrop_core::protocol::{AlertContext, Body, Draft, Message};
use skydrop_core::world::Verdict;

fn word(rng: &mut SplitMix64) -> String {
    const PARTS: [&str; 8] = ["A1", "base", "r-Ω", "stop \"7\"", "job/3", "operator", "x\\y", "tab\tend"];
    let mut s = PARTS[rng.below(PARTS.len() as u64) as usize].to_string();
    s.push_str(&rng.below(1000).to_string());
    s
}

fn real(rng: &mut SplitMix64) -> f64 {
    match rng.below(4) {
        0 => rng.uniform(-1e6, 1e6),
        1 => rng.below(10_000) as f64,
        2 => rng.next_f64(),
        _ => f64::from_bits(rng.next_u64() & 0x3FFF_FFFF_FFFF_FFFF),
    }
}

fn pos(rng: &mut SplitMix64) -> Position {
    Position::new(real(rng), real(rng), rng.uniform(0.0, 120.0))
}

fn words(rng: &mut SplitMix64) -> Vec<String> {
    (0..rng.below(4)).map(|_| word(rng)).collect()
}

/// A message of kind `k mod 22` with seeded field values.
pub fn random_message(rng: &mut SplitMix64, k: u64, seq: u64) -> Message {
    let ctx = |rng: &mut SplitMix64| AlertContext {
        aircraft: word(rng),
        stop: word(rng),
        articles: words(rng),
        position: pos(rng),
    };
    let body = match k % 22 {
        0 => Body::EnRouteNotice {
            stop: word(rng),
            eta_s: real(rng),
            articles: words(rng),
            barcode: rng.chance(0.5).then(|| "123456789015".to_string()),
        },
        1 => Body::DeliveryAlert(ctx(rng)),
        2 => Body::PermissionRequest {
            stop: word(rng),
            articles: words(rng),
        },
        3 => Body::PermissionResponse {
            stop: word(rng),
            granted: rng.chance(0.5),
        },
        4 => Body::SignatureMismatch {
            stop: word(rng),
            confidence: rng.next_f64(),
        },
        5 => Body::OperatorDecisionRequest {
            decision: word(rng),
            stop: word(rng),
            confidence: rng.next_f64(),
            deadline_t_s: real(rng),
            context: ctx(rng),
        },
        6 => Body::OperatorDecisionResponse {
            decision: word(rng),
            verdict: if rng.chance(0.5) { Verdict::Approve } else { Verdict::Reject },
        },
        7 => Body::BarcodeChallenge {
            stop: word(rng),
            article: word(rng),
        },
        8 => Body::BarcodeScan {
            stop: word(rng),
            code: word(rng),
        },
        9 => Body::DeliveryAck {
            article: word(rng),
            stop: word(rng),
        },
        10 => Body::RescheduleRequest {
            stop: word(rng),
            earliest_s: real(rng),
        },
        11 => Body::RescheduleConfirm {
            stop: word(rng),
            eta_s: real(rng),
        },
        12 => Body::BatteryLow {
            battery_j: real(rng),
            fraction: rng.next_f64(),
        },
        13 => Body::PauseDeliveries {
            remaining_stops: rng.below(50) as usize,
        },
        14 => Body::HailRequest {
            job: word(rng),
            position: pos(rng),
        },
        15 => Body::HailOffer {
            job: word(rng),
            aircraft: word(rng),
            eta_s: real(rng),
        },
        16 => Body::BookingConfirm { job: word(rng) },
        17 => Body::PickupArrival {
            job: word(rng),
            aircraft: word(rng),
        },
        18 => Body::LoadComplete { job: word(rng) },
        19 => Body::AssistanceRequest { request: word(rng) },
        20 => Body::AssistanceResolved { request: word(rng) },
        _ => Body::AbortNotice {
            stop: word(rng),
            reason: word(rng),
            attempts: rng.below(5) as u32,
        },
    };
    let t = rng.uniform(0.0, 1e5);
    Draft::new(word(rng), word(rng), body).stamp(seq, t)
}

use skydrop_core::world::{DropSpec, HailScript, MovementScript, PickupSpec};

/// A hail from `alice` at a pickup point for `bob`, who walks away twice
/// while the job is under way. Returns the scenario and bob's last fix.
pub fn crowd(seed: u64) -> (Scenario, Position) {
    let mut s = scenario(vec![address("P", 400.0, 0.0)], Vec::new(), vec![craft("U1", 2, 2)]);
    s.agents.hails.push(HailScript {
        t_s: 10.0,
        job: "J1".into(),
        requester: "alice".into(),
        pickup: PickupSpec::Address("P".into()),
        drop: DropSpec::Tracked {
            recipient: "bob".into(),
            position: Position::ground(900.0, 300.0),
        },
        article: article("parcel", ""),
    });
    let moves = [
        (50.0, Position::ground(950.0, 320.0)),
        (112.0, Position::ground(1000.0, 350.0)),
        (115.0, Position::ground(1020.0, 360.0)),
        (118.0, Position::ground(1040.0, 380.0)),
    ];
    for (t_s, position) in moves {
        s.agents.movements.push(MovementScript {
            t_s,
            recipient: "bob".into(),
            position,
        });
    }
    s.seed = seed;
    (s, moves[moves.len() - 1].1)
}

/// Stops on a ring with a small battery and short timeouts, so the
/// forecast lets the aircraft go on while the charge sinks past the
/// critical fraction.
pub fn battery_drain(stops: usize, capacity_j: f64) -> Scenario {
    let mut addresses = Vec::new();
    let mut articles = Vec::new();
    for k in 0..stops {
        let angle = k as f64 * std::f64::consts::TAU / stops as f64;
        let id = format!("B{k}");
        addresses.push(address(&id, 200.0 * angle.cos(), 1000.0 + 200.0 * angle.sin()));
        articles.push(article(&format!("b{k}"), &id));
    }
    let mut s = scenario(addresses, articles, vec![craft("U1", 4, 4)]);
    s.params.planner.battery_capacity_j = capacity_j;
    s.params.mission.permission_timeout_s = 5.0;
    s.params.mission.operator_timeout_s = 5.0;
    s.params.mission.barcode_timeout_s = 5.0;
    s
}
