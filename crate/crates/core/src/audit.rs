//! Post-hoc checks over an event log. Each check replays the log and
//! reports every record that breaks its rule.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::Value;

use crate::mission::{MissionParams, BASE};
use crate::sim::LogEntry;

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub check: &'static str,
    pub seq: u64,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] seq {}: {}", self.check, self.seq, self.detail)
    }
}

fn s<'a>(v: &'a Value, key: &str) -> &'a str {
    v.get(key).and_then(Value::as_str).unwrap_or("")
}

fn f(v: &Value, key: &str) -> f64 {
    v.get(key).and_then(Value::as_f64).unwrap_or(f64::NAN)
}

fn violation(check: &'static str, e: &LogEntry, detail: impl Into<String>) -> Violation {
    Violation {
        check,
        seq: e.seq,
        detail: detail.into(),
    }
}

/// Runs every check.
pub fn audit(entries: &[LogEntry], p: &MissionParams) -> Vec<Violation> {
    let mut out = check_orifices(entries);
    out.extend(check_attempts(entries, p.max_reattempts));
    out.extend(check_acks(entries));
    out.extend(check_battery(entries));
    out.extend(check_escalations(entries, p.confidence_threshold));
    out.extend(check_accounting(entries));
    out
}

#[derive(Default)]
struct CraftTrack {
    phase: String,
    verified_stop: Option<String>,
    hover: Option<(String, f64)>,
    loading: Option<String>,
}

/// An orifice opens only in `Dispensing` under a hover token minted on
/// entering the safe-drop hover over a GPS-verified stop, or in
/// `PickupLoading` under a landed token for that pickup.
pub fn check_orifices(entries: &[LogEntry]) -> Vec<Violation> {
    const CHECK: &str = "orifice";
    let mut crafts: BTreeMap<String, CraftTrack> = BTreeMap::new();
    let mut out = Vec::new();
    for e in entries {
        let p = &e.payload;
        match e.kind.as_str() {
            "transition" => {
                let c = crafts.entry(s(p, "aircraft").to_string()).or_default();
                let to = s(p, "to");
                let stop = s(p, "stop").to_string();
                c.phase = to.to_string();
                match to {
                    "EnRoute" | "ReturningToBase" | "Recharging" | "Done" => {
                        c.verified_stop = None;
                        c.hover = None;
                        c.loading = None;
                    }
                    "AltitudeCorrecting" if s(p, "trigger") == "gps_match" => c.verified_stop = Some(stop),
                    "HoverSafeDrop" => c.hover = Some((stop, e.t)),
                    "PickupLoading" => c.loading = Some(stop),
                    _ => {}
                }
            }
            "orifice" if s(p, "state") == "open" => {
                let c = crafts.entry(s(p, "aircraft").to_string()).or_default();
                let token = p.get("token").filter(|t| !t.is_null());
                let Some(token) = token else {
                    out.push(violation(CHECK, e, "opened without a token"));
                    continue;
                };
                let stop = s(token, "stop");
                let issued = f(token, "issued_at_s");
                match s(token, "kind") {
                    "hover" => {
                        if c.phase != "Dispensing" {
                            out.push(violation(CHECK, e, format!("hover open in phase {}", c.phase)));
                        }
                        if c.verified_stop.as_deref() != Some(stop) {
                            out.push(violation(CHECK, e, format!("stop {stop} not GPS-verified")));
                        }
                        match &c.hover {
                            Some((h, t)) if h == stop && *t == issued => {}
                            _ => out.push(violation(CHECK, e, "token not minted at hover entry")),
                        }
                    }
                    "landed" => {
                        if c.phase != "PickupLoading" {
                            out.push(violation(CHECK, e, format!("landed open in phase {}", c.phase)));
                        }
                        if c.loading.as_deref() != Some(stop) {
                            out.push(violation(CHECK, e, format!("landed token for {stop} not current pickup")));
                        }
                    }
                    other => out.push(violation(CHECK, e, format!("unknown token kind {other:?}"))),
                }
                if s(p, "phase") != c.phase {
                    out.push(violation(CHECK, e, "record phase disagrees with transitions"));
                }
            }
            _ => {}
        }
    }
    out
}

/// Aborted attempts plus the delivering visit stay within `1 + max_reattempts`.
pub fn check_attempts(entries: &[LogEntry], max_reattempts: u32) -> Vec<Violation> {
    let mut tries: BTreeMap<(String, String), (u32, BTreeSet<u64>, u64)> = BTreeMap::new();
    for e in entries {
        let key = match e.kind.as_str() {
            "AbortNotice" => (e.src.clone(), s(&e.payload, "stop").to_string()),
            "dispense" => (s(&e.payload, "aircraft").to_string(), s(&e.payload, "stop").to_string()),
            _ => continue,
        };
        let slot = tries.entry(key).or_default();
        if e.kind == "AbortNotice" {
            slot.0 += 1;
        } else {
            slot.1.insert(e.t.to_bits());
        }
        slot.2 = e.seq;
    }
    tries
        .into_iter()
        .filter_map(|((craft, stop), (aborts, visits, seq))| {
            let total = aborts + visits.len() as u32;
            (total > 1 + max_reattempts).then(|| Violation {
                check: "attempts",
                seq,
                detail: format!("{craft} made {total} attempts at {stop}"),
            })
        })
        .collect()
}

/// Every dispense is followed by exactly one dispenser-to-base ack for that
/// article, and no such ack appears without a dispense.
pub fn check_acks(entries: &[LogEntry]) -> Vec<Violation> {
    const CHECK: &str = "ack";
    let mut dispensed: BTreeMap<(String, String), (u64, u32)> = BTreeMap::new();
    let mut out = Vec::new();
    for e in entries {
        match e.kind.as_str() {
            "dispense" => {
                let key = (s(&e.payload, "aircraft").to_string(), s(&e.payload, "article").to_string());
                if dispensed.insert(key, (e.seq, 0)).is_some() {
                    out.push(violation(CHECK, e, "article dispensed twice"));
                }
            }
            "DeliveryAck" if e.dst == BASE => {
                let Some(craft) = e.src.strip_suffix("/dispenser") else {
                    out.push(violation(CHECK, e, format!("ack to base from {}", e.src)));
                    continue;
                };
                let key = (craft.to_string(), s(&e.payload, "article").to_string());
                match dispensed.get_mut(&key) {
                    Some((_, n)) => *n += 1,
                    None => out.push(violation(CHECK, e, format!("ack for undispensed {}", key.1))),
                }
            }
            _ => {}
        }
    }
    for ((craft, article), (seq, n)) in dispensed {
        if n != 1 {
            out.push(Violation {
                check: CHECK,
                seq,
                detail: format!("{craft} dispensed {article} with {n} acks"),
            });
        }
    }
    out
}

/// After the guard trips in an active phase, PauseDeliveries goes out before
/// the aircraft heads home, and nothing is dispensed until a recharge.
pub fn check_battery(entries: &[LogEntry]) -> Vec<Violation> {
    const CHECK: &str = "battery";
    #[derive(Default)]
    struct Trip {
        active: bool,
        paused: bool,
    }
    let mut trips: BTreeMap<String, Trip> = BTreeMap::new();
    let mut out = Vec::new();
    for e in entries {
        let p = &e.payload;
        match e.kind.as_str() {
            "battery" => {
                let phase = s(p, "phase");
                let active = !matches!(phase, "Idle" | "ReturningToBase" | "Recharging" | "Done");
                trips.insert(s(p, "aircraft").to_string(), Trip { active, paused: false });
            }
            "PauseDeliveries" => {
                if let Some(t) = trips.get_mut(&e.src) {
                    t.paused = true;
                }
            }
            "transition" if matches!(s(p, "to"), "ReturningToBase" | "Recharging") => {
                if let Some(t) = trips.get(s(p, "aircraft")) {
                    if t.active && !t.paused {
                        out.push(violation(CHECK, e, "headed home before PauseDeliveries"));
                    }
                }
            }
            "dispense" => {
                if trips.contains_key(s(p, "aircraft")) {
                    out.push(violation(CHECK, e, "dispense between guard trip and recharge"));
                }
            }
            "recharge" => {
                trips.remove(s(p, "aircraft"));
            }
            _ => {}
        }
    }
    out
}

/// Each OperatorDecisionRequest follows a below-threshold capture at that stop.
pub fn check_escalations(entries: &[LogEntry], threshold: f64) -> Vec<Violation> {
    let mut last: BTreeMap<String, (String, f64)> = BTreeMap::new();
    let mut out = Vec::new();
    for e in entries {
        match e.kind.as_str() {
            "signature" => {
                last.insert(
                    s(&e.payload, "aircraft").to_string(),
                    (s(&e.payload, "stop").to_string(), f(&e.payload, "confidence")),
                );
            }
            "OperatorDecisionRequest" => {
                let stop = s(&e.payload, "stop");
                let ok = last
                    .get(&e.src)
                    .is_some_and(|(st, c)| st == stop && *c < threshold && *c == f(&e.payload, "confidence"));
                if !ok {
                    out.push(violation("escalation", e, format!("escalation at {stop} without a low capture")));
                }
            }
            _ => {}
        }
    }
    out
}

/// Every loaded article ends exactly once as delivered or undelivered.
pub fn check_accounting(entries: &[LogEntry]) -> Vec<Violation> {
    const CHECK: &str = "accounting";
    let mut loaded = BTreeSet::new();
    let mut outcome: BTreeMap<String, &'static str> = BTreeMap::new();
    let mut out = Vec::new();
    let mut last_seq = 0;
    for e in entries {
        last_seq = e.seq;
        let p = &e.payload;
        let mut settle = |article: &str, how: &'static str| {
            if let Some(prev) = outcome.insert(article.to_string(), how) {
                out.push(violation(CHECK, e, format!("{article} already {prev}")));
            }
        };
        match e.kind.as_str() {
            "manifest" => {
                for m in p.get("entries").and_then(Value::as_array).into_iter().flatten() {
                    loaded.insert(s(m, "article").to_string());
                }
            }
            "loaded" => {
                loaded.insert(s(&p["entry"], "article").to_string());
            }
            "dispense" => settle(s(p, "article"), "delivered"),
            "undelivered" => {
                let article = s(p, "article");
                if s(p, "reason") == "no_capacity" {
                    loaded.insert(article.to_string());
                }
                settle(article, "undelivered");
            }
            _ => {}
        }
    }
    for a in &loaded {
        if !outcome.contains_key(a) {
            out.push(Violation {
                check: CHECK,
                seq: last_seq,
                detail: format!("{a} never resolved"),
            });
        }
    }
    for a in outcome.keys() {
        if !loaded.contains(a) {
            out.push(Violation {
                check: CHECK,
                seq: last_seq,
                detail: format!("{a} resolved but never loaded"),
            });
        }
    }
    out
}
