//! Plain-text summary of an event log.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde_json::Value;
use skydrop_core::sim::LogEntry;

fn s(v: &Value) -> String {
    match v {
        Value::String(x) => x.clone(),
        Value::Null => "-".into(),
        other => other.to_string(),
    }
}

fn table(out: &mut String, title: &str, head: &[&str], rows: &[Vec<String>]) {
    let _ = writeln!(out, "\n{title} ({})", rows.len());
    if rows.is_empty() {
        return;
    }
    let mut width: Vec<usize> = head.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, cell) in width.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string()
    };
    let _ = writeln!(out, "  {}", line(head.to_vec()));
    for r in rows {
        let _ = writeln!(out, "  {}", line(r.iter().map(String::as_str).collect()));
    }
}

#[derive(Default)]
struct Energy {
    last: Option<f64>,
    used: f64,
    recharges: u32,
    min: f64,
}

impl Energy {
    fn observe(&mut self, battery: f64) {
        if let Some(last) = self.last {
            if battery < last {
                self.used += last - battery;
            }
        } else {
            self.min = battery;
        }
        self.min = self.min.min(battery);
        self.last = Some(battery);
    }
}

pub fn render(entries: &[LogEntry]) -> String {
    let mut out = String::new();
    let mut delivered = Vec::new();
    let mut undelivered = Vec::new();
    let mut retries: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    let mut energy: BTreeMap<String, Energy> = BTreeMap::new();
    let mut header = String::new();
    for e in entries {
        let p = &e.payload;
        match e.kind.as_str() {
            "header" => header = format!("seed {}, fleet {}", s(&p["seed"]), p["fleet"]),
            "end" => {
                let _ = write!(
                    header,
                    ", status {}, makespan {:.1} s",
                    s(&p["status"]),
                    p["makespan_s"].as_f64().unwrap_or(0.0)
                );
            }
            "dispense" => delivered.push(vec![
                s(&p["article"]),
                s(&p["aircraft"]),
                s(&p["stop"]),
                format!("{:.1}", e.t),
                format!("{:.2}", p["offset_m"].as_f64().unwrap_or(0.0)),
                format!("{:.2}", p["radius_m"].as_f64().unwrap_or(0.0)),
            ]),
            "undelivered" => undelivered.push(vec![
                s(&p["article"]),
                s(&p["stop"]),
                s(&p["reason"]),
                s(&p["attempts"]),
            ]),
            "AbortNotice" => retries
                .entry((e.src.clone(), s(&p["stop"])))
                .or_default()
                .push(s(&p["reason"])),
            "transition" | "battery" | "recharge" => {
                if let Some(b) = p["battery_j"].as_f64() {
                    let en = energy.entry(s(&p["aircraft"])).or_default();
                    if e.kind == "recharge" {
                        en.recharges += 1;
                        en.last = Some(b);
                    } else {
                        en.observe(b);
                    }
                }
            }
            _ => {}
        }
    }
    let _ = writeln!(out, "{header}");
    table(
        &mut out,
        "Delivered",
        &["article", "aircraft", "stop", "t (s)", "offset (m)", "radius (m)"],
        &delivered,
    );
    table(&mut out, "Undelivered", &["article", "stop", "reason", "attempts"], &undelivered);
    let retry_rows: Vec<Vec<String>> = retries
        .into_iter()
        .map(|((craft, stop), reasons)| vec![craft, stop, reasons.len().to_string(), reasons.join(", ")])
        .collect();
    table(&mut out, "Retries", &["aircraft", "stop", "aborts", "reasons"], &retry_rows);
    let energy_rows: Vec<Vec<String>> = energy
        .into_iter()
        .map(|(craft, e)| {
            vec![
                craft,
                format!("{:.0}", e.used),
                e.recharges.to_string(),
                format!("{:.0}", e.min),
            ]
        })
        .collect();
    table(&mut out, "Energy", &["aircraft", "used (J)", "recharges", "min battery (J)"], &energy_rows);
    out
}
