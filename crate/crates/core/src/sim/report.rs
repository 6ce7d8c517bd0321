use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dispatch::JobState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Hit the event cap before quiescence.
    Stalled,
    Failed,
    /// Stopped from outside before quiescence.
    Interrupted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delivered {
    pub article: String,
    pub aircraft: String,
    pub stop: String,
    pub t_s: f64,
    pub landing_x: f64,
    pub landing_y: f64,
    pub landing_offset_m: f64,
    pub dispersion_radius_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Undelivered {
    pub article: String,
    pub stop: String,
    pub reason: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job: String,
    pub state: JobState,
    pub aircraft: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    pub delivered: Vec<Delivered>,
    pub undelivered: Vec<Undelivered>,
    /// Articles refused at screening; never loaded.
    pub rejected: Vec<String>,
    pub energy_used_j: BTreeMap<String, f64>,
    pub recharges: BTreeMap<String, u32>,
    pub min_battery_j: BTreeMap<String, f64>,
    pub makespan_s: f64,
    pub message_counts: BTreeMap<String, u64>,
    pub jobs: Vec<JobSummary>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
