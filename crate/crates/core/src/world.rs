//! Geometry, scenario definition and validated scenario ingestion.
//!
//! Positions live in a local planar frame: `x` meters east and `y` meters
//! north of the base origin, `alt` meters above ground level.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispenser::Article;
use crate::mission::MissionParams;
use crate::planner::PlannerParams;

pub const SIGNATURE_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub alt: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64, alt: f64) -> Self {
        Self { x, y, alt }
    }

    pub const fn ground(x: f64, y: f64) -> Self {
        Self { x, y, alt: 0.0 }
    }

    pub fn with_alt(self, alt: f64) -> Self {
        Self { alt, ..self }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.alt.is_finite() && self.alt >= 0.0
    }

    /// Point `frac` of the way from `self` to `to`, horizontally.
    pub fn lerp(self, to: Position, frac: f64) -> Position {
        Position {
            x: self.x + (to.x - self.x) * frac,
            y: self.y + (to.y - self.y) * frac,
            alt: self.alt,
        }
    }
}

/// Planar (x, y) distance; altitude is accounted for separately by the planner.
pub fn distance(a: Position, b: Position) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Stored drop-site feature vector standing in for a recorded image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SignatureVector(pub [f64; SIGNATURE_DIM]);

impl SignatureVector {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Address {
    pub id: String,
    pub position: Position,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<SignatureVector>,
    #[serde(default)]
    pub registered_contacts: Vec<String>,
}

impl Address {
    /// The contact asked for permission and barcodes: the first registered one.
    pub fn addressee(&self) -> Option<&str> {
        self.registered_contacts.first().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Wind {
    pub speed: f64,
    #[serde(default)]
    pub direction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AircraftConfig {
    pub id: String,
    pub rows: u32,
    pub cols: u32,
}

/// How a recipient answers the dispenser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecipientPolicy {
    AlwaysApprove,
    ApproveWithProb { p: f64 },
    Reschedule { earliest_s: f64 },
    Absent,
    PresentBarcode { correct: bool },
}

impl Default for RecipientPolicy {
    fn default() -> Self {
        RecipientPolicy::AlwaysApprove
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RecipientSpec {
    #[serde(default)]
    pub policy: RecipientPolicy,
    /// The recipient scans the delivered article, starting the ack chain.
    #[serde(default)]
    pub scan_ack: bool,
}

/// How the base station answers escalations when nobody is at the console.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorPolicy {
    #[default]
    AutoApprove,
    AutoReject,
    /// Never answers; every escalation times out.
    Timeout,
    /// Waits for decisions injected from outside (gateway or script).
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Approve,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PickupSpec {
    Address(String),
    Position(Position),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropSpec {
    Address(String),
    /// Follows a recipient's phone; `position` is the first known fix.
    Tracked { recipient: String, position: Position },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HailScript {
    pub t_s: f64,
    pub job: String,
    pub requester: String,
    pub pickup: PickupSpec,
    pub drop: DropSpec,
    /// The article handed over at pickup; its destination is filled in from `drop`.
    pub article: Article,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovementScript {
    pub t_s: f64,
    pub recipient: String,
    pub position: Position,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionScript {
    pub t_s: f64,
    pub decision: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistanceScript {
    pub t_s: f64,
    pub party: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Agents {
    pub recipients: BTreeMap<String, RecipientSpec>,
    pub operator: OperatorPolicy,
    /// Relative magnitude of the capture noise per address.
    pub capture_noise: BTreeMap<String, f64>,
    /// Successive GPS fix errors (meters east) per address; the last entry repeats.
    pub gps_errors: BTreeMap<String, Vec<f64>>,
    pub hails: Vec<HailScript>,
    pub movements: Vec<MovementScript>,
    pub injections: Vec<InjectionScript>,
    pub assistance: Vec<AssistanceScript>,
}

impl Agents {
    pub fn recipient(&self, id: &str) -> RecipientSpec {
        self.recipients.get(id).cloned().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Params {
    #[serde(flatten)]
    pub planner: PlannerParams,
    #[serde(flatten)]
    pub mission: MissionParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub base: Position,
    pub addresses: Vec<Address>,
    #[serde(default)]
    pub articles: Vec<Article>,
    pub fleet: Vec<AircraftConfig>,
    #[serde(default)]
    pub wind: Wind,
    #[serde(default)]
    pub agents: Agents,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error at {path}: {reason}")]
    Validation { path: String, reason: String },
}

impl ScenarioError {
    fn invalid(path: impl Into<String>, reason: impl Into<String>) -> Self {
        ScenarioError::Validation {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn path(&self) -> Option<&str> {
        match self {
            ScenarioError::Validation { path, .. } => Some(path),
            ScenarioError::Parse(_) => None,
        }
    }
}

pub fn load_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let scenario: Scenario = match serde_path_to_error::deserialize(de) {
        Ok(s) => s,
        Err(err) => {
            let path = err.path().to_string();
            let inner = err.into_inner();
            return Err(match inner.classify() {
                serde_json::error::Category::Data => ScenarioError::invalid(path, inner.to_string()),
                _ => ScenarioError::Parse(inner.to_string()),
            });
        }
    };
    scenario.validate()?;
    Ok(scenario)
}

impl Scenario {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn address(&self, id: &str) -> Option<&Address> {
        self.addresses.iter().find(|a| a.id == id)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !self.base.is_valid() {
            return Err(ScenarioError::invalid("base", "coordinates must be finite, alt >= 0"));
        }
        let mut ids = BTreeSet::new();
        for (i, a) in self.addresses.iter().enumerate() {
            if !ids.insert(a.id.as_str()) {
                return Err(ScenarioError::invalid(format!("addresses[{i}].id"), "duplicate address id"));
            }
            if !a.position.is_valid() {
                return Err(ScenarioError::invalid(
                    format!("addresses[{i}].position"),
                    "coordinates must be finite, alt >= 0",
                ));
            }
            if let Some(sig) = &a.signature {
                let n = sig.norm();
                if !(n.is_finite() && n > 0.0) {
                    return Err(ScenarioError::invalid(
                        format!("addresses[{i}].signature"),
                        "signature must have positive finite norm",
                    ));
                }
            }
        }
        let mut article_ids = BTreeSet::new();
        for (i, art) in self.articles.iter().enumerate() {
            validate_article(art, &format!("articles[{i}]"))?;
            if !article_ids.insert(art.id.as_str()) {
                return Err(ScenarioError::invalid(format!("articles[{i}].id"), "duplicate article id"));
            }
            if !ids.contains(art.destination.as_str()) {
                return Err(ScenarioError::invalid(
                    format!("articles[{i}].destination"),
                    format!("unknown address {:?}", art.destination),
                ));
            }
        }
        if self.fleet.is_empty() {
            return Err(ScenarioError::invalid("fleet", "fleet must not be empty"));
        }
        let mut craft = BTreeSet::new();
        for (i, ac) in self.fleet.iter().enumerate() {
            if !craft.insert(ac.id.as_str()) {
                return Err(ScenarioError::invalid(format!("fleet[{i}].id"), "duplicate aircraft id"));
            }
            if ac.rows == 0 {
                return Err(ScenarioError::invalid(format!("fleet[{i}].rows"), "must be positive"));
            }
            if ac.cols == 0 {
                return Err(ScenarioError::invalid(format!("fleet[{i}].cols"), "must be positive"));
            }
        }
        if !(self.wind.speed.is_finite() && self.wind.speed >= 0.0 && self.wind.direction.is_finite()) {
            return Err(ScenarioError::invalid("wind", "speed must be finite and >= 0"));
        }
        self.validate_agents(&ids)?;
        self.params.planner.validate().map_err(|(f, r)| ScenarioError::invalid(format!("params.{f}"), r))?;
        self.params.mission.validate().map_err(|(f, r)| ScenarioError::invalid(format!("params.{f}"), r))?;
        Ok(())
    }

    fn validate_agents(&self, addresses: &BTreeSet<&str>) -> Result<(), ScenarioError> {
        for (id, spec) in &self.agents.recipients {
            if let RecipientPolicy::ApproveWithProb { p } = spec.policy {
                if !(0.0..=1.0).contains(&p) {
                    return Err(ScenarioError::invalid(
                        format!("agents.recipients.{id}.policy.p"),
                        "probability must lie in [0, 1]",
                    ));
                }
            }
        }
        for (id, noise) in &self.agents.capture_noise {
            if !(noise.is_finite() && *noise >= 0.0) {
                return Err(ScenarioError::invalid(format!("agents.capture_noise.{id}"), "must be >= 0"));
            }
        }
        let mut jobs = BTreeSet::new();
        for (i, h) in self.agents.hails.iter().enumerate() {
            let path = format!("agents.hails[{i}]");
            if !jobs.insert(h.job.as_str()) {
                return Err(ScenarioError::invalid(format!("{path}.job"), "duplicate job id"));
            }
            if !(h.t_s.is_finite() && h.t_s >= 0.0) {
                return Err(ScenarioError::invalid(format!("{path}.t_s"), "must be >= 0"));
            }
            match &h.pickup {
                PickupSpec::Address(a) if !addresses.contains(a.as_str()) => {
                    return Err(ScenarioError::invalid(format!("{path}.pickup"), format!("unknown address {a:?}")));
                }
                PickupSpec::Position(p) if !p.is_valid() => {
                    return Err(ScenarioError::invalid(format!("{path}.pickup"), "invalid position"));
                }
                _ => {}
            }
            match &h.drop {
                DropSpec::Address(a) if !addresses.contains(a.as_str()) => {
                    return Err(ScenarioError::invalid(format!("{path}.drop"), format!("unknown address {a:?}")));
                }
                DropSpec::Tracked { position, .. } if !position.is_valid() => {
                    return Err(ScenarioError::invalid(format!("{path}.drop"), "invalid position"));
                }
                _ => {}
            }
            validate_article(&h.article, &format!("{path}.article"))?;
        }
        for (i, m) in self.agents.movements.iter().enumerate() {
            if !m.position.is_valid() || !(m.t_s.is_finite() && m.t_s >= 0.0) {
                return Err(ScenarioError::invalid(format!("agents.movements[{i}]"), "invalid movement"));
            }
        }
        for (i, inj) in self.agents.injections.iter().enumerate() {
            if !(inj.t_s.is_finite() && inj.t_s >= 0.0) {
                return Err(ScenarioError::invalid(format!("agents.injections[{i}].t_s"), "must be >= 0"));
            }
        }
        Ok(())
    }
}

fn validate_article(art: &Article, path: &str) -> Result<(), ScenarioError> {
    if art.width_cells == 0 {
        return Err(ScenarioError::invalid(format!("{path}.width_cells"), "must be positive"));
    }
    if art.length_cells == 0 {
        return Err(ScenarioError::invalid(format!("{path}.length_cells"), "must be positive"));
    }
    if !(art.mass_kg.is_finite() && art.mass_kg > 0.0) {
        return Err(ScenarioError::invalid(format!("{path}.mass_kg"), "must be positive"));
    }
    Ok(())
}
