//! Crowd-sourced jobs: hailing the nearest free dispenser, landed pickups,
//! and drops that follow a moving recipient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispenser::{CompartmentGrid, RegionId};
use crate::mission::Phase;
use crate::planner::{FlightPlan, PlanStop, PlannerParams};
use crate::world::{distance, Position};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Requested,
    Offered,
    Booked,
    PickedUp,
    Delivered,
    Failed,
}

impl JobState {
    /// Forward by exactly one step, or to `Failed` from anywhere live.
    pub fn can_become(self, next: JobState) -> bool {
        use JobState::*;
        match (self, next) {
            (Delivered | Failed, _) => false,
            (_, Failed) => true,
            (Requested, Offered) | (Offered, Booked) | (Booked, PickedUp) | (PickedUp, Delivered) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropTarget {
    Address(String),
    Tracked { recipient: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub requester: String,
    pub pickup: Position,
    pub drop: DropTarget,
    pub drop_position: Position,
    pub state: JobState,
    pub aircraft: Option<String>,
    pub last_replan_s: Option<f64>,
    /// Latest fix held back by the replan rate limit.
    pub pending_fix: Option<Position>,
}

#[derive(Debug, Error, PartialEq)]
pub enum DispatchError {
    #[error("no dispenser available")]
    NoneAvailable,
    #[error("job {job} cannot go from {from:?} to {to:?}")]
    BadTransition { job: String, from: JobState, to: JobState },
    #[error("job {0} is not active")]
    JobNotActive(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LoadError {
    #[error("aircraft has not landed")]
    NotLanded,
    #[error("compartment {0} is empty")]
    NothingLoaded(RegionId),
}

impl Job {
    pub fn new(id: &str, requester: &str, pickup: Position, drop: DropTarget, drop_position: Position) -> Self {
        Self {
            id: id.to_string(),
            requester: requester.to_string(),
            pickup,
            drop,
            drop_position,
            state: JobState::Requested,
            aircraft: None,
            last_replan_s: None,
            pending_fix: None,
        }
    }

    pub fn advance(&mut self, next: JobState) -> Result<(), DispatchError> {
        if !self.state.can_become(next) {
            return Err(DispatchError::BadTransition {
                job: self.id.clone(),
                from: self.state,
                to: next,
            });
        }
        self.state = next;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetView {
    pub id: String,
    pub position: Position,
    pub available: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HailOffer {
    pub aircraft: String,
    pub eta_s: f64,
}

/// Picks the closest available aircraft (ties: lower id) and quotes the ETA
/// of a single-stop plan from where it is now.
pub fn hail(user: Position, fleet: &[FleetView], params: &PlannerParams) -> Result<HailOffer, DispatchError> {
    let best = fleet
        .iter()
        .filter(|f| f.available)
        .min_by(|a, b| {
            distance(a.position, user)
                .total_cmp(&distance(b.position, user))
                .then_with(|| a.id.cmp(&b.id))
        })
        .ok_or(DispatchError::NoneAvailable)?;
    let stop = PlanStop {
        address: "pickup".into(),
        position: user,
        articles: Vec::new(),
    };
    let plan = FlightPlan::build(best.position, Some(best.position), vec![stop], Vec::new(), params, 0.0);
    Ok(HailOffer {
        aircraft: best.id.clone(),
        eta_s: plan.etas_s[0],
    })
}

/// The requester pressed the "loaded" button.
pub fn confirm_load(phase: Phase, grid: &CompartmentGrid, region: RegionId) -> Result<(), LoadError> {
    if !phase.is_landed() {
        return Err(LoadError::NotLanded);
    }
    match grid.region(region) {
        Some(r) if r.article.is_some() => Ok(()),
        _ => Err(LoadError::NothingLoaded(region)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Replan {
    Unchanged,
    Now(Position),
    /// Held back; apply at this time.
    Deferred { at_s: f64 },
}

/// A new fix for a tracked recipient. At most one replan per `interval_s`.
pub fn update_tracked_drop(job: &mut Job, fix: Position, t: f64, interval_s: f64) -> Result<Replan, DispatchError> {
    if job.state != JobState::PickedUp || !matches!(job.drop, DropTarget::Tracked { .. }) {
        return Err(DispatchError::JobNotActive(job.id.clone()));
    }
    if fix == job.drop_position && job.pending_fix.is_none() {
        return Ok(Replan::Unchanged);
    }
    match job.last_replan_s {
        Some(last) if t - last < interval_s => {
            let already = job.pending_fix.is_some();
            job.pending_fix = Some(fix);
            if already {
                Ok(Replan::Unchanged)
            } else {
                Ok(Replan::Deferred { at_s: last + interval_s })
            }
        }
        _ => {
            job.pending_fix = None;
            job.drop_position = fix;
            job.last_replan_s = Some(t);
            Ok(Replan::Now(fix))
        }
    }
}

/// Applies a deferred fix when its replan tick comes due.
pub fn replan_tick(job: &mut Job, t: f64) -> Option<Position> {
    if job.state != JobState::PickedUp {
        job.pending_fix = None;
        return None;
    }
    let fix = job.pending_fix.take()?;
    job.drop_position = fix;
    job.last_replan_s = Some(t);
    Some(fix)
}
