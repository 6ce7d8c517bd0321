//! Flight planning: stop ordering, altitude profile, energy forecast, ETAs,
//! reschedules, recharge insertion and drop dispersion.
//!
//! Energy model (joules):
//! - a *low* segment stays in the safe-drop band: `p_low * d`
//! - a *climb* segment goes up to cruise and back down: `p_cruise * d + 2 * p_vert * dh`
//!   where `dh = cruise_alt - band midpoint`
//! - every delivery stop adds `p_hover * dispense_dwell`
//!
//! Staying low wins exactly when `d < d* = 2 * p_vert * dh / (p_low - p_cruise)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{distance, Address, Position};

/// Absolute slack (meters) below which two tour lengths count as equal.
pub const LENGTH_EPS: f64 = 1e-9;

pub const MAX_BRUTE_FORCE_STOPS: usize = 9;
pub const MAX_ENUMERATED_SEGMENTS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerParams {
    pub cruise_alt_m: f64,
    pub safe_drop_band_m: [f64; 2],
    pub p_cruise_j_per_m: f64,
    pub p_low_j_per_m: f64,
    pub p_vert_j_per_m: f64,
    pub p_hover_w: f64,
    pub dispense_dwell_s: f64,
    pub speed_cruise_m_per_s: f64,
    pub speed_low_m_per_s: f64,
    pub speed_vert_m_per_s: f64,
    pub battery_capacity_j: f64,
    pub battery_reserve_frac: f64,
    pub recharge_time_s: f64,
    pub drag_factor_plain: f64,
    pub drag_factor_ballast: f64,
    pub g_m_per_s2: f64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self {
            cruise_alt_m: 60.0,
            safe_drop_band_m: [4.0, 8.0],
            p_cruise_j_per_m: 1.0,
            p_low_j_per_m: 1.5,
            p_vert_j_per_m: 3.0,
            p_hover_w: 120.0,
            dispense_dwell_s: 20.0,
            speed_cruise_m_per_s: 12.0,
            speed_low_m_per_s: 6.0,
            speed_vert_m_per_s: 2.0,
            battery_capacity_j: 500_000.0,
            battery_reserve_frac: 0.10,
            recharge_time_s: 600.0,
            drag_factor_plain: 1.3,
            drag_factor_ballast: 1.0,
            g_m_per_s2: 9.81,
        }
    }
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl PlannerParams {
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let [low, high] = self.safe_drop_band_m;
        if !positive(self.p_cruise_j_per_m) {
            return Err(("p_cruise_j_per_m", "must be > 0".into()));
        }
        if !(self.p_low_j_per_m.is_finite() && self.p_low_j_per_m > self.p_cruise_j_per_m) {
            return Err(("p_low_j_per_m", "must exceed p_cruise_j_per_m".into()));
        }
        if !positive(self.p_vert_j_per_m) {
            return Err(("p_vert_j_per_m", "must be > 0".into()));
        }
        if !(self.p_hover_w.is_finite() && self.p_hover_w >= 0.0) {
            return Err(("p_hover_w", "must be >= 0".into()));
        }
        if !(low.is_finite() && low >= 0.0 && low < high && high < self.cruise_alt_m && self.cruise_alt_m.is_finite()) {
            return Err(("safe_drop_band_m", "need 0 <= low < high < cruise_alt_m".into()));
        }
        if !positive(self.dispense_dwell_s) {
            return Err(("dispense_dwell_s", "must be > 0".into()));
        }
        for (name, v) in [
            ("speed_cruise_m_per_s", self.speed_cruise_m_per_s),
            ("speed_low_m_per_s", self.speed_low_m_per_s),
            ("speed_vert_m_per_s", self.speed_vert_m_per_s),
            ("battery_capacity_j", self.battery_capacity_j),
            ("drag_factor_plain", self.drag_factor_plain),
            ("drag_factor_ballast", self.drag_factor_ballast),
            ("g_m_per_s2", self.g_m_per_s2),
        ] {
            if !positive(v) {
                return Err((name, "must be > 0".into()));
            }
        }
        if !(0.0..1.0).contains(&self.battery_reserve_frac) {
            return Err(("battery_reserve_frac", "must lie in [0, 1)".into()));
        }
        if !(self.recharge_time_s.is_finite() && self.recharge_time_s >= 0.0) {
            return Err(("recharge_time_s", "must be >= 0".into()));
        }
        Ok(())
    }

    pub fn band_mid(&self) -> f64 {
        (self.safe_drop_band_m[0] + self.safe_drop_band_m[1]) / 2.0
    }

    /// Climb height from the band midpoint to cruise.
    pub fn delta_h(&self) -> f64 {
        self.cruise_alt_m - self.band_mid()
    }

    pub fn usable_energy_j(&self) -> f64 {
        self.battery_capacity_j * (1.0 - self.battery_reserve_frac)
    }

    pub fn dwell_energy_j(&self) -> f64 {
        self.p_hover_w * self.dispense_dwell_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMode {
    Low,
    Climb,
}

/// Break-even ground distance between staying low and climbing to cruise.
pub fn break_even_distance(params: &PlannerParams) -> f64 {
    2.0 * params.p_vert_j_per_m * params.delta_h() / (params.p_low_j_per_m - params.p_cruise_j_per_m)
}

/// Mode for a segment between two stops (or from a non-base origin).
pub fn segment_mode(d: f64, params: &PlannerParams) -> SegmentMode {
    if d < break_even_distance(params) {
        SegmentMode::Low
    } else {
        SegmentMode::Climb
    }
}

pub fn segment_energy(d: f64, mode: SegmentMode, params: &PlannerParams) -> f64 {
    match mode {
        SegmentMode::Low => params.p_low_j_per_m * d,
        SegmentMode::Climb => params.p_cruise_j_per_m * d + 2.0 * params.p_vert_j_per_m * params.delta_h(),
    }
}

pub fn segment_time(d: f64, mode: SegmentMode, params: &PlannerParams) -> f64 {
    match mode {
        SegmentMode::Low => d / params.speed_low_m_per_s,
        SegmentMode::Climb => d / params.speed_cruise_m_per_s + 2.0 * params.delta_h() / params.speed_vert_m_per_s,
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("{what} limited to {max}, got {got}")]
    TooLarge { what: &'static str, max: usize, got: usize },
    #[error("unknown stop {0:?}")]
    UnknownStop(String),
    #[error("stop {0:?} already delivered")]
    AlreadyDelivered(String),
    #[error("infeasible_leg: base -> {stop} -> base needs {required_j:.1} J, budget {budget_j:.1} J")]
    InfeasibleLeg { stop: String, required_j: f64, budget_j: f64 },
}

// ---------------------------------------------------------------------------
// Routing

/// Length of the path visiting `seq` in order.
pub fn path_length(seq: &[Position]) -> f64 {
    seq.windows(2).map(|w| distance(w[0], w[1])).sum()
}

/// Closed tour base -> stops[order] -> base.
pub fn tour_length(base: Position, stops: &[Address], order: &[usize]) -> f64 {
    let mut seq = Vec::with_capacity(order.len() + 2);
    seq.push(base);
    seq.extend(order.iter().map(|&i| stops[i].position));
    seq.push(base);
    path_length(&seq)
}

/// Greedy tour from base; ties go to the lower address id.
pub fn nearest_neighbor(base: Position, stops: &[Address]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..stops.len()).collect();
    let mut order = Vec::with_capacity(stops.len());
    let mut here = base;
    while !left.is_empty() {
        let (k, _) = left
            .iter()
            .enumerate()
            .min_by(|(_, &a), (_, &b)| {
                distance(here, stops[a].position)
                    .total_cmp(&distance(here, stops[b].position))
                    .then_with(|| stops[a].id.cmp(&stops[b].id))
            })
            .expect("non-empty");
        let next = left.remove(k);
        here = stops[next].position;
        order.push(next);
    }
    order
}

/// First-improvement 2-opt over a path whose two endpoints stay fixed.
/// `nodes` are indices into `points`; moves scan increasing `i` then `j`.
pub fn two_opt_fixed_ends(nodes: &mut [usize], points: &[Position]) {
    let n = nodes.len();
    if n < 4 {
        return;
    }
    let d = |a: usize, b: usize| distance(points[a], points[b]);
    'search: loop {
        for i in 0..n - 2 {
            for j in i + 2..n - 1 {
                let (a, b, c, e) = (nodes[i], nodes[i + 1], nodes[j], nodes[j + 1]);
                let delta = d(a, c) + d(b, e) - d(a, b) - d(c, e);
                if delta < -LENGTH_EPS {
                    nodes[i + 1..=j].reverse();
                    continue 'search;
                }
            }
        }
        break;
    }
}

/// Improves a closed tour with the base pinned at both ends.
pub fn two_opt(base: Position, stops: &[Address], order: &[usize]) -> Vec<usize> {
    let mut points: Vec<Position> = stops.iter().map(|s| s.position).collect();
    points.push(base);
    let base_idx = stops.len();
    let mut nodes = Vec::with_capacity(order.len() + 2);
    nodes.push(base_idx);
    nodes.extend_from_slice(order);
    nodes.push(base_idx);
    two_opt_fixed_ends(&mut nodes, &points);
    nodes[1..nodes.len() - 1].to_vec()
}

/// Nearest neighbor from base, then 2-opt to a local optimum.
pub fn plan_route(base: Position, stops: &[Address]) -> Vec<usize> {
    let nn = nearest_neighbor(base, stops);
    two_opt(base, stops, &nn)
}

/// Exact minimum closed tour by enumeration. Among equal-length tours the
/// lexicographically smallest sequence of address ids wins.
pub fn brute_force_route(base: Position, stops: &[Address]) -> Result<Vec<usize>, PlanError> {
    if stops.len() > MAX_BRUTE_FORCE_STOPS {
        return Err(PlanError::TooLarge {
            what: "brute-force stops",
            max: MAX_BRUTE_FORCE_STOPS,
            got: stops.len(),
        });
    }
    let mut perm: Vec<usize> = (0..stops.len()).collect();
    perm.sort_by(|&a, &b| stops[a].id.cmp(&stops[b].id));
    let mut best = perm.clone();
    let mut best_len = tour_length(base, stops, &perm);
    while next_permutation(&mut perm, |a, b| stops[*a].id.cmp(&stops[*b].id)) {
        let len = tour_length(base, stops, &perm);
        if len < best_len - LENGTH_EPS {
            best_len = len;
            best.clone_from(&perm);
        }
    }
    Ok(best)
}

fn next_permutation<T, F>(v: &mut [T], cmp: F) -> bool
where
    F: Fn(&T, &T) -> std::cmp::Ordering,
{
    use std::cmp::Ordering::Less;
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && cmp(&v[i - 1], &v[i]) != Less {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while cmp(&v[i - 1], &v[j]) != Less {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

// ---------------------------------------------------------------------------
// Altitude profile

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AltitudeProfile {
    /// One mode per segment: base -> s0, s0 -> s1, ..., s_last -> base.
    pub modes: Vec<SegmentMode>,
    pub d_star_m: f64,
}

fn tour_points(base: Position, ordered: &[Position]) -> Vec<Position> {
    let mut seq = Vec::with_capacity(ordered.len() + 2);
    seq.push(base);
    seq.extend_from_slice(ordered);
    seq.push(base);
    seq
}

/// Threshold rule: inter-stop segments shorter than d* stay low; segments
/// touching the base always climb.
pub fn plan_altitude_profile(base: Position, ordered: &[Position], params: &PlannerParams) -> AltitudeProfile {
    let seq = tour_points(base, ordered);
    let last = seq.len() - 2;
    let modes = seq
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            if k == 0 || k == last {
                SegmentMode::Climb
            } else {
                segment_mode(distance(w[0], w[1]), params)
            }
        })
        .collect();
    AltitudeProfile {
        modes,
        d_star_m: break_even_distance(params),
    }
}

/// Total forecast for a closed tour flown with `modes`, dwell included.
pub fn profile_energy(base: Position, ordered: &[Position], modes: &[SegmentMode], params: &PlannerParams) -> f64 {
    let seq = tour_points(base, ordered);
    assert_eq!(modes.len(), seq.len() - 1, "one mode per segment");
    let travel: f64 = seq
        .windows(2)
        .zip(modes)
        .map(|(w, &m)| segment_energy(distance(w[0], w[1]), m, params))
        .sum();
    travel + ordered.len() as f64 * params.dwell_energy_j()
}

/// Exhaustive search over the inter-stop segment modes. Ties prefer low.
pub fn enumerate_altitude_profiles(
    base: Position,
    ordered: &[Position],
    params: &PlannerParams,
) -> Result<(Vec<SegmentMode>, f64), PlanError> {
    let inner = ordered.len().saturating_sub(1);
    if inner > MAX_ENUMERATED_SEGMENTS {
        return Err(PlanError::TooLarge {
            what: "enumerated segments",
            max: MAX_ENUMERATED_SEGMENTS,
            got: inner,
        });
    }
    let mut best: Option<(Vec<SegmentMode>, f64)> = None;
    for mask in 0u32..(1 << inner) {
        let mut modes = Vec::with_capacity(inner + 2);
        modes.push(SegmentMode::Climb);
        modes.extend((0..inner).map(|k| {
            if mask & (1 << k) != 0 {
                SegmentMode::Climb
            } else {
                SegmentMode::Low
            }
        }));
        modes.push(SegmentMode::Climb);
        if ordered.is_empty() {
            modes.truncate(1);
        }
        let cost = profile_energy(base, ordered, &modes, params);
        let better = match &best {
            None => true,
            Some((bm, bc)) => cost < *bc || (cost == *bc && modes < *bm),
        };
        if better {
            best = Some((modes, cost));
        }
    }
    Ok(best.expect("at least one profile"))
}

// ---------------------------------------------------------------------------
// Flight plans

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStop {
    pub address: String,
    pub position: Position,
    pub articles: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Waypoint {
    Origin,
    Base,
    Stop(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub from: Waypoint,
    pub to: Waypoint,
    pub distance_m: f64,
    pub mode: SegmentMode,
    pub energy_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlightPlan {
    pub base: Position,
    /// Where the plan starts when not at the base (mid-mission replans, hails).
    pub origin: Option<Position>,
    pub t0: f64,
    pub stops: Vec<PlanStop>,
    /// Leading stops already served.
    pub delivered: usize,
    /// The aircraft returns to base and recharges before `stops[i]` for each `i`.
    pub recharges: Vec<usize>,
    pub segments: Vec<Segment>,
    pub etas_s: Vec<f64>,
    pub d_star_m: f64,
}

impl FlightPlan {
    pub fn build(
        base: Position,
        origin: Option<Position>,
        stops: Vec<PlanStop>,
        recharges: Vec<usize>,
        params: &PlannerParams,
        t0: f64,
    ) -> Self {
        let mut plan = FlightPlan {
            base,
            origin,
            t0,
            stops,
            delivered: 0,
            recharges,
            segments: Vec::new(),
            etas_s: Vec::new(),
            d_star_m: break_even_distance(params),
        };
        plan.segments = plan.derive_segments(params);
        plan.etas_s = compute_etas(&plan, params, t0);
        plan
    }

    fn point(&self, w: Waypoint) -> Position {
        match w {
            Waypoint::Origin => self.origin.unwrap_or(self.base),
            Waypoint::Base => self.base,
            Waypoint::Stop(i) => self.stops[i].position,
        }
    }

    fn derive_segments(&self, params: &PlannerParams) -> Vec<Segment> {
        if self.stops.is_empty() {
            return Vec::new();
        }
        let mut route = vec![if self.origin.is_some() { Waypoint::Origin } else { Waypoint::Base }];
        for i in 0..self.stops.len() {
            if self.recharges.contains(&i) && route.last() != Some(&Waypoint::Base) {
                route.push(Waypoint::Base);
            }
            route.push(Waypoint::Stop(i));
        }
        route.push(Waypoint::Base);
        route
            .windows(2)
            .map(|w| {
                let d = distance(self.point(w[0]), self.point(w[1]));
                let mode = if w[0] == Waypoint::Base || w[1] == Waypoint::Base {
                    SegmentMode::Climb
                } else {
                    segment_mode(d, params)
                };
                Segment {
                    from: w[0],
                    to: w[1],
                    distance_m: d,
                    mode,
                    energy_j: segment_energy(d, mode, params),
                }
            })
            .collect()
    }

    pub fn segment_modes(&self) -> Vec<SegmentMode> {
        self.segments.iter().map(|s| s.mode).collect()
    }

    pub fn travel_energy_j(&self) -> f64 {
        self.segments.iter().map(|s| s.energy_j).sum()
    }

    pub fn total_energy_j(&self, params: &PlannerParams) -> f64 {
        self.travel_energy_j() + self.stops.len() as f64 * params.dwell_energy_j()
    }

    /// Forecast of each stretch flown between recharges, dwell included.
    pub fn leg_energies(&self, params: &PlannerParams) -> Vec<f64> {
        let mut legs = vec![0.0];
        for seg in &self.segments {
            *legs.last_mut().expect("non-empty") += seg.energy_j;
            if let Waypoint::Stop(_) = seg.to {
                *legs.last_mut().expect("non-empty") += params.dwell_energy_j();
            }
            if seg.to == Waypoint::Base {
                legs.push(0.0);
            }
        }
        legs.pop();
        legs
    }

    pub fn total_duration_s(&self, params: &PlannerParams) -> f64 {
        let travel: f64 = self.segments.iter().map(|s| segment_time(s.distance_m, s.mode, params)).sum();
        travel + self.stops.len() as f64 * params.dispense_dwell_s + self.recharges.len() as f64 * params.recharge_time_s
    }

    pub fn position_of(&self, address: &str) -> Option<usize> {
        self.stops.iter().position(|s| s.address == address)
    }

    pub fn document(&self, params: &PlannerParams) -> PlanDocument {
        PlanDocument {
            stops: self.stops.clone(),
            segment_modes: self.segment_modes(),
            energy_j: self.segments.iter().map(|s| s.energy_j).collect(),
            etas_s: self.etas_s.clone(),
            recharges: self.recharges.clone(),
            d_star_m: self.d_star_m,
            total_energy_j: self.total_energy_j(params),
        }
    }
}

/// The JSON shape emitted by the `plan` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub stops: Vec<PlanStop>,
    pub segment_modes: Vec<SegmentMode>,
    pub energy_j: Vec<f64>,
    pub etas_s: Vec<f64>,
    pub recharges: Vec<usize>,
    pub d_star_m: f64,
    pub total_energy_j: f64,
}

/// Arrival time at each stop: flight time per segment, a dwell after every
/// stop and a full recharge at each intermediate base visit.
pub fn compute_etas(plan: &FlightPlan, params: &PlannerParams, t0: f64) -> Vec<f64> {
    let mut etas = vec![0.0; plan.stops.len()];
    let mut t = t0;
    let last = plan.segments.len().saturating_sub(1);
    for (k, seg) in plan.segments.iter().enumerate() {
        t += segment_time(seg.distance_m, seg.mode, params);
        match seg.to {
            Waypoint::Stop(i) => {
                etas[i] = t;
                t += params.dispense_dwell_s;
            }
            Waypoint::Base if k != last => t += params.recharge_time_s,
            _ => {}
        }
    }
    etas
}

/// Greedy recharge insertion: a stop joins the current leg only if the leg
/// can still fly home afterwards within `capacity * (1 - reserve)`.
pub fn check_energy_feasibility(plan: &FlightPlan, params: &PlannerParams) -> Result<FlightPlan, PlanError> {
    let budget = params.usable_energy_j();
    let dwell = params.dwell_energy_j();
    let home = |p: Position| segment_energy(distance(p, plan.base), SegmentMode::Climb, params);
    let mut recharges = Vec::new();
    // Energy spent on the current leg up to the previous stop, return excluded.
    let mut used = 0.0;
    let mut prev: Option<Position> = None;
    for (i, stop) in plan.stops.iter().enumerate() {
        let (from, from_base) = match prev {
            Some(p) => (p, false),
            None => match plan.origin {
                Some(o) => (o, false),
                None => (plan.base, true),
            },
        };
        let hop = |from: Position, from_base: bool| {
            let d = distance(from, stop.position);
            let mode = if from_base { SegmentMode::Climb } else { segment_mode(d, params) };
            segment_energy(d, mode, params) + dwell
        };
        let mut cost = hop(from, from_base);
        if used + cost + home(stop.position) > budget {
            let fresh = hop(plan.base, true);
            if fresh + home(stop.position) > budget {
                return Err(PlanError::InfeasibleLeg {
                    stop: stop.address.clone(),
                    required_j: fresh + home(stop.position),
                    budget_j: budget,
                });
            }
            if !(from_base && used == 0.0) {
                recharges.push(i);
            }
            used = 0.0;
            cost = fresh;
        }
        used += cost;
        prev = Some(stop.position);
    }
    let mut out = FlightPlan::build(plan.base, plan.origin, plan.stops.clone(), recharges, params, plan.t0);
    out.delivered = plan.delivered;
    Ok(out)
}

/// Plans a fresh mission from the base over `stops`.
pub fn plan_flight(base: Position, stops: Vec<PlanStop>, params: &PlannerParams) -> Result<FlightPlan, PlanError> {
    if stops.is_empty() {
        return Ok(FlightPlan::build(base, None, stops, Vec::new(), params, 0.0));
    }
    let addresses: Vec<Address> = stops
        .iter()
        .map(|s| Address {
            id: s.address.clone(),
            position: s.position,
            signature: None,
            registered_contacts: Vec::new(),
        })
        .collect();
    let order = plan_route(base, &addresses);
    let ordered: Vec<PlanStop> = order.into_iter().map(|i| stops[i].clone()).collect();
    let plan = FlightPlan::build(base, None, ordered, Vec::new(), params, 0.0);
    check_energy_feasibility(&plan, params)
}

/// Moves a stop to the first slot whose recomputed ETA is at least
/// `earliest_s` (last if none), then re-improves the stops after it.
pub fn apply_reschedule(
    plan: &FlightPlan,
    address: &str,
    earliest_s: f64,
    params: &PlannerParams,
) -> Result<FlightPlan, PlanError> {
    let idx = plan
        .position_of(address)
        .ok_or_else(|| PlanError::UnknownStop(address.to_string()))?;
    if idx < plan.delivered {
        return Err(PlanError::AlreadyDelivered(address.to_string()));
    }
    let mut rest = plan.stops.clone();
    let moved = rest.remove(idx);
    let head: Vec<PlanStop> = rest.drain(..plan.delivered).collect();

    let rebuild = |stops: Vec<PlanStop>| -> Result<FlightPlan, PlanError> {
        let draft = FlightPlan::build(plan.base, plan.origin, stops, Vec::new(), params, plan.t0);
        let mut out = check_energy_feasibility(&draft, params)?;
        out.delivered = plan.delivered;
        Ok(out)
    };
    let arrange = |slot: usize| {
        let mut stops = head.clone();
        stops.extend_from_slice(&rest[..slot]);
        stops.push(moved.clone());
        stops.extend_from_slice(&rest[slot..]);
        stops
    };

    let mut chosen = rest.len();
    for slot in 0..=rest.len() {
        let candidate = rebuild(arrange(slot))?;
        if candidate.etas_s[head.len() + slot] >= earliest_s {
            chosen = slot;
            break;
        }
    }

    // 2-opt over the stops after the pinned one; the path ends at the base.
    let mut stops = arrange(chosen);
    let pinned = head.len() + chosen;
    let tail_len = stops.len() - pinned - 1;
    if tail_len >= 2 {
        let mut points: Vec<Position> = stops[pinned..].iter().map(|s| s.position).collect();
        points.push(plan.base);
        let mut nodes: Vec<usize> = (0..points.len()).collect();
        two_opt_fixed_ends(&mut nodes, &points);
        let tail: Vec<PlanStop> = nodes[1..nodes.len() - 1]
            .iter()
            .map(|&k| stops[pinned + k].clone())
            .collect();
        stops.truncate(pinned + 1);
        stops.extend(tail);
    }
    rebuild(stops)
}

// ---------------------------------------------------------------------------
// Drop dispersion

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropEstimate {
    pub fall_time_s: f64,
    pub dispersion_radius_m: f64,
}

/// Vacuum fall time scaled by a drag factor; ballast lowers the factor.
pub fn drop_dispersion(h: f64, wind_speed: f64, ballast: bool, params: &PlannerParams) -> DropEstimate {
    let fall_time_s = (2.0 * h.max(0.0) / params.g_m_per_s2).sqrt();
    let k = if ballast {
        params.drag_factor_ballast
    } else {
        params.drag_factor_plain
    };
    DropEstimate {
        fall_time_s,
        dispersion_radius_m: wind_speed * fall_time_s * k,
    }
}
