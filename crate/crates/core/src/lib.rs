//! Deterministic simulator and mission planner for a multi-compartment
//! delivery dispenser carried by a UAV.

pub mod audit;
pub mod dispatch;
pub mod dispenser;
pub mod mission;
pub mod planner;
pub mod protocol;
pub mod rng;
pub mod sim;
pub mod world;
