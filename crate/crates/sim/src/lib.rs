//! A deterministic point-queue traffic simulator.
//!
//! Vehicles cross each link at the speed limit, then wait in the FIFO queue
//! of the movement their route takes next. Green movements release one
//! vehicle per saturation headway into the downstream link while it has
//! storage room. Time advances in one-second ticks.

mod demand;
mod error;
pub mod generate;
mod metrics;
mod network;
mod scenario;
mod sim;

pub use demand::{DemandEntry, DemandSchedule, VehicleSpec};
pub use error::{Result, SimError};
pub use metrics::MetricReport;
pub use network::{Intersection, LaneRef, Link, Movement, Network, Node, MAX_MOVEMENTS, MAX_PHASES, TOPOLOGY_DIM};
pub use scenario::{
    DemandDoc, IntersectionDoc, LinkDoc, MovementDoc, NodeDoc, NodeKind, Scenario, ScenarioDoc,
};
pub use sim::{reward, Detectors, Discharge, LaneReading, Signal, Sim, Vehicle, VehicleStatus};

pub const EPISODE_SECONDS: u32 = 3600;
pub const GREEN_SECONDS: u32 = 10;
pub const YELLOW_SECONDS: u32 = 3;
/// Seconds between consecutive discharges of one movement.
pub const SATURATION_HEADWAY: u32 = 2;
/// Road length occupied by one stopped vehicle.
pub const SLOT_LENGTH_M: f64 = 7.5;
pub const DETECTOR_RANGE_M: f64 = 50.0;
/// Most stopped vehicles a detector can see: ⌊50 / 7.5⌋.
pub const DETECTOR_CAP: u32 = 6;
