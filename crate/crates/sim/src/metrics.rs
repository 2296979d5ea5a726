use serde::{Deserialize, Serialize};

/// Episode-level traffic metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Stopped vehicles on incoming lanes, averaged over intersections and ticks.
    pub queue_veh: f64,
    /// Mean speed over in-network vehicle-seconds; queued vehicles count as 0.
    pub speed_mps: f64,
    /// Arrivals per second of episode.
    pub completion_vps: f64,
    /// Mean entry-to-arrival time of arrived vehicles.
    pub trip_time_s: f64,
    /// Mean trip time minus free-flow time, arrived vehicles only.
    pub trip_delay_s: f64,
    /// Mean scheduled-departure-to-arrival time of all vehicles, unfinished
    /// trips counted to the end of the episode.
    pub trip_duration_s: f64,
}

impl MetricReport {
    pub const FIELDS: [&'static str; 6] = [
        "queue_veh",
        "speed_mps",
        "completion_vps",
        "trip_time_s",
        "trip_delay_s",
        "trip_duration_s",
    ];

    pub fn values(&self) -> [f64; 6] {
        [
            self.queue_veh,
            self.speed_mps,
            self.completion_vps,
            self.trip_time_s,
            self.trip_delay_s,
            self.trip_duration_s,
        ]
    }
}
