//! Mutable simulation state and the one-second tick.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::demand::VehicleSpec;
use crate::error::{Result, SimError};
use crate::metrics::MetricReport;
use crate::network::Network;
use crate::{DETECTOR_CAP, DETECTOR_RANGE_M, EPISODE_SECONDS, GREEN_SECONDS, SATURATION_HEADWAY, YELLOW_SECONDS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VehicleStatus {
    NotDeparted,
    /// Moving along `route[leg]` in the given network-wide lane since `entered`.
    Traversing { lane: usize, entered: u32 },
    /// Waiting in the queue of a network-wide movement.
    Queued { movement: usize },
    Arrived,
}

#[derive(Clone, Debug)]
pub struct Vehicle {
    pub spec: VehicleSpec,
    pub leg: usize,
    pub status: VehicleStatus,
    pub inserted: Option<u32>,
    pub arrived: Option<u32>,
}

impl Vehicle {
    pub fn link(&self) -> usize {
        self.spec.route[self.leg]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Signal {
    pub phase: usize,
    pub yellow: u32,
    pub green: u32,
}

/// Stopped and moving counts of one lane as seen by its detector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LaneReading {
    pub queue: u32,
    pub moving: u32,
}

/// Detector readings of an intersection, aligned with its
/// `in_lanes` and `out_lanes`. `movements[m]` splits the stopped vehicles
/// an incoming detector sees by the movement they wait for, so the entries
/// of one lane sum to that lane's `queue`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Detectors {
    pub incoming: Vec<LaneReading>,
    pub outgoing: Vec<LaneReading>,
    pub movements: Vec<u32>,
}

/// Discharge record kept when tracing is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Discharge {
    pub clock: u32,
    pub movement: usize,
    pub vehicle: usize,
}

#[derive(Clone, Debug, Default)]
struct Accumulators {
    queue_sum: f64,
    speed_sum: f64,
    vehicle_ticks: u64,
    ticks: u64,
}

#[derive(Clone, Debug)]
pub struct Sim {
    net: Arc<Network>,
    clock: u32,
    horizon: u32,
    vehicles: Vec<Vehicle>,
    next_pending: usize,
    backlog: Vec<VecDeque<usize>>,
    moving: Vec<VecDeque<usize>>,
    queues: Vec<VecDeque<usize>>,
    lane_queued: Vec<u32>,
    /// Order in which each vehicle joined its stop-line queue.
    joined: Vec<u64>,
    next_join: u64,
    link_occupancy: Vec<usize>,
    next_discharge: Vec<u32>,
    signals: Vec<Signal>,
    departed: usize,
    arrived: usize,
    acc: Accumulators,
    trace: Option<Vec<Discharge>>,
}

impl Sim {
    pub fn new(net: Arc<Network>, mut trips: Vec<VehicleSpec>) -> Self {
        trips.sort_by(|a, b| a.depart.total_cmp(&b.depart));
        let count = trips.len();
        let vehicles = trips
            .into_iter()
            .map(|spec| Vehicle {
                spec,
                leg: 0,
                status: VehicleStatus::NotDeparted,
                inserted: None,
                arrived: None,
            })
            .collect();
        Self {
            clock: 0,
            horizon: EPISODE_SECONDS,
            vehicles,
            next_pending: 0,
            backlog: vec![VecDeque::new(); net.links.len()],
            moving: vec![VecDeque::new(); net.num_lanes()],
            queues: vec![VecDeque::new(); net.num_movements()],
            lane_queued: vec![0; net.num_lanes()],
            joined: vec![0; count],
            next_join: 0,
            link_occupancy: vec![0; net.links.len()],
            next_discharge: vec![0; net.num_movements()],
            signals: vec![
                Signal {
                    phase: 0,
                    yellow: 0,
                    green: 0
                };
                net.intersections.len()
            ],
            departed: 0,
            arrived: 0,
            acc: Accumulators::default(),
            trace: None,
            net,
        }
    }

    pub fn with_horizon(mut self, horizon: u32) -> Self {
        self.horizon = horizon;
        self
    }

    /// Records every discharge from now on.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[Discharge] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn network(&self) -> &Arc<Network> {
        &self.net
    }

    pub fn clock(&self) -> u32 {
        self.clock
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn done(&self) -> bool {
        self.clock >= self.horizon
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn signal(&self, k: usize) -> Signal {
        self.signals[k]
    }

    pub fn departed(&self) -> usize {
        self.departed
    }

    pub fn arrived(&self) -> usize {
        self.arrived
    }

    /// Vehicles currently traversing or queued.
    pub fn in_network(&self) -> usize {
        self.moving.iter().map(VecDeque::len).sum::<usize>() + self.queues.iter().map(VecDeque::len).sum::<usize>()
    }

    /// Vehicle ids waiting in a network-wide movement queue, front first.
    pub fn queue(&self, movement: usize) -> impl Iterator<Item = usize> + '_ {
        self.queues[movement].iter().copied()
    }

    /// Whether intersection `k` has finished its green and awaits a phase.
    pub fn ready(&self, k: usize) -> bool {
        let s = self.signals[k];
        s.yellow == 0 && s.green == 0
    }

    /// Chooses the next phase of intersection `k`. A change inserts the
    /// yellow interval before its green; keeping the phase extends green.
    pub fn apply_action(&mut self, k: usize, phase: usize) -> Result<()> {
        let phases = self
            .net
            .intersections
            .get(k)
            .ok_or_else(|| SimError::Action {
                intersection: k,
                msg: "no such intersection".into(),
            })?
            .phases
            .len();
        if phase >= phases {
            return Err(SimError::Action {
                intersection: k,
                msg: format!("phase {phase} out of range for {phases} phases"),
            });
        }
        if !self.ready(k) {
            return Err(SimError::Action {
                intersection: k,
                msg: "signal is mid-interval".into(),
            });
        }
        let s = &mut self.signals[k];
        if s.phase != phase {
            s.yellow = YELLOW_SECONDS;
        }
        s.phase = phase;
        s.green = GREEN_SECONDS;
        Ok(())
    }

    fn enter_link(&mut self, v: usize, link: usize, lane: usize) {
        let idx = self.net.lane_index(crate::LaneRef { link, lane });
        self.vehicles[v].status = VehicleStatus::Traversing {
            lane: idx,
            entered: self.clock,
        };
        self.moving[idx].push_back(v);
        self.link_occupancy[link] += 1;
    }

    fn has_room(&self, link: usize) -> bool {
        self.link_occupancy[link] < self.net.link_capacity(link)
    }

    /// Advances the clock by one second.
    pub fn step(&mut self) {
        let net = Arc::clone(&self.net);

        // Departures join their origin backlog, then enter while there is room.
        while let Some(v) = self.vehicles.get(self.next_pending) {
            if v.spec.depart.ceil() > self.clock as f64 {
                break;
            }
            self.backlog[v.spec.route[0]].push_back(self.next_pending);
            self.next_pending += 1;
        }
        for link in 0..net.links.len() {
            let mut admitted = 0;
            while admitted < net.links[link].lanes && self.has_room(link) {
                let Some(v) = self.backlog[link].pop_front() else { break };
                let base = net.lane_index(crate::LaneRef { link, lane: 0 });
                let lane = (0..net.links[link].lanes)
                    .min_by_key(|&l| self.moving[base + l].len())
                    .unwrap();
                self.enter_link(v, link, lane);
                self.vehicles[v].inserted = Some(self.clock);
                self.departed += 1;
                admitted += 1;
            }
        }

        // Green movements discharge one vehicle per saturation headway.
        for (k, it) in net.intersections.iter().enumerate() {
            let s = self.signals[k];
            if s.yellow > 0 {
                continue;
            }
            for &m in &it.phases[s.phase] {
                let g = net.movement_index(k, m);
                if self.clock < self.next_discharge[g] {
                    continue;
                }
                let out = it.movements[m].out_lane;
                if !self.has_room(out.link) {
                    continue;
                }
                let Some(v) = self.queues[g].pop_front() else { continue };
                self.lane_queued[net.lane_index(it.movements[m].in_lane)] -= 1;
                self.link_occupancy[it.movements[m].in_lane.link] -= 1;
                self.next_discharge[g] = self.clock + SATURATION_HEADWAY;
                self.vehicles[v].leg += 1;
                self.enter_link(v, out.link, out.lane);
                if let Some(t) = &mut self.trace {
                    t.push(Discharge {
                        clock: self.clock,
                        movement: g,
                        vehicle: v,
                    });
                }
            }
        }

        self.clock += 1;

        // Vehicles reaching the end of a link arrive or join a queue.
        for lane in 0..self.moving.len() {
            while let Some(&v) = self.moving[lane].front() {
                let VehicleStatus::Traversing { entered, .. } = self.vehicles[v].status else {
                    unreachable!("moving lanes hold traversing vehicles")
                };
                let link = self.vehicles[v].link();
                let l = &net.links[link];
                if l.speed_mps * ((self.clock - entered) as f64) < l.length_m {
                    break;
                }
                self.moving[lane].pop_front();
                let vehicle = &mut self.vehicles[v];
                if vehicle.leg + 1 == vehicle.spec.route.len() {
                    vehicle.status = VehicleStatus::Arrived;
                    vehicle.arrived = Some(self.clock);
                    self.link_occupancy[link] -= 1;
                    self.arrived += 1;
                    continue;
                }
                let next = vehicle.spec.route[vehicle.leg + 1];
                let choices = net.turn_movements(link, next);
                let g = *choices
                    .iter()
                    .min_by_key(|&&g| self.lane_queued[net.lane_index(net.movement(g).in_lane)])
                    .expect("routes only use existing turns");
                self.vehicles[v].status = VehicleStatus::Queued { movement: g };
                self.queues[g].push_back(v);
                self.joined[v] = self.next_join;
                self.next_join += 1;
                self.lane_queued[net.lane_index(net.movement(g).in_lane)] += 1;
            }
        }

        for s in &mut self.signals {
            if s.yellow > 0 {
                s.yellow -= 1;
            } else if s.green > 0 {
                s.green -= 1;
            }
        }

        self.accumulate();
    }

    fn accumulate(&mut self) {
        let net = &self.net;
        if !net.intersections.is_empty() {
            let total: u32 = net
                .intersections
                .iter()
                .flat_map(|it| it.in_lanes.iter())
                .map(|&l| self.lane_queued[net.lane_index(l)])
                .sum();
            self.acc.queue_sum += total as f64 / net.intersections.len() as f64;
        }
        for (link, l) in net.links.iter().enumerate() {
            let base = net.lane_index(crate::LaneRef { link, lane: 0 });
            let moving: usize = (0..l.lanes).map(|i| self.moving[base + i].len()).sum();
            self.acc.speed_sum += moving as f64 * l.speed_mps;
        }
        self.acc.vehicle_ticks += self.in_network() as u64;
        self.acc.ticks += 1;
    }

    fn position(&self, v: usize) -> f64 {
        let VehicleStatus::Traversing { entered, .. } = self.vehicles[v].status else {
            return 0.0;
        };
        let l = &self.net.links[self.vehicles[v].link()];
        (l.speed_mps * (self.clock - entered) as f64).min(l.length_m)
    }

    /// Stopped vehicles on a lane, uncapped.
    pub fn lane_queue(&self, lane: crate::LaneRef) -> u32 {
        self.lane_queued[self.net.lane_index(lane)]
    }

    /// Detector readings within range of intersection `k`: queues are capped
    /// at the detector's slot count, moving vehicles are counted within
    /// range of the stop line (incoming) or of the lane entry (outgoing).
    pub fn read_detectors(&self, k: usize) -> Detectors {
        let it = &self.net.intersections[k];
        let incoming = it
            .in_lanes
            .iter()
            .map(|&l| {
                let length = self.net.links[l.link].length_m;
                let lane = self.net.lane_index(l);
                let moving = self.moving[lane]
                    .iter()
                    .take_while(|&&v| self.position(v) >= length - DETECTOR_RANGE_M)
                    .count() as u32;
                LaneReading {
                    queue: self.lane_queued[lane].min(DETECTOR_CAP),
                    moving,
                }
            })
            .collect();
        let outgoing = it
            .out_lanes
            .iter()
            .map(|&l| {
                let lane = self.net.lane_index(l);
                let moving = self.moving[lane]
                    .iter()
                    .rev()
                    .take_while(|&&v| self.position(v) <= DETECTOR_RANGE_M)
                    .count() as u32;
                LaneReading {
                    queue: self.lane_queued[lane].min(DETECTOR_CAP),
                    moving,
                }
            })
            .collect();
        Detectors {
            incoming,
            outgoing,
            movements: self.movement_queues(k),
        }
    }

    /// The detector covers the first `DETECTOR_CAP` stopped vehicles of each
    /// incoming lane in joining order; count those per movement.
    fn movement_queues(&self, k: usize) -> Vec<u32> {
        let it = &self.net.intersections[k];
        let mut counts = vec![0; it.movements.len()];
        for slot in 0..it.in_lanes.len() {
            let mut seen: Vec<(u64, usize)> = it
                .movements
                .iter()
                .enumerate()
                .filter(|(_, mv)| mv.in_slot == slot)
                .flat_map(|(m, _)| {
                    let g = self.net.movement_index(k, m);
                    self.queues[g].iter().take(DETECTOR_CAP as usize).map(move |&v| (self.joined[v], m))
                })
                .collect();
            seen.sort_unstable();
            for &(_, m) in seen.iter().take(DETECTOR_CAP as usize) {
                counts[m] += 1;
            }
        }
        counts
    }

    /// Negative sum of detector queues over the incoming lanes of `k`.
    pub fn reward(&self, k: usize) -> f64 {
        reward(&self.read_detectors(k))
    }

    /// Episode metrics so far.
    pub fn metrics(&self) -> MetricReport {
        let ticks = self.acc.ticks.max(1) as f64;
        let mut trip_time = 0.0;
        let mut delay = 0.0;
        let mut duration = 0.0;
        let mut scheduled = 0usize;
        for v in &self.vehicles {
            if v.spec.depart >= self.horizon as f64 {
                continue;
            }
            scheduled += 1;
            let end = v.arrived.map_or(self.clock as f64, f64::from);
            duration += (end - v.spec.depart).max(0.0);
            if let (Some(a), Some(i)) = (v.arrived, v.inserted) {
                let t = (a - i) as f64;
                let free: u32 = v.spec.route.iter().map(|&l| self.net.links[l].free_flow_ticks()).sum();
                trip_time += t;
                delay += t - free as f64;
            }
        }
        let per = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
        MetricReport {
            queue_veh: if self.acc.ticks == 0 { 0.0 } else { self.acc.queue_sum / ticks },
            speed_mps: if self.acc.vehicle_ticks == 0 {
                0.0
            } else {
                self.acc.speed_sum / self.acc.vehicle_ticks as f64
            },
            completion_vps: self.arrived as f64 / self.horizon as f64,
            trip_time_s: per(trip_time, self.arrived),
            trip_delay_s: per(delay, self.arrived),
            trip_duration_s: per(duration, scheduled),
        }
    }
}

/// Negative sum of incoming-lane detector queues.
pub fn reward(d: &Detectors) -> f64 {
    -(d.incoming.iter().map(|r| r.queue as f64).sum::<f64>())
}
