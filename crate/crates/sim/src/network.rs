//! Static road network: nodes, links, signalised intersections and routes.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::scenario::{NodeKind, ScenarioDoc};

/// Padding cap on movements per intersection.
pub const MAX_MOVEMENTS: usize = 36;
/// Padding cap on phases per intersection.
pub const MAX_PHASES: usize = 8;

/// Half-width of the conflict-zone box drawn around every junction.
const JUNCTION_RADIUS: f64 = 1.0;
const LANE_WIDTH: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub kind: NodeKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub from: usize,
    pub to: usize,
    pub length_m: f64,
    pub speed_mps: f64,
    pub lanes: usize,
}

impl Link {
    /// Whole seconds needed to traverse the link at the speed limit.
    pub fn free_flow_ticks(&self) -> u32 {
        (self.length_m / self.speed_mps).ceil() as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LaneRef {
    pub link: usize,
    pub lane: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Movement {
    pub in_lane: LaneRef,
    pub out_lane: LaneRef,
    /// Position of `in_lane` in [`Intersection::in_lanes`].
    pub in_slot: usize,
    /// Position of `out_lane` in [`Intersection::out_lanes`].
    pub out_slot: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Intersection {
    pub id: String,
    pub node: usize,
    pub kind: NodeKind,
    pub movements: Vec<Movement>,
    pub phases: Vec<Vec<usize>>,
    /// Incoming lanes in order of first use by a movement.
    pub in_lanes: Vec<LaneRef>,
    /// Outgoing lanes in order of first use by a movement.
    pub out_lanes: Vec<LaneRef>,
    pub in_links: Vec<usize>,
    pub out_links: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub nodes: Vec<Node>,
    pub links: Vec<Link>,
    pub intersections: Vec<Intersection>,
    node_intersection: Vec<Option<usize>>,
    lane_base: Vec<usize>,
    movement_base: Vec<usize>,
    /// For each link, the movements that continue onto each successor link.
    turns: Vec<Vec<(usize, Vec<usize>)>>,
}

fn unit(dx: f64, dy: f64) -> (f64, f64) {
    let n = (dx * dx + dy * dy).sqrt();
    (dx / n, dy / n)
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

/// True when the segments cross at a single interior point.
fn segments_cross(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> bool {
    const EPS: f64 = 1e-9;
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    ((d1 > EPS && d2 < -EPS) || (d1 < -EPS && d2 > EPS)) && ((d3 > EPS && d4 < -EPS) || (d3 < -EPS && d4 > EPS))
}

impl Network {
    /// Builds and validates the network part of a scenario document.
    pub fn from_doc(doc: &ScenarioDoc) -> Result<Self> {
        let mut index = HashMap::new();
        let mut nodes = Vec::with_capacity(doc.nodes.len());
        for (i, n) in doc.nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(invalid(format!("nodes[{i}]"), format!("duplicate node id `{}`", n.id)));
            }
            if !n.x.is_finite() || !n.y.is_finite() {
                return Err(invalid(format!("nodes[{i}]"), "coordinates must be finite"));
            }
            nodes.push(Node {
                id: n.id.clone(),
                x: n.x,
                y: n.y,
                kind: n.kind,
            });
        }

        let mut links = Vec::with_capacity(doc.links.len());
        for (i, l) in doc.links.iter().enumerate() {
            let loc = format!("links[{i}]");
            let from = *index
                .get(&l.from)
                .ok_or_else(|| invalid(&loc, format!("unknown node `{}`", l.from)))?;
            let to = *index
                .get(&l.to)
                .ok_or_else(|| invalid(&loc, format!("unknown node `{}`", l.to)))?;
            if from == to {
                return Err(invalid(&loc, "link starts and ends at the same node"));
            }
            if !(l.length_m > 0.0) || !(l.speed_mps > 0.0) || l.lanes == 0 {
                return Err(invalid(&loc, "length, speed and lane count must be positive"));
            }
            links.push(Link {
                from,
                to,
                length_m: l.length_m,
                speed_mps: l.speed_mps,
                lanes: l.lanes,
            });
        }

        let mut node_intersection = vec![None; nodes.len()];
        let mut intersections = Vec::with_capacity(doc.intersections.len());
        for (k, d) in doc.intersections.iter().enumerate() {
            let loc = format!("intersections[{k}] (`{}`)", d.id);
            let node = *index
                .get(&d.id)
                .ok_or_else(|| invalid(&loc, "id does not name a node"))?;
            if nodes[node].kind == NodeKind::Boundary {
                return Err(invalid(&loc, "boundary nodes carry no signal"));
            }
            if node_intersection[node].replace(k).is_some() {
                return Err(invalid(&loc, "node has two intersection entries"));
            }
            if d.movements.len() > MAX_MOVEMENTS {
                return Err(invalid(&loc, format!("{} movements exceed the cap of {MAX_MOVEMENTS}", d.movements.len())));
            }
            if d.phases.len() > MAX_PHASES {
                return Err(invalid(&loc, format!("{} phases exceed the cap of {MAX_PHASES}", d.phases.len())));
            }
            if d.phases.is_empty() {
                return Err(invalid(&loc, "no phases"));
            }

            let mut movements = Vec::with_capacity(d.movements.len());
            let mut in_lanes: Vec<LaneRef> = Vec::new();
            let mut out_lanes: Vec<LaneRef> = Vec::new();
            for (m, mv) in d.movements.iter().enumerate() {
                let mloc = format!("{loc}.movements[{m}]");
                let lane = |r: [usize; 2], incoming: bool| -> Result<LaneRef> {
                    let link = links
                        .get(r[0])
                        .ok_or_else(|| invalid(&mloc, format!("unknown link {}", r[0])))?;
                    if r[1] >= link.lanes {
                        return Err(invalid(&mloc, format!("link {} has no lane {}", r[0], r[1])));
                    }
                    let end = if incoming { link.to } else { link.from };
                    if end != node {
                        let dir = if incoming { "end" } else { "start" };
                        return Err(invalid(&mloc, format!("link {} does not {dir} at this intersection", r[0])));
                    }
                    Ok(LaneRef { link: r[0], lane: r[1] })
                };
                let in_lane = lane(mv.in_lane, true)?;
                let out_lane = lane(mv.out_lane, false)?;
                let slot = |lanes: &mut Vec<LaneRef>, l: LaneRef| match lanes.iter().position(|x| *x == l) {
                    Some(p) => p,
                    None => {
                        lanes.push(l);
                        lanes.len() - 1
                    }
                };
                let in_slot = slot(&mut in_lanes, in_lane);
                let out_slot = slot(&mut out_lanes, out_lane);
                if movements
                    .iter()
                    .any(|x: &Movement| x.in_lane == in_lane && x.out_lane == out_lane)
                {
                    return Err(invalid(&mloc, "duplicate movement"));
                }
                movements.push(Movement {
                    in_lane,
                    out_lane,
                    in_slot,
                    out_slot,
                });
            }

            let mut covered = vec![false; movements.len()];
            for (p, phase) in d.phases.iter().enumerate() {
                let ploc = format!("{loc}.phases[{p}]");
                if phase.is_empty() {
                    return Err(invalid(&ploc, "phase has no movements"));
                }
                for (a, &ma) in phase.iter().enumerate() {
                    if ma >= movements.len() {
                        return Err(invalid(&ploc, format!("unknown movement {ma}")));
                    }
                    if phase[..a].contains(&ma) {
                        return Err(invalid(&ploc, format!("movement {ma} listed twice")));
                    }
                    covered[ma] = true;
                    for &mb in &phase[..a] {
                        if conflict(&nodes, &links, node, &movements[ma], &movements[mb]) {
                            return Err(invalid(&ploc, format!("movements {mb} and {ma} conflict")));
                        }
                    }
                }
            }
            if let Some(m) = covered.iter().position(|c| !c) {
                return Err(invalid(&loc, format!("movement {m} belongs to no phase")));
            }

            let mut in_links: Vec<usize> = in_lanes.iter().map(|l| l.link).collect();
            in_links.dedup();
            let mut out_links: Vec<usize> = out_lanes.iter().map(|l| l.link).collect();
            out_links.sort_unstable();
            out_links.dedup();
            in_links.sort_unstable();
            in_links.dedup();
            intersections.push(Intersection {
                id: d.id.clone(),
                node,
                kind: nodes[node].kind,
                movements,
                phases: d.phases.clone(),
                in_lanes,
                out_lanes,
                in_links,
                out_links,
            });
        }
        for (i, n) in nodes.iter().enumerate() {
            if n.kind != NodeKind::Boundary && node_intersection[i].is_none() {
                return Err(invalid(format!("nodes[{i}] (`{}`)", n.id), "signalised node has no intersection entry"));
            }
        }

        let mut lane_base = Vec::with_capacity(links.len() + 1);
        lane_base.push(0);
        for l in &links {
            lane_base.push(lane_base.last().unwrap() + l.lanes);
        }
        let mut movement_base = Vec::with_capacity(intersections.len() + 1);
        movement_base.push(0);
        for it in &intersections {
            movement_base.push(movement_base.last().unwrap() + it.movements.len());
        }
        let mut turns: Vec<Vec<(usize, Vec<usize>)>> = vec![Vec::new(); links.len()];
        for (k, it) in intersections.iter().enumerate() {
            for (m, mv) in it.movements.iter().enumerate() {
                let entry = &mut turns[mv.in_lane.link];
                let pos = match entry.iter().position(|(out, _)| *out == mv.out_lane.link) {
                    Some(p) => p,
                    None => {
                        entry.push((mv.out_lane.link, Vec::new()));
                        entry.len() - 1
                    }
                };
                entry[pos].1.push(movement_base[k] + m);
            }
        }
        for t in &mut turns {
            t.sort_by_key(|(out, _)| *out);
            for (_, ms) in t.iter_mut() {
                ms.sort_by_key(|&g| {
                    let (k, m) = locate(&movement_base, g);
                    intersections[k].movements[m].in_lane.lane
                });
            }
        }

        Ok(Self {
            nodes,
            links,
            intersections,
            node_intersection,
            lane_base,
            movement_base,
            turns,
        })
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn intersection_at(&self, node: usize) -> Option<usize> {
        self.node_intersection[node]
    }

    pub fn num_lanes(&self) -> usize {
        *self.lane_base.last().unwrap()
    }

    pub fn lane_index(&self, lane: LaneRef) -> usize {
        self.lane_base[lane.link] + lane.lane
    }

    pub fn num_movements(&self) -> usize {
        *self.movement_base.last().unwrap()
    }

    /// Network-wide index of movement `m` of intersection `k`.
    pub fn movement_index(&self, k: usize, m: usize) -> usize {
        self.movement_base[k] + m
    }

    /// Inverse of [`Network::movement_index`].
    pub fn movement_at(&self, global: usize) -> (usize, usize) {
        locate(&self.movement_base, global)
    }

    pub fn movement(&self, global: usize) -> &Movement {
        let (k, m) = self.movement_at(global);
        &self.intersections[k].movements[m]
    }

    /// Movements carrying traffic from `link` onto `next`, ordered by incoming lane.
    pub fn turn_movements(&self, link: usize, next: usize) -> &[usize] {
        self.turns[link]
            .iter()
            .find(|(out, _)| *out == next)
            .map(|(_, ms)| ms.as_slice())
            .unwrap_or(&[])
    }

    /// Storage capacity of a link in vehicles at 7.5 m per vehicle.
    pub fn link_capacity(&self, link: usize) -> usize {
        let l = &self.links[link];
        ((l.length_m / crate::SLOT_LENGTH_M).floor() as usize).max(1) * l.lanes
    }

    pub fn origins(&self) -> Vec<usize> {
        self.boundary_nodes(|l| l.from)
    }

    pub fn destinations(&self) -> Vec<usize> {
        self.boundary_nodes(|l| l.to)
    }

    fn boundary_nodes(&self, end: impl Fn(&Link) -> usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .links
            .iter()
            .map(end)
            .filter(|&n| self.nodes[n].kind == NodeKind::Boundary)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Fastest free-flow route (as a link sequence) from `origin` to every
    /// reachable node. Ties go to the lower link index.
    pub fn routes_from(&self, origin: usize) -> HashMap<usize, Arc<[usize]>> {
        let n = self.links.len();
        let mut dist = vec![u64::MAX; n];
        let mut prev = vec![usize::MAX; n];
        let mut heap = BinaryHeap::new();
        for (i, l) in self.links.iter().enumerate() {
            if l.from == origin {
                dist[i] = l.free_flow_ticks() as u64;
                heap.push(Reverse((dist[i], i)));
            }
        }
        while let Some(Reverse((d, i))) = heap.pop() {
            if d > dist[i] {
                continue;
            }
            if self.nodes[self.links[i].to].kind == NodeKind::Boundary {
                continue;
            }
            for (next, _) in &self.turns[i] {
                let nd = d + self.links[*next].free_flow_ticks() as u64;
                if nd < dist[*next] {
                    dist[*next] = nd;
                    prev[*next] = i;
                    heap.push(Reverse((nd, *next)));
                }
            }
        }
        let mut best: HashMap<usize, (u64, usize)> = HashMap::new();
        for (i, l) in self.links.iter().enumerate() {
            if dist[i] == u64::MAX {
                continue;
            }
            let e = best.entry(l.to).or_insert((dist[i], i));
            if dist[i] < e.0 {
                *e = (dist[i], i);
            }
        }
        best.into_iter()
            .filter(|(node, _)| *node != origin)
            .map(|(node, (_, last))| {
                let mut route = vec![last];
                while prev[*route.last().unwrap()] != usize::MAX {
                    route.push(prev[*route.last().unwrap()]);
                }
                route.reverse();
                (node, Arc::from(route))
            })
            .collect()
    }

    /// Whether two movements of intersection `k` may not share a phase.
    pub fn conflicts(&self, k: usize, a: usize, b: usize) -> bool {
        let it = &self.intersections[k];
        conflict(&self.nodes, &self.links, it.node, &it.movements[a], &it.movements[b])
    }

    /// Static descriptor of an intersection:
    /// `[is 4-way, is T, mean in length, max in speed, in lanes, movements,
    ///   mean out length, max out speed, out lanes]`,
    /// with lengths in hundreds of metres and speeds in tens of m/s.
    pub fn topology(&self, k: usize) -> [f64; TOPOLOGY_DIM] {
        let it = &self.intersections[k];
        let stats = |links: &[usize]| -> (f64, f64, f64) {
            let n = links.len().max(1) as f64;
            let len = links.iter().map(|&l| self.links[l].length_m).sum::<f64>() / n;
            let speed = links.iter().map(|&l| self.links[l].speed_mps).fold(0.0, f64::max);
            let lanes = links.iter().map(|&l| self.links[l].lanes).sum::<usize>() as f64;
            (len / 100.0, speed / 10.0, lanes)
        };
        let (li, vi, ni) = stats(&it.in_links);
        let (lo, vo, no) = stats(&it.out_links);
        let (four, tee) = match it.kind {
            NodeKind::TJunction => (0.0, 1.0),
            _ => (1.0, 0.0),
        };
        [four, tee, li, vi, ni, it.movements.len() as f64, lo, vo, no]
    }
}

/// Length of [`Network::topology`].
pub const TOPOLOGY_DIM: usize = 9;

fn locate(base: &[usize], global: usize) -> (usize, usize) {
    let k = base.partition_point(|&b| b <= global) - 1;
    (k, global - base[k])
}

/// Entry and exit points of a movement inside the junction box, with lanes
/// offset to the right of the direction of travel.
fn movement_segment(nodes: &[Node], links: &[Link], node: usize, mv: &Movement) -> ((f64, f64), (f64, f64)) {
    let c = &nodes[node];
    let up = &nodes[links[mv.in_lane.link].from];
    let down = &nodes[links[mv.out_lane.link].to];
    let u_in = unit(c.x - up.x, c.y - up.y);
    let u_out = unit(down.x - c.x, down.y - c.y);
    let off_in = (mv.in_lane.lane as f64 + 0.5) * LANE_WIDTH;
    let off_out = (mv.out_lane.lane as f64 + 0.5) * LANE_WIDTH;
    let entry = (
        c.x - u_in.0 * JUNCTION_RADIUS + u_in.1 * off_in,
        c.y - u_in.1 * JUNCTION_RADIUS - u_in.0 * off_in,
    );
    let exit = (
        c.x + u_out.0 * JUNCTION_RADIUS + u_out.1 * off_out,
        c.y + u_out.1 * JUNCTION_RADIUS - u_out.0 * off_out,
    );
    (entry, exit)
}

/// Movements from different approaches conflict when their paths cross or
/// they merge into the same outgoing link.
fn conflict(nodes: &[Node], links: &[Link], node: usize, a: &Movement, b: &Movement) -> bool {
    if a.in_lane.link == b.in_lane.link {
        return false;
    }
    if a.out_lane.link == b.out_lane.link {
        return true;
    }
    let (p1, p2) = movement_segment(nodes, links, node, a);
    let (q1, q2) = movement_segment(nodes, links, node, b);
    segments_cross(p1, p2, q1, q2)
}
