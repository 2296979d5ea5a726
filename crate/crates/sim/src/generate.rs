//! Synthetic scenario generators and the intersection archetype builder.

use serde::{Deserialize, Serialize};

use crate::demand::DemandEntry;
use crate::error::{invalid, Result};
use crate::scenario::{DemandDoc, IntersectionDoc, LinkDoc, MovementDoc, NodeDoc, NodeKind, Scenario, ScenarioDoc};
use crate::EPISODE_SECONDS;

/// Compass order used for approaches and phase listing.
const COMPASS: [(f64, f64); 4] = [(0.0, 1.0), (1.0, 0.0), (0.0, -1.0), (-1.0, 0.0)];
const N: usize = 0;
const E: usize = 1;
const S: usize = 2;
const W: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Turn {
    Left,
    Through,
    Right,
}

fn compass(dx: f64, dy: f64) -> usize {
    (0..4)
        .max_by(|&a, &b| {
            let da = COMPASS[a].0 * dx + COMPASS[a].1 * dy;
            let db = COMPASS[b].0 * dx + COMPASS[b].1 * dy;
            da.total_cmp(&db).then(b.cmp(&a))
        })
        .unwrap()
}

/// Derives movements and phases for a 4-way or T node from the geometry of
/// its links. Approaches are named by the compass side they come from.
///
/// Every incoming lane serves every turn of its approach; lane `i` feeds
/// lane `min(i, lanes - 1)` of the exit.
///
/// 4-way phases: NS through+right, EW through+right, NS left, EW left, then
/// each approach alone in N, E, S, W order. T phases, for through road
/// A→B with the stem S on A's right: {A through, A right, B through},
/// {B through, B left}, {S left, S right}.
pub fn build_intersection(doc: &ScenarioDoc, node: usize) -> Result<IntersectionDoc> {
    let c = &doc.nodes[node];
    let loc = format!("nodes[{node}] (`{}`)", c.id);
    let pos = |id: &str| {
        doc.nodes
            .iter()
            .find(|n| n.id == id)
            .map(|n| (n.x, n.y))
            .ok_or_else(|| invalid(&loc, format!("unknown node `{id}`")))
    };
    let mut approach: [Option<usize>; 4] = [None; 4];
    let mut exit: [Option<usize>; 4] = [None; 4];
    for (i, l) in doc.links.iter().enumerate() {
        let (slot, other) = if l.to == c.id {
            (&mut approach, pos(&l.from)?)
        } else if l.from == c.id {
            (&mut exit, pos(&l.to)?)
        } else {
            continue;
        };
        let dir = compass(other.0 - c.x, other.1 - c.y);
        if slot[dir].replace(i).is_some() {
            return Err(invalid(&loc, "two links share a compass side"));
        }
    }
    let present: Vec<usize> = (0..4).filter(|&d| approach[d].is_some() && exit[d].is_some()).collect();
    let expected = match c.kind {
        NodeKind::FourWay => 4,
        NodeKind::TJunction => 3,
        NodeKind::Boundary => return Err(invalid(&loc, "boundary nodes carry no signal")),
    };
    if present.len() != expected || (0..4).any(|d| approach[d].is_some() != exit[d].is_some()) {
        return Err(invalid(&loc, format!("expected {expected} two-way approaches")));
    }

    let mut movements = Vec::new();
    let mut tags = Vec::new();
    for &a in &present {
        let in_link = approach[a].unwrap();
        for turn in [Turn::Left, Turn::Through, Turn::Right] {
            let target = match turn {
                Turn::Left => (a + 1) % 4,
                Turn::Through => (a + 2) % 4,
                Turn::Right => (a + 3) % 4,
            };
            let Some(out_link) = exit[target] else { continue };
            let out_lanes = doc.links[out_link].lanes;
            for lane in 0..doc.links[in_link].lanes {
                movements.push(MovementDoc {
                    in_lane: [in_link, lane],
                    out_lane: [out_link, lane.min(out_lanes - 1)],
                });
                tags.push((a, turn));
            }
        }
    }
    let select = |groups: &[(usize, Turn)]| -> Vec<usize> {
        (0..tags.len()).filter(|&m| groups.contains(&tags[m])).collect()
    };
    use Turn::*;
    let phases = if c.kind == NodeKind::FourWay {
        let mut p = vec![
            select(&[(N, Through), (N, Right), (S, Through), (S, Right)]),
            select(&[(E, Through), (E, Right), (W, Through), (W, Right)]),
            select(&[(N, Left), (S, Left)]),
            select(&[(E, Left), (W, Left)]),
        ];
        for d in [N, E, S, W] {
            p.push(select(&[(d, Left), (d, Through), (d, Right)]));
        }
        p
    } else {
        let missing = (0..4).find(|d| !present.contains(d)).unwrap();
        let stem = (missing + 2) % 4;
        let a = (missing + 3) % 4;
        let b = (missing + 1) % 4;
        vec![
            select(&[(a, Through), (a, Right), (b, Through)]),
            select(&[(b, Through), (b, Left)]),
            select(&[(stem, Left), (stem, Right)]),
        ]
    };
    Ok(IntersectionDoc {
        id: c.id.clone(),
        movements,
        phases,
    })
}

/// Fills in `intersections` for every signalised node of `doc`.
pub fn build_intersections(doc: &mut ScenarioDoc) -> Result<()> {
    let mut out = Vec::new();
    for (i, n) in doc.nodes.iter().enumerate() {
        if n.kind != NodeKind::Boundary {
            out.push(build_intersection(doc, i)?);
        }
    }
    doc.intersections = out;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Constant rate over the hour.
    #[default]
    Flat,
    /// Quarter-hour multipliers 0.6, 1.2, 1.4, 0.8 (mean 1).
    Peaked,
}

impl Profile {
    fn quarters(self) -> [f64; 4] {
        match self {
            Profile::Flat => [1.0; 4],
            Profile::Peaked => [0.6, 1.2, 1.4, 0.8],
        }
    }
}

/// Network-wide demand: `total_rate_vpm` is the hourly mean, shared among
/// origins in proportion to their weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandSpec {
    pub total_rate_vpm: f64,
    #[serde(default)]
    pub profile: Profile,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadClass {
    pub length_m: f64,
    pub speed_mps: f64,
    pub lanes: usize,
}

impl Default for RoadClass {
    fn default() -> Self {
        Self {
            length_m: 200.0,
            speed_mps: 13.89,
            lanes: 2,
        }
    }
}

struct GridLayout {
    rows: usize,
    cols: usize,
    horizontal: RoadClass,
    vertical: RoadClass,
    drop_north: bool,
    horizontal_weight: f64,
}

fn grid_doc(name: String, g: &GridLayout, demand: &DemandSpec) -> Result<ScenarioDoc> {
    if g.rows == 0 || g.cols == 0 {
        return Err(invalid("generator", "rows and cols must be at least 1"));
    }
    let (dx, dy) = (g.horizontal.length_m, g.vertical.length_m);
    let mut nodes = Vec::new();
    let mut links = Vec::new();
    let id = |r: usize, c: usize| format!("i{r}_{c}");
    for r in 0..g.rows {
        for c in 0..g.cols {
            let tee = g.drop_north && r == 0;
            nodes.push(NodeDoc {
                id: id(r, c),
                x: (c + 1) as f64 * dx,
                y: (g.rows - r) as f64 * dy,
                kind: if tee { NodeKind::TJunction } else { NodeKind::FourWay },
            });
        }
    }
    let mut two_way = |a: &str, b: &str, class: RoadClass| {
        for (from, to) in [(a, b), (b, a)] {
            links.push(LinkDoc {
                from: from.to_owned(),
                to: to.to_owned(),
                length_m: class.length_m,
                speed_mps: class.speed_mps,
                lanes: class.lanes,
            });
        }
    };
    let mut origins: Vec<(String, f64)> = Vec::new();
    let mut stubs: Vec<(String, f64, f64, String, RoadClass, f64)> = Vec::new();
    for c in 0..g.cols {
        let x = (c + 1) as f64 * dx;
        if !g.drop_north {
            stubs.push((format!("n{c}"), x, (g.rows + 1) as f64 * dy, id(0, c), g.vertical, 1.0));
        }
        stubs.push((format!("s{c}"), x, 0.0, id(g.rows - 1, c), g.vertical, 1.0));
    }
    for r in 0..g.rows {
        let y = (g.rows - r) as f64 * dy;
        stubs.push((format!("w{r}"), 0.0, y, id(r, 0), g.horizontal, g.horizontal_weight));
        stubs.push((format!("e{r}"), (g.cols + 1) as f64 * dx, y, id(r, g.cols - 1), g.horizontal, g.horizontal_weight));
    }
    stubs.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, x, y, target, class, weight) in &stubs {
        nodes.push(NodeDoc {
            id: name.clone(),
            x: *x,
            y: *y,
            kind: NodeKind::Boundary,
        });
        two_way(name, target, *class);
        origins.push((name.clone(), *weight));
    }
    for r in 0..g.rows {
        for c in 0..g.cols {
            if c + 1 < g.cols {
                two_way(&id(r, c), &id(r, c + 1), g.horizontal);
            }
            if r + 1 < g.rows {
                two_way(&id(r, c), &id(r + 1, c), g.vertical);
            }
        }
    }

    let total_weight: f64 = origins.iter().map(|o| o.1).sum();
    let quarter = EPISODE_SECONDS as f64 / 4.0;
    let mut entries = Vec::new();
    if demand.total_rate_vpm > 0.0 {
        for (origin, weight) in &origins {
            let base = demand.total_rate_vpm * weight / total_weight;
            match demand.profile {
                Profile::Flat => entries.push(DemandEntry {
                    origin: origin.clone(),
                    destination: None,
                    rate_vpm: base,
                    t0: 0.0,
                    t1: EPISODE_SECONDS as f64,
                }),
                Profile::Peaked => {
                    for (q, m) in demand.profile.quarters().iter().enumerate() {
                        entries.push(DemandEntry {
                            origin: origin.clone(),
                            destination: None,
                            rate_vpm: base * m,
                            t0: q as f64 * quarter,
                            t1: (q + 1) as f64 * quarter,
                        });
                    }
                }
            }
        }
    }
    let mut doc = ScenarioDoc {
        name,
        nodes,
        links,
        intersections: Vec::new(),
        demand: DemandDoc {
            entries,
            seed: demand.seed,
        },
    };
    build_intersections(&mut doc)?;
    Ok(doc)
}

/// `rows × cols` grid of identical 4-way intersections.
pub fn grid(rows: usize, cols: usize, road: RoadClass, demand: &DemandSpec) -> Result<ScenarioDoc> {
    grid_doc(
        format!("grid{rows}x{cols}"),
        &GridLayout {
            rows,
            cols,
            horizontal: road,
            vertical: road,
            drop_north: false,
            horizontal_weight: 1.0,
        },
        demand,
    )
}

/// A single corridor of `n` 4-way intersections: a wide, fast main road
/// crossed by narrow side streets. Main-road origins get three times the
/// side-street demand.
pub fn arterial(n: usize, demand: &DemandSpec) -> Result<ScenarioDoc> {
    grid_doc(
        format!("arterial{n}"),
        &GridLayout {
            rows: 1,
            cols: n,
            horizontal: RoadClass {
                length_m: 300.0,
                speed_mps: 16.67,
                lanes: 3,
            },
            vertical: RoadClass {
                length_m: 150.0,
                speed_mps: 11.11,
                lanes: 1,
            },
            drop_north: false,
            horizontal_weight: 3.0,
        },
        demand,
    )
}

/// A grid whose top row lacks northern approaches, so it is made of
/// T-junctions while the remaining rows stay 4-way.
pub fn mixed(rows: usize, cols: usize, road: RoadClass, demand: &DemandSpec) -> Result<ScenarioDoc> {
    grid_doc(
        format!("mixed{rows}x{cols}"),
        &GridLayout {
            rows,
            cols,
            horizontal: road,
            vertical: road,
            drop_north: true,
            horizontal_weight: 1.0,
        },
        demand,
    )
}

/// Builds and validates a generated document.
pub fn scenario(doc: &ScenarioDoc) -> Result<Scenario> {
    Scenario::from_doc(doc)
}
