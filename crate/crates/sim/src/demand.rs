//! Poisson vehicle demand.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::network::Network;
use crate::scenario::DemandDoc;
use crate::EPISODE_SECONDS;

/// Vehicles leave `origin` at `rate_vpm` per minute during `[t0, t1)`.
/// Without a destination each vehicle picks one uniformly among the
/// boundary nodes reachable from the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandEntry {
    pub origin: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub destination: Option<String>,
    pub rate_vpm: f64,
    pub t0: f64,
    pub t1: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct ResolvedEntry {
    origin: usize,
    destination: Option<usize>,
    rate_vpm: f64,
    t0: f64,
    t1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemandSchedule {
    entries: Vec<ResolvedEntry>,
    pub seed: u64,
}

/// One generated trip.
#[derive(Clone, Debug, PartialEq)]
pub struct VehicleSpec {
    pub depart: f64,
    pub origin: usize,
    pub destination: usize,
    pub route: Arc<[usize]>,
}

impl DemandSchedule {
    pub fn from_doc(doc: &DemandDoc, network: &Network) -> Result<Self> {
        let mut entries = Vec::with_capacity(doc.entries.len());
        for (i, e) in doc.entries.iter().enumerate() {
            let loc = format!("demand.entries[{i}]");
            let node = |id: &str| -> Result<usize> {
                let n = network
                    .node_index(id)
                    .ok_or_else(|| invalid(&loc, format!("unknown node `{id}`")))?;
                if network.nodes[n].kind != crate::NodeKind::Boundary {
                    return Err(invalid(&loc, format!("`{id}` is not a boundary node")));
                }
                Ok(n)
            };
            let origin = node(&e.origin)?;
            let destination = e.destination.as_deref().map(node).transpose()?;
            if !(e.rate_vpm >= 0.0) || !e.rate_vpm.is_finite() {
                return Err(invalid(&loc, "rate must be a finite non-negative number"));
            }
            if !(0.0 <= e.t0 && e.t0 <= e.t1 && e.t1 <= EPISODE_SECONDS as f64) {
                return Err(invalid(&loc, format!("interval must lie within [0, {EPISODE_SECONDS}]")));
            }
            entries.push(ResolvedEntry {
                origin,
                destination,
                rate_vpm: e.rate_vpm,
                t0: e.t0,
                t1: e.t1,
            });
        }
        Ok(Self {
            entries,
            seed: doc.seed,
        })
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            entries: self.entries.clone(),
            seed,
        }
    }

    /// Expected number of vehicles over the whole schedule.
    pub fn expected_total(&self) -> f64 {
        self.entries.iter().map(|e| e.rate_vpm / 60.0 * (e.t1 - e.t0)).sum()
    }

    /// Draws every trip, sorted by departure time. Equal seeds give equal lists.
    pub fn generate(&self, network: &Network) -> Result<Vec<VehicleSpec>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut routes: HashMap<usize, Vec<(usize, Arc<[usize]>)>> = HashMap::new();
        let mut out = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            let table = routes.entry(e.origin).or_insert_with(|| {
                let mut r: Vec<(usize, Arc<[usize]>)> = network
                    .routes_from(e.origin)
                    .into_iter()
                    .filter(|(n, _)| network.nodes[*n].kind == crate::NodeKind::Boundary)
                    .collect();
                r.sort_by_key(|(n, _)| *n);
                r
            });
            if e.rate_vpm == 0.0 || e.t1 <= e.t0 {
                continue;
            }
            let fixed = match e.destination {
                Some(d) => Some(
                    table
                        .iter()
                        .find(|(n, _)| *n == d)
                        .cloned()
                        .ok_or_else(|| invalid(format!("demand.entries[{i}]"), "destination is unreachable"))?,
                ),
                None if table.is_empty() => {
                    return Err(invalid(format!("demand.entries[{i}]"), "no destination is reachable"));
                }
                None => None,
            };
            let gap = Exp::new(e.rate_vpm / 60.0).expect("positive rate");
            let mut t = e.t0;
            loop {
                t += gap.sample(&mut rng);
                if t >= e.t1 {
                    break;
                }
                let (destination, route) = match &fixed {
                    Some(f) => f.clone(),
                    None => table[rng.gen_range(0..table.len())].clone(),
                };
                out.push(VehicleSpec {
                    depart: t,
                    origin: e.origin,
                    destination,
                    route,
                });
            }
        }
        out.sort_by(|a, b| a.depart.total_cmp(&b.depart));
        Ok(out)
    }
}
