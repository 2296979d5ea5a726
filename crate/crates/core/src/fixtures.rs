//! Synthetic observations and a parameter-space finite-difference oracle,
//! shared by unit tests, integration tests and benches.

use std::sync::{Arc, OnceLock};

use cross_autodiff::{Graph, ParamStore, Var};
use cross_sim::generate::{self, DemandSpec, Profile, RoadClass};
use cross_sim::{Network, NodeKind, Sim, DETECTOR_CAP, MAX_MOVEMENTS, MAX_PHASES};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::obs::{build_observation, Observation, MOVEMENT_FEATURES};

fn quiet() -> DemandSpec {
    DemandSpec {
        total_rate_vpm: 0.0,
        profile: Profile::Flat,
        seed: 0,
    }
}

fn t_network() -> &'static Arc<Network> {
    static NET: OnceLock<Arc<Network>> = OnceLock::new();
    NET.get_or_init(|| {
        let doc = generate::mixed(1, 1, RoadClass::default(), &quiet()).expect("mixed network");
        generate::scenario(&doc).expect("valid scenario").network
    })
}

fn four_network() -> &'static Arc<Network> {
    static NET: OnceLock<Arc<Network>> = OnceLock::new();
    NET.get_or_init(|| {
        let doc = generate::grid(1, 1, RoadClass::default(), &quiet()).expect("grid network");
        generate::scenario(&doc).expect("valid scenario").network
    })
}

/// Random detector contents on a fixed structure, with a random active phase.
fn randomized(net: &Arc<Network>, k: usize, seed: u64) -> Observation {
    let sim = Sim::new(net.clone(), Vec::new());
    let mut o = build_observation(&sim, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, p) = (o.num_movements(), o.num_phases());
    o.active_phase = rng.gen_range(0..p);
    for r in 0..m {
        let row = &mut o.traffic[r * MOVEMENT_FEATURES..(r + 1) * MOVEMENT_FEATURES];
        row[0] = o.phases[o.active_phase * MAX_MOVEMENTS + r];
        for v in &mut row[1..] {
            *v = rng.gen_range(0..=DETECTOR_CAP) as f64;
        }
    }
    o
}

/// A T-junction with 12 movements and 3 phases.
pub fn t_junction_obs(seed: u64) -> Observation {
    let net = t_network();
    let k = (0..net.intersections.len())
        .find(|&k| net.intersections[k].kind == NodeKind::TJunction)
        .expect("T-junction present");
    randomized(net, k, seed)
}

/// A 4-way intersection with 24 movements and 8 phases.
pub fn four_way_obs(seed: u64) -> Observation {
    randomized(four_network(), 0, seed)
}

/// Writes random values into every padded movement row, phase row and phase column.
pub fn scramble_padding<R: Rng>(o: &mut Observation, rng: &mut R) {
    let (m, p) = (o.num_movements(), o.num_phases());
    for v in &mut o.traffic[m * MOVEMENT_FEATURES..] {
        *v = rng.gen_range(-1e3..1e3);
    }
    for r in 0..MAX_PHASES {
        for c in 0..MAX_MOVEMENTS {
            if r >= p || c >= m {
                o.phases[r * MAX_MOVEMENTS + c] = rng.gen_range(-1e3..1e3);
            }
        }
    }
}

/// Pins a closure to the higher-ranked signature `param_relative_error` expects.
pub fn objective<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    f
}

/// Relative error between backpropagated and central-difference gradients
/// of `f` with respect to the parameters in `store`, over at most
/// `max_coords` sampled scalar coordinates.
pub fn param_relative_error<F, R>(store: &mut ParamStore, h: f64, max_coords: usize, rng: &mut R, f: F) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
    R: Rng,
{
    let ids: Vec<_> = store.ids().collect();
    let sizes: Vec<usize> = ids.iter().map(|&id| store.value(id).numel()).collect();
    let total: usize = sizes.iter().sum();
    let analytic: Vec<Vec<f64>> = {
        let g = Graph::new();
        let root = f(&g, store)?;
        let grads = g.backward(root)?;
        ids.iter()
            .zip(&sizes)
            .map(|(&id, &n)| grads.param(id).map_or_else(|| vec![0.0; n], |t| t.data().to_vec()))
            .collect()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        Ok(f(&g, store)?.item())
    };
    let (mut diff_sq, mut ana_sq, mut num_sq) = (0.0, 0.0, 0.0);
    for flat in sample(rng, total, total.min(max_coords)) {
        let (mut t, mut c) = (0, flat);
        while c >= sizes[t] {
            c -= sizes[t];
            t += 1;
        }
        let id = ids[t];
        let orig = store.value(id).data()[c];
        store.value_mut(id).data_mut()[c] = orig + h;
        let up = eval(store)?;
        store.value_mut(id).data_mut()[c] = orig - h;
        let down = eval(store)?;
        store.value_mut(id).data_mut()[c] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[t][c];
        diff_sq += (a - numeric).powi(2);
        ana_sq += a * a;
        num_sq += numeric * numeric;
    }
    Ok(diff_sq.sqrt() / ana_sq.sqrt().max(num_sq.sqrt()).max(1e-8))
}
