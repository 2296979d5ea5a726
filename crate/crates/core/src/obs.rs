//! Per-intersection observations and their packing into ragged batches.

use std::sync::Arc;

use cross_autodiff::{Segments, Tensor};
use cross_sim::{Network, Sim, DETECTOR_CAP, MAX_MOVEMENTS, MAX_PHASES, TOPOLOGY_DIM};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Features per movement: `[P_in, Q_in, Q_out, N_in, N_out]`.
pub const MOVEMENT_FEATURES: usize = 5;
/// Length of the flattened, padded traffic state.
pub const STATE_DIM: usize = MAX_MOVEMENTS * MOVEMENT_FEATURES;
/// Input width of the clustering encoder: state, active phase row, topology.
pub const CONTEXT_DIM: usize = STATE_DIM + MAX_MOVEMENTS + TOPOLOGY_DIM;

/// One agent's view at a decision point, padded to the network-wide maxima.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Row-major `[36, 5]`.
    pub traffic: Vec<f64>,
    pub movement_mask: Vec<bool>,
    /// Row-major `[8, 36]` phase-movement incidence.
    pub phases: Vec<f64>,
    pub phase_mask: Vec<bool>,
    pub topology: [f64; TOPOLOGY_DIM],
    /// Phase displayed when the observation was taken.
    pub active_phase: usize,
}

impl Observation {
    pub fn num_movements(&self) -> usize {
        self.movement_mask.iter().take_while(|m| **m).count()
    }

    pub fn num_phases(&self) -> usize {
        self.phase_mask.iter().take_while(|m| **m).count()
    }

    pub fn traffic_row(&self, m: usize) -> &[f64] {
        &self.traffic[m * MOVEMENT_FEATURES..(m + 1) * MOVEMENT_FEATURES]
    }

    pub fn phase_row(&self, p: usize) -> &[f64] {
        &self.phases[p * MAX_MOVEMENTS..(p + 1) * MAX_MOVEMENTS]
    }

    /// The 180-wide state with every padded entry written as zero.
    pub fn masked_state(&self) -> Vec<f64> {
        let mut out = vec![0.0; STATE_DIM];
        let n = self.num_movements() * MOVEMENT_FEATURES;
        out[..n].copy_from_slice(&self.traffic[..n]);
        out
    }

    /// 1 on the valid entries of [`Observation::masked_state`].
    pub fn state_mask(&self) -> Vec<f64> {
        let n = self.num_movements() * MOVEMENT_FEATURES;
        (0..STATE_DIM).map(|i| if i < n { 1.0 } else { 0.0 }).collect()
    }

    /// Clustering context `[masked state, active phase row, topology]`.
    pub fn context(&self) -> Vec<f64> {
        let mut out = self.masked_state();
        let m = self.num_movements();
        let mut row = vec![0.0; MAX_MOVEMENTS];
        if self.active_phase < self.num_phases() {
            row[..m].copy_from_slice(&self.phase_row(self.active_phase)[..m]);
        }
        out.extend(row);
        out.extend(self.topology);
        out
    }
}

/// Reads intersection `k` of a running simulation.
pub fn build_observation(sim: &Sim, k: usize) -> Observation {
    let net: &Network = sim.network();
    let it = &net.intersections[k];
    let det = sim.read_detectors(k);
    let active = sim.signal(k).phase;
    let mut traffic = vec![0.0; STATE_DIM];
    let mut movement_mask = vec![false; MAX_MOVEMENTS];
    for (m, mv) in it.movements.iter().enumerate() {
        let inc = det.incoming[mv.in_slot];
        let out = det.outgoing[mv.out_slot];
        let p_in = if it.phases[active].contains(&m) { 1.0 } else { 0.0 };
        let row = [
            p_in,
            det.movements[m].min(DETECTOR_CAP) as f64,
            out.queue.min(DETECTOR_CAP) as f64,
            inc.moving.min(DETECTOR_CAP) as f64,
            out.moving.min(DETECTOR_CAP) as f64,
        ];
        traffic[m * MOVEMENT_FEATURES..(m + 1) * MOVEMENT_FEATURES].copy_from_slice(&row);
        movement_mask[m] = true;
    }
    let mut phases = vec![0.0; MAX_PHASES * MAX_MOVEMENTS];
    let mut phase_mask = vec![false; MAX_PHASES];
    for (p, set) in it.phases.iter().enumerate() {
        for &m in set {
            phases[p * MAX_MOVEMENTS + m] = 1.0;
        }
        phase_mask[p] = true;
    }
    Observation {
        traffic,
        movement_mask,
        phases,
        phase_mask,
        topology: net.topology(k),
        active_phase: active,
    }
}

/// Several observations packed into dense tensors holding only valid rows.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[N, 180]` masked states.
    pub state: Tensor,
    /// `[N, 180]` ones on valid state entries.
    pub state_mask: Tensor,
    /// `[ΣM, 5]` valid movement rows.
    pub movements: Tensor,
    /// `[ΣM, 36]` one-hot movement positions.
    pub positions: Tensor,
    /// `[ΣP, 36]` valid phase rows with padded columns zeroed.
    pub phases: Tensor,
    /// `[N, 225]` clustering context.
    pub context: Tensor,
    pub movement_seg: Arc<Segments>,
    pub phase_seg: Arc<Segments>,
    /// Movement rows of every phase, phase after phase.
    pub member_rows: Arc<Vec<usize>>,
    /// One segment of `member_rows` per phase row.
    pub member_seg: Arc<Segments>,
}

impl Batch {
    pub fn new(obs: &[&Observation]) -> Result<Self> {
        let mut state = Vec::with_capacity(obs.len() * STATE_DIM);
        let mut mask = Vec::with_capacity(obs.len() * STATE_DIM);
        let mut movements = Vec::new();
        let mut positions = Vec::new();
        let mut phases = Vec::new();
        let mut context = Vec::with_capacity(obs.len() * CONTEXT_DIM);
        let (mut m_len, mut p_len) = (Vec::new(), Vec::new());
        let (mut member_rows, mut member_len) = (Vec::new(), Vec::new());
        let mut movement_base = 0;
        for (i, o) in obs.iter().enumerate() {
            let (m, p) = (o.num_movements(), o.num_phases());
            if m == 0 || p == 0 {
                return Err(CoreError::Input(format!(
                    "observation {i} has {m} movements and {p} phases; both must be unmasked"
                )));
            }
            state.extend(o.masked_state());
            mask.extend(o.state_mask());
            for r in 0..m {
                movements.extend_from_slice(o.traffic_row(r));
                positions.extend((0..MAX_MOVEMENTS).map(|c| if c == r { 1.0 } else { 0.0 }));
            }
            for r in 0..p {
                let row = o.phase_row(r);
                let before = member_rows.len();
                member_rows.extend((0..m).filter(|&c| row[c] != 0.0).map(|c| movement_base + c));
                if member_rows.len() == before {
                    return Err(CoreError::Input(format!("observation {i}: phase {r} serves no movement")));
                }
                member_len.push(member_rows.len() - before);
                phases.extend_from_slice(&row[..m]);
                phases.extend(std::iter::repeat(0.0).take(MAX_MOVEMENTS - m));
            }
            context.extend(o.context());
            m_len.push(m);
            p_len.push(p);
            movement_base += m;
        }
        let n = obs.len();
        let rows_m = m_len.iter().sum();
        let rows_p = p_len.iter().sum();
        Ok(Self {
            state: Tensor::matrix(n, STATE_DIM, state)?,
            state_mask: Tensor::matrix(n, STATE_DIM, mask)?,
            movements: Tensor::matrix(rows_m, MOVEMENT_FEATURES, movements)?,
            positions: Tensor::matrix(rows_m, MAX_MOVEMENTS, positions)?,
            phases: Tensor::matrix(rows_p, MAX_MOVEMENTS, phases)?,
            context: Tensor::matrix(n, CONTEXT_DIM, context)?,
            movement_seg: Arc::new(Segments::from_lengths(m_len)),
            phase_seg: Arc::new(Segments::from_lengths(p_len)),
            member_rows: Arc::new(member_rows),
            member_seg: Arc::new(Segments::from_lengths(member_len)),
        })
    }

    pub fn len(&self) -> usize {
        self.phase_seg.count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
