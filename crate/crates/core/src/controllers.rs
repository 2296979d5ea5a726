//! Signal controllers and the loop that runs one against a simulation.

use std::sync::Arc;

use cross_autodiff::{Graph, Tensor};
use cross_sim::{Detectors, Intersection, MetricReport, Network, Sim, VehicleSpec, GREEN_SECONDS, YELLOW_SECONDS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{Agent, TowerOut};
use crate::error::Result;
use crate::obs::{build_observation, Batch, Observation};

/// Chooses the next phase of every intersection that has finished its green.
pub trait Controller: Send {
    fn name(&self) -> &str;

    /// Called once before the first tick of an episode.
    fn reset(&mut self, _sim: &Sim) {}

    /// One phase per entry of `ready`, in the same order.
    fn decide(&mut self, sim: &Sim, ready: &[usize]) -> Result<Vec<usize>>;
}

/// Round-robin plan. Each phase owns a window of `3 + 10·split` seconds.
#[derive(Clone, Debug, Default)]
pub struct FixedTime {
    /// Green intervals per phase, per intersection; empty means one each.
    pub splits: Vec<Vec<u32>>,
}

impl FixedTime {
    /// Phase displayed once the yellow that would start at `clock` ends.
    pub fn phase_at(splits: &[u32], clock: u32) -> usize {
        if splits.len() <= 1 {
            return 0;
        }
        let windows: Vec<u32> = splits.iter().map(|s| YELLOW_SECONDS + GREEN_SECONDS * s.max(&1)).collect();
        let cycle: u32 = windows.iter().sum();
        let mut t = (clock + YELLOW_SECONDS) % cycle;
        for (p, w) in windows.iter().enumerate() {
            if t < *w {
                return p;
            }
            t -= w;
        }
        0
    }

    fn plan(&self, it: &Intersection, k: usize) -> Vec<u32> {
        match self.splits.get(k) {
            Some(s) if s.len() == it.phases.len() => s.clone(),
            _ => vec![1; it.phases.len()],
        }
    }
}

impl Controller for FixedTime {
    fn name(&self) -> &str {
        "fixed-time"
    }

    fn decide(&mut self, sim: &Sim, ready: &[usize]) -> Result<Vec<usize>> {
        let net = sim.network();
        Ok(ready
            .iter()
            .map(|&k| Self::phase_at(&self.plan(&net.intersections[k], k), sim.clock()))
            .collect())
    }
}

/// `Σ_{m∈M^p} (Q_in(m) − Q_out(m))` for every phase, with `Q_in(m)` the
/// stopped vehicles of movement `m` within detector range.
pub fn phase_pressures(it: &Intersection, det: &Detectors) -> Vec<f64> {
    it.phases
        .iter()
        .map(|set| {
            set.iter()
                .map(|&m| {
                    let mv = &it.movements[m];
                    det.movements[m] as f64 - det.outgoing[mv.out_slot].queue as f64
                })
                .sum()
        })
        .collect()
}

/// Highest-pressure phase, lowest index on ties.
pub fn max_pressure_phase(it: &Intersection, det: &Detectors) -> usize {
    let p = phase_pressures(it, det);
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Default)]
pub struct MaxPressure;

impl Controller for MaxPressure {
    fn name(&self) -> &str {
        "max-pressure"
    }

    fn decide(&mut self, sim: &Sim, ready: &[usize]) -> Result<Vec<usize>> {
        let net = sim.network();
        Ok(ready
            .iter()
            .map(|&k| max_pressure_phase(&net.intersections[k], &sim.read_detectors(k)))
            .collect())
    }
}

/// Uniformly random phases from a seeded stream.
#[derive(Clone, Debug)]
pub struct RandomController {
    rng: ChaCha8Rng,
}

impl RandomController {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Controller for RandomController {
    fn name(&self) -> &str {
        "random"
    }

    fn decide(&mut self, sim: &Sim, ready: &[usize]) -> Result<Vec<usize>> {
        let net = sim.network();
        Ok(ready
            .iter()
            .map(|&k| self.rng.gen_range(0..net.intersections[k].phases.len()))
            .collect())
    }
}

/// How the learned policy turns probabilities into actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    Greedy,
    Sample,
}

/// One decision of the learned policy for one intersection.
#[derive(Clone, Debug)]
pub struct PolicyStep {
    pub intersection: usize,
    pub obs: Observation,
    pub hidden_actor: Vec<f64>,
    pub hidden_critic: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
}

/// Runs the shared actor (and optionally critic) for all ready agents at once,
/// carrying each agent's recurrent state between decisions.
pub struct CrossPolicy {
    pub agent: Arc<Agent>,
    pub mode: ActionMode,
    pub with_values: bool,
    rng: ChaCha8Rng,
    hidden_actor: Vec<Vec<f64>>,
    hidden_critic: Vec<Vec<f64>>,
    label: String,
}

impl CrossPolicy {
    pub fn new(agent: Arc<Agent>, mode: ActionMode, seed: u64) -> Self {
        let label = match (agent.config.use_pcc, agent.config.use_moe) {
            (true, true) => "cross",
            (false, true) => "cross-no-pcc",
            (true, false) => "cross-no-moe",
            (false, false) => "cross-no-pcc-no-moe",
        }
        .to_owned();
        Self {
            agent,
            mode,
            with_values: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            hidden_actor: Vec::new(),
            hidden_critic: Vec::new(),
            label,
        }
    }

    /// Zeroes every recurrent state.
    pub fn reset_recurrent(&mut self, agents: usize) {
        let d = self.agent.width();
        self.hidden_actor = vec![vec![0.0; d]; agents];
        self.hidden_critic = vec![vec![0.0; d]; agents];
    }

    pub fn hidden(&self, k: usize) -> &[f64] {
        &self.hidden_actor[k]
    }

    fn stack(rows: &[&Vec<f64>], d: usize) -> Result<Tensor> {
        Ok(Tensor::matrix(rows.len(), d, rows.iter().flat_map(|r| r.iter().copied()).collect())?)
    }

    /// Chooses phases for `ready` and returns the full decision records.
    pub fn act(&mut self, sim: &Sim, ready: &[usize]) -> Result<Vec<PolicyStep>> {
        if self.hidden_actor.len() != sim.network().intersections.len() {
            self.reset_recurrent(sim.network().intersections.len());
        }
        let obs: Vec<Observation> = ready.iter().map(|&k| build_observation(sim, k)).collect();
        let refs: Vec<&Observation> = obs.iter().collect();
        let batch = Batch::new(&refs)?;
        let d = self.agent.width();
        let ha = Self::stack(&ready.iter().map(|&k| &self.hidden_actor[k]).collect::<Vec<_>>(), d)?;
        let hc = Self::stack(&ready.iter().map(|&k| &self.hidden_critic[k]).collect::<Vec<_>>(), d)?;

        let g = Graph::new();
        let actor: TowerOut<'_> = self.agent.actor.forward(&g, &self.agent.actor_params, &batch, &ha)?;
        let logp = actor.head.value();
        let new_ha = actor.hidden.value();
        let (values, new_hc) = if self.with_values {
            let critic = self.agent.critic.forward(&g, &self.agent.critic_params, &batch, &hc)?;
            (Some(critic.head.value()), Some(critic.hidden.value()))
        } else {
            (None, None)
        };

        let mut steps = Vec::with_capacity(ready.len());
        for (i, (&k, o)) in ready.iter().zip(obs).enumerate() {
            let rows = batch.phase_seg.range(i);
            let lp = &logp.data()[rows];
            let action = match self.mode {
                ActionMode::Greedy => {
                    let mut best = 0;
                    for (p, v) in lp.iter().enumerate() {
                        if *v > lp[best] {
                            best = p;
                        }
                    }
                    best
                }
                ActionMode::Sample => {
                    let u: f64 = self.rng.gen();
                    let mut acc = 0.0;
                    let mut pick = lp.len() - 1;
                    for (p, v) in lp.iter().enumerate() {
                        acc += v.exp();
                        if u < acc {
                            pick = p;
                            break;
                        }
                    }
                    pick
                }
            };
            let step = PolicyStep {
                intersection: k,
                obs: o,
                hidden_actor: std::mem::replace(&mut self.hidden_actor[k], new_ha.row(i).to_vec()),
                hidden_critic: match &new_hc {
                    Some(h) => std::mem::replace(&mut self.hidden_critic[k], h.row(i).to_vec()),
                    None => self.hidden_critic[k].clone(),
                },
                action,
                log_prob: lp[action],
                value: values.as_ref().map_or(0.0, |v| v.data()[i]),
            };
            steps.push(step);
        }
        Ok(steps)
    }
}

impl Controller for CrossPolicy {
    fn name(&self) -> &str {
        &self.label
    }

    fn reset(&mut self, sim: &Sim) {
        self.reset_recurrent(sim.network().intersections.len());
    }

    fn decide(&mut self, sim: &Sim, ready: &[usize]) -> Result<Vec<usize>> {
        Ok(self.act(sim, ready)?.into_iter().map(|s| s.action).collect())
    }
}

/// Outcome of one controlled episode.
#[derive(Clone, Debug)]
pub struct EpisodeReport {
    pub metrics: MetricReport,
    /// Undiscounted reward sum per intersection, rewards read at each
    /// following decision and at the end of the episode.
    pub returns: Vec<f64>,
}

impl EpisodeReport {
    pub fn mean_return(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len().max(1) as f64
    }
}

/// Runs `controller` until the horizon.
pub fn run_episode(
    controller: &mut dyn Controller,
    net: Arc<Network>,
    trips: Vec<VehicleSpec>,
    horizon: u32,
) -> Result<EpisodeReport> {
    let mut sim = Sim::new(net, trips).with_horizon(horizon);
    let n = sim.network().intersections.len();
    controller.reset(&sim);
    let mut returns = vec![0.0; n];
    let mut started = vec![false; n];
    while !sim.done() {
        let ready: Vec<usize> = (0..n).filter(|&k| sim.ready(k)).collect();
        if !ready.is_empty() {
            for &k in &ready {
                if started[k] {
                    returns[k] += sim.reward(k);
                }
                started[k] = true;
            }
            let phases = controller.decide(&sim, &ready)?;
            for (&k, p) in ready.iter().zip(phases) {
                sim.apply_action(k, p)?;
            }
        }
        sim.step();
    }
    for k in 0..n {
        if started[k] {
            returns[k] += sim.reward(k);
        }
    }
    Ok(EpisodeReport {
        metrics: sim.metrics(),
        returns,
    })
}
