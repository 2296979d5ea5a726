//! Episode collection, pooled PPO updates and evaluation.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cross_autodiff::{clip_grad_norm, Adam, Graph, Tensor};
use cross_sim::{MetricReport, Scenario, Sim, EPISODE_SECONDS};
use serde::Serialize;

use crate::agent::Agent;
use crate::config::{ExperimentConfig, TrainConfig};
use crate::controllers::{run_episode, ActionMode, CrossPolicy};
use crate::error::{CoreError, Result};
use crate::moe::usage;
use crate::obs::{build_observation, Batch, Observation};
use crate::parallel::map_ordered;
use crate::ppo::{actor_objective, compute_gae, critic_objective, normalize, LossLog, UpdateBatch};

/// One recorded transition of one agent.
#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: Observation,
    pub hidden_actor: Vec<f64>,
    pub hidden_critic: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    /// Raw environment reward read at the following decision.
    pub reward: f64,
    pub next_value: f64,
    /// Masked state at the following decision.
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Per-agent trajectories of one episode.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub scenario: String,
    pub agents: Vec<Vec<Transition>>,
    pub metrics: MetricReport,
}

impl Rollout {
    /// Mean over agents of the undiscounted raw reward sum.
    pub fn mean_return(&self) -> f64 {
        let n = self.agents.len().max(1) as f64;
        self.agents.iter().map(|a| a.iter().map(|t| t.reward).sum::<f64>()).sum::<f64>() / n
    }

    pub fn len(&self) -> usize {
        self.agents.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Plays one episode with sampled actions, recording everything PPO needs.
pub fn collect_rollout(agent: Arc<Agent>, scenario: &Scenario, demand_seed: u64, action_seed: u64, horizon: u32) -> Result<Rollout> {
    let trips = scenario.demand.with_seed(demand_seed).generate(&scenario.network)?;
    let mut sim = Sim::new(scenario.network.clone(), trips).with_horizon(horizon);
    let n = scenario.network.intersections.len();
    let mut policy = CrossPolicy::new(agent, ActionMode::Sample, action_seed);
    policy.with_values = true;
    policy.reset_recurrent(n);
    let mut agents: Vec<Vec<Transition>> = vec![Vec::new(); n];
    let mut pending: Vec<Option<Transition>> = vec![None; n];
    while !sim.done() {
        let ready: Vec<usize> = (0..n).filter(|&k| sim.ready(k)).collect();
        if !ready.is_empty() {
            let steps = policy.act(&sim, &ready)?;
            for step in steps {
                let k = step.intersection;
                if let Some(mut prev) = pending[k].take() {
                    prev.reward = sim.reward(k);
                    prev.next_value = step.value;
                    prev.next_state = step.obs.masked_state();
                    agents[k].push(prev);
                }
                sim.apply_action(k, step.action)?;
                pending[k] = Some(Transition {
                    obs: step.obs,
                    hidden_actor: step.hidden_actor,
                    hidden_critic: step.hidden_critic,
                    action: step.action,
                    log_prob: step.log_prob,
                    value: step.value,
                    reward: 0.0,
                    next_value: 0.0,
                    next_state: Vec::new(),
                    done: false,
                });
            }
        }
        sim.step();
    }
    for k in 0..n {
        if let Some(mut last) = pending[k].take() {
            last.reward = sim.reward(k);
            last.next_state = build_observation(&sim, k).masked_state();
            last.done = true;
            agents[k].push(last);
        }
    }
    Ok(Rollout {
        scenario: scenario.name.clone(),
        agents,
        metrics: sim.metrics(),
    })
}

/// Pools rollouts into one batch with per-batch normalised advantages.
pub fn build_update(rollouts: &[Rollout], train: &TrainConfig) -> Result<UpdateBatch> {
    let mut obs = Vec::new();
    let (mut next_state, mut ha, mut hc) = (Vec::new(), Vec::new(), Vec::new());
    let (mut action_rows, mut old, mut adv) = (Vec::new(), Vec::new(), Vec::new());
    let (mut rewards, mut next_values, mut dones) = (Vec::new(), Vec::new(), Vec::new());
    let mut phase_offset = 0;
    for ro in rollouts {
        for traj in &ro.agents {
            if traj.is_empty() {
                continue;
            }
            let r: Vec<f64> = traj.iter().map(|t| t.reward * train.reward_scale).collect();
            let v: Vec<f64> = traj.iter().map(|t| t.value).collect();
            let d: Vec<bool> = traj.iter().map(|t| t.done).collect();
            let last = traj.last().expect("non-empty");
            let bootstrap = if last.done { 0.0 } else { last.next_value };
            let (a, _) = compute_gae(&r, &v, bootstrap, &d, train.gamma, train.gae_lambda)?;
            for (i, t) in traj.iter().enumerate() {
                obs.push(&t.obs);
                next_state.extend_from_slice(&t.next_state);
                ha.extend_from_slice(&t.hidden_actor);
                hc.extend_from_slice(&t.hidden_critic);
                action_rows.push(phase_offset + t.action);
                phase_offset += t.obs.num_phases();
                old.push(t.log_prob);
                adv.push(a[i]);
                rewards.push(r[i]);
                next_values.push(t.next_value);
                dones.push(t.done);
            }
        }
    }
    if obs.is_empty() {
        return Err(CoreError::Input("no transitions were collected".into()));
    }
    normalize(&mut adv);
    let n = obs.len();
    let d = ha.len() / n;
    Ok(UpdateBatch {
        batch: Batch::new(&obs)?,
        next_state: Tensor::matrix(n, crate::obs::STATE_DIM, next_state)?,
        hidden_actor: Tensor::matrix(n, d, ha)?,
        hidden_critic: Tensor::matrix(n, d, hc)?,
        action_rows: Arc::new(action_rows),
        old_log_probs: old,
        advantages: adv,
        rewards,
        next_values,
        dones,
    })
}

/// Diagnostics of one optimisation round.
#[derive(Clone, Debug, Default, Serialize)]
pub struct UpdateStats {
    /// Component values averaged over the epochs.
    pub losses: LossLog,
    /// Batch-mean actor cluster assignment at the first epoch.
    pub cluster_usage: Vec<f64>,
    /// Actor expert usage at the first epoch.
    pub expert_usage: Vec<f64>,
}

/// Separate Adam states for the two towers.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub actor: Adam,
    pub critic: Adam,
}

impl Optimizers {
    pub fn new(train: &TrainConfig) -> Self {
        Self {
            actor: Adam::new(train.lr_actor),
            critic: Adam::new(train.lr_critic),
        }
    }
}

/// Runs `epochs` full-batch steps on both towers.
pub fn ppo_update(agent: &mut Agent, opt: &mut Optimizers, data: &UpdateBatch, train: &TrainConfig) -> Result<UpdateStats> {
    let mut stats = UpdateStats::default();
    let mut sum = [0.0; 15];
    let model = agent.config.clone();
    for epoch in 0..train.epochs {
        let mut log = LossLog::default();
        {
            let g = Graph::new();
            let out = agent.actor.forward(&g, &agent.actor_params, &data.batch, &data.hidden_actor)?;
            let loss = actor_objective(&g, &out, data, &model, train, &mut log)?;
            if epoch == 0 {
                if let Some(p) = &out.pcc {
                    let w = p.w.value();
                    stats.cluster_usage = usage(&w);
                }
                if let Some(a) = out.alpha {
                    stats.expert_usage = usage(&a.value());
                }
            }
            if let Some(name) = partial_check(&log, true) {
                return Err(CoreError::NonFinite(name));
            }
            let grads = g.backward(loss)?;
            agent.actor_params.zero_grad();
            agent.actor_params.accumulate(&grads);
            clip_grad_norm(&mut agent.actor_params, train.grad_clip);
            opt.actor.step(&mut agent.actor_params)?;
        }
        {
            let g = Graph::new();
            let out = agent.critic.forward(&g, &agent.critic_params, &data.batch, &data.hidden_critic)?;
            let loss = critic_objective(&g, &out, data, &model, train, &mut log)?;
            if let Some(name) = partial_check(&log, false) {
                return Err(CoreError::NonFinite(name));
            }
            let grads = g.backward(loss)?;
            agent.critic_params.zero_grad();
            agent.critic_params.accumulate(&grads);
            clip_grad_norm(&mut agent.critic_params, train.grad_clip);
            opt.critic.step(&mut agent.critic_params)?;
        }
        for (s, v) in sum.iter_mut().zip(log.values()) {
            *s += v;
        }
    }
    let e = train.epochs as f64;
    let m: Vec<f64> = sum.iter().map(|s| s / e).collect();
    stats.losses = LossLog {
        actor_total: m[0],
        surrogate: m[1],
        entropy: m[2],
        actor_pred: m[3],
        actor_cont: m[4],
        actor_div: m[5],
        actor_lb: m[6],
        actor_se: m[7],
        critic_total: m[8],
        value: m[9],
        critic_pred: m[10],
        critic_cont: m[11],
        critic_div: m[12],
        critic_lb: m[13],
        critic_se: m[14],
    };
    Ok(stats)
}

/// Names the first non-finite component of the actor or critic half,
/// preferring individual terms over the totals they feed.
fn partial_check(log: &LossLog, actor: bool) -> Option<&'static str> {
    let half = |i: usize| (i < 8) == actor;
    let fields: Vec<(usize, &'static str, f64)> = LossLog::FIELDS
        .iter()
        .zip(log.values())
        .enumerate()
        .filter(|(i, _)| half(*i))
        .map(|(i, (n, v))| (i, *n, v))
        .collect();
    let is_total = |i: usize| i == 0 || i == 8;
    fields
        .iter()
        .filter(|(i, _, _)| !is_total(*i))
        .chain(fields.iter().filter(|(i, _, _)| is_total(*i)))
        .find(|(_, _, v)| !v.is_finite())
        .map(|(_, n, _)| *n)
}

/// One logged training iteration.
#[derive(Clone, Debug, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    /// Mean episode return per scenario, in scenario order.
    pub returns: Vec<f64>,
    pub transitions: usize,
    #[serde(flatten)]
    pub stats: UpdateStats,
}

/// Co-trains one agent on several scenarios.
pub struct Trainer {
    pub agent: Agent,
    pub train: TrainConfig,
    pub scenarios: Vec<Scenario>,
    pub horizon: u32,
    opt: Optimizers,
    iteration: usize,
}

impl Trainer {
    pub fn new(agent: Agent, train: TrainConfig, scenarios: Vec<Scenario>) -> Result<Self> {
        train.validate()?;
        if scenarios.is_empty() {
            return Err(CoreError::Config("at least one scenario is required".into()));
        }
        let opt = Optimizers::new(&train);
        Ok(Self {
            agent,
            horizon: train.episode_seconds,
            train,
            scenarios,
            opt,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn seeds(&self, scenario: usize) -> (u64, u64) {
        let base = self.train.seed.wrapping_mul(1_000_003);
        let cell = (self.iteration as u64) * 131 + scenario as u64;
        (base.wrapping_add(cell * 2), base.wrapping_add(cell * 2 + 1))
    }

    /// Collects one episode per scenario, in parallel, with one shared snapshot of the parameters.
    pub fn collect(&self) -> Result<Vec<Rollout>> {
        let snapshot = Arc::new(self.agent.clone());
        let jobs: Vec<(usize, &Scenario)> = self.scenarios.iter().enumerate().collect();
        map_ordered(&jobs, |(i, sc)| {
            let (demand_seed, action_seed) = self.seeds(*i);
            collect_rollout(snapshot.clone(), sc, demand_seed, action_seed, self.horizon)
        })
        .into_iter()
        .collect()
    }

    pub fn step(&mut self) -> Result<IterationLog> {
        let rollouts = self.collect()?;
        let data = build_update(&rollouts, &self.train)?;
        let stats = ppo_update(&mut self.agent, &mut self.opt, &data, &self.train)?;
        let log = IterationLog {
            iteration: self.iteration,
            returns: rollouts.iter().map(Rollout::mean_return).collect(),
            transitions: data.batch.len(),
            stats,
        };
        self.iteration += 1;
        Ok(log)
    }
}

/// Column names of the learning-curve CSV.
pub fn curve_header(scenarios: &[String], clusters: usize, experts: usize) -> Vec<String> {
    let mut h = vec!["iteration".to_owned(), "transitions".to_owned()];
    h.extend(scenarios.iter().map(|s| format!("return_{s}")));
    h.push("mean_return".into());
    h.extend(LossLog::FIELDS.iter().map(|s| s.to_string()));
    h.extend((0..clusters).map(|k| format!("cluster_{k}")));
    h.extend((0..experts).map(|m| format!("expert_{m}")));
    h
}

fn usage_cells(values: &[f64], width: usize) -> Vec<String> {
    (0..width).map(|i| values.get(i).map_or_else(String::new, |v| v.to_string())).collect()
}

pub fn curve_row(log: &IterationLog, clusters: usize, experts: usize) -> Vec<String> {
    let mut r = vec![log.iteration.to_string(), log.transitions.to_string()];
    r.extend(log.returns.iter().map(f64::to_string));
    r.push((log.returns.iter().sum::<f64>() / log.returns.len().max(1) as f64).to_string());
    r.extend(log.stats.losses.values().iter().map(f64::to_string));
    r.extend(usage_cells(&log.stats.cluster_usage, clusters));
    r.extend(usage_cells(&log.stats.expert_usage, experts));
    r
}

/// Files produced by [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub curves: PathBuf,
    pub logs: Vec<IterationLog>,
}

fn write_usage(path: &Path, prefix: &str, width: usize, rows: &[(usize, &[f64])]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iteration".to_owned()];
    header.extend((0..width).map(|i| format!("{prefix}_{i}")));
    w.write_record(&header)?;
    for (it, v) in rows {
        let mut r = vec![it.to_string()];
        r.extend(usage_cells(v, width));
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

/// Trains from a config, writing `checkpoint.json`, `curves.csv`,
/// `cluster_usage.csv` and `expert_usage.csv` into the output directory.
/// `progress` sees every iteration as it completes.
pub fn train(cfg: &ExperimentConfig, mut progress: impl FnMut(&IterationLog)) -> Result<TrainOutput> {
    let scenarios = cfg
        .scenarios
        .iter()
        .map(|p| Scenario::load(p).map_err(CoreError::from))
        .collect::<Result<Vec<_>>>()?;
    let agent = Agent::new(cfg.model.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(agent, cfg.train.clone(), scenarios)?;
    std::fs::create_dir_all(&cfg.output).map_err(|e| CoreError::io(&cfg.output, e))?;
    let names: Vec<String> = trainer.scenarios.iter().map(|s| s.name.clone()).collect();
    let (k, e) = (
        if cfg.model.use_pcc { cfg.model.clusters } else { 0 },
        if cfg.model.use_moe { cfg.model.experts } else { 0 },
    );
    let curves = cfg.output.join("curves.csv");
    let mut writer = csv::Writer::from_path(&curves)?;
    writer.write_record(curve_header(&names, k, e))?;
    let mut logs = Vec::with_capacity(cfg.train.iterations);
    for _ in 0..cfg.train.iterations {
        let log = trainer.step()?;
        writer.write_record(curve_row(&log, k, e))?;
        writer.flush().map_err(|e| CoreError::io(&curves, e))?;
        progress(&log);
        logs.push(log);
    }
    let cluster_rows: Vec<(usize, &[f64])> = logs.iter().map(|l| (l.iteration, &l.stats.cluster_usage[..])).collect();
    write_usage(&cfg.output.join("cluster_usage.csv"), "cluster", k, &cluster_rows)?;
    let expert_rows: Vec<(usize, &[f64])> = logs.iter().map(|l| (l.iteration, &l.stats.expert_usage[..])).collect();
    write_usage(&cfg.output.join("expert_usage.csv"), "expert", e, &expert_rows)?;
    let checkpoint = cfg.output.join("checkpoint.json");
    trainer.agent.save(&checkpoint)?;
    let mut summary = std::fs::File::create(cfg.output.join("config.toml")).map_err(|e| CoreError::io(&cfg.output, e))?;
    let text = toml::to_string(cfg).map_err(|e| CoreError::Config(e.to_string()))?;
    summary.write_all(text.as_bytes()).map_err(|e| CoreError::io(&cfg.output, e))?;
    Ok(TrainOutput {
        checkpoint,
        curves,
        logs,
    })
}

/// Greedy evaluation; episode `e` draws demand with seed `seed + e`.
pub fn evaluate(agent: Arc<Agent>, scenario: &Scenario, episodes: usize, seed: u64) -> Result<Vec<MetricReport>> {
    evaluate_mode(agent, scenario, episodes, seed, ActionMode::Greedy, EPISODE_SECONDS)
        .map(|r| r.into_iter().map(|(m, _)| m).collect())
}

/// Evaluation returning metrics and the mean episode return per episode.
pub fn evaluate_mode(
    agent: Arc<Agent>,
    scenario: &Scenario,
    episodes: usize,
    seed: u64,
    mode: ActionMode,
    horizon: u32,
) -> Result<Vec<(MetricReport, f64)>> {
    let jobs: Vec<u64> = (0..episodes as u64).map(|e| seed.wrapping_add(e)).collect();
    map_ordered(&jobs, |s| {
        let trips = scenario.demand.with_seed(*s).generate(&scenario.network)?;
        let mut policy = CrossPolicy::new(agent.clone(), mode, s.wrapping_mul(7919).wrapping_add(1));
        let report = run_episode(&mut policy, scenario.network.clone(), trips, horizon)?;
        Ok((report.metrics, report.mean_return()))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use cross_sim::generate::{self, DemandSpec, Profile, RoadClass};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            heads: 2,
            pcc_hidden: 8,
            ..ModelConfig::default()
        }
    }

    fn tiny_scenario(rate: f64) -> Scenario {
        let demand = DemandSpec {
            total_rate_vpm: rate,
            profile: Profile::Flat,
            seed: 1,
        };
        generate::scenario(&generate::grid(1, 2, RoadClass::default(), &demand).unwrap()).unwrap()
    }

    fn short(train: TrainConfig, agent: Agent, rate: f64) -> Trainer {
        let mut t = Trainer::new(agent, train, vec![tiny_scenario(rate)]).unwrap();
        t.horizon = 300;
        t
    }

    #[test]
    fn rollout_transitions_chain_and_end_once() {
        let agent = Arc::new(Agent::new(tiny_model(), 1).unwrap());
        let ro = collect_rollout(agent, &tiny_scenario(30.0), 3, 4, 300).unwrap();
        assert_eq!(ro.agents.len(), 2);
        for traj in &ro.agents {
            assert!(traj.len() >= 300 / 13);
            assert!(traj.last().unwrap().done);
            assert!(traj[..traj.len() - 1].iter().all(|t| !t.done));
            for w in traj.windows(2) {
                assert_eq!(w[0].next_value, w[1].value);
                assert_eq!(w[0].next_state, w[1].obs.masked_state());
                assert!(w[0].reward <= 0.0);
            }
            assert!(traj.iter().all(|t| t.log_prob <= 0.0 && t.log_prob.is_finite()));
        }
    }

    #[test]
    fn collection_is_deterministic() {
        let t = short(TrainConfig::default(), Agent::new(tiny_model(), 2).unwrap(), 30.0);
        let (a, b) = (t.collect().unwrap(), t.collect().unwrap());
        let key = |r: &Vec<Rollout>| -> Vec<(usize, u64)> {
            r[0].agents.iter().flatten().map(|s| (s.action, s.log_prob.to_bits())).collect()
        };
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let train = TrainConfig {
            lr_actor: 0.0,
            lr_critic: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        };
        let agent = Agent::new(tiny_model(), 3).unwrap();
        let before = agent.digest();
        let mut t = short(train, agent, 30.0);
        t.step().unwrap();
        assert_eq!(t.agent.digest(), before);
    }

    #[test]
    fn update_changes_router_and_experts_and_logs_everything() {
        let train = TrainConfig {
            epochs: 1,
            lr_actor: 1e-3,
            lr_critic: 1e-3,
            ..TrainConfig::default()
        };
        let agent = Agent::new(tiny_model(), 4).unwrap();
        let before = agent.actor_params.clone();
        let mut t = short(train, agent, 40.0);
        let log = t.step().unwrap();
        let changed = |name: &str| {
            let id = before.find(name).unwrap();
            before.value(id) != t.agent.actor_params.value(id)
        };
        assert!(changed("moe.router1.weight"));
        assert!((0..6).any(|m| changed(&format!("moe.expert{m}.weight"))));
        assert!(changed("pcc.centers"));
        assert_eq!(log.stats.cluster_usage.len(), 6);
        assert_eq!(log.stats.expert_usage.len(), 6);
        assert!((log.stats.expert_usage.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(log.stats.losses.first_non_finite().is_none());
        assert!(log.stats.losses.actor_pred > 0.0 && log.stats.losses.critic_pred > 0.0);
    }

    #[test]
    fn non_finite_loss_names_its_component() {
        let mut agent = Agent::new(tiny_model(), 5).unwrap();
        let id = agent.actor_params.find("pcc.proj.bias").unwrap();
        agent.actor_params.value_mut(id).data_mut()[0] = f64::INFINITY;
        let mut t = short(TrainConfig::default(), agent, 20.0);
        match t.step() {
            Err(CoreError::NonFinite(name)) => assert_eq!(name, "actor_pred"),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn evaluation_is_repeatable() {
        let agent = Arc::new(Agent::new(tiny_model(), 6).unwrap());
        let sc = tiny_scenario(30.0);
        let a = evaluate_mode(agent.clone(), &sc, 2, 9, ActionMode::Greedy, 300).unwrap();
        let b = evaluate_mode(agent, &sc, 2, 9, ActionMode::Greedy, 300).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_iteration_writes_checkpoint_and_curves() {
        let dir = tempfile::tempdir().unwrap();
        let sc_path = dir.path().join("tiny.json");
        tiny_scenario(20.0).doc.save(&sc_path).unwrap();
        let cfg = ExperimentConfig {
            model: tiny_model(),
            train: TrainConfig {
                iterations: 1,
                epochs: 1,
                ..TrainConfig::default()
            },
            scenarios: vec![sc_path],
            output: dir.path().join("run"),
        };
        let out = train(&cfg, |_| {}).unwrap();
        assert!(out.checkpoint.exists());
        let mut rdr = csv::Reader::from_path(&out.curves).unwrap();
        let header = rdr.headers().unwrap().clone();
        for f in LossLog::FIELDS {
            assert!(header.iter().any(|h| h == f), "{f}");
        }
        assert_eq!(rdr.records().count(), 1);
        let back = Agent::load(&out.checkpoint).unwrap();
        assert_eq!(back.config, cfg.model);
        assert!(dir.path().join("run/cluster_usage.csv").exists());
        assert!(dir.path().join("run/expert_usage.csv").exists());
    }
}
