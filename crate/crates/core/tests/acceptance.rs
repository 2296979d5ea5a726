//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and fails
//! if any criterion fails. Run with `--nocapture` to see the report.

use std::sync::Arc;
use std::time::{Duration, Instant};

use cross_autodiff::{init, Graph, ParamStore, Segments, Tensor};
use cross_core::agent::padded_log_probs;
use cross_core::controllers::{max_pressure_phase, ActionMode, Controller, FixedTime, MaxPressure};
use cross_core::fixtures::{four_way_obs, objective, param_relative_error, scramble_padding, t_junction_obs};
use cross_core::gfe::Gfe;
use cross_core::harness::{compare, summarize, Method};
use cross_core::moe::{loss_lb, loss_moe, loss_se, Moe};
use cross_core::obs::{Batch, Observation, STATE_DIM};
use cross_core::pcc::{loss_div, loss_pred, Pcc};
use cross_core::ppo::{actor_objective, critic_objective, LossLog, UpdateBatch};
use cross_core::trainer::{build_update, collect_rollout, evaluate_mode, Trainer};
use cross_core::{Agent, ModelConfig, TrainConfig};
use cross_sim::generate::{self, DemandSpec, Profile, RoadClass};
use cross_sim::{Detectors, Intersection, LaneReading, NodeKind, Scenario, Sim, DETECTOR_CAP, EPISODE_SECONDS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(bool, String), Box<dyn std::error::Error>>;

const FD_TOL: f64 = 1e-4;
const FD_SEEDS: u64 = 50;
const EXACT: f64 = 1e-9;
const MASK_TOL: f64 = 1e-12;
const IDENTITY_TOL: f64 = 1e-10;

/// Congested demand: the densest synthetic dataset peaks near 30 veh/min
/// per intersection, so four intersections get 120 veh/min.
const CONGESTED_VPM: f64 = 120.0;
/// Smoke demand used for training: half the congested rate.
const SMOKE_VPM: f64 = 60.0;
const SMOKE_ITERATIONS: usize = 200;
const SMOKE_EPISODE: u32 = 900;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);

fn grid(rate: f64, profile: Profile) -> Scenario {
    let demand = DemandSpec {
        total_rate_vpm: rate,
        profile,
        seed: 0,
    };
    let mut doc = generate::grid(2, 2, RoadClass::default(), &demand).expect("grid");
    doc.name = format!("grid2x2-{rate}");
    generate::scenario(&doc).expect("scenario")
}

fn tiny(use_pcc: bool, use_moe: bool) -> ModelConfig {
    ModelConfig {
        hidden: 8,
        heads: 2,
        pcc_hidden: 8,
        use_pcc,
        use_moe,
        ..ModelConfig::default()
    }
}

fn smoke_model(use_pcc: bool, use_moe: bool) -> ModelConfig {
    ModelConfig {
        hidden: 32,
        pcc_hidden: 16,
        use_pcc,
        use_moe,
        ..ModelConfig::default()
    }
}

fn smoke_train() -> TrainConfig {
    TrainConfig {
        episode_seconds: SMOKE_EPISODE,
        iterations: SMOKE_ITERATIONS,
        seed: 1,
        ..TrainConfig::default()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn random_pair(seed: u64) -> [Observation; 2] {
    [t_junction_obs(seed), four_way_obs(seed + 1)]
}

// ---------------------------------------------------------------- 1

fn c1_gradients() -> Check {
    let start = Instant::now();
    let mut worst: [f64; 4] = [0.0; 4];
    for seed in 0..FD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let obs = random_pair(seed * 2);
        let batch = Batch::new(&[&obs[0], &obs[1]])?;
        let next = Batch::new(&[&obs[1], &obs[0]])?;

        let mut store = ParamStore::new();
        let gfe = Gfe::new(&mut store, "gfe", 8, 2, &mut rng)?;
        let h0 = init::uniform(&mut rng, &[2, 8], 0.5);
        let e = param_relative_error(
            &mut store,
            1e-6,
            40,
            &mut rng,
            objective(|g, s| {
                let out = gfe.forward(g, s, &batch, g.constant(h0.clone()))?;
                Ok(out.h_sp.tanh().sum().add(out.hidden.sum())?)
            }),
        )?;
        worst[0] = worst[0].max(e);

        // The contrastive term stops gradients through w, so it stays out of the numeric check.
        let mut store = ParamStore::new();
        let pcc = Pcc::new(&mut store, "pcc", 8, 4, 0.1, &mut rng)?;
        let e = param_relative_error(
            &mut store,
            1e-6,
            40,
            &mut rng,
            objective(|g, s| {
                let out = pcc.forward(g, s, g.constant(batch.context.clone()))?;
                let pred = loss_pred(out.s_hat, &next.state, &batch.state_mask)?;
                Ok(pred.add(loss_div(out.w)?)?.add(out.sims.tanh().sum())?.add(out.z_hat.sum())?)
            }),
        )?;
        worst[1] = worst[1].max(e);

        let mut store = ParamStore::new();
        let moe = Moe::new(&mut store, "moe", 8, 4, 6, 2, 1.0, &mut rng)?;
        let h = init::uniform(&mut rng, &[batch.phase_seg.total(), 8], 1.0);
        let ctx = init::uniform(&mut rng, &[2, 4], 1.0);
        let e = param_relative_error(
            &mut store,
            1e-6,
            40,
            &mut rng,
            objective(|g, s| {
                let out = moe.forward(g, s, g.constant(h.clone()), &batch.phase_seg, g.constant(ctx.clone()))?;
                let aux = loss_moe(loss_lb(out.alpha)?, loss_se(out.alpha)?, 0.3, 0.2)?;
                Ok(out.h_moe.tanh().sum().add(aux)?)
            }),
        )?;
        worst[2] = worst[2].max(e);

        let mut agent = Agent::new(tiny(true, true), seed)?;
        let hidden = init::uniform(&mut rng, &[2, 8], 0.5);
        let actor = agent.actor.clone();
        let weights = init::uniform(&mut rng, &[batch.phase_seg.total(), 1], 1.0);
        let e_actor = param_relative_error(
            &mut agent.actor_params,
            1e-6,
            30,
            &mut rng,
            objective(|g, s| {
                let out = actor.forward(g, s, &batch, &hidden)?;
                Ok(out.head.mul(g.constant(weights.clone()))?.sum())
            }),
        )?;
        let critic = agent.critic.clone();
        let e_critic = param_relative_error(
            &mut agent.critic_params,
            1e-6,
            30,
            &mut rng,
            objective(|g, s| Ok(critic.forward(g, s, &batch, &hidden)?.head.tanh().sum())),
        )?;
        worst[3] = worst[3].max(e_actor).max(e_critic);
    }
    let elapsed = start.elapsed();
    let pass = worst.iter().all(|e| *e < FD_TOL) && elapsed < Duration::from_secs(120);
    Ok((
        pass,
        format!(
            "{FD_SEEDS} seeds; worst relative error gfe {:.1e}, pcc {:.1e}, moe {:.1e}, heads {:.1e} (< {FD_TOL:.0e}); {:.1?} (< 2 min)",
            worst[0], worst[1], worst[2], worst[3], elapsed
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn c2_loss_invariants() -> Check {
    let g = Graph::new();
    let k = 6;
    let n = 12;
    let uniform_w: Vec<f64> = (0..n).flat_map(|i| (0..k).map(move |j| if j == i % k { 1.0 } else { 0.0 })).collect();
    let div_uniform = loss_div(g.constant(Tensor::matrix(n, k, uniform_w)?))?.item();
    let collapsed: Vec<f64> = (0..n).flat_map(|_| (0..k).map(|j| if j == 0 { 1.0 } else { 0.0 })).collect();
    let div_collapsed = loss_div(g.constant(Tensor::matrix(n, k, collapsed.clone())?))?.item();

    let balanced: Vec<f64> = (0..n)
        .flat_map(|i| (0..k).map(move |j| if j == i % k || j == (i + 1) % k { 0.5 } else { 0.0 }))
        .collect();
    let lb_uniform = loss_lb(g.constant(Tensor::matrix(n, k, balanced)?))?.item();
    let lb_collapsed = loss_lb(g.constant(Tensor::matrix(n, k, collapsed.clone())?))?.item();

    let se_onehot = loss_se(g.constant(Tensor::matrix(n, k, collapsed)?))?.item();
    let half: Vec<f64> = (0..n).flat_map(|_| (0..k).map(|j| if j < 2 { 0.5 } else { 0.0 })).collect();
    let se_half = loss_se(g.constant(Tensor::matrix(n, k, half)?))?.item();

    let checks = [
        (div_uniform, 0.0),
        (div_collapsed, 1.0),
        (lb_uniform, 0.0),
        (lb_collapsed, (6f64).ln()),
        (se_onehot, 0.0),
        (se_half, (2f64).ln()),
    ];
    let pass = checks.iter().all(|(got, want)| (got - want).abs() <= EXACT);
    Ok((
        pass,
        format!(
            "L_div {div_uniform:.2e}/{div_collapsed:.12}, L_lb {lb_uniform:.2e}/{lb_collapsed:.12}, L_se {se_onehot:.2e}/{se_half:.12} (±{EXACT:.0e})"
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn c3_routing() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let moe = Moe::new(&mut store, "moe", 8, 4, 6, 2, 1.0, &mut rng)?;
    let passes = 10_000;
    let mut bad_rows = 0;
    let mut worst_sum: f64 = 0.0;
    let mut grad_checks = 0;
    let mut grad_violations = 0;
    for pass in 0..passes {
        let phases = rng.gen_range(1..=8);
        let seg = Arc::new(Segments::from_lengths([phases]));
        let g = Graph::new();
        let h = g.constant(init::uniform(&mut rng, &[phases, 8], 2.0));
        let ctx = g.constant(init::uniform(&mut rng, &[1, 4], 2.0));
        let out = moe.forward(&g, &store, h, &seg, ctx)?;
        let alpha = out.alpha.value();
        let row = alpha.row(0);
        let nonzero = row.iter().filter(|v| **v != 0.0).count();
        let sum: f64 = row.iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        if nonzero != 2 || (sum - 1.0).abs() > 1e-12 {
            bad_rows += 1;
        }
        if pass % 50 == 0 {
            grad_checks += 1;
            let grads = g.backward(out.h_moe.tanh().sum())?;
            for m in 0..moe.num_experts() {
                let e = moe.expert(m);
                let ids = [Some(e.weight), e.bias];
                let touched = ids
                    .iter()
                    .flatten()
                    .any(|id| grads.param(*id).is_some_and(|t| t.data().iter().any(|v| *v != 0.0)));
                if !out.selected[0].contains(&m) && touched {
                    grad_violations += 1;
                }
            }
        }
    }
    Ok((
        bad_rows == 0 && grad_violations == 0,
        format!(
            "{passes} passes: {bad_rows} rows without exactly 2 experts summing to 1 (worst |Σ−1| {worst_sum:.1e}); \
             {grad_violations} unselected experts with gradient over {grad_checks} backward passes"
        ),
    ))
}

// ---------------------------------------------------------------- 4

fn update_batch(obs: &[&Observation], next: &[&Observation], width: usize) -> Result<UpdateBatch, Box<dyn std::error::Error>> {
    let batch = Batch::new(obs)?;
    let n = obs.len();
    let mut next_state = Vec::with_capacity(n * STATE_DIM);
    for o in next {
        next_state.extend(o.masked_state());
    }
    let mut action_rows = Vec::new();
    let mut offset = 0;
    for (i, o) in obs.iter().enumerate() {
        action_rows.push(offset + i % o.num_phases());
        offset += o.num_phases();
    }
    Ok(UpdateBatch {
        batch,
        next_state: Tensor::matrix(n, STATE_DIM, next_state)?,
        hidden_actor: Tensor::full(&[n, width], 0.1),
        hidden_critic: Tensor::full(&[n, width], -0.1),
        action_rows: Arc::new(action_rows),
        old_log_probs: (0..n).map(|i| -1.0 - 0.1 * i as f64).collect(),
        advantages: (0..n).map(|i| if i % 2 == 0 { 0.7 } else { -1.3 }).collect(),
        rewards: (0..n).map(|i| -0.2 * i as f64).collect(),
        next_values: (0..n).map(|i| 0.3 * i as f64).collect(),
        dones: (0..n).map(|i| i + 1 == n).collect(),
    })
}

struct Evaluated {
    logits: Vec<[f64; 8]>,
    values: Vec<f64>,
    losses: LossLog,
}

fn evaluate_batch(agent: &Agent, data: &UpdateBatch) -> Result<Evaluated, Box<dyn std::error::Error>> {
    let train = TrainConfig::default();
    let g = Graph::new();
    let a = agent.actor.forward(&g, &agent.actor_params, &data.batch, &data.hidden_actor)?;
    let c = agent.critic.forward(&g, &agent.critic_params, &data.batch, &data.hidden_critic)?;
    let mut losses = LossLog::default();
    actor_objective(&g, &a, data, &agent.config, &train, &mut losses)?;
    critic_objective(&g, &c, data, &agent.config, &train, &mut losses)?;
    Ok(Evaluated {
        logits: padded_log_probs(&a.head.value(), &data.batch),
        values: c.head.value().data().to_vec(),
        losses,
    })
}

fn c4_mask_invariance() -> Check {
    let agent = Agent::new(tiny(true, true), 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut worst: f64 = 0.0;
    let mut trials = 0;
    for seed in 0..20 {
        let clean = [t_junction_obs(seed), four_way_obs(seed + 100), t_junction_obs(seed + 200)];
        let mut dirty = clean.clone();
        for o in &mut dirty {
            scramble_padding(o, &mut rng);
        }
        let c = [&clean[0], &clean[1], &clean[2]];
        let d = [&dirty[0], &dirty[1], &dirty[2]];
        let a = evaluate_batch(&agent, &update_batch(&c, &[c[2], c[0], c[1]], 8)?)?;
        let b = evaluate_batch(&agent, &update_batch(&d, &[d[2], d[0], d[1]], 8)?)?;
        for (ra, rb) in a.logits.iter().zip(&b.logits) {
            for (x, y) in ra.iter().zip(rb) {
                if x.is_finite() || y.is_finite() {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        for (x, y) in a.values.iter().zip(&b.values) {
            worst = worst.max((x - y).abs());
        }
        for (x, y) in a.losses.values().iter().zip(b.losses.values()) {
            worst = worst.max((x - y).abs());
        }
        trials += 1;
    }
    Ok((
        worst <= MASK_TOL,
        format!("{trials} T-junction + 4-way batches with scrambled padding; max change in logits, values, losses {worst:.1e} (≤ {MASK_TOL:.0e})"),
    ))
}

// ---------------------------------------------------------------- 5

fn drive_fixed_time(sc: &Scenario, seed: u64) -> Result<(bool, Sim), Box<dyn std::error::Error>> {
    let trips = sc.demand.with_seed(seed).generate(&sc.network)?;
    let mut sim = Sim::new(sc.network.clone(), trips);
    sim.enable_trace();
    let mut ctl = FixedTime::default();
    let n = sc.network.intersections.len();
    let mut conserved = true;
    while !sim.done() {
        let ready: Vec<usize> = (0..n).filter(|&k| sim.ready(k)).collect();
        if !ready.is_empty() {
            for (k, p) in ready.iter().zip(ctl.decide(&sim, &ready)?) {
                sim.apply_action(*k, p)?;
            }
        }
        sim.step();
        conserved &= sim.departed() == sim.arrived() + sim.in_network();
    }
    Ok((conserved, sim))
}

fn c5_conservation() -> Check {
    let sc = grid(CONGESTED_VPM, Profile::Flat);
    let (ok_a, a) = drive_fixed_time(&sc, 5)?;
    let (ok_b, b) = drive_fixed_time(&sc, 5)?;
    let identical = a.metrics() == b.metrics()
        && a.trace() == b.trace()
        && a.departed() == b.departed()
        && a.arrived() == b.arrived()
        && a.clock() == b.clock();
    Ok((
        ok_a && ok_b && identical && a.clock() == EPISODE_SECONDS,
        format!(
            "{} s on grid 2x2: departed {} = arrived {} + in network {} at every tick: {}; repeat run bit-identical: {identical}",
            a.clock(),
            a.departed(),
            a.arrived(),
            a.in_network(),
            ok_a && ok_b
        ),
    ))
}

// ---------------------------------------------------------------- 6

/// Independent oracle: enumerate every phase and keep the first strict maximum.
fn brute_force_pressure(it: &Intersection, det: &Detectors) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (p, served) in it.phases.iter().enumerate() {
        let mut total = 0i64;
        for &m in served {
            let mv = &it.movements[m];
            total += det.movements[m] as i64 - det.outgoing[mv.out_slot].queue as i64;
        }
        if (total as f64) > best.1 {
            best = (p, total as f64);
        }
    }
    best.0
}

fn c6_max_pressure() -> Check {
    let none = DemandSpec {
        total_rate_vpm: 0.0,
        profile: Profile::Flat,
        seed: 0,
    };
    let mixed = generate::scenario(&generate::mixed(2, 2, RoadClass::default(), &none)?)?;
    let arterial = generate::scenario(&generate::arterial(3, &none)?)?;
    let pool: Vec<Intersection> = mixed
        .network
        .intersections
        .iter()
        .chain(arterial.network.intersections.iter())
        .cloned()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let states = 1000;
    let mut agree = 0;
    for _ in 0..states {
        let it = &pool[rng.gen_range(0..pool.len())];
        let sparse = rng.gen_bool(0.5);
        let draw = |rng: &mut ChaCha8Rng| if sparse && rng.gen_bool(0.7) { 0 } else { rng.gen_range(0..=DETECTOR_CAP) };
        let det = Detectors {
            incoming: (0..it.in_lanes.len())
                .map(|_| LaneReading {
                    queue: draw(&mut rng),
                    moving: draw(&mut rng),
                })
                .collect(),
            outgoing: (0..it.out_lanes.len())
                .map(|_| LaneReading {
                    queue: draw(&mut rng),
                    moving: draw(&mut rng),
                })
                .collect(),
            movements: (0..it.movements.len()).map(|_| draw(&mut rng)).collect(),
        };
        if max_pressure_phase(it, &det) == brute_force_pressure(it, &det) {
            agree += 1;
        }
    }

    // The controller itself, on live detector readings from a congested run.
    let sc = grid(CONGESTED_VPM, Profile::Flat);
    let trips = sc.demand.with_seed(6).generate(&sc.network)?;
    let mut sim = Sim::new(sc.network.clone(), trips).with_horizon(1800);
    let mut ctl = MaxPressure;
    let n = sc.network.intersections.len();
    let (mut live, mut live_agree) = (0, 0);
    while !sim.done() {
        let ready: Vec<usize> = (0..n).filter(|&k| sim.ready(k)).collect();
        if !ready.is_empty() {
            let chosen = ctl.decide(&sim, &ready)?;
            for (&k, p) in ready.iter().zip(chosen) {
                live += 1;
                if p == brute_force_pressure(&sc.network.intersections[k], &sim.read_detectors(k)) {
                    live_agree += 1;
                }
                sim.apply_action(k, p)?;
            }
        }
        sim.step();
    }
    Ok((
        agree == states && live_agree == live,
        format!("{agree}/{states} random detector states and {live_agree}/{live} live controller decisions match the brute-force argmax"),
    ))
}

// ---------------------------------------------------------------- 7

fn c7_baselines() -> Check {
    let sc = grid(CONGESTED_VPM, Profile::Flat);
    let seeds = [1, 2, 3, 4, 5];
    let rows = compare(&[Method::FixedTime, Method::MaxPressure], &[sc], &seeds, EPISODE_SECONDS)?;
    let s = summarize(&rows);
    let (ft, mp) = (s[0].mean[0], s[1].mean[0]);
    Ok((
        mp <= ft,
        format!(
            "grid 2x2 at {CONGESTED_VPM} veh/min, {} seeds: mean queue max-pressure {mp:.2} vs fixed-time {ft:.2}",
            seeds.len()
        ),
    ))
}

// ---------------------------------------------------------------- 8-10

struct Trained {
    agent: Arc<Agent>,
    elapsed: Duration,
}

fn train_variant(use_pcc: bool, use_moe: bool) -> Result<Trained, Box<dyn std::error::Error>> {
    let train = smoke_train();
    let agent = Agent::new(smoke_model(use_pcc, use_moe), train.seed)?;
    let start = Instant::now();
    let mut trainer = Trainer::new(agent, train.clone(), vec![grid(SMOKE_VPM, Profile::Flat)])?;
    for _ in 0..train.iterations {
        trainer.step()?;
    }
    Ok(Trained {
        agent: Arc::new(trainer.agent),
        elapsed: start.elapsed(),
    })
}

const EVAL_SEEDS: [u64; 3] = [9001, 9002, 9003];

fn sampled_return(agent: &Arc<Agent>, sc: &Scenario) -> Result<f64, Box<dyn std::error::Error>> {
    let runs = evaluate_mode(agent.clone(), sc, EVAL_SEEDS.len(), EVAL_SEEDS[0], ActionMode::Sample, SMOKE_EPISODE)?;
    Ok(mean(&runs.iter().map(|(_, r)| *r).collect::<Vec<_>>()))
}

/// Greedy full-hour evaluation: mean queue and mean trip duration over the evaluation seeds.
fn greedy_metrics(agent: &Arc<Agent>, sc: &Scenario) -> Result<(f64, f64), Box<dyn std::error::Error>> {
    let runs = evaluate_mode(agent.clone(), sc, EVAL_SEEDS.len(), EVAL_SEEDS[0], ActionMode::Greedy, EPISODE_SECONDS)?;
    let q: Vec<f64> = runs.iter().map(|(m, _)| m.queue_veh).collect();
    let d: Vec<f64> = runs.iter().map(|(m, _)| m.trip_duration_s).collect();
    Ok((mean(&q), mean(&d)))
}

fn random_queue(sc: &Scenario) -> Result<f64, Box<dyn std::error::Error>> {
    let rows = compare(&[Method::Random], std::slice::from_ref(sc), &EVAL_SEEDS, EPISODE_SECONDS)?;
    Ok(mean(&rows.iter().map(|r| r.metrics.queue_veh).collect::<Vec<_>>()))
}

fn c8_training(full: &Trained) -> Check {
    let sc = grid(SMOKE_VPM, Profile::Flat);
    let untrained = Arc::new(Agent::new(smoke_model(true, true), smoke_train().seed)?);
    let before = sampled_return(&untrained, &sc)?;
    let after = sampled_return(&full.agent, &sc)?;
    let gain = (after - before) / before.abs();
    let (queue, _) = greedy_metrics(&full.agent, &sc)?;
    let random = random_queue(&sc)?;
    Ok((
        gain >= 0.30 && queue < random && full.elapsed <= TRAIN_BUDGET,
        format!(
            "{SMOKE_ITERATIONS} iterations in {:.1?}: mean return {before:.1} -> {after:.1} ({:+.1}%, need ≥ +30%); \
             mean queue trained {queue:.2} vs random {random:.2}",
            full.elapsed,
            100.0 * gain
        ),
    ))
}

fn c9_ablations(full: &Trained, no_pcc: &Trained, no_moe: &Trained) -> Check {
    let sc = grid(SMOKE_VPM, Profile::Flat);
    let (_, d_full) = greedy_metrics(&full.agent, &sc)?;
    let (_, d_pcc) = greedy_metrics(&no_pcc.agent, &sc)?;
    let (_, d_moe) = greedy_metrics(&no_moe.agent, &sc)?;
    Ok((
        d_full <= d_pcc && d_full <= d_moe,
        format!(
            "mean trip duration over {} seeds: cross {d_full:.2} s, cross-no-pcc {d_pcc:.2} s, cross-no-moe {d_moe:.2} s",
            EVAL_SEEDS.len()
        ),
    ))
}

fn c10_transfer(full: &Trained) -> Check {
    let demand = DemandSpec {
        total_rate_vpm: SMOKE_VPM,
        profile: Profile::Flat,
        seed: 0,
    };
    let sc = generate::scenario(&generate::mixed(2, 2, RoadClass::default(), &demand)?)?;
    let t_junctions = sc
        .network
        .intersections
        .iter()
        .filter(|it| it.kind == NodeKind::TJunction)
        .count();
    let (queue, _) = greedy_metrics(&full.agent, &sc)?;
    let random = random_queue(&sc)?;
    Ok((
        t_junctions > 0 && queue < random,
        format!(
            "4-way-only checkpoint on a mixed 2x2 network ({t_junctions} T-junctions): mean queue {queue:.2} vs random {random:.2}"
        ),
    ))
}

// ---------------------------------------------------------------- 11

/// Reference PPO written directly over the recorded batch.
struct Reference {
    advantages: Vec<f64>,
    actor: f64,
    critic: f64,
}

fn reference_ppo(
    rollouts: &[cross_core::trainer::Rollout],
    logp: &[Vec<f64>],
    actions: &[usize],
    values: &[f64],
    train: &TrainConfig,
) -> Reference {
    // Advantages: discounted sums of TD errors per agent, then batch normalization.
    let mut adv = Vec::new();
    let mut raw = Vec::new();
    for ro in rollouts {
        for traj in &ro.agents {
            let n = traj.len();
            let r: Vec<f64> = traj.iter().map(|t| t.reward * train.reward_scale).collect();
            for t in 0..n {
                let mut a = 0.0;
                for k in t..n {
                    let next = if traj[k].done {
                        0.0
                    } else if k + 1 < n {
                        traj[k + 1].value
                    } else {
                        traj[k].next_value
                    };
                    let delta = r[k] + train.gamma * next - traj[k].value;
                    a += (train.gamma * train.gae_lambda).powi((k - t) as i32) * delta;
                    if traj[k].done {
                        break;
                    }
                }
                adv.push(a);
                raw.push((r[t], traj[t].next_value, traj[t].done, traj[t].log_prob));
            }
        }
    }
    let mu = mean(&adv);
    // Zero mean, unit standard deviation.
    let sd = (adv.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / adv.len() as f64).sqrt();
    let adv: Vec<f64> = adv.iter().map(|a| (a - mu) / sd).collect();

    let n = adv.len() as f64;
    let mut surrogate = 0.0;
    let mut entropy = 0.0;
    let mut value = 0.0;
    for i in 0..adv.len() {
        let (r, next_v, done, old) = raw[i];
        let ratio = (logp[i][actions[i]] - old).exp();
        let clipped = ratio.clamp(1.0 - train.clip, 1.0 + train.clip);
        surrogate -= (ratio * adv[i]).min(clipped * adv[i]);
        entropy -= logp[i].iter().map(|l| l.exp() * l).sum::<f64>();
        let target = r + if done { 0.0 } else { train.gamma * next_v };
        value += (target - values[i]).powi(2);
    }
    Reference {
        advantages: adv,
        actor: surrogate / n - train.lambda_e * entropy / n,
        critic: train.lambda_v * value / n,
    }
}

fn c11_degradation() -> Check {
    let train = TrainConfig {
        lambda_p: 0.0,
        lambda_c: 0.0,
        lambda_lb: 0.0,
        lambda_se: 0.0,
        ..TrainConfig::default()
    };
    let agent = Arc::new(Agent::new(tiny(false, false), 11)?);
    let sc = grid(SMOKE_VPM, Profile::Flat);
    let rollouts = vec![collect_rollout(agent.clone(), &sc, 11, 12, 400)?];
    let data = build_update(&rollouts, &train)?;

    let g = Graph::new();
    let a = agent.actor.forward(&g, &agent.actor_params, &data.batch, &data.hidden_actor)?;
    let c = agent.critic.forward(&g, &agent.critic_params, &data.batch, &data.hidden_critic)?;
    let mut log = LossLog::default();
    let actor_total = actor_objective(&g, &a, &data, &agent.config, &train, &mut log)?.item();
    let critic_total = critic_objective(&g, &c, &data, &agent.config, &train, &mut log)?.item();

    let head = a.head.value();
    let mut logp = Vec::new();
    let mut actions = Vec::new();
    for i in 0..data.batch.len() {
        let range = data.batch.phase_seg.range(i);
        actions.push(data.action_rows[i] - range.start);
        logp.push(head.data()[range].to_vec());
    }
    let values = c.head.value().data().to_vec();
    let reference = reference_ppo(&rollouts, &logp, &actions, &values, &train);

    let adv_err = reference
        .advantages
        .iter()
        .zip(&data.advantages)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let actor_err = (reference.actor - actor_total).abs();
    let critic_err = (reference.critic - critic_total).abs();
    let aux_zero = [log.actor_pred, log.actor_lb, log.critic_pred, log.critic_lb]
        .iter()
        .all(|v| *v == 0.0);
    Ok((
        adv_err <= IDENTITY_TOL && actor_err <= IDENTITY_TOL && critic_err <= IDENTITY_TOL && aux_zero,
        format!(
            "{} recorded transitions: |ΔA| {adv_err:.1e}, |ΔL_a| {actor_err:.1e}, |ΔL_c| {critic_err:.1e} (≤ {IDENTITY_TOL:.0e})",
            data.batch.len()
        ),
    ))
}

// ---------------------------------------------------------------- driver

fn run(id: u8, title: &str, check: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let (pass, detail) = match check() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "{} criterion {id:>2} {title}: {detail} [{:.1?}]",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed()
    );
    pass
}

#[test]
fn acceptance_criteria() {
    let mut results = vec![
        run(1, "gradient suite", c1_gradients),
        run(2, "loss invariants", c2_loss_invariants),
        run(3, "routing contract", c3_routing),
        run(4, "mask invariance", c4_mask_invariance),
        run(5, "simulator conservation and determinism", c5_conservation),
        run(6, "max-pressure oracle", c6_max_pressure),
        run(7, "baseline trend", c7_baselines),
    ];

    let trained = (|| -> Result<_, Box<dyn std::error::Error>> {
        Ok((train_variant(true, true)?, train_variant(false, true)?, train_variant(true, false)?))
    })();
    match &trained {
        Ok((full, no_pcc, no_moe)) => {
            results.push(run(8, "training smoke", || c8_training(full)));
            results.push(run(9, "ablation trend", || c9_ablations(full, no_pcc, no_moe)));
            results.push(run(10, "zero-shot structural transfer", || c10_transfer(full)));
        }
        Err(e) => {
            for (id, title) in [(8, "training smoke"), (9, "ablation trend"), (10, "zero-shot structural transfer")] {
                results.push(run(id, title, || Ok((false, format!("training failed: {e}")))));
            }
        }
    }
    results.push(run(11, "degradation identity", c11_degradation));

    let passed = results.iter().filter(|p| **p).count();
    println!("{passed}/{} criteria passed", results.len());
    assert_eq!(passed, results.len(), "some acceptance criteria failed");
}
