//! Advantage estimation and the actor and critic objectives.

use std::sync::Arc;

use cross_autodiff::{Graph, Segments, Tensor, Var};
use serde::Serialize;

use crate::agent::TowerOut;
use crate::config::{ModelConfig, TrainConfig};
use crate::error::{CoreError, Result};
use crate::moe::{loss_lb, loss_se};
use crate::obs::Batch;
use crate::pcc::{loss_cont, loss_div, loss_pcc, loss_pred};

/// Generalised advantage estimation over one agent's trajectory.
/// `bootstrap` is the value after the last step. Returns `(advantages, returns)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(CoreError::Input(format!(
            "gae: {n} rewards, {} values, {} done flags",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Rescales to zero mean and unit standard deviation.
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    xs.iter_mut().for_each(|x| *x = (*x - mean) / std);
}

/// `−mean(min(κA, clip(κ, 1−ε, 1+ε)A))` with `κ = exp(logp − logp_old)`.
pub fn ppo_surrogate<'g>(logp: Var<'g>, old_logp: &[f64], advantages: &[f64], clip: f64) -> Result<Var<'g>> {
    let g = logp.graph();
    let n = old_logp.len();
    let col = |v: &[f64]| g.constant(Tensor::matrix(v.len(), 1, v.to_vec()).expect("column"));
    let ratio = logp.sub(col(old_logp))?.exp();
    let adv = col(advantages);
    let unclipped = ratio.mul(adv)?;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip).mul(adv)?;
    Ok(unclipped.minimum(clipped)?.sum().scale(-1.0 / n.max(1) as f64))
}

/// Per-sample policy entropy `[N, 1]` from `[ΣP, 1]` log-probabilities.
pub fn policy_entropy<'g>(logp: Var<'g>, seg: &Arc<Segments>) -> Result<Var<'g>> {
    Ok(logp.exp().mul(logp)?.segment_sum(seg)?.neg())
}

/// Mean squared one-step TD error; `next_values` are held constant and
/// ignored on terminal steps.
pub fn td_loss<'g>(values: Var<'g>, rewards: &[f64], next_values: &[f64], dones: &[bool], gamma: f64) -> Result<Var<'g>> {
    let g = values.graph();
    let n = rewards.len();
    let targets: Vec<f64> = (0..n)
        .map(|t| rewards[t] + if dones[t] { 0.0 } else { gamma * next_values[t] })
        .collect();
    let err = g.constant(Tensor::matrix(n, 1, targets)?).sub(values)?;
    Ok(err.mul(err)?.sum().scale(1.0 / n.max(1) as f64))
}

/// Everything one PPO update needs, pooled over agents and scenarios.
#[derive(Clone, Debug)]
pub struct UpdateBatch {
    pub batch: Batch,
    /// `[N, 180]` masked state at the following decision.
    pub next_state: Tensor,
    pub hidden_actor: Tensor,
    pub hidden_critic: Tensor,
    /// Row of the chosen phase within the pooled phase rows.
    pub action_rows: Arc<Vec<usize>>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Scaled rewards.
    pub rewards: Vec<f64>,
    pub next_values: Vec<f64>,
    pub dones: Vec<bool>,
}

/// Scalar value of every loss term from one update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossLog {
    pub actor_total: f64,
    pub surrogate: f64,
    pub entropy: f64,
    pub actor_pred: f64,
    pub actor_cont: f64,
    pub actor_div: f64,
    pub actor_lb: f64,
    pub actor_se: f64,
    pub critic_total: f64,
    pub value: f64,
    pub critic_pred: f64,
    pub critic_cont: f64,
    pub critic_div: f64,
    pub critic_lb: f64,
    pub critic_se: f64,
}

impl LossLog {
    pub const FIELDS: [&'static str; 15] = [
        "actor_total",
        "surrogate",
        "entropy",
        "actor_pred",
        "actor_cont",
        "actor_div",
        "actor_lb",
        "actor_se",
        "critic_total",
        "value",
        "critic_pred",
        "critic_cont",
        "critic_div",
        "critic_lb",
        "critic_se",
    ];

    pub fn values(&self) -> [f64; 15] {
        [
            self.actor_total,
            self.surrogate,
            self.entropy,
            self.actor_pred,
            self.actor_cont,
            self.actor_div,
            self.actor_lb,
            self.actor_se,
            self.critic_total,
            self.value,
            self.critic_pred,
            self.critic_cont,
            self.critic_div,
            self.critic_lb,
            self.critic_se,
        ]
    }

    /// The first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::FIELDS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(name, _)| *name)
    }
}

/// Auxiliary terms shared by both objectives, already weighted.
struct Aux {
    pred: f64,
    cont: f64,
    div: f64,
    lb: f64,
    se: f64,
}

fn auxiliary<'g>(
    g: &'g Graph,
    out: &TowerOut<'g>,
    data: &UpdateBatch,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<(Var<'g>, Aux)> {
    let mut total = g.constant(Tensor::scalar(0.0));
    let mut aux = Aux {
        pred: 0.0,
        cont: 0.0,
        div: 0.0,
        lb: 0.0,
        se: 0.0,
    };
    if let Some(p) = &out.pcc {
        let pred = loss_pred(p.s_hat, &data.next_state, &data.batch.state_mask)?;
        let cont = loss_cont(p.sims, p.w, model.tau_c)?;
        let div = loss_div(p.w)?;
        aux.pred = pred.item();
        aux.cont = cont.item();
        aux.div = div.item();
        let pcc = loss_pcc(cont, div, model.lambda_div)?;
        total = total.add(pred.scale(train.lambda_p))?.add(pcc.scale(train.lambda_c))?;
    }
    if let Some(alpha) = out.alpha {
        let lb = loss_lb(alpha)?;
        let se = loss_se(alpha)?;
        aux.lb = lb.item();
        aux.se = se.item();
        total = total.add(crate::moe::loss_moe(lb, se, train.lambda_lb, train.lambda_se)?)?;
    }
    Ok((total, aux))
}

/// `L_a = surrogate − λ_e·mean(H) + λ_p·L_pred + λ_c·L_PCC + L_MoE`.
pub fn actor_objective<'g>(
    g: &'g Graph,
    out: &TowerOut<'g>,
    data: &UpdateBatch,
    model: &ModelConfig,
    train: &TrainConfig,
    log: &mut LossLog,
) -> Result<Var<'g>> {
    let chosen = out.head.gather_rows(&data.action_rows)?;
    let surrogate = ppo_surrogate(chosen, &data.old_log_probs, &data.advantages, train.clip)?;
    let entropy = policy_entropy(out.head, &data.batch.phase_seg)?.mean();
    let (aux_total, aux) = auxiliary(g, out, data, model, train)?;
    let total = surrogate.sub(entropy.scale(train.lambda_e))?.add(aux_total)?;
    log.surrogate = surrogate.item();
    log.entropy = entropy.item();
    log.actor_pred = aux.pred;
    log.actor_cont = aux.cont;
    log.actor_div = aux.div;
    log.actor_lb = aux.lb;
    log.actor_se = aux.se;
    log.actor_total = total.item();
    Ok(total)
}

/// `L_c = λ_v·mean(TD²) + λ_p·L_pred + λ_c·L_PCC + L_MoE`.
pub fn critic_objective<'g>(
    g: &'g Graph,
    out: &TowerOut<'g>,
    data: &UpdateBatch,
    model: &ModelConfig,
    train: &TrainConfig,
    log: &mut LossLog,
) -> Result<Var<'g>> {
    let value = td_loss(out.head, &data.rewards, &data.next_values, &data.dones, train.gamma)?;
    let (aux_total, aux) = auxiliary(g, out, data, model, train)?;
    let total = value.scale(train.lambda_v).add(aux_total)?;
    log.value = value.item();
    log.critic_pred = aux.pred;
    log.critic_cont = aux.cont;
    log.critic_div = aux.div;
    log.critic_lb = aux.lb;
    log.critic_se = aux.se;
    log.critic_total = total.item();
    Ok(total)
}
