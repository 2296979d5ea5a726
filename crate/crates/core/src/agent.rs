//! Actor and critic towers with independent parameters, and checkpoints.

use std::path::Path;

use cross_autodiff::{Graph, ParamMap, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::gfe::Gfe;
use crate::moe::{Dense, Moe};
use crate::nn::Linear;
use crate::obs::Batch;
use crate::pcc::{Pcc, PccOut};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Actor,
    Critic,
}

#[derive(Clone, Debug)]
enum Mixer {
    Moe(Moe),
    Dense(Dense),
}

/// One full stack: features, optional clustering, expert mixing and a linear head.
#[derive(Clone, Debug)]
pub struct Tower {
    pub role: Role,
    gfe: Gfe,
    pcc: Option<Pcc>,
    mixer: Mixer,
    head: Linear,
    context_width: usize,
}

pub struct TowerOut<'g> {
    /// `[N, d]` recurrent state after this decision.
    pub hidden: Var<'g>,
    pub pcc: Option<PccOut<'g>>,
    /// `[N, N_E]` gate weights when experts are routed.
    pub alpha: Option<Var<'g>>,
    /// Actor: `[ΣP, 1]` log-probabilities. Critic: `[N, 1]` values.
    pub head: Var<'g>,
}

impl Tower {
    pub fn new(store: &mut ParamStore, role: Role, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let gfe = Gfe::new(store, "gfe", cfg.hidden, cfg.heads, rng)?;
        let pcc = if cfg.use_pcc {
            Some(Pcc::new(store, "pcc", cfg.pcc_hidden, cfg.clusters, cfg.tau_k, rng)?)
        } else {
            None
        };
        let mixer = if cfg.use_moe {
            Mixer::Moe(Moe::new(
                store,
                "moe",
                cfg.hidden,
                cfg.pcc_hidden,
                cfg.experts,
                cfg.top_k,
                cfg.tau_r,
                rng,
            )?)
        } else {
            Mixer::Dense(Dense::new(store, "mlp", cfg.hidden, rng)?)
        };
        let head_name = match role {
            Role::Actor => "policy",
            Role::Critic => "value",
        };
        let head = Linear::new(store, head_name, cfg.hidden, 1, true, rng)?;
        Ok(Self {
            role,
            gfe,
            pcc,
            mixer,
            head,
            context_width: cfg.pcc_hidden,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, batch: &Batch, hidden: &Tensor) -> Result<TowerOut<'g>> {
        let n = batch.len();
        if hidden.shape() != [n, self.gfe.width] {
            return Err(CoreError::Input(format!(
                "hidden state has shape {:?}, expected [{n}, {}]",
                hidden.shape(),
                self.gfe.width
            )));
        }
        let feats = self.gfe.forward(g, store, batch, g.constant(hidden.clone()))?;
        let pcc = match &self.pcc {
            Some(p) => Some(p.forward(g, store, g.constant(batch.context.clone()))?),
            None => None,
        };
        let (h_moe, alpha) = match &self.mixer {
            Mixer::Moe(moe) => {
                let context = match &pcc {
                    Some(p) => p.z_hat,
                    None => g.constant(Tensor::zeros(&[n, self.context_width])),
                };
                let out = moe.forward(g, store, feats.h_sp, &batch.phase_seg, context)?;
                (out.h_moe, Some(out.alpha))
            }
            Mixer::Dense(d) => (d.forward(g, store, feats.h_sp)?, None),
        };
        let head = match self.role {
            Role::Actor => self.head.forward(g, store, h_moe)?.segment_log_softmax(&batch.phase_seg)?,
            Role::Critic => self.head.forward(g, store, h_moe.segment_mean(&batch.phase_seg)?)?,
        };
        Ok(TowerOut {
            hidden: feats.hidden,
            pcc,
            alpha,
            head,
        })
    }
}

/// Shared-parameter agent: every intersection uses the same actor and critic.
#[derive(Clone, Debug)]
pub struct Agent {
    pub config: ModelConfig,
    pub actor: Tower,
    pub critic: Tower,
    pub actor_params: ParamStore,
    pub critic_params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    model: ModelConfig,
    params: ParamMap,
}

impl Agent {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut actor_params = ParamStore::new();
        let actor = Tower::new(&mut actor_params, Role::Actor, &config, &mut rng)?;
        let mut critic_params = ParamStore::new();
        let critic = Tower::new(&mut critic_params, Role::Critic, &config, &mut rng)?;
        Ok(Self {
            config,
            actor,
            critic,
            actor_params,
            critic_params,
        })
    }

    pub fn width(&self) -> usize {
        self.config.hidden
    }

    pub fn param_map(&self) -> ParamMap {
        let mut map = ParamMap::default();
        map.insert_store("actor.", &self.actor_params);
        map.insert_store("critic.", &self.critic_params);
        map
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&CheckpointDoc {
            model: self.config.clone(),
            params: self.param_map(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CheckpointDoc =
            serde_json::from_str(text).map_err(|e| CoreError::Checkpoint(format!("malformed checkpoint: {e}")))?;
        let mut agent = Self::new(doc.model, 0)?;
        let expected = agent.actor_params.len() + agent.critic_params.len();
        if doc.params.0.len() != expected {
            return Err(CoreError::Checkpoint(format!(
                "checkpoint holds {} tensors, the model needs {expected}",
                doc.params.0.len()
            )));
        }
        doc.params
            .load_into("actor.", &mut agent.actor_params)
            .map_err(|e| CoreError::Checkpoint(e.to_string()))?;
        doc.params
            .load_into("critic.", &mut agent.critic_params)
            .map_err(|e| CoreError::Checkpoint(e.to_string()))?;
        Ok(agent)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_json(&text)
    }

    /// SHA-256 over both parameter sets.
    pub fn digest(&self) -> String {
        format!("{}:{}", self.actor_params.digest(), self.critic_params.digest())
    }
}

/// Pads per-segment log-probabilities to `[N, 8]` with `−∞` on masked phases.
pub fn padded_log_probs(logp: &Tensor, batch: &Batch) -> Vec<[f64; cross_sim::MAX_PHASES]> {
    (0..batch.len())
        .map(|i| {
            let mut row = [f64::NEG_INFINITY; cross_sim::MAX_PHASES];
            for (p, r) in batch.phase_seg.range(i).enumerate() {
                row[p] = logp.data()[r];
            }
            row
        })
        .collect()
}
