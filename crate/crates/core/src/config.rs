use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Architecture hyperparameters shared by the actor and critic towers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub pcc_hidden: usize,
    pub clusters: usize,
    pub tau_k: f64,
    pub tau_c: f64,
    pub lambda_div: f64,
    pub experts: usize,
    pub top_k: usize,
    pub tau_r: f64,
    /// Predictive contrastive clustering; when off the router sees a zero context.
    pub use_pcc: bool,
    /// Expert pool; when off a single MLP of the same width replaces it.
    pub use_moe: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            heads: 4,
            pcc_hidden: 64,
            clusters: 6,
            tau_k: 0.1,
            tau_c: 0.1,
            lambda_div: 0.1,
            experts: 6,
            top_k: 2,
            tau_r: 1.0,
            use_pcc: true,
            use_moe: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::Config(msg));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("{} heads must divide hidden width {}", self.heads, self.hidden));
        }
        if self.pcc_hidden == 0 || self.clusters == 0 {
            return bad("clustering width and cluster count must be positive".into());
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return bad(format!("top_k {} must lie in 1..={}", self.top_k, self.experts));
        }
        if !(self.tau_k > 0.0 && self.tau_c > 0.0 && self.tau_r > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(self.lambda_div >= 0.0) {
            return bad("lambda_div must be non-negative".into());
        }
        Ok(())
    }
}

/// Optimisation hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub grad_clip: f64,
    pub lambda_v: f64,
    pub lambda_e: f64,
    pub lambda_p: f64,
    pub lambda_c: f64,
    pub lambda_lb: f64,
    pub lambda_se: f64,
    /// Multiplier applied to environment rewards before learning; keeps
    /// value targets near unit scale.
    pub reward_scale: f64,
    /// Simulated seconds per training episode.
    pub episode_seconds: u32,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            gae_lambda: 0.98,
            clip: 0.2,
            epochs: 6,
            lr_actor: 1e-4,
            lr_critic: 2e-4,
            grad_clip: 10.0,
            lambda_v: 0.5,
            lambda_e: 0.01,
            lambda_p: 0.05,
            lambda_c: 0.1,
            lambda_lb: 0.001,
            lambda_se: 0.0001,
            reward_scale: 0.05,
            episode_seconds: cross_sim::EPISODE_SECONDS,
            iterations: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(CoreError::Config(msg.into()));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0) || self.epochs == 0 || !(self.grad_clip > 0.0) {
            return bad("clip, epochs and grad_clip must be positive");
        }
        if !(self.lr_actor >= 0.0 && self.lr_critic >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        let lambdas = [
            self.lambda_v,
            self.lambda_e,
            self.lambda_p,
            self.lambda_c,
            self.lambda_lb,
            self.lambda_se,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return bad("loss coefficients must be non-negative");
        }
        if self.episode_seconds == 0 {
            return bad("episode_seconds must be positive");
        }
        if !(self.reward_scale > 0.0) {
            return bad("reward_scale must be positive");
        }
        Ok(())
    }
}

/// Top-level document read by `cross train`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Scenario files co-trained in every iteration.
    pub scenarios: Vec<PathBuf>,
    /// Directory receiving the checkpoint and CSV logs.
    pub output: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative scenario and output paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut cfg.scenarios {
            if s.is_relative() {
                *s = base.join(&*s);
            }
        }
        if cfg.output.as_os_str().is_empty() {
            cfg.output = PathBuf::from("runs");
        }
        if cfg.output.is_relative() {
            cfg.output = base.join(&cfg.output);
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_reference_hyperparameters() {
        let t = TrainConfig::default();
        assert_eq!((t.gamma, t.gae_lambda, t.clip, t.epochs), (0.95, 0.98, 0.2, 6));
        assert_eq!((t.lr_actor, t.lr_critic, t.grad_clip), (1e-4, 2e-4, 10.0));
        assert_eq!(
            (t.lambda_v, t.lambda_e, t.lambda_p, t.lambda_c, t.lambda_lb, t.lambda_se),
            (0.5, 0.01, 0.05, 0.1, 0.001, 0.0001)
        );
        let m = ModelConfig::default();
        assert_eq!((m.hidden, m.pcc_hidden, m.clusters, m.experts, m.top_k), (128, 64, 6, 6, 2));
        assert_eq!((m.tau_k, m.tau_c, m.tau_r, m.heads), (0.1, 0.1, 1.0, 4));
    }

    #[test]
    fn toml_overrides_and_validation() {
        let cfg = ExperimentConfig::from_toml(
            "scenarios = [\"a.json\"]\n[model]\nhidden = 32\nuse_moe = false\n[train]\nlambda_lb = 0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.model.hidden, 32);
        assert!(!cfg.model.use_moe);
        assert_eq!(cfg.train.lambda_lb, 0.5);
        assert_eq!(cfg.train.gamma, 0.95);
        assert!(ExperimentConfig::from_toml("[model]\ntop_k = 9\n").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nclip = -1.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nunknown = [").is_err());
    }
}
