//! Learned traffic-signal control: observation encoding, the actor-critic
//! stack, PPO training, baseline controllers and the comparison harness.

pub mod agent;
pub mod config;
pub mod controllers;
pub mod error;
pub mod fixtures;
pub mod gfe;
pub mod harness;
pub mod moe;
pub mod nn;
pub mod obs;
pub mod parallel;
pub mod pcc;
pub mod ppo;
pub mod trainer;

pub use agent::{Agent, Role, Tower, TowerOut};
pub use config::{ExperimentConfig, ModelConfig, TrainConfig};
pub use controllers::{run_episode, ActionMode, Controller, CrossPolicy, EpisodeReport, FixedTime, MaxPressure, RandomController};
pub use error::{CoreError, Result};
pub use harness::{compare, CompareRow, Method, Summary};
pub use obs::{build_observation, Batch, Observation};
pub use trainer::{evaluate, train, Trainer, TrainOutput};
