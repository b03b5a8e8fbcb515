use rand::SeedableRng;

use super::config::{AgentKind, ExperimentConfig};
use crate::cascade::{pc_update, CascadeState};
use crate::diffnet::{init_network, AdamState, DiffError, NetworkSpec, ParamVector};
use crate::ppo::{update, PpoAgent, UpdateError, UpdateMetrics};
use crate::rollout::RolloutBatch;
use crate::synapse::{ChainError, SynapticAgent};
use crate::SeededRng;

/// Stream ids carved out of the run seed.
pub(crate) const STREAM_MINIBATCH: u64 = 2;
pub(crate) const STREAM_EVAL: u64 = 3;
/// Parallel workers use `STREAM_WORKER + worker index`.
pub(crate) const STREAM_WORKER: u64 = 16;
/// Tournament matches use `STREAM_MATCH + snapshot version`.
pub(crate) const STREAM_MATCH: u64 = 1 << 32;

pub fn seeded_stream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Any of the learners a run can train.
#[derive(Clone, Debug, PartialEq)]
pub enum Agent {
    Ppo(PpoAgent),
    Cascade(CascadeState),
    Synaptic(SynapticAgent),
}

impl Agent {
    /// Fresh agent whose visible network is initialised from the run seed.
    pub fn new(cfg: &ExperimentConfig, spec: &NetworkSpec) -> Result<Self, AgentError> {
        let visible = init_network(spec, cfg.seed)?;
        Ok(match cfg.agent {
            AgentKind::Pc => Agent::Cascade(CascadeState::new(&visible, &cfg.cascade)),
            AgentKind::Synaptic => Agent::Synaptic(SynapticAgent::new(visible, &cfg.ppo, &cfg.synapse)?),
            AgentKind::Clipped | AgentKind::FixedKl | AgentKind::AdaptiveKl => {
                Agent::Ppo(PpoAgent::new(visible, &cfg.ppo))
            }
        })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Agent::Ppo(_) => "ppo",
            Agent::Cascade(_) => "pc",
            Agent::Synaptic(_) => "synaptic",
        }
    }

    /// The action-selecting network.
    pub fn visible(&self) -> &ParamVector {
        match self {
            Agent::Ppo(a) => &a.params,
            Agent::Cascade(c) => c.visible(),
            Agent::Synaptic(s) => &s.ppo.params,
        }
    }

    /// Number of cascade depths reported in metrics (0 for single networks).
    pub fn n_depths(&self) -> usize {
        match self {
            Agent::Cascade(c) => c.len(),
            _ => 0,
        }
    }

    pub fn nets(&self) -> Vec<&ParamVector> {
        match self {
            Agent::Cascade(c) => c.nets.iter().collect(),
            _ => vec![self.visible()],
        }
    }

    pub fn adam_states(&self) -> Vec<&AdamState> {
        match self {
            Agent::Ppo(a) => vec![&a.adam],
            Agent::Cascade(c) => c.adam.iter().collect(),
            Agent::Synaptic(s) => vec![&s.ppo.adam],
        }
    }

    /// One learning update; on failure the agent is left as it was.
    pub fn update(
        &mut self,
        batch: &RolloutBatch,
        cfg: &ExperimentConfig,
        rng: &mut SeededRng,
    ) -> Result<UpdateMetrics, UpdateError> {
        match self {
            Agent::Ppo(a) => update(a, batch, &cfg.ppo_for_agent(), rng),
            Agent::Cascade(c) => pc_update(c, batch, &cfg.cascade, &cfg.ppo, rng),
            Agent::Synaptic(s) => s.update(batch, &cfg.ppo_for_agent(), rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Net(#[from] DiffError),
    #[error(transparent)]
    Chain(#[from] ChainError),
}
