//! Policy consolidation for continual reinforcement learning.

pub mod cascade;
pub mod diffnet;
pub mod envs;
pub mod harness;
pub mod ppo;
pub mod rollout;
pub mod synapse;

pub type SeededRng = rand_chacha::ChaCha8Rng;
