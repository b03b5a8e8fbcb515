//! Deterministic toy continuous-control environments.
//!
//! * `pointgoal-a` / `pointgoal-b`: a damped point mass rewarded for reaching
//!   a goal at `(+0.8, 0)` or `(−0.8, 0)`. The goal is not observed.
//! * `pointdyn-a` / `pointdyn-b`: same goal `(+0.8, 0)`, action gain `+1` or
//!   `−1`. The gain is not observed.
//! * `sumoline`: two bodies pushing each other off a segment.
//!
//! Observations never carry the task variant, so paired variants can only be
//! told apart through the reward signal.

mod point;
mod sumo;

pub use point::{PointEnv, PointTask, POINT_BOUND, POINT_MAX_STEPS};
pub use sumo::{
    SumoLine, SumoState, SUMO_BODY_RADIUS, SUMO_EVAL_STEPS, SUMO_LOSE_AT, SUMO_REWARD,
    SUMO_TRAIN_STEPS, SUMO_WALL,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::SeededRng;

/// Terminal outcome from the point of view of the receiving agent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    #[default]
    None,
    Win,
    Loss,
    Draw,
}

impl Outcome {
    /// 1 for a win, 0.5 for a draw, 0 otherwise.
    pub fn score(self) -> f64 {
        match self {
            Outcome::Win => 1.0,
            Outcome::Draw => 0.5,
            Outcome::Loss | Outcome::None => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: Outcome,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("step called after the episode finished; reset first")]
    StepAfterDone,
    #[error("step called before reset")]
    NotReset,
    #[error("non-finite action {0:?}")]
    NonFiniteAction(Vec<f64>),
    #[error("action has {found} dimensions, expected {expected}")]
    ActionDim { expected: usize, found: usize },
    #[error("unknown environment '{0}'")]
    Unknown(String),
}

/// Single-agent environment.
pub trait Env: Send {
    fn name(&self) -> &str;
    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    fn reset(&mut self, rng: &mut SeededRng) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError>;
}

/// Names accepted by [`make_env`].
pub const SINGLE_AGENT_ENVS: [&str; 4] = ["pointgoal-a", "pointgoal-b", "pointdyn-a", "pointdyn-b"];

pub fn make_env(name: &str) -> Result<Box<dyn Env>, EnvError> {
    let task = match name {
        "pointgoal-a" => PointTask::GoalA,
        "pointgoal-b" => PointTask::GoalB,
        "pointdyn-a" => PointTask::DynA,
        "pointdyn-b" => PointTask::DynB,
        other => return Err(EnvError::Unknown(other.to_string())),
    };
    Ok(Box::new(PointEnv::new(task)))
}

/// Observation width of a named environment (per agent for `sumoline`).
pub fn env_obs_dim(name: &str) -> Result<usize, EnvError> {
    match name {
        "sumoline" => Ok(sumo::SUMO_OBS_DIM),
        _ => make_env(name).map(|e| e.obs_dim()),
    }
}

pub fn env_act_dim(name: &str) -> Result<usize, EnvError> {
    match name {
        "sumoline" => Ok(1),
        _ => make_env(name).map(|e| e.act_dim()),
    }
}

pub(crate) fn check_action(action: &[f64], dim: usize) -> Result<(), EnvError> {
    if action.len() != dim {
        return Err(EnvError::ActionDim {
            expected: dim,
            found: action.len(),
        });
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(EnvError::NonFiniteAction(action.to_vec()));
    }
    Ok(())
}
