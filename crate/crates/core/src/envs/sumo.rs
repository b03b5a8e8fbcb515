use rand::Rng;

use super::{EnvError, Outcome, StepResult};
use crate::SeededRng;

pub const SUMO_TRAIN_STEPS: usize = 500;
pub const SUMO_EVAL_STEPS: usize = 5000;
/// Terminal reward magnitude: +2000 win, −2000 loss, −2000 draw.
pub const SUMO_REWARD: f64 = 2000.0;
/// A body whose centre leaves `[−1, 1]` loses.
pub const SUMO_LOSE_AT: f64 = 1.0;
/// Hard bounds of the segment.
pub const SUMO_WALL: f64 = 1.2;
pub const SUMO_BODY_RADIUS: f64 = 0.1;
pub(crate) const SUMO_OBS_DIM: usize = 4;
const DAMPING: f64 = 0.9;
const GAIN: f64 = 0.1;
const JITTER: f64 = 0.05;
const START: f64 = 0.5;
const CONTACT_BONUS: f64 = 0.5;

/// World-frame state of the two bodies; body 0 starts on the left.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SumoState {
    pub x: [f64; 2],
    pub v: [f64; 2],
}

impl SumoState {
    /// Reflects the segment and swaps the agents.
    pub fn mirrored(&self) -> Self {
        Self {
            x: [-self.x[1], -self.x[0]],
            v: [-self.v[1], -self.v[0]],
        }
    }
}

/// Two unit masses on a line, each trying to push the other past `|x| = 1`.
///
/// Both observations and actions are egocentric: every agent sees itself on
/// the left (`[x_self, v_self, x_other, v_other]` in its own frame) and a
/// positive action pushes towards the opponent. One set of policy parameters
/// can therefore drive either side.
///
/// Rewards blend a dense shaping term `−|x_self| + 0.5·[in contact]` with the
/// sparse terminal reward: `α·dense + (1 − α)·sparse`.
#[derive(Clone, Debug)]
pub struct SumoLine {
    pub state: SumoState,
    pub step_count: usize,
    pub max_steps: usize,
    pub alpha: f64,
    pub in_contact: bool,
    started: bool,
    done: bool,
}

impl Default for SumoLine {
    fn default() -> Self {
        Self::new(SUMO_TRAIN_STEPS)
    }
}

impl SumoLine {
    pub fn new(max_steps: usize) -> Self {
        Self {
            state: SumoState {
                x: [-START, START],
                v: [0.0; 2],
            },
            step_count: 0,
            max_steps,
            alpha: 0.0,
            in_contact: false,
            started: false,
            done: false,
        }
    }

    pub fn obs_dim(&self) -> usize {
        SUMO_OBS_DIM
    }

    pub fn act_dim(&self) -> usize {
        1
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.alpha = alpha.clamp(0.0, 1.0);
    }

    pub fn set_state(&mut self, state: SumoState) {
        self.state = state;
        self.step_count = 0;
        self.started = true;
        self.done = false;
        self.in_contact = false;
    }

    pub fn reset(&mut self, rng: &mut SeededRng) -> [Vec<f64>; 2] {
        let x0 = -START + rng.random_range(-JITTER..=JITTER);
        let x1 = START + rng.random_range(-JITTER..=JITTER);
        self.set_state(SumoState {
            x: [x0, x1],
            v: [0.0; 2],
        });
        self.observations()
    }

    fn observation(&self, agent: usize) -> Vec<f64> {
        let s = &self.state;
        let (me, other) = (agent, 1 - agent);
        let sign = if agent == 0 { 1.0 } else { -1.0 };
        vec![sign * s.x[me], sign * s.v[me], sign * s.x[other], sign * s.v[other]]
    }

    pub fn observations(&self) -> [Vec<f64>; 2] {
        [self.observation(0), self.observation(1)]
    }

    /// Advances both bodies. `actions[i]` is agent `i`'s egocentric force.
    pub fn step(&mut self, actions: [f64; 2]) -> Result<[StepResult; 2], EnvError> {
        if !self.started {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        if actions.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction(actions.to_vec()));
        }
        let force = [actions[0].clamp(-1.0, 1.0), -actions[1].clamp(-1.0, 1.0)];
        let s = &mut self.state;
        for i in 0..2 {
            s.v[i] = DAMPING * s.v[i] + GAIN * force[i];
            s.x[i] += GAIN * s.v[i];
        }
        let gap = s.x[1] - s.x[0];
        self.in_contact = gap <= 2.0 * SUMO_BODY_RADIUS;
        if self.in_contact {
            // perfectly inelastic: shared velocity, bodies just touching
            let v = (s.v[0] + s.v[1]) / 2.0;
            let mid = (s.x[0] + s.x[1]) / 2.0;
            s.v = [v, v];
            s.x = [mid - SUMO_BODY_RADIUS, mid + SUMO_BODY_RADIUS];
        }
        for i in 0..2 {
            if s.x[i].abs() > SUMO_WALL {
                s.x[i] = s.x[i].clamp(-SUMO_WALL, SUMO_WALL);
                s.v[i] = 0.0;
            }
        }
        self.step_count += 1;

        let out = [s.x[0].abs() > SUMO_LOSE_AT, s.x[1].abs() > SUMO_LOSE_AT];
        let outcomes = match out {
            [true, true] => Some([Outcome::Draw, Outcome::Draw]),
            [true, false] => Some([Outcome::Loss, Outcome::Win]),
            [false, true] => Some([Outcome::Win, Outcome::Loss]),
            [false, false] if self.step_count >= self.max_steps => Some([Outcome::Draw, Outcome::Draw]),
            _ => None,
        };
        self.done = outcomes.is_some();
        let contact = if self.in_contact { CONTACT_BONUS } else { 0.0 };
        let obs = self.observations();
        let x = self.state.x;
        let results = [0, 1].map(|i| {
            let info = outcomes.map_or(Outcome::None, |o| o[i]);
            let sparse = match info {
                Outcome::Win => SUMO_REWARD,
                Outcome::Loss | Outcome::Draw => -SUMO_REWARD,
                Outcome::None => 0.0,
            };
            let dense = -x[i].abs() + contact;
            StepResult {
                obs: obs[i].clone(),
                reward: self.alpha * dense + (1.0 - self.alpha) * sparse,
                done: self.done,
                info,
            }
        });
        Ok(results)
    }
}
