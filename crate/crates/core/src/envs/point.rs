use rand::Rng;

use super::{check_action, Env, EnvError, Outcome, StepResult};
use crate::SeededRng;

pub const POINT_MAX_STEPS: usize = 200;
/// Positions are clipped to `[−1.5, 1.5]²`; with unit-bounded actions the
/// per-step reward stays within `[−3, 0]`.
pub const POINT_BOUND: f64 = 1.5;
const DAMPING: f64 = 0.9;
const GAIN: f64 = 0.1;
const JITTER: f64 = 0.05;
const ACTION_COST: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointTask {
    GoalA,
    GoalB,
    DynA,
    DynB,
}

impl PointTask {
    fn goal(self) -> [f64; 2] {
        match self {
            PointTask::GoalB => [-0.8, 0.0],
            _ => [0.8, 0.0],
        }
    }

    fn action_gain(self) -> f64 {
        match self {
            PointTask::DynB => -1.0,
            _ => 1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            PointTask::GoalA => "pointgoal-a",
            PointTask::GoalB => "pointgoal-b",
            PointTask::DynA => "pointdyn-a",
            PointTask::DynB => "pointdyn-b",
        }
    }
}

/// Damped 2-D point mass. Observation `[x, y, vx, vy]`.
#[derive(Clone, Debug)]
pub struct PointEnv {
    task: PointTask,
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub step_count: usize,
    started: bool,
    done: bool,
}

impl PointEnv {
    pub fn new(task: PointTask) -> Self {
        Self {
            task,
            pos: [0.0; 2],
            vel: [0.0; 2],
            step_count: 0,
            started: false,
            done: false,
        }
    }

    pub fn task(&self) -> PointTask {
        self.task
    }

    /// Puts the body at a given state; used by tests and evaluation tools.
    pub fn set_state(&mut self, pos: [f64; 2], vel: [f64; 2]) {
        self.pos = pos;
        self.vel = vel;
        self.step_count = 0;
        self.started = true;
        self.done = false;
    }

    fn obs(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }
}

impl Env for PointEnv {
    fn name(&self) -> &str {
        self.task.name()
    }

    fn obs_dim(&self) -> usize {
        4
    }

    fn act_dim(&self) -> usize {
        2
    }

    fn reset(&mut self, rng: &mut SeededRng) -> Vec<f64> {
        let pos = [rng.random_range(-JITTER..=JITTER), rng.random_range(-JITTER..=JITTER)];
        self.set_state(pos, [0.0; 2]);
        self.obs()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if !self.started {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        check_action(action, 2)?;
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let gain = self.task.action_gain();
        for i in 0..2 {
            self.vel[i] = DAMPING * self.vel[i] + GAIN * gain * a[i];
            self.pos[i] = (self.pos[i] + GAIN * self.vel[i]).clamp(-POINT_BOUND, POINT_BOUND);
        }
        self.step_count += 1;
        let goal = self.task.goal();
        let dist = ((self.pos[0] - goal[0]).powi(2) + (self.pos[1] - goal[1]).powi(2)).sqrt();
        let reward = -dist - ACTION_COST * (a[0] * a[0] + a[1] * a[1]);
        self.done = self.step_count >= POINT_MAX_STEPS;
        Ok(StepResult {
            obs: self.obs(),
            reward,
            done: self.done,
            info: Outcome::None,
        })
    }
}
