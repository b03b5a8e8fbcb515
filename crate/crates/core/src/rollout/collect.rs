use rayon::prelude::*;

use super::{RolloutBatch, RolloutError, RunningNormalizer};
use crate::diffnet::{forward_batch, log_prob, DiffError, Mat, ParamVector};
use crate::envs::{Env, Outcome};
use crate::SeededRng;

/// A finished episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub ret: f64,
    pub len: usize,
    pub outcome: Outcome,
}

/// Samples an action for one normalized observation. Returns the action,
/// its log-probability and the state value.
pub fn act(params: &ParamVector, obs: &[f64], rng: &mut SeededRng) -> Result<(Vec<f64>, f64, f64), DiffError> {
    let out = forward_batch(params, &Mat::from_vec(1, obs.len(), obs.to_vec()))?;
    let dist = out.dist(0);
    let action = dist.sample(rng);
    let logp = log_prob(&dist, &action)?;
    Ok((action, logp, out.values[0]))
}

/// Drives one environment instance across horizon boundaries.
pub struct Collector {
    pub env: Box<dyn Env>,
    raw_obs: Option<Vec<f64>>,
    ep_return: f64,
    ep_len: usize,
}

impl Collector {
    pub fn new(env: Box<dyn Env>) -> Self {
        Self {
            env,
            raw_obs: None,
            ep_return: 0.0,
            ep_len: 0,
        }
    }

    /// Swaps in another environment; the next collection starts with a reset.
    pub fn set_env(&mut self, env: Box<dyn Env>) {
        self.env = env;
        self.raw_obs = None;
        self.ep_return = 0.0;
        self.ep_len = 0;
    }

    /// Collects exactly `horizon` steps, resetting on termination. Every
    /// observation used for acting is folded into `norm` (and into `delta`
    /// when given) before it is normalized.
    pub fn collect(
        &mut self,
        params: &ParamVector,
        horizon: usize,
        norm: &mut RunningNormalizer,
        mut delta: Option<&mut RunningNormalizer>,
        rng: &mut SeededRng,
    ) -> Result<(RolloutBatch, Vec<EpisodeRecord>), RolloutError> {
        if horizon == 0 {
            return Err(RolloutError::EmptyHorizon);
        }
        let obs_dim = self.env.obs_dim();
        let act_dim = self.env.act_dim();
        let mut obs = Vec::with_capacity(horizon * obs_dim);
        let mut actions = Vec::with_capacity(horizon * act_dim);
        let mut logp_old = Vec::with_capacity(horizon);
        let mut rewards = Vec::with_capacity(horizon);
        let mut values = Vec::with_capacity(horizon);
        let mut dones = Vec::with_capacity(horizon);
        let mut episodes = Vec::new();
        for step in 0..horizon {
            let raw = match self.raw_obs.take() {
                Some(o) => o,
                None => self.env.reset(rng),
            };
            if let Some(d) = delta.as_deref_mut() {
                d.push(&raw);
            }
            let o = norm.normalize(&raw, true);
            let (a, logp, v) = act(params, &o, rng).map_err(|source| RolloutError::Policy { step, source })?;
            let r = self.env.step(&a).map_err(|source| RolloutError::Env { step, source })?;
            obs.extend_from_slice(&o);
            actions.extend_from_slice(&a);
            logp_old.push(logp);
            values.push(v);
            rewards.push(r.reward);
            dones.push(r.done);
            self.ep_return += r.reward;
            self.ep_len += 1;
            if r.done {
                episodes.push(EpisodeRecord {
                    ret: self.ep_return,
                    len: self.ep_len,
                    outcome: r.info,
                });
                self.ep_return = 0.0;
                self.ep_len = 0;
            } else {
                self.raw_obs = Some(r.obs);
            }
        }
        let bootstrap_value = match &self.raw_obs {
            Some(raw) => {
                let o = norm.apply(raw);
                forward_batch(params, &Mat::from_vec(1, obs_dim, o))
                    .map_err(|source| RolloutError::Policy { step: horizon, source })?
                    .values[0]
            }
            None => 0.0,
        };
        let batch = RolloutBatch {
            obs: Mat::from_vec(horizon, obs_dim, obs),
            actions: Mat::from_vec(horizon, act_dim, actions),
            logp_old,
            rewards,
            values,
            dones,
            advantages: Vec::new(),
            returns: Vec::new(),
            bootstrap_value,
        };
        Ok((batch, episodes))
    }
}

/// Runs one collection per worker in parallel. Each worker normalizes with a
/// private copy of `norm`; the observation statistics gathered by the workers
/// are merged back into `norm` in worker order afterwards.
pub fn collect_parallel(
    collectors: &mut [Collector],
    rngs: &mut [SeededRng],
    params: &ParamVector,
    horizon: usize,
    norm: &mut RunningNormalizer,
) -> Result<Vec<(RolloutBatch, Vec<EpisodeRecord>)>, RolloutError> {
    assert_eq!(collectors.len(), rngs.len(), "one rng per worker");
    let base = norm.clone();
    let results: Vec<_> = collectors
        .par_iter_mut()
        .zip(rngs.par_iter_mut())
        .map(|(c, rng)| {
            let mut local = base.clone();
            let mut delta = RunningNormalizer::new(base.dim());
            c.collect(params, horizon, &mut local, Some(&mut delta), rng)
                .map(|r| (r, delta))
        })
        .collect();
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        let (batch, delta) = r?;
        norm.merge(&delta);
        out.push(batch);
    }
    Ok(out)
}
