use std::path::Path;

use rand::{RngCore, SeedableRng};
use rayon::prelude::*;

use super::agent::{seeded_stream, Agent, STREAM_MATCH, STREAM_MINIBATCH, STREAM_WORKER};
use super::config::{ExperimentConfig, Protocol};
use super::snapshot::Snapshot;
use super::train::{apply_update, archive_name, join_segments, metrics_row, Recorder, RunOutput, RunSummary};
use super::RunError;
use crate::diffnet::{forward_batch, Mat, NetworkSpec, ParamVector};
use crate::envs::{Outcome, SumoLine};
use crate::rollout::{act, EpisodeRecord, RolloutBatch, RolloutError, RunningNormalizer};
use crate::SeededRng;

/// Dense-reward weight for episode `episode` when the blend fades out over
/// `horizon_episodes` episodes.
pub fn curriculum_alpha(episode: u64, horizon_episodes: f64) -> f64 {
    if horizon_episodes <= 0.0 {
        return 0.0;
    }
    (1.0 - episode as f64 / horizon_episodes).max(0.0)
}

/// Number of episodes over which the dense reward is blended out.
pub fn curriculum_horizon(cfg: &ExperimentConfig) -> f64 {
    let planned = cfg.total_steps as f64 / cfg.selfplay.train_max_steps as f64;
    cfg.selfplay.curriculum_fraction * planned
}

/// One sumoline instance in which both bodies are driven by the current
/// parameters. Only the body on side 0 produces training data.
struct SelfPlayWorker {
    env: SumoLine,
    obs: Option<[Vec<f64>; 2]>,
    ep_return: f64,
    ep_len: usize,
    local_episodes: u64,
    worker: u64,
    n_workers: u64,
}

impl SelfPlayWorker {
    fn new(worker: usize, n_workers: usize, max_steps: usize) -> Self {
        Self {
            env: SumoLine::new(max_steps),
            obs: None,
            ep_return: 0.0,
            ep_len: 0,
            local_episodes: 0,
            worker: worker as u64,
            n_workers: n_workers as u64,
        }
    }

    /// Global episode index of the next episode this worker starts; a
    /// function of the worker id and its own episode count only.
    fn next_episode_index(&self) -> u64 {
        self.local_episodes * self.n_workers + self.worker
    }

    fn collect(
        &mut self,
        params: &ParamVector,
        horizon: usize,
        norm: &mut RunningNormalizer,
        delta: &mut RunningNormalizer,
        curriculum: f64,
        rng: &mut SeededRng,
    ) -> Result<(RolloutBatch, Vec<EpisodeRecord>), RolloutError> {
        if horizon == 0 {
            return Err(RolloutError::EmptyHorizon);
        }
        let obs_dim = self.env.obs_dim();
        let mut obs = Vec::with_capacity(horizon * obs_dim);
        let mut actions = Vec::with_capacity(horizon);
        let mut logp_old = Vec::with_capacity(horizon);
        let mut rewards = Vec::with_capacity(horizon);
        let mut values = Vec::with_capacity(horizon);
        let mut dones = Vec::with_capacity(horizon);
        let mut episodes = Vec::new();
        for step in 0..horizon {
            let [raw1, raw2] = match self.obs.take() {
                Some(o) => o,
                None => {
                    self.env.set_alpha(curriculum_alpha(self.next_episode_index(), curriculum));
                    self.local_episodes += 1;
                    self.env.reset(rng)
                }
            };
            delta.push(&raw1);
            let o1 = norm.normalize(&raw1, true);
            let o2 = norm.apply(&raw2);
            let policy_err = |source| RolloutError::Policy { step, source };
            let (a1, logp, v) = act(params, &o1, rng).map_err(policy_err)?;
            let (a2, _, _) = act(params, &o2, rng).map_err(policy_err)?;
            let [r1, r2] = self
                .env
                .step([a1[0], a2[0]])
                .map_err(|source| RolloutError::Env { step, source })?;
            obs.extend_from_slice(&o1);
            actions.extend_from_slice(&a1);
            logp_old.push(logp);
            values.push(v);
            rewards.push(r1.reward);
            dones.push(r1.done);
            self.ep_return += r1.reward;
            self.ep_len += 1;
            if r1.done {
                episodes.push(EpisodeRecord {
                    ret: self.ep_return,
                    len: self.ep_len,
                    outcome: r1.info,
                });
                self.ep_return = 0.0;
                self.ep_len = 0;
            } else {
                self.obs = Some([r1.obs, r2.obs]);
            }
        }
        let bootstrap_value = match &self.obs {
            Some([raw1, _]) => {
                forward_batch(params, &Mat::from_vec(1, obs_dim, norm.apply(raw1)))
                    .map_err(|source| RolloutError::Policy { step: horizon, source })?
                    .values[0]
            }
            None => 0.0,
        };
        let batch = RolloutBatch {
            obs: Mat::from_vec(horizon, obs_dim, obs),
            actions: Mat::from_vec(horizon, 1, actions),
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

/// Trains one controller against itself on sumoline, archiving snapshots
/// every `snapshot_every` updates.
pub fn run_selfplay(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<RunOutput, RunError> {
    if cfg.protocol != Protocol::Selfplay {
        return Err(RunError::Protocol(format!("run_selfplay given a {:?} config", cfg.protocol)));
    }
    cfg.validate()?;
    let probe = SumoLine::default();
    let spec = NetworkSpec::new(probe.obs_dim(), probe.act_dim()).with_hidden(cfg.hidden.clone());
    let mut agent = Agent::new(cfg, &spec)?;
    let n_depths = agent.n_depths();
    let hash = cfg.hash();
    let mut rec = Recorder::new(cfg, dir, n_depths)?;

    let curriculum = curriculum_horizon(cfg);
    let mut norm = RunningNormalizer::new(probe.obs_dim());
    let mut workers: Vec<SelfPlayWorker> = (0..cfg.n_envs)
        .map(|w| SelfPlayWorker::new(w, cfg.n_envs, cfg.selfplay.train_max_steps))
        .collect();
    let mut rngs: Vec<SeededRng> = (0..cfg.n_envs)
        .map(|w| seeded_stream(cfg.seed, STREAM_WORKER + w as u64))
        .collect();
    let mut mb_rng = seeded_stream(cfg.seed, STREAM_MINIBATCH);
    let mut archive = Vec::new();
    let mut last_reward = f64::NAN;

    rec.guard(|rec| {
        for it in 0..cfg.n_updates() {
            rec.iteration = it;
            let base = norm.clone();
            let params = agent.visible();
            let results: Vec<_> = workers
                .par_iter_mut()
                .zip(rngs.par_iter_mut())
                .map(|(w, rng)| {
                    let mut local = base.clone();
                    let mut delta = RunningNormalizer::new(base.dim());
                    w.collect(params, cfg.horizon, &mut local, &mut delta, curriculum, rng)
                        .map(|r| (r, delta))
                })
                .collect();
            let mut parts = Vec::with_capacity(results.len());
            let mut returns = Vec::new();
            for r in results {
                let ((batch, eps), delta) = r?;
                norm.merge(&delta);
                parts.push(batch);
                returns.extend(eps.iter().map(|e| e.ret));
            }
            rec.env_steps += cfg.steps_per_update();
            if !returns.is_empty() {
                last_reward = returns.iter().sum::<f64>() / returns.len() as f64;
            }
            let batch = join_segments(parts, cfg);
            let m = apply_update(&mut agent, &batch, cfg, &mut mb_rng, rec)?;
            let row = metrics_row(rec, &cfg.envs[0], last_reward, m.as_ref(), n_depths);
            rec.row(row)?;
            if cfg.snapshot_every > 0 && (it + 1) % cfg.snapshot_every as u64 == 0 {
                let rng_refs: Vec<&SeededRng> = rngs.iter().chain([&mb_rng]).collect();
                let snap = Snapshot::new(&agent, cfg.agent, &norm, &hash, it + 1, rec.env_steps, &rng_refs);
                rec.save_snapshot(&snap, &archive_name(it + 1))?;
                archive.push(snap);
            }
        }
        Ok(())
    })?;

    let rng_refs: Vec<&SeededRng> = rngs.iter().chain([&mb_rng]).collect();
    let final_snapshot = Snapshot::new(&agent, cfg.agent, &norm, &hash, cfg.n_updates(), rec.env_steps, &rng_refs);
    rec.save_snapshot(&final_snapshot, "final.snap")?;
    let summary = RunSummary {
        run_id: cfg.run_id(),
        config_hash: hash,
        protocol: cfg.protocol,
        agent: cfg.agent.name().to_string(),
        updates: rec.rows.len() as u64,
        env_steps: rec.env_steps,
        final_average_reward: None,
        forgetting_metric: None,
        numeric_failures: rec.error_rows.len(),
        snapshot_versions: archive.iter().map(|s: &Snapshot| s.meta.version).collect(),
    };
    rec.write_summary(&summary)?;
    Ok(RunOutput {
        summary,
        rows: rec.rows,
        errors: rec.error_rows,
        final_snapshot,
        archive,
    })
}

/// A policy as it plays in evaluation: its parameters and the observation
/// statistics archived with them.
#[derive(Clone, Copy, Debug)]
pub struct Contestant<'a> {
    pub params: &'a ParamVector,
    pub norm: &'a RunningNormalizer,
}

impl<'a> Contestant<'a> {
    pub fn of(snap: &'a Snapshot) -> Self {
        Self {
            params: snap.agent.visible(),
            norm: &snap.normalizer,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchResult {
    pub score_a: f64,
    pub score_b: f64,
    pub episode_length: usize,
    /// Outcome from a's point of view.
    pub outcome: Outcome,
}

/// Plays `n_episodes` matches of `a` against `b`, both acting with
/// sampled actions.
///
/// Episodes come in pairs sharing one random start and one pair of action
/// noise streams, the noise being tied to the side rather than the player:
/// first with `a` on side 0, then with the sides swapped. Identical
/// contestants therefore replay the same game twice with roles exchanged and
/// score exactly 0.5 over every complete pair.
pub fn evaluate_match(
    a: Contestant<'_>,
    b: Contestant<'_>,
    n_episodes: usize,
    max_len: usize,
    rng: &mut SeededRng,
) -> Result<Vec<MatchResult>, RunError> {
    let mut env = SumoLine::new(max_len);
    let mut results = Vec::with_capacity(n_episodes);
    let mut start = None;
    let mut noise_seeds = [0u64; 2];
    for ep in 0..n_episodes {
        let a_side = ep % 2;
        let mut obs = if a_side == 0 {
            let o = env.reset(rng);
            start = Some(env.state);
            noise_seeds = [rng.next_u64(), rng.next_u64()];
            o
        } else {
            env.set_state(start.expect("paired start"));
            env.observations()
        };
        let mut noise = noise_seeds.map(SeededRng::seed_from_u64);
        let players = if a_side == 0 { [a, b] } else { [b, a] };
        let mut len = 0;
        let outcome = loop {
            let (u0, _, _) = act(players[0].params, &players[0].norm.apply(&obs[0]), &mut noise[0])?;
            let (u1, _, _) = act(players[1].params, &players[1].norm.apply(&obs[1]), &mut noise[1])?;
            let r = env.step([u0[0], u1[0]])?;
            len += 1;
            if r[a_side].done {
                break r[a_side].info;
            }
            obs = [r[0].obs.clone(), r[1].obs.clone()];
        };
        let score_a = outcome.score();
        results.push(MatchResult {
            score_a,
            score_b: 1.0 - score_a,
            episode_length: len,
            outcome,
        });
    }
    Ok(results)
}

pub fn mean_score(results: &[MatchResult]) -> f64 {
    results.iter().map(|r| r.score_a).sum::<f64>() / results.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct TournamentRow {
    pub snapshot_version: u64,
    pub env_steps: u64,
    pub mean_score: f64,
    pub n_episodes: usize,
}

pub const TOURNAMENT_HEADER: [&str; 4] = ["snapshot_version", "env_steps", "mean_score", "n_episodes"];

impl TournamentRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.snapshot_version.to_string(),
            self.env_steps.to_string(),
            super::metrics::fmt_f64(self.mean_score),
            self.n_episodes.to_string(),
        ]
    }
}

/// Plays `current` against every archived snapshot. Matches run in
/// parallel, each on its own rng stream keyed by the snapshot version.
pub fn tournament_vs_history(
    current: &Snapshot,
    archive: &[Snapshot],
    n_episodes: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<TournamentRow>, RunError> {
    if archive.is_empty() {
        return Err(RunError::Protocol("tournament needs at least one archived snapshot".into()));
    }
    archive
        .par_iter()
        .map(|old| {
            let mut rng = seeded_stream(seed, STREAM_MATCH + old.meta.version);
            let results = evaluate_match(Contestant::of(current), Contestant::of(old), n_episodes, max_len, &mut rng)?;
            Ok(TournamentRow {
                snapshot_version: old.meta.version,
                env_steps: old.meta.env_steps,
                mean_score: mean_score(&results),
                n_episodes,
            })
        })
        .collect()
}
