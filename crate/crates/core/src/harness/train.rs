use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::agent::{seeded_stream, Agent, STREAM_MINIBATCH, STREAM_WORKER};
use super::config::{ExperimentConfig, Protocol};
use super::eval::{final_average_reward, forgetting_metric};
use super::metrics::{metrics_header, CsvSink, ErrorRow, MetricsRow, ERRORS_HEADER};
use super::snapshot::Snapshot;
use super::RunError;
use crate::diffnet::NetworkSpec;
use crate::envs::{env_act_dim, env_obs_dim, make_env};
use crate::ppo::{UpdateError, UpdateMetrics};
use crate::rollout::{collect_parallel, fill_gae_raw, standardize_advantages, Collector, RolloutBatch, RunningNormalizer};
use crate::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub config_hash: String,
    pub protocol: Protocol,
    pub agent: String,
    pub updates: u64,
    pub env_steps: u64,
    /// Mean over tasks of the average reward in each task's last block.
    pub final_average_reward: Option<f64>,
    /// Artifact-defined forgetting statistic; absent unless some task was
    /// trained in at least two blocks.
    pub forgetting_metric: Option<f64>,
    pub numeric_failures: usize,
    pub snapshot_versions: Vec<u64>,
}

/// Everything a finished run produced, kept in memory as well as on disk.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub rows: Vec<MetricsRow>,
    pub errors: Vec<ErrorRow>,
    pub final_snapshot: Snapshot,
    /// Periodic snapshots, oldest first.
    pub archive: Vec<Snapshot>,
}

/// Run directory writer. With `dir = None` nothing touches the filesystem.
pub(crate) struct Recorder {
    dir: Option<PathBuf>,
    metrics: CsvSink,
    errors: CsvSink,
    pub rows: Vec<MetricsRow>,
    pub error_rows: Vec<ErrorRow>,
    start: Instant,
    record_wall: bool,
    pub iteration: u64,
    pub env_steps: u64,
}

impl Recorder {
    pub fn new(cfg: &ExperimentConfig, dir: Option<&Path>, n_depths: usize) -> Result<Self, RunError> {
        let (metrics, errors) = match dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                std::fs::write(d.join("config.toml"), cfg.to_toml())?;
                let errors_header: Vec<String> = ERRORS_HEADER.iter().map(|s| s.to_string()).collect();
                (
                    CsvSink::create(&d.join("metrics.csv"), &metrics_header(n_depths))?,
                    CsvSink::create(&d.join("errors.csv"), &errors_header)?,
                )
            }
            None => (CsvSink::disabled(), CsvSink::disabled()),
        };
        Ok(Self {
            dir: dir.map(Path::to_path_buf),
            metrics,
            errors,
            rows: Vec::new(),
            error_rows: Vec::new(),
            start: Instant::now(),
            record_wall: cfg.record_wall_time,
            iteration: 0,
            env_steps: 0,
        })
    }

    pub fn wall_ms(&self) -> u64 {
        if self.record_wall {
            self.start.elapsed().as_millis() as u64
        } else {
            0
        }
    }

    pub fn row(&mut self, row: MetricsRow) -> Result<(), RunError> {
        self.metrics.write(&row.record())?;
        self.rows.push(row);
        Ok(())
    }

    pub fn error(&mut self, kind: &str, message: String) -> Result<(), RunError> {
        let e = ErrorRow {
            iteration: self.iteration,
            env_steps: self.env_steps,
            kind: kind.to_string(),
            message,
        };
        self.errors
            .write(&[e.iteration.to_string(), e.env_steps.to_string(), e.kind.clone(), e.message.clone()])?;
        self.error_rows.push(e);
        Ok(())
    }

    pub fn save_snapshot(&self, snap: &Snapshot, name: &str) -> Result<(), RunError> {
        if let Some(d) = &self.dir {
            let path = d.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            snap.save(&path)?;
        }
        Ok(())
    }

    pub fn write_summary(&self, summary: &RunSummary) -> Result<(), RunError> {
        if let Some(d) = &self.dir {
            let text = serde_json::to_string_pretty(summary).expect("summary serializes");
            std::fs::write(d.join("summary.json"), text + "\n")?;
        }
        Ok(())
    }

    /// Runs `body`; a failure is logged as a `fatal` error row before it is
    /// passed on, so the partial CSVs always explain why they stop.
    pub fn guard<T>(&mut self, body: impl FnOnce(&mut Self) -> Result<T, RunError>) -> Result<T, RunError> {
        match body(self) {
            Ok(v) => Ok(v),
            Err(e) => {
                let _ = self.error("fatal", e.to_string());
                Err(e)
            }
        }
    }
}

pub(crate) fn archive_name(version: u64) -> String {
    format!("snapshots/v{version:06}.snap")
}

/// Applies one update. Numerical failures are recorded and skipped (the
/// agent keeps its pre-update state); anything else ends the run.
pub(crate) fn apply_update(
    agent: &mut Agent,
    batch: &RolloutBatch,
    cfg: &ExperimentConfig,
    rng: &mut SeededRng,
    rec: &mut Recorder,
) -> Result<Option<UpdateMetrics>, RunError> {
    match agent.update(batch, cfg, rng) {
        Ok(m) => Ok(Some(m)),
        Err(UpdateError::Numeric(e)) => {
            rec.error("numeric", e.to_string())?;
            Ok(None)
        }
        Err(source) => Err(RunError::Update {
            iteration: rec.iteration,
            source,
        }),
    }
}

pub(crate) fn metrics_row(
    rec: &Recorder,
    task: &str,
    mean_ep_reward: f64,
    m: Option<&UpdateMetrics>,
    n_depths: usize,
) -> MetricsRow {
    let nan = f64::NAN;
    MetricsRow {
        iteration: rec.iteration,
        env_steps: rec.env_steps,
        task: task.to_string(),
        mean_ep_reward,
        pg_loss: m.map_or(nan, |m| m.pg_loss),
        vf_loss: m.map_or(nan, |m| m.vf_loss),
        kl_self_mean: m.map_or(nan, |m| m.kl_self_mean),
        beta: m.map_or(nan, |m| m.beta),
        wall_ms: rec.wall_ms(),
        kl_depth: m.map_or_else(|| vec![nan; n_depths], |m| m.kl_depth.clone()),
    }
}

/// GAE per worker segment, then standardization over the joined batch.
pub(crate) fn join_segments(mut parts: Vec<RolloutBatch>, cfg: &ExperimentConfig) -> RolloutBatch {
    for p in &mut parts {
        fill_gae_raw(p, cfg.gamma, cfg.lam);
    }
    let mut batch = if parts.len() == 1 {
        parts.pop().expect("one segment")
    } else {
        RolloutBatch::concat(&parts)
    };
    standardize_advantages(&mut batch);
    batch
}

/// Trains on the configured task sequence. Every update writes one metrics
/// row; the active environment changes at block boundaries without any
/// signal to the agent.
fn train_loop(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let obs_dim = env_obs_dim(&cfg.envs[0])?;
    let act_dim = env_act_dim(&cfg.envs[0])?;
    let spec = NetworkSpec::new(obs_dim, act_dim).with_hidden(cfg.hidden.clone());
    let mut agent = Agent::new(cfg, &spec)?;
    let n_depths = agent.n_depths();
    let hash = cfg.hash();
    let mut rec = Recorder::new(cfg, dir, n_depths)?;

    let mut norm = RunningNormalizer::new(obs_dim);
    let mut task = cfg.task_index(0);
    let mut collectors = (0..cfg.n_envs)
        .map(|_| make_env(&cfg.envs[task]).map(Collector::new))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rngs: Vec<SeededRng> = (0..cfg.n_envs)
        .map(|w| seeded_stream(cfg.seed, STREAM_WORKER + w as u64))
        .collect();
    let mut mb_rng = seeded_stream(cfg.seed, STREAM_MINIBATCH);
    let mut archive = Vec::new();
    let mut last_reward = f64::NAN;

    rec.guard(|rec| {
        for it in 0..cfg.n_updates() {
            rec.iteration = it;
            let next = cfg.task_index(it);
            if next != task {
                task = next;
                for c in &mut collectors {
                    c.set_env(make_env(&cfg.envs[task])?);
                    assert_eq!(c.env.obs_dim(), obs_dim, "task variants must share observation width");
                }
            }
            let segments = if cfg.n_envs == 1 {
                vec![collectors[0].collect(agent.visible(), cfg.horizon, &mut norm, None, &mut rngs[0])?]
            } else {
                collect_parallel(&mut collectors, &mut rngs, agent.visible(), cfg.horizon, &mut norm)?
            };
            rec.env_steps += cfg.steps_per_update();
            let mut parts = Vec::with_capacity(segments.len());
            let mut returns = Vec::new();
            for (b, eps) in segments {
                parts.push(b);
                returns.extend(eps.iter().map(|e| e.ret));
            }
            if !returns.is_empty() {
                last_reward = returns.iter().sum::<f64>() / returns.len() as f64;
            }
            let batch = join_segments(parts, cfg);
            let m = apply_update(&mut agent, &batch, cfg, &mut mb_rng, rec)?;
            let row = metrics_row(rec, &cfg.envs[task], last_reward, m.as_ref(), n_depths);
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
        final_average_reward: final_average_reward(&rec.rows),
        forgetting_metric: forgetting_metric(&rec.rows),
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

/// Alternates between the configured tasks every `switch_period ×
/// schedule_factor` steps.
pub fn run_alternating(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<RunOutput, RunError> {
    if cfg.protocol != Protocol::Alternating {
        return Err(RunError::Protocol(format!("run_alternating given a {:?} config", cfg.protocol)));
    }
    train_loop(cfg, dir)
}

/// Trains on `envs[0]` for the whole run.
pub fn run_single(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<RunOutput, RunError> {
    if cfg.protocol != Protocol::Single {
        return Err(RunError::Protocol(format!("run_single given a {:?} config", cfg.protocol)));
    }
    train_loop(cfg, dir)
}

/// Dispatches on the configured protocol.
pub fn run(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<RunOutput, RunError> {
    match cfg.protocol {
        Protocol::Alternating => run_alternating(cfg, dir),
        Protocol::Single => run_single(cfg, dir),
        Protocol::Selfplay => super::run_selfplay(cfg, dir),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::AgentKind;

    fn tiny(protocol: Protocol, agent: AgentKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::defaults(protocol);
        cfg.agent = agent;
        cfg.horizon = 64;
        cfg.total_steps = 64 * 10;
        cfg.switch_period = 128;
        cfg.hidden = vec![8];
        cfg.ppo.n_minibatches = 4;
        cfg.ppo.epochs = 2;
        cfg.cascade.n_policies = 3;
        if protocol == Protocol::Single {
            cfg.switch_period = cfg.total_steps;
        }
        cfg.ppo = cfg.ppo_for_agent();
        cfg
    }

    fn csv_bytes(cfg: &ExperimentConfig) -> Vec<u8> {
        let dir = tempfile::tempdir().unwrap();
        run(cfg, Some(dir.path())).unwrap();
        std::fs::read(dir.path().join("metrics.csv")).unwrap()
    }

    #[test]
    fn alternating_task_sequence_in_rows() {
        let mut cfg = tiny(Protocol::Alternating, AgentKind::Pc);
        cfg.total_steps = 64 * 12;
        cfg.switch_period = 64 * 4;
        let out = run(&cfg, None).unwrap();
        let tasks: Vec<&str> = out.rows.iter().map(|r| &r.task[r.task.len() - 1..]).collect();
        assert_eq!(tasks.concat(), "aaaabbbbaaaa");
        assert!(out.rows.windows(2).all(|w| w[1].env_steps > w[0].env_steps));
        assert_eq!(out.rows[0].kl_depth.len(), 3);
        assert!(out.summary.forgetting_metric.is_some());
    }

    #[test]
    fn identical_runs_write_identical_files() {
        for agent in [AgentKind::Pc, AgentKind::AdaptiveKl, AgentKind::Synaptic] {
            let cfg = tiny(Protocol::Alternating, agent);
            assert_eq!(csv_bytes(&cfg), csv_bytes(&cfg), "{agent:?}");
        }
    }

    #[test]
    fn degenerate_schedule_matches_single_task() {
        let mut alt = tiny(Protocol::Alternating, AgentKind::FixedKl);
        alt.switch_period = alt.total_steps;
        let single = tiny(Protocol::Single, AgentKind::FixedKl);
        assert_eq!(csv_bytes(&alt), csv_bytes(&single));
    }

    #[test]
    fn parallel_workers_are_deterministic() {
        let mut cfg = tiny(Protocol::Single, AgentKind::Clipped);
        cfg.n_envs = 2;
        assert_eq!(csv_bytes(&cfg), csv_bytes(&cfg));
    }

    #[test]
    fn run_directory_contents() {
        let mut cfg = tiny(Protocol::Single, AgentKind::Clipped);
        cfg.snapshot_every = 5;
        let dir = tempfile::tempdir().unwrap();
        let out = run(&cfg, Some(dir.path())).unwrap();
        for f in ["config.toml", "metrics.csv", "errors.csv", "summary.json", "final.snap", "snapshots/v000005.snap"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let text = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
        assert_eq!(crate::harness::resolve_str(&text, &[]).unwrap(), cfg);
        assert_eq!(out.summary.snapshot_versions, vec![5, 10]);
        let loaded = Snapshot::load(&dir.path().join("final.snap")).unwrap();
        assert_eq!(loaded, out.final_snapshot);
        assert!(matches!(loaded.agent, Agent::Ppo(_)));
        assert_eq!(out.rows.len(), 10);
        assert!(out.summary.forgetting_metric.is_none());
    }

    #[test]
    fn protocol_mismatch_is_rejected() {
        let cfg = tiny(Protocol::Single, AgentKind::Clipped);
        assert!(matches!(run_alternating(&cfg, None), Err(RunError::Protocol(_))));
    }
}
