use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cascade::CascadeConfig;
use crate::envs::{env_act_dim, env_obs_dim, SINGLE_AGENT_ENVS, SUMO_EVAL_STEPS, SUMO_TRAIN_STEPS};
use crate::ppo::{PpoConfig, PpoVariant};
use crate::synapse::SynapseConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Alternating,
    Single,
    Selfplay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Pc,
    Clipped,
    FixedKl,
    AdaptiveKl,
    Synaptic,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Pc => "pc",
            AgentKind::Clipped => "clipped",
            AgentKind::FixedKl => "fixed_kl",
            AgentKind::AdaptiveKl => "adaptive_kl",
            AgentKind::Synaptic => "synaptic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfPlayConfig {
    /// Fraction of the planned episodes over which the dense reward is
    /// blended out.
    pub curriculum_fraction: f64,
    pub train_max_steps: usize,
    pub eval_max_steps: usize,
}

impl Default for SelfPlayConfig {
    fn default() -> Self {
        Self {
            curriculum_fraction: 0.15,
            train_max_steps: SUMO_TRAIN_STEPS,
            eval_max_steps: SUMO_EVAL_STEPS,
        }
    }
}

/// Everything that defines a run. A file only needs the keys it changes;
/// the rest comes from the protocol's defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub agent: AgentKind,
    /// Task sequence for `alternating`, the task for `single` (first entry),
    /// `["sumoline"]` for `selfplay`.
    pub envs: Vec<String>,
    pub seed: u64,
    pub total_steps: u64,
    /// Steps per task block before `schedule_factor` is applied.
    pub switch_period: u64,
    pub schedule_factor: f64,
    /// Steps per environment per update.
    pub horizon: usize,
    pub n_envs: usize,
    pub gamma: f64,
    pub lam: f64,
    pub hidden: Vec<usize>,
    /// Updates between archived snapshots; 0 keeps only the final one.
    pub snapshot_every: usize,
    pub eval_episodes: usize,
    /// Fill the `wall_ms` column. Off by default so that metrics files are
    /// byte-identical across repeated runs.
    pub record_wall_time: bool,
    pub ppo: PpoConfig,
    pub cascade: CascadeConfig,
    pub synapse: SynapseConfig,
    pub selfplay: SelfPlayConfig,
}

impl ExperimentConfig {
    pub fn defaults(protocol: Protocol) -> Self {
        let base = Self {
            protocol,
            agent: AgentKind::Pc,
            envs: vec!["pointgoal-a".into(), "pointgoal-b".into()],
            seed: 0,
            total_steps: 512_000,
            switch_period: 51_200,
            schedule_factor: 1.0,
            horizon: 512,
            n_envs: 1,
            gamma: 0.99,
            lam: 0.95,
            hidden: vec![64, 64],
            snapshot_every: 0,
            eval_episodes: 10,
            record_wall_time: false,
            ppo: PpoConfig {
                variant: PpoVariant::FixedKl,
                ..PpoConfig::default()
            },
            cascade: CascadeConfig::default(),
            synapse: SynapseConfig::default(),
            selfplay: SelfPlayConfig::default(),
        };
        match protocol {
            Protocol::Alternating => base,
            Protocol::Single => Self {
                envs: vec!["pointgoal-a".into()],
                switch_period: base.total_steps,
                ..base
            },
            Protocol::Selfplay => Self {
                envs: vec!["sumoline".into()],
                total_steps: 2_048_000,
                switch_period: 2_048_000,
                n_envs: 8,
                gamma: 0.995,
                snapshot_every: 10,
                eval_episodes: 30,
                ppo: PpoConfig {
                    variant: PpoVariant::FixedKl,
                    beta: 0.1,
                    epochs: 6,
                    n_minibatches: 32,
                    stepsize: 1e-4,
                    ..PpoConfig::default()
                },
                cascade: CascadeConfig {
                    beta: 0.1,
                    omega12: 0.25,
                    base_stepsize: 1e-4,
                    ..CascadeConfig::default()
                },
                ..base
            },
        }
    }

    /// Environment steps collected per update.
    pub fn steps_per_update(&self) -> u64 {
        (self.horizon * self.n_envs) as u64
    }

    pub fn n_updates(&self) -> u64 {
        self.total_steps / self.steps_per_update()
    }

    /// Length of one task block in steps after scaling.
    pub fn block_steps(&self) -> u64 {
        (self.switch_period as f64 * self.schedule_factor).round() as u64
    }

    /// Index into `envs` of the task trained on during update `iteration`.
    pub fn task_index(&self, iteration: u64) -> usize {
        match self.protocol {
            Protocol::Alternating => {
                let start = iteration * self.steps_per_update();
                ((start / self.block_steps()) % self.envs.len() as u64) as usize
            }
            _ => 0,
        }
    }

    /// PPO settings with the variant implied by the agent kind.
    pub fn ppo_for_agent(&self) -> PpoConfig {
        let variant = match self.agent {
            AgentKind::Clipped | AgentKind::Synaptic => PpoVariant::Clipped,
            AgentKind::FixedKl | AgentKind::Pc => PpoVariant::FixedKl,
            AgentKind::AdaptiveKl => PpoVariant::AdaptiveKl,
        };
        PpoConfig {
            variant,
            ..self.ppo.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: String| {
            Err(ConfigError::Invalid {
                key: key.to_string(),
                reason,
            })
        };
        match self.protocol {
            Protocol::Selfplay => {
                if self.envs != ["sumoline"] {
                    return bad("envs", "selfplay runs on [\"sumoline\"]".into());
                }
            }
            Protocol::Single | Protocol::Alternating => {
                let min = if self.protocol == Protocol::Alternating { 2 } else { 1 };
                if self.envs.len() < min {
                    return bad("envs", format!("needs at least {min} environment(s)"));
                }
                if let Some(e) = self.envs.iter().find(|e| !SINGLE_AGENT_ENVS.contains(&e.as_str())) {
                    return bad("envs", format!("unknown environment '{e}'"));
                }
                let dims: Vec<_> = self
                    .envs
                    .iter()
                    .map(|e| (env_obs_dim(e).ok(), env_act_dim(e).ok()))
                    .collect();
                if dims.windows(2).any(|w| w[0] != w[1]) {
                    return bad("envs", "environments differ in observation or action width".into());
                }
            }
        }
        if self.horizon == 0 || self.n_envs == 0 {
            return bad("horizon", "horizon and n_envs must be at least 1".into());
        }
        let per = self.steps_per_update();
        if self.total_steps == 0 || !self.total_steps.is_multiple_of(per) {
            return bad(
                "total_steps",
                format!("{} is not a positive multiple of horizon × n_envs = {per}", self.total_steps),
            );
        }
        if self.protocol == Protocol::Alternating {
            if !(self.schedule_factor.is_finite() && self.schedule_factor > 0.0) {
                return bad("schedule_factor", "must be positive".into());
            }
            let block = self.switch_period as f64 * self.schedule_factor;
            if block.fract() != 0.0 || block == 0.0 || !(block as u64).is_multiple_of(per) {
                return bad(
                    "switch_period",
                    format!("switch_period × schedule_factor = {block} is not a positive multiple of {per}"),
                );
            }
        }
        if !(per as usize).is_multiple_of(self.ppo.n_minibatches) {
            return bad(
                "ppo.n_minibatches",
                format!("{} does not divide the {per} steps of an update", self.ppo.n_minibatches),
            );
        }
        for (key, v) in [("gamma", self.gamma), ("lam", self.lam)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(key, format!("must lie in [0, 1], got {v}"));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden", "needs at least one non-empty layer".into());
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes", "must be at least 1".into());
        }
        self.ppo.validate().or_else(|r| bad("ppo", r))?;
        self.cascade.validate().or_else(|r| bad("cascade", r))?;
        if self.synapse.n_beakers < 2 {
            return bad("synapse.n_beakers", "must be at least 2".into());
        }
        let sp = &self.selfplay;
        if !(0.0..=1.0).contains(&sp.curriculum_fraction) {
            return bad("selfplay.curriculum_fraction", "must lie in [0, 1]".into());
        }
        if sp.train_max_steps == 0 || sp.eval_max_steps == 0 {
            return bad("selfplay", "episode limits must be at least 1".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved config text (the seed is part of it).
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn run_id(&self) -> String {
        self.hash()[..12].to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cannot read config '{path}': {reason}")]
    Io { path: String, reason: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("invalid value for '{key}': {reason}")]
    Invalid { key: String, reason: String },
    #[error("malformed override '{0}', expected key=value")]
    Override(String),
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` onto a table. Values are read as TOML literals,
/// falling back to bare strings.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut t = table;
    for p in parts {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Invalid {
                key: key.to_string(),
                reason: format!("'{p}' is not a section"),
            })?;
    }
    t.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn merge(base: &mut toml::Table, user: toml::Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (None, _) => return Err(ConfigError::UnknownKey(path)),
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u, &path)?,
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

fn field_error(msg: &str) -> ConfigError {
    // serde reports unknown fields as "unknown field `name`"
    if let Some(rest) = msg.split("unknown field `").nth(1) {
        if let Some(name) = rest.split('`').next() {
            return ConfigError::UnknownKey(name.to_string());
        }
    }
    ConfigError::Parse(msg.to_string())
}

/// Resolves a user table plus overrides against the protocol defaults.
pub fn resolve(mut user: toml::Table, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    for o in overrides {
        apply_override(&mut user, o)?;
    }
    let protocol = match user.get("protocol") {
        None => Protocol::Alternating,
        Some(v) => v.clone().try_into::<Protocol>().map_err(|e| ConfigError::Invalid {
            key: "protocol".into(),
            reason: e.to_string(),
        })?,
    };
    let mut base = toml::Table::try_from(ExperimentConfig::defaults(protocol)).expect("defaults serialize");
    merge(&mut base, user, "")?;
    let mut cfg: ExperimentConfig = toml::Value::Table(base)
        .try_into()
        .map_err(|e: toml::de::Error| field_error(e.message()))?;
    cfg.ppo = cfg.ppo_for_agent();
    cfg.validate()?;
    Ok(cfg)
}

pub fn resolve_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let table: toml::Table = toml::from_str(text).map_err(|e| field_error(&e.to_string()))?;
    resolve(table, overrides)
}

/// Reads and resolves a config file; `None` starts from defaults.
pub fn load_config(path: Option<&std::path::Path>, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| ConfigError::Io {
            path: p.display().to_string(),
            reason: e.to_string(),
        })?,
        None => String::new(),
    };
    resolve_str(&text, overrides)
}
