//! Binary snapshots of a learner.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"PCSNAP1"            magic
//! u32                   format version
//! u32                   metadata length in bytes
//! [u8]                  metadata (JSON)
//! f64 × …               normalizer count, mean, m2
//!                       parameters of every network in layout order
//!                       Adam first and second moments of every network
//!                       beaker levels (synaptic agents only)
//! ```

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::agent::Agent;
use super::config::AgentKind;
use crate::cascade::CascadeState;
use crate::diffnet::{AdamState, Layout, Mat, NetworkSpec, ParamVector};
use crate::ppo::PpoAgent;
use crate::rollout::RunningNormalizer;
use crate::synapse::{BeakerChain, SynapticAgent};
use crate::SeededRng;

pub const SNAPSHOT_MAGIC: &[u8; 7] = b"PCSNAP1";
pub const SNAPSHOT_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("snapshot i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a snapshot file (bad magic)")]
    BadMagic,
    #[error("snapshot format {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt snapshot: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &SeededRng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<SeededRng, SnapshotError> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| SnapshotError::Corrupt(e.to_string()))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| SnapshotError::Corrupt("rng seed is not 32 bytes".into()))?;
        let mut rng = SeededRng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(
            self.word_pos
                .parse()
                .map_err(|_| SnapshotError::Corrupt("bad rng word position".into()))?,
        );
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub c: Vec<f64>,
    pub g: Vec<f64>,
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub crate_version: String,
    pub config_hash: String,
    /// Monotone archive id (the update index at which it was taken).
    pub version: u64,
    pub env_steps: u64,
    pub agent: AgentKind,
    pub spec: NetworkSpec,
    pub n_nets: usize,
    pub obs_dim: usize,
    pub adam_steps: Vec<u64>,
    /// KL coefficient of PPO learners (evolves for the adaptive variant).
    pub beta: f64,
    pub chain: Option<ChainMeta>,
    pub rngs: Vec<RngState>,
}

/// A learner together with its observation statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub meta: SnapshotMeta,
    pub agent: Agent,
    pub normalizer: RunningNormalizer,
}

fn put(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], SnapshotError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| SnapshotError::Corrupt("truncated payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, SnapshotError> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Snapshot {
    pub fn new(
        agent: &Agent,
        kind: AgentKind,
        normalizer: &RunningNormalizer,
        config_hash: &str,
        version: u64,
        env_steps: u64,
        rngs: &[&SeededRng],
    ) -> Self {
        let (beta, chain) = match agent {
            Agent::Ppo(a) => (a.beta, None),
            Agent::Cascade(_) => (0.0, None),
            Agent::Synaptic(s) => (
                s.ppo.beta,
                Some(ChainMeta {
                    c: s.chain.c.clone(),
                    g: s.chain.g.clone(),
                    eta: s.chain.eta,
                }),
            ),
        };
        let meta = SnapshotMeta {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            version,
            env_steps,
            agent: kind,
            spec: agent.visible().spec().clone(),
            n_nets: agent.nets().len(),
            obs_dim: normalizer.dim(),
            adam_steps: agent.adam_states().iter().map(|a| a.step_count).collect(),
            beta,
            chain,
            rngs: rngs.iter().map(|r| RngState::capture(r)).collect(),
        };
        Self {
            meta,
            agent: agent.clone(),
            normalizer: normalizer.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_FORMAT.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        put(&mut out, &[self.normalizer.count]);
        put(&mut out, &self.normalizer.mean);
        put(&mut out, &self.normalizer.m2);
        for p in self.agent.nets() {
            put(&mut out, &p.values);
        }
        for a in self.agent.adam_states() {
            put(&mut out, &a.first_moment);
            put(&mut out, &a.second_moment);
        }
        if let Agent::Synaptic(s) = &self.agent {
            put(&mut out, &s.chain.u.data);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, SnapshotError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(SNAPSHOT_MAGIC.len()).ok() != Some(&SNAPSHOT_MAGIC[..]) {
            return Err(SnapshotError::BadMagic);
        }
        let format = r.u32()?;
        if format != SNAPSHOT_FORMAT {
            return Err(SnapshotError::Version {
                found: format,
                expected: SNAPSHOT_FORMAT,
            });
        }
        let meta_len = r.u32()? as usize;
        let meta: SnapshotMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| SnapshotError::Corrupt(e.to_string()))?;
        let layout = Arc::new(Layout::new(&meta.spec).map_err(|e| SnapshotError::Corrupt(e.to_string()))?);
        let d = meta.obs_dim;
        let count = r.f64s(1)?[0];
        let normalizer = RunningNormalizer {
            count,
            mean: r.f64s(d)?,
            m2: r.f64s(d)?,
        };
        if meta.adam_steps.len() != meta.n_nets || meta.n_nets == 0 {
            return Err(SnapshotError::Corrupt("network count mismatch".into()));
        }
        let mut nets = Vec::with_capacity(meta.n_nets);
        for _ in 0..meta.n_nets {
            let values = r.f64s(layout.len)?;
            nets.push(ParamVector::from_values(layout.clone(), values).expect("length checked"));
        }
        let mut adam = Vec::with_capacity(meta.n_nets);
        for &steps in &meta.adam_steps {
            let mut a = AdamState::new(&layout);
            a.first_moment = r.f64s(layout.len)?;
            a.second_moment = r.f64s(layout.len)?;
            a.step_count = steps;
            adam.push(a);
        }
        let agent = match meta.agent {
            AgentKind::Pc => Agent::Cascade(CascadeState { nets, adam }),
            kind => {
                let ppo = PpoAgent {
                    params: nets.pop().expect("one network"),
                    adam: adam.pop().expect("one optimizer"),
                    beta: meta.beta,
                };
                if kind == AgentKind::Synaptic {
                    let cm = meta
                        .chain
                        .as_ref()
                        .ok_or_else(|| SnapshotError::Corrupt("synaptic snapshot without chain".into()))?;
                    let n = cm.c.len();
                    let u = Mat::from_vec(layout.len, n, r.f64s(layout.len * n)?);
                    let chain = BeakerChain::from_parts(u, cm.c.clone(), cm.g.clone(), cm.eta)
                        .map_err(|e| SnapshotError::Corrupt(e.to_string()))?;
                    Agent::Synaptic(SynapticAgent { ppo, chain })
                } else {
                    Agent::Ppo(ppo)
                }
            }
        };
        if r.pos != buf.len() {
            return Err(SnapshotError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            meta,
            agent,
            normalizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SnapshotError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SnapshotError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
