//! On-policy experience collection, observation normalization, advantage
//! estimation and minibatching.

mod collect;
mod gae;
mod normalizer;

pub use collect::{act, collect_parallel, Collector, EpisodeRecord};
pub use gae::{compute_gae, fill_gae_raw, gae_advantages, standardize_advantages};
pub use normalizer::RunningNormalizer;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::diffnet::{DiffError, Mat};
use crate::envs::EnvError;
use crate::SeededRng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RolloutError {
    #[error("environment failed at step {step}: {source}")]
    Env { step: usize, source: EnvError },
    #[error("policy evaluation failed at step {step}: {source}")]
    Policy { step: usize, source: DiffError },
    #[error("horizon {horizon} is not divisible into {n_minibatches} minibatches")]
    Indivisible { horizon: usize, n_minibatches: usize },
    #[error("horizon must be at least 1")]
    EmptyHorizon,
}

/// One horizon of experience. `obs` rows are normalized observations.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub obs: Mat,
    pub actions: Mat,
    pub logp_old: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub bootstrap_value: f64,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Stacks per-worker batches whose advantages and returns are already
    /// filled. The result keeps the last worker's bootstrap value.
    pub fn concat(parts: &[RolloutBatch]) -> RolloutBatch {
        assert!(!parts.is_empty(), "nothing to concatenate");
        let cat_mat = |f: fn(&RolloutBatch) -> &Mat| {
            let cols = f(&parts[0]).cols;
            let data: Vec<f64> = parts.iter().flat_map(|p| f(p).data.iter().copied()).collect();
            Mat::from_vec(data.len() / cols.max(1), cols, data)
        };
        let cat = |f: fn(&RolloutBatch) -> &Vec<f64>| parts.iter().flat_map(|p| f(p).iter().copied()).collect();
        RolloutBatch {
            obs: cat_mat(|p| &p.obs),
            actions: cat_mat(|p| &p.actions),
            logp_old: cat(|p| &p.logp_old),
            rewards: cat(|p| &p.rewards),
            values: cat(|p| &p.values),
            dones: parts.iter().flat_map(|p| p.dones.iter().copied()).collect(),
            advantages: cat(|p| &p.advantages),
            returns: cat(|p| &p.returns),
            bootstrap_value: parts[parts.len() - 1].bootstrap_value,
        }
    }
}

/// Splits a fresh seeded permutation of `0..len` into `n` equal chunks.
pub fn minibatches(len: usize, n: usize, rng: &mut SeededRng) -> Result<Vec<Vec<usize>>, RolloutError> {
    if n == 0 || !len.is_multiple_of(n) {
        return Err(RolloutError::Indivisible {
            horizon: len,
            n_minibatches: n,
        });
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    Ok(idx.chunks(len / n).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn minibatches_partition_the_range() {
        let mut rng = SeededRng::seed_from_u64(2);
        let mb = minibatches(8, 4, &mut rng).unwrap();
        assert_eq!(mb.len(), 4);
        let mut all: Vec<usize> = mb.iter().flatten().copied().collect();
        assert!(mb.iter().all(|m| m.len() == 2));
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        let again = minibatches(8, 4, &mut SeededRng::seed_from_u64(2)).unwrap();
        assert_eq!(mb, again);
    }

    #[test]
    fn indivisible_minibatches_rejected() {
        let mut rng = SeededRng::seed_from_u64(2);
        assert!(matches!(minibatches(10, 4, &mut rng), Err(RolloutError::Indivisible { .. })));
        assert!(minibatches(10, 0, &mut rng).is_err());
    }
}
