use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mat::{gauss_kl_scalar, HALF_LN_2PI};
use super::DiffError;
use crate::SeededRng;

/// Diagonal Gaussian over actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussDist {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussDist {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Self {
        assert_eq!(mean.len(), log_std.len(), "mean/log_std length mismatch");
        Self { mean, log_std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, rng: &mut SeededRng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| {
                let z: f64 = StandardNormal.sample(rng);
                m + ls.exp() * z
            })
            .collect()
    }
}

/// Log density, summed over dimensions.
pub fn log_prob(dist: &GaussDist, action: &[f64]) -> Result<f64, DiffError> {
    if action.len() != dist.dim() {
        return Err(DiffError::Shape(format!(
            "action has {} dimensions, distribution {}",
            action.len(),
            dist.dim()
        )));
    }
    Ok(dist
        .mean
        .iter()
        .zip(&dist.log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) * (-ls).exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum())
}

/// `KL(p ‖ q)`, closed form, summed over dimensions.
pub fn kl_divergence(p: &GaussDist, q: &GaussDist) -> Result<f64, DiffError> {
    if p.dim() != q.dim() {
        return Err(DiffError::Shape(format!(
            "KL between {}-d and {}-d distributions",
            p.dim(),
            q.dim()
        )));
    }
    Ok((0..p.dim())
        .map(|i| gauss_kl_scalar(p.mean[i], p.log_std[i], q.mean[i], q.log_std[i]))
        .sum())
}

pub fn entropy(dist: &GaussDist) -> f64 {
    dist.log_std.iter().map(|ls| 0.5 + HALF_LN_2PI + ls).sum()
}
