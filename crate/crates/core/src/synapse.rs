//! Per-parameter beaker chains for synaptic consolidation.
//!
//! Each parameter is the first of `N` coupled hidden variables. Liquid flows
//! between neighbouring beakers through tubes of conductance `g_{k,k+1}`;
//! beaker `k` has width `C_k`. One Euler step with learning signal `Δw`:
//!
//! ```text
//! u₁ ← u₁ + (η/C₁)(Δw + g₁₂(u₂ − u₁))
//! u_k ← u_k + (η/C_k)(g_{k−1,k}(u_{k−1} − u_k) + g_{k,k+1}(u_{k+1} − u_k))
//! ```
//!
//! with a closed end after the last beaker. The same flow is the negative
//! gradient of the penalty `½ Σ_k g_{k,k+1} ‖U_k − U_{k+1}‖²`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnet::{DiffError, Mat, ParamVector};
use crate::ppo::{update_with_hook, PpoAgent, PpoConfig, UpdateError, UpdateMetrics};
use crate::rollout::RolloutBatch;
use crate::SeededRng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChainError {
    #[error("invalid chain: {0}")]
    Invalid(String),
    #[error("Euler step unstable: η·λ_max = {0} ≥ 2")]
    Unstable(f64),
    #[error("expected {expected} values, got {found}")]
    Length { expected: usize, found: usize },
    #[error("non-finite learning signal")]
    NonFinite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynapseConfig {
    pub n_beakers: usize,
    /// Conductance of the first tube; later tubes halve at every step.
    pub g12: f64,
    pub eta: f64,
}

impl Default for SynapseConfig {
    fn default() -> Self {
        Self {
            n_beakers: 8,
            g12: 0.01,
            eta: 1.0,
        }
    }
}

/// Widths `C_k = 2^(k−1)` and conductances `g_{k,k+1} = g₁₂·2^−(k−1)`.
pub fn default_schedules(n: usize, g12: f64) -> (Vec<f64>, Vec<f64>) {
    let c = (0..n).map(|k| 2f64.powi(k as i32)).collect();
    let g = (0..n.saturating_sub(1)).map(|k| g12 * 2f64.powi(-(k as i32))).collect();
    (c, g)
}

/// `P` parameters, each with `N` beakers. `u` is `P×N`; column 0 holds the
/// visible weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BeakerChain {
    pub u: Mat,
    pub c: Vec<f64>,
    pub g: Vec<f64>,
    pub eta: f64,
}

impl BeakerChain {
    /// A chain at equilibrium with every beaker equal to `init`.
    pub fn new(init: &[f64], cfg: &SynapseConfig) -> Result<Self, ChainError> {
        let n = cfg.n_beakers;
        let (c, g) = default_schedules(n, cfg.g12);
        let data = init.iter().flat_map(|&w| std::iter::repeat_n(w, n)).collect();
        Self::from_parts(Mat::from_vec(init.len(), n, data), c, g, cfg.eta)
    }

    /// Validates widths, conductances and step stability.
    pub fn from_parts(u: Mat, c: Vec<f64>, g: Vec<f64>, eta: f64) -> Result<Self, ChainError> {
        let n = c.len();
        if n == 0 || u.cols != n || g.len() + 1 != n {
            return Err(ChainError::Invalid(format!(
                "{} widths, {} conductances and {} columns do not describe one chain",
                n,
                g.len(),
                u.cols
            )));
        }
        if !(eta.is_finite() && eta > 0.0) {
            return Err(ChainError::Invalid(format!("eta must be positive, got {eta}")));
        }
        if c.iter().any(|&x| !(x.is_finite() && x > 0.0)) || c.windows(2).any(|w| w[1] < w[0]) {
            return Err(ChainError::Invalid("widths must be positive and non-decreasing".into()));
        }
        if g.iter().any(|&x| !(x.is_finite() && x >= 0.0)) || g.windows(2).any(|w| w[1] > w[0]) {
            return Err(ChainError::Invalid("conductances must be non-negative and non-increasing".into()));
        }
        if !u.is_finite() {
            return Err(ChainError::Invalid("non-finite beaker levels".into()));
        }
        let chain = Self { u, c, g, eta };
        let rate = chain.eta * chain.max_flow_eigenvalue();
        if rate >= 2.0 {
            return Err(ChainError::Unstable(rate));
        }
        Ok(chain)
    }

    pub fn n_params(&self) -> usize {
        self.u.rows
    }

    pub fn n_beakers(&self) -> usize {
        self.c.len()
    }

    /// Largest eigenvalue of `C^−½ L C^−½`, with `L` the weighted path
    /// Laplacian of the tubes. An Euler step is stable below `η·λ = 2`.
    pub fn max_flow_eigenvalue(&self) -> f64 {
        let n = self.n_beakers();
        let mut l = DMatrix::<f64>::zeros(n, n);
        for (k, &gk) in self.g.iter().enumerate() {
            l[(k, k)] += gk;
            l[(k + 1, k + 1)] += gk;
            l[(k, k + 1)] -= gk;
            l[(k + 1, k)] -= gk;
        }
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(n, self.c.iter().map(|c| c.powf(-0.5))));
        let m = &s * l * &s;
        SymmetricEigen::new(m).eigenvalues.iter().copied().fold(0.0, f64::max)
    }

    /// Visible weights (column 0).
    pub fn visible(&self) -> Vec<f64> {
        (0..self.n_params()).map(|p| self.u.get(p, 0)).collect()
    }

    /// One simultaneous Euler step driven by `delta_w`.
    pub fn beaker_step(&mut self, delta_w: &[f64]) -> Result<(), ChainError> {
        let (p_len, n) = (self.n_params(), self.n_beakers());
        if delta_w.len() != p_len {
            return Err(ChainError::Length {
                expected: p_len,
                found: delta_w.len(),
            });
        }
        if delta_w.iter().any(|d| !d.is_finite()) {
            return Err(ChainError::NonFinite);
        }
        for (p, &dw) in delta_w.iter().enumerate() {
            let row = self.u.row_mut(p);
            let prev = row.to_vec();
            for k in 0..n {
                let mut flow = if k == 0 { dw } else { self.g[k - 1] * (prev[k - 1] - prev[k]) };
                if k + 1 < n {
                    flow += self.g[k] * (prev[k + 1] - prev[k]);
                }
                row[k] = prev[k] + self.eta / self.c[k] * flow;
            }
        }
        Ok(())
    }

    /// `½ Σ_k g_{k,k+1} ‖U_k − U_{k+1}‖²`.
    pub fn penalty(&self) -> f64 {
        let mut total = 0.0;
        for p in 0..self.n_params() {
            let row = self.u.row(p);
            for (k, &gk) in self.g.iter().enumerate() {
                total += 0.5 * gk * (row[k] - row[k + 1]).powi(2);
            }
        }
        total
    }

    /// Negative gradient of [`penalty`](Self::penalty) with respect to every
    /// beaker, accumulated tube by tube.
    pub fn consolidation_grad(&self) -> Mat {
        let mut out = Mat::zeros(self.n_params(), self.n_beakers());
        for p in 0..self.n_params() {
            let row = self.u.row(p).to_vec();
            let o = out.row_mut(p);
            for (k, &gk) in self.g.iter().enumerate() {
                let f = gk * (row[k + 1] - row[k]);
                o[k] += f;
                o[k + 1] -= f;
            }
        }
        out
    }

    /// Liquid volume `Σ_k C_k·u_k` of every parameter.
    pub fn volumes(&self) -> Vec<f64> {
        (0..self.n_params())
            .map(|p| self.u.row(p).iter().zip(&self.c).map(|(u, c)| u * c).sum())
            .collect()
    }

    /// Treats `raw_update` as a step on the visible weights: injects
    /// `Δw = raw_update·C₁/η`, steps the chain and returns the new visible
    /// weights.
    pub fn wrap_optimizer(&mut self, raw_update: &[f64]) -> Result<Vec<f64>, ChainError> {
        let scale = self.c[0] / self.eta;
        let dw: Vec<f64> = raw_update.iter().map(|r| r * scale).collect();
        self.beaker_step(&dw)?;
        Ok(self.visible())
    }
}

/// Clipped-PPO learner whose parameters live in beaker chains.
#[derive(Clone, Debug, PartialEq)]
pub struct SynapticAgent {
    pub ppo: PpoAgent,
    pub chain: BeakerChain,
}

impl SynapticAgent {
    pub fn new(params: ParamVector, ppo: &PpoConfig, cfg: &SynapseConfig) -> Result<Self, ChainError> {
        let chain = BeakerChain::new(&params.values, cfg)?;
        Ok(Self {
            ppo: PpoAgent::new(params, ppo),
            chain,
        })
    }

    /// PPO update in which every optimizer step is routed through the chain.
    pub fn update(
        &mut self,
        batch: &RolloutBatch,
        cfg: &PpoConfig,
        rng: &mut SeededRng,
    ) -> Result<UpdateMetrics, UpdateError> {
        let backup = self.chain.clone();
        let chain = &mut self.chain;
        let mut hook = |before: &ParamVector, after: &mut ParamVector| {
            let raw: Vec<f64> = after.values.iter().zip(&before.values).map(|(a, b)| a - b).collect();
            let visible = chain
                .wrap_optimizer(&raw)
                .map_err(|e| DiffError::NonFinite { term: e.to_string() })?;
            after.values = visible;
            Ok(())
        };
        let result = update_with_hook(&mut self.ppo, batch, cfg, rng, &mut hook);
        if result.is_err() {
            self.chain = backup;
        }
        result
    }
}
