use serde::{Deserialize, Serialize};

const VAR_EPS: f64 = 1e-8;
const CLIP: f64 = 10.0;

/// Running per-dimension mean and variance of observations (Welford).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningNormalizer {
    pub count: f64,
    pub mean: Vec<f64>,
    /// Sum of squared deviations; `var = m2 / count`.
    pub m2: Vec<f64>,
}

impl RunningNormalizer {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn var(&self) -> Vec<f64> {
        if self.count == 0.0 {
            return vec![0.0; self.dim()];
        }
        self.m2.iter().map(|m| m / self.count).collect()
    }

    pub fn push(&mut self, obs: &[f64]) {
        assert_eq!(obs.len(), self.dim(), "observation width mismatch");
        self.count += 1.0;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(obs) {
            let delta = x - *m;
            *m += delta / self.count;
            *s += delta * (x - *m);
        }
    }

    /// Folds the statistics of a disjoint stream into `self`.
    pub fn merge(&mut self, other: &RunningNormalizer) {
        assert_eq!(other.dim(), self.dim(), "normalizer width mismatch");
        if other.count == 0.0 {
            return;
        }
        if self.count == 0.0 {
            *self = other.clone();
            return;
        }
        let n = self.count + other.count;
        for i in 0..self.dim() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * other.count / n;
            self.m2[i] += other.m2[i] + delta * delta * self.count * other.count / n;
        }
        self.count = n;
    }

    /// Normalizes without touching the statistics.
    pub fn apply(&self, obs: &[f64]) -> Vec<f64> {
        assert_eq!(obs.len(), self.dim(), "observation width mismatch");
        obs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let var = if self.count > 0.0 { self.m2[i] / self.count } else { 0.0 };
                ((x - self.mean[i]) / (var + VAR_EPS).sqrt()).clamp(-CLIP, CLIP)
            })
            .collect()
    }

    /// `(obs − mean)/√(var + 1e-8)` clipped to ±10. With `update` the sample
    /// is folded into the statistics first.
    pub fn normalize(&mut self, obs: &[f64], update: bool) -> Vec<f64> {
        if update {
            self.push(obs);
        }
        self.apply(obs)
    }
}
