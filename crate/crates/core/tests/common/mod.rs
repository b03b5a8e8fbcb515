#![allow(dead_code)]

use polcon::diffnet::{forward_batch, init_network, log_prob, Mat, NetworkSpec, ParamVector};
use polcon::rollout::RolloutBatch;
use polcon::SeededRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

pub fn normal(rng: &mut SeededRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn small_spec() -> NetworkSpec {
    NetworkSpec::new(3, 2).with_hidden(vec![5])
}

/// A network with every parameter drawn from N(0, 0.5²), so that biases
/// and the log-std are non-trivial too.
pub fn random_net(spec: &NetworkSpec, rng: &mut SeededRng) -> ParamVector {
    let mut p = init_network(spec, rng.random()).unwrap();
    for v in &mut p.values {
        *v = 0.5 * normal(rng);
    }
    p
}

/// A prepared batch whose stored log-probabilities sit up to ±0.5 nats
/// away from those of `params`, so importance ratios are spread out.
pub fn random_batch(params: &ParamVector, n: usize, rng: &mut SeededRng) -> RolloutBatch {
    let spec = params.spec();
    let obs = Mat::from_vec(n, spec.obs_dim, (0..n * spec.obs_dim).map(|_| normal(rng)).collect());
    let actions = Mat::from_vec(n, spec.act_dim, (0..n * spec.act_dim).map(|_| normal(rng)).collect());
    let out = forward_batch(params, &obs).unwrap();
    let logp_old = (0..n)
        .map(|i| log_prob(&out.dist(i), actions.row(i)).unwrap() + rng.random_range(-0.5..0.5))
        .collect();
    let rand_vec = |rng: &mut SeededRng| (0..n).map(|_| normal(rng)).collect::<Vec<f64>>();
    RolloutBatch {
        obs,
        actions,
        logp_old,
        rewards: rand_vec(rng),
        values: rand_vec(rng),
        dones: vec![false; n],
        advantages: rand_vec(rng),
        returns: rand_vec(rng),
        bootstrap_value: 0.0,
    }
}

/// Central finite differences of `f` at every coordinate of the given
/// parameter vectors, in order.
pub fn central_differences(
    nets: &[ParamVector],
    h: f64,
    f: impl Fn(&[ParamVector]) -> f64,
) -> Vec<Vec<f64>> {
    let mut work = nets.to_vec();
    let mut out = Vec::new();
    for n in 0..nets.len() {
        let mut g = Vec::with_capacity(nets[n].values.len());
        for i in 0..nets[n].values.len() {
            let x = nets[n].values[i];
            work[n].values[i] = x + h;
            let up = f(&work);
            work[n].values[i] = x - h;
            let down = f(&work);
            work[n].values[i] = x;
            g.push((up - down) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// `|a − b| / max(|a|, |b|, 1e-6)`; the floor keeps coordinates whose true
/// gradient is zero from dividing rounding noise by zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn max_rel_err(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.iter().zip(n).map(|(x, y)| rel_err(*x, *y)))
        .fold(0.0, f64::max)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation: Pearson correlation of the average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
