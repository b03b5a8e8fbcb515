mod common;

use common::{normal, rng};
use polcon::cascade::{ablation_grid, CascadeConfig};
use polcon::diffnet::{kl_divergence, GaussDist, Mat};
use polcon::harness::{evaluate_policy, run, ExperimentConfig, Protocol, Snapshot};
use polcon::rollout::{gae_advantages, minibatches, RunningNormalizer};
use polcon::synapse::{default_schedules, BeakerChain};
use proptest::prelude::*;
use rand::Rng;

/// Advantages as the explicit truncated sum `Σ_l (γλ)^l δ_{t+l}`, cut at the
/// first episode end at or after `t`.
fn gae_double_sum(r: &[f64], v: &[f64], d: &[bool], boot: f64, gamma: f64, lam: f64) -> Vec<f64> {
    let n = r.len();
    let value_after = |t: usize| if d[t] { 0.0 } else if t + 1 < n { v[t + 1] } else { boot };
    let delta: Vec<f64> = (0..n).map(|t| r[t] + gamma * value_after(t) - v[t]).collect();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            for l in 0..n - t {
                sum += (gamma * lam).powi(l as i32) * delta[t + l];
                if d[t + l] {
                    break;
                }
            }
            sum
        })
        .collect()
}

#[test]
fn gae_matches_double_sum() {
    let mut g = rng(11);
    for case in 0..50 {
        let n = g.random_range(1..40);
        let r: Vec<f64> = (0..n).map(|_| normal(&mut g)).collect();
        let v: Vec<f64> = (0..n).map(|_| normal(&mut g)).collect();
        let d: Vec<bool> = (0..n).map(|_| g.random_bool(0.15)).collect();
        let boot = normal(&mut g);
        let (gamma, lam) = (g.random_range(0.5..1.0), g.random_range(0.0..=1.0));
        let fast = gae_advantages(&r, &v, &d, boot, gamma, lam);
        let slow = gae_double_sum(&r, &v, &d, boot, gamma, lam);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12, "case {case}: {a} vs {b}");
        }
    }
}

/// Numerical `∫ p log(p/q)` for 1-D Gaussians with composite Simpson.
fn kl_quadrature(mp: f64, sp: f64, mq: f64, sq: f64) -> f64 {
    let pdf = |x: f64, m: f64, s: f64| (-(x - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
    let log_ratio = |x: f64| {
        let lp = -(x - mp).powi(2) / (2.0 * sp * sp) - sp.ln();
        let lq = -(x - mq).powi(2) / (2.0 * sq * sq) - sq.ln();
        lp - lq
    };
    let (a, b) = (mp - 14.0 * sp, mp + 14.0 * sp);
    let n = 40_000;
    let h = (b - a) / n as f64;
    let f = |x: f64| pdf(x, mp, sp) * log_ratio(x);
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn kl_closed_form_against_quadrature_multi_dim() {
    // Diagonal KL is the sum of per-dimension terms.
    let mut g = rng(5);
    for _ in 0..10 {
        let mp: Vec<f64> = (0..3).map(|_| normal(&mut g)).collect();
        let mq: Vec<f64> = (0..3).map(|_| normal(&mut g)).collect();
        let lp: Vec<f64> = (0..3).map(|_| g.random_range(-1.0..0.5)).collect();
        let lq: Vec<f64> = (0..3).map(|_| g.random_range(-1.0..0.5)).collect();
        let closed = kl_divergence(&GaussDist::new(mp.clone(), lp.clone()), &GaussDist::new(mq.clone(), lq.clone())).unwrap();
        let quad: f64 = (0..3).map(|i| kl_quadrature(mp[i], lp[i].exp(), mq[i], lq[i].exp())).sum();
        assert!((closed - quad).abs() < 1e-6, "{closed} vs {quad}");
    }
}

#[test]
fn ablation_grid_keeps_deepest_constraint() {
    let base = CascadeConfig::default();
    let deepest = base.beta * base.omega.powi(base.n_policies as i32 - 1);
    let grid = ablation_grid(&base);
    assert_eq!(grid.len(), 5);
    assert_eq!(grid[0], base);
    for cfg in &grid[1..3] {
        // Independent solve of ω'^(n−1) = ω^(N−1) by bisection.
        let target = deepest / base.beta;
        let (mut lo, mut hi) = (1.0f64, 1e9f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid.powi(cfg.n_policies as i32 - 1) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((cfg.omega - lo).abs() / lo < 1e-12, "{} vs {lo}", cfg.omega);
        let kept = cfg.beta_k(cfg.n_policies).unwrap();
        assert!((kept - deepest).abs() / deepest < 1e-12);
    }
    assert_eq!((grid[1].n_policies, grid[2].n_policies), (4, 2));
    assert_eq!((grid[3].n_policies, grid[3].omega), (8, 2.0));
    assert_eq!((grid[4].n_policies, grid[4].omega), (8, 2f64.sqrt()));
}

#[test]
fn snapshot_reload_reproduces_evaluation() {
    let mut cfg = ExperimentConfig::defaults(Protocol::Single);
    cfg.agent = polcon::harness::AgentKind::Pc;
    cfg.horizon = 128;
    cfg.total_steps = 128 * 4;
    cfg.hidden = vec![8];
    cfg.cascade.n_policies = 3;
    cfg.ppo.n_minibatches = 4;
    cfg.ppo.epochs = 2;
    let dir = tempfile::tempdir().unwrap();
    let out = run(&cfg, Some(dir.path())).unwrap();
    let loaded = Snapshot::load(&dir.path().join("final.snap")).unwrap();
    let a = evaluate_policy(out.final_snapshot.agent.visible(), &out.final_snapshot.normalizer, "pointgoal-a", 3, 4).unwrap();
    let b = evaluate_policy(loaded.agent.visible(), &loaded.normalizer, "pointgoal-a", 3, 4).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn task_variants_share_interfaces() {
    use polcon::envs::{make_env, SINGLE_AGENT_ENVS};
    let dims: Vec<(usize, usize)> = SINGLE_AGENT_ENVS
        .iter()
        .map(|n| {
            let e = make_env(n).unwrap();
            (e.obs_dim(), e.act_dim())
        })
        .collect();
    assert!(dims.windows(2).all(|w| w[0] == w[1]));
}

proptest! {
    #[test]
    fn normalizer_merge_equals_sequential(
        xs in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 2), 1..40),
        split in 0usize..40,
    ) {
        let split = split.min(xs.len());
        let mut all = RunningNormalizer::new(2);
        xs.iter().for_each(|x| all.push(x));
        let (mut a, mut b) = (RunningNormalizer::new(2), RunningNormalizer::new(2));
        xs[..split].iter().for_each(|x| a.push(x));
        xs[split..].iter().for_each(|x| b.push(x));
        a.merge(&b);
        prop_assert_eq!(a.count, all.count);
        for i in 0..2 {
            prop_assert!((a.mean[i] - all.mean[i]).abs() < 1e-9);
            prop_assert!((a.m2[i] - all.m2[i]).abs() < 1e-6 * (1.0 + all.m2[i]));
        }
    }

    #[test]
    fn minibatches_partition_rows(per in 1usize..20, n in 1usize..10, seed in any::<u64>()) {
        let len = per * n;
        let mbs = minibatches(len, n, &mut rng(seed)).unwrap();
        prop_assert_eq!(mbs.len(), n);
        let mut seen: Vec<usize> = mbs.concat();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..len).collect::<Vec<_>>());
        prop_assert!(mbs.iter().all(|m| m.len() == per));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(
        m in prop::collection::vec(-5.0f64..5.0, 4),
        s in prop::collection::vec(-2.0f64..2.0, 4),
        dm in prop::collection::vec(-5.0f64..5.0, 4),
        ds in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let p = GaussDist::new(m[..2].to_vec(), s[..2].to_vec());
        let q = GaussDist::new(dm[..2].to_vec(), ds[..2].to_vec());
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn chain_volume_grows_by_injected_liquid(
        n in 2usize..7,
        p in 1usize..8,
        seed in any::<u64>(),
    ) {
        let mut g = rng(seed);
        let (c, gs) = default_schedules(n, 0.05);
        let u = Mat::from_vec(p, n, (0..p * n).map(|_| normal(&mut g)).collect());
        let mut chain = BeakerChain::from_parts(u, c, gs, 1.0).unwrap();
        let dw: Vec<f64> = (0..p).map(|_| normal(&mut g)).collect();
        let before = chain.volumes();
        chain.beaker_step(&dw).unwrap();
        for ((b, a), d) in before.iter().zip(chain.volumes()).zip(&dw) {
            prop_assert!((a - (b + d)).abs() < 1e-10);
        }
    }
}
