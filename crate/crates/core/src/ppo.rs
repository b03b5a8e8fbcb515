//! Proximal policy optimization baselines: clipped, fixed-KL and adaptive-KL.
//!
//! The per-minibatch objective pieces (surrogate, KL penalty, value loss) are
//! built on the autodiff tape by helpers that the cascade updater reuses, so
//! the visible policy of a decoupled cascade follows exactly the same
//! arithmetic as a fixed-KL learner.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnet::{
    adam_update, clip_grad_norm_in_place, forward_graph, forward_policy, gauss_kl_forward, grad, AdamState,
    DiffError, GradVector, Graph, Mat, NetOutputs, NetVars, ParamVector, Var,
};
use crate::rollout::{minibatches, RolloutBatch, RolloutError};
use crate::SeededRng;

/// Per-network gradient norm limit.
pub const MAX_GRAD_NORM: f64 = 0.5;
/// Log-ratio bound guarding `exp` against overflow.
pub const LOGP_DIFF_CLAMP: f64 = 20.0;
pub const BETA_MIN: f64 = 1e-4;
pub const BETA_MAX: f64 = 1e4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpoVariant {
    #[default]
    Clipped,
    FixedKl,
    AdaptiveKl,
}

/// `Reverse` penalizes `KL(new ‖ old)`, `Forward` penalizes `KL(old ‖ new)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    Forward,
    #[default]
    Reverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub variant: PpoVariant,
    pub clip_eps: f64,
    pub beta: f64,
    pub kl_direction: KlDirection,
    pub d_targ: f64,
    pub vf_coeff: f64,
    pub entropy_coeff: f64,
    pub epochs: usize,
    pub n_minibatches: usize,
    pub stepsize: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            variant: PpoVariant::Clipped,
            clip_eps: 0.2,
            beta: 0.5,
            kl_direction: KlDirection::Reverse,
            d_targ: 0.01,
            vf_coeff: 0.5,
            entropy_coeff: 0.0,
            epochs: 10,
            n_minibatches: 64,
            stepsize: 3e-4,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        let reals = [
            ("clip_eps", self.clip_eps),
            ("beta", self.beta),
            ("d_targ", self.d_targ),
            ("vf_coeff", self.vf_coeff),
            ("entropy_coeff", self.entropy_coeff),
            ("stepsize", self.stepsize),
        ];
        for (name, v) in reals {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("ppo.{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.variant == PpoVariant::AdaptiveKl && self.beta == 0.0 {
            return Err("ppo.beta must be positive for adaptive_kl".into());
        }
        if self.epochs == 0 || self.n_minibatches == 0 {
            return Err("ppo.epochs and ppo.n_minibatches must be at least 1".into());
        }
        Ok(())
    }

    /// KL weight in the loss for the configured variant.
    pub fn penalty_beta(&self, adaptive_beta: f64) -> f64 {
        match self.variant {
            PpoVariant::Clipped => 0.0,
            PpoVariant::FixedKl => self.beta,
            PpoVariant::AdaptiveKl => adaptive_beta,
        }
    }
}

/// Averages over one update. `kl_depth[k]` is the mean self-KL of network
/// `k` to its pre-update snapshot; `kl_adjacent[k]` the mean KL between
/// networks `k` and `k + 1` after the update (cascade only).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateMetrics {
    pub pg_loss: f64,
    pub vf_loss: f64,
    pub entropy: f64,
    pub kl_self_mean: f64,
    pub beta: f64,
    pub clamp_count: u64,
    pub kl_depth: Vec<f64>,
    pub kl_adjacent: Vec<f64>,
}

impl UpdateMetrics {
    pub fn is_finite(&self) -> bool {
        [self.pg_loss, self.vf_loss, self.entropy, self.kl_self_mean, self.beta]
            .iter()
            .chain(&self.kl_depth)
            .chain(&self.kl_adjacent)
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UpdateError {
    #[error("numeric failure: {0}")]
    Numeric(#[from] DiffError),
    #[error(transparent)]
    Batch(#[from] RolloutError),
    #[error("batch is missing advantages or returns")]
    NotPrepared,
}

/// Per-state action distributions frozen at the start of an update.
/// The log-std is state-independent, so one row serves every state.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenDists {
    pub mean: Mat,
    pub log_std: Mat,
}

impl FrozenDists {
    pub fn of(params: &ParamVector, obs: &Mat) -> Result<Self, DiffError> {
        let (mean, log_std) = forward_policy(params, obs)?;
        Ok(Self { mean, log_std })
    }

    pub(crate) fn bind(&self, g: &mut Graph, idx: &[usize]) -> (Var, Var) {
        (g.constant(self.mean.select_rows(idx)), g.constant(self.log_std.clone()))
    }

    /// Mean over all states of the KL between `params` and these dists.
    pub fn mean_kl_from(&self, params: &ParamVector, obs: &Mat, dir: KlDirection) -> Result<f64, DiffError> {
        let (mean, log_std) = forward_policy(params, obs)?;
        Ok(mean_kl(&mean, &log_std, &self.mean, &self.log_std, dir))
    }
}

/// Mean over rows of the KL between `(m_new, ls_new)` and `(m_old, ls_old)`.
pub fn mean_kl(m_new: &Mat, ls_new: &Mat, m_old: &Mat, ls_old: &Mat, dir: KlDirection) -> f64 {
    let kl = match dir {
        KlDirection::Reverse => gauss_kl_forward(m_new, ls_new, m_old, ls_old),
        KlDirection::Forward => gauss_kl_forward(m_old, ls_old, m_new, ls_new),
    };
    kl.data.iter().sum::<f64>() / kl.data.len() as f64
}

/// Tape constants for one minibatch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SliceVars {
    pub obs: Var,
    pub actions: Var,
    pub logp_old: Var,
    pub adv: Var,
    pub returns: Var,
}

pub(crate) fn slice_vars(g: &mut Graph, batch: &RolloutBatch, idx: &[usize]) -> SliceVars {
    let col = |v: &[f64]| Mat::column(&idx.iter().map(|&i| v[i]).collect::<Vec<_>>());
    SliceVars {
        obs: g.constant(batch.obs.select_rows(idx)),
        actions: g.constant(batch.actions.select_rows(idx)),
        logp_old: g.constant(col(&batch.logp_old)),
        adv: g.constant(col(&batch.advantages)),
        returns: g.constant(col(&batch.returns)),
    }
}

/// Mean KL on the tape between live outputs and frozen dists.
pub(crate) fn kl_mean_graph(
    g: &mut Graph,
    live: (Var, Var),
    frozen: (Var, Var),
    dir: KlDirection,
) -> Var {
    let kl = match dir {
        KlDirection::Reverse => g.gauss_kl(live.0, live.1, frozen.0, frozen.1),
        KlDirection::Forward => g.gauss_kl(frozen.0, frozen.1, live.0, live.1),
    };
    g.mean(kl)
}

/// Surrogate form used for the policy-gradient term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Surrogate {
    Ratio,
    Clipped(f64),
}

/// Loss terms of the visible (action-selecting) policy in the order they
/// are summed: `−surrogate`, `β·KL_self`, `vf·value_loss`, `−ent·entropy`.
/// Terms with zero weight are not built.
pub(crate) struct VisibleTerms {
    pub terms: Vec<Var>,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clamp_count: u64,
    pub outputs: NetOutputs,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn visible_terms(
    g: &mut Graph,
    vars: &NetVars,
    s: &SliceVars,
    frozen: (Var, Var),
    surrogate: Surrogate,
    beta: f64,
    dir: KlDirection,
    vf_coeff: f64,
    entropy_coeff: f64,
) -> VisibleTerms {
    let out = forward_graph(g, vars, s.obs, true);
    let logp = g.gauss_log_prob(out.mean, out.log_std, s.actions);
    let diff = g.sub(logp, s.logp_old);
    let clamp_count = g
        .value(diff)
        .data
        .iter()
        .filter(|d| d.abs() > LOGP_DIFF_CLAMP)
        .count() as u64;
    let diff = g.clamp(diff, -LOGP_DIFF_CLAMP, LOGP_DIFF_CLAMP);
    let ratio = g.exp(diff);
    let weighted = g.mul(ratio, s.adv);
    let per_state = match surrogate {
        Surrogate::Ratio => weighted,
        Surrogate::Clipped(eps) => {
            let clipped_ratio = g.clamp(ratio, 1.0 - eps, 1.0 + eps);
            let clipped = g.mul(clipped_ratio, s.adv);
            g.min(weighted, clipped)
        }
    };
    let surr = g.mean(per_state);
    let surr = g.term("surrogate", surr);
    let mut terms = vec![g.neg(surr)];
    if beta != 0.0 {
        let kl = kl_mean_graph(g, (out.mean, out.log_std), frozen, dir);
        let kl = g.term("self KL", kl);
        terms.push(g.scale(kl, beta));
    }
    let value = out.value.expect("visible network has a value head");
    let err = g.sub(value, s.returns);
    let sq = g.square(err);
    let vl = g.mean(sq);
    let vl = g.term("value loss", vl);
    if vf_coeff != 0.0 {
        terms.push(g.scale(vl, vf_coeff));
    }
    let h = g.gauss_entropy(out.log_std);
    let h = g.mean(h);
    if entropy_coeff != 0.0 {
        terms.push(g.scale(h, -entropy_coeff));
    }
    VisibleTerms {
        terms,
        surrogate: g.value(surr).item(),
        value_loss: g.value(vl).item(),
        entropy: g.value(h).item(),
        clamp_count,
        outputs: out,
    }
}

fn eval_visible(
    params: &ParamVector,
    batch: &RolloutBatch,
    idx: &[usize],
    surrogate: Surrogate,
) -> Result<VisibleTerms, DiffError> {
    let mut g = Graph::new();
    let vars = crate::diffnet::bind(&mut g, 0, params);
    let s = slice_vars(&mut g, batch, idx);
    let frozen = (g.constant(Mat::zeros(1, params.spec().act_dim)), g.constant(Mat::zeros(1, params.spec().act_dim)));
    Ok(visible_terms(&mut g, &vars, &s, frozen, surrogate, 0.0, KlDirection::Reverse, 0.0, 0.0))
}

/// `mean_t exp(logp_new − logp_old)·Â_t` over the rows `idx`.
pub fn pg_term(params: &ParamVector, batch: &RolloutBatch, idx: &[usize]) -> Result<f64, DiffError> {
    Ok(eval_visible(params, batch, idx, Surrogate::Ratio)?.surrogate)
}

/// `mean_t min(ρÂ, clip(ρ, 1−ε, 1+ε)Â)`.
pub fn clipped_surrogate(params: &ParamVector, batch: &RolloutBatch, idx: &[usize], eps: f64) -> Result<f64, DiffError> {
    Ok(eval_visible(params, batch, idx, Surrogate::Clipped(eps))?.surrogate)
}

/// `pg_term − β·mean KL` against frozen dists.
pub fn fixed_kl_objective(
    params: &ParamVector,
    batch: &RolloutBatch,
    idx: &[usize],
    old: &FrozenDists,
    beta: f64,
    dir: KlDirection,
) -> Result<f64, DiffError> {
    let pg = pg_term(params, batch, idx)?;
    let (mean, log_std) = forward_policy(params, &batch.obs.select_rows(idx))?;
    let kl = mean_kl(&mean, &log_std, &old.mean.select_rows(idx), &old.log_std, dir);
    Ok(pg - beta * kl)
}

/// Mean squared error between predicted values and returns.
pub fn value_loss(params: &ParamVector, batch: &RolloutBatch, idx: &[usize]) -> Result<f64, DiffError> {
    Ok(eval_visible(params, batch, idx, Surrogate::Ratio)?.value_loss)
}

/// Multiplicative KL-coefficient rule, clamped to `[1e-4, 1e4]`.
pub fn adaptive_beta(beta: f64, measured_kl: f64, d_targ: f64) -> f64 {
    let b = if measured_kl > 1.5 * d_targ {
        beta * 2.0
    } else if measured_kl < d_targ / 1.5 {
        beta / 2.0
    } else {
        beta
    };
    b.clamp(BETA_MIN, BETA_MAX)
}

/// A single-network PPO learner.
#[derive(Clone, Debug, PartialEq)]
pub struct PpoAgent {
    pub params: ParamVector,
    pub adam: AdamState,
    /// Current KL coefficient (only evolves for the adaptive variant).
    pub beta: f64,
}

impl PpoAgent {
    pub fn new(params: ParamVector, cfg: &PpoConfig) -> Self {
        let adam = AdamState::new(&params.layout);
        Self {
            params,
            adam,
            beta: cfg.beta,
        }
    }
}

pub(crate) fn check_prepared(batch: &RolloutBatch) -> Result<(), UpdateError> {
    if batch.advantages.len() != batch.len() || batch.returns.len() != batch.len() || batch.is_empty() {
        return Err(UpdateError::NotPrepared);
    }
    Ok(())
}

/// Runs `epochs × n_minibatches` gradient steps. On any failure the agent
/// is restored to its state at entry.
pub fn update(
    agent: &mut PpoAgent,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut SeededRng,
) -> Result<UpdateMetrics, UpdateError> {
    update_with_hook(agent, batch, cfg, rng, &mut |_, _| Ok(()))
}

/// Parameter post-processing applied after every optimizer step; receives
/// the parameters before the step and the stepped parameters.
pub(crate) type StepHook<'a> = dyn FnMut(&ParamVector, &mut ParamVector) -> Result<(), DiffError> + 'a;

pub(crate) fn update_with_hook(
    agent: &mut PpoAgent,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut SeededRng,
    hook: &mut StepHook<'_>,
) -> Result<UpdateMetrics, UpdateError> {
    check_prepared(batch)?;
    let backup = agent.clone();
    let result = update_inner(agent, batch, cfg, rng, hook);
    if result.is_err() {
        *agent = backup;
    }
    result
}

type MinibatchStats = (f64, f64, f64, u64);

fn minibatch_loss_grad(
    params: &ParamVector,
    batch: &RolloutBatch,
    idx: &[usize],
    old: &FrozenDists,
    cfg: &PpoConfig,
    beta: f64,
) -> Result<(f64, GradVector, MinibatchStats), DiffError> {
    let surrogate = match cfg.variant {
        PpoVariant::Clipped => Surrogate::Clipped(cfg.clip_eps),
        _ => Surrogate::Ratio,
    };
    let mut stats = None;
    let (loss, grads) = grad(params, |g, vars| {
        let s = slice_vars(g, batch, idx);
        let frozen = old.bind(g, idx);
        let vt = visible_terms(
            g,
            vars,
            &s,
            frozen,
            surrogate,
            beta,
            cfg.kl_direction,
            cfg.vf_coeff,
            cfg.entropy_coeff,
        );
        let loss = g.sum(&vt.terms);
        stats = Some((vt.surrogate, vt.value_loss, vt.entropy, vt.clamp_count));
        Ok(loss)
    })?;
    Ok((loss, grads, stats.expect("loss was built")))
}

/// Descent loss of one minibatch and its gradient, as used by [`update`]:
/// the negated surrogate (clipped for the clipped variant), `beta` times the
/// mean KL to `old`, the weighted value loss and the entropy bonus.
pub fn ppo_loss_grad(
    params: &ParamVector,
    batch: &RolloutBatch,
    idx: &[usize],
    old: &FrozenDists,
    cfg: &PpoConfig,
    beta: f64,
) -> Result<(f64, GradVector), DiffError> {
    let (loss, grads, _) = minibatch_loss_grad(params, batch, idx, old, cfg, beta)?;
    Ok((loss, grads))
}

fn update_inner(
    agent: &mut PpoAgent,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut SeededRng,
    hook: &mut StepHook<'_>,
) -> Result<UpdateMetrics, UpdateError> {
    let old = FrozenDists::of(&agent.params, &batch.obs)?;
    let beta = cfg.penalty_beta(agent.beta);
    let mut m = UpdateMetrics::default();
    let mut steps = 0.0;
    for _ in 0..cfg.epochs {
        for idx in minibatches(batch.len(), cfg.n_minibatches, rng)? {
            let (_, mut grads, (surr, vl, ent, clamps)) =
                minibatch_loss_grad(&agent.params, batch, &idx, &old, cfg, beta)?;
            m.pg_loss -= surr;
            m.vf_loss += vl;
            m.entropy += ent;
            m.clamp_count += clamps;
            steps += 1.0;
            clip_grad_norm_in_place(&mut grads, MAX_GRAD_NORM);
            let before = agent.params.clone();
            adam_update(&mut agent.params, &grads, &mut agent.adam, cfg.stepsize)?;
            hook(&before, &mut agent.params)?;
        }
    }
    m.pg_loss /= steps;
    m.vf_loss /= steps;
    m.entropy /= steps;
    m.kl_self_mean = old.mean_kl_from(&agent.params, &batch.obs, cfg.kl_direction)?;
    m.beta = beta;
    if cfg.variant == PpoVariant::AdaptiveKl {
        agent.beta = adaptive_beta(agent.beta, m.kl_self_mean, cfg.d_targ);
    }
    if !m.is_finite() {
        return Err(DiffError::NonFinite {
            term: "update metrics".into(),
        }
        .into());
    }
    Ok(m)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::diffnet::{init_network, NetworkSpec, TensorRole};
    use crate::rollout::{compute_gae, Collector, RunningNormalizer};
    use crate::envs::make_env;
    use rand::SeedableRng;

    pub(crate) fn sample_batch(seed: u64, horizon: usize) -> (ParamVector, RolloutBatch) {
        let p = init_network(&NetworkSpec::new(4, 2), seed).unwrap();
        let mut c = Collector::new(make_env("pointgoal-a").unwrap());
        let mut norm = RunningNormalizer::new(4);
        let mut rng = SeededRng::seed_from_u64(seed);
        let (mut b, _) = c.collect(&p, horizon, &mut norm, None, &mut rng).unwrap();
        compute_gae(&mut b, 0.99, 0.95);
        (p, b)
    }

    fn all(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn pg_term_identity_ratio() {
        let (p, b) = sample_batch(1, 64);
        let pg = pg_term(&p, &b, &all(64)).unwrap();
        assert!((pg - mean(&b.advantages)).abs() < 1e-12);
        assert!(pg.abs() < 1e-9);
    }

    #[test]
    fn pg_term_constant_ratio() {
        let (p, mut b) = sample_batch(2, 32);
        b.logp_old.iter_mut().for_each(|l| *l -= 2f64.ln());
        b.advantages = (0..32).map(|i| i as f64 * 0.1 - 1.0).collect();
        let pg = pg_term(&p, &b, &all(32)).unwrap();
        assert!((pg - 2.0 * mean(&b.advantages)).abs() < 1e-12);
    }

    #[test]
    fn pg_term_single_sample() {
        let (p, mut b) = sample_batch(3, 8);
        b.logp_old[0] -= 1.5f64.ln();
        b.advantages[0] = 1.0;
        assert!((pg_term(&p, &b, &[0]).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn clipped_surrogate_examples() {
        let (p, mut b) = sample_batch(4, 8);
        let idx = all(8);
        assert_eq!(clipped_surrogate(&p, &b, &idx, 0.2).unwrap(), pg_term(&p, &b, &idx).unwrap());
        // ratio 1 + 2ε with positive advantage clips to (1 + ε)Â
        b.logp_old[0] -= 1.4f64.ln();
        b.advantages[0] = 2.0;
        assert!((clipped_surrogate(&p, &b, &[0], 0.2).unwrap() - 1.2 * 2.0).abs() < 1e-12);
        // ratio 1 − 2ε with negative advantage keeps the pessimistic (1 − ε)Â
        b.logp_old[1] -= 0.6f64.ln();
        b.advantages[1] = -3.0;
        assert!((clipped_surrogate(&p, &b, &[1], 0.2).unwrap() - 0.8 * -3.0).abs() < 1e-12);
    }

    #[test]
    fn clipped_never_exceeds_unclipped() {
        let (p, mut b) = sample_batch(5, 64);
        let mut rng = SeededRng::seed_from_u64(0);
        use rand::Rng;
        for l in b.logp_old.iter_mut() {
            *l += rng.random_range(-1.0..1.0);
        }
        for mb in minibatches(64, 8, &mut rng).unwrap() {
            assert!(clipped_surrogate(&p, &b, &mb, 0.2).unwrap() <= pg_term(&p, &b, &mb).unwrap() + 1e-15);
        }
    }

    #[test]
    fn fixed_kl_identity_and_zero_beta() {
        let (p, b) = sample_batch(6, 32);
        let old = FrozenDists::of(&p, &b.obs).unwrap();
        let idx = all(32);
        let pg = pg_term(&p, &b, &idx).unwrap();
        assert_eq!(fixed_kl_objective(&p, &b, &idx, &old, 5.0, KlDirection::Reverse).unwrap(), pg);
        let q = init_network(&NetworkSpec::new(4, 2), 99).unwrap();
        let pq = pg_term(&q, &b, &idx).unwrap();
        assert_eq!(fixed_kl_objective(&q, &b, &idx, &old, 0.0, KlDirection::Forward).unwrap(), pq);
        assert!(fixed_kl_objective(&q, &b, &idx, &old, 1.0, KlDirection::Forward).unwrap() < pq);
    }

    #[test]
    fn pure_kl_descent_returns_to_snapshot() {
        let (p, mut b) = sample_batch(7, 64);
        b.advantages.iter_mut().for_each(|a| *a = 0.0);
        let old = FrozenDists::of(&p, &b.obs).unwrap();
        let mut q = p.clone();
        let mut rng = SeededRng::seed_from_u64(1);
        use rand::Rng;
        q.values.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
        let mut adam = AdamState::new(&q.layout);
        let idx = all(64);
        let mut prev = old.mean_kl_from(&q, &b.obs, KlDirection::Reverse).unwrap();
        assert!(prev > 1e-4);
        for _ in 0..50 {
            let (_, gr) = grad(&q, |g, v| {
                let s = slice_vars(g, &b, &idx);
                let frozen = old.bind(g, &idx);
                let out = forward_graph(g, v, s.obs, false);
                Ok(kl_mean_graph(g, (out.mean, out.log_std), frozen, KlDirection::Reverse))
            })
            .unwrap();
            adam_update(&mut q, &gr, &mut adam, 1e-3).unwrap();
            let kl = old.mean_kl_from(&q, &b.obs, KlDirection::Reverse).unwrap();
            assert!(kl < prev, "{kl} !< {prev}");
            prev = kl;
        }
    }

    #[test]
    fn adaptive_beta_rule() {
        assert_eq!(adaptive_beta(1.0, 0.02, 0.01), 2.0);
        assert_eq!(adaptive_beta(1.0, 0.005, 0.01), 0.5);
        assert_eq!(adaptive_beta(1.0, 0.01, 0.01), 1.0);
        assert_eq!(adaptive_beta(adaptive_beta(0.7, 0.012, 0.01), 0.012, 0.01), 0.7);
        assert_eq!(adaptive_beta(1e4, 1.0, 0.01), 1e4);
        assert_eq!(adaptive_beta(1e-4, 0.0, 0.01), 1e-4);
    }

    #[test]
    fn value_loss_examples() {
        let (p, mut b) = sample_batch(8, 16);
        let idx = all(16);
        b.returns = b.values.clone();
        assert!(value_loss(&p, &b, &idx).unwrap() < 1e-24);
        b.returns = b.values.iter().map(|v| v + 0.3).collect();
        assert!((value_loss(&p, &b, &idx).unwrap() - 0.09).abs() < 1e-12);
        let mut z = p.clone();
        for role in [TensorRole::ValueWeight, TensorRole::ValueBias] {
            let r = z.layout.slot(role).range();
            z.values[r].iter_mut().for_each(|v| *v = 0.0);
        }
        let l1 = value_loss(&z, &b, &idx).unwrap();
        b.returns.iter_mut().for_each(|r| *r *= 2.0);
        assert!((value_loss(&z, &b, &idx).unwrap() - 4.0 * l1).abs() < 1e-12);
    }

    #[test]
    fn zero_field_update_barely_moves() {
        let (p, mut b) = sample_batch(9, 64);
        b.advantages.iter_mut().for_each(|a| *a = 0.0);
        b.returns = b.values.clone();
        let cfg = PpoConfig {
            variant: PpoVariant::FixedKl,
            beta: 0.0,
            n_minibatches: 4,
            ..PpoConfig::default()
        };
        let mut agent = PpoAgent::new(p, &cfg);
        let m = update(&mut agent, &b, &cfg, &mut SeededRng::seed_from_u64(0)).unwrap();
        assert!(m.kl_self_mean < 1e-6);
        assert!(m.is_finite());
    }

    #[test]
    fn update_is_deterministic() {
        let (p, b) = sample_batch(10, 64);
        let cfg = PpoConfig {
            n_minibatches: 8,
            epochs: 3,
            ..PpoConfig::default()
        };
        let run = || {
            let mut a = PpoAgent::new(p.clone(), &cfg);
            let m = update(&mut a, &b, &cfg, &mut SeededRng::seed_from_u64(4)).unwrap();
            (a, m)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn huge_beta_pins_policy() {
        let (p, b) = sample_batch(11, 128);
        let cfg = PpoConfig {
            variant: PpoVariant::FixedKl,
            beta: 1e6,
            n_minibatches: 8,
            ..PpoConfig::default()
        };
        let mut a = PpoAgent::new(p, &cfg);
        let m = update(&mut a, &b, &cfg, &mut SeededRng::seed_from_u64(2)).unwrap();
        assert!(m.kl_self_mean < 1e-3, "{}", m.kl_self_mean);
    }

    #[test]
    fn adaptive_variant_adjusts_beta_once() {
        let (p, b) = sample_batch(12, 64);
        let cfg = PpoConfig {
            variant: PpoVariant::AdaptiveKl,
            beta: 1.0,
            n_minibatches: 4,
            epochs: 2,
            ..PpoConfig::default()
        };
        let mut a = PpoAgent::new(p, &cfg);
        let m = update(&mut a, &b, &cfg, &mut SeededRng::seed_from_u64(2)).unwrap();
        assert_eq!(m.beta, 1.0);
        assert_eq!(a.beta, adaptive_beta(1.0, m.kl_self_mean, 0.01));
    }

    #[test]
    fn failed_update_restores_agent() {
        let (p, mut b) = sample_batch(13, 16);
        b.advantages[3] = f64::NAN;
        let cfg = PpoConfig {
            n_minibatches: 2,
            ..PpoConfig::default()
        };
        let mut a = PpoAgent::new(p, &cfg);
        let before = a.clone();
        let err = update(&mut a, &b, &cfg, &mut SeededRng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, UpdateError::Numeric(DiffError::NonFinite { .. })));
        assert_eq!(a, before);
    }

    #[test]
    fn unprepared_batch_rejected() {
        let (p, mut b) = sample_batch(14, 16);
        b.advantages.clear();
        let cfg = PpoConfig::default();
        let mut a = PpoAgent::new(p, &cfg);
        assert_eq!(
            update(&mut a, &b, &cfg, &mut SeededRng::seed_from_u64(0)),
            Err(UpdateError::NotPrepared)
        );
    }
}
