//! Policy consolidation: a chain of policies coupled by KL constraints at
//! exponentially spaced timescales.
//!
//! Network 0 is the visible policy that acts and is trained by the policy
//! gradient. Every network `k` (0-based) is held to its own pre-update
//! snapshot with weight `β·ω^k` and to the snapshots of its neighbours:
//!
//! ```text
//! loss = −L_PG(π₀) + Σ_k β·ω^k·KL(π_k ‖ π_k,old)
//!      + ω₀₁·KL(π₀ ‖ π₁,old)
//!      + Σ_{k≥1} [ω·KL(π_k ‖ π_{k−1},old) + KL(π_k ‖ π_{k+1},old)]
//!      + vf·value_loss − ent·entropy
//! ```
//!
//! where `π_N,old` past the end of the chain is the deepest policy's own
//! snapshot by default. Network `k` is stepped with Adam at
//! `base_stepsize·ω^−k`.

use serde::{Deserialize, Serialize};

use crate::diffnet::{
    adam_update, clip_grad_norm_in_place, forward_batch, forward_graph, forward_policy, grad_many, AdamState,
    DiffError, Graph, Mat, NetOutputs, NetVars, ParamVector, Var,
};
use crate::ppo::{
    check_prepared, kl_mean_graph, mean_kl, slice_vars, visible_terms, FrozenDists, KlDirection, PpoConfig,
    Surrogate, UpdateError, UpdateMetrics, MAX_GRAD_NORM,
};
use crate::rollout::{minibatches, RolloutBatch};
use crate::SeededRng;

/// What the deepest policy's downstream neighbour refers to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// The frozen snapshot of the deepest policy: an extra unit of weight on
    /// its self constraint.
    #[default]
    Snapshot,
    /// The live deepest policy, which makes the term vanish.
    Live,
}

/// Orientation of the neighbour KL terms. `deeper` covers the term between
/// `π_k` and `π_{k+1},old`, `shallower` the one between `π_k` and
/// `π_{k−1},old`. `Reverse` puts the live policy first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjacentDirections {
    pub deeper: KlDirection,
    pub shallower: KlDirection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    pub n_policies: usize,
    pub beta: f64,
    pub omega: f64,
    pub omega12: f64,
    pub base_stepsize: f64,
    pub kl_direction_self: KlDirection,
    pub directions: AdjacentDirections,
    pub boundary: Boundary,
    /// Multiplier on the neighbour terms of the hidden policies; 0 turns
    /// them off.
    pub coupling: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            n_policies: 8,
            beta: 0.5,
            omega: 4.0,
            omega12: 1.0,
            base_stepsize: 3e-4,
            kl_direction_self: KlDirection::Reverse,
            directions: AdjacentDirections::default(),
            boundary: Boundary::Snapshot,
            coupling: 1.0,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_policies < 2 {
            return Err(format!("cascade.n_policies must be at least 2, got {}", self.n_policies));
        }
        if !(self.omega.is_finite() && self.omega > 1.0) {
            return Err(format!("cascade.omega must be finite and > 1, got {}", self.omega));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("omega12", self.omega12),
            ("base_stepsize", self.base_stepsize),
            ("coupling", self.coupling),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("cascade.{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// Self-constraint weight `β·ω^(k−1)` of the policy at 1-based depth `k`.
    pub fn beta_k(&self, k: usize) -> Result<f64, DiffError> {
        self.check_depth(k)?;
        Ok(self.beta * self.omega.powi(k as i32 - 1))
    }

    /// Adam stepsize `ω^(1−k)·base_stepsize` at 1-based depth `k`.
    pub fn stepsize_k(&self, k: usize) -> Result<f64, DiffError> {
        self.check_depth(k)?;
        Ok(self.base_stepsize / self.omega.powi(k as i32 - 1))
    }

    fn check_depth(&self, k: usize) -> Result<(), DiffError> {
        if k == 0 || k > self.n_policies {
            return Err(DiffError::RejectedInput(format!(
                "depth {k} outside 1..={}",
                self.n_policies
            )));
        }
        Ok(())
    }
}

/// Shorter chains that keep the deepest constraint `β·ω^(N−1)`, followed by
/// full-length chains with smaller `ω`.
pub fn ablation_grid(cfg: &CascadeConfig) -> Vec<CascadeConfig> {
    let exponent = (cfg.n_policies - 1) as f64;
    let with = |n: usize, omega: f64| CascadeConfig {
        n_policies: n,
        omega,
        ..cfg.clone()
    };
    vec![
        cfg.clone(),
        with(4, cfg.omega.powf(exponent / 3.0)),
        with(2, cfg.omega.powf(exponent)),
        with(cfg.n_policies, 2.0),
        with(cfg.n_policies, std::f64::consts::SQRT_2),
    ]
}

/// All networks of the chain with their optimizer states.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeState {
    pub nets: Vec<ParamVector>,
    pub adam: Vec<AdamState>,
}

impl CascadeState {
    /// Every network starts as an exact copy of `visible`.
    pub fn new(visible: &ParamVector, cfg: &CascadeConfig) -> Self {
        Self {
            nets: vec![visible.clone(); cfg.n_policies],
            adam: (0..cfg.n_policies).map(|_| AdamState::new(&visible.layout)).collect(),
        }
    }

    pub fn visible(&self) -> &ParamVector {
        &self.nets[0]
    }

    pub fn len(&self) -> usize {
        self.nets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nets.is_empty()
    }

    /// Frozen per-state dists of every network over `obs`.
    pub fn snapshot_old(&self, obs: &Mat) -> Result<Vec<FrozenDists>, DiffError> {
        self.nets.iter().map(|p| FrozenDists::of(p, obs)).collect()
    }

    /// Action of the policy at 1-based depth `k`; the mean when
    /// `deterministic`, a sample otherwise.
    pub fn act_with_depth(
        &self,
        k: usize,
        obs: &[f64],
        deterministic: bool,
        rng: &mut SeededRng,
    ) -> Result<Vec<f64>, DiffError> {
        if k == 0 || k > self.nets.len() {
            return Err(DiffError::RejectedInput(format!("depth {k} outside 1..={}", self.nets.len())));
        }
        let out = forward_batch(&self.nets[k - 1], &Mat::from_vec(1, obs.len(), obs.to_vec()))?;
        let dist = out.dist(0);
        Ok(if deterministic { dist.mean } else { dist.sample(rng) })
    }
}

struct LossStats {
    surrogate: f64,
    value_loss: f64,
    entropy: f64,
    clamp_count: u64,
}

fn live(o: &NetOutputs) -> (Var, Var) {
    (o.mean, o.log_std)
}

#[allow(clippy::too_many_arguments)]
fn build_loss(
    g: &mut Graph,
    vars: &[NetVars],
    batch: &RolloutBatch,
    idx: &[usize],
    old: &[FrozenDists],
    cfg: &CascadeConfig,
    ppo: &PpoConfig,
) -> (Var, LossStats) {
    let n = vars.len();
    let s = slice_vars(g, batch, idx);
    let frozen: Vec<(Var, Var)> = old.iter().map(|o| o.bind(g, idx)).collect();
    let vt = visible_terms(
        g,
        &vars[0],
        &s,
        frozen[0],
        Surrogate::Ratio,
        cfg.beta,
        cfg.kl_direction_self,
        ppo.vf_coeff,
        ppo.entropy_coeff,
    );
    let mut terms = vt.terms;
    let mut outs = vec![vt.outputs];
    for v in &vars[1..] {
        outs.push(forward_graph(g, v, s.obs, false));
    }
    for (k, out) in outs.iter().enumerate().skip(1) {
        let w = cfg.beta * cfg.omega.powi(k as i32);
        if w != 0.0 {
            let kl = kl_mean_graph(g, live(out), frozen[k], cfg.kl_direction_self);
            terms.push(g.scale(kl, w));
        }
    }
    if cfg.omega12 != 0.0 {
        let kl = kl_mean_graph(g, live(&outs[0]), frozen[1], cfg.directions.deeper);
        terms.push(g.scale(kl, cfg.omega12));
    }
    if cfg.coupling != 0.0 {
        for (k, out) in outs.iter().enumerate().skip(1) {
            let up = kl_mean_graph(g, live(out), frozen[k - 1], cfg.directions.shallower);
            terms.push(g.scale(up, cfg.coupling * cfg.omega));
            let down = if k + 1 < n {
                Some(frozen[k + 1])
            } else if cfg.boundary == Boundary::Snapshot {
                Some(frozen[k])
            } else {
                None
            };
            if let Some(target) = down {
                let kl = kl_mean_graph(g, live(out), target, cfg.directions.deeper);
                terms.push(g.scale(kl, cfg.coupling));
            }
        }
    }
    let loss = g.sum(&terms);
    let stats = LossStats {
        surrogate: vt.surrogate,
        value_loss: vt.value_loss,
        entropy: vt.entropy,
        clamp_count: vt.clamp_count,
    };
    (loss, stats)
}

/// Descent form of the consolidation objective on rows `idx`: the negated
/// surrogate plus all KL constraints, the weighted value loss and the
/// entropy bonus.
pub fn pc_loss(
    state: &CascadeState,
    batch: &RolloutBatch,
    idx: &[usize],
    old: &[FrozenDists],
    cfg: &CascadeConfig,
    ppo: &PpoConfig,
) -> Result<f64, DiffError> {
    let refs: Vec<&ParamVector> = state.nets.iter().collect();
    let mut out = 0.0;
    grad_many(&refs, |g, vars| {
        let (loss, _) = build_loss(g, vars, batch, idx, old, cfg, ppo);
        out = g.value(loss).item();
        Ok(loss)
    })?;
    Ok(out)
}

/// Gradients of [`pc_loss`] with respect to every network.
pub fn pc_grads(
    state: &CascadeState,
    batch: &RolloutBatch,
    idx: &[usize],
    old: &[FrozenDists],
    cfg: &CascadeConfig,
    ppo: &PpoConfig,
) -> Result<Vec<crate::diffnet::GradVector>, DiffError> {
    let refs: Vec<&ParamVector> = state.nets.iter().collect();
    let (_, grads) = grad_many(&refs, |g, vars| Ok(build_loss(g, vars, batch, idx, old, cfg, ppo).0))?;
    Ok(grads)
}

/// One consolidation update: `epochs × n_minibatches` joint gradient steps,
/// each network clipped separately and stepped at its own stepsize. On
/// failure every network is restored.
pub fn pc_update(
    state: &mut CascadeState,
    batch: &RolloutBatch,
    cfg: &CascadeConfig,
    ppo: &PpoConfig,
    rng: &mut SeededRng,
) -> Result<UpdateMetrics, UpdateError> {
    check_prepared(batch)?;
    if state.nets.len() != cfg.n_policies {
        return Err(DiffError::RejectedInput(format!(
            "state holds {} networks, config expects {}",
            state.nets.len(),
            cfg.n_policies
        ))
        .into());
    }
    let backup = state.clone();
    let result = pc_update_inner(state, batch, cfg, ppo, rng);
    if result.is_err() {
        *state = backup;
    }
    result
}

fn pc_update_inner(
    state: &mut CascadeState,
    batch: &RolloutBatch,
    cfg: &CascadeConfig,
    ppo: &PpoConfig,
    rng: &mut SeededRng,
) -> Result<UpdateMetrics, UpdateError> {
    let old = state.snapshot_old(&batch.obs)?;
    let stepsizes: Vec<f64> = (1..=cfg.n_policies)
        .map(|k| cfg.stepsize_k(k))
        .collect::<Result<_, _>>()?;
    let mut m = UpdateMetrics::default();
    let mut steps = 0.0;
    for _ in 0..ppo.epochs {
        for idx in minibatches(batch.len(), ppo.n_minibatches, rng)? {
            let refs: Vec<&ParamVector> = state.nets.iter().collect();
            let mut stats = None;
            let (_, grads) = grad_many(&refs, |g, vars| {
                let (loss, st) = build_loss(g, vars, batch, &idx, &old, cfg, ppo);
                stats = Some(st);
                Ok(loss)
            })?;
            let st = stats.expect("loss was built");
            m.pg_loss -= st.surrogate;
            m.vf_loss += st.value_loss;
            m.entropy += st.entropy;
            m.clamp_count += st.clamp_count;
            steps += 1.0;
            for (k, mut gr) in grads.into_iter().enumerate() {
                clip_grad_norm_in_place(&mut gr, MAX_GRAD_NORM);
                adam_update(&mut state.nets[k], &gr, &mut state.adam[k], stepsizes[k])?;
            }
        }
    }
    m.pg_loss /= steps;
    m.vf_loss /= steps;
    m.entropy /= steps;
    let policies: Vec<(Mat, Mat)> = state
        .nets
        .iter()
        .map(|p| forward_policy(p, &batch.obs))
        .collect::<Result<_, _>>()?;
    m.kl_depth = policies
        .iter()
        .zip(&old)
        .map(|((mean, ls), o)| mean_kl(mean, ls, &o.mean, &o.log_std, cfg.kl_direction_self))
        .collect();
    m.kl_adjacent = policies
        .windows(2)
        .map(|w| mean_kl(&w[0].0, &w[0].1, &w[1].0, &w[1].1, KlDirection::Reverse))
        .collect();
    m.kl_self_mean = m.kl_depth[0];
    m.beta = cfg.beta;
    if !m.is_finite() || state.nets.iter().any(|p| !p.is_finite()) {
        return Err(DiffError::NonFinite {
            term: "cascade update".into(),
        }
        .into());
    }
    Ok(m)
}
