//! MLP torso with a diagonal-Gaussian policy head and a scalar value head,
//! stored as one flat parameter vector.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mat::{affine_forward, relu_forward, Mat, LOG_STD_MAX, LOG_STD_MIN};
use super::tape::{Graph, Var};
use super::{DiffError, GaussDist};
use crate::SeededRng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    RectifiedLinear,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl NetworkSpec {
    /// Two hidden layers of 64 units.
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        Self {
            obs_dim,
            act_dim,
            hidden_widths: vec![64, 64],
            activation: Activation::RectifiedLinear,
        }
    }

    pub fn with_hidden(mut self, widths: Vec<usize>) -> Self {
        self.hidden_widths = widths;
        self
    }

    pub fn validate(&self) -> Result<(), DiffError> {
        if self.obs_dim == 0 || self.act_dim == 0 {
            return Err(DiffError::InvalidSpec(
                "obs_dim and act_dim must be at least 1".into(),
            ));
        }
        if self.hidden_widths.is_empty() {
            return Err(DiffError::InvalidSpec("hidden_widths is empty".into()));
        }
        if let Some(i) = self.hidden_widths.iter().position(|&w| w == 0) {
            return Err(DiffError::InvalidSpec(format!("hidden layer {i} has zero width")));
        }
        Ok(())
    }
}

/// Kind of a named tensor in a [`Layout`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    HiddenWeight(usize),
    HiddenBias(usize),
    PolicyWeight,
    PolicyBias,
    LogStd,
    ValueWeight,
    ValueBias,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSlot {
    pub role: TensorRole,
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSlot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Placement of every named tensor inside the flat parameter vector.
///
/// Order: hidden layers (weight, bias), policy-mean head, log-std vector,
/// value head. Weights are stored `in × out`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub spec: NetworkSpec,
    pub slots: Vec<TensorSlot>,
    pub len: usize,
}

impl Layout {
    pub fn new(spec: &NetworkSpec) -> Result<Self, DiffError> {
        spec.validate()?;
        let mut slots = Vec::new();
        let mut offset = 0;
        let mut push = |role, name: String, rows, cols| {
            slots.push(TensorSlot {
                role,
                name,
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
        };
        let mut fan_in = spec.obs_dim;
        for (i, &w) in spec.hidden_widths.iter().enumerate() {
            push(TensorRole::HiddenWeight(i), format!("hidden.{i}.weight"), fan_in, w);
            push(TensorRole::HiddenBias(i), format!("hidden.{i}.bias"), 1, w);
            fan_in = w;
        }
        push(TensorRole::PolicyWeight, "policy.weight".into(), fan_in, spec.act_dim);
        push(TensorRole::PolicyBias, "policy.bias".into(), 1, spec.act_dim);
        push(TensorRole::LogStd, "log_std".into(), 1, spec.act_dim);
        push(TensorRole::ValueWeight, "value.weight".into(), fan_in, 1);
        push(TensorRole::ValueBias, "value.bias".into(), 1, 1);
        Ok(Self {
            spec: spec.clone(),
            slots,
            len: offset,
        })
    }

    pub fn slot(&self, role: TensorRole) -> &TensorSlot {
        self.slots
            .iter()
            .find(|s| s.role == role)
            .expect("role present in every layout")
    }
}

/// Flat network parameters plus their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub layout: Arc<Layout>,
    pub values: Vec<f64>,
}

/// Gradient with the same layout as a [`ParamVector`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradVector {
    pub layout: Arc<Layout>,
    pub values: Vec<f64>,
}

impl GradVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.len];
        Self { layout, values }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl ParamVector {
    pub fn zeros(spec: &NetworkSpec) -> Result<Self, DiffError> {
        let layout = Arc::new(Layout::new(spec)?);
        let values = vec![0.0; layout.len];
        Ok(Self { layout, values })
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self, DiffError> {
        if values.len() != layout.len {
            return Err(DiffError::LayoutMismatch {
                expected: layout.len,
                found: values.len(),
            });
        }
        Ok(Self { layout, values })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.layout.spec
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, role: TensorRole) -> Mat {
        let s = self.layout.slot(role);
        Mat::from_vec(s.rows, s.cols, self.values[s.range()].to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Euclidean distance between two parameter vectors of equal layout.
    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

const HIDDEN_GAIN: f64 = std::f64::consts::SQRT_2;
const POLICY_GAIN: f64 = 0.01;
const VALUE_GAIN: f64 = 1.0;

/// Orthogonal weights (gain √2 hidden, 0.01 policy mean, 1.0 value), zero
/// biases and zero log-std. Deterministic in `(spec, seed)`.
pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<ParamVector, DiffError> {
    let mut params = ParamVector::zeros(spec)?;
    let mut rng = SeededRng::seed_from_u64(seed);
    let layout = params.layout.clone();
    for slot in &layout.slots {
        let gain = match slot.role {
            TensorRole::HiddenWeight(_) => HIDDEN_GAIN,
            TensorRole::PolicyWeight => POLICY_GAIN,
            TensorRole::ValueWeight => VALUE_GAIN,
            _ => continue,
        };
        let w = orthogonal(slot.rows, slot.cols, gain, &mut rng);
        params.values[slot.range()].copy_from_slice(&w);
    }
    Ok(params)
}

/// Row-major `rows × cols` matrix with orthonormal rows or columns
/// (whichever is shorter), scaled by `gain`.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut SeededRng) -> Vec<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, short, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            out.push(gain * v);
        }
    }
    out
}

fn check_obs(obs: &Mat, spec: &NetworkSpec) -> Result<(), DiffError> {
    if obs.cols != spec.obs_dim {
        return Err(DiffError::Shape(format!(
            "observation width {} but network expects {}",
            obs.cols, spec.obs_dim
        )));
    }
    if obs.rows == 0 {
        return Err(DiffError::Shape("empty observation batch".into()));
    }
    if let Some(pos) = obs.data.iter().position(|v| !v.is_finite()) {
        return Err(DiffError::RejectedInput(format!(
            "non-finite observation at row {}, column {}",
            pos / obs.cols,
            pos % obs.cols
        )));
    }
    Ok(())
}

/// Raw batch outputs of a network: means `B×A`, clamped log-std `1×A`,
/// values `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutput {
    pub mean: Mat,
    pub log_std: Mat,
    pub values: Vec<f64>,
}

impl BatchOutput {
    pub fn dist(&self, row: usize) -> GaussDist {
        GaussDist {
            mean: self.mean.row(row).to_vec(),
            log_std: self.log_std.data.clone(),
        }
    }

    pub fn dists(&self) -> Vec<GaussDist> {
        (0..self.mean.rows).map(|i| self.dist(i)).collect()
    }
}

fn torso(params: &ParamVector, obs: &Mat) -> Mat {
    let mut h = obs.clone();
    for i in 0..params.spec().hidden_widths.len() {
        let w = params.tensor(TensorRole::HiddenWeight(i));
        let b = params.tensor(TensorRole::HiddenBias(i));
        h = relu_forward(&affine_forward(&h, &w, &b));
    }
    h
}

pub(crate) fn clamp_log_std(m: &Mat) -> Mat {
    Mat {
        rows: m.rows,
        cols: m.cols,
        data: m.data.iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect(),
    }
}

/// Tape-free forward pass; bit-identical to [`forward_graph`].
pub fn forward_batch(params: &ParamVector, obs: &Mat) -> Result<BatchOutput, DiffError> {
    check_obs(obs, params.spec())?;
    let h = torso(params, obs);
    let mean = affine_forward(
        &h,
        &params.tensor(TensorRole::PolicyWeight),
        &params.tensor(TensorRole::PolicyBias),
    );
    let value = affine_forward(
        &h,
        &params.tensor(TensorRole::ValueWeight),
        &params.tensor(TensorRole::ValueBias),
    );
    Ok(BatchOutput {
        mean,
        log_std: clamp_log_std(&params.tensor(TensorRole::LogStd)),
        values: value.data,
    })
}

/// Policy-only forward pass (skips the value head).
pub fn forward_policy(params: &ParamVector, obs: &Mat) -> Result<(Mat, Mat), DiffError> {
    check_obs(obs, params.spec())?;
    let h = torso(params, obs);
    let mean = affine_forward(
        &h,
        &params.tensor(TensorRole::PolicyWeight),
        &params.tensor(TensorRole::PolicyBias),
    );
    Ok((mean, clamp_log_std(&params.tensor(TensorRole::LogStd))))
}

/// Per-state Gaussian action distributions and state values.
pub fn forward(params: &ParamVector, obs: &Mat) -> Result<(Vec<GaussDist>, Vec<f64>), DiffError> {
    let out = forward_batch(params, obs)?;
    let dists = out.dists();
    Ok((dists, out.values))
}

/// Tape leaves for every tensor of one network.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub net: usize,
    pub hidden: Vec<(Var, Var)>,
    pub policy: (Var, Var),
    pub log_std: Var,
    pub value: (Var, Var),
    pub(crate) leaves: Vec<(Var, usize)>,
}

/// Registers the tensors of `params` as differentiable leaves.
pub fn bind(g: &mut Graph, net: usize, params: &ParamVector) -> NetVars {
    let mut leaves = Vec::new();
    let mut leaf = |g: &mut Graph, role| {
        let s = params.layout.slot(role);
        let v = g.leaf(params.tensor(role));
        leaves.push((v, s.offset));
        v
    };
    let hidden = (0..params.spec().hidden_widths.len())
        .map(|i| {
            (
                leaf(g, TensorRole::HiddenWeight(i)),
                leaf(g, TensorRole::HiddenBias(i)),
            )
        })
        .collect();
    let policy = (leaf(g, TensorRole::PolicyWeight), leaf(g, TensorRole::PolicyBias));
    let log_std = leaf(g, TensorRole::LogStd);
    let value = (leaf(g, TensorRole::ValueWeight), leaf(g, TensorRole::ValueBias));
    NetVars {
        net,
        hidden,
        policy,
        log_std,
        value,
        leaves,
    }
}

/// Tape outputs of one network.
#[derive(Clone, Copy, Debug)]
pub struct NetOutputs {
    pub mean: Var,
    pub log_std: Var,
    pub value: Option<Var>,
}

/// Forward pass recorded on the tape. The value head is only built when
/// `with_value` is set.
pub fn forward_graph(g: &mut Graph, vars: &NetVars, obs: Var, with_value: bool) -> NetOutputs {
    let mut h = obs;
    for &(w, b) in &vars.hidden {
        let z = g.affine(h, w, b);
        h = g.relu(z);
    }
    let mean = g.affine(h, vars.policy.0, vars.policy.1);
    let log_std = g.clamp(vars.log_std, LOG_STD_MIN, LOG_STD_MAX);
    let value = with_value.then(|| g.affine(h, vars.value.0, vars.value.1));
    NetOutputs {
        mean,
        log_std,
        value,
    }
}

/// Differentiates a scalar loss built over several networks at once.
///
/// `loss_fn` receives the graph and one [`NetVars`] per entry of `params` and
/// returns the loss node. Gradients come back in the same order as `params`.
pub fn grad_many<F>(params: &[&ParamVector], loss_fn: F) -> Result<(f64, Vec<GradVector>), DiffError>
where
    F: FnOnce(&mut Graph, &[NetVars]) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<NetVars> = params
        .iter()
        .enumerate()
        .map(|(i, p)| bind(&mut g, i, p))
        .collect();
    let root = loss_fn(&mut g, &vars)?;
    let loss = g.value(root).item();
    if !loss.is_finite() {
        let term = g.first_non_finite_term().unwrap_or("loss").to_string();
        return Err(DiffError::NonFinite { term });
    }
    let node_grads = g.backward(root);
    let grads = params
        .iter()
        .zip(&vars)
        .map(|(p, nv)| {
            let mut gv = GradVector::zeros(p.layout.clone());
            for &(leaf, offset) in &nv.leaves {
                if let Some(m) = &node_grads[leaf.0] {
                    gv.values[offset..offset + m.data.len()].copy_from_slice(&m.data);
                }
            }
            gv
        })
        .collect::<Vec<_>>();
    if let Some((i, _)) = grads
        .iter()
        .enumerate()
        .find(|(_, gv)| gv.values.iter().any(|v| !v.is_finite()))
    {
        return Err(DiffError::NonFinite {
            term: format!("gradient of network {i}"),
        });
    }
    Ok((loss, grads))
}

/// Single-network form of [`grad_many`].
pub fn grad<F>(params: &ParamVector, loss_fn: F) -> Result<(f64, GradVector), DiffError>
where
    F: FnOnce(&mut Graph, &NetVars) -> Result<Var, DiffError>,
{
    let (loss, mut grads) = grad_many(&[params], |g, vars| loss_fn(g, &vars[0]))?;
    Ok((loss, grads.pop().expect("one gradient per network")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_length_for_default_spec() {
        let p = ParamVector::zeros(&NetworkSpec::new(4, 2)).unwrap();
        assert_eq!(p.len(), 4 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2 + 2 + 64 + 1);
        assert_eq!(p.len(), 4677);
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let spec = NetworkSpec::new(4, 2);
        let a = init_network(&spec, 7).unwrap();
        let b = init_network(&spec, 7).unwrap();
        let c = init_network(&spec, 8).unwrap();
        assert_eq!(
            a.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a.values, c.values);
        assert_eq!(a.layout, c.layout);
    }

    #[test]
    fn init_is_orthogonal_with_gain() {
        let spec = NetworkSpec::new(3, 2).with_hidden(vec![8, 5]);
        let p = init_network(&spec, 1).unwrap();
        // hidden.1: 8x5, columns orthonormal times √2
        let w = p.tensor(TensorRole::HiddenWeight(1));
        for a in 0..5 {
            for b in 0..5 {
                let dot: f64 = (0..8).map(|k| w.get(k, a) * w.get(k, b)).sum();
                let expect = if a == b { 2.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
        // hidden.0: 3x8, rows orthonormal times √2
        let w = p.tensor(TensorRole::HiddenWeight(0));
        for a in 0..3 {
            let dot: f64 = (0..8).map(|k| w.get(a, k) * w.get(a, k)).sum();
            assert!((dot - 2.0).abs() < 1e-12);
        }
        assert!(p.tensor(TensorRole::LogStd).data.iter().all(|&v| v == 0.0));
        assert!(p.tensor(TensorRole::HiddenBias(0)).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_width_layer_rejected() {
        let spec = NetworkSpec::new(3, 2).with_hidden(vec![8, 0]);
        assert!(matches!(init_network(&spec, 0), Err(DiffError::InvalidSpec(_))));
        let spec = NetworkSpec::new(3, 2).with_hidden(vec![]);
        assert!(init_network(&spec, 0).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = ParamVector::zeros(&NetworkSpec::new(3, 2)).unwrap();
        let obs = Mat::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]);
        let (dists, values) = forward(&p, &obs).unwrap();
        for d in dists {
            assert_eq!(d.mean, vec![0.0, 0.0]);
            assert_eq!(d.log_std, vec![0.0, 0.0]);
        }
        assert_eq!(values, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_is_rowwise() {
        let p = init_network(&NetworkSpec::new(3, 2).with_hidden(vec![6, 6]), 3).unwrap();
        let rows = vec![vec![0.1, 0.2, 0.3], vec![-1.0, 0.0, 2.0], vec![0.1, 0.2, 0.3]];
        let out = forward_batch(&p, &Mat::from_rows(&rows)).unwrap();
        assert_eq!(out.mean.row(0), out.mean.row(2));
        assert_eq!(out.values[0], out.values[2]);
        let permuted = vec![rows[1].clone(), rows[2].clone(), rows[0].clone()];
        let out2 = forward_batch(&p, &Mat::from_rows(&permuted)).unwrap();
        assert_eq!(out2.mean.row(0), out.mean.row(1));
        assert_eq!(out2.mean.row(2), out.mean.row(0));
        assert_eq!(out2.values[0], out.values[1]);
    }

    #[test]
    fn non_finite_observation_rejected() {
        let p = ParamVector::zeros(&NetworkSpec::new(2, 1)).unwrap();
        let obs = Mat::from_rows(&[vec![0.0, f64::NAN]]);
        assert!(matches!(forward(&p, &obs), Err(DiffError::RejectedInput(_))));
    }

    #[test]
    fn graph_forward_matches_direct_forward_bitwise() {
        let p = init_network(&NetworkSpec::new(3, 2).with_hidden(vec![7, 5]), 11).unwrap();
        let obs = Mat::from_rows(&[vec![0.3, -0.2, 1.5], vec![2.0, 0.1, -0.7]]);
        let direct = forward_batch(&p, &obs).unwrap();
        let mut g = Graph::new();
        let vars = bind(&mut g, 0, &p);
        let o = g.constant(obs);
        let out = forward_graph(&mut g, &vars, o, true);
        assert_eq!(g.value(out.mean), &direct.mean);
        assert_eq!(g.value(out.log_std), &direct.log_std);
        assert_eq!(g.value(out.value.unwrap()).data, direct.values);
    }

    #[test]
    fn quadratic_loss_gradient_is_params() {
        let p = init_network(&NetworkSpec::new(2, 1).with_hidden(vec![3]), 5).unwrap();
        let (loss, gv) = grad(&p, |g, vars| {
            let mut parts = Vec::new();
            for &(leaf, _) in &vars.leaves {
                let sq = g.square(leaf);
                let s = g.sum_cols(sq);
                let rows = g.value(s).rows as f64;
                let m = g.mean(s);
                parts.push(g.scale(m, 0.5 * rows));
            }
            Ok(g.sum(&parts))
        })
        .unwrap();
        let expect: f64 = 0.5 * p.values.iter().map(|v| v * v).sum::<f64>();
        assert!((loss - expect).abs() < 1e-12);
        for (a, b) in gv.values.iter().zip(&p.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = init_network(&NetworkSpec::new(2, 1).with_hidden(vec![3]), 5).unwrap();
        let (loss, gv) = grad(&p, |g, _| Ok(g.constant(Mat::scalar(3.0)))).unwrap();
        assert_eq!(loss, 3.0);
        assert!(gv.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_loss_reports_term() {
        let p = init_network(&NetworkSpec::new(2, 1).with_hidden(vec![3]), 5).unwrap();
        let err = grad(&p, |g, vars| {
            let big = g.scale(vars.log_std, 1e6);
            let e = g.exp(big);
            let e = g.exp(e);
            let e = g.term("exploding", e);
            Ok(g.mean(e))
        });
        // log_std starts at zero: exp(exp(0)) is finite, so push it up first
        assert!(err.is_ok());
        let mut q = p.clone();
        let s = q.layout.slot(TensorRole::LogStd).range();
        q.values[s].iter_mut().for_each(|v| *v = 1.0);
        let err = grad(&q, |g, vars| {
            let big = g.scale(vars.log_std, 1e3);
            let e = g.exp(big);
            let e = g.term("exploding", e);
            Ok(g.mean(e))
        })
        .unwrap_err();
        assert_eq!(
            err,
            DiffError::NonFinite {
                term: "exploding".into()
            }
        );
    }
}
