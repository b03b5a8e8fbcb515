//! Matrix-valued reverse-mode differentiation over a fixed primitive set.
//!
//! A [`Graph`] records every value it computes together with the operation
//! that produced it. [`Graph::backward`] walks the record in reverse creation
//! order, so accumulation order into shared nodes is a pure function of the
//! order in which the loss was built.
//!
//! Binary elementwise operations broadcast any operand whose row or column
//! count is 1.

use super::mat::{
    affine_forward, broadcast_index, gauss_kl_forward, gauss_log_prob_forward, relu_forward, Mat,
    HALF_LN_2PI,
};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Square(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    SumCols(Var),
    Mean(Var),
    GaussLogProb { mean: Var, log_std: Var, action: Var },
    GaussKl { mp: Var, lsp: Var, mq: Var, lsq: Var },
    GaussEntropy(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Computation record for one loss evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    terms: Vec<(String, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tags a node with a name used in numeric-failure diagnostics.
    pub fn term(&mut self, name: impl Into<String>, v: Var) -> Var {
        self.terms.push((name.into(), v));
        v
    }

    /// Name of the first tagged term whose value is not finite.
    pub fn first_non_finite_term(&self) -> Option<&str> {
        self.terms
            .iter()
            .find(|(_, v)| !self.value(*v).is_finite())
            .map(|(n, _)| n.as_str())
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let value = affine_forward(self.value(x), self.value(w), self.value(b));
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(value, Op::Affine { x, w, b }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = relu_forward(self.value(x));
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        let rows = broadcast_dim(ma.rows, mb.rows, "rows");
        let cols = broadcast_dim(ma.cols, mb.cols, "cols");
        let mut out = Mat::zeros(rows, cols);
        if ma.shape() == mb.shape() {
            for ((o, &x), &y) in out.data.iter_mut().zip(&ma.data).zip(&mb.data) {
                *o = f(x, y);
            }
        } else {
            for i in 0..rows {
                for j in 0..cols {
                    out.data[i * cols + j] = f(
                        ma.data[broadcast_index(ma, i, j)],
                        mb.data[broadcast_index(mb, i, j)],
                    );
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| if x <= y { x } else { y }, Op::Min(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let m = self.value(x);
        let value = Mat {
            rows: m.rows,
            cols: m.cols,
            data: m.data.iter().map(|&v| f(v)).collect(),
        };
        let ng = self.ng(x);
        self.push(value, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the band.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Sums each row: `B×C → B×1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let data = (0..m.rows).map(|i| m.row(i).iter().sum()).collect();
        let value = Mat::from_vec(m.rows, 1, data);
        let ng = self.ng(x);
        self.push(value, Op::SumCols(x), ng)
    }

    /// Mean over all entries: `→ 1×1`.
    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let n = m.data.len() as f64;
        let value = Mat::scalar(m.data.iter().sum::<f64>() / n);
        let ng = self.ng(x);
        self.push(value, Op::Mean(x), ng)
    }

    /// Sum of scalars (or equally shaped nodes), left to right.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut it = xs.iter().copied();
        let first = it.next().expect("sum of empty list");
        it.fold(first, |acc, x| self.add(acc, x))
    }

    /// Diagonal-Gaussian log density per row (`B×1`).
    pub fn gauss_log_prob(&mut self, mean: Var, log_std: Var, action: Var) -> Var {
        let value = gauss_log_prob_forward(self.value(mean), self.value(log_std), self.value(action));
        let ng = self.ng(mean) || self.ng(log_std) || self.ng(action);
        self.push(value, Op::GaussLogProb { mean, log_std, action }, ng)
    }

    /// `KL(p ‖ q)` per row (`B×1`), summed over action dimensions.
    pub fn gauss_kl(&mut self, mp: Var, lsp: Var, mq: Var, lsq: Var) -> Var {
        let value = gauss_kl_forward(self.value(mp), self.value(lsp), self.value(mq), self.value(lsq));
        let ng = self.ng(mp) || self.ng(lsp) || self.ng(mq) || self.ng(lsq);
        self.push(value, Op::GaussKl { mp, lsp, mq, lsq }, ng)
    }

    /// Differential entropy per row of `log_std` (`R×1`).
    pub fn gauss_entropy(&mut self, log_std: Var) -> Var {
        let m = self.value(log_std);
        let data = (0..m.rows)
            .map(|i| m.row(i).iter().map(|ls| 0.5 + HALF_LN_2PI + ls).sum())
            .collect();
        let value = Mat::from_vec(m.rows, 1, data);
        let ng = self.ng(log_std);
        self.push(value, Op::GaussEntropy(log_std), ng)
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients; `None`
    /// for nodes that neither need nor received a gradient.
    pub fn backward(&self, root: Var) -> Vec<Option<Mat>> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Mat::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        grads
    }

    fn propagate(&self, op: &Op, out: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        match *op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let (n_in, n_out) = (wv.rows, wv.cols);
                if self.ng(w) {
                    let gw = slot(grads, w, wv);
                    for i in 0..xv.rows {
                        let grow = g.row(i);
                        for k in 0..n_in {
                            let xk = xv.data[i * n_in + k];
                            if xk == 0.0 {
                                continue;
                            }
                            let gwrow = &mut gw.data[k * n_out..(k + 1) * n_out];
                            for (acc, &gj) in gwrow.iter_mut().zip(grow) {
                                *acc += xk * gj;
                            }
                        }
                    }
                }
                if self.ng(b) {
                    let gb = slot(grads, b, self.value(b));
                    for i in 0..g.rows {
                        for (acc, &gj) in gb.data.iter_mut().zip(g.row(i)) {
                            *acc += gj;
                        }
                    }
                }
                if self.ng(x) {
                    let gx = slot(grads, x, xv);
                    for i in 0..xv.rows {
                        let grow = g.row(i);
                        for k in 0..n_in {
                            let wrow = &wv.data[k * n_out..(k + 1) * n_out];
                            let dot: f64 = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                            gx.data[i * n_in + k] += dot;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(x);
                let gx = slot(grads, x, xv);
                for ((acc, &gi), &xi) in gx.data.iter_mut().zip(&g.data).zip(&xv.data) {
                    if xi > 0.0 {
                        *acc += gi;
                    }
                }
            }
            Op::Add(a, b) => {
                self.reduce_into(grads, a, g, |_, _, gi| gi);
                self.reduce_into(grads, b, g, |_, _, gi| gi);
            }
            Op::Sub(a, b) => {
                self.reduce_into(grads, a, g, |_, _, gi| gi);
                self.reduce_into(grads, b, g, |_, _, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (ma, mb) = (self.value(a), self.value(b));
                self.reduce_into(grads, a, g, |i, j, gi| gi * mb.data[broadcast_index(mb, i, j)]);
                self.reduce_into(grads, b, g, |i, j, gi| gi * ma.data[broadcast_index(ma, i, j)]);
            }
            Op::Min(a, b) => {
                let (ma, mb) = (self.value(a), self.value(b));
                let a_wins = |i, j| ma.data[broadcast_index(ma, i, j)] <= mb.data[broadcast_index(mb, i, j)];
                self.reduce_into(grads, a, g, |i, j, gi| if a_wins(i, j) { gi } else { 0.0 });
                self.reduce_into(grads, b, g, |i, j, gi| if a_wins(i, j) { 0.0 } else { gi });
            }
            Op::Scale(x, c) => {
                let gx = slot(grads, x, self.value(x));
                for (acc, &gi) in gx.data.iter_mut().zip(&g.data) {
                    *acc += gi * c;
                }
            }
            Op::Exp(x) => {
                let gx = slot(grads, x, self.value(x));
                for ((acc, &gi), &yi) in gx.data.iter_mut().zip(&g.data).zip(&out.data) {
                    *acc += gi * yi;
                }
            }
            Op::Square(x) => {
                let xv = self.value(x);
                let gx = slot(grads, x, xv);
                for ((acc, &gi), &xi) in gx.data.iter_mut().zip(&g.data).zip(&xv.data) {
                    *acc += 2.0 * xi * gi;
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(x);
                let gx = slot(grads, x, xv);
                for ((acc, &gi), &xi) in gx.data.iter_mut().zip(&g.data).zip(&xv.data) {
                    if (lo..=hi).contains(&xi) {
                        *acc += gi;
                    }
                }
            }
            Op::SumCols(x) => {
                let xv = self.value(x);
                let cols = xv.cols;
                let gx = slot(grads, x, xv);
                for (i, &gi) in g.data.iter().enumerate() {
                    for acc in &mut gx.data[i * cols..(i + 1) * cols] {
                        *acc += gi;
                    }
                }
            }
            Op::Mean(x) => {
                let xv = self.value(x);
                let share = g.data[0] / xv.data.len() as f64;
                let gx = slot(grads, x, xv);
                for acc in &mut gx.data {
                    *acc += share;
                }
            }
            Op::GaussLogProb {
                mean,
                log_std,
                action,
            } => {
                let (mv, lv, av) = (self.value(mean), self.value(log_std), self.value(action));
                let (rows, cols) = mv.shape();
                // d/dμ = (a-μ)/σ², d/dlnσ = z² - 1, d/da = -(a-μ)/σ²
                let mut dm = Mat::zeros(rows, cols);
                let mut dl = Mat::zeros(rows, cols);
                for i in 0..rows {
                    let gi = g.data[i];
                    for j in 0..cols {
                        let ls = lv.data[broadcast_index(lv, i, j)];
                        let inv_var = (-2.0 * ls).exp();
                        let diff = av.get(i, j) - mv.get(i, j);
                        dm.data[i * cols + j] = gi * diff * inv_var;
                        dl.data[i * cols + j] = gi * (diff * diff * inv_var - 1.0);
                    }
                }
                if self.ng(action) {
                    let ga = slot(grads, action, av);
                    for (acc, d) in ga.data.iter_mut().zip(&dm.data) {
                        *acc -= d;
                    }
                }
                if self.ng(mean) {
                    let gm = slot(grads, mean, mv);
                    for (acc, d) in gm.data.iter_mut().zip(&dm.data) {
                        *acc += d;
                    }
                }
                self.reduce_into(grads, log_std, &dl, |_, _, v| v);
            }
            Op::GaussKl { mp, lsp, mq, lsq } => {
                let (vmp, vlsp, vmq, vlsq) =
                    (self.value(mp), self.value(lsp), self.value(mq), self.value(lsq));
                let rows = g.rows;
                let cols = vmp.cols;
                let mut d_mp = Mat::zeros(rows, cols);
                let mut d_lsp = Mat::zeros(rows, cols);
                let mut d_lsq = Mat::zeros(rows, cols);
                for i in 0..rows {
                    let gi = g.data[i];
                    for j in 0..cols {
                        let a = vmp.data[broadcast_index(vmp, i, j)];
                        let la = vlsp.data[broadcast_index(vlsp, i, j)];
                        let b = vmq.data[broadcast_index(vmq, i, j)];
                        let lb = vlsq.data[broadcast_index(vlsq, i, j)];
                        let inv_var_q = (-2.0 * lb).exp();
                        let ratio_m1 = (2.0 * (la - lb)).exp_m1();
                        let diff = a - b;
                        let k = i * cols + j;
                        d_mp.data[k] = gi * diff * inv_var_q;
                        d_lsp.data[k] = gi * ratio_m1;
                        d_lsq.data[k] = gi * (-ratio_m1 - diff * diff * inv_var_q);
                    }
                }
                self.reduce_into(grads, mp, &d_mp, |_, _, v| v);
                self.reduce_into(grads, mq, &d_mp, |_, _, v| -v);
                self.reduce_into(grads, lsp, &d_lsp, |_, _, v| v);
                self.reduce_into(grads, lsq, &d_lsq, |_, _, v| v);
            }
            Op::GaussEntropy(ls) => {
                let lv = self.value(ls);
                let cols = lv.cols;
                let gl = slot(grads, ls, lv);
                for (i, &gi) in g.data.iter().enumerate() {
                    for acc in &mut gl.data[i * cols..(i + 1) * cols] {
                        *acc += gi;
                    }
                }
            }
        }
    }

    /// Accumulates `f(i, j, src[i, j])` into the gradient of `target`,
    /// summing over any broadcast dimension of `target`.
    fn reduce_into(
        &self,
        grads: &mut [Option<Mat>],
        target: Var,
        src: &Mat,
        f: impl Fn(usize, usize, f64) -> f64,
    ) {
        if !self.ng(target) {
            return;
        }
        let tv = self.value(target);
        let gt = slot(grads, target, tv);
        if tv.shape() == src.shape() {
            let cols = src.cols;
            for (k, (acc, &s)) in gt.data.iter_mut().zip(&src.data).enumerate() {
                *acc += f(k / cols.max(1), k % cols.max(1), s);
            }
            return;
        }
        for i in 0..src.rows {
            for j in 0..src.cols {
                let t = broadcast_index(tv, i, j);
                gt.data[t] += f(i, j, src.data[i * src.cols + j]);
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Mat>], v: Var, like: &Mat) -> &'a mut Mat {
    grads[v.0].get_or_insert_with(|| Mat::zeros(like.rows, like.cols))
}

fn broadcast_dim(a: usize, b: usize, what: &str) -> usize {
    match (a, b) {
        _ if a == b => a,
        (1, n) | (n, 1) => n,
        _ => panic!("cannot broadcast {what}: {a} vs {b}"),
    }
}
