//! Dense row-major matrices and the numeric kernels shared by the tape and
//! the tape-free forward pass.
//!
//! Both execution paths call the same kernels so that a network evaluated
//! through the tape and evaluated directly produce bit-identical outputs.

use serde::{Deserialize, Serialize};

/// Row-major `rows × cols` matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "matrix data length does not match {rows}x{cols}"
        );
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec(idx.len(), self.cols, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar value of a `1×1` matrix.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar matrix");
        self.data[0]
    }
}

/// `x · w + b` with `x: B×I`, `w: I×O`, `b: 1×O`.
pub fn affine_forward(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    assert_eq!(x.cols, w.rows, "affine: input width mismatch");
    assert_eq!((b.rows, b.cols), (1, w.cols), "affine: bias shape mismatch");
    let out_cols = w.cols;
    let mut out = Mat::zeros(x.rows, out_cols);
    for i in 0..x.rows {
        let orow = &mut out.data[i * out_cols..(i + 1) * out_cols];
        orow.copy_from_slice(&b.data);
        let xrow = &x.data[i * x.cols..(i + 1) * x.cols];
        for (k, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w.data[k * out_cols..(k + 1) * out_cols];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    out
}

pub fn relu_forward(x: &Mat) -> Mat {
    Mat {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    }
}

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// `0.5 · ln(2π)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
fn bidx(m: &Mat, r: usize, c: usize) -> usize {
    let rr = if m.rows == 1 { 0 } else { r };
    let cc = if m.cols == 1 { 0 } else { c };
    rr * m.cols + cc
}

/// Row-wise diagonal-Gaussian log density. `log_std` may be `1×A` (broadcast)
/// or `B×A`. Returns `B×1`.
pub fn gauss_log_prob_forward(mean: &Mat, log_std: &Mat, action: &Mat) -> Mat {
    assert_eq!(mean.shape(), action.shape(), "log_prob: action shape mismatch");
    assert_eq!(log_std.cols, mean.cols, "log_prob: log_std width mismatch");
    let mut out = Mat::zeros(mean.rows, 1);
    for i in 0..mean.rows {
        let mut acc = 0.0;
        for j in 0..mean.cols {
            let ls = log_std.data[bidx(log_std, i, j)];
            let z = (action.get(i, j) - mean.get(i, j)) * (-ls).exp();
            acc += -0.5 * z * z - ls - HALF_LN_2PI;
        }
        out.data[i] = acc;
    }
    out
}

/// Per-dimension `KL(N(μp, σp) ‖ N(μq, σq))`, written with `expm1` so that
/// nearly identical distributions do not lose their divergence to rounding.
#[inline]
pub fn gauss_kl_scalar(mp: f64, lsp: f64, mq: f64, lsq: f64) -> f64 {
    let d = lsq - lsp;
    let diff = mp - mq;
    0.5 * ((-2.0 * d).exp_m1() + 2.0 * d) + 0.5 * diff * diff * (-2.0 * lsq).exp()
}

/// Row-wise KL between diagonal Gaussians, summed over action dimensions.
/// Every argument may broadcast over rows. Returns `B×1`.
pub fn gauss_kl_forward(mp: &Mat, lsp: &Mat, mq: &Mat, lsq: &Mat) -> Mat {
    let rows = [mp.rows, lsp.rows, mq.rows, lsq.rows]
        .into_iter()
        .max()
        .unwrap_or(1);
    let cols = mp.cols;
    for m in [lsp, mq, lsq] {
        assert_eq!(m.cols, cols, "kl: action width mismatch");
        assert!(m.rows == rows || m.rows == 1, "kl: row count mismatch");
    }
    assert!(mp.rows == rows || mp.rows == 1, "kl: row count mismatch");
    let mut out = Mat::zeros(rows, 1);
    for i in 0..rows {
        let mut acc = 0.0;
        for j in 0..cols {
            acc += gauss_kl_scalar(
                mp.data[bidx(mp, i, j)],
                lsp.data[bidx(lsp, i, j)],
                mq.data[bidx(mq, i, j)],
                lsq.data[bidx(lsq, i, j)],
            );
        }
        out.data[i] = acc;
    }
    out
}

pub(crate) fn broadcast_index(m: &Mat, r: usize, c: usize) -> usize {
    bidx(m, r, c)
}
