//! Recurrent cells (stacked LSTM and recurrent highway network) with their
//! forward maps and analytic state-to-state Jacobians.

mod lstm;
mod rhn;

pub use lstm::{lstm_jacobian, lstm_step, lstm_step_with_jacobian, LstmLayer};
pub use rhn::{rhn_jacobian, rhn_step, rhn_step_with_jacobian, RhnParams};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use rand::Rng;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Uniform weights in `[-1/sqrt(hidden), 1/sqrt(hidden)]`.
pub(crate) fn uniform_init<R: Rng + ?Sized>(rows: usize, cols: usize, hidden: usize, rng: &mut R) -> Matrix {
    let bound = 1.0 / (hidden as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

/// Hidden (and, for LSTM, cell) vectors of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub h: Vec<Vec<f64>>,
    /// Empty for architectures without a cell state.
    pub c: Vec<Vec<f64>>,
}

impl NetworkState {
    pub fn zeros_lstm(hidden: &[usize]) -> Self {
        Self {
            h: hidden.iter().map(|&n| vec![0.0; n]).collect(),
            c: hidden.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn zeros_rhn(hidden: usize) -> Self {
        Self {
            h: vec![vec![0.0; hidden]],
            c: Vec::new(),
        }
    }

    pub fn has_cell(&self) -> bool {
        !self.c.is_empty()
    }

    /// Flattened dimension N.
    pub fn dim(&self) -> usize {
        self.h.iter().map(Vec::len).sum::<usize>() + self.c.iter().map(Vec::len).sum::<usize>()
    }

    /// Layer by layer: `h_l` followed by `c_l` when present.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for l in 0..self.h.len() {
            out.extend_from_slice(&self.h[l]);
            if let Some(c) = self.c.get(l) {
                out.extend_from_slice(c);
            }
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) for the layout of `self`.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "flat state of length {} for a state of dimension {}",
                flat.len(),
                self.dim()
            )));
        }
        let mut out = self.clone();
        let mut at = 0;
        for l in 0..out.h.len() {
            let n = out.h[l].len();
            out.h[l].copy_from_slice(&flat[at..at + n]);
            at += n;
            if let Some(c) = out.c.get_mut(l) {
                let n = c.len();
                c.copy_from_slice(&flat[at..at + n]);
                at += n;
            }
        }
        Ok(out)
    }

    /// Positions of the hidden (`h`) entries inside the flattened state.
    pub fn hidden_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut at = 0;
        for l in 0..self.h.len() {
            out.extend(at..at + self.h[l].len());
            at += self.h[l].len();
            if let Some(c) = self.c.get(l) {
                at += c.len();
            }
        }
        out
    }
}

/// Central-difference Jacobian of `step(state, x)` with respect to `state`.
///
/// Column `j` is `(f(s + eps e_j) - f(s - eps e_j)) / (2 eps)`.
pub fn finite_diff_jacobian<X: ?Sized, F>(step: F, state: &[f64], x: &X, eps: f64) -> Result<Matrix>
where
    F: Fn(&[f64], &X) -> Result<Vec<f64>>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {eps}")));
    }
    let n = state.len();
    let mut probe = state.to_vec();
    let mut columns = Vec::with_capacity(n);
    for j in 0..n {
        probe[j] = state[j] + eps;
        let plus = step(&probe, x)?;
        probe[j] = state[j] - eps;
        let minus = step(&probe, x)?;
        probe[j] = state[j];
        if plus.len() != minus.len() {
            return Err(Error::Dimension("step output length changed between probes".into()));
        }
        columns.push(
            plus.iter()
                .zip(&minus)
                .map(|(p, m)| (p - m) / (2.0 * eps))
                .collect::<Vec<_>>(),
        );
    }
    let m = columns.first().map_or(0, Vec::len);
    Ok(Matrix::from_fn(m, n, |i, j| columns[j][i]))
}

/// Rows/columns of `j` restricted to `idx` (a principal submatrix).
pub(crate) fn principal_submatrix(j: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(idx.len(), idx.len(), |r, c| j[(idx[r], idx[c])])
}
