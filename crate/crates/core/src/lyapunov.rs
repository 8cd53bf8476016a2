//! Lyapunov spectra by repeated QR re-orthonormalization of tangent vectors.
//!
//! For each input sequence the tangent basis starts at the identity and the
//! state at the model's zero state. Every step multiplies the basis by the
//! step Jacobian and re-orthonormalizes it; after the warmup the log of each
//! diagonal entry of `R` is accumulated. Exponent `i` is the accumulated sum
//! over all samples divided by `(T - warmup) * K`.

use crate::cells::{principal_submatrix, NetworkState};
use crate::error::{Error, Result};
use crate::linalg::{qr_decompose, Matrix};
use crate::training::SparseModel;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Diagonal entries of `R` below this are clamped before the log.
pub const CLAMP_EPS: f64 = 1e-30;

/// A map whose Jacobian drives the tangent dynamics.
pub trait Dynamics {
    type State: Clone;
    type Input;
    fn initial_state(&self) -> Self::State;
    /// Dimension of the tangent space (the spectrum length).
    fn dim(&self) -> usize;
    fn step_with_jacobian(&self, state: &Self::State, input: &Self::Input) -> Result<(Self::State, Matrix)>;
}

/// Time-invariant linear map `h' = A h`, ignoring its input.
#[derive(Clone, Debug)]
pub struct LinearCell {
    pub a: Matrix,
}

impl Dynamics for LinearCell {
    type State = Vec<f64>;
    type Input = ();

    fn initial_state(&self) -> Vec<f64> {
        vec![0.0; self.a.rows()]
    }

    fn dim(&self) -> usize {
        self.a.rows()
    }

    fn step_with_jacobian(&self, state: &Vec<f64>, _: &()) -> Result<(Vec<f64>, Matrix)> {
        Ok((self.a.matvec(state)?, self.a.clone()))
    }
}

/// Which coordinates of the flattened recurrent state the spectrum covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSpace {
    /// Every hidden and cell entry.
    #[default]
    Full,
    /// Hidden entries only: the tangent map is the principal submatrix of the
    /// full Jacobian on the `h` coordinates.
    HiddenOnly,
}

/// A language model viewed as a token-driven dynamical system.
pub struct ModelDynamics<'a> {
    pub model: &'a SparseModel,
    pub space: StateSpace,
    hidden_idx: Vec<usize>,
}

impl<'a> ModelDynamics<'a> {
    pub fn new(model: &'a SparseModel, space: StateSpace) -> Self {
        Self {
            model,
            space,
            hidden_idx: model.zero_state().hidden_indices(),
        }
    }
}

impl Dynamics for ModelDynamics<'_> {
    type State = NetworkState;
    type Input = u32;

    fn initial_state(&self) -> NetworkState {
        self.model.zero_state()
    }

    fn dim(&self) -> usize {
        match self.space {
            StateSpace::Full => self.model.spec.state_dim(),
            StateSpace::HiddenOnly => self.hidden_idx.len(),
        }
    }

    fn step_with_jacobian(&self, state: &NetworkState, token: &u32) -> Result<(NetworkState, Matrix)> {
        let (next, j) = self.model.step_with_jacobian(state, *token)?;
        Ok(match self.space {
            StateSpace::Full => (next, j),
            StateSpace::HiddenOnly => (next, principal_submatrix(&j, &self.hidden_idx)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSpectrum {
    /// Sorted descending.
    pub exponents: Vec<f64>,
    pub k: usize,
    pub t: usize,
    pub warmup: usize,
    pub clamp_events: usize,
}

/// Running QR state of one sample.
pub struct LsComputationState {
    pub basis: Matrix,
    pub log_sums: Vec<f64>,
    pub steps: usize,
    pub clamp_events: usize,
}

impl LsComputationState {
    pub fn new(n: usize) -> Self {
        Self {
            basis: Matrix::identity(n),
            log_sums: vec![0.0; n],
            steps: 0,
            clamp_events: 0,
        }
    }

    /// Advances the basis by `jacobian`; accumulates the logs when `record`.
    pub fn advance(&mut self, jacobian: &Matrix, record: bool) -> Result<()> {
        let n = self.basis.rows();
        if jacobian.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "Jacobian is {:?} for a tangent space of dimension {n}",
                jacobian.shape()
            )));
        }
        let (q, r) = qr_decompose(&jacobian.matmul(&self.basis)?)?;
        self.basis = q;
        if record {
            for (i, s) in self.log_sums.iter_mut().enumerate() {
                let d = r[(i, i)];
                if d < CLAMP_EPS {
                    self.clamp_events += 1;
                }
                *s += d.max(CLAMP_EPS).ln();
            }
            self.steps += 1;
        }
        Ok(())
    }
}

pub fn compute_ls<D: Dynamics>(dynamics: &D, batch: &[Vec<D::Input>], warmup: usize) -> Result<LyapunovSpectrum> {
    let k = batch.len();
    let t = batch.first().map_or(0, Vec::len);
    if k == 0 || t == 0 {
        return Err(Error::InvalidArgument(format!("LS batch needs K >= 1 and T >= 1, got K={k}, T={t}")));
    }
    if batch.iter().any(|s| s.len() != t) {
        return Err(Error::InvalidArgument("LS sequences differ in length".into()));
    }
    if warmup >= t {
        return Err(Error::InvalidArgument(format!("warmup {warmup} must be below T={t}")));
    }
    let n = dynamics.dim();
    let mut totals = vec![0.0; n];
    let mut clamp_events = 0;
    for seq in batch {
        let mut st = LsComputationState::new(n);
        let mut state = dynamics.initial_state();
        for (step, x) in seq.iter().enumerate() {
            let (next, j) = dynamics.step_with_jacobian(&state, x)?;
            st.advance(&j, step >= warmup)?;
            state = next;
        }
        totals.iter_mut().zip(&st.log_sums).for_each(|(a, s)| *a += s);
        clamp_events += st.clamp_events;
    }
    let denom = ((t - warmup) * k) as f64;
    let mut exponents: Vec<f64> = totals.iter().map(|s| s / denom).collect();
    exponents.sort_by(|a, b| b.total_cmp(a));
    Ok(LyapunovSpectrum {
        exponents,
        k,
        t,
        warmup,
        clamp_events,
    })
}

/// `k` disjoint consecutive windows of `t` tokens starting at `offset`.
pub fn ls_windows(tokens: &[u32], k: usize, t: usize, offset: usize) -> Result<Vec<Vec<u32>>> {
    let need = offset + k * t;
    if need > tokens.len() {
        return Err(Error::InvalidArgument(format!(
            "{k} windows of {t} tokens from offset {offset} need {need} tokens, have {}",
            tokens.len()
        )));
    }
    Ok((0..k).map(|i| tokens[offset + i * t..offset + (i + 1) * t].to_vec()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumStats {
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
}

pub fn spectrum_stats(exponents: &[f64]) -> Result<SpectrumStats> {
    if exponents.is_empty() {
        return Err(Error::InvalidArgument("spectrum is empty".into()));
    }
    let n = exponents.len() as f64;
    let mean = exponents.iter().sum::<f64>() / n;
    let variance = exponents.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(SpectrumStats {
        max: exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min: exponents.iter().copied().fold(f64::INFINITY, f64::min),
        mean,
        variance,
    })
}

/// One row per exponent: `index,lambda`.
pub fn write_spectrum_csv(path: &Path, exponents: &[f64]) -> Result<()> {
    let csv_err = |e| Error::Csv {
        context: path.display().to_string(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["index", "lambda"]).map_err(csv_err)?;
    for (i, v) in exponents.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_spectrum_csv(path: &Path) -> Result<Vec<f64>> {
    let csv_err = |e| Error::Csv {
        context: path.display().to_string(),
        source: e,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let idx: usize = rec[0]
            .parse()
            .map_err(|_| Error::InvalidData(format!("{}: bad index on row {i}", path.display())))?;
        if idx != i {
            return Err(Error::InvalidData(format!("{}: rows out of order", path.display())));
        }
        out.push(
            rec[1]
                .parse()
                .map_err(|_| Error::InvalidData(format!("{}: bad lambda on row {i}", path.display())))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsity::InitMode;
    use crate::training::{ArchKind, ModelSpec};

    #[test]
    fn diagonal_map_gives_log_moduli() {
        let cell = LinearCell {
            a: Matrix::from_diag(&[2.0, 1.0, 0.5]),
        };
        for t in [1, 5, 50] {
            let ls = compute_ls(&cell, &[vec![(); t]], 0).unwrap();
            let want = [2f64.ln(), 0.0, -(2f64.ln())];
            for (a, b) in ls.exponents.iter().zip(want) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn negative_diagonal_uses_modulus() {
        let cell = LinearCell {
            a: Matrix::from_diag(&[-3.0, 0.25]),
        };
        let ls = compute_ls(&cell, &[vec![(); 10]], 2).unwrap();
        assert!((ls.exponents[0] - 3f64.ln()).abs() < 1e-12);
        assert!((ls.exponents[1] - 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_map_clamps() {
        let cell = LinearCell { a: Matrix::zeros(2, 2) };
        let ls = compute_ls(&cell, &[vec![(); 4]], 0).unwrap();
        assert_eq!(ls.clamp_events, 8);
        assert!(ls.exponents.iter().all(|v| (v - CLAMP_EPS.ln()).abs() < 1e-9));
    }

    #[test]
    fn invalid_batches() {
        let cell = LinearCell { a: Matrix::identity(2) };
        assert!(compute_ls(&cell, &[], 0).is_err());
        assert!(compute_ls(&cell, &[vec![]], 0).is_err());
        assert!(compute_ls(&cell, &[vec![(); 3]], 3).is_err());
        assert!(compute_ls(&cell, &[vec![(); 3], vec![(); 2]], 0).is_err());
    }

    #[test]
    fn stats() {
        let s = spectrum_stats(&[-1.0, -2.0, -3.0]).unwrap();
        assert_eq!((s.max, s.min, s.mean), (-1.0, -3.0, -2.0));
        assert!((s.variance - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(spectrum_stats(&[0.7; 4]).unwrap().variance, 0.0);
        assert!(spectrum_stats(&[]).is_err());
    }

    #[test]
    fn model_spectrum_lengths() {
        let spec = ModelSpec {
            arch: ArchKind::StackedLstm,
            vocab: 5,
            embed: 4,
            hidden: 3,
            layers: 2,
            coupled: false,
            tied: false,
            dropout: 0.0,
        };
        let m = SparseModel::new(spec, InitMode::Uniform, 0.5, 0).unwrap();
        let batch = vec![vec![0, 1, 2, 3, 4, 0], vec![4, 4, 3, 2, 1, 0]];
        let full = compute_ls(&ModelDynamics::new(&m, StateSpace::Full), &batch, 1).unwrap();
        assert_eq!(full.exponents.len(), 12);
        let h = compute_ls(&ModelDynamics::new(&m, StateSpace::HiddenOnly), &batch, 1).unwrap();
        assert_eq!(h.exponents.len(), 6);
        assert!(full.exponents.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let v = vec![0.5, -1.25e-7, -3.0];
        write_spectrum_csv(&p, &v).unwrap();
        assert_eq!(read_spectrum_csv(&p).unwrap(), v);
    }

    #[test]
    fn windows_are_disjoint() {
        let tokens: Vec<u32> = (0..20).collect();
        let w = ls_windows(&tokens, 2, 4, 3).unwrap();
        assert_eq!(w, vec![vec![3, 4, 5, 6], vec![7, 8, 9, 10]]);
        assert!(ls_windows(&tokens, 3, 8, 0).is_err());
    }
}
