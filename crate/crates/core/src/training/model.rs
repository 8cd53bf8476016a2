use crate::cells::{lstm_step, lstm_step_with_jacobian, rhn_step, rhn_step_with_jacobian, LstmLayer, NetworkState, RhnParams};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seed::{derive_seed, rng_for};
use crate::sparsity::{apply_death, grow, redistribute, sparse_init, DeathMode, InitMode, MaskSet, RedistMode};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    StackedLstm,
    Rhn,
}

/// Architecture and dimensions of a language model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: ArchKind,
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    /// Stacked LSTM layers, or recurrence depth for RHN.
    pub layers: usize,
    /// RHN only: carry gate tied to `1 - transform`.
    pub coupled: bool,
    /// Decoder shares the embedding matrix (needs `embed == hidden`).
    pub tied: bool,
    /// Dropout probability on the hidden-to-output path.
    pub dropout: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.embed == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::InvalidArgument(format!(
                "model dimensions must be positive: vocab {}, embed {}, hidden {}, layers {}",
                self.vocab, self.embed, self.hidden, self.layers
            )));
        }
        if self.tied && self.embed != self.hidden {
            return Err(Error::InvalidArgument(format!(
                "tied weights need embed == hidden, got {} and {}",
                self.embed, self.hidden
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Shapes of the prunable matrices in mask order: `[W_0, U_0, W_1, ...]`
    /// for LSTM, `[W, R_1, ..., R_L]` for RHN.
    pub fn prunable_shapes(&self) -> Vec<(usize, usize)> {
        let h = self.hidden;
        match self.arch {
            ArchKind::StackedLstm => (0..self.layers)
                .flat_map(|l| {
                    let input = if l == 0 { self.embed } else { h };
                    [(4 * h, input), (4 * h, h)]
                })
                .collect(),
            ArchKind::Rhn => {
                let g = RhnParams::gates(self.coupled);
                std::iter::once((g * h, self.embed))
                    .chain((0..self.layers).map(|_| (g * h, h)))
                    .collect()
            }
        }
    }

    /// Dimension of the flattened recurrent state.
    pub fn state_dim(&self) -> usize {
        match self.arch {
            ArchKind::StackedLstm => 2 * self.hidden * self.layers,
            ArchKind::Rhn => self.hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CellParams {
    Lstm(Vec<LstmLayer>),
    Rhn(RhnParams),
}

/// Embedding, recurrent core and softmax decoder, with masks over the
/// recurrent and input matrices of the core. Weights at masked positions are
/// held at exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseModel {
    pub spec: ModelSpec,
    /// `vocab x embed`.
    pub embedding: Matrix,
    pub cell: CellParams,
    /// `vocab x hidden`; `None` when tied to the embedding.
    pub decoder: Option<Matrix>,
    pub decoder_bias: Vec<f64>,
    pub masks: MaskSet,
}

/// Counts from one prune-regrow cycle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CycleStats {
    pub removed: usize,
    pub fell_back: bool,
}

impl SparseModel {
    pub fn new(spec: ModelSpec, init: InitMode, sparsity: f64, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_for(seed, "model_init", 0);
        let (v, e, h) = (spec.vocab, spec.embed, spec.hidden);
        let embedding = Matrix::from_fn(v, e, |_, _| rng.random_range(-0.1..=0.1));
        let cell = match spec.arch {
            ArchKind::StackedLstm => CellParams::Lstm(
                (0..spec.layers)
                    .map(|l| LstmLayer::random(h, if l == 0 { e } else { h }, &mut rng))
                    .collect(),
            ),
            ArchKind::Rhn => CellParams::Rhn(RhnParams::random(h, e, spec.layers, spec.coupled, &mut rng)),
        };
        let decoder = (!spec.tied).then(|| {
            let bound = 1.0 / (h as f64).sqrt();
            Matrix::from_fn(v, h, |_, _| rng.random_range(-bound..=bound))
        });
        let masks = sparse_init(&spec.prunable_shapes(), init, sparsity, derive_seed(seed, "mask_init", 0))?;
        let mut model = Self {
            decoder_bias: vec![0.0; v],
            spec,
            embedding,
            cell,
            decoder,
            masks,
        };
        model.apply_masks();
        Ok(model)
    }

    pub fn dense(spec: ModelSpec, seed: u64) -> Result<Self> {
        Self::new(spec, InitMode::Uniform, 0.0, seed)
    }

    /// Checks every tensor against `self.spec`; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let s = &self.spec;
        let bad = |what: &str| Error::Dimension(format!("{what} does not match the model spec"));
        if self.embedding.shape() != (s.vocab, s.embed) {
            return Err(bad("embedding"));
        }
        match (&self.cell, s.arch) {
            (CellParams::Lstm(layers), ArchKind::StackedLstm) => {
                if layers.len() != s.layers {
                    return Err(bad("LSTM layer count"));
                }
            }
            (CellParams::Rhn(p), ArchKind::Rhn) => {
                if p.depth() != s.layers || p.coupled != s.coupled || p.b.len() != s.layers {
                    return Err(bad("RHN depth"));
                }
            }
            _ => return Err(bad("cell type")),
        }
        let cell_shapes: Vec<(usize, usize)> = self.prunable_matrices().iter().map(|m| m.shape()).collect();
        if cell_shapes != s.prunable_shapes() {
            return Err(bad("recurrent weight shapes"));
        }
        self.masks.check_shapes(&cell_shapes)?;
        match (&self.decoder, s.tied) {
            (None, true) => {}
            (Some(d), false) if d.shape() == (s.vocab, s.hidden) => {}
            _ => return Err(bad("decoder")),
        }
        if self.decoder_bias.len() != s.vocab {
            return Err(bad("decoder bias"));
        }
        for (name, t) in self.tensor_names().iter().zip(self.tensors()) {
            if !t.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("tensor {name} has non-finite entries")));
            }
        }
        Ok(())
    }

    fn prunable_matrices(&self) -> Vec<&Matrix> {
        match &self.cell {
            CellParams::Lstm(layers) => layers.iter().flat_map(|l| [&l.w, &l.u]).collect(),
            CellParams::Rhn(p) => std::iter::once(&p.w).chain(p.r.iter()).collect(),
        }
    }

    fn prunable_matrices_mut(&mut self) -> Vec<&mut Matrix> {
        match &mut self.cell {
            CellParams::Lstm(layers) => layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.u]).collect(),
            CellParams::Rhn(p) => std::iter::once(&mut p.w).chain(p.r.iter_mut()).collect(),
        }
    }

    pub fn prunable_weights(&self) -> Vec<&[f64]> {
        self.prunable_matrices().into_iter().map(Matrix::data).collect()
    }

    pub fn apply_masks(&mut self) {
        let masks = std::mem::take(&mut self.masks.masks);
        for (w, m) in self.prunable_matrices_mut().into_iter().zip(&masks) {
            m.apply(w.data_mut());
        }
        self.masks.masks = masks;
    }

    /// Every trainable tensor in a fixed order: embedding, cell tensors,
    /// decoder (untied only), decoder bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.embedding.data()];
        match &self.cell {
            CellParams::Lstm(layers) => {
                for l in layers {
                    out.extend([l.w.data(), l.u.data(), l.b.as_slice()]);
                }
            }
            CellParams::Rhn(p) => {
                out.push(p.w.data());
                out.extend(p.r.iter().map(Matrix::data));
                out.extend(p.b.iter().map(Vec::as_slice));
            }
        }
        if let Some(d) = &self.decoder {
            out.push(d.data());
        }
        out.push(&self.decoder_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.embedding.data_mut()];
        match &mut self.cell {
            CellParams::Lstm(layers) => {
                for l in layers {
                    out.push(l.w.data_mut());
                    out.push(l.u.data_mut());
                    out.push(l.b.as_mut_slice());
                }
            }
            CellParams::Rhn(p) => {
                out.push(p.w.data_mut());
                out.extend(p.r.iter_mut().map(Matrix::data_mut));
                out.extend(p.b.iter_mut().map(Vec::as_mut_slice));
            }
        }
        if let Some(d) = &mut self.decoder {
            out.push(d.data_mut());
        }
        out.push(&mut self.decoder_bias);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["embedding".to_string()];
        match &self.cell {
            CellParams::Lstm(layers) => {
                for l in 0..layers.len() {
                    out.extend([format!("lstm{l}.w"), format!("lstm{l}.u"), format!("lstm{l}.b")]);
                }
            }
            CellParams::Rhn(p) => {
                out.push("rhn.w".into());
                out.extend((1..=p.depth()).map(|l| format!("rhn.r{l}")));
                out.extend((1..=p.depth()).map(|l| format!("rhn.b{l}")));
            }
        }
        if self.decoder.is_some() {
            out.push("decoder".into());
        }
        out.push("decoder_bias".into());
        out
    }

    /// Positions in [`tensors`](Self::tensors) of the prunable matrices, in
    /// mask order.
    pub fn prunable_tensor_indices(&self) -> Vec<usize> {
        match &self.cell {
            CellParams::Lstm(layers) => (0..layers.len()).flat_map(|l| [1 + 3 * l, 2 + 3 * l]).collect(),
            CellParams::Rhn(p) => (1..=1 + p.depth()).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zero_state(&self) -> NetworkState {
        match &self.cell {
            CellParams::Lstm(layers) => NetworkState::zeros_lstm(&vec![self.spec.hidden; layers.len()]),
            CellParams::Rhn(_) => NetworkState::zeros_rhn(self.spec.hidden),
        }
    }

    fn embed_token(&self, token: u32) -> Result<&[f64]> {
        let t = token as usize;
        if t >= self.spec.vocab {
            return Err(Error::Dimension(format!("token {t} outside vocabulary of {}", self.spec.vocab)));
        }
        Ok(self.embedding.row(t))
    }

    /// Advances the recurrent core by one token.
    pub fn step(&self, state: &NetworkState, token: u32) -> Result<NetworkState> {
        let x = self.embed_token(token)?;
        match &self.cell {
            CellParams::Lstm(layers) => lstm_step(layers, Some(&self.masks), state, x),
            CellParams::Rhn(p) => Ok(NetworkState {
                h: vec![rhn_step(p, Some(&self.masks), &state.h[0], x)?],
                c: Vec::new(),
            }),
        }
    }

    /// [`step`](Self::step) plus the Jacobian of the flattened state.
    pub fn step_with_jacobian(&self, state: &NetworkState, token: u32) -> Result<(NetworkState, Matrix)> {
        let x = self.embed_token(token)?;
        match &self.cell {
            CellParams::Lstm(layers) => lstm_step_with_jacobian(layers, Some(&self.masks), state, x),
            CellParams::Rhn(p) => {
                let (h, j) = rhn_step_with_jacobian(p, Some(&self.masks), &state.h[0], x)?;
                Ok((NetworkState { h: vec![h], c: Vec::new() }, j))
            }
        }
    }

    /// One death / redistribution / growth cycle at the given death rate.
    pub fn prune_regrow(&mut self, rate: f64, death: DeathMode, redist: RedistMode, seed: u64) -> Result<CycleStats> {
        let weights = self.prunable_weights();
        let (dead, removed) = apply_death(&weights, &self.masks, rate, death)?;
        let plan = redistribute(&removed, &weights, &dead, redist)?;
        let grown = grow(&dead, &plan.quotas, seed)?;
        self.masks = grown;
        // Dead weights drop to zero; grown ones were masked and are zero already.
        self.apply_masks();
        Ok(CycleStats {
            removed: removed.iter().sum(),
            fell_back: plan.fell_back,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(arch: ArchKind) -> ModelSpec {
        ModelSpec {
            arch,
            vocab: 7,
            embed: 5,
            hidden: 6,
            layers: 2,
            coupled: true,
            tied: false,
            dropout: 0.0,
        }
    }

    #[test]
    fn masked_entries_are_zero() {
        for arch in [ArchKind::StackedLstm, ArchKind::Rhn] {
            let m = SparseModel::new(spec(arch), InitMode::Er, 0.6, 3).unwrap();
            for (w, mask) in m.prunable_weights().iter().zip(&m.masks.masks) {
                for (i, v) in w.iter().enumerate() {
                    if !mask.is_active(i) {
                        assert_eq!(*v, 0.0);
                    }
                }
            }
            assert_eq!(m.masks.nonzeros(), m.masks.budget());
            m.validate().unwrap();
        }
    }

    #[test]
    fn tensor_layout_is_consistent() {
        for arch in [ArchKind::StackedLstm, ArchKind::Rhn] {
            let mut m = SparseModel::new(spec(arch), InitMode::Uniform, 0.5, 1).unwrap();
            let names = m.tensor_names();
            assert_eq!(names.len(), m.tensors().len());
            assert_eq!(m.tensors_mut().len(), names.len());
            let shapes = m.spec.prunable_shapes();
            let tensors = m.tensors();
            for (k, &idx) in m.prunable_tensor_indices().iter().enumerate() {
                assert_eq!(tensors[idx].len(), shapes[k].0 * shapes[k].1);
                assert_eq!(tensors[idx].as_ptr(), m.prunable_weights()[k].as_ptr());
            }
        }
    }

    #[test]
    fn state_dim_matches_zero_state() {
        for arch in [ArchKind::StackedLstm, ArchKind::Rhn] {
            let m = SparseModel::dense(spec(arch), 0).unwrap();
            assert_eq!(m.zero_state().dim(), m.spec.state_dim());
            let (s, j) = m.step_with_jacobian(&m.zero_state(), 3).unwrap();
            assert_eq!(s, m.step(&m.zero_state(), 3).unwrap());
            assert_eq!(j.shape(), (m.spec.state_dim(), m.spec.state_dim()));
        }
    }

    #[test]
    fn prune_regrow_conserves_budget() {
        let mut m = SparseModel::new(spec(ArchKind::StackedLstm), InitMode::Er, 0.67, 9).unwrap();
        let before = m.masks.nonzeros();
        let stats = m.prune_regrow(0.5, DeathMode::Set, RedistMode::Magnitude, 4).unwrap();
        assert!(stats.removed > 0);
        assert_eq!(m.masks.nonzeros(), before);
    }

    #[test]
    fn tied_needs_matching_dims() {
        let mut s = spec(ArchKind::StackedLstm);
        s.tied = true;
        assert!(SparseModel::dense(s.clone(), 0).is_err());
        s.embed = s.hidden;
        let m = SparseModel::dense(s, 0).unwrap();
        assert!(m.decoder.is_none());
    }

    #[test]
    fn out_of_vocab_token() {
        let m = SparseModel::dense(spec(ArchKind::Rhn), 0).unwrap();
        assert!(matches!(m.step(&m.zero_state(), 99), Err(Error::Dimension(_))));
    }
}
