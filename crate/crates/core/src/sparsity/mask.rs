use crate::error::{Error, Result};
use crate::linalg::Matrix;
use serde::{Deserialize, Serialize};

/// Binary keep-mask over one prunable weight matrix (row-major, same shape).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    rows: usize,
    cols: usize,
    active: Vec<bool>,
}

impl Mask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            active: vec![true; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            active: vec![false; rows * cols],
        }
    }

    pub fn from_active(rows: usize, cols: usize, active: Vec<bool>) -> Result<Self> {
        if active.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} mask needs {} entries, got {}",
                rows * cols,
                active.len()
            )));
        }
        Ok(Self { rows, cols, active })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn nonzeros(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn inactive(&self) -> usize {
        self.len() - self.nonzeros()
    }

    #[inline]
    pub fn is_active(&self, idx: usize) -> bool {
        self.active[idx]
    }

    #[inline]
    pub fn set(&mut self, idx: usize, on: bool) {
        self.active[idx] = on;
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    /// Zeroes every entry of `values` that the mask switches off.
    pub fn apply(&self, values: &mut [f64]) {
        debug_assert_eq!(values.len(), self.active.len());
        for (v, &on) in values.iter_mut().zip(&self.active) {
            if !on {
                *v = 0.0;
            }
        }
    }

    pub fn masked(&self, w: &Matrix) -> Result<Matrix> {
        if w.shape() != self.shape() {
            return Err(Error::Dimension(format!(
                "mask {:?} does not match weight {:?}",
                self.shape(),
                w.shape()
            )));
        }
        let mut out = w.clone();
        self.apply(out.data_mut());
        Ok(out)
    }
}

/// One mask per prunable weight matrix, in the model's prunable order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub masks: Vec<Mask>,
    pub global_sparsity: f64,
}

impl MaskSet {
    pub fn dense(shapes: &[(usize, usize)]) -> Self {
        Self {
            masks: shapes.iter().map(|&(r, c)| Mask::ones(r, c)).collect(),
            global_sparsity: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.masks.iter().map(Mask::shape).collect()
    }

    pub fn total(&self) -> usize {
        self.masks.iter().map(Mask::len).sum()
    }

    pub fn nonzeros(&self) -> usize {
        self.masks.iter().map(Mask::nonzeros).sum()
    }

    pub fn per_layer_nonzeros(&self) -> Vec<usize> {
        self.masks.iter().map(Mask::nonzeros).collect()
    }

    /// Nonzero budget implied by the global sparsity.
    pub fn budget(&self) -> usize {
        nonzero_budget(self.total(), self.global_sparsity)
    }

    pub fn check_shapes(&self, shapes: &[(usize, usize)]) -> Result<()> {
        if self.shapes() != shapes {
            return Err(Error::Dimension(format!(
                "mask shapes {:?} do not match weights {:?}",
                self.shapes(),
                shapes
            )));
        }
        Ok(())
    }
}

pub(crate) fn nonzero_budget(total: usize, sparsity: f64) -> usize {
    ((1.0 - sparsity) * total as f64).round() as usize
}
