use crate::error::{Error, Result};

/// Token stream cut into `batch_size` contiguous columns and read in windows
/// of `bptt` steps. Column `b` holds tokens `[b * rows, (b + 1) * rows)` of
/// the source; a trailing remainder that does not fill a row is dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSet {
    batch_size: usize,
    bptt: usize,
    rows: usize,
    /// Row-major `rows x batch_size`: entry `(t, b)` at `t * batch_size + b`.
    data: Vec<u32>,
}

pub fn make_batches(ids: &[u32], batch_size: usize, bptt: usize) -> Result<BatchSet> {
    if batch_size == 0 || bptt == 0 {
        return Err(Error::InvalidArgument("batch size and bptt must be positive".into()));
    }
    if ids.len() < batch_size * (bptt + 1) {
        return Err(Error::InvalidArgument(format!(
            "{} tokens cannot fill one {batch_size} x {bptt} block plus targets",
            ids.len()
        )));
    }
    let rows = ids.len() / batch_size;
    let mut data = vec![0; rows * batch_size];
    for b in 0..batch_size {
        for t in 0..rows {
            data[t * batch_size + b] = ids[b * rows + t];
        }
    }
    Ok(BatchSet {
        batch_size,
        bptt,
        rows,
        data,
    })
}

impl BatchSet {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn bptt(&self) -> usize {
        self.bptt
    }

    pub fn num_blocks(&self) -> usize {
        (self.rows - 1) / self.bptt
    }

    /// Inputs and targets of block `j`, each `bptt x batch_size` row-major.
    pub fn block(&self, j: usize) -> (&[u32], &[u32]) {
        assert!(j < self.num_blocks(), "block {j} out of range");
        let w = self.bptt * self.batch_size;
        let start = j * w;
        (&self.data[start..start + w], &self.data[start + self.batch_size..start + self.batch_size + w])
    }
}
