//! Model checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "LSHCKPT\0"
//! version   u32      currently 1
//! hlen      u64      length of the JSON header
//! header    hlen bytes, UTF-8 JSON:
//!             { "spec": ModelSpec, "global_sparsity": f64,
//!               "tensors": [{"name", "len"}...], "masks": [{"rows", "cols"}...] }
//! tensors   f64 values, tensor by tensor in header order
//! masks     one byte (0 or 1) per entry, mask by mask in header order
//! digest    32 bytes, SHA-256 of everything above
//! ```
//!
//! Parameters are stored as raw IEEE-754 bits, so a save/load round trip is
//! bit-exact.

use crate::error::{Error, Result};
use crate::sparsity::{InitMode, Mask, MaskSet};
use crate::training::{ModelSpec, SparseModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 8] = b"LSHCKPT\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ModelSpec,
    global_sparsity: f64,
    tensors: Vec<TensorEntry>,
    masks: Vec<MaskEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskEntry {
    rows: usize,
    cols: usize,
}

pub fn to_bytes(model: &SparseModel) -> Result<Vec<u8>> {
    let header = Header {
        spec: model.spec.clone(),
        global_sparsity: model.masks.global_sparsity,
        tensors: model
            .tensor_names()
            .into_iter()
            .zip(model.tensors())
            .map(|(name, t)| TensorEntry { name, len: t.len() })
            .collect(),
        masks: model
            .masks
            .masks
            .iter()
            .map(|m| {
                let (rows, cols) = m.shape();
                MaskEntry { rows, cols }
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Json {
        context: "checkpoint header".into(),
        source: e,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for m in &model.masks.masks {
        out.extend(m.active().iter().map(|&a| a as u8));
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::InvalidData("checkpoint is truncated".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<SparseModel> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 32 {
        return Err(Error::InvalidData("checkpoint is truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::InvalidData("checkpoint digest mismatch".into()));
    }
    let mut r = Reader { bytes: body, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::InvalidData("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::InvalidData(format!("unsupported checkpoint version {version}")));
    }
    let hlen = usize::try_from(r.u64()?).map_err(|_| Error::InvalidData("header too large".into()))?;
    let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Json {
        context: "checkpoint header".into(),
        source: e,
    })?;

    let mut model = SparseModel::new(header.spec, InitMode::Uniform, 0.0, 0)?;
    let names = model.tensor_names();
    if names.len() != header.tensors.len() {
        return Err(Error::InvalidData("checkpoint tensor list does not match its spec".into()));
    }
    for ((dst, name), entry) in model.tensors_mut().into_iter().zip(&names).zip(&header.tensors) {
        if *name != entry.name || dst.len() != entry.len {
            return Err(Error::InvalidData(format!("checkpoint tensor {} does not match its spec", entry.name)));
        }
        let raw = r.take(entry.len.checked_mul(8).ok_or_else(|| Error::InvalidData("tensor too large".into()))?)?;
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    let mut masks = Vec::with_capacity(header.masks.len());
    for entry in &header.masks {
        let raw = r.take(entry.rows * entry.cols)?;
        let active = raw
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::InvalidData("mask byte is not 0 or 1".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        masks.push(Mask::from_active(entry.rows, entry.cols, active)?);
    }
    if r.at != body.len() {
        return Err(Error::InvalidData("trailing bytes in checkpoint".into()));
    }
    model.masks = MaskSet {
        masks,
        global_sparsity: header.global_sparsity,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_checkpoint(model: &SparseModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<SparseModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::ArchKind;

    fn model(arch: ArchKind, tied: bool) -> SparseModel {
        let spec = ModelSpec {
            arch,
            vocab: 9,
            embed: 6,
            hidden: 6,
            layers: 2,
            coupled: false,
            tied,
            dropout: 0.1,
        };
        SparseModel::new(spec, InitMode::Er, 0.6, 12).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for (arch, tied) in [(ArchKind::StackedLstm, false), (ArchKind::Rhn, true)] {
            let mut m = model(arch, tied);
            m.decoder_bias[0] = -0.0;
            m.decoder_bias[1] = f64::MIN_POSITIVE / 3.0;
            let back = from_bytes(&to_bytes(&m).unwrap()).unwrap();
            assert_eq!(back.masks, m.masks);
            for (a, b) in back.tensors().iter().zip(m.tensors()) {
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = to_bytes(&model(ArchKind::StackedLstm, false)).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(from_bytes(&bytes), Err(Error::InvalidData(_))));
        assert!(from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model(ArchKind::Rhn, false);
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
