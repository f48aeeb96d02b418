//! Binary predictor checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` metadata length, the
//! metadata as JSON, then for every trained layer five length-prefixed
//! little-endian `f64` arrays (PCA mean, PCA components, PCA variances,
//! whitening scale, parameters), and finally the raw 32-byte SHA-256 of
//! everything before it. Reals are stored as raw bits, so loading is exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::LayerNet;
use super::train::{LLaPor, TrainConfig};
use super::HotExpertTable;
use crate::error::{Error, Result};
use crate::util::write_atomic;
use crate::workload::ModelSpec;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MOEPRED\0";

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: ModelSpec,
    config: TrainConfig,
    trace_checksum: String,
    table: HotExpertTable,
    nets: Vec<Option<LayerNet>>,
    /// Requested PCA dimension per trained layer.
    pca_requested: Vec<usize>,
}

fn put_array(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &LLaPor) -> Result<Vec<u8>> {
    let trained: Vec<&LayerNet> = model.nets.iter().flatten().collect();
    let meta = Meta {
        spec: model.spec.clone(),
        config: model.config.clone(),
        trace_checksum: model.trace_checksum.clone(),
        table: model.table.clone(),
        nets: model.nets.clone(),
        pca_requested: trained.iter().map(|n| n.pca.requested).collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for net in trained {
        for a in [&net.pca.mean, &net.pca.components, &net.pca.variances, &net.scale, &net.params] {
            put_array(&mut out, a);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array(&mut self) -> Result<Vec<f64>> {
        let n = usize::try_from(self.u64()?).map_err(|_| Error::format(self.path, "array too long"))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "array too long"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap()))).collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<LLaPor> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a predictor checkpoint"));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if found != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 32);
    let actual = Sha256::digest(body);
    if actual.as_slice() != tail {
        return Err(Error::ChecksumMismatch {
            expected: hex(tail),
            actual: hex(&actual),
        });
    }
    let mut r = Reader {
        bytes: body,
        pos: 12,
        path,
    };
    let len = r.u64()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(len)?).map_err(|e| Error::format(path, format!("metadata: {e}")))?;
    let mut nets = meta.nets;
    let mut requested = meta.pca_requested.into_iter();
    let hidden = meta.spec.hidden_dim;
    for net in nets.iter_mut().flatten() {
        net.pca.mean = r.array()?;
        net.pca.components = r.array()?;
        net.pca.variances = r.array()?;
        net.scale = r.array()?;
        net.params = r.array()?;
        net.pca.requested = requested.next().ok_or_else(|| Error::format(path, "missing PCA metadata"))?;
        let d = net.pca.dim();
        let consistent = net.pca.mean.len() == hidden
            && net.pca.components.len() == d * hidden
            && net.scale.len() == d
            && net.params.len() == net.layout_len();
        if !consistent {
            return Err(Error::format(path, format!("layer {} tensors have inconsistent shapes", net.target_layer)));
        }
    }
    if r.pos != body.len() {
        return Err(Error::format(path, "trailing bytes after tensors"));
    }
    Ok(LLaPor {
        spec: meta.spec,
        config: meta.config,
        nets,
        table: meta.table,
        trace_checksum: meta.trace_checksum,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(model: &LLaPor, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LLaPor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
