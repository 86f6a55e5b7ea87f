//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "FPRV"  u32 version  u32 group_count
//! group_count × { u32 name_len, name, u32 ndims, ndims × u64 dim, u64 offset }
//! u64 value_count, value_count × f64
//! 32-byte SHA-256 of every preceding byte
//! ```
//!
//! The first group, `meta`, holds the model configuration; the remaining
//! groups are the parameters in [`DetectorModel::param_names`] order.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::DetectorModel;
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub const MAGIC: &[u8; 4] = b"FPRV";
pub const VERSION: u32 = 1;
const META: &str = "meta";

struct Group {
    name: String,
    dims: Vec<u64>,
    offset: u64,
}

/// Serializes a model.
pub fn to_bytes(model: &DetectorModel) -> Vec<u8> {
    let meta = model.meta_values();
    let mut groups: Vec<(String, Vec<u64>, Vec<f64>)> = vec![(META.into(), vec![meta.len() as u64, 1, 1], meta)];
    for (name, p) in model.params() {
        let (c, h, w) = p.dims();
        groups.push((name.into(), vec![c as u64, h as u64, w as u64], p.as_slice().to_vec()));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, dims, values) in &groups {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += values.len() as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (_, _, values) in &groups {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint. Any defect yields an error and no model.
pub fn from_bytes(bytes: &[u8]) -> Result<DetectorModel> {
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (file truncated or corrupted)".into()));
    }

    let mut r = Reader { buf: body, pos: 8 };
    let count = r.u32("group count")? as usize;
    let mut groups = Vec::with_capacity(count.min(64));
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "group name")?)
            .map_err(|_| Error::Checkpoint(format!("group {i} name is not UTF-8")))?
            .to_string();
        let ndims = r.u32("ndims")? as usize;
        if ndims > 8 {
            return Err(Error::Checkpoint(format!("group {name} has {ndims} dims")));
        }
        let dims = (0..ndims).map(|_| r.u64("dim")).collect::<Result<Vec<_>>>()?;
        let offset = r.u64("offset")?;
        groups.push(Group { name, dims, offset });
    }
    let n_values = r.u64("value count")? as usize;
    let raw = r.take(n_values.checked_mul(8).ok_or_else(|| Error::Checkpoint("value count overflow".into()))?, "values")?;
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();

    let slice = |g: &Group| -> Result<&[f64]> {
        let n = g.dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d)).unwrap_or(u64::MAX) as usize;
        let start = g.offset as usize;
        values
            .get(start..start.saturating_add(n))
            .ok_or_else(|| Error::Checkpoint(format!("group {} exceeds the value block", g.name)))
    };

    let first = groups.first().ok_or_else(|| Error::Checkpoint("no groups".into()))?;
    if first.name != META {
        return Err(Error::Checkpoint(format!("first group is {:?}, expected {META:?}", first.name)));
    }
    let config = DetectorModel::config_from_meta(slice(first)?)?;
    let mut model = DetectorModel::new(config, 0)?;
    let names = model.param_names();
    if groups.len() != names.len() + 1 {
        return Err(Error::Checkpoint(format!(
            "{} parameter groups, model expects {}",
            groups.len() - 1,
            names.len()
        )));
    }
    for ((name, slot), g) in model.params_mut().into_iter().zip(&groups[1..]) {
        if g.name != name {
            return Err(Error::Checkpoint(format!("group {:?} where {name:?} was expected", g.name)));
        }
        let want = [slot.channels() as u64, slot.height() as u64, slot.width() as u64];
        if g.dims != want {
            return Err(Error::Checkpoint(format!("group {name} has dims {:?}, expected {want:?}", g.dims)));
        }
        let (c, h, w) = slot.dims();
        *slot = FeatureMap::from_vec(c, h, w, slice(g)?.to_vec()).map_err(|e| Error::Checkpoint(format!("group {name}: {e}")))?;
    }
    Ok(model)
}

pub fn save(model: &DetectorModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<DetectorModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
