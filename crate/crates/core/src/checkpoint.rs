//! Versioned binary checkpoints.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic "DWCAPSCK" | u32 version
//! u32 len, variant name (utf-8)
//! u32 primary_dim, class_dim, num_classes, routing_iterations
//! u32 filters, input_size (0 = variant default), capsule_grid
//! u8 with_bias, u8 detach_routing
//! u32 tensor count, then per tensor:
//!     u32 len, name | u32 rank | u64 extents... | f64 values...
//! 32-byte SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::capsule::CapsuleConfig;
use crate::error::{Error, Result};
use crate::model::{build_variant, ArchitectureVariant, ModelGraph, ModelOptions, Params};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DWCAPSCK";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(model: &ModelGraph, params: &Params) -> Result<Vec<u8>> {
    let shapes = model.param_shapes();
    if shapes.len() != params.tensors.len()
        || shapes.iter().zip(&params.tensors).any(|((n, s), (pn, t))| n != pn || s.as_slice() != t.shape())
    {
        return Err(Error::Contract("parameters do not match the model".into()));
    }
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    put_str(&mut out, &model.name());
    let c = &model.caps;
    for v in [c.primary_capsule_dim, c.class_capsule_dim, c.num_classes, c.routing_iterations] {
        put_u32(&mut out, v);
    }
    let o = &model.options;
    for v in [o.filters, o.input_size.unwrap_or(0), o.capsule_grid] {
        put_u32(&mut out, v);
    }
    out.push(o.with_bias as u8);
    out.push(o.detach_routing as u8);
    put_u32(&mut out, params.tensors.len());
    for (name, t) in &params.tensors {
        put_str(&mut out, name);
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend(digest);
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend((v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 name".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelGraph, Params)> {
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, at: 12 };
    let variant: ArchitectureVariant =
        r.string()?.parse().map_err(|e| Error::Checkpoint(format!("bad variant in header: {e}")))?;
    let caps = CapsuleConfig {
        primary_capsule_dim: r.u32()?,
        class_capsule_dim: r.u32()?,
        num_classes: r.u32()?,
        routing_iterations: r.u32()?,
    };
    let filters = r.u32()?;
    let input_size = Some(r.u32()?).filter(|&s| s != 0);
    let capsule_grid = r.u32()?;
    let with_bias = r.u8()? != 0;
    let detach_routing = r.u8()? != 0;
    let options = ModelOptions { filters, input_size, capsule_grid, with_bias, detach_routing };
    let model = build_variant(variant, caps, options)
        .map_err(|e| Error::Checkpoint(format!("header describes an unbuildable model: {e}")))?;
    let count = r.u32()?;
    let expected = model.param_shapes();
    if count != expected.len() {
        return Err(Error::Checkpoint(format!("{count} tensors stored, model needs {}", expected.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in expected {
        let stored = r.string()?;
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        if stored != name || dims != shape {
            return Err(Error::Checkpoint(format!("tensor {stored} {dims:?} does not match {name} {shape:?}")));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor::new(&dims, data)?));
    }
    if r.at != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok((model, Params { tensors }))
}

pub fn save_checkpoint(path: &Path, model: &ModelGraph, params: &Params) -> Result<()> {
    fs::write(path, to_bytes(model, params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelGraph, Params)> {
    from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint and insists it holds `expected`.
pub fn load_checkpoint_for(path: &Path, expected: ArchitectureVariant) -> Result<(ModelGraph, Params)> {
    let (model, params) = load_checkpoint(path)?;
    if model.variant != expected {
        return Err(Error::Contract(format!("checkpoint holds {}, requested {expected}", model.name())));
    }
    Ok((model, params))
}

/// Hex SHA-256 of the serialized checkpoint.
pub fn checksum_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ModelGraph, Params) {
        let opts = ModelOptions { filters: 8, input_size: Some(8), ..Default::default() };
        let caps = CapsuleConfig { num_classes: 3, ..Default::default() };
        let m = build_variant("32-v1-2-2-k3".parse().unwrap(), caps, opts).unwrap();
        let p = m.init_params(4).unwrap();
        (m, p)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (m, p) = small();
        let bytes = to_bytes(&m, &p).unwrap();
        let (m2, p2) = from_bytes(&bytes).unwrap();
        assert_eq!(m2, m);
        assert_eq!(p2, p);
        assert_eq!(to_bytes(&m2, &p2).unwrap(), bytes);
        let x = Tensor::random_uniform(&[2, 8, 8, 3], 1, 0.0, 1.0).unwrap();
        assert_eq!(m.predict(&p, &x).unwrap().data(), m2.predict(&p2, &x).unwrap().data());
    }

    #[test]
    fn truncation_and_corruption() {
        let (m, p) = small();
        let bytes = to_bytes(&m, &p).unwrap();
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(from_bytes(&flipped), Err(Error::Checkpoint(_))));
        let mut version = bytes.clone();
        version[8] = 2;
        assert!(matches!(from_bytes(&version), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn variant_mismatch() {
        let (m, p) = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &m, &p).unwrap();
        assert!(load_checkpoint_for(&path, "32-v1-2-2-k3".parse().unwrap()).is_ok());
        assert!(matches!(load_checkpoint_for(&path, "32-v2-2-2-k3".parse().unwrap()), Err(Error::Contract(_))));
    }
}
