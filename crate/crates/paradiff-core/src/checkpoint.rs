//! Versioned checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"PDENGCK1"
//! 8       4     format version (u32) = 1
//! 12      1     element width in bytes (u8): 4 = f32, 8 = f64
//! 13      4     config JSON length (u32)
//! 17      n     config JSON (serde-encoded ModelConfig)
//! ...           parameter count (u32)
//! ...           parameters, in sorted-name order; each:
//!                 name length (u32), name (UTF-8),
//!                 rows (u32), cols (u32),
//!                 rows*cols little-endian floats of the element width
//! end-32  32    SHA-256 of every preceding byte
//! ```
//!
//! Loading rejects wrong magic, version, element width, truncated files,
//! and checksum mismatches.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{MaskPredictor, ModelConfig, ParamStore};
use crate::real::Real;

const MAGIC: &[u8; 8] = b"PDENGCK1";
const VERSION: u32 = 1;

pub fn save<R: Real>(path: &Path, model: &MaskPredictor<R>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(R::WIDTH as u8);

    let cfg = serde_json::to_vec(&model.config)?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);

    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, p) in model.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(p.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(p.cols as u32).to_le_bytes());
        for &v in &p.values {
            v.write_le(&mut buf);
        }
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    // Write through a temp file so a failed write never leaves a partial
    // checkpoint behind.
    let tmp = path.with_extension("tmp");
    if let Err(e) = std::fs::write(&tmp, &buf) {
        let _ = std::fs::remove_file(&tmp);
        return Err(e.into());
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load<R: Real>(path: &Path) -> Result<MaskPredictor<R>> {
    let buf = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    if buf.len() < MAGIC.len() + 32 {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let (body, stored_digest) = buf.split_at(buf.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let width = r.take(1)?[0] as usize;
    if width != R::WIDTH {
        return Err(Error::Checkpoint(format!(
            "element width {width} does not match requested precision ({} bytes)",
            R::WIDTH
        )));
    }

    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;

    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("non-UTF-8 parameter name".into()))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * R::WIDTH)?;
        let values: Vec<R> = raw.chunks_exact(R::WIDTH).map(R::read_le).collect();
        store.insert(&name, rows, cols, values);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes in checkpoint".into()));
    }

    Ok(MaskPredictor {
        config,
        params: store,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MaskPredictor<f32> {
        MaskPredictor::init(ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            vocab_size: 12,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save(&path, &m).unwrap();
        let loaded = load::<f32>(&path).unwrap();
        assert_eq!(loaded.config, m.config);
        for ((na, pa), (nb, pb)) in m.params.iter().zip(loaded.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.values, pb.values);
            assert_eq!((pa.rows, pa.cols), (pb.rows, pb.cols));
        }
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &model()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load::<f32>(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_precision_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &model()).unwrap();
        assert!(matches!(load::<f64>(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &model()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        assert!(matches!(load::<f32>(&path), Err(Error::Checkpoint(_))));
    }
}
