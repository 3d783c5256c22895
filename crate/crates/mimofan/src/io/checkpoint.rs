//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MFAN" (4 bytes)
//! format version  u32            (currently 1)
//! config length   u32
//! config blob     utf-8          (canonical single-line network config)
//! tensor count    u32
//! per tensor:
//!   name length   u32
//!   name          utf-8
//!   dims          4 x u32        (n, c, h, w)
//!   payload       n*c*h*w x f32
//! ```
//!
//! Tensors are written in sorted-name order, so save -> load -> save is
//! byte-identical. Running batch-norm statistics are stored like any other
//! tensor, making a checkpoint fully self-contained for inference.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{ModelParams, NetworkConfig};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"MFAN";
pub const FORMAT_VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let config = params.config.canonical_text();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let s = tensor.shape();
        for dim in [s.n, s.c, s.h, s.w] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, details: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            details: details.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!(
                "truncated {what}: need {n} bytes, have {}",
                self.bytes.len() - self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| self.err(format!("non-utf8 {what}: {e}")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(r.err(format!("bad magic {magic:?} (expected {MAGIC:?})")));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(r.err(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let config_text = r.string("config blob")?;
    let config = NetworkConfig::from_canonical_text(&config_text)?;
    let count = r.u32("tensor count")?;

    let mut params = ModelParams::new(config);
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("tensor dims")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let payload = r.take(4 * shape.len(), "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(name, Tensor::from_vec(shape, data)?);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build, NetworkConfig};

    fn tiny_params() -> ModelParams<f32> {
        build(
            &NetworkConfig {
                scales: 2,
                base_filters: 2,
                ..NetworkConfig::default()
            },
            5,
        )
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let params = tiny_params();
        save_checkpoint(&params, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.config, params.config);
    }

    #[test]
    fn empty_parameter_map_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ckpt");
        let params = ModelParams::<f32>::new(NetworkConfig::default());
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 0);
    }

    #[test]
    fn corrupt_payload_byte_still_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let params = tiny_params();
        save_checkpoint(&params, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), params.len());
        let differs = params
            .iter()
            .any(|(n, t)| loaded.get(n).unwrap().data() != t.data());
        assert!(differs);
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Parse { .. })));

        let params = tiny_params();
        save_checkpoint(&params, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Parse { details, .. }) => assert!(details.contains("version")),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_tensor_is_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        let params = tiny_params();
        save_checkpoint(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Parse { details, offset, .. }) => {
                assert!(details.contains("truncated"), "{details}");
                assert!(offset > 0);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }
}
