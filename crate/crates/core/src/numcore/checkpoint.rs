//! Flat little-endian checkpoint format.
//!
//! ```text
//! magic    8 bytes  "TXFUSECK"
//! version  u32
//! meta_len u32, meta bytes (UTF-8, usually JSON)
//! count    u32
//! count × { name_len u32, name bytes, ndim u32, dims u64×ndim, payload f64×numel }
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ParamSet, Tensor, TensorError};

pub const MAGIC: &[u8; 8] = b"TXFUSECK";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamSet, meta: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        if self.pos + n > self.buf.len() {
            return Err(TensorError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, TensorError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| TensorError::Checkpoint("invalid utf-8".into()))
    }
}

/// Parses a checkpoint, returning the parameters and the metadata string.
pub fn decode(bytes: &[u8]) -> Result<(ParamSet, String), TensorError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let meta = r.string()?;
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push_raw(name, Tensor::new(shape, data)?.with_grad());
    }
    if r.pos != bytes.len() {
        return Err(TensorError::Checkpoint("trailing bytes".into()));
    }
    Ok((params, meta))
}

/// Writes atomically: temp file in the same directory, then rename.
pub fn write(path: &Path, params: &ParamSet, meta: &str) -> Result<(), TensorError> {
    write_bytes_atomic(path, &encode(params, meta))
}

pub fn read(path: &Path) -> Result<(ParamSet, String), TensorError> {
    decode(&fs::read(path)?)
}

pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<(), TensorError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// SHA-256 of the encoded parameters (metadata excluded), hex encoded.
pub fn checksum(params: &ParamSet) -> String {
    let digest = Sha256::digest(encode(params, ""));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
