// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary tensor-table container shared by LM and SAE checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        [u8; 4]
//! version      u16
//! config_len   u32, then config_len bytes of owner-defined config
//! count        u32
//! count x { name_len u16, name utf-8, dtype u8 (0 = f32), rank u8,
//!           dims u32 x rank, data (product(dims) x 4 bytes) }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// Append-only little-endian byte sink.
#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a byte slice that reports absolute offsets on failure.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader {
            buf,
            pos: 0,
            base: 0,
        }
    }

    fn with_base(buf: &'a [u8], base: usize) -> Self {
        ByteReader { buf, pos: 0, base }
    }

    pub fn offset(&self) -> usize {
        self.base + self.pos
    }

    pub fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset(),
            message: message.into(),
        }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Decoded container: the owner's config block plus named tensors in file
/// order.
pub struct TensorFile<'a> {
    pub config: ByteReader<'a>,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode(magic: &[u8; 4], config: &[u8], tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(magic);
    w.u16(FORMAT_VERSION);
    w.u32(config.len() as u32);
    w.bytes(config);
    w.u32(tensors.len() as u32);
    for (name, t) in tensors {
        w.u16(name.len() as u16);
        w.bytes(name.as_bytes());
        w.u8(DTYPE_F32);
        w.u8(t.rank() as u8);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        for v in t.data() {
            w.f32(*v);
        }
    }
    w.into_inner()
}

pub fn decode<'a>(magic: &[u8; 4], bytes: &'a [u8]) -> Result<TensorFile<'a>> {
    let mut r = ByteReader::new(bytes);
    let found = r.take(4, "magic")?;
    if found != magic {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(magic)
            ),
        });
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let config_len = r.u32("config length")? as usize;
    let config_base = r.offset();
    let config = ByteReader::with_base(r.take(config_len, "config block")?, config_base);
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_at = r.offset();
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format {
                offset: name_at,
                message: "tensor name is not utf-8".into(),
            })?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(r.fail(format!("unknown dtype tag {dtype} for {name}")));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if !r.is_done() {
        return Err(r.fail("trailing bytes after tensor table"));
    }
    Ok(TensorFile { config, tensors })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Looks up a tensor by name and checks its shape.
pub fn take_tensor(
    tensors: &mut Vec<(String, Tensor)>,
    name: &str,
    shape: &[usize],
) -> Result<Tensor> {
    let idx = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("missing tensor {name}"),
        })?;
    let (_, t) = tensors.swap_remove(idx);
    if t.shape() != shape {
        return Err(Error::Format {
            offset: 0,
            message: format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape()),
        });
    }
    Ok(t)
}
