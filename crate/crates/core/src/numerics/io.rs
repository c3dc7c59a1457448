//! Binary tensor container.
//!
//! A tensor record is
//!
//! ```text
//! "IMTK" | version u32 | rank u32 | dims u64 × rank | dtype u8 | values
//! ```
//!
//! with every integer and value little-endian (dtype 0 = f32, 1 = f64). A
//! container is `count u32` followed by `count` entries of
//! `name_len u16 | utf-8 name | tensor record`.

use std::fs;
use std::path::Path;

use super::tensor::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IMTK";
pub const FORMAT_VERSION: u32 = 1;

/// A tensor of either supported dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Wraps a tensor of either element type, keeping its dtype.
    pub fn of<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    /// Converts to the requested element type.
    pub fn to<T: Real>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

fn encode_values<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.reserve(t.len() * T::BYTES);
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode_tensor(t: &AnyTensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(t.dtype() as u8);
    match t {
        AnyTensor::F32(t) => encode_values(t, out),
        AnyTensor::F64(t) => encode_values(t, out),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

fn decode_values<T: Real>(r: &mut Reader<'_>, dims: &[usize]) -> Result<Tensor<T>> {
    let n: usize = dims.iter().product();
    let bytes = r.take(
        n.checked_mul(T::BYTES)
            .ok_or_else(|| Error::Format("size overflow".into()))?,
    )?;
    let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))
}

fn decode_tensor(r: &mut Reader<'_>) -> Result<AnyTensor> {
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let dims = (0..rank)
        .map(|_| r.u64().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    match r.take(1)?[0] {
        0 => Ok(AnyTensor::F32(decode_values(r, &dims)?)),
        1 => Ok(AnyTensor::F64(decode_values(r, &dims)?)),
        t => Err(Error::Format(format!("unknown dtype tag {t}"))),
    }
}

/// Decodes one bare tensor record.
pub fn decode_tensor_bytes(buf: &[u8]) -> Result<AnyTensor> {
    let mut r = Reader { buf, pos: 0 };
    let t = decode_tensor(&mut r)?;
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after tensor".into()));
    }
    Ok(t)
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    entries: Vec<(String, AnyTensor)>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: impl Into<AnyTensor>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!(
                "name too long: {} bytes",
                name.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate entry {name}")));
        }
        self.entries.push((name, t.into()));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&AnyTensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingArtifact(format!("tensor entry '{name}'")))
    }

    pub fn entries(&self) -> &[(String, AnyTensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor(t, &mut out);
        }
        out
    }

    /// Parses a container, or a bare tensor record (loaded as entry `""`).
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.starts_with(MAGIC) {
            let t = decode_tensor_bytes(buf)?;
            return Ok(Self {
                entries: vec![(String::new(), t)],
            });
        }
        let mut r = Reader { buf, pos: 0 };
        let count = r.u32()? as usize;
        let mut file = Self::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Format(format!("entry name: {e}")))?
                .to_string();
            let t = decode_tensor(&mut r)?;
            file.push(name, t)?;
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after container".into()));
        }
        Ok(file)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Writes a single named tensor as a one-entry container.
pub fn write_tensor<T: Real>(path: impl AsRef<Path>, name: &str, t: &Tensor<T>) -> Result<()>
where
    AnyTensor: From<Tensor<T>>,
{
    let mut f = TensorFile::new();
    f.push(name, t.clone())?;
    f.write(path)
}
