//! Named-tensor container.
//!
//! Layout, little-endian throughout:
//! `"NTF1"`, `u32` tensor count, then per tensor `u16` name length, UTF-8
//! name, `u8` dtype (0 = f32, 1 = u8), `u8` rank, `rank × u32` extents and
//! the row-major payload.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{LabelMap, Tensor};

pub const MAGIC: &[u8; 4] = b"NTF1";

#[derive(Debug, Error)]
pub enum NtfError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unknown dtype code {0}")]
    Dtype(u8),
    #[error("tensor name is not UTF-8")]
    Name,
    #[error("tensor name longer than 65535 bytes: {0}")]
    NameTooLong(String),
    #[error("{what} {value} does not fit the format")]
    TooLarge { what: &'static str, value: usize },
    #[error("payload of {name}: {len} elements for shape {shape:?}")]
    Payload {
        name: String,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("trailing bytes after last tensor")]
    Trailing,
    #[error("duplicate tensor name {0}")]
    Duplicate(String),
    #[error("no tensor named {0}")]
    Missing(String),
    #[error("tensor {name}: expected {expected}")]
    Kind { name: String, expected: &'static str },
}

#[derive(Debug, Clone, PartialEq)]
pub enum NtfData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl NtfData {
    fn len(&self) -> usize {
        match self {
            NtfData::F32(v) => v.len(),
            NtfData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NtfTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: NtfData,
}

impl NtfTensor {
    pub fn f32(name: impl Into<String>, t: &Tensor<f32>) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: NtfData::F32(t.data().to_vec()),
        }
    }

    pub fn u8(name: impl Into<String>, shape: Vec<usize>, data: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: NtfData::U8(data),
        }
    }

    pub fn labels(name: impl Into<String>, l: &LabelMap) -> Self {
        Self::u8(name, l.shape().to_vec(), l.data().to_vec())
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>, NtfError> {
        match &self.data {
            NtfData::F32(v) => Tensor::new(self.shape.clone(), v.clone()).map_err(|_| self.payload_err()),
            NtfData::U8(_) => Err(self.kind_err("f32 data")),
        }
    }

    pub fn to_labels(&self) -> Result<LabelMap, NtfError> {
        match (&self.data, self.shape.as_slice()) {
            (NtfData::U8(v), &[b, h, w]) => LabelMap::new([b, h, w], v.clone()).map_err(|_| self.payload_err()),
            _ => Err(self.kind_err("rank-3 u8 data")),
        }
    }

    pub fn bytes(&self) -> Result<&[u8], NtfError> {
        match &self.data {
            NtfData::U8(v) => Ok(v),
            NtfData::F32(_) => Err(self.kind_err("u8 data")),
        }
    }

    fn payload_err(&self) -> NtfError {
        NtfError::Payload {
            name: self.name.clone(),
            len: self.data.len(),
            shape: self.shape.clone(),
        }
    }

    fn kind_err(&self, expected: &'static str) -> NtfError {
        NtfError::Kind {
            name: self.name.clone(),
            expected,
        }
    }
}

/// Ordered list of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NtfFile {
    pub tensors: Vec<NtfTensor>,
}

impl NtfFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: NtfTensor) {
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Result<&NtfTensor, NtfError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| NtfError::Missing(name.to_string()))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), NtfError> {
        w.write_all(MAGIC)?;
        w.write_all(&u32_of(self.tensors.len(), "tensor count")?.to_le_bytes())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| NtfError::NameTooLong(t.name.clone()))?;
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(t.payload_err());
            }
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name)?;
            let code = match t.data {
                NtfData::F32(_) => 0u8,
                NtfData::U8(_) => 1u8,
            };
            let rank = u8::try_from(t.shape.len()).map_err(|_| NtfError::TooLarge {
                what: "rank",
                value: t.shape.len(),
            })?;
            w.write_all(&[code, rank])?;
            for &e in &t.shape {
                w.write_all(&u32_of(e, "extent")?.to_le_bytes())?;
            }
            match &t.data {
                NtfData::F32(v) => {
                    let mut buf = Vec::with_capacity(v.len() * 4);
                    for x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                    w.write_all(&buf)?;
                }
                NtfData::U8(v) => w.write_all(v)?,
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, NtfError> {
        let mut v = Vec::new();
        self.write_to(&mut v)?;
        Ok(v)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, NtfError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NtfError::Magic(magic));
        }
        let count = read_u32(r)? as usize;
        let mut tensors: Vec<NtfTensor> = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| NtfError::Name)?;
            if tensors.iter().any(|t| t.name == name) {
                return Err(NtfError::Duplicate(name));
            }
            let mut hdr = [0u8; 2];
            r.read_exact(&mut hdr)?;
            let shape = (0..hdr[1])
                .map(|_| read_u32(r).map(|e| e as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or(NtfError::TooLarge {
                    what: "element count",
                    value: usize::MAX,
                })?;
            let data = match hdr[0] {
                0 => {
                    let mut raw = vec![0u8; numel * 4];
                    r.read_exact(&mut raw)?;
                    NtfData::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                            .collect(),
                    )
                }
                1 => {
                    let mut raw = vec![0u8; numel];
                    r.read_exact(&mut raw)?;
                    NtfData::U8(raw)
                }
                c => return Err(NtfError::Dtype(c)),
            };
            tensors.push(NtfTensor { name, shape, data });
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(NtfError::Trailing);
        }
        Ok(Self { tensors })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, NtfError> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NtfError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NtfError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn u32_of(v: usize, what: &'static str) -> Result<u32, NtfError> {
    u32::try_from(v).map_err(|_| NtfError::TooLarge { what, value: v })
}

fn read_u32(r: &mut impl Read) -> Result<u32, NtfError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
