//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!   magic "SPRW" | format version u32 | kind u32 | six config u32 fields |
//!   tensor count u32 | tensors
//! Each tensor: name length u32 | name bytes | ndims u32 | dims u32 xN |
//! row-major f32 data.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub const MAGIC: &[u8; 4] = b"SPRW";
pub const FORMAT_VERSION: u32 = 1;

/// Header tag distinguishing what the container holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Target,
    Draft,
}

impl CheckpointKind {
    fn code(self) -> u32 {
        match self {
            CheckpointKind::Target => 1,
            CheckpointKind::Draft => 2,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(CheckpointKind::Target),
            2 => Ok(CheckpointKind::Draft),
            other => Err(Error::Checkpoint(format!("unknown kind tag {other}"))),
        }
    }
}

/// A checkpoint in memory: header tag, six integer config fields, and named
/// row-major tensors in a fixed order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: [u32; 6],
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, config: [u32; 6]) -> Self {
        Self { kind, config, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: &str, tensor: Matrix) {
        self.tensors.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.kind.code().to_le_bytes())?;
        for field in self.config {
            w.write_all(&field.to_le_bytes())?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.tensors {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&2u32.to_le_bytes())?;
            w.write_all(&(tensor.rows as u32).to_le_bytes())?;
            w.write_all(&(tensor.cols as u32).to_le_bytes())?;
            for &v in &tensor.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let kind = CheckpointKind::from_code(read_u32(r)?)?;
        let mut config = [0u32; 6];
        for field in &mut config {
            *field = read_u32(r)?;
        }
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            if name_len > 4096 {
                return Err(Error::Checkpoint(format!("tensor name length {name_len}")));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("tensor name not utf-8".into()))?;
            let ndims = read_u32(r)? as usize;
            if ndims != 2 {
                return Err(Error::Checkpoint(format!("tensor {name} has {ndims} dims")));
            }
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            let mut data = vec![0.0f32; rows * cols];
            let mut buf = [0u8; 4];
            for v in &mut data {
                r.read_exact(&mut buf)?;
                *v = f32::from_le_bytes(buf);
            }
            tensors.push((name, Matrix { rows, cols, data }));
        }
        Ok(Self { kind, config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
