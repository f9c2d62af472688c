//! Dense tensors and the `FPT1` binary container.
//!
//! Container layout, little-endian throughout:
//!
//! | bytes        | field                                 |
//! |--------------|---------------------------------------|
//! | 4            | magic `b"FPT1"`                       |
//! | 4            | `u32` version, always 1               |
//! | 4            | `u32` ndim                            |
//! | 8 * ndim     | `u64` dimensions, outermost first     |
//! | 4            | `u32` dtype: 0 = f32, 1 = i32         |
//! | numel * 4    | payload, row-major                    |
//!
//! Nothing may follow the payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum DType {
    F32 = 0,
    I32 = 1,
}

impl DType {
    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::I32),
            other => Err(Error::format(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I32(_) => DType::I32,
        }
    }
}

/// A shaped payload as stored in a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl RawTensor {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn i32(dims: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(dims, TensorData::I32(data))
    }

    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let numel = numel(&dims)?;
        if numel != data.len() {
            return Err(Error::validation(format!(
                "shape {dims:?} holds {numel} elements but payload has {}",
                data.len()
            )));
        }
        Ok(RawTensor { dims, data })
    }

    pub fn into_f32(self) -> Result<(Vec<usize>, Vec<f32>)> {
        match self.data {
            TensorData::F32(v) => Ok((self.dims, v)),
            TensorData::I32(_) => Err(Error::format("expected f32 payload, found i32")),
        }
    }

    pub fn into_i32(self) -> Result<(Vec<usize>, Vec<i32>)> {
        match self.data {
            TensorData::I32(v) => Ok((self.dims, v)),
            TensorData::F32(_) => Err(Error::format("expected i32 payload, found f32")),
        }
    }
}

fn numel(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(format!("shape {dims:?} overflows")))
}

pub fn write_container<W: Write>(mut w: W, tensor: &RawTensor) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensor.dims.len() as u32).to_le_bytes())?;
    for &d in &tensor.dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&(tensor.data.dtype() as u32).to_le_bytes())?;
    match &tensor.data {
        TensorData::F32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        TensorData::I32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(format!("truncated header reading {what}")))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_container<R: Read>(mut r: R) -> Result<RawTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("truncated header reading magic"))?;
    if magic != MAGIC {
        return Err(Error::format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported version {version}")));
    }
    let ndim = read_u32(&mut r, "ndim")? as usize;
    // Guards against allocating from a garbage header.
    if ndim > 16 {
        return Err(Error::format(format!("implausible ndim {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)
            .map_err(|_| Error::format("truncated header reading dims"))?;
        let d = usize::try_from(u64::from_le_bytes(buf))
            .map_err(|_| Error::format("dimension exceeds address space"))?;
        dims.push(d);
    }
    let dtype = DType::from_code(read_u32(&mut r, "dtype")?)?;
    let n = numel(&dims)?;
    let byte_len = n
        .checked_mul(4)
        .ok_or_else(|| Error::format("payload size overflows"))?;

    let mut bytes = Vec::new();
    r.by_ref().take(byte_len as u64).read_to_end(&mut bytes)?;
    if bytes.len() != byte_len {
        return Err(Error::format(format!(
            "payload truncated: expected {byte_len} bytes, found {}",
            bytes.len()
        )));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::format("trailing bytes after payload"));
    }

    let words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    let data = match dtype {
        DType::F32 => TensorData::F32(words.map(f32::from_le_bytes).collect()),
        DType::I32 => TensorData::I32(words.map(i32::from_le_bytes).collect()),
    };
    Ok(RawTensor { dims, data })
}

pub fn save_raw(path: impl AsRef<Path>, tensor: &RawTensor) -> Result<()> {
    let file = File::create(path)?;
    write_container(BufWriter::new(file), tensor)
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<RawTensor> {
    let file = File::open(path)?;
    read_container(BufReader::new(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Query,
    Key,
    Value,
}

/// Shape of a batched multi-head sequence: `batch × heads × seq_len × head_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BatchShape {
    pub batch: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub head_dim: usize,
}

impl BatchShape {
    pub fn new(batch: usize, heads: usize, seq_len: usize, head_dim: usize) -> Self {
        BatchShape {
            batch,
            heads,
            seq_len,
            head_dim,
        }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.heads * self.seq_len * self.head_dim
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.heads, self.seq_len, self.head_dim]
    }

    /// Number of (batch, head) slabs.
    pub fn slabs(&self) -> usize {
        self.batch * self.heads
    }

    fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::validation(format!(
                "all dimensions must be >= 1, got {:?}",
                self.dims()
            )));
        }
        Ok(())
    }
}

/// Query, key, or value activations for a whole batch.
///
/// Rows are stored `[batch][head][token][feature]`. All elements are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    role: Role,
    shape: BatchShape,
    data: Vec<f32>,
}

impl SequenceBatch {
    pub fn new(role: Role, shape: BatchShape, data: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::validation(format!(
                "shape {:?} holds {} elements but {} were given",
                shape.dims(),
                shape.numel(),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(SequenceBatch { role, shape, data })
    }

    pub fn from_raw(role: Role, raw: RawTensor) -> Result<Self> {
        let (dims, data) = raw.into_f32()?;
        if dims.len() != 4 {
            return Err(Error::format(format!(
                "sequence tensors are 4-D, found {} dims",
                dims.len()
            )));
        }
        Self::new(role, BatchShape::new(dims[0], dims[1], dims[2], dims[3]), data)
    }

    pub fn to_raw(&self) -> RawTensor {
        RawTensor {
            dims: self.shape.dims().to_vec(),
            data: TensorData::F32(self.data.clone()),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn shape(&self) -> BatchShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// The `seq_len × head_dim` block for one (batch, head).
    pub fn slab(&self, batch: usize, head: usize) -> &[f32] {
        let len = self.shape.seq_len * self.shape.head_dim;
        let start = (batch * self.shape.heads + head) * len;
        &self.data[start..start + len]
    }

    pub fn row(&self, batch: usize, head: usize, token: usize) -> &[f32] {
        let d = self.shape.head_dim;
        &self.slab(batch, head)[token * d..(token + 1) * d]
    }
}

/// Reads a sequence tensor from a container file.
pub fn load_tensor(path: impl AsRef<Path>, role: Role) -> Result<SequenceBatch> {
    SequenceBatch::from_raw(role, load_raw(path)?)
}

pub fn save_tensor(path: impl AsRef<Path>, tensor: &SequenceBatch) -> Result<()> {
    save_raw(path, &tensor.to_raw())
}

/// Checks that Q, K, V agree on every dimension.
pub fn check_compatible(tensors: &[&SequenceBatch]) -> Result<BatchShape> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::validation("no tensors given"))?
        .shape();
    for t in &tensors[1..] {
        if t.shape() != first {
            return Err(Error::validation(format!(
                "shape mismatch: {:?} ({:?}) vs {:?} ({:?})",
                first.dims(),
                tensors[0].role(),
                t.shape().dims(),
                t.role()
            )));
        }
    }
    Ok(first)
}
