//! Named-tensor container used for parameter checkpoints and attention dumps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "UTMCKPT\x01"
//! count      u32
//! entry*     count times:
//!   name_len u32, name (UTF-8)
//!   dtype    u8       0 = f32, 1 = f64
//!   rank     u32
//!   dims     u64 * rank
//!   values   product(dims) * dtype size, little-endian
//! ```
//!
//! Entries keep their insertion order. Loading converts to the requested
//! precision.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"UTMCKPT\x01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint entry {name:?}: {msg}")]
    Corrupt { name: String, msg: String },
}

pub fn save<S: Scalar>(path: &Path, entries: &[(String, Tensor<S>)]) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn write_to<S: Scalar, W: Write>(w: &mut W, entries: &[(String, Tensor<S>)]) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    let mut buf = Vec::new();
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[S::DTYPE.code()])?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        buf.clear();
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<S>)>, CheckpointError> {
    read_from(&mut BufReader::new(File::open(path)?))
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_from<S: Scalar, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<S>)>, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| CheckpointError::Corrupt {
            name: String::new(),
            msg: e.to_string(),
        })?;
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        let dtype = DType::from_code(code[0]).ok_or_else(|| CheckpointError::Corrupt {
            name: name.clone(),
            msg: format!("unknown dtype code {}", code[0]),
        })?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * dtype.size()];
        r.read_exact(&mut raw)?;
        let data: Vec<S> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| S::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| S::lit(f64::read_le(c))).collect(),
        };
        let t = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Corrupt { name: name.clone(), msg: e.to_string() })?;
        out.push((name, t));
    }
    Ok(out)
}
