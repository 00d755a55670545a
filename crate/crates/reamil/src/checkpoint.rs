//! Binary checkpoint format for named f32 tensors.
//!
//! Layout, all little-endian:
//! `"RMCK"` magic, `u32` tensor count, then per tensor a `u16`
//! length-prefixed UTF-8 name, `u32` rank, `rank * u32` dims, and the
//! row-major f32 payload. Scalars are rank 0 with one payload value.
//!
//! Model hyperparameters ride along as `config.*` scalar tensors, so a
//! checkpoint is self-describing: loading reconstructs both the weights
//! and the architecture they belong to. Writing the same ParamSet twice
//! produces byte-identical files; iteration order is insertion order.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::binio::{push_f32s, push_str, push_u32, ByteReader};
use crate::params::ParamSet;
use crate::tensor::Array;

const MAGIC: &[u8; 4] = b"RMCK";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: checkpoint format error at byte {offset}: {what}")]
    Format {
        path: PathBuf,
        offset: usize,
        what: String,
    },
    #[error("{path}: duplicate tensor {name:?}")]
    DuplicateTensor { path: PathBuf, name: String },
    #[error("checkpoint does not fit format limits: {0}")]
    Unencodable(String),
    #[error("checkpoint is missing tensors: {missing:?}")]
    MissingTensors { missing: Vec<String> },
    #[error("checkpoint tensor shapes do not match the expected model: {mismatched:?}")]
    ShapeMismatch { mismatched: Vec<String> },
}

pub fn encode(params: &ParamSet<f32>) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let count = u32::try_from(params.len())
        .map_err(|_| CheckpointError::Unencodable(format!("{} tensors", params.len())))?;
    push_u32(&mut buf, count);
    for (name, tensor) in params.iter() {
        push_str(&mut buf, name).map_err(CheckpointError::Unencodable)?;
        let rank = u32::try_from(tensor.rank()).unwrap();
        push_u32(&mut buf, rank);
        for &d in tensor.shape() {
            let d = u32::try_from(d)
                .map_err(|_| CheckpointError::Unencodable(format!("dim {d} in {name}")))?;
            push_u32(&mut buf, d);
        }
        push_f32s(&mut buf, tensor.data());
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ParamSet<f32>, CheckpointError> {
    let fmt = |f: crate::binio::ReadFailure| CheckpointError::Format {
        path: path.to_path_buf(),
        offset: f.offset,
        what: f.what,
    };
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC).map_err(fmt)?;
    let count = r.u32("tensor count").map_err(fmt)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = r.utf16_string("tensor name").map_err(fmt)?;
        if params.contains(&name) {
            return Err(CheckpointError::DuplicateTensor {
                path: path.to_path_buf(),
                name,
            });
        }
        let rank = r.u32("rank").map_err(fmt)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dim").map_err(fmt)? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f32s(numel, &format!("payload of {name}")).map_err(fmt)?;
        params.insert(name, Array::from_vec(shape, data));
    }
    r.expect_end().map_err(fmt)?;
    Ok(params)
}

pub fn write_checkpoint(path: &Path, params: &ParamSet<f32>) -> Result<(), CheckpointError> {
    let bytes = encode(params)?;
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<ParamSet<f32>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, path)
}

/// Verifies that `found` contains every tensor of `expected` with matching
/// shapes. Reports all offending names at once, missing and mismatched
/// separately, so a wrong checkpoint is diagnosable in one pass.
pub fn validate_shapes(
    found: &ParamSet<f32>,
    expected: &ParamSet<f32>,
) -> Result<(), CheckpointError> {
    let missing: Vec<String> = expected
        .names()
        .filter(|n| !found.contains(n))
        .map(String::from)
        .collect();
    if !missing.is_empty() {
        return Err(CheckpointError::MissingTensors { missing });
    }
    let mismatched: Vec<String> = expected
        .iter()
        .filter_map(|(name, tensor)| {
            let got = found.get(name).unwrap();
            (got.shape() != tensor.shape()).then(|| {
                format!("{name}: expected {:?}, found {:?}", tensor.shape(), got.shape())
            })
        })
        .collect();
    if !mismatched.is_empty() {
        return Err(CheckpointError::ShapeMismatch { mismatched });
    }
    Ok(())
}
