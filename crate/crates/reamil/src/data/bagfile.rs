//! Binary bag format.
//!
//! Layout, all little-endian:
//! `"RMB1"` magic, `u32` N, `u32` d, `u32` label, `N*d` f32 features
//! (row-major), `N*2` f32 coordinates, then u16 length-prefixed UTF-8
//! slide id and patient id. f32 payloads round-trip bit-exactly.

use std::fs;
use std::path::Path;

use crate::binio::{push_f32s, push_str, push_u32, ByteReader};
use crate::tensor::Array;

use super::{BagRecord, DataError};

const MAGIC: &[u8; 4] = b"RMB1";

/// Byte offset of the `d` field, used by feature-dim mismatch errors.
pub(super) const DIM_FIELD_OFFSET: usize = 8;

pub fn encode_bag(bag: &BagRecord) -> Result<Vec<u8>, DataError> {
    let unencodable = |what: String| DataError::InvalidBag {
        slide_id: bag.slide_id().to_string(),
        what,
    };
    let n = u32::try_from(bag.n_tiles()).map_err(|_| unencodable("too many tiles".into()))?;
    let d =
        u32::try_from(bag.feature_dim()).map_err(|_| unencodable("feature dim too large".into()))?;
    let label = u32::try_from(bag.label()).map_err(|_| unencodable("label too large".into()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, n);
    push_u32(&mut buf, d);
    push_u32(&mut buf, label);
    push_f32s(&mut buf, bag.features().data());
    push_f32s(&mut buf, bag.coords().data());
    push_str(&mut buf, bag.slide_id()).map_err(unencodable)?;
    push_str(&mut buf, bag.patient_id()).map_err(unencodable)?;
    Ok(buf)
}

pub fn decode_bag(bytes: &[u8], path: &Path) -> Result<BagRecord, DataError> {
    let fmt = |f: crate::binio::ReadFailure| DataError::BagFormat {
        path: path.to_path_buf(),
        offset: f.offset,
        what: f.what,
    };
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC).map_err(fmt)?;
    let n = r.u32("tile count N").map_err(fmt)? as usize;
    let d = r.u32("feature dim d").map_err(fmt)? as usize;
    let label = r.u32("label").map_err(fmt)? as usize;
    if n == 0 || d == 0 {
        return Err(DataError::BagFormat {
            path: path.to_path_buf(),
            offset: 4,
            what: format!("degenerate dimensions N={n}, d={d}"),
        });
    }
    let features = r.f32s(n * d, "features").map_err(fmt)?;
    let coords = r.f32s(n * 2, "coordinates").map_err(fmt)?;
    let slide_id = r.utf16_string("slide id").map_err(fmt)?;
    let patient_id = r.utf16_string("patient id").map_err(fmt)?;
    r.expect_end().map_err(fmt)?;
    BagRecord::new(
        slide_id,
        patient_id,
        label,
        Array::from_vec([n, d], features),
        Array::from_vec([n, 2], coords),
    )
}

pub fn write_bag(bag: &BagRecord, path: &Path) -> Result<(), DataError> {
    let bytes = encode_bag(bag)?;
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_bag(path: &Path) -> Result<BagRecord, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_bag(&bytes, path)
}
