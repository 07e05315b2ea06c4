//! Binary formats: parameter blobs and golden-logit arrays.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::Tensor;

const BLOB_MAGIC: &str = "dipaco-blob v1";
const GOLDEN_MAGIC: &[u8; 8] = b"DPGOLDv1";

fn corrupt(reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        path: Default::default(),
        reason: reason.into(),
    }
}

/// Text manifest (`name<TAB>dims<TAB>offset` per tensor, offsets in
/// values), a blank line, then every value as little-endian f64.
pub fn encode_blob(params: &ParamTree) -> Vec<u8> {
    let mut manifest = format!("{BLOB_MAGIC}\n{}\n", params.len());
    let mut offset = 0;
    for (name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        let _ = writeln!(manifest, "{name}\t{}\t{offset}", dims.join(","));
        offset += t.len();
    }
    manifest.push('\n');
    let mut out = manifest.into_bytes();
    out.reserve(offset * 8);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_blob(bytes: &[u8]) -> Result<ParamTree> {
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| corrupt("no manifest terminator"))?;
    let manifest =
        std::str::from_utf8(&bytes[..split]).map_err(|_| corrupt("manifest is not utf-8"))?;
    let payload = &bytes[split + 2..];
    let mut lines = manifest.lines();
    if lines.next() != Some(BLOB_MAGIC) {
        return Err(corrupt("bad magic"));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.parse().ok())
        .ok_or_else(|| corrupt("bad tensor count"))?;
    if !payload.len().is_multiple_of(8) {
        return Err(corrupt("payload is not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut out = ParamTree::new();
    let mut expected_offset = 0;
    for line in lines {
        let cols: Vec<&str> = line.split('\t').collect();
        let [name, dims, offset] = cols[..] else {
            return Err(corrupt(format!("manifest row {line:?}")));
        };
        let shape: Vec<usize> = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',')
                .map(|d| d.parse().map_err(|_| corrupt(format!("dims {dims:?}"))))
                .collect::<Result<_>>()?
        };
        let offset: usize = offset
            .parse()
            .map_err(|_| corrupt(format!("offset {offset:?}")))?;
        let len: usize = shape.iter().product();
        if offset != expected_offset || offset + len > values.len() {
            return Err(corrupt(format!("tensor {name} out of bounds")));
        }
        out.insert(
            name,
            Tensor::new(shape, values[offset..offset + len].to_vec())?,
        );
        expected_offset += len;
    }
    if out.len() != count || expected_offset != values.len() {
        return Err(corrupt("manifest does not cover the payload"));
    }
    Ok(out)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::CorruptCheckpoint { reason, .. } => Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    }
}

pub fn write_params(path: &Path, params: &ParamTree) -> Result<()> {
    std::fs::write(path, encode_blob(params))?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<ParamTree> {
    decode_blob(&std::fs::read(path)?).map_err(|e| with_path(e, path))
}

/// Magic, u32 rank, u64 dims, then the values, all little-endian.
pub fn encode_golden(t: &Tensor) -> Vec<u8> {
    let mut out = GOLDEN_MAGIC.to_vec();
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_golden(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 || &bytes[..8] != GOLDEN_MAGIC {
        return Err(corrupt("bad golden header"));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < rank * 8 {
        return Err(corrupt("truncated golden shape"));
    }
    let shape: Vec<usize> = body[..rank * 8]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let data = &body[rank * 8..];
    if data.len() != shape.iter().product::<usize>() * 8 {
        return Err(corrupt("golden payload size does not match its shape"));
    }
    Tensor::new(
        shape,
        data.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    )
}

pub fn write_golden(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_golden(t))?;
    Ok(())
}

pub fn read_golden(path: &Path) -> Result<Tensor> {
    decode_golden(&std::fs::read(path)?).map_err(|e| with_path(e, path))
}
