//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "SFCK" | version | config length | config JSON
//! per tensor, sorted by name:
//!     name length | name bytes | rank | dims[rank] | f32 payload (row-major)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"SFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub config_json: String,
    pub tensors: BTreeMap<String, RawTensor>,
}

fn ck_err(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes()).map_err(ck_err)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(ck_err)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a u32, distinguishing a clean end of stream (`None`).
fn try_get_u32(r: &mut impl Read) -> Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut b[filled..]).map_err(ck_err)?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(Error::Checkpoint("truncated tensor header".into()))
            };
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(b)))
}

pub fn write_checkpoint<T: Scalar, P: ParamSet<T>>(mut w: impl Write, config_json: &str, params: &P) -> Result<()> {
    w.write_all(MAGIC).map_err(ck_err)?;
    put_u32(&mut w, FORMAT_VERSION as usize)?;
    put_u32(&mut w, config_json.len())?;
    w.write_all(config_json.as_bytes()).map_err(ck_err)?;
    let mut tensors = params.named_tensors();
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, t) in tensors {
        put_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes()).map_err(ck_err)?;
        put_u32(&mut w, 2)?;
        put_u32(&mut w, t.rows())?;
        put_u32(&mut w, t.cols())?;
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.as_slice() {
            buf.extend_from_slice(&(v.widen() as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(ck_err)?;
    }
    w.flush().map_err(ck_err)
}

pub fn read_checkpoint(mut r: impl Read) -> Result<RawCheckpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(ck_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = get_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = get_u32(&mut r)? as usize;
    let mut blob = vec![0u8; len];
    r.read_exact(&mut blob).map_err(ck_err)?;
    let config_json =
        String::from_utf8(blob).map_err(|_| Error::Checkpoint("config blob is not UTF-8".into()))?;

    let mut tensors = BTreeMap::new();
    while let Some(name_len) = try_get_u32(&mut r)? {
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name).map_err(ck_err)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = get_u32(&mut r)? as usize;
        let dims = (0..rank)
            .map(|_| get_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes).map_err(ck_err)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if tensors.insert(name.clone(), RawTensor { dims, data }).is_some() {
            return Err(Error::Checkpoint(format!("tensor {name} stored twice")));
        }
    }
    Ok(RawCheckpoint { config_json, tensors })
}

/// Copies stored tensors into `params`; the name sets and shapes must match
/// exactly.
pub fn load_into<T: Scalar, P: ParamSet<T>>(raw: &RawCheckpoint, params: &mut P) -> Result<()> {
    let mut targets = params.named_tensors_mut();
    if targets.len() != raw.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            raw.tensors.len(),
            targets.len()
        )));
    }
    for (name, t) in targets.iter_mut() {
        let stored = raw
            .tensors
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let shape: Vec<usize> = vec![t.rows(), t.cols()];
        let flat = match stored.dims.len() {
            1 => vec![1, stored.dims[0]],
            _ => stored.dims.clone(),
        };
        if flat != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                stored.dims
            )));
        }
        **t = Matrix::from_vec(t.rows(), t.cols(), stored.data.iter().map(|&v| T::narrow(v as f64)).collect());
    }
    Ok(())
}
