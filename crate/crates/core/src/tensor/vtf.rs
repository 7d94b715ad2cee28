//! `VTF1` tensor files: magic `VTF1`, dtype byte (1 = f32, 2 = i32), rank byte,
//! `rank` little-endian u32 extents, then the row-major little-endian payload.

use std::fs;
use std::path::Path;

use super::array::Array;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VTF1";
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_I32: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct IntArray {
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
}

impl IntArray {
    pub fn new(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} does not hold {} elements",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VtfTensor {
    F32(Array<f32>),
    I32(IntArray),
}

impl VtfTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            VtfTensor::F32(a) => a.shape(),
            VtfTensor::I32(a) => &a.shape,
        }
    }

    pub fn into_f32(self, path: &Path) -> Result<Array<f32>> {
        match self {
            VtfTensor::F32(a) => Ok(a),
            VtfTensor::I32(_) => Err(Error::Format {
                path: path.to_path_buf(),
                reason: "expected f32 payload, found i32".into(),
            }),
        }
    }

    pub fn into_i32(self, path: &Path) -> Result<IntArray> {
        match self {
            VtfTensor::I32(a) => Ok(a),
            VtfTensor::F32(_) => Err(Error::Format {
                path: path.to_path_buf(),
                reason: "expected i32 payload, found f32".into(),
            }),
        }
    }
}

pub fn encode_vtf(t: &VtfTensor) -> Result<Vec<u8>> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::InvalidShape(format!("rank {} exceeds 255", shape.len())));
    }
    let n: usize = shape.iter().product();
    let mut buf = Vec::with_capacity(6 + 4 * shape.len() + 4 * n);
    buf.extend_from_slice(MAGIC);
    buf.push(match t {
        VtfTensor::F32(_) => DTYPE_F32,
        VtfTensor::I32(_) => DTYPE_I32,
    });
    buf.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidShape(format!("extent {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    match t {
        VtfTensor::F32(a) => a.data().iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        VtfTensor::I32(a) => a.data.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(buf)
}

pub fn decode_vtf(bytes: &[u8], path: &Path) -> Result<VtfTensor> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("missing VTF1 magic"));
    }
    let dtype = bytes[4];
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != 4 * n {
        return Err(bad(&format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            4 * n
        )));
    }
    let words = payload.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    match dtype {
        DTYPE_F32 => Ok(VtfTensor::F32(Array::new(
            shape,
            words.map(f32::from_le_bytes).collect(),
        )?)),
        DTYPE_I32 => Ok(VtfTensor::I32(IntArray::new(
            shape,
            words.map(i32::from_le_bytes).collect(),
        )?)),
        other => Err(bad(&format!("unknown dtype byte {other}"))),
    }
}

pub fn write_vtf(path: &Path, t: &VtfTensor) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_vtf(t)?)?;
    Ok(())
}

pub fn read_vtf(path: &Path) -> Result<VtfTensor> {
    decode_vtf(&fs::read(path)?, path)
}
