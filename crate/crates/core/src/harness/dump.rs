//! Raw RGB frame dumps: `u32` LE width, `u32` LE height, then 8-bit RGB
//! row-major. Values are clamped to `[0, 1]` and rounded.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Array;

pub fn encode_rgb(frame: &Array) -> Result<Vec<u8>> {
    let &[h, w, 3] = frame.shape() else {
        return Err(Error::InvalidShape(format!("raw dump needs [H, W, 3], got {:?}", frame.shape())));
    };
    let mut out = Vec::with_capacity(8 + h * w * 3);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend(frame.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_rgb(bytes: &[u8]) -> Result<Array> {
    let bad = |reason: &str| Error::Format {
        path: "<raw rgb>".into(),
        reason: reason.into(),
    };
    if bytes.len() < 8 {
        return Err(bad("truncated header"));
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 8 + w * h * 3 {
        return Err(bad("payload length does not match extents"));
    }
    Array::new(vec![h, w, 3], bytes[8..].iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn write_rgb(path: &Path, frame: &Array) -> Result<()> {
    fs::write(path, encode_rgb(frame)?)?;
    Ok(())
}

/// Writes every frame of `[T, H, W, 3]` as `{stem}_{t:03}.rgb`.
pub fn write_rgb_frames(dir: &Path, stem: &str, frames: &Array) -> Result<()> {
    let &[t, h, w, c] = frames.shape() else {
        return Err(Error::InvalidShape(format!("expected [T, H, W, 3], got {:?}", frames.shape())));
    };
    let per = h * w * c;
    for i in 0..t {
        let f = Array::new(vec![h, w, c], frames.data()[i * per..(i + 1) * per].to_vec())?;
        write_rgb(&dir.join(format!("{stem}_{i:03}.rgb")), &f)?;
    }
    Ok(())
}
