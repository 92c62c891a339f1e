//! `VOL1` container: magic, little-endian `u32` extents `d, h, w`, a `u8`
//! type code, three `f32` spacings, then the row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{with_path, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VOL1";
const HEADER_LEN: usize = 4 + 12 + 1 + 12;

#[derive(Clone, Debug, PartialEq)]
pub enum Vol1Data {
    /// Code 0: raw `u8` intensities.
    Raw(Tensor<u8>),
    /// Code 1: `u8` mask holding only 0 and 1.
    Mask(Tensor<bool>),
    /// Code 2: `f32` field.
    Field(Tensor<f32>),
}

impl Vol1Data {
    pub fn shape(&self) -> &[usize] {
        match self {
            Vol1Data::Raw(t) => t.shape(),
            Vol1Data::Mask(t) => t.shape(),
            Vol1Data::Field(t) => t.shape(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vol1 {
    pub data: Vol1Data,
    pub spacing: [f32; 3],
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn encode(v: &Vol1) -> Result<Vec<u8>> {
    let shape = v.data.shape();
    if shape.len() != 3 {
        return Err(format_err(format!("VOL1 holds (d, h, w) volumes, got {shape:?}")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + shape.iter().product::<usize>() * 4);
    out.extend_from_slice(MAGIC);
    for &e in shape {
        let e = u32::try_from(e).map_err(|_| format_err("extent exceeds u32"))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    out.push(match v.data {
        Vol1Data::Raw(_) => 0,
        Vol1Data::Mask(_) => 1,
        Vol1Data::Field(_) => 2,
    });
    for s in v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    match &v.data {
        Vol1Data::Raw(t) => out.extend_from_slice(t.data()),
        Vol1Data::Mask(t) => out.extend(t.data().iter().map(|&m| m as u8)),
        Vol1Data::Field(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vol1> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(format!("VOL1 header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err("bad magic, expected VOL1"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let shape = [u32_at(4), u32_at(8), u32_at(12)];
    let code = bytes[16];
    let spacing = [f32_at(17), f32_at(21), f32_at(25)];
    let n = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| format_err("extent product overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    let elem = if code == 2 { 4 } else { 1 };
    if payload.len() != n * elem {
        return Err(format_err(format!(
            "payload is {} bytes, expected {} for extents {shape:?}",
            payload.len(),
            n * elem
        )));
    }
    let data = match code {
        0 => Vol1Data::Raw(Tensor::from_vec(&shape, payload.to_vec())?),
        1 => {
            if let Some(bad) = payload.iter().find(|&&b| b > 1) {
                return Err(format_err(format!("mask contains value {bad}")));
            }
            Vol1Data::Mask(Tensor::from_vec(&shape, payload.iter().map(|&b| b == 1).collect())?)
        }
        2 => Vol1Data::Field(Tensor::from_vec(
            &shape,
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        )?),
        c => return Err(format_err(format!("unknown type code {c}"))),
    };
    Ok(Vol1 { data, spacing })
}

pub fn write_vol1(path: &Path, v: &Vol1) -> Result<()> {
    fs::write(path, encode(v)?).map_err(|e| with_path(e, path))
}

pub fn read_vol1(path: &Path) -> Result<Vol1> {
    let bytes = fs::read(path).map_err(|e| with_path(e, path))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
