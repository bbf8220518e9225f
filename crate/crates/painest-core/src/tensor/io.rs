//! BTEN: the on-disk tensor format. Layout, all little-endian:
//! magic `BTEN`, version byte (1), dtype code (0 = f32, 1 = f64), rank byte,
//! `rank` dims as u64, then the row-major payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"BTEN";
const VERSION: u8 = 1;
const MAX_RANK: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Dtype> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::InvalidArgument {
                what: "dtype",
                reason: format!("expected f32 or f64, got {other}"),
            }),
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

/// Write values (converted to `dtype`) with their shape. f32 output rounds
/// each value to the nearest f32.
pub fn write_bten(path: &Path, data: &[f64], shape: &[usize], dtype: Dtype) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() || shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("data length {} does not match shape", data.len()),
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION, dtype.code(), shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match dtype {
        Dtype::F32 => {
            for &v in data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a tensor file, widening f32 payloads to f64.
pub fn read_bten(path: &Path) -> Result<(Vec<f64>, Vec<usize>, Dtype)> {
    let fmt = |field: &'static str, reason: String| Error::TensorFormat {
        path: path.to_path_buf(),
        field,
        reason,
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 7];
    r.read_exact(&mut head)
        .map_err(|e| fmt("header", format!("file too short: {e}")))?;
    if head[0..4] != MAGIC {
        return Err(fmt("magic", format!("expected BTEN, got {:?}", &head[0..4])));
    }
    if head[4] != VERSION {
        return Err(fmt("version", format!("expected {VERSION}, got {}", head[4])));
    }
    let dtype = match head[5] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(fmt("dtype", format!("unknown code {other}"))),
    };
    let rank = head[6];
    if rank == 0 || rank > MAX_RANK {
        return Err(fmt("rank", format!("must be 1..={MAX_RANK}, got {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for i in 0..rank {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)
            .map_err(|e| fmt("dims", format!("truncated at dim {i}: {e}")))?;
        let d = u64::from_le_bytes(buf);
        if d == 0 {
            return Err(fmt("dims", format!("dim {i} is zero")));
        }
        shape.push(d as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected = numel * dtype.size();
    if payload.len() != expected {
        return Err(fmt(
            "payload",
            format!("expected {expected} bytes for shape {shape:?} {dtype}, got {}", payload.len()),
        ));
    }
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((data, shape, dtype))
}
