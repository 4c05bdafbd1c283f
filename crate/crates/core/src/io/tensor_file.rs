//! Binary stack files.
//!
//! Layout: the magic `MFDT`, then little-endian `u32` fields `version`,
//! `width`, `height`, `frames` and `dtype`, then `width * height * frames`
//! little-endian binary32 samples in stack order (`x` fastest, then `z`,
//! then `t`). Kernels are stored as single-frame stacks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Kernel2, Tensor3};

pub const MAGIC: [u8; 4] = *b"MFDT";
pub const FORMAT_VERSION: u32 = 1;
/// IEEE-754 binary32.
pub const DTYPE_F32: u32 = 1;

const HEADER_LEN: usize = 24;

pub fn write_tensor_to<T: Real>(mut w: impl Write, x: &Tensor3<T>) -> Result<()> {
    let d = x.dims();
    let dim = |name: &str, v: usize| {
        u32::try_from(v).map_err(|_| Error::arg(format!("{name} {v} does not fit the file format")))
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * d.len());
    buf.extend_from_slice(&MAGIC);
    for v in [
        FORMAT_VERSION,
        dim("width", d.width)?,
        dim("height", d.height)?,
        dim("frames", d.frames)?,
        DTYPE_F32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in x.as_slice() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor_from<T: Real>(mut r: impl Read) -> Result<Tensor3<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn decode<T: Real>(bytes: &[u8]) -> Result<Tensor3<T>> {
    let field = |name: &str, i: usize| -> Result<u32> {
        let off = 4 + 4 * i;
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| {
                Error::parse(
                    name,
                    format!("file ends after {} bytes, inside the header", bytes.len()),
                )
            })
    };
    match bytes.get(..4) {
        Some(m) if m == MAGIC => {}
        Some(m) => return Err(Error::parse("magic", format!("expected \"MFDT\", found {m:02x?}"))),
        None => {
            return Err(Error::parse(
                "magic",
                format!("file is only {} bytes long", bytes.len()),
            ))
        }
    }
    let version = field("version", 0)?;
    if version != FORMAT_VERSION {
        return Err(Error::parse(
            "version",
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let width = field("width", 1)? as usize;
    let height = field("height", 2)? as usize;
    let frames = field("frames", 3)? as usize;
    let dtype = field("dtype", 4)?;
    if dtype != DTYPE_F32 {
        return Err(Error::parse(
            "dtype",
            format!("unsupported dtype code {dtype}, expected {DTYPE_F32}"),
        ));
    }
    for (name, v) in [("width", width), ("height", height), ("frames", frames)] {
        if v == 0 {
            return Err(Error::parse(name, "must be at least 1"));
        }
    }
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(frames))
        .ok_or_else(|| Error::parse("frames", "dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * n {
        let got = payload.len() / 4;
        let what = if payload.len() < 4 * n {
            "truncated"
        } else {
            "has trailing bytes"
        };
        return Err(Error::parse(
            "payload",
            format!(
                "{what}: {width}x{height}x{frames} needs {n} values, found {got}{}",
                if !payload.len().is_multiple_of(4) {
                    " and a partial value"
                } else {
                    ""
                }
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Tensor3::new(width, height, frames, data)
}

pub fn write_tensor<T: Real>(path: impl AsRef<Path>, x: &Tensor3<T>) -> Result<()> {
    write_tensor_to(BufWriter::new(File::create(path)?), x)
}

pub fn read_tensor<T: Real>(path: impl AsRef<Path>) -> Result<Tensor3<T>> {
    read_tensor_from(BufReader::new(File::open(path)?))
}

pub fn write_kernel<T: Real>(path: impl AsRef<Path>, a: &Kernel2<T>) -> Result<()> {
    write_tensor(path, &Tensor3::new(a.width(), a.height(), 1, a.as_slice().to_vec())?)
}

/// Reads a single-frame file as a kernel; the extents must be odd.
pub fn read_kernel<T: Real>(path: impl AsRef<Path>) -> Result<Kernel2<T>> {
    let t: Tensor3<T> = read_tensor(path)?;
    if t.frames() != 1 {
        return Err(Error::parse(
            "frames",
            format!("a kernel file holds one frame, found {}", t.frames()),
        ));
    }
    Kernel2::new(t.width(), t.height(), t.into_vec())
}
