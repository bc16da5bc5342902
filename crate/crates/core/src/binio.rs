//! Little-endian binary container primitives shared by the dataset cache and
//! the model/training checkpoints.
//!
//! Every container starts with an 8-byte magic tag followed by a version
//! byte. All integers are little-endian; floats are IEEE-754 bit patterns,
//! so round-trips are exact.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub(crate) fn write_magic<W: Write>(w: &mut W, tag: &[u8; 8], version: u8) -> Result<()> {
    w.write_all(tag).map_err(stream_err)?;
    w.write_u8(version).map_err(stream_err)?;
    Ok(())
}

/// Checks the magic tag and returns the version byte.
pub(crate) fn read_magic<R: Read>(r: &mut R, tag: &[u8; 8]) -> Result<u8> {
    let mut got = [0u8; 8];
    r.read_exact(&mut got).map_err(truncated)?;
    if &got != tag {
        return Err(Error::Format(format!(
            "bad magic tag: expected {:?}, found {:?}",
            String::from_utf8_lossy(tag),
            String::from_utf8_lossy(&got)
        )));
    }
    r.read_u8().map_err(truncated)
}

pub(crate) fn expect_version(found: u8, supported: u8) -> Result<()> {
    if found != supported {
        return Err(Error::Format(format!(
            "unsupported container version {found} (supported: {supported})"
        )));
    }
    Ok(())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_u64::<LittleEndian>(v).map_err(stream_err)
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    r.read_u64::<LittleEndian>().map_err(truncated)
}

pub(crate) fn write_u8<W: Write>(w: &mut W, v: u8) -> Result<()> {
    w.write_u8(v).map_err(stream_err)
}

pub(crate) fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    r.read_u8().map_err(truncated)
}

pub(crate) fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_f64::<LittleEndian>(v).map_err(stream_err)
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    r.read_f64::<LittleEndian>().map_err(truncated)
}

pub(crate) fn write_usize<W: Write>(w: &mut W, v: usize) -> Result<()> {
    write_u64(w, v as u64)
}

pub(crate) fn read_usize<R: Read>(r: &mut R) -> Result<usize> {
    let v = read_u64(r)?;
    usize::try_from(v).map_err(|_| Error::Format(format!("length {v} does not fit in usize")))
}

pub(crate) fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_usize(w, s.len())?;
    w.write_all(s.as_bytes()).map_err(stream_err)
}

pub(crate) fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = read_usize(r)?;
    if len > (1 << 20) {
        return Err(Error::Format(format!("unreasonable string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid utf-8 string: {e}")))
}

pub(crate) fn write_f64_slice<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    write_usize(w, data.len())?;
    for &v in data {
        w.write_f64::<LittleEndian>(v).map_err(stream_err)?;
    }
    Ok(())
}

pub(crate) fn read_f64_vec<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let len = read_usize(r)?;
    let mut out = vec![0.0f64; len];
    r.read_f64_into::<LittleEndian>(&mut out).map_err(truncated)?;
    Ok(out)
}

pub(crate) fn write_i32_slice<W: Write>(w: &mut W, data: &[i32]) -> Result<()> {
    write_usize(w, data.len())?;
    for &v in data {
        w.write_i32::<LittleEndian>(v).map_err(stream_err)?;
    }
    Ok(())
}

pub(crate) fn read_i32_vec<R: Read>(r: &mut R) -> Result<Vec<i32>> {
    let len = read_usize(r)?;
    let mut out = vec![0i32; len];
    r.read_i32_into::<LittleEndian>(&mut out).map_err(truncated)?;
    Ok(out)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("unexpected end of file".to_string())
    } else {
        Error::Format(format!("read failed: {e}"))
    }
}

fn stream_err(e: std::io::Error) -> Error {
    Error::Format(format!("write failed: {e}"))
}
