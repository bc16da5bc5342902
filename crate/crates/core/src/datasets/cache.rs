//! Single-file binary cache for [`SampleSet`].
//!
//! Layout: magic tag, version byte, dtype byte, dimensions, K, name,
//! int32 labels, then the matrix in row-major order. The matrix is stored
//! as little-endian float32 when every entry survives the narrowing
//! exactly (true for pixel data), otherwise as float64, so round-trips are
//! always bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use super::SampleSet;
use crate::binio;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MLRDSCS1";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

pub fn save_cache(set: &SampleSet, path: &Path) -> Result<()> {
    set.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    binio::write_magic(&mut w, MAGIC, VERSION)?;

    let exact_f32 = set.x.iter().all(|&v| (v as f32) as f64 == v);
    binio::write_u8(&mut w, if exact_f32 { DTYPE_F32 } else { DTYPE_F64 })?;

    let (d, n) = set.x.dim();
    binio::write_usize(&mut w, d)?;
    binio::write_usize(&mut w, n)?;
    binio::write_usize(&mut w, set.image_shape.0)?;
    binio::write_usize(&mut w, set.image_shape.1)?;
    binio::write_usize(&mut w, set.image_shape.2)?;
    binio::write_usize(&mut w, set.k)?;
    binio::write_string(&mut w, &set.name)?;

    let labels: Vec<i32> = set
        .labels
        .iter()
        .map(|&l| {
            i32::try_from(l).map_err(|_| Error::Format(format!("label {l} exceeds int32")))
        })
        .collect::<Result<_>>()?;
    binio::write_i32_slice(&mut w, &labels)?;

    let data = set.x.as_slice().expect("standard layout");
    if exact_f32 {
        for &v in data {
            w.write_f32::<LittleEndian>(v as f32)
                .map_err(|e| Error::Format(format!("write failed: {e}")))?;
        }
    } else {
        for &v in data {
            w.write_f64::<LittleEndian>(v)
                .map_err(|e| Error::Format(format!("write failed: {e}")))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<SampleSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let version = binio::read_magic(&mut r, MAGIC)?;
    binio::expect_version(version, VERSION)?;

    let dtype = binio::read_u8(&mut r)?;
    let d = binio::read_usize(&mut r)?;
    let n = binio::read_usize(&mut r)?;
    let h = binio::read_usize(&mut r)?;
    let w = binio::read_usize(&mut r)?;
    let c = binio::read_usize(&mut r)?;
    let k = binio::read_usize(&mut r)?;
    let name = binio::read_string(&mut r)?;

    let raw_labels = binio::read_i32_vec(&mut r)?;
    if raw_labels.len() != n {
        return Err(Error::Format(format!(
            "container declares {n} samples but holds {} labels",
            raw_labels.len()
        )));
    }
    let labels: Vec<usize> = raw_labels
        .into_iter()
        .map(|l| {
            usize::try_from(l).map_err(|_| Error::Format(format!("negative label {l}")))
        })
        .collect::<Result<_>>()?;

    let total = d
        .checked_mul(n)
        .ok_or_else(|| Error::Format("matrix size overflows".into()))?;
    let mut data = vec![0.0f64; total];
    match dtype {
        DTYPE_F32 => {
            let mut buf = vec![0.0f32; total];
            r.read_f32_into::<LittleEndian>(&mut buf)
                .map_err(|e| eof_to_format(e))?;
            for (dst, src) in data.iter_mut().zip(buf.into_iter()) {
                *dst = src as f64;
            }
        }
        DTYPE_F64 => {
            r.read_f64_into::<LittleEndian>(&mut data)
                .map_err(|e| eof_to_format(e))?;
        }
        other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
    }
    // Reject trailing garbage so corrupt concatenations are caught.
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(Error::Format("trailing bytes after matrix".into())),
        Err(e) => return Err(Error::Format(format!("read failed: {e}"))),
    }

    let x = Array2::from_shape_vec((d, n), data)
        .map_err(|e| Error::Format(format!("matrix shape mismatch: {e}")))?;
    SampleSet::new(x, labels, (h, w, c), name, k)
}

fn eof_to_format(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("unexpected end of file".into())
    } else {
        Error::Format(format!("read failed: {e}"))
    }
}
