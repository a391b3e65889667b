//! Binary tensor records.
//!
//! Layout (little-endian): `b"TFTN"`, `u32` version, `u32` rank,
//! `u32` extents, `u8` dtype (0 = f32, 1 = f64), then the row-major payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Tensor, TensorError};

pub const TENSOR_MAGIC: [u8; 4] = *b"TFTN";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupted payload: truncated while reading {0}")]
    Truncated(&'static str),
    #[error("corrupted payload: {0}")]
    Corrupted(String),
    #[error("invalid tensor record: {0}")]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => FormatError::Truncated(what),
        _ => FormatError::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_bytes<R: Read>(r: &mut R, n: usize, what: &'static str) -> Result<Vec<u8>, FormatError> {
    let mut buf = vec![0u8; n];
    read_exact_or(r, &mut buf, what)?;
    Ok(buf)
}

pub(crate) fn check_magic<R: Read>(r: &mut R, expected: [u8; 4]) -> Result<(), FormatError> {
    let mut found = [0u8; 4];
    read_exact_or(r, &mut found, "magic")?;
    if found != expected {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(&expected).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    Ok(())
}

pub fn write_tensor_to<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<(), FormatError> {
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| FormatError::Corrupted(format!("extent {e} exceeds u32")))?;
        w.write_all(&e.to_le_bytes())?;
    }
    w.write_all(&[dtype.tag()])?;
    match dtype {
        DType::F64 => {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DType::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor_from<R: Read>(r: &mut R) -> Result<Tensor, FormatError> {
    check_magic(r, TENSOR_MAGIC)?;
    let version = read_u32(r, "version")?;
    if version != TENSOR_VERSION {
        return Err(FormatError::Version {
            found: version,
            expected: TENSOR_VERSION,
        });
    }
    let rank = read_u32(r, "rank")? as usize;
    if rank > 16 {
        return Err(FormatError::Corrupted(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, "extents")? as usize);
    }
    let mut tag = [0u8; 1];
    read_exact_or(r, &mut tag, "dtype")?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| FormatError::Corrupted(format!("shape {shape:?} overflows")))?;
    let data = match tag[0] {
        1 => {
            let raw = read_bytes(r, count * 8, "payload")?;
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect()
        }
        0 => {
            let raw = read_bytes(r, count * 4, "payload")?;
            raw.chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
                .collect()
        }
        other => return Err(FormatError::Corrupted(format!("unknown dtype tag {other}"))),
    };
    Ok(Tensor::new(&shape, data)?)
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: DType) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t, dtype)?;
    w.flush()?;
    Ok(())
}

/// Reads a file holding exactly one tensor record.
pub fn read_tensor(path: &Path) -> Result<Tensor, FormatError> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor_from(&mut r)?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(FormatError::Corrupted(format!(
            "trailing bytes after tensor in {}",
            path.display()
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode(t: &Tensor, dtype: DType) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, t, dtype).unwrap();
        buf
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let buf = encode(&t, DType::F64);
        assert_eq!(&buf[..4], b"TFTN");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 3);
        assert_eq!(buf[20], 1);
        assert_eq!(buf.len(), 21 + 6 * 8);
        assert_eq!(f64::from_le_bytes(buf[21..29].try_into().unwrap()), 1.0);
    }

    #[test]
    fn f64_roundtrip_is_bitwise() {
        let t = Tensor::new(&[3], vec![0.1, -1e-300, f64::MAX]).unwrap();
        let back = read_tensor_from(&mut encode(&t, DType::F64).as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn scalar_and_f32() {
        let t = Tensor::scalar(0.5);
        let buf = encode(&t, DType::F32);
        assert_eq!(buf.len(), 4 + 4 + 4 + 1 + 4);
        assert_eq!(read_tensor_from(&mut buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn distinct_errors() {
        let t = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let good = encode(&t, DType::F64);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            read_tensor_from(&mut bad_magic.as_slice()),
            Err(FormatError::BadMagic { .. })
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(
            read_tensor_from(&mut bad_version.as_slice()),
            Err(FormatError::Version { found: 9, .. })
        ));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(
            read_tensor_from(&mut &truncated[..]),
            Err(FormatError::Truncated("payload"))
        ));
    }
}
