//! PSMT tensor file format.
//!
//! Layout: magic bytes `PSMT`, version `u8 = 1`, dtype `u8` (0 = f32,
//! 1 = f64), ndim `u8`, then ndim little-endian `u32` extents, then the
//! row-major payload as little-endian scalars. Used for weight checkpoints
//! and map dumps.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::data::{Scalar, TensorData};

const MAGIC: &[u8; 4] = b"PSMT";
const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn from_u8(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::format("PSMT", format!("unknown dtype byte {other}"))),
        }
    }
}

pub fn write_psmt<S: Scalar>(mut w: impl Write, tensor: &TensorData<S>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, S::DTYPE as u8, tensor.shape().len() as u8])?;
    for &extent in tensor.shape() {
        if extent > u32::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "extent {extent} exceeds u32 range"
            )));
        }
        w.write_all(&(extent as u32).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(tensor.numel() * S::byte_width());
    for &v in tensor.data() {
        payload.extend_from_slice(&v.to_le_bytes_vec());
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_psmt<S: Scalar>(mut r: impl Read) -> Result<TensorData<S>> {
    let mut header = [0u8; 7];
    r.read_exact(&mut header)
        .map_err(|e| Error::format("PSMT", format!("truncated header: {e}")))?;
    if &header[..4] != MAGIC {
        return Err(Error::format("PSMT", "bad magic bytes"));
    }
    if header[4] != VERSION {
        return Err(Error::format(
            "PSMT",
            format!("unsupported version {}", header[4]),
        ));
    }
    let dtype = Dtype::from_u8(header[5])?;
    if dtype != S::DTYPE {
        return Err(Error::format(
            "PSMT",
            format!("dtype {:?} does not match requested {:?}", dtype, S::DTYPE),
        ));
    }
    let ndim = header[6] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut ext = [0u8; 4];
        r.read_exact(&mut ext)
            .map_err(|e| Error::format("PSMT", format!("truncated extents: {e}")))?;
        shape.push(u32::from_le_bytes(ext) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * S::byte_width()];
    r.read_exact(&mut payload)
        .map_err(|e| Error::format("PSMT", format!("truncated payload: {e}")))?;
    let data = payload
        .chunks_exact(S::byte_width())
        .map(S::from_le_slice)
        .collect();
    TensorData::new(shape, data)
}

pub fn write_psmt_file<S: Scalar>(path: impl AsRef<Path>, tensor: &TensorData<S>) -> Result<()> {
    let mut buf = Vec::new();
    write_psmt(&mut buf, tensor)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_psmt_file<S: Scalar>(path: impl AsRef<Path>) -> Result<TensorData<S>> {
    let bytes = std::fs::read(path)?;
    read_psmt(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_f32() {
        let t = TensorData::<f32>::new(vec![2, 3], vec![1.0, -2.5, 0.0, 4.25, 1e-6, 9.0]).unwrap();
        let mut buf = Vec::new();
        write_psmt(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"PSMT");
        assert_eq!(buf[4], 1);
        assert_eq!(buf[5], 0);
        assert_eq!(buf[6], 2);
        let back: TensorData<f32> = read_psmt(buf.as_slice()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn roundtrip_f64_and_dtype_mismatch() {
        let t = TensorData::<f64>::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_psmt(&mut buf, &t).unwrap();
        assert_eq!(buf[5], 1);
        let back: TensorData<f64> = read_psmt(buf.as_slice()).unwrap();
        assert_eq!(t, back);
        assert!(read_psmt::<f32>(buf.as_slice()).is_err());
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"XSMT\x01\x00\x01\x02\x00\x00\x00".to_vec();
        assert!(read_psmt::<f32>(buf.as_slice()).is_err());
    }
}
