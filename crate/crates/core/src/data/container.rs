//! Self-describing little-endian tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size      | field                                  |
//! |--------|-----------|----------------------------------------|
//! | 0      | 4         | magic `b"RFT\0"`                       |
//! | 4      | 2         | format version, currently 1            |
//! | 6      | 1         | dtype: 0 = f32, 1 = f64, 2 = u8        |
//! | 7      | 1         | rank `r`                               |
//! | 8      | 8 * r     | dims as u64                            |
//! | 8+8r   | remainder | row-major payload, little-endian items |

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"RFT\0";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::U8,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// Element types the container can hold.
pub trait ContainerElement: Copy + Sized {
    const DTYPE: DType;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl ContainerElement for f32 {
    const DTYPE: DType = DType::F32;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        f32::from_le_bytes(b.try_into().unwrap())
    }
}

impl ContainerElement for f64 {
    const DTYPE: DType = DType::F64;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        f64::from_le_bytes(b.try_into().unwrap())
    }
}

impl ContainerElement for u8 {
    const DTYPE: DType = DType::U8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(b: &[u8]) -> Self {
        b[0]
    }
}

pub fn encode<T: ContainerElement>(array: &ArrayD<T>) -> Vec<u8> {
    let shape = array.shape();
    let mut out = Vec::with_capacity(8 + 8 * shape.len() + array.len() * T::DTYPE.size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in array.iter() {
        x.write_le(&mut out);
    }
    out
}

/// Parses the header; returns dtype, shape and the payload offset.
pub fn decode_header(bytes: &[u8], path: &Path) -> Result<(DType, Vec<usize>, usize)> {
    if bytes.len() < 8 {
        return Err(Error::format(path, format!("file too short for header ({} bytes)", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::format(path, format!("bad magic {:02x?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version} (expected {VERSION})")));
    }
    let dtype = DType::from_code(bytes[6]).ok_or_else(|| Error::format(path, format!("unknown dtype code {}", bytes[6])))?;
    let rank = bytes[7] as usize;
    let header = 8 + 8 * rank;
    if bytes.len() < header {
        return Err(Error::format(path, "truncated dims"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let expected = dims.iter().product::<usize>() * dtype.size();
    let got = bytes.len() - header;
    if got != expected {
        return Err(Error::format(path, format!("payload is {got} bytes, shape {dims:?} needs {expected}")));
    }
    Ok((dtype, dims, header))
}

pub fn decode<T: ContainerElement>(bytes: &[u8], path: &Path) -> Result<ArrayD<T>> {
    let (dtype, dims, off) = decode_header(bytes, path)?;
    if dtype != T::DTYPE {
        return Err(Error::format(path, format!("dtype is {dtype:?}, requested {:?}", T::DTYPE)));
    }
    let sz = dtype.size();
    let data: Vec<T> = bytes[off..].chunks_exact(sz).map(T::read_le).collect();
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_tensor<T: ContainerElement>(path: impl AsRef<Path>, array: &ArrayD<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(array)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor<T: ContainerElement>(path: impl AsRef<Path>) -> Result<ArrayD<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let a = ArrayD::<f32>::from_shape_vec(IxDyn(&[2, 1]), vec![1.0, -2.0]).unwrap();
        let b = encode(&a);
        assert_eq!(&b[..4], b"RFT\0");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 0);
        assert_eq!(b[7], 2);
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &1u64.to_le_bytes());
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn rejects_truncation_and_wrong_dtype() {
        let a = ArrayD::<f64>::zeros(IxDyn(&[3, 3]));
        let b = encode(&a);
        let p = Path::new("mem");
        assert!(decode::<f64>(&b[..b.len() - 1], p).is_err());
        assert!(decode::<f32>(&b, p).is_err());
        let mut v = b.clone();
        v[4] = 9;
        assert!(decode::<f64>(&v, p).unwrap_err().to_string().contains("version"));
    }
}
