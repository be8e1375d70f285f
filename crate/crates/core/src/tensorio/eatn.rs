//! EATN binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic  0x45 0x41 0x54 0x4E ("EATN")
//! 4       1     version (0x01)
//! 5       1     ndim (1..=4)
//! 6       2     padding, must be zero
//! 8       4*n   dims, u32 each
//! 8+4n    4*N   payload, f32 row-major (last dim fastest), N = product(dims)
//! ```
//!
//! Bytes are identical for identical inputs on every host. The on-disk
//! numeric type is f32; in-memory computation elsewhere in this crate is f64
//! and converts only at this boundary.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"EATN";
pub const VERSION: u8 = 0x01;
pub const MAX_NDIM: usize = 4;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:02x?}, expected {MAGIC:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0:#04x}, expected {VERSION:#04x}")]
    UnsupportedVersion(u8),
    #[error("invalid ndim {0}, expected 1..={MAX_NDIM}")]
    InvalidNdim(u8),
    #[error("non-zero header padding {0:02x?}")]
    BadPadding([u8; 2]),
    #[error("dimension {index} is zero")]
    ZeroDim { index: usize },
    #[error("dims product overflows")]
    Overflow,
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("data length {len} does not match dims product {expected}")]
    ShapeMismatch { len: usize, expected: usize },
    #[error("dimension {value} exceeds u32 range")]
    DimTooLarge { value: usize },
}

/// Dense row-major f32 tensor, 1..=4 dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, validating shape against the data length.
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.len() > MAX_NDIM {
            return Err(TensorError::InvalidNdim(dims.len() as u8));
        }
        let mut product: usize = 1;
        for (index, &d) in dims.iter().enumerate() {
            if d == 0 {
                return Err(TensorError::ZeroDim { index });
            }
            if d > u32::MAX as usize {
                return Err(TensorError::DimTooLarge { value: d });
            }
            product = product.checked_mul(d).ok_or(TensorError::Overflow)?;
        }
        if data.len() != product {
            return Err(TensorError::ShapeMismatch {
                len: data.len(),
                expected: product,
            });
        }
        Ok(Self { dims, data })
    }

    /// Tensor of zeros with the given shape.
    pub fn zeros(dims: Vec<usize>) -> Result<Self, TensorError> {
        let n = dims.iter().product();
        Self::new(dims, vec![0.0; n])
    }

    /// Builds from f64 values, rounding to f32 at this boundary.
    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self, TensorError> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Row-major flat index for a 2-D tensor.
    pub fn at2(&self, r: usize, c: usize) -> f32 {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[r * self.dims[1] + c]
    }

    /// Row-major flat index for a 3-D tensor.
    pub fn at3(&self, a: usize, b: usize, c: usize) -> f32 {
        debug_assert_eq!(self.dims.len(), 3);
        self.data[(a * self.dims[1] + b) * self.dims[2] + c]
    }
}

/// Writes `t` to `sink` in EATN layout.
pub fn write_tensor<W: Write>(t: &Tensor, sink: &mut W) -> Result<(), TensorError> {
    let mut header = [0u8; 8];
    header[..4].copy_from_slice(&MAGIC);
    header[4] = VERSION;
    header[5] = t.dims.len() as u8;
    sink.write_all(&header)?;
    for &d in &t.dims {
        sink.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in &t.data {
        sink.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one tensor from `source`; the exact inverse of [`write_tensor`].
///
/// Consumes exactly the bytes of one tensor and leaves the stream there.
pub fn read_tensor<R: Read>(source: &mut R) -> Result<Tensor, TensorError> {
    let mut header = [0u8; 8];
    read_exact_or_truncated(source, &mut header, 8)?;
    let magic: [u8; 4] = header[..4].try_into().expect("slice length");
    if magic != MAGIC {
        return Err(TensorError::BadMagic(magic));
    }
    if header[4] != VERSION {
        return Err(TensorError::UnsupportedVersion(header[4]));
    }
    let ndim = header[5] as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(TensorError::InvalidNdim(header[5]));
    }
    if header[6] != 0 || header[7] != 0 {
        return Err(TensorError::BadPadding([header[6], header[7]]));
    }

    let mut dims = Vec::with_capacity(ndim);
    let mut product: usize = 1;
    for index in 0..ndim {
        let mut buf = [0u8; 4];
        read_exact_or_truncated(source, &mut buf, 4)?;
        let d = u32::from_le_bytes(buf) as usize;
        if d == 0 {
            return Err(TensorError::ZeroDim { index });
        }
        product = product.checked_mul(d).ok_or(TensorError::Overflow)?;
        dims.push(d);
    }
    let payload_bytes = product.checked_mul(4).ok_or(TensorError::Overflow)?;

    let mut raw = vec![0u8; payload_bytes];
    read_exact_or_truncated(source, &mut raw, payload_bytes)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor { dims, data })
}

fn read_exact_or_truncated<R: Read>(
    source: &mut R,
    buf: &mut [u8],
    expected: usize,
) -> Result<(), TensorError> {
    let mut got = 0;
    while got < buf.len() {
        let n = source.read(&mut buf[got..])?;
        if n == 0 {
            return Err(TensorError::Truncated { expected, got });
        }
        got += n;
    }
    Ok(())
}

/// Writes a tensor to a file.
pub fn save_tensor<P: AsRef<Path>>(t: &Tensor, path: P) -> Result<(), TensorError> {
    let mut file = File::create(path)?;
    write_tensor(t, &mut file)
}

/// Loads a tensor from a file; rejects trailing bytes.
pub fn load_tensor<P: AsRef<Path>>(path: P) -> Result<Tensor, TensorError> {
    let mut file = File::open(path)?;
    let tensor = read_tensor(&mut file)?;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(TensorError::TrailingBytes { extra: rest.len() });
    }
    Ok(tensor)
}

/// Serializes a tensor to an owned byte buffer.
pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * t.dims.len() + 4 * t.data.len());
    write_tensor(t, &mut buf).expect("writing to Vec cannot fail");
    buf
}

/// Deserializes a tensor from a byte buffer; rejects trailing bytes.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor, TensorError> {
    let mut cursor = io::Cursor::new(bytes);
    let tensor = read_tensor(&mut cursor)?;
    let extra = bytes.len() - cursor.position() as usize;
    if extra != 0 {
        return Err(TensorError::TrailingBytes { extra });
    }
    Ok(tensor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_2x2_layout() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = tensor_to_bytes(&t);
        assert_eq!(bytes.len(), 32);
        assert_eq!(&bytes[..4], b"EATN");
        assert_eq!(bytes[4], 0x01);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..8], &[0, 0]);
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[28..32], &4.0f32.to_le_bytes());
        assert_eq!(tensor_from_bytes(&bytes).unwrap(), t);
    }

    #[test]
    fn golden_scalar_zero_payload() {
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        let bytes = tensor_to_bytes(&t);
        assert_eq!(&bytes[12..16], &[0, 0, 0, 0]);
    }

    #[test]
    fn bad_magic_is_reported() {
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut bytes = tensor_to_bytes(&t);
        bytes[0] = b'X';
        assert!(matches!(
            tensor_from_bytes(&bytes),
            Err(TensorError::BadMagic(_))
        ));
    }

    #[test]
    fn truncated_payload_is_reported() {
        // header claims 10 elements, payload holds 8
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"EATN");
        bytes.extend_from_slice(&[0x01, 1, 0, 0]);
        bytes.extend_from_slice(&10u32.to_le_bytes());
        for _ in 0..8 {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        assert!(matches!(
            tensor_from_bytes(&bytes),
            Err(TensorError::Truncated { expected: 40, got: 32 })
        ));
    }

    #[test]
    fn overflowing_dims_are_reported() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"EATN");
        bytes.extend_from_slice(&[0x01, 4, 0, 0]);
        for _ in 0..4 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(
            tensor_from_bytes(&bytes),
            Err(TensorError::Overflow)
        ));
    }

    #[test]
    fn version_ndim_padding_checks() {
        let good = tensor_to_bytes(&Tensor::new(vec![1], vec![0.0]).unwrap());

        let mut v = good.clone();
        v[4] = 0x02;
        assert!(matches!(
            tensor_from_bytes(&v),
            Err(TensorError::UnsupportedVersion(0x02))
        ));

        let mut n = good.clone();
        n[5] = 5;
        assert!(matches!(
            tensor_from_bytes(&n),
            Err(TensorError::InvalidNdim(5))
        ));

        let mut p = good;
        p[6] = 7;
        assert!(matches!(
            tensor_from_bytes(&p),
            Err(TensorError::BadPadding(_))
        ));
    }

    #[test]
    fn trailing_bytes_rejected_for_buffers() {
        let mut bytes = tensor_to_bytes(&Tensor::new(vec![1], vec![0.5]).unwrap());
        bytes.push(0xAA);
        assert!(matches!(
            tensor_from_bytes(&bytes),
            Err(TensorError::TrailingBytes { extra: 1 })
        ));
    }
}
