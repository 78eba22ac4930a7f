//! HOT1 tensor files.
//!
//! Layout: `b"HOT1"`, one dtype byte (0 = f32, 1 = f64), one ndim byte
//! (always 2), two zero bytes, `ndim` little-endian u64 dims, then the
//! row-major little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{HlaError, Result};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 4] = b"HOT1";
const HEADER_LEN: usize = 8 + 2 * 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(HlaError::BadDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode_tensor(m: &Matrix, dtype: Dtype) -> Result<Vec<u8>> {
    if m.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(HlaError::NonFinite);
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + m.as_slice().len() * dtype.size());
    buf.extend_from_slice(MAGIC);
    buf.push(dtype.code());
    buf.push(2);
    buf.extend_from_slice(&[0, 0]);
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    match dtype {
        Dtype::F64 => m
            .as_slice()
            .iter()
            .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        Dtype::F32 => m
            .as_slice()
            .iter()
            .for_each(|&x| buf.extend_from_slice(&(x as f32).to_le_bytes())),
    }
    Ok(buf)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Matrix, Dtype)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(HlaError::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(HlaError::Malformed("truncated header".into()));
    }
    let dtype = Dtype::from_code(bytes[4])?;
    if bytes[5] != 2 {
        return Err(HlaError::Malformed(format!(
            "ndim must be 2, found {}",
            bytes[5]
        )));
    }
    if bytes.len() < HEADER_LEN {
        return Err(HlaError::Malformed("truncated header".into()));
    }
    let dim = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let (rows, cols) = (dim(8), dim(16));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.size() as u64))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| HlaError::Malformed(format!("dims {rows}x{cols} overflow")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(HlaError::PayloadLengthMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let data: Vec<f64> = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok((Matrix::from_vec(rows as usize, cols as usize, data)?, dtype))
}

/// Writes `m` as f64.
pub fn write_tensor(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    write_tensor_as(path, m, Dtype::F64)
}

/// Writes `m` in the given precision. f32 output rounds each entry.
pub fn write_tensor_as(path: impl AsRef<Path>, m: &Matrix, dtype: Dtype) -> Result<()> {
    fs::write(path, encode_tensor(m, dtype)?)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Matrix> {
    read_tensor_with_dtype(path).map(|(m, _)| m)
}

pub fn read_tensor_with_dtype(path: impl AsRef<Path>) -> Result<(Matrix, Dtype)> {
    decode_tensor(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn size_of_two_by_one_f64() {
        let m = Matrix::from_vec(2, 1, vec![1.0, 3.0]).unwrap();
        let bytes = encode_tensor(&m, Dtype::F64).unwrap();
        assert_eq!(bytes.len(), 40);
        assert_eq!(&bytes[..8], b"HOT1\x01\x02\x00\x00");
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &1u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &1.0f64.to_le_bytes());
    }

    #[test]
    fn truncated_payload() {
        let m = Matrix::from_vec(2, 1, vec![1.0, 3.0]).unwrap();
        let bytes = encode_tensor(&m, Dtype::F64).unwrap();
        let err = decode_tensor(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(
            err,
            HlaError::PayloadLengthMismatch {
                expected: 16,
                actual: 13
            }
        ));
        assert!(err.to_string().contains("payload length mismatch"));
    }

    #[test]
    fn header_errors() {
        let m = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let good = encode_tensor(&m, Dtype::F64).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(HlaError::BadMagic)));

        let mut bad = good.clone();
        bad[4] = 7;
        assert!(matches!(decode_tensor(&bad), Err(HlaError::BadDtype(7))));

        let mut bad = good.clone();
        bad[5] = 3;
        assert!(matches!(decode_tensor(&bad), Err(HlaError::Malformed(_))));

        assert!(matches!(
            decode_tensor(&good[..12]),
            Err(HlaError::Malformed(_))
        ));
    }

    #[test]
    fn non_finite_payload_rejected_on_read() {
        let m = Matrix::from_vec(1, 2, vec![2.0, 5.0]).unwrap();
        let mut bytes = encode_tensor(&m, Dtype::F64).unwrap();
        bytes[32..40].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_tensor(&bytes), Err(HlaError::NonFinite)));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.hot");
        let m = Matrix::from_rows(&[[1.5, -2.25, 0.0], [1e-300, 7.0, -0.0]]).unwrap();
        write_tensor(&path, &m).unwrap();
        let (back, dtype) = read_tensor_with_dtype(&path).unwrap();
        assert_eq!(dtype, Dtype::F64);
        assert_eq!(back.shape(), (2, 3));
        let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
    }

    proptest! {
        #[test]
        fn f64_round_trip_bit_exact(rows in 0usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| f64::from_bits(rng.next_u64() & !(0x7FFu64 << 52) | (0x3FFu64 << 52)) - 1.5)
                .collect();
            let m = Matrix::from_vec(rows, cols, data).unwrap();
            let (back, _) = decode_tensor(&encode_tensor(&m, Dtype::F64).unwrap()).unwrap();
            prop_assert_eq!(back.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn f32_round_trip_bit_exact(vals in proptest::collection::vec(-1e30f32..1e30, 1..12)) {
            let m = Matrix::from_vec(1, vals.len(), vals.iter().map(|&x| x as f64).collect()).unwrap();
            let bytes = encode_tensor(&m, Dtype::F32).unwrap();
            prop_assert_eq!(bytes.len(), HEADER_LEN + 4 * vals.len());
            let (back, dtype) = decode_tensor(&bytes).unwrap();
            prop_assert_eq!(dtype, Dtype::F32);
            let again = encode_tensor(&back, Dtype::F32).unwrap();
            prop_assert_eq!(bytes, again);
        }
    }
}
