//! The `CTT1` tensor file format.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "CTT1"
//! 4       1         dtype: 0 = f32, 1 = u8
//! 5       1         rank (0..=4)
//! 6       4 * rank  dims, u32 little-endian
//! ..      payload   row-major values, little-endian
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"CTT1";
pub const MAX_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    U8 = 1,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::U8),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

pub fn encode_tensor(tensor: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    if tensor.rank() > MAX_RANK {
        return Err(Error::shape(format!(
            "rank {} exceeds the format limit of {MAX_RANK}",
            tensor.rank()
        )));
    }
    let mut out = Vec::with_capacity(6 + 4 * tensor.rank() + tensor.len() * dtype.width());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.push(dtype as u8);
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| Error::shape(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        DType::F32 => {
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::U8 => {
            for (i, &v) in tensor.data().iter().enumerate() {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::validation(format!(
                        "element {i} = {v} is not representable as u8"
                    )));
                }
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

/// Decodes one tensor starting at `offset`; returns it with the number of
/// bytes consumed. Error offsets are absolute positions in `bytes`.
pub(crate) fn decode_tensor_at(bytes: &[u8], offset: usize) -> Result<(Tensor, usize)> {
    let buf = &bytes[offset.min(bytes.len())..];
    let at = |rel: usize| offset + rel;

    if buf.len() < TENSOR_MAGIC.len() {
        let bad = buf
            .iter()
            .zip(&TENSOR_MAGIC)
            .position(|(a, b)| a != b)
            .unwrap_or(buf.len());
        return Err(format_err(at(bad), "truncated or missing magic"));
    }
    if let Some(bad) = buf.iter().zip(&TENSOR_MAGIC).position(|(a, b)| a != b) {
        return Err(format_err(at(bad), "bad magic, expected \"CTT1\""));
    }
    let dtype_code = *buf.get(4).ok_or_else(|| format_err(at(4), "missing dtype byte"))?;
    let dtype =
        DType::from_code(dtype_code).ok_or_else(|| format_err(at(4), format!("unknown dtype code {dtype_code}")))?;
    let rank = *buf.get(5).ok_or_else(|| format_err(at(5), "missing rank byte"))? as usize;
    if rank > MAX_RANK {
        return Err(format_err(at(5), format!("rank {rank} exceeds {MAX_RANK}")));
    }

    let mut pos = 6;
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let raw: [u8; 4] = buf
            .get(pos..pos + 4)
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| format_err(at(pos), format!("truncated dimension {i}")))?;
        let d = u32::from_le_bytes(raw) as usize;
        count = count
            .checked_mul(d)
            .ok_or_else(|| format_err(at(pos), "element count overflows"))?;
        shape.push(d);
        pos += 4;
    }

    let payload_len = count
        .checked_mul(dtype.width())
        .ok_or_else(|| format_err(at(pos), "payload size overflows"))?;
    let payload = buf.get(pos..pos + payload_len).ok_or_else(|| {
        format_err(
            at(buf.len()),
            format!(
                "truncated payload: expected {payload_len} bytes from offset {}, found {}",
                at(pos),
                buf.len() - pos
            ),
        )
    })?;
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DType::U8 => payload.iter().map(|&b| f32::from(b)).collect(),
    };
    Ok((Tensor::new(shape, data)?, pos + payload_len))
}

/// Decodes a buffer holding exactly one tensor.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (tensor, used) = decode_tensor_at(bytes, 0)?;
    if used != bytes.len() {
        return Err(format_err(used, format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(tensor)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(tensor, dtype)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

/// Reads a mask file and checks that it is binary.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mask = read_tensor(path)?;
    if !mask.is_binary() {
        return Err(Error::validation(format!(
            "{}: mask values must be 0 or 1",
            path.display()
        )));
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn offset_of(err: Error) -> usize {
        match err {
            Error::Format { offset, .. } => offset,
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn empty_buffer_fails_at_zero() {
        assert_eq!(offset_of(decode_tensor(&[]).unwrap_err()), 0);
    }

    #[test]
    fn header_errors_are_positioned() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let good = encode_tensor(&t, DType::F32).unwrap();

        let mut bad = good.clone();
        bad[2] = b'X';
        assert_eq!(offset_of(decode_tensor(&bad).unwrap_err()), 2);

        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(offset_of(decode_tensor(&bad).unwrap_err()), 4);

        let mut bad = good.clone();
        bad[5] = 5;
        assert_eq!(offset_of(decode_tensor(&bad).unwrap_err()), 5);

        assert_eq!(offset_of(decode_tensor(&good[..9]).unwrap_err()), 10 - 4);
        assert_eq!(
            offset_of(decode_tensor(&good[..good.len() - 1]).unwrap_err()),
            good.len() - 1
        );

        let mut long = good.clone();
        long.push(0);
        assert_eq!(offset_of(decode_tensor(&long).unwrap_err()), good.len());
    }

    #[test]
    fn mask_bytes_are_exact() {
        let mask = Tensor::new(vec![1, 3], vec![0.0, 1.0, 1.0]).unwrap();
        let bytes = encode_tensor(&mask, DType::U8).unwrap();
        assert_eq!(
            bytes,
            b"CTT1\x01\x02\x01\x00\x00\x00\x03\x00\x00\x00\x00\x01\x01".to_vec()
        );
        let back = decode_tensor(&bytes).unwrap();
        assert_eq!(back, mask);
        assert!(back.is_binary());
    }

    #[test]
    fn u8_rejects_fractions() {
        let t = Tensor::new(vec![1], vec![0.5]).unwrap();
        assert!(encode_tensor(&t, DType::U8).is_err());
    }

    proptest! {
        #[test]
        fn f32_round_trip_is_bit_exact(
            shape in prop::collection::vec(0usize..5, 0..=4),
            seed in any::<u32>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2_654_435_761).wrapping_add(i as u32 * 97)))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = decode_tensor(&encode_tensor(&t, DType::F32).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn u8_round_trip(shape in prop::collection::vec(1usize..5, 0..=4), salt in any::<u8>()) {
            let t = Tensor::from_fn(shape, |i| f32::from((i as u8).wrapping_mul(31).wrapping_add(salt)));
            let back = decode_tensor(&encode_tensor(&t, DType::U8).unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
