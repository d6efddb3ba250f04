//! `UTSR` tensor persistence.
//!
//! Layout: the magic bytes `UTSR`, a `u8` version (1), a `u8` rank, `rank`
//! little-endian `u64` dimensions, then the row-major payload as
//! little-endian `f32`. Blocks may be concatenated back to back.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UTSR";
pub const VERSION: u8 = 1;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

pub fn encode_into(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return format_err(format!("rank {} does not fit in a u8", t.rank()));
    }
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(t.len() * 4);
    for &v in t.data() {
        let f = v as f32;
        if !f.is_finite() {
            return format_err(format!("value {v:e} is not representable as a finite f32"));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(())
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_into(t, &mut out)?;
    Ok(out)
}

/// Decodes one block from the front of `bytes`, returning the tensor and the
/// number of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, usize)> {
    if bytes.len() < 6 {
        return format_err("truncated UTSR header");
    }
    if &bytes[..4] != MAGIC {
        return format_err("missing UTSR magic");
    }
    if bytes[4] != VERSION {
        return format_err(format!("unsupported UTSR version {}", bytes[4]));
    }
    let rank = bytes[5] as usize;
    if rank == 0 {
        return format_err("UTSR rank must be at least 1");
    }
    let mut pos = 6;
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let Some(raw) = bytes.get(pos..pos + 8) else {
            return format_err("truncated UTSR dimensions");
        };
        let d = u64::from_le_bytes(raw.try_into().expect("8 bytes"));
        if d == 0 {
            return format_err("UTSR dimension of size zero");
        }
        let d = usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::Format("UTSR element count overflows".into()))?;
        shape.push(d);
        pos += 8;
    }
    let payload = count
        .checked_mul(4)
        .filter(|&n| n <= bytes.len() - pos)
        .ok_or_else(|| Error::Format(format!("UTSR payload of {count} values truncated")))?;
    let mut data = Vec::with_capacity(count);
    for raw in bytes[pos..pos + payload].chunks_exact(4) {
        let v = f32::from_le_bytes(raw.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return format_err("non-finite value in UTSR payload");
        }
        data.push(v as f64);
    }
    Ok((Tensor::new(shape, data)?, pos + payload))
}

/// Decodes a sequence of concatenated blocks spanning all of `bytes`.
pub fn decode_all(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        let (t, used) = decode(rest)?;
        out.push(t);
        rest = &rest[used..];
    }
    Ok(out)
}

pub fn write_file(path: &Path, tensors: &[&Tensor]) -> Result<()> {
    let mut buf = Vec::new();
    for t in tensors {
        encode_into(t, &mut buf)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<Tensor>> {
    decode_all(&fs::read(path)?)
}

/// Rounds every value to the nearest `f32`, the precision UTSR stores.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::from_vec(&[2, 1], vec![1.0, -2.5]);
        let bytes = encode(&t).unwrap();
        let mut expect = b"UTSR".to_vec();
        expect.extend([1u8, 2u8]);
        expect.extend(2u64.to_le_bytes());
        expect.extend(1u64.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_malformed_blocks() {
        let good = encode(&Tensor::ones(&[3])).unwrap();
        assert!(decode(&good[..good.len() - 1]).is_err());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic).is_err());
        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(decode(&bad_version).is_err());
        let mut huge = b"UTSR\x01\x02".to_vec();
        huge.extend(u64::MAX.to_le_bytes());
        huge.extend(u64::MAX.to_le_bytes());
        assert!(decode(&huge).is_err());
        let mut nan = good.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode(&nan).is_err());
    }

    #[test]
    fn concatenated_blocks() {
        let a = Tensor::from_vec(&[2], vec![0.5, 1.5]);
        let b = Tensor::from_vec(&[1, 1, 1], vec![-4.0]);
        let mut buf = encode(&a).unwrap();
        encode_into(&b, &mut buf).unwrap();
        assert_eq!(decode_all(&buf).unwrap(), vec![a, b]);
    }
}
