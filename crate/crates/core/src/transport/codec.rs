//! Tensor payload format: `u32 rank`, `rank` x `u32 dim`, then binary32
//! values row-major. All integers little-endian.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub fn header_len(rank: usize) -> usize {
    4 + 4 * rank
}

/// Encoded size of a tensor with this shape.
pub fn tensor_bytes(shape: &[usize]) -> usize {
    header_len(shape.len()) + 4 * shape.iter().product::<usize>()
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(tensor_bytes(t.shape()));
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Decode(format!("truncated at byte {at}")))
}

/// Header length of an encoded tensor, without decoding the values.
pub fn peek_header_len(bytes: &[u8]) -> Option<usize> {
    let rank = read_u32(bytes, 0).ok()? as usize;
    let h = header_len(rank);
    (h <= bytes.len()).then_some(h)
}

/// Decodes a tensor that must occupy `bytes` exactly.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let rank = read_u32(bytes, 0)? as usize;
    if header_len(rank) > bytes.len() {
        return Err(Error::Decode(format!("rank {rank} header exceeds {} bytes", bytes.len())));
    }
    let shape: Vec<usize> = (0..rank).map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize)).collect::<Result<_>>()?;
    let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let body = &bytes[header_len(rank)..];
    match count {
        Some(n) if n.checked_mul(4) == Some(body.len()) => {}
        _ => {
            return Err(Error::Decode(format!("shape {shape:?} does not match {} value bytes", body.len())));
        }
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(shape, data)
}

/// Class labels travel as a rank-1 tensor of their indices.
pub fn encode_labels(labels: &[usize]) -> Vec<u8> {
    encode_tensor(&Tensor::from_vec(labels.iter().map(|&y| y as f32).collect()))
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let t = decode_tensor(bytes)?;
    if t.rank() != 1 {
        return Err(Error::Decode("labels must be a rank-1 tensor".into()));
    }
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                Ok(v as usize)
            } else {
                Err(Error::Decode(format!("invalid label value {v}")))
            }
        })
        .collect()
}
