//! Named-tensor container: `"FRE1"` followed by records of
//! `[name_len u32][name utf-8][rank u32][dims u32 * rank][f32 payload]`,
//! all little-endian, payload row-major.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"FRE1";

pub fn encode(records: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let payload: usize = records.iter().map(|(n, t)| 8 + n.len() + 4 * t.rank() + 4 * t.numel()).sum();
    let mut out = Vec::with_capacity(4 + payload);
    out.extend_from_slice(MAGIC);
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file: needed {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 4 {
        return Err(Error::Checkpoint("truncated file: missing magic".into()));
    }
    if &bytes[..4] != MAGIC {
        if &bytes[..3] == b"FRE" {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {:?} (expected FRE1)",
                bytes[3] as char
            )));
        }
        return Err(Error::Checkpoint("not a checkpoint: bad magic".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("record name is not utf-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("record {name:?} is too large")))?;
        let raw = r.take(numel.checked_mul(4).unwrap_or(usize::MAX), "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

/// Stores UTF-8 text as a rank-1 record with one byte per element.
pub fn text_record(text: &str) -> Tensor<f32> {
    let data: Vec<f32> = text.bytes().map(f32::from).collect();
    Tensor::new([data.len()], data).expect("rank-1")
}

pub fn record_text(t: &Tensor<f32>) -> Result<String> {
    let bytes = t
        .data()
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::Checkpoint("text record holds a non-byte value".into()))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|_| Error::Checkpoint("text record is not utf-8".into()))
}
