//! Binary message format for parameter exchange.
//!
//! ```text
//! header     magic "FFM1" | u32 version | u8 kind | u32 round | u32 payload_len
//! payload    u32 count
//!            count × (u16 name_len | name | u8 dtype | u8 ndim | ndim × u32 extent)
//!            tensor values, little-endian, in directory order
//!            NCC_STATS only: u32 n | n × u64 count
//! ```
//!
//! `payload_len` counts every byte after the 17-byte header. Decoded tensors
//! are marked trainable.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{with_dtype, DType, Elem, Tensor};

pub const MAGIC: &[u8; 4] = b"FFM1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    GlobalModel = 1,
    ClientUpdate = 2,
    NccStats = 3,
}

impl MessageKind {
    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(MessageKind::GlobalModel),
            2 => Ok(MessageKind::ClientUpdate),
            3 => Ok(MessageKind::NccStats),
            other => Err(Error::Wire(format!("unknown message kind {other}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct WireMessage {
    pub kind: MessageKind,
    pub round: u32,
    pub params: ParamSet,
    /// Per-class sample counts; present only for `NccStats`.
    pub counts: Vec<u64>,
}

impl PartialEq for WireMessage {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.round == other.round && self.counts == other.counts && self.params.bit_eq(&other.params)
    }
}

fn dir_entry_len(name: &str, t: &Tensor) -> usize {
    2 + name.len() + 1 + 1 + 4 * t.shape().len()
}

/// Exact encoded size without encoding.
pub fn encoded_len(params: &ParamSet, counts: Option<usize>) -> usize {
    let dir: usize = params.iter().map(|(n, p)| dir_entry_len(n, &p.tensor)).sum();
    let data: usize = params.iter().map(|(_, p)| p.tensor.size_bytes()).sum();
    HEADER_LEN + 4 + dir + data + counts.map_or(0, |n| 4 + 8 * n)
}

impl WireMessage {
    pub fn new(kind: MessageKind, round: u32, params: ParamSet) -> Self {
        Self {
            kind,
            round,
            params,
            counts: Vec::new(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        encoded_len(&self.params, (self.kind == MessageKind::NccStats).then_some(self.counts.len()))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let total = self.encoded_len();
        let payload_len =
            u32::try_from(total - HEADER_LEN).map_err(|_| Error::Wire("payload exceeds u32 length".into()))?;
        let mut out = Vec::with_capacity(total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&payload_len.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            let nlen = u16::try_from(name.len()).map_err(|_| Error::Wire(format!("name too long: {name}")))?;
            let ndim = u8::try_from(p.tensor.shape().len()).map_err(|_| Error::Wire(format!("rank too high: {name}")))?;
            out.extend_from_slice(&nlen.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.tensor.dtype().code());
            out.push(ndim);
            for &d in p.tensor.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Wire(format!("extent too large: {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
        for (_, p) in self.params.iter() {
            with_dtype!(p.tensor.dtype(), T => {
                for &v in p.tensor.as_slice::<T>()? {
                    v.to_le(&mut out);
                }
            });
        }
        if self.kind == MessageKind::NccStats {
            out.extend_from_slice(&(self.counts.len() as u32).to_le_bytes());
            for c in &self.counts {
                out.extend_from_slice(&c.to_le_bytes());
            }
        } else if !self.counts.is_empty() {
            return Err(Error::Wire("counts are only carried by NCC_STATS messages".into()));
        }
        debug_assert_eq!(out.len(), total);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<WireMessage> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Wire(format!("bad magic {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Wire(format!("unsupported version {version}")));
        }
        let kind = MessageKind::from_code(r.u8("kind")?)?;
        let round = r.u32("round")?;
        let declared = r.u32("payload length")? as usize;
        let actual = bytes.len() - HEADER_LEN;
        if declared != actual {
            return Err(Error::Wire(format!(
                "declared payload length {declared} but {actual} bytes follow the header"
            )));
        }
        let count = r.u32("tensor count")? as usize;
        let mut dir = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let nlen = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
                .map_err(|_| Error::Wire(format!("tensor {i}: name is not UTF-8")))?
                .to_string();
            let code = r.u8("dtype")?;
            let dtype = DType::from_code(code).ok_or_else(|| Error::Wire(format!("tensor {name}: unknown dtype {code}")))?;
            let ndim = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("extent")? as usize);
            }
            dir.push((name, dtype, shape));
        }
        let mut params = ParamSet::new();
        for (name, dtype, shape) in dir {
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(dtype.size_bytes()).ok_or_else(|| Error::Wire("tensor size overflow".into()))?,
                "tensor data",
            )?;
            let t = with_dtype!(dtype, T => {
                let v: Vec<T> = raw.chunks_exact(std::mem::size_of::<T>()).map(T::from_le).collect();
                Tensor::from_vec(&shape, v)?
            });
            params
                .insert(name.clone(), t, true)
                .map_err(|_| Error::Wire(format!("duplicate tensor name {name}")))?;
        }
        let mut counts = Vec::new();
        if kind == MessageKind::NccStats {
            let n = r.u32("count trailer")? as usize;
            for _ in 0..n {
                counts.push(r.u64("class count")?);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Wire(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(WireMessage {
            kind,
            round,
            params,
            counts,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Wire(format!(
                "truncated at byte {} reading {what} ({n} bytes needed, {} left)",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Encodes a parameter set as a `GLOBAL_MODEL` message for round 0.
pub fn serialize_params(params: &ParamSet) -> Result<Vec<u8>> {
    WireMessage::new(MessageKind::GlobalModel, 0, params.clone()).encode()
}

pub fn deserialize_params(bytes: &[u8]) -> Result<ParamSet> {
    Ok(WireMessage::decode(bytes)?.params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::from_vec(&[2, 2], vec![1.0f32, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap(), true).unwrap();
        p.insert("b", Tensor::from_vec(&[3], vec![0.1f64, 0.2, -0.0]).unwrap(), true).unwrap();
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = WireMessage::new(MessageKind::ClientUpdate, 7, sample());
        let bytes = m.encode().unwrap();
        assert_eq!(bytes.len(), m.encoded_len());
        assert_eq!(WireMessage::decode(&bytes).unwrap(), m);
    }

    #[test]
    fn empty_set_is_header_plus_count() {
        let bytes = serialize_params(&ParamSet::new()).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 4);
        assert!(deserialize_params(&bytes).unwrap().is_empty());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = serialize_params(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(WireMessage::decode(&bad), Err(Error::Wire(_))));
        assert!(WireMessage::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(WireMessage::decode(&extra).is_err());
        assert!(WireMessage::decode(&bytes[..10]).is_err());
        let mut kind = bytes.clone();
        kind[8] = 9;
        assert!(WireMessage::decode(&kind).is_err());
    }

    #[test]
    fn ncc_trailer_round_trips() {
        let mut m = WireMessage::new(MessageKind::NccStats, 0, sample());
        m.counts = vec![5, 11];
        let bytes = m.encode().unwrap();
        assert_eq!(WireMessage::decode(&bytes).unwrap(), m);
    }
}
