//! CAKE-TRACE v1: the on-disk form of per-layer, per-head window attention.
//!
//! Layout: a 4-byte big-endian header length, that many bytes of UTF-8 JSON
//! header, then `L * H * S_w * S` little-endian `f32` values, layer-major,
//! then head-major, each block row-major.

mod synth;
mod validate;

pub use synth::{synth_generate, Pattern, SyntheticSpec};
pub use validate::{validate_trace, Finding, FindingKind, ValidationMode};

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Real;
use crate::stats::WindowAttention;

pub const MAGIC: &str = "CAKE-TRACE";
pub const VERSION: u32 = 1;
pub const PAYLOAD_DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub magic: String,
    pub version: u32,
    pub num_layers: usize,
    pub num_heads: usize,
    pub seq_len: usize,
    pub window: usize,
    pub payload_dtype: String,
    pub source: String,
}

impl TraceHeader {
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        seq_len: usize,
        window: usize,
        source: impl Into<String>,
    ) -> Result<Self> {
        let header = Self {
            magic: MAGIC.into(),
            version: VERSION,
            num_layers,
            num_heads,
            seq_len,
            window,
            payload_dtype: PAYLOAD_DTYPE.into(),
            source: source.into(),
        };
        header.check()?;
        Ok(header)
    }

    fn check(&self) -> Result<()> {
        if self.magic != MAGIC {
            return Err(Error::BadMagic(self.magic.clone()));
        }
        if self.version != VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        if self.payload_dtype != PAYLOAD_DTYPE {
            return Err(Error::Header(format!(
                "unsupported payload dtype {:?}",
                self.payload_dtype
            )));
        }
        if self.num_layers == 0 || self.num_heads == 0 || self.seq_len == 0 || self.window == 0 {
            return Err(Error::Header(
                "layer, head, sequence and window counts must be positive".into(),
            ));
        }
        if self.window > self.seq_len {
            return Err(Error::Header(format!(
                "window {} exceeds sequence length {}",
                self.window, self.seq_len
            )));
        }
        Ok(())
    }

    pub fn block_len(&self) -> usize {
        self.window * self.seq_len
    }

    fn payload_bytes(&self) -> Result<usize> {
        self.num_layers
            .checked_mul(self.num_heads)
            .and_then(|n| n.checked_mul(self.block_len()))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Header("payload size overflows".into()))
    }
}

/// Header plus `L * H` blocks of `S_w x S` attention rows, stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub header: TraceHeader,
    blocks: Vec<Matrix<f32>>,
}

impl AttentionTrace {
    /// `blocks` in layer-major, head-major order.
    pub fn new(header: TraceHeader, blocks: Vec<Matrix<f32>>) -> Result<Self> {
        header.check()?;
        let expected = header.num_layers * header.num_heads;
        if blocks.len() != expected {
            return Err(Error::Shape(format!(
                "{} blocks for {} layers x {} heads",
                blocks.len(),
                header.num_layers,
                header.num_heads
            )));
        }
        if let Some(b) = blocks
            .iter()
            .find(|b| b.rows() != header.window || b.cols() != header.seq_len)
        {
            return Err(Error::Shape(format!(
                "block is {}x{}, header says {}x{}",
                b.rows(),
                b.cols(),
                header.window,
                header.seq_len
            )));
        }
        Ok(Self { header, blocks })
    }

    pub fn num_layers(&self) -> usize {
        self.header.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.header.num_heads
    }

    pub fn seq_len(&self) -> usize {
        self.header.seq_len
    }

    pub fn window(&self) -> usize {
        self.header.window
    }

    pub fn block(&self, layer: usize, head: usize) -> &Matrix<f32> {
        &self.blocks[layer * self.header.num_heads + head]
    }

    pub fn blocks(&self) -> &[Matrix<f32>] {
        &self.blocks
    }

    /// One head's window converted to the computation scalar.
    pub fn window_attention<T: Real>(
        &self,
        layer: usize,
        head: usize,
    ) -> Result<WindowAttention<T>> {
        let rows = self.block(layer, head).map(|x| T::lit(f64::from(x)));
        WindowAttention::new(layer, head, rows)
    }

    pub fn layer_windows<T: Real>(&self, layer: usize) -> Result<Vec<WindowAttention<T>>> {
        (0..self.num_heads())
            .map(|h| self.window_attention(layer, h))
            .collect()
    }
}

pub fn write_trace<W: Write>(trace: &AttentionTrace, mut out: W) -> Result<()> {
    let header = serde_json::to_vec(&trace.header)?;
    let len = u32::try_from(header.len()).map_err(|_| Error::Header("header too large".into()))?;
    out.write_all(&len.to_be_bytes())?;
    out.write_all(&header)?;
    let mut payload = Vec::with_capacity(trace.header.payload_bytes()?);
    for block in &trace.blocks {
        for &x in block.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

pub fn read_trace<R: Read>(mut input: R) -> Result<AttentionTrace> {
    let mut len = [0u8; 4];
    input
        .read_exact(&mut len)
        .map_err(|_| Error::Header("missing header length prefix".into()))?;
    let len = u32::from_be_bytes(len) as usize;
    let mut header = vec![0u8; len];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::Header(format!("header shorter than its {len}-byte prefix")))?;
    let header: TraceHeader =
        serde_json::from_slice(&header).map_err(|e| Error::Header(e.to_string()))?;
    header.check()?;

    let expected = header.payload_bytes()?;
    let mut payload = Vec::with_capacity(expected);
    input.read_to_end(&mut payload)?;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::TrailingBytes(payload.len() - expected));
    }

    let block_bytes = header.block_len() * 4;
    let blocks = payload
        .chunks_exact(block_bytes)
        .map(|chunk| {
            let values = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect::<Vec<_>>();
            for (i, &x) in values.iter().enumerate() {
                if x.is_nan() || x.is_infinite() {
                    return Err(Error::NonFinite("trace payload"));
                }
                if x < 0.0 {
                    return Err(Error::NegativeEntry {
                        row: i / header.seq_len,
                        col: i % header.seq_len,
                        value: f64::from(x),
                    });
                }
            }
            Matrix::from_vec(header.window, header.seq_len, values)
        })
        .collect::<Result<Vec<_>>>()?;
    AttentionTrace::new(header, blocks)
}

pub fn to_bytes(trace: &AttentionTrace) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf)?;
    Ok(buf)
}

pub fn from_bytes(bytes: &[u8]) -> Result<AttentionTrace> {
    read_trace(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> AttentionTrace {
        let header = TraceHeader::new(1, 1, 2, 1, "test").unwrap();
        AttentionTrace::new(
            header,
            vec![Matrix::from_rows(&[vec![0.5f32, 0.5]]).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn minimal_round_trip_is_bit_identical() {
        let t = minimal();
        let bytes = to_bytes(&t).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn header_prefix_is_big_endian() {
        let bytes = to_bytes(&minimal()).unwrap();
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[4..4 + len]).unwrap();
        assert_eq!(header["magic"], "CAKE-TRACE");
        assert_eq!(header["payload_dtype"], "f32le");
        assert_eq!(bytes.len(), 4 + len + 8);
        assert_eq!(&bytes[4 + len..4 + len + 4], &0.5f32.to_le_bytes());
    }

    #[test]
    fn truncated_payload_is_its_own_error() {
        let bytes = to_bytes(&minimal()).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(
            matches!(
                err,
                Error::TruncatedPayload {
                    expected: 8,
                    found: 4
                }
            ),
            "{err}"
        );
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(Error::TrailingBytes(1))));
    }

    fn with_header(edit: impl Fn(&mut serde_json::Value)) -> Vec<u8> {
        let bytes = to_bytes(&minimal()).unwrap();
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[4..4 + len]).unwrap();
        edit(&mut header);
        let header = serde_json::to_vec(&header).unwrap();
        let mut out = (header.len() as u32).to_be_bytes().to_vec();
        out.extend(header);
        out.extend(&bytes[4 + len..]);
        out
    }

    #[test]
    fn header_errors() {
        let bad = with_header(|h| h["magic"] = "NOPE".into());
        assert!(matches!(from_bytes(&bad), Err(Error::BadMagic(_))));
        let bad = with_header(|h| h["version"] = 2.into());
        assert!(matches!(
            from_bytes(&bad),
            Err(Error::UnsupportedVersion(2))
        ));
        let bad = with_header(|h| h["window"] = 3.into());
        assert!(matches!(from_bytes(&bad), Err(Error::Header(_))));
        assert!(from_bytes(&[0, 0]).is_err());
    }

    #[test]
    fn rejects_nan_and_negative_payload() {
        let mut bytes = to_bytes(&minimal()).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(from_bytes(&bytes), Err(Error::NonFinite(_))));
        bytes[n - 4..].copy_from_slice(&(-0.5f32).to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::NegativeEntry { col: 1, .. })
        ));
    }

    #[test]
    fn header_validation() {
        assert!(TraceHeader::new(1, 1, 4, 5, "").is_err());
        assert!(TraceHeader::new(0, 1, 4, 2, "").is_err());
        let header = TraceHeader::new(1, 2, 2, 1, "").unwrap();
        let one = Matrix::from_rows(&[vec![0.5f32, 0.5]]).unwrap();
        assert!(AttentionTrace::new(header, vec![one]).is_err());
    }
}
