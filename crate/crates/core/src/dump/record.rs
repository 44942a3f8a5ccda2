//! `.tideact` activation records.
//!
//! Layout (all little-endian):
//!
//! | offset | size | field                               |
//! |-------:|-----:|-------------------------------------|
//! | 0      | 8    | magic `TIDEACT1`                    |
//! | 8      | 2    | version (u16, = 1)                  |
//! | 10     | 2    | layer_index (u16)                   |
//! | 12     | 4    | timestep (u32)                      |
//! | 16     | 4    | token_count (u32)                   |
//! | 20     | 4    | dim (u32)                           |
//! | 24     | 8    | sample_id (u64)                     |
//! | 32     | 4    | flags (u32, bit 0 = labels present) |
//! | 36     | 12   | reserved, zero                      |
//! | 48     | 4·T·D| data, f32 row-major                 |
//! | ...    | 2·T  | labels (u16), only if flag bit 0    |
//!
//! A shard is a plain concatenation of records, so it parses without a
//! manifest.

use std::io::{Read, Write};

use crate::error::{Result, TideError};

pub const MAGIC: &[u8; 8] = b"TIDEACT1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 48;
pub const FLAG_LABELS: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpHeader {
    pub layer_index: u16,
    pub timestep: u32,
    pub token_count: u32,
    pub dim: u32,
    pub sample_id: u64,
    pub flags: u32,
}

impl DumpHeader {
    pub fn has_labels(&self) -> bool {
        self.flags & FLAG_LABELS != 0
    }

    pub fn payload_len(&self) -> usize {
        let t = self.token_count as usize;
        let mut len = t * self.dim as usize * 4;
        if self.has_labels() {
            len += t * 2;
        }
        len
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..8].copy_from_slice(MAGIC);
        b[8..10].copy_from_slice(&VERSION.to_le_bytes());
        b[10..12].copy_from_slice(&self.layer_index.to_le_bytes());
        b[12..16].copy_from_slice(&self.timestep.to_le_bytes());
        b[16..20].copy_from_slice(&self.token_count.to_le_bytes());
        b[20..24].copy_from_slice(&self.dim.to_le_bytes());
        b[24..32].copy_from_slice(&self.sample_id.to_le_bytes());
        b[32..36].copy_from_slice(&self.flags.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8; HEADER_LEN]) -> Result<Self> {
        if &b[0..8] != MAGIC {
            return Err(TideError::Format(format!("bad magic {:02x?}", &b[0..8])));
        }
        let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let version = u16_at(8);
        if version != VERSION {
            return Err(TideError::Format(format!("unsupported version {version}")));
        }
        let flags = u32_at(32);
        if flags & !FLAG_LABELS != 0 {
            return Err(TideError::Format(format!("unknown flag bits {flags:#x}")));
        }
        if b[36..48].iter().any(|&x| x != 0) {
            return Err(TideError::Format(
                "reserved header bytes are not zero".into(),
            ));
        }
        Ok(Self {
            layer_index: u16_at(10),
            timestep: u32_at(12),
            token_count: u32_at(16),
            dim: u32_at(20),
            sample_id: u64::from_le_bytes(b[24..32].try_into().unwrap()),
            flags,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub header: DumpHeader,
    /// `token_count x dim`, row-major.
    pub data: Vec<f32>,
    pub labels: Option<Vec<u16>>,
}

impl ActivationRecord {
    pub fn new(
        layer_index: u16,
        timestep: u32,
        token_count: usize,
        dim: usize,
        sample_id: u64,
        data: Vec<f32>,
        labels: Option<Vec<u16>>,
    ) -> Result<Self> {
        let rec = Self {
            header: DumpHeader {
                layer_index,
                timestep,
                token_count: token_count as u32,
                dim: dim as u32,
                sample_id,
                flags: if labels.is_some() { FLAG_LABELS } else { 0 },
            },
            data,
            labels,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn token_count(&self) -> usize {
        self.header.token_count as usize
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    pub fn token(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn validate(&self) -> Result<()> {
        let (t, d) = (self.token_count(), self.dim());
        if self.data.len() != t * d {
            return Err(TideError::Dimension {
                what: "record payload (tokens x dim)",
                expected: t * d,
                got: self.data.len(),
            });
        }
        match (&self.labels, self.header.has_labels()) {
            (Some(l), true) if l.len() != t => {
                return Err(TideError::Dimension {
                    what: "record labels",
                    expected: t,
                    got: l.len(),
                })
            }
            (Some(_), false) | (None, true) => {
                return Err(TideError::Format(
                    "label flag disagrees with label payload".into(),
                ))
            }
            _ => {}
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(TideError::data(format!(
                "non-finite value at token {} (dim {})",
                pos / d.max(1),
                pos % d.max(1)
            )));
        }
        Ok(())
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.header.payload_len()
    }
}

/// Write one record; returns the number of bytes written.
pub fn write_record<W: Write>(sink: &mut W, rec: &ActivationRecord) -> Result<usize> {
    rec.validate()?;
    let mut buf = Vec::with_capacity(rec.encoded_len());
    buf.extend_from_slice(&rec.header.encode());
    for v in &rec.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &rec.labels {
        for l in labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    Ok(buf.len())
}

/// Read one record. Returns `Ok(None)` on a clean end of stream.
pub fn read_record<R: Read>(source: &mut R) -> Result<Option<ActivationRecord>> {
    let mut hb = [0u8; HEADER_LEN];
    let got = read_full(source, &mut hb)?;
    if got == 0 {
        return Ok(None);
    }
    if got < HEADER_LEN {
        return Err(TideError::Length {
            expected: HEADER_LEN,
            got,
        });
    }
    let header = DumpHeader::decode(&hb)?;
    let mut payload = vec![0u8; header.payload_len()];
    let got = read_full(source, &mut payload)?;
    if got < payload.len() {
        return Err(TideError::Length {
            expected: payload.len(),
            got,
        });
    }
    let t = header.token_count as usize;
    let n = t * header.dim as usize;
    let data: Vec<f32> = payload[..n * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = header.has_labels().then(|| {
        payload[n * 4..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect()
    });
    let rec = ActivationRecord {
        header,
        data,
        labels,
    };
    rec.validate()?;
    Ok(Some(rec))
}

fn read_full<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(k) => filled += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

/// Parse a whole shard.
pub fn read_all<R: Read>(source: &mut R) -> Result<Vec<ActivationRecord>> {
    let mut out = Vec::new();
    while let Some(rec) = read_record(source)? {
        out.push(rec);
    }
    Ok(out)
}
