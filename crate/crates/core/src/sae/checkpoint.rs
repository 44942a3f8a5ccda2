//! `.tidesae` checkpoints and `.tideadaln` modulator tables.
//!
//! Checkpoint layout (little-endian, f32 payloads):
//!
//! ```text
//! magic "TIDESAE1" | version u16 | flags u32 (bit 0 = temporal)
//! f u32 | n u32 | k_final u32
//! W_enc (n x f, row-major) | b_enc (n) | W_dec (f x n, row-major)
//! [temporal] embed_dim u32 | hidden_dim u32 | steps u32 | W1 | b1 | W2 | b2
//! SHA-256 of every preceding byte (32 bytes)
//! ```
//!
//! The adaLN table written by the exporter is the modulator block on its own:
//!
//! ```text
//! magic "TIDEADLN" | version u16 | flags u32 (= 0)
//! f u32 | embed_dim u32 | hidden_dim u32 | steps u32
//! W1 (hidden x embed) | b1 (hidden) | W2 (2f x hidden) | b2 (2f)
//! SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::modulator::TemporalModulator;
use super::params::SaeParams;
use crate::activation_gen::HookSpec;
use crate::error::{Result, TideError};

pub const CKPT_MAGIC: &[u8; 8] = b"TIDESAE1";
pub const ADALN_MAGIC: &[u8; 8] = b"TIDEADLN";
const VERSION: u16 = 1;
const FLAG_TEMPORAL: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SaeCheckpoint {
    pub params: SaeParams<f32>,
    pub modulator: Option<TemporalModulator<f32>>,
    pub k_final: u32,
}

/// Training metadata written next to a checkpoint as `<ckpt>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub hook: Option<HookSpec>,
    pub step: u64,
    pub k_final: usize,
    pub temporal: bool,
    pub baseline_l1: Option<f64>,
    pub dataset: Option<String>,
    pub tool_version: String,
}

impl CheckpointMeta {
    pub fn path_for(ckpt: &Path) -> PathBuf {
        let mut s = ckpt.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    pub fn load_for(ckpt: &Path) -> Result<Option<Self>> {
        let p = Self::path_for(ckpt);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(|e| TideError::io_at(&p, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    pub fn save_for(&self, ckpt: &Path) -> Result<()> {
        let p = Self::path_for(ckpt);
        fs::write(&p, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| TideError::io_at(&p, e))
    }
}

pub(crate) struct Writer(pub(crate) Vec<u8>);

impl Writer {
    pub(crate) fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    pub(crate) fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn finish(mut self) -> Vec<u8> {
        let d = Sha256::digest(&self.0);
        self.0.extend_from_slice(&d);
        self.0
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Verify the trailing digest and the magic, returning a reader over the body.
    pub(crate) fn open(bytes: &'a [u8], magic: &[u8; 8]) -> Result<Self> {
        if bytes.len() < 8 + 32 {
            return Err(TideError::Length {
                expected: 40,
                got: bytes.len(),
            });
        }
        if &bytes[..8] != magic {
            return Err(TideError::Format(format!("bad magic {:02x?}", &bytes[..8])));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(TideError::Format("trailing digest mismatch".into()));
        }
        Ok(Self { buf: body, pos: 8 })
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.buf.len() {
            return Err(TideError::Length {
                expected: self.pos + len,
                got: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }
    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub(crate) fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let v: Vec<f32> = self
            .take(count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(TideError::data("non-finite weight in file"));
        }
        Ok(v)
    }
    pub(crate) fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(TideError::Format(format!(
                "{} trailing bytes before digest",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn write_modulator_body(w: &mut Writer, m: &TemporalModulator<f32>) {
    w.f32s(&m.w1);
    w.f32s(&m.b1);
    w.f32s(&m.w2);
    w.f32s(&m.b2);
}

fn read_modulator_body(
    r: &mut Reader<'_>,
    f: usize,
    embed_dim: usize,
    hidden_dim: usize,
    steps: usize,
) -> Result<TemporalModulator<f32>> {
    if embed_dim == 0 || embed_dim % 2 != 0 || hidden_dim == 0 || steps == 0 {
        return Err(TideError::Format(format!(
            "modulator dims invalid: embed={embed_dim}, hidden={hidden_dim}, T={steps}"
        )));
    }
    Ok(TemporalModulator {
        f,
        embed_dim,
        hidden_dim,
        steps,
        w1: r.f32s(hidden_dim * embed_dim)?,
        b1: r.f32s(hidden_dim)?,
        w2: r.f32s(2 * f * hidden_dim)?,
        b2: r.f32s(2 * f)?,
        enabled: true,
    })
}

impl SaeCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CKPT_MAGIC);
        w.u16(VERSION);
        w.u32(if self.modulator.is_some() {
            FLAG_TEMPORAL
        } else {
            0
        });
        w.u32(p.f as u32);
        w.u32(p.n as u32);
        w.u32(self.k_final);
        w.f32s(&p.w_enc);
        w.f32s(&p.b_enc);
        w.f32s(&p.w_dec_row_major());
        if let Some(m) = &self.modulator {
            w.u32(m.embed_dim as u32);
            w.u32(m.hidden_dim as u32);
            w.u32(m.steps as u32);
            write_modulator_body(&mut w, m);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CKPT_MAGIC)?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(TideError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let flags = r.u32()?;
        if flags & !FLAG_TEMPORAL != 0 {
            return Err(TideError::Format(format!(
                "unknown checkpoint flags {flags:#x}"
            )));
        }
        let f = r.u32()? as usize;
        let n = r.u32()? as usize;
        let k_final = r.u32()?;
        if f == 0 || n == 0 {
            return Err(TideError::Format("checkpoint has zero dimension".into()));
        }
        let mut params = SaeParams::<f32>::zeros(f, n);
        params.w_enc = r.f32s(n * f)?;
        params.b_enc = r.f32s(n)?;
        let dec = r.f32s(f * n)?;
        params.set_w_dec_row_major(&dec);
        let modulator = if flags & FLAG_TEMPORAL != 0 {
            let e = r.u32()? as usize;
            let h = r.u32()? as usize;
            let s = r.u32()? as usize;
            Some(read_modulator_body(&mut r, f, e, h, s)?)
        } else {
            None
        };
        r.done()?;
        Ok(Self {
            params,
            modulator,
            k_final,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tidesae.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| TideError::io_at(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| TideError::io_at(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TideError::io_at(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_adaln_table(m: &TemporalModulator<f32>, path: &Path) -> Result<()> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(ADALN_MAGIC);
    w.u16(VERSION);
    w.u32(0);
    w.u32(m.f as u32);
    w.u32(m.embed_dim as u32);
    w.u32(m.hidden_dim as u32);
    w.u32(m.steps as u32);
    write_modulator_body(&mut w, m);
    fs::write(path, w.finish()).map_err(|e| TideError::io_at(path, e))
}

/// Load an exporter-provided modulation table as a modulator initialization.
pub fn load_adaln_table(path: &Path) -> Result<TemporalModulator<f32>> {
    let bytes = fs::read(path).map_err(|e| TideError::io_at(path, e))?;
    let mut r = Reader::open(&bytes, ADALN_MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(TideError::Format(format!(
            "unsupported adaLN table version {version}"
        )));
    }
    let flags = r.u32()?;
    if flags != 0 {
        return Err(TideError::Format(format!(
            "unknown adaLN table flags {flags:#x}"
        )));
    }
    let f = r.u32()? as usize;
    let e = r.u32()? as usize;
    let h = r.u32()? as usize;
    let s = r.u32()? as usize;
    if f == 0 {
        return Err(TideError::Format("adaLN table has f = 0".into()));
    }
    let m = read_modulator_body(&mut r, f, e, h, s)?;
    r.done()?;
    Ok(m)
}
