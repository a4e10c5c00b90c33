//! Binary file containers shared across pipeline stages.
//!
//! All containers use an 8-byte ASCII magic, 32-bit little-endian header
//! words, and 32-bit little-endian payloads:
//!
//! * `BEFBANK1` — filterbank cache: frame count, mel count, then row-major
//!   f32 cells.
//! * `BETOKS01` — token file: codebook size K, length T, then T u32 labels.
//! * `BETGTS01` — teacher targets: T, target_dim, kind byte (0 = SSL last
//!   layer, 1 = fine-tuned logits) plus 3 padding bytes, then row-major
//!   f32 values.

use crate::error::{Error, Result};
use crate::features::{FbankMatrix, N_MELS};
use std::io::Write;
use std::path::Path;

pub const FBANK_MAGIC: &[u8; 8] = b"BEFBANK1";
pub const TOKENS_MAGIC: &[u8; 8] = b"BETOKS01";
pub const TARGETS_MAGIC: &[u8; 8] = b"BETGTS01";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Reader { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format(self.path, self.pos as u64, format!("truncated: need {n} bytes")))?;
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let pos = self.pos as u64;
        let got = self.take(8)?;
        if got != expected {
            return Err(Error::format(
                self.path,
                pos,
                format!(
                    "bad magic {:?}, want {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

// ── fbank cache ──────────────────────────────────────────────────────

pub fn write_fbank(path: &Path, f: &FbankMatrix) -> Result<()> {
    let mut out = Vec::with_capacity(16 + 4 * f.frames.len());
    out.extend_from_slice(FBANK_MAGIC);
    out.extend_from_slice(&(f.n_frames as u32).to_le_bytes());
    out.extend_from_slice(&(N_MELS as u32).to_le_bytes());
    for &x in &f.frames {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn read_fbank(path: &Path) -> Result<FbankMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes, path);
    r.magic(FBANK_MAGIC)?;
    let n_frames = r.u32()? as usize;
    let n_mels = r.u32()? as usize;
    if n_mels != N_MELS {
        return Err(Error::format(
            path,
            12,
            format!("mel count {n_mels}, want {N_MELS}"),
        ));
    }
    let cells = r.f32s(n_frames * n_mels)?;
    r.done()?;
    Ok(FbankMatrix::new(
        n_frames,
        cells.into_iter().map(|x| x as f64).collect(),
    ))
}

// ── token files ──────────────────────────────────────────────────────

pub fn write_tokens(path: &Path, k: usize, labels: &[u32]) -> Result<()> {
    let mut out = Vec::with_capacity(16 + 4 * labels.len());
    out.extend_from_slice(TOKENS_MAGIC);
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for &l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    write_atomic(path, &out)
}

/// Returns (K, labels).
pub fn read_tokens(path: &Path) -> Result<(usize, Vec<u32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes, path);
    r.magic(TOKENS_MAGIC)?;
    let k = r.u32()? as usize;
    let t = r.u32()? as usize;
    let labels = r.u32s(t)?;
    r.done()?;
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= k {
            return Err(Error::format(
                path,
                (16 + 4 * i) as u64,
                format!("label {l} out of range for K={k}"),
            ));
        }
    }
    Ok((k, labels))
}

// ── teacher targets ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    SslLastLayer,
    FinetunedLogits,
}

impl TargetKind {
    pub fn byte(self) -> u8 {
        match self {
            TargetKind::SslLastLayer => 0,
            TargetKind::FinetunedLogits => 1,
        }
    }

    fn from_byte(b: u8, path: &Path, offset: u64) -> Result<Self> {
        match b {
            0 => Ok(TargetKind::SslLastLayer),
            1 => Ok(TargetKind::FinetunedLogits),
            _ => Err(Error::format(path, offset, format!("unknown target kind {b}"))),
        }
    }
}

pub fn write_targets(path: &Path, kind: TargetKind, t: usize, dim: usize, rows: &[f64]) -> Result<()> {
    debug_assert_eq!(rows.len(), t * dim);
    let mut out = Vec::with_capacity(20 + 4 * rows.len());
    out.extend_from_slice(TARGETS_MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.push(kind.byte());
    out.extend_from_slice(&[0u8; 3]);
    for &x in rows {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    write_atomic(path, &out)
}

/// Returns (kind, T, target_dim, row-major values).
pub fn read_targets(path: &Path) -> Result<(TargetKind, usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes, path);
    r.magic(TARGETS_MAGIC)?;
    let t = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let kind_pos = r.pos as u64;
    let head = r.take(4)?;
    let kind = TargetKind::from_byte(head[0], path, kind_pos)?;
    let vals = r.f32s(t * dim)?;
    r.done()?;
    Ok((kind, t, dim, vals.into_iter().map(|x| x as f64).collect()))
}
