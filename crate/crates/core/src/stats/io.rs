//! Binary stats container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic        8 bytes  "CAFASTAT"
//! version      u8
//! d            u32
//! C            u32
//! mode         u8       0 = class-wise, 1 = tied
//! eps_scale    f64
//! C × { class_id u32, n_samples u64, mu d×f64, sigma d×d f64 }
//! global       { mu d×f64, sigma d×d f64 }
//! crc32        u32      over every preceding byte
//! ```
//!
//! Precision factors are not stored; they are recomputed on load, which is
//! deterministic and therefore bit-identical.

use std::fs;
use std::path::Path;

use super::{CovarianceMode, SourceStats};
use crate::error::{Error, Result};
use crate::numcore::{Matrix, Vector};

pub const STATS_FORMAT_VERSION: u8 = 1;
const MAGIC: &[u8; 8] = b"CAFASTAT";

pub fn encode_stats(stats: &SourceStats) -> Vec<u8> {
    let d = stats.feature_dim;
    let mut out = Vec::with_capacity(32 + stats.n_classes() * (12 + 8 * (d + d * d)));
    out.extend_from_slice(MAGIC);
    out.push(STATS_FORMAT_VERSION);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(stats.n_classes() as u32).to_le_bytes());
    out.push(match stats.covariance_mode {
        CovarianceMode::ClassWise => 0,
        CovarianceMode::Tied => 1,
    });
    out.extend_from_slice(&stats.eps_scale.to_le_bytes());
    for g in &stats.classes {
        out.extend_from_slice(&(g.class_id as u32).to_le_bytes());
        out.extend_from_slice(&(g.n_samples as u64).to_le_bytes());
        put_f64s(&mut out, &g.mu);
        put_f64s(&mut out, g.sigma.as_slice());
    }
    put_f64s(&mut out, &stats.global_mu);
    put_f64s(&mut out, stats.global_sigma.as_slice());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn decode_stats(bytes: &[u8]) -> Result<SourceStats> {
    if bytes.len() < MAGIC.len() + 1 {
        return Err(Error::CorruptChecksum);
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a stats file (bad magic)".into()));
    }
    let version = bytes[MAGIC.len()];
    if version != STATS_FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch {
            expected: STATS_FORMAT_VERSION,
            found: version,
        });
    }
    if bytes.len() < MAGIC.len() + 1 + 4 {
        return Err(Error::CorruptChecksum);
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(Error::CorruptChecksum);
    }

    let mut r = Reader {
        buf: payload,
        pos: MAGIC.len() + 1,
    };
    let d = r.u32()? as usize;
    let n_classes = r.u32()? as usize;
    let mode = match r.u8()? {
        0 => CovarianceMode::ClassWise,
        1 => CovarianceMode::Tied,
        other => return Err(Error::Format(format!("unknown covariance mode {other}"))),
    };
    let eps_scale = r.f64()?;
    let mut moments = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let id = r.u32()? as usize;
        if id != c {
            return Err(Error::Format(format!("class record {c} carries id {id}")));
        }
        let n = r.u64()? as usize;
        let mu = Vector::new(r.f64s(d)?)?;
        let sigma = Matrix::from_vec(d, d, r.f64s(d * d)?)?;
        moments.push((mu, sigma, n));
    }
    let global_mu = Vector::new(r.f64s(d)?)?;
    let global_sigma = Matrix::from_vec(d, d, r.f64s(d * d)?)?;
    if r.pos != payload.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after global record",
            payload.len() - r.pos
        )));
    }
    SourceStats::assemble(moments, global_mu, global_sigma, mode, eps_scale)
}

pub fn save_stats(stats: &SourceStats, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_stats(stats)).map_err(|e| Error::io(path, e))
}

pub fn load_stats(path: impl AsRef<Path>) -> Result<SourceStats> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_stats(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::CorruptChecksum)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::CorruptChecksum)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}
