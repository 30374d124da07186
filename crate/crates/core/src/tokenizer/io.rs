//! Token sequence files.
//!
//! ```text
//! magic     8 bytes "BEATTOKN"
//! version   u32 LE
//! S, L, K, n_valid   u32 LE each
//! id_len    u32 LE, followed by the UTF-8 record id
//! S × { lead_index u16, temporal_index u16, valid u8, L × f32 }
//! K × u8 labels (0 or 1)
//! ```

use std::path::Path;

use super::{HeartbeatToken, TokenSequence};
use crate::binio::Cursor;
use crate::error::{Error, Result};
use crate::FORMAT_VERSION;

const MAGIC: &[u8; 8] = b"BEATTOKN";
pub const TOKEN_EXT: &str = "tok";

pub fn encode_tokens(seq: &TokenSequence) -> Result<Vec<u8>> {
    let l = seq.token_len();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [seq.len(), l, seq.labels.len(), seq.n_valid(), seq.record_id.len()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(seq.record_id.as_bytes());
    for t in &seq.tokens {
        if t.waveform.len() != l {
            return Err(Error::invalid("token", "waveforms differ in length"));
        }
        let lead = u16::try_from(t.lead_index).map_err(|_| Error::invalid("lead_index", "exceeds u16"))?;
        let time = u16::try_from(t.temporal_index).map_err(|_| Error::invalid("temporal_index", "exceeds u16"))?;
        buf.extend_from_slice(&lead.to_le_bytes());
        buf.extend_from_slice(&time.to_le_bytes());
        buf.push(u8::from(t.valid));
        for &v in &t.waveform {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf.extend(seq.labels.iter().map(|&b| u8::from(b)));
    Ok(buf)
}

pub fn decode_tokens(bytes: &[u8], path: &Path) -> Result<TokenSequence> {
    let mut c = Cursor::new(bytes, path, "token");
    c.magic(MAGIC)?;
    c.version()?;
    let s = c.u32()? as usize;
    let l = c.u32()? as usize;
    let k = c.u32()? as usize;
    let n_valid = c.u32()? as usize;
    let id_len = c.u32()? as usize;
    let record_id = c.string(id_len)?;
    let mut tokens = Vec::with_capacity(s.min(bytes.len()));
    for _ in 0..s {
        let lead_index = c.u16()? as usize;
        let temporal_index = c.u16()? as usize;
        let valid = match c.u8()? {
            0 => false,
            1 => true,
            _ => return Err(c.bad("valid flag is not 0 or 1")),
        };
        let waveform = c.f32s(l)?.into_iter().map(f64::from).collect();
        tokens.push(HeartbeatToken {
            waveform,
            lead_index,
            temporal_index,
            valid,
        });
    }
    let labels = c.take(k)?.iter().map(|&b| b == 1).collect();
    c.finish()?;
    let seq = TokenSequence {
        tokens,
        labels,
        record_id,
    };
    if seq.n_valid() != n_valid {
        return Err(c.bad("valid count disagrees with header"));
    }
    Ok(seq)
}

pub fn write_tokens(path: &Path, seq: &TokenSequence) -> Result<()> {
    std::fs::write(path, encode_tokens(seq)?)?;
    Ok(())
}

pub fn read_tokens(path: &Path) -> Result<TokenSequence> {
    decode_tokens(&std::fs::read(path)?, path)
}
