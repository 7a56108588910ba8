//! Byte-level encoding of context-state blobs and standalone state files.
//!
//! All integers and floats are little-endian. A blob is:
//!
//! ```text
//! u32 id_len, id bytes (UTF-8)
//! u32 num_layers, u32 state_dim, u32 embed_dim, u32 conv_width
//! u64 token_count
//! per layer: f64 x[state_dim], f64 decay[state_dim], f64 log_decay[state_dim],
//!            f64 conv_tail[embed_dim * conv_width] (row-major)
//! u64 num_tokens, u32 tokens[num_tokens]
//! ```
//!
//! See `docs/format.md` for the enclosing store layout.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::compose::ComposedState;
use crate::error::{Error, Result};
use crate::ssm::{ContextState, LayerContext, TokenSequence};
use crate::tensor::Matrix;

pub const STORE_MAGIC: &[u8; 4] = b"SSDB";
pub const STATE_FILE_MAGIC: &[u8; 4] = b"SSST";
pub const FORMAT_VERSION: u32 = 1;
/// magic + version + manifest offset + manifest length
pub const HEADER_LEN: usize = 4 + 4 + 8 + 8;

pub fn encode_blob(state: &ContextState, tokens: &TokenSequence) -> Vec<u8> {
    let mut out = Vec::new();
    let id = state.context_id.as_bytes();
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    let (m, d, w) = match state.layers.first() {
        Some(l) => (l.x.len(), l.conv_tail.rows(), l.conv_tail.cols()),
        None => (0, 0, 0),
    };
    for v in [state.layers.len(), m, d, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(state.token_count as u64).to_le_bytes());
    for l in &state.layers {
        for v in l
            .x
            .iter()
            .chain(&l.decay)
            .chain(&l.log_decay)
            .chain(l.conv_tail.as_slice())
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(tokens.len() as u64).to_le_bytes());
    for &t in tokens.as_slice() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("blob truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflow".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_blob(buf: &[u8]) -> Result<(ContextState, TokenSequence)> {
    let mut cur = Cursor { buf, pos: 0 };
    let id_len = cur.u32()? as usize;
    let context_id = std::str::from_utf8(cur.take(id_len)?)
        .map_err(|_| Error::Format("context id is not UTF-8".into()))?
        .to_owned();
    let layers = cur.u32()? as usize;
    let m = cur.u32()? as usize;
    let d = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let token_count = cur.len()?;
    let mut out_layers = Vec::with_capacity(layers.min(1024));
    for _ in 0..layers {
        let x = cur.f64s(m)?;
        let decay = cur.f64s(m)?;
        let log_decay = cur.f64s(m)?;
        let tail = cur.f64s(d * w)?;
        out_layers.push(LayerContext {
            x,
            decay,
            log_decay,
            conv_tail: Matrix::from_vec(d, w, tail),
        });
    }
    let num_tokens = cur.len()?;
    let raw = cur.take(num_tokens.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
    let tokens = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if cur.pos != buf.len() {
        return Err(Error::Format("trailing bytes after blob".into()));
    }
    Ok((
        ContextState {
            context_id,
            token_count,
            layers: out_layers,
        },
        TokenSequence::new(tokens),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFileHeader {
    pub format_version: u32,
    pub method: String,
    pub provenance: Vec<String>,
    pub fingerprint: String,
}

/// Writes a composed state as `"SSST"`, u32 version, u64 header length, JSON
/// header, then one blob with no tokens.
pub fn write_state_file(
    mut w: impl Write,
    state: &ComposedState,
    fingerprint: &str,
) -> Result<()> {
    let header = StateFileHeader {
        format_version: FORMAT_VERSION,
        method: state.method.name().to_owned(),
        provenance: state.provenance.clone(),
        fingerprint: fingerprint.to_owned(),
    };
    let json = serde_json::to_vec(&header)?;
    let blob = encode_blob(
        &state.to_context_state(format!("composed-{}", state.method)),
        &TokenSequence::default(),
    );
    w.write_all(STATE_FILE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&blob)?;
    Ok(())
}

pub fn read_state_file(mut r: impl Read) -> Result<(StateFileHeader, ContextState)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 16 || &buf[..4] != STATE_FILE_MAGIC {
        return Err(Error::Format("not a state file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported state file version {version}")));
    }
    let json_len = usize::try_from(u64::from_le_bytes(buf[8..16].try_into().unwrap()))
        .map_err(|_| Error::Format("header length overflow".into()))?;
    let json_end = 16usize
        .checked_add(json_len)
        .filter(|&e| e <= buf.len())
        .ok_or_else(|| Error::Format("state file truncated".into()))?;
    let header: StateFileHeader = serde_json::from_slice(&buf[16..json_end])?;
    let (state, _) = decode_blob(&buf[json_end..])?;
    Ok((header, state))
}
