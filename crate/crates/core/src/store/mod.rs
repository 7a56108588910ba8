//! The database of states.
//!
//! A store is a single file: a fixed header, a region of context-state blobs
//! and a JSON manifest footer that indexes them together with their retrieval
//! embeddings. Raw tokens are kept next to each state so that baselines which
//! re-read the context (concatenation, permuted concatenation) can run from
//! the same store.
//!
//! Every entry was produced by one specific model; the manifest records its
//! fingerprint and inserts from any other model are refused.

pub mod embed;
pub mod format;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ssm::{encode_context, ContextState, ToyModelConfig, ToyModelParams, TokenSequence};

pub use embed::{Embedder, Embedding, HashingEmbedder, DEFAULT_EMBEDDING_DIM};
pub use format::{
    decode_blob, encode_blob, read_state_file, write_state_file, StateFileHeader, FORMAT_VERSION,
    HEADER_LEN, STATE_FILE_MAGIC, STORE_MAGIC,
};

/// Environment variable naming the default store path for the CLI.
pub const STORE_PATH_ENV: &str = "SSDB_PATH";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub context_id: String,
    /// Absolute byte offset of the blob in the store file.
    pub offset: u64,
    pub length: u64,
    pub token_count: usize,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format_version: u32,
    pub fingerprint: String,
    pub model_config: ToyModelConfig,
    pub params_checksum: String,
    pub embedder: String,
    pub entries: Vec<ManifestEntry>,
}

/// A stored context: its state, id and the tokens it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntry {
    pub context_id: String,
    pub state: ContextState,
    pub tokens: TokenSequence,
}

impl StoreEntry {
    pub fn states(entries: &[StoreEntry]) -> Vec<ContextState> {
        entries.iter().map(|e| e.state.clone()).collect()
    }
}

/// Content-derived id: first 16 hex digits of SHA-256 over the tokens.
pub fn content_id(tokens: &TokenSequence) -> String {
    let mut h = Sha256::new();
    for &t in tokens.as_slice() {
        h.update(t.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

pub struct StateStore {
    manifest: StoreManifest,
    /// Blob region; `manifest.entries[i].offset` is relative to the file, so
    /// blob bytes live at `offset - HEADER_LEN` in here.
    blobs: Vec<u8>,
    index: BTreeMap<String, usize>,
    embedder: Box<dyn Embedder>,
}

impl std::fmt::Debug for StateStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StateStore")
            .field("fingerprint", &self.manifest.fingerprint)
            .field("entries", &self.manifest.entries.len())
            .field("embedder", &self.manifest.embedder)
            .finish()
    }
}

impl StateStore {
    /// Empty store bound to `params`, using the default hashing retriever.
    pub fn new(params: &ToyModelParams) -> Self {
        Self::with_embedder(params, Box::new(HashingEmbedder::default()))
    }

    pub fn with_embedder(params: &ToyModelParams, embedder: Box<dyn Embedder>) -> Self {
        Self {
            manifest: StoreManifest {
                format_version: FORMAT_VERSION,
                fingerprint: params.fingerprint(),
                model_config: params.config.clone(),
                params_checksum: params.checksum(),
                embedder: embedder.name(),
                entries: Vec::new(),
            },
            blobs: Vec::new(),
            index: BTreeMap::new(),
            embedder,
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::open_with_embedder(path, Box::new(HashingEmbedder::default()))
    }

    pub fn open_with_embedder(path: impl AsRef<Path>, embedder: Box<dyn Embedder>) -> Result<Self> {
        let bytes = fs::read(path.as_ref())?;
        Self::from_bytes(&bytes, embedder)
    }

    pub fn from_bytes(bytes: &[u8], embedder: Box<dyn Embedder>) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != STORE_MAGIC {
            return Err(Error::Format("not a state store (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported store version {version}")));
        }
        let moff = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mlen = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        if moff < HEADER_LEN || moff.checked_add(mlen) != Some(bytes.len()) {
            return Err(Error::Format("manifest offset/length out of range".into()));
        }
        let manifest: StoreManifest = serde_json::from_slice(&bytes[moff..])?;
        if manifest.embedder != embedder.name() {
            return Err(Error::ConfigMismatch(format!(
                "store was indexed with '{}', not '{}'",
                manifest.embedder,
                embedder.name()
            )));
        }
        let blobs = bytes[HEADER_LEN..moff].to_vec();
        let mut index = BTreeMap::new();
        let mut spans: Vec<(u64, u64)> = Vec::with_capacity(manifest.entries.len());
        for (i, e) in manifest.entries.iter().enumerate() {
            let start = e.offset;
            let end = e.offset.checked_add(e.length);
            if start < HEADER_LEN as u64 || end.is_none_or(|end| end > moff as u64) {
                return Err(Error::Format(format!("entry '{}' lies outside the blob region", e.context_id)));
            }
            spans.push((start, start + e.length));
            if index.insert(e.context_id.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate entry '{}'", e.context_id)));
            }
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[0].1 > w[1].0) {
            return Err(Error::Format("overlapping blob spans in manifest".into()));
        }
        Ok(Self {
            manifest,
            blobs,
            index,
            embedder,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let moff = (HEADER_LEN + self.blobs.len()) as u64;
        let mut out = Vec::with_capacity(HEADER_LEN + self.blobs.len() + manifest.len());
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&moff.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.blobs);
        out.extend_from_slice(&manifest);
        Ok(out)
    }

    /// Writes the store atomically (temp file + rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ssdb.tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn fingerprint(&self) -> &str {
        &self.manifest.fingerprint
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.entries.iter().map(|e| e.context_id.as_str())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn check_params(&self, params: &ToyModelParams) -> Result<()> {
        let fp = params.fingerprint();
        if fp != self.manifest.fingerprint {
            return Err(Error::ConfigMismatch(format!(
                "model fingerprint {} does not match store fingerprint {}",
                &fp[..12],
                &self.manifest.fingerprint[..12.min(self.manifest.fingerprint.len())]
            )));
        }
        Ok(())
    }

    /// Encodes `tokens` with the store's model and appends it. Inserting the
    /// same tokens twice returns the existing id.
    pub fn insert(&mut self, tokens: &TokenSequence, params: &ToyModelParams) -> Result<String> {
        self.check_params(params)?;
        let id = content_id(tokens);
        if self.index.contains_key(&id) {
            return Ok(id);
        }
        let state = encode_context(tokens, params, id.clone())?;
        self.insert_state(state, tokens.clone())
    }

    /// Appends a precomputed state. The caller vouches that it was produced
    /// by this store's model.
    pub fn insert_state(&mut self, state: ContextState, tokens: TokenSequence) -> Result<String> {
        if !state.matches(&self.manifest.model_config) {
            return Err(Error::ConfigMismatch(format!(
                "state '{}' does not have the store's model shape",
                state.context_id
            )));
        }
        let id = state.context_id.clone();
        if self.index.contains_key(&id) {
            return Ok(id);
        }
        let embedding = self.embedder.embed(&tokens);
        let blob = encode_blob(&state, &tokens);
        let offset = (HEADER_LEN + self.blobs.len()) as u64;
        self.blobs.extend_from_slice(&blob);
        self.index.insert(id.clone(), self.manifest.entries.len());
        self.manifest.entries.push(ManifestEntry {
            context_id: id.clone(),
            offset,
            length: blob.len() as u64,
            token_count: state.token_count,
            embedding,
        });
        Ok(id)
    }

    fn blob(&self, id: &str) -> Result<&[u8]> {
        let &i = self
            .index
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("context id '{id}'")))?;
        let e = &self.manifest.entries[i];
        let start = e.offset as usize - HEADER_LEN;
        Ok(&self.blobs[start..start + e.length as usize])
    }

    pub fn entry(&self, id: &str) -> Result<StoreEntry> {
        let (state, tokens) = decode_blob(self.blob(id)?)?;
        Ok(StoreEntry {
            context_id: id.to_owned(),
            state,
            tokens,
        })
    }

    pub fn load_entries<S: AsRef<str>>(&self, ids: &[S]) -> Result<Vec<StoreEntry>> {
        ids.iter().map(|id| self.entry(id.as_ref())).collect()
    }

    /// States for `ids`, in the requested order.
    pub fn load_states<S: AsRef<str>>(&self, ids: &[S]) -> Result<Vec<ContextState>> {
        ids.iter()
            .map(|id| decode_blob(self.blob(id.as_ref())?).map(|(s, _)| s))
            .collect()
    }

    pub fn embed_text(&self, tokens: &TokenSequence) -> Embedding {
        self.embedder.embed(tokens)
    }

    /// Top-`k` entries by cosine similarity, best first; equal scores are
    /// ordered by ascending id.
    pub fn query(&self, query_tokens: &TokenSequence, k: usize) -> Result<Vec<(String, f64)>> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let q = self.embedder.embed(query_tokens);
        let mut scored: Vec<(String, f64)> = self
            .manifest
            .entries
            .iter()
            .map(|e| (e.context_id.clone(), q.cosine(&e.embedding)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }
}

/// Advisory single-writer lock: a `<store>.lock` file created exclusively and
/// removed on drop.
#[derive(Debug)]
pub struct WriteLock {
    path: PathBuf,
}

impl WriteLock {
    pub fn acquire(store_path: impl AsRef<Path>) -> Result<Self> {
        let mut path = store_path.as_ref().as_os_str().to_owned();
        path.push(".lock");
        let path = PathBuf::from(path);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(path.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
