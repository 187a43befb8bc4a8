//! Content-addressed cache of similarity tensors.
//!
//! Files live under `<cache_dir>/sim/` and `<cache_dir>/querysim/`, named by
//! the hex SHA-256 of everything the tensor depends on: the embedding file
//! bytes, the query and document tokens and the input dimensions (plus the
//! context window for `querysim`). Each file is
//!
//! ```text
//! magic   8 bytes  "CPACSIM1" or "CPACQSM1"
//! rank    u32
//! dims    u32 x rank
//! values  f64 little-endian
//! ```
//!
//! Unreadable entries are recomputed and overwritten.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use copacrr::corpus::{Document, Query};
use copacrr::embedding::{build_querysim, build_sim_matrix, idf_vector, EmbeddingTable, InputShape, SimInput};
use copacrr::numerics::Tensor;
use copacrr::{Error, Result};
use sha2::{Digest, Sha256};

const SIM_MAGIC: &[u8; 8] = b"CPACSIM1";
const QUERYSIM_MAGIC: &[u8; 8] = b"CPACQSM1";

static TMP_COUNTER: AtomicUsize = AtomicUsize::new(0);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub sim_hits: usize,
    pub sim_misses: usize,
    pub querysim_hits: usize,
    pub querysim_misses: usize,
    /// Inputs whose every part came from the cache.
    pub input_hits: usize,
    pub inputs: usize,
}

#[derive(Debug)]
pub struct SimCache {
    dir: PathBuf,
    embeddings_hash: String,
    sim_hits: AtomicUsize,
    sim_misses: AtomicUsize,
    querysim_hits: AtomicUsize,
    querysim_misses: AtomicUsize,
    input_hits: AtomicUsize,
    inputs: AtomicUsize,
}

/// Hex SHA-256 of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_tokens(h: &mut Sha256, tokens: &[String]) {
    h.update((tokens.len() as u64).to_le_bytes());
    for t in tokens {
        h.update((t.len() as u64).to_le_bytes());
        h.update(t.as_bytes());
    }
}

fn encode(magic: &[u8; 8], t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + t.len() * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode(magic: &[u8; 8], bytes: &[u8], expected: &[usize]) -> Option<Tensor> {
    let rest = bytes.strip_prefix(magic.as_slice())?;
    let (rank, mut rest) = rest.split_first_chunk::<4>()?;
    let rank = u32::from_le_bytes(*rank) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let (d, r) = rest.split_first_chunk::<4>()?;
        shape.push(u32::from_le_bytes(*d) as usize);
        rest = r;
    }
    if shape != expected || rest.len() != shape.iter().product::<usize>() * 8 {
        return None;
    }
    let data = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::checked(shape, data).ok()
}

impl SimCache {
    pub fn new(dir: &Path, embeddings_hash: impl Into<String>) -> Result<Self> {
        for sub in ["sim", "querysim"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            embeddings_hash: embeddings_hash.into(),
            sim_hits: AtomicUsize::new(0),
            sim_misses: AtomicUsize::new(0),
            querysim_hits: AtomicUsize::new(0),
            querysim_misses: AtomicUsize::new(0),
            input_hits: AtomicUsize::new(0),
            inputs: AtomicUsize::new(0),
        })
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            sim_hits: self.sim_hits.load(Ordering::Relaxed),
            sim_misses: self.sim_misses.load(Ordering::Relaxed),
            querysim_hits: self.querysim_hits.load(Ordering::Relaxed),
            querysim_misses: self.querysim_misses.load(Ordering::Relaxed),
            input_hits: self.input_hits.load(Ordering::Relaxed),
            inputs: self.inputs.load(Ordering::Relaxed),
        }
    }

    fn key(&self, kind: &str, query: &Query, doc: &Document, dims: &[usize]) -> String {
        let mut h = Sha256::new();
        h.update(kind.as_bytes());
        h.update(self.embeddings_hash.as_bytes());
        for d in dims {
            h.update((*d as u64).to_le_bytes());
        }
        hash_tokens(&mut h, &query.tokens);
        hash_tokens(&mut h, &doc.tokens);
        hex::encode(h.finalize())
    }

    /// Returns the cached tensor or computes, stores and returns it, plus
    /// whether it was a hit.
    fn fetch(
        &self,
        sub: &str,
        magic: &[u8; 8],
        key: &str,
        shape: &[usize],
        compute: impl FnOnce() -> Result<Tensor>,
    ) -> Result<(Tensor, bool)> {
        let path = self.dir.join(sub).join(format!("{key}.bin"));
        if let Ok(bytes) = fs::read(&path) {
            if let Some(t) = decode(magic, &bytes, shape) {
                return Ok((t, true));
            }
            log::warn!("{}: unreadable cache entry, recomputing", path.display());
        }
        let t = compute()?;
        let tmp = path.with_extension(format!(
            "{}.{}.tmp",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::write(&tmp, encode(magic, &t)).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok((t, false))
    }

    /// Builds the model input for one pair through the cache. `oov` queries
    /// get an all-zero context signal that is not cached.
    pub fn input(
        &self,
        query: &Query,
        doc: &Document,
        table: &EmbeddingTable,
        shape: InputShape,
        oov: bool,
    ) -> Result<SimInput> {
        let (lq, ld) = (shape.query_len, shape.doc_len);
        let sim_key = self.key("sim", query, doc, &[lq, ld]);
        let (sim, sim_hit) = self.fetch("sim", SIM_MAGIC, &sim_key, &[lq, ld], || {
            build_sim_matrix(query, doc, table, lq, ld)
        })?;
        let counter = if sim_hit { &self.sim_hits } else { &self.sim_misses };
        counter.fetch_add(1, Ordering::Relaxed);

        let (querysim, qs_hit) = if oov {
            (Tensor::zeros(&[ld]), true)
        } else {
            let key = self.key("querysim", query, doc, &[ld, shape.context_window]);
            let (t, hit) = self.fetch("querysim", QUERYSIM_MAGIC, &key, &[ld], || {
                build_querysim(query, doc, table, shape.context_window, ld)
            })?;
            let counter = if hit { &self.querysim_hits } else { &self.querysim_misses };
            counter.fetch_add(1, Ordering::Relaxed);
            (t, hit)
        };
        self.inputs.fetch_add(1, Ordering::Relaxed);
        if sim_hit && qs_hit {
            self.input_hits.fetch_add(1, Ordering::Relaxed);
        }
        SimInput::from_parts(
            sim,
            querysim,
            idf_vector(query, lq)?,
            query.len(),
            doc.tokens.len().min(ld),
        )
    }
}
