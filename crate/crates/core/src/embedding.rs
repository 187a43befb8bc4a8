//! Pre-trained word vectors and the two similarity inputs built from them:
//! the query-by-document term similarity matrix and the per-position
//! query/context similarity vector.
//!
//! Binary cache layout (all integers little-endian):
//!
//! | field   | type            |
//! |---------|-----------------|
//! | magic   | `b"CPACEMB\0"`  |
//! | version | u32 (= 1)       |
//! | dim     | u32             |
//! | count   | u64             |
//! | entries | `count` × (u32 byte length, UTF-8 term, `dim` × f32) |
//!
//! Entries are written in byte order of the term, so equal tables always
//! serialize to identical bytes.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::{Document, Query};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const CACHE_MAGIC: &[u8; 8] = b"CPACEMB\0";
const CACHE_VERSION: u32 = 1;

/// Term vectors of a fixed dimension. Never modified by training.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingTable {
    dim: usize,
    index: HashMap<String, usize>,
    vectors: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Adds or replaces a term's vector.
    pub fn insert(&mut self, term: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let term = term.into();
        if vector.len() != self.dim {
            return Err(Error::Data(format!(
                "vector for `{term}` has {} components, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("vector for `{term}` is not finite")));
        }
        match self.index.get(&term) {
            Some(&row) => self.vectors[row * self.dim..(row + 1) * self.dim].copy_from_slice(&vector),
            None => {
                self.index.insert(term, self.index.len());
                self.vectors.extend(vector);
            }
        }
        Ok(())
    }

    /// The term's vector, or `None` when it is out of vocabulary.
    pub fn get(&self, term: &str) -> Option<&[f64]> {
        let row = *self.index.get(term)?;
        Some(&self.vectors[row * self.dim..(row + 1) * self.dim])
    }

    pub fn contains(&self, term: &str) -> bool {
        self.index.contains_key(term)
    }

    fn sorted_terms(&self) -> Vec<&String> {
        let mut terms: Vec<&String> = self.index.keys().collect();
        terms.sort();
        terms
    }

    /// Parses the word2vec text format: a `count dim` header, then one
    /// `term v1 ... vdim` line per term.
    pub fn parse_word2vec_text(content: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = content.lines().enumerate();
        let (count, dim) = loop {
            let Some((n, line)) = lines.next() else {
                return Err(parse_err(1, "missing `count dim` header".into()));
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            match fields[..] {
                [c, d] => match (c.parse::<usize>(), d.parse::<usize>()) {
                    (Ok(c), Ok(d)) if d > 0 => break (c, d),
                    _ => return Err(parse_err(n + 1, format!("bad header `{line}`"))),
                },
                _ => return Err(parse_err(n + 1, format!("bad header `{line}`"))),
            }
        };
        let mut table = Self::new(dim);
        for (n, line) in lines {
            let mut fields = line.split_whitespace();
            let Some(term) = fields.next() else { continue };
            let vector = fields
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| parse_err(n + 1, format!("bad component: {e}")))?;
            if vector.len() != dim {
                return Err(parse_err(
                    n + 1,
                    format!("`{term}` has {} components, header says {dim}", vector.len()),
                ));
            }
            table.insert(term, vector).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("{}:{}: {m}", path.display(), n + 1)),
                other => parse_err(n + 1, other.to_string()),
            })?;
        }
        if table.len() != count {
            log::warn!(
                "{}: header announces {count} vectors, found {}",
                path.display(),
                table.len()
            );
        }
        Ok(table)
    }

    /// word2vec text format, terms sorted; floats print in shortest
    /// round-trip form so parsing restores them exactly.
    pub fn to_word2vec_text(&self) -> String {
        let mut out = format!("{} {}\n", self.len(), self.dim);
        for term in self.sorted_terms() {
            out.push_str(term);
            for v in self.get(term).expect("indexed term") {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.vectors.len() * 4);
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for term in self.sorted_terms() {
            out.extend_from_slice(&(term.len() as u32).to_le_bytes());
            out.extend_from_slice(term.as_bytes());
            for v in self.get(term).expect("indexed term") {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_cache_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CACHE_MAGIC {
            return Err(Error::Data("not an embedding cache (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::Data(format!("unsupported embedding cache version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let mut table = Self::new(dim);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let term = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Data("embedding cache term is not UTF-8".into()))?
                .to_string();
            let mut vector = Vec::with_capacity(dim);
            for _ in 0..dim {
                vector.push(f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as f64);
            }
            table.insert(term, vector)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after embedding cache".into()));
        }
        Ok(table)
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_cache_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads either the binary cache (recognized by its magic) or word2vec text.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(CACHE_MAGIC) {
            return Self::from_cache_bytes(&bytes);
        }
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Data(format!("{}: not UTF-8 text", path.display())))?;
        Self::parse_word2vec_text(&text, path)
    }
}

impl PartialEq for EmbeddingTable {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.len() == other.len()
            && self.index.keys().all(|t| self.get(t) == other.get(t))
    }
}

pub(crate) struct ByteReader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Data("truncated binary data".into()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Cosine similarity clamped to `[-1, 1]`; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// 1 for identical strings, the embedding cosine when both terms are in
/// vocabulary, 0 otherwise.
pub fn term_sim(a: &str, b: &str, table: &EmbeddingTable) -> f64 {
    if a == b {
        return 1.0;
    }
    match (table.get(a), table.get(b)) {
        (Some(va), Some(vb)) => cosine(va, vb),
        _ => 0.0,
    }
}

/// `[query_len, doc_len]` matrix of [`term_sim`] values over the query terms
/// and the first `doc_len` document terms, zero elsewhere.
pub fn build_sim_matrix(
    query: &Query,
    doc: &Document,
    table: &EmbeddingTable,
    query_len: usize,
    doc_len: usize,
) -> Result<Tensor> {
    if query.len() > query_len {
        return Err(Error::Config(format!(
            "query {} has {} terms but query_len is {query_len}",
            query.query_id,
            query.len()
        )));
    }
    if doc_len == 0 {
        return Err(Error::Config("doc_len must be at least 1".into()));
    }
    let d_len = doc.tokens.len().min(doc_len);
    let mut sim = vec![0.0; query_len * doc_len];
    // Cache per distinct document term; long documents repeat terms heavily.
    let mut memo: HashMap<(&str, &str), f64> = HashMap::new();
    for (i, q) in query.tokens.iter().enumerate() {
        for (j, d) in doc.tokens[..d_len].iter().enumerate() {
            sim[i * doc_len + j] = *memo
                .entry((q.as_str(), d.as_str()))
                .or_insert_with(|| term_sim(q, d, table));
        }
    }
    Tensor::new(vec![query_len, doc_len], sim)
}

/// Mean vector of the in-vocabulary query terms.
pub fn query_vec(query: &Query, table: &EmbeddingTable) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; table.dim()];
    let mut count = 0usize;
    for term in &query.tokens {
        if let Some(v) = table.get(term) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::OovQuery {
            query_id: query.query_id.clone(),
        });
    }
    for s in &mut sum {
        *s /= count as f64;
    }
    Ok(sum)
}

/// Mean vector of the in-vocabulary tokens at positions
/// `max(0, i - window) ..= min(len - 1, i + window)`; zero when none are.
pub fn context_vec(doc: &Document, i: usize, window: usize, table: &EmbeddingTable) -> Vec<f64> {
    let mut sum = vec![0.0; table.dim()];
    if i >= doc.tokens.len() {
        return sum;
    }
    let lo = i.saturating_sub(window);
    let hi = (i + window).min(doc.tokens.len() - 1);
    let mut count = 0usize;
    for term in &doc.tokens[lo..=hi] {
        if let Some(v) = table.get(term) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
            count += 1;
        }
    }
    if count > 0 {
        for s in &mut sum {
            *s /= count as f64;
        }
    }
    sum
}

/// Cosine between each position's context vector and the query vector for
/// the first `doc_len` positions, zero-padded to `doc_len`.
pub fn build_querysim(
    query: &Query,
    doc: &Document,
    table: &EmbeddingTable,
    window: usize,
    doc_len: usize,
) -> Result<Tensor> {
    let qvec = query_vec(query, table)?;
    let dim = table.dim();
    let n = doc.tokens.len();
    let d_len = n.min(doc_len);
    let mut out = vec![0.0; doc_len];
    if d_len == 0 {
        return Tensor::new(vec![doc_len], out);
    }
    let vecs: Vec<Option<&[f64]>> = doc.tokens.iter().map(|t| table.get(t)).collect();
    // Running window sum; the mean and the sum point the same way, so the
    // cosine never needs the division.
    let mut sum = vec![0.0; dim];
    let mut count = 0usize;
    let add = |sum: &mut Vec<f64>, v: &[f64], sign: f64| {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += sign * x;
        }
    };
    let mut hi_added = 0usize; // tokens [lo_removed, hi_added) are in the window
    let mut lo_removed = 0usize;
    for (j, slot) in out.iter_mut().enumerate().take(d_len) {
        let hi = (j + window + 1).min(n);
        while hi_added < hi {
            if let Some(v) = vecs[hi_added] {
                add(&mut sum, v, 1.0);
                count += 1;
            }
            hi_added += 1;
        }
        let lo = j.saturating_sub(window);
        while lo_removed < lo {
            if let Some(v) = vecs[lo_removed] {
                add(&mut sum, v, -1.0);
                count -= 1;
            }
            lo_removed += 1;
        }
        if count == 0 {
            // Drop accumulated rounding residue once the window is empty.
            sum.iter_mut().for_each(|s| *s = 0.0);
            continue;
        }
        *slot = cosine(&sum, &qvec);
    }
    Tensor::new(vec![doc_len], out)
}

/// Normalized query IDFs zero-padded to `query_len`.
pub fn idf_vector(query: &Query, query_len: usize) -> Result<Tensor> {
    if query.len() > query_len {
        return Err(Error::Config(format!(
            "query {} has {} terms but query_len is {query_len}",
            query.query_id,
            query.len()
        )));
    }
    let mut idf = query.idf_norm.clone();
    idf.resize(query_len, 0.0);
    Tensor::new(vec![query_len], idf)
}

/// Fixed input dimensions shared by input construction and the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputShape {
    pub query_len: usize,
    pub doc_len: usize,
    pub context_window: usize,
}

/// Everything the model reads for one (query, document) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SimInput {
    /// `[query_len, doc_len]` term similarities.
    pub sim: Tensor,
    /// `[doc_len]` context-to-query similarities.
    pub querysim: Tensor,
    /// `[query_len]` normalized query IDFs.
    pub idf: Tensor,
    pub q_len: usize,
    pub d_len: usize,
}

impl SimInput {
    pub fn build(
        query: &Query,
        doc: &Document,
        table: &EmbeddingTable,
        shape: InputShape,
    ) -> Result<Self> {
        let querysim = build_querysim(query, doc, table, shape.context_window, shape.doc_len)?;
        Self::from_parts(
            build_sim_matrix(query, doc, table, shape.query_len, shape.doc_len)?,
            querysim,
            idf_vector(query, shape.query_len)?,
            query.len(),
            doc.tokens.len().min(shape.doc_len),
        )
    }

    /// Same as [`SimInput::build`] but with an all-zero context signal, for
    /// queries whose terms are all out of vocabulary.
    pub fn build_without_context(
        query: &Query,
        doc: &Document,
        table: &EmbeddingTable,
        shape: InputShape,
    ) -> Result<Self> {
        Self::from_parts(
            build_sim_matrix(query, doc, table, shape.query_len, shape.doc_len)?,
            Tensor::zeros(&[shape.doc_len]),
            idf_vector(query, shape.query_len)?,
            query.len(),
            doc.tokens.len().min(shape.doc_len),
        )
    }

    /// Assembles an input from precomputed parts, checking shapes and padding.
    pub fn from_parts(
        sim: Tensor,
        querysim: Tensor,
        idf: Tensor,
        q_len: usize,
        d_len: usize,
    ) -> Result<Self> {
        let &[lq, ld] = sim.shape() else {
            return Err(Error::shape("SimInput", format!("sim must be 2-D, got {:?}", sim.shape())));
        };
        if querysim.shape() != [ld] || idf.shape() != [lq] {
            return Err(Error::shape(
                "SimInput",
                format!(
                    "sim {:?} is incompatible with querysim {:?} / idf {:?}",
                    sim.shape(),
                    querysim.shape(),
                    idf.shape()
                ),
            ));
        }
        if q_len > lq || d_len > ld {
            return Err(Error::shape(
                "SimInput",
                format!("lengths ({q_len}, {d_len}) exceed padded shape ({lq}, {ld})"),
            ));
        }
        let input = Self {
            sim,
            querysim,
            idf,
            q_len,
            d_len,
        };
        if !input.sim.all_finite() || !input.querysim.all_finite() || !input.idf.all_finite() {
            return Err(Error::Numerical("similarity input is not finite".into()));
        }
        Ok(input)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.sim.shape()[0], self.sim.shape()[1])
    }

    /// True when every padded cell is exactly zero and every value lies in `[-1, 1]`.
    pub fn is_well_formed(&self) -> bool {
        let (lq, ld) = self.shape();
        let in_range = |v: &f64| (-1.0..=1.0).contains(v);
        let sim_ok = (0..lq).all(|i| {
            (0..ld).all(|j| {
                let v = self.sim.data()[i * ld + j];
                in_range(&v) && (i < self.q_len && j < self.d_len || v == 0.0)
            })
        });
        let qs_ok = self
            .querysim
            .data()
            .iter()
            .enumerate()
            .all(|(j, v)| in_range(v) && (j < self.d_len || *v == 0.0));
        let idf_ok = self.idf.data()[self.q_len..].iter().all(|v| *v == 0.0);
        sim_ok && qs_ok && idf_ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn doc(tokens: &[&str]) -> Document {
        Document::new("d", tokens.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn query(tokens: &[&str]) -> Query {
        let toks: Vec<String> = tokens.iter().map(|s| s.to_string()).collect();
        let idfs = vec![1.0; toks.len()];
        Query::new("q", toks, &idfs).unwrap()
    }

    fn table(entries: &[(&str, &[f64])]) -> EmbeddingTable {
        let mut t = EmbeddingTable::new(entries[0].1.len());
        for (term, v) in entries {
            t.insert(*term, v.to_vec()).unwrap();
        }
        t
    }

    fn random_table(rng: &mut ChaCha8Rng, terms: &[&str], dim: usize) -> EmbeddingTable {
        let mut t = EmbeddingTable::new(dim);
        for term in terms {
            t.insert(*term, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
        }
        t
    }

    #[test]
    fn term_sim_examples() {
        let t = table(&[("a", &[1.0, 0.0]), ("b", &[0.0, 2.0])]);
        assert_eq!(term_sim("zz", "zz", &t), 1.0);
        assert_eq!(term_sim("a", "b", &t), 0.0);
        assert_eq!(term_sim("a", "zz", &t), 0.0);
        assert_eq!(t.get("zz"), None);
        let z = table(&[("z", &[0.0, 0.0])]);
        assert_eq!(z.get("z"), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn sim_matrix_exact_match_and_padding() {
        let t = table(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0])]);
        let m = build_sim_matrix(&query(&["a"]), &doc(&["a", "b"]), &t, 2, 3).unwrap();
        assert_eq!(m.shape(), &[2, 3]);
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(build_sim_matrix(&query(&["a", "b", "a"]), &doc(&["a"]), &t, 2, 3).is_err());
    }

    #[test]
    fn sim_matrix_truncates_long_documents() {
        let long: Vec<&str> = (0..900).map(|i| if i < 800 { "x" } else { "a" }).collect();
        let t = table(&[("a", &[1.0, 0.0]), ("x", &[0.0, 1.0])]);
        let m = build_sim_matrix(&query(&["a"]), &doc(&long), &t, 1, 800).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        let empty = build_sim_matrix(&query(&["a"]), &doc(&[]), &t, 2, 5).unwrap();
        assert!(empty.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn query_vec_examples() {
        let t = table(&[("a", &[1.0, 2.0]), ("b", &[-1.0, -2.0]), ("c", &[3.0, 0.0])]);
        assert_eq!(query_vec(&query(&["a"]), &t).unwrap(), vec![1.0, 2.0]);
        assert_eq!(query_vec(&query(&["a", "b"]), &t).unwrap(), vec![0.0, 0.0]);
        assert_eq!(query_vec(&query(&["a", "c", "oov"]), &t).unwrap(), vec![2.0, 1.0]);
        let err = query_vec(&query(&["oov"]), &t).unwrap_err();
        assert!(matches!(err, Error::OovQuery { .. }));
    }

    #[test]
    fn context_vec_examples() {
        let t = table(&[("v", &[1.0, 1.0]), ("w", &[-1.0, -1.0])]);
        assert_eq!(context_vec(&doc(&["v", "v", "v", "v"]), 2, 1, &t), vec![1.0, 1.0]);
        // i=0, window 4, three tokens: mean over positions 0..=2.
        let d = doc(&["v", "w", "v"]);
        let expected = [1.0 / 3.0, 1.0 / 3.0];
        let got = context_vec(&d, 0, 4, &t);
        assert!(got.iter().zip(expected).all(|(g, e)| (g - e).abs() < 1e-15));
        // Window {v, -v} around a token v: (v - v + v) / 3.
        let got = context_vec(&doc(&["v", "v", "w"]), 1, 1, &t);
        assert!(got.iter().all(|g| (g - 1.0 / 3.0).abs() < 1e-15));
        // Out-of-vocabulary tokens do not count toward the divisor.
        assert_eq!(context_vec(&doc(&["oov", "v", "oov"]), 1, 1, &t), vec![1.0, 1.0]);
        assert_eq!(context_vec(&doc(&["oov"]), 0, 3, &t), vec![0.0, 0.0]);
    }

    #[test]
    fn context_vec_without_window_is_own_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_table(&mut rng, &["a", "b", "c"], 5);
        let d = doc(&["a", "c", "b", "a"]);
        for (i, term) in d.tokens.iter().enumerate() {
            assert_eq!(context_vec(&d, i, 0, &t), t.get(term).unwrap());
        }
    }

    #[test]
    fn querysim_examples() {
        let t = table(&[("q", &[1.0, 0.0]), ("o", &[0.0, 1.0])]);
        let all_q = build_querysim(&query(&["q"]), &doc(&["q", "q", "q"]), &t, 4, 5).unwrap();
        assert_eq!(all_q.data(), &[1.0, 1.0, 1.0, 0.0, 0.0]);
        let orth = build_querysim(&query(&["q"]), &doc(&["o", "o"]), &t, 2, 2).unwrap();
        assert_eq!(orth.data(), &[0.0, 0.0]);
    }

    #[test]
    fn querysim_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vocab = ["a", "b", "c", "d", "e", "f"];
        let t = random_table(&mut rng, &vocab[..5], 8);
        for _ in 0..50 {
            let len = rng.random_range(0..40);
            let tokens: Vec<&str> = (0..len).map(|_| vocab[rng.random_range(0..6)]).collect();
            let d = doc(&tokens);
            let q = query(&["a", "c"]);
            let window = rng.random_range(0..6);
            let doc_len = rng.random_range(1..45);
            let fast = build_querysim(&q, &d, &t, window, doc_len).unwrap();
            let qv = query_vec(&q, &t).unwrap();
            for j in 0..doc_len {
                let expected = if j < len.min(doc_len) {
                    cosine(&context_vec(&d, j, window, &t), &qv)
                } else {
                    0.0
                };
                assert!((fast.data()[j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let terms = ["a", "b", "c", "d"];
        let t = random_table(&mut rng, &terms, 6);
        let scale = 3.7;
        let mut scaled = EmbeddingTable::new(6);
        for term in terms {
            scaled
                .insert(term, t.get(term).unwrap().iter().map(|v| v * scale).collect())
                .unwrap();
        }
        let q = query(&["a", "b"]);
        let d = doc(&["c", "a", "d", "b", "c"]);
        for x in terms {
            for y in terms {
                assert!((term_sim(x, y, &t) - term_sim(x, y, &scaled)).abs() < 1e-9);
            }
        }
        let a = build_querysim(&q, &d, &t, 2, 8).unwrap();
        let b = build_querysim(&q, &d, &scaled, 2, 8).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn sim_input_padding_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_table(&mut rng, &["a", "b", "c"], 4);
        let q = query(&["a", "b"]);
        let d = doc(&["c", "a", "zz", "b"]);
        let shape = InputShape {
            query_len: 3,
            doc_len: 6,
            context_window: 1,
        };
        let input = SimInput::build(&q, &d, &t, shape).unwrap();
        assert!(input.is_well_formed());
        assert_eq!((input.q_len, input.d_len), (2, 4));
        assert_eq!(input.idf.data(), &[0.5, 0.5, 0.0]);

        let mut tail = d.clone();
        tail.tokens.extend(["a".to_string(), "c".to_string()]);
        let short = InputShape { doc_len: 4, ..shape };
        let m1 = build_sim_matrix(&q, &d, &t, 3, 4).unwrap();
        let m2 = build_sim_matrix(&q, &tail, &t, 3, 4).unwrap();
        assert_eq!(m1, m2);
        assert!(SimInput::build(&query(&["oov"]), &d, &t, short).is_err());
        let lenient = SimInput::build_without_context(&query(&["oov"]), &d, &t, short).unwrap();
        assert!(lenient.querysim.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn word2vec_text_and_cache_round_trip() {
        let text = "3 2\nb 0.5 -1\na 1 0\n\nc 0.25 0.125\n";
        let t = EmbeddingTable::parse_word2vec_text(text, Path::new("e")).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.get("b"), Some(&[0.5, -1.0][..]));
        let bytes = t.to_cache_bytes();
        assert_eq!(&bytes[..8], CACHE_MAGIC);
        let back = EmbeddingTable::from_cache_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_cache_bytes(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.bin");
        t.write_cache(&p).unwrap();
        assert_eq!(EmbeddingTable::load(&p).unwrap(), t);
        let p2 = dir.path().join("emb.txt");
        fs::write(&p2, text).unwrap();
        assert_eq!(EmbeddingTable::load(&p2).unwrap(), t);
    }

    #[test]
    fn word2vec_errors() {
        let err = EmbeddingTable::parse_word2vec_text("2 3\na 1 2 3\nb 1 2\n", Path::new("e"))
            .unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");
        assert!(EmbeddingTable::parse_word2vec_text("", Path::new("e")).is_err());
        assert!(EmbeddingTable::parse_word2vec_text("x y\n", Path::new("e")).is_err());
        assert!(EmbeddingTable::from_cache_bytes(b"CPACEMB\0\x01").is_err());
    }
}
