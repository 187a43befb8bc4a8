//! Documents, queries, term statistics and TREC file formats.

mod trec;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub use trec::{
    merge_labels, parse_qrels, parse_run, read_qrels, read_run, write_run, Grade, GradeScale,
    Judgments, LabelPair, MergedGrade, ParsedRun, RankedList, RunEntry,
};

/// Lowercases `text` and splits it on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Smoothed inverse document frequency `ln((N - df + 0.5) / (df + 0.5))`,
/// clamped below at zero.
pub fn compute_idf(df: usize, n_docs: usize) -> f64 {
    debug_assert!(df <= n_docs);
    let (df, n) = (df as f64, n_docs as f64);
    ((n - df + 0.5) / (df + 0.5)).ln().max(0.0)
}

/// Softmax over a query's term IDFs.
pub fn normalize_idf(idfs: &[f64]) -> Vec<f64> {
    let max = idfs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = idfs.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<String>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, tokens: Vec<String>) -> Result<Self> {
        let doc_id = doc_id.into();
        if doc_id.is_empty() {
            return Err(Error::Data("document id must not be empty".into()));
        }
        Ok(Self { doc_id, tokens })
    }

    pub fn from_text(doc_id: impl Into<String>, text: &str) -> Result<Self> {
        Self::new(doc_id, tokenize(text))
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub query_id: String,
    pub tokens: Vec<String>,
    /// Normalized IDF per token; positive and summing to one.
    pub idf_norm: Vec<f64>,
}

impl Query {
    /// Builds a query from tokens and their raw IDFs.
    pub fn new(query_id: impl Into<String>, tokens: Vec<String>, idfs: &[f64]) -> Result<Self> {
        let query_id = query_id.into();
        if tokens.is_empty() {
            return Err(Error::Data(format!("query {query_id} has no terms")));
        }
        if idfs.len() != tokens.len() {
            return Err(Error::Data(format!(
                "query {query_id}: {} IDFs for {} terms",
                idfs.len(),
                tokens.len()
            )));
        }
        Ok(Self {
            query_id,
            tokens,
            idf_norm: normalize_idf(idfs),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// An immutable document collection with document frequencies.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    docs: BTreeMap<String, Document>,
    df: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: impl IntoIterator<Item = Document>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut df: HashMap<String, usize> = HashMap::new();
        for doc in docs {
            let unique: HashSet<&String> = doc.tokens.iter().collect();
            for term in unique {
                *df.entry(term.clone()).or_default() += 1;
            }
            if let Some(prev) = map.insert(doc.doc_id.clone(), doc) {
                return Err(Error::Data(format!("duplicate document id {}", prev.doc_id)));
            }
        }
        let empty = map.values().filter(|d| d.is_empty()).count();
        if empty > 0 {
            log::warn!("{empty} documents have no tokens");
        }
        Ok(Self { docs: map, df })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.docs.get(doc_id)
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.docs.values()
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        compute_idf(self.document_frequency(term), self.docs.len().max(1))
    }

    /// Tokenizes `text` and attaches normalized IDFs from this collection.
    pub fn query(&self, query_id: impl Into<String>, text: &str) -> Result<Query> {
        let tokens = tokenize(text);
        let idfs: Vec<f64> = tokens.iter().map(|t| self.idf(t)).collect();
        Query::new(query_id, tokens, &idfs)
    }
}

/// Loads documents from a directory of `<doc_id>.txt` files or from a
/// `doc_id<TAB>text` file.
pub fn load_documents(path: &Path) -> Result<Vec<Document>> {
    if path.is_dir() {
        let mut docs = Vec::new();
        let entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(path, e))?;
            let file = entry.path();
            if file.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(stem) = file.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
            docs.push(Document::from_text(stem, &text)?);
        }
        docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        Ok(docs)
    } else {
        read_tsv(path)?
            .into_iter()
            .map(|(id, text)| Document::from_text(id, &text))
            .collect()
    }
}

/// Reads `query_id<TAB>text` lines.
pub fn read_queries(path: &Path) -> Result<Vec<(String, String)>> {
    read_tsv(path)
}

fn read_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((id, text)) = line.split_once('\t') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: "expected `id<TAB>text`".into(),
            });
        };
        let id = id.trim();
        if id.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: "empty id".into(),
            });
        }
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}
