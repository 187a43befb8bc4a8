//! Generated collections with a known relevance signal.
//!
//! [`planted_ngrams`] grades documents by how query terms occur: as a
//! contiguous phrase (HRel), scattered (Rel) or barely at all (NRel).
//! [`ambiguous_terms`] gives every query a polysemous term that occurs equally
//! often in relevant and non-relevant documents; only the words a few
//! positions around it reveal which sense is meant.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::{write_run, Corpus, Document, Grade, Judgments, Query, RankedList};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SyntheticCollection {
    pub corpus: Corpus,
    pub queries: Vec<Query>,
    pub judgments: Judgments,
    pub embeddings: EmbeddingTable,
    /// Every judged document per query, in random initial order.
    pub candidates: Vec<RankedList>,
}

impl SyntheticCollection {
    pub fn query_ids(&self) -> Vec<String> {
        self.queries.iter().map(|q| q.query_id.clone()).collect()
    }

    /// Writes `docs.tsv`, `queries.tsv`, `qrels.txt`, `run.txt` and
    /// `embeddings.txt` (word2vec text) into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, content: String| {
            let path = dir.join(name);
            fs::write(&path, content).map_err(|e| Error::io(&path, e))
        };
        let mut docs = String::new();
        for d in self.corpus.documents() {
            docs.push_str(&format!("{}\t{}\n", d.doc_id, d.tokens.join(" ")));
        }
        write("docs.tsv", docs)?;
        let mut queries = String::new();
        for q in &self.queries {
            queries.push_str(&format!("{}\t{}\n", q.query_id, q.tokens.join(" ")));
        }
        write("queries.tsv", queries)?;
        let mut qrels = String::new();
        for q in self.judgments.queries() {
            for (d, g) in self.judgments.for_query(q) {
                qrels.push_str(&format!("{q} 0 {d} {}\n", g.code()));
            }
        }
        write("qrels.txt", qrels)?;
        write("embeddings.txt", self.embeddings.to_word2vec_text())?;
        write_run(&self.candidates, &dir.join("run.txt"), "initial")
    }
}

fn pick(rng: &mut impl Rng, pool: &[String]) -> String {
    pool.choose(rng).expect("non-empty pool").clone()
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// `base * weight` plus unit noise, renormalized.
fn near(rng: &mut impl Rng, base: &[f64], weight: f64) -> Vec<f64> {
    let noise = unit_vector(rng, base.len());
    let mut v: Vec<f64> = base.iter().zip(&noise).map(|(b, n)| b * weight + n).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn finish(
    docs: Vec<Document>,
    query_tokens: Vec<(String, Vec<String>)>,
    judgments: Judgments,
    embeddings: EmbeddingTable,
    rng: &mut impl Rng,
) -> Result<SyntheticCollection> {
    let corpus = Corpus::new(docs)?;
    let mut queries = Vec::with_capacity(query_tokens.len());
    let mut candidates = Vec::with_capacity(query_tokens.len());
    for (qid, tokens) in query_tokens {
        let idfs: Vec<f64> = tokens.iter().map(|t| corpus.idf(t)).collect();
        let mut docs: Vec<String> = judgments.for_query(&qid).map(|(d, _)| d.to_string()).collect();
        docs.shuffle(rng);
        let n = docs.len();
        candidates.push(RankedList::from_scored(
            qid.clone(),
            docs.into_iter().enumerate().map(|(i, d)| (d, (n - i) as f64)),
        )?);
        queries.push(Query::new(qid, tokens, &idfs)?);
    }
    Ok(SyntheticCollection {
        corpus,
        queries,
        judgments,
        embeddings,
        candidates,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedConfig {
    pub queries: usize,
    pub terms_per_query: usize,
    pub highly_relevant: usize,
    pub relevant: usize,
    pub non_relevant: usize,
    pub doc_len: usize,
    /// Times the phrase (or each scattered term) is planted per document.
    pub occurrences: usize,
    pub filler_vocab: usize,
    pub dim: usize,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            queries: 50,
            terms_per_query: 3,
            highly_relevant: 5,
            relevant: 5,
            non_relevant: 10,
            doc_len: 48,
            occurrences: 2,
            filler_vocab: 500,
            dim: 50,
        }
    }
}

/// Queries of distinct terms over random filler. HRel documents contain the
/// query as a contiguous phrase, Rel documents contain the same terms at
/// separated positions, NRel documents contain at most one query term once.
pub fn planted_ngrams(config: &PlantedConfig, seed: u64) -> Result<SyntheticCollection> {
    let span = config.terms_per_query * config.occurrences;
    if config.terms_per_query == 0 || config.doc_len < 4 * span {
        return Err(Error::Config("documents too short for the planted terms".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = EmbeddingTable::new(config.dim);
    let filler: Vec<String> = (0..config.filler_vocab).map(|i| format!("f{i}")).collect();
    for w in &filler {
        table.insert(w.clone(), unit_vector(&mut rng, config.dim))?;
    }
    let mut docs = Vec::new();
    let mut judgments = Judgments::new();
    let mut query_tokens = Vec::new();
    for q in 0..config.queries {
        let qid = format!("q{q:03}");
        let terms: Vec<String> = (0..config.terms_per_query).map(|t| format!("t{q}x{t}")).collect();
        for t in &terms {
            table.insert(t.clone(), unit_vector(&mut rng, config.dim))?;
        }
        let plan = [
            (Grade::HRel, config.highly_relevant),
            (Grade::Rel, config.relevant),
            (Grade::NRel, config.non_relevant),
        ];
        let mut n = 0;
        for (grade, count) in plan {
            for _ in 0..count {
                let mut tokens: Vec<String> = (0..config.doc_len).map(|_| pick(&mut rng, &filler)).collect();
                match grade {
                    Grade::HRel => {
                        // Phrases start in disjoint slots so they never overlap.
                        let slot = config.doc_len / config.occurrences;
                        for o in 0..config.occurrences {
                            let start = o * slot + rng.random_range(0..=slot - config.terms_per_query);
                            for (k, t) in terms.iter().enumerate() {
                                tokens[start + k] = t.clone();
                            }
                        }
                    }
                    Grade::Rel => {
                        // Every planted term gets its own slot and sits at least
                        // three positions away from the previous one.
                        let mut order: Vec<&String> = terms.iter().cycle().take(span).collect();
                        order.shuffle(&mut rng);
                        let slot = config.doc_len / span;
                        for (k, t) in order.into_iter().enumerate() {
                            let pos = k * slot + rng.random_range(0..slot - 3);
                            tokens[pos] = t.clone();
                        }
                    }
                    _ => {
                        if rng.random_bool(0.5) {
                            let pos = rng.random_range(0..config.doc_len);
                            tokens[pos] = terms.choose(&mut rng).expect("terms").clone();
                        }
                    }
                }
                let did = format!("{qid}d{n:02}");
                n += 1;
                judgments.insert(&qid, &did, grade);
                docs.push(Document::new(did, tokens)?);
            }
        }
        query_tokens.push((qid, terms));
    }
    finish(docs, query_tokens, judgments, table, &mut rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmbiguityConfig {
    pub queries: usize,
    pub relevant: usize,
    pub non_relevant: usize,
    /// Blocks around the ambiguous term per document; the same number of
    /// opposite-sense decoy blocks is added.
    pub blocks: usize,
    /// Pure filler tokens between blocks.
    pub padding: usize,
    pub sense_words: usize,
    pub filler_vocab: usize,
    pub dim: usize,
}

impl Default for AmbiguityConfig {
    fn default() -> Self {
        Self {
            queries: 60,
            relevant: 5,
            non_relevant: 5,
            blocks: 2,
            padding: 12,
            sense_words: 4,
            filler_vocab: 500,
            dim: 50,
        }
    }
}

/// Half-width of a sense block; the ambiguous term sits in the middle.
pub const SENSE_BLOCK_RADIUS: usize = 4;

/// Each query is `[p, s]`: `p` is ambiguous and occurs in every document;
/// `s` never occurs in documents and its vector points along the intended
/// sense. Around each occurrence of `p`, the two neighbours on either side
/// are filler and the words three and four positions away carry a sense.
/// Relevant documents put intended-sense words around `p` and the opposite
/// sense in decoy blocks elsewhere; non-relevant documents do the reverse.
/// Term counts are therefore identical across grades and only windows wider
/// than two positions see the difference.
pub fn ambiguous_terms(config: &AmbiguityConfig, seed: u64) -> Result<SyntheticCollection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = EmbeddingTable::new(config.dim);
    let filler: Vec<String> = (0..config.filler_vocab).map(|i| format!("f{i}")).collect();
    for w in &filler {
        table.insert(w.clone(), unit_vector(&mut rng, config.dim))?;
    }
    let mut docs = Vec::new();
    let mut judgments = Judgments::new();
    let mut query_tokens = Vec::new();
    for q in 0..config.queries {
        let qid = format!("q{q:03}");
        let ambiguous = format!("p{q}");
        let intent = format!("s{q}");
        let sense = unit_vector(&mut rng, config.dim);
        let opposite: Vec<f64> = sense.iter().map(|x| -x).collect();
        table.insert(ambiguous.clone(), unit_vector(&mut rng, config.dim))?;
        table.insert(intent.clone(), sense.clone())?;
        let mut words = |tag: &str, dir: &[f64]| -> Result<Vec<String>> {
            (0..config.sense_words)
                .map(|i| {
                    let w = format!("{tag}{q}x{i}");
                    table.insert(w.clone(), near(&mut rng, dir, 3.0))?;
                    Ok(w)
                })
                .collect()
        };
        let plus = words("a", &sense)?;
        let minus = words("b", &opposite)?;

        let mut n = 0;
        let plan = [(Grade::HRel, config.relevant), (Grade::NRel, config.non_relevant)];
        for (grade, count) in plan {
            for _ in 0..count {
                let (near_p, decoy) = if grade == Grade::HRel {
                    (&plus, &minus)
                } else {
                    (&minus, &plus)
                };
                let mut blocks: Vec<Vec<String>> = Vec::new();
                for centre_is_p in [true, false] {
                    for _ in 0..config.blocks {
                        let senses = if centre_is_p { near_p } else { decoy };
                        let centre = if centre_is_p {
                            ambiguous.clone()
                        } else {
                            pick(&mut rng, &filler)
                        };
                        blocks.push(vec![
                            pick(&mut rng, senses),
                            pick(&mut rng, senses),
                            pick(&mut rng, &filler),
                            pick(&mut rng, &filler),
                            centre,
                            pick(&mut rng, &filler),
                            pick(&mut rng, &filler),
                            pick(&mut rng, senses),
                            pick(&mut rng, senses),
                        ]);
                    }
                }
                for _ in 0..config.blocks {
                    blocks.push((0..config.padding).map(|_| pick(&mut rng, &filler)).collect());
                }
                blocks.shuffle(&mut rng);
                let tokens: Vec<String> = blocks.concat();
                let did = format!("{qid}d{n:02}");
                n += 1;
                judgments.insert(&qid, &did, grade);
                docs.push(Document::new(did, tokens)?);
            }
        }
        query_tokens.push((qid, vec![ambiguous, intent]));
    }
    finish(docs, query_tokens, judgments, table, &mut rng)
}

/// Length of every document [`ambiguous_terms`] produces.
pub fn ambiguity_doc_len(config: &AmbiguityConfig) -> usize {
    config.blocks * (2 * (2 * SENSE_BLOCK_RADIUS + 1) + config.padding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::MergedGrade;
    use crate::embedding::cosine;

    fn positions(doc: &Document, pred: impl Fn(&str) -> bool) -> Vec<usize> {
        doc.tokens.iter().enumerate().filter(|(_, t)| pred(t)).map(|(i, _)| i).collect()
    }

    #[test]
    fn planted_grades_follow_term_layout() {
        let config = PlantedConfig {
            queries: 4,
            ..PlantedConfig::default()
        };
        let c = planted_ngrams(&config, 1).unwrap();
        assert_eq!(c.queries.len(), 4);
        assert_eq!(c.corpus.len(), 80);
        assert_eq!(c.candidates.len(), 4);
        for q in &c.queries {
            let terms = &q.tokens;
            for (did, grade) in c.judgments.merged_for_query(&q.query_id) {
                let doc = c.corpus.get(did).unwrap();
                assert_eq!(doc.tokens.len(), config.doc_len);
                let hits = positions(doc, |t| terms.iter().any(|x| x == t));
                match grade {
                    MergedGrade::HRel => {
                        assert_eq!(hits.len(), 6);
                        let first = positions(doc, |t| t == terms[0]);
                        for p in first {
                            assert_eq!(doc.tokens[p + 1], terms[1]);
                            assert_eq!(doc.tokens[p + 2], terms[2]);
                        }
                    }
                    MergedGrade::Rel => {
                        assert_eq!(hits.len(), 6);
                        assert!(hits.windows(2).all(|w| w[1] - w[0] >= 2), "{hits:?}");
                    }
                    MergedGrade::NRel => assert!(hits.len() <= 1),
                }
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        let config = PlantedConfig {
            queries: 2,
            ..PlantedConfig::default()
        };
        let a = planted_ngrams(&config, 5).unwrap();
        let b = planted_ngrams(&config, 5).unwrap();
        assert_eq!(a.candidates, b.candidates);
        assert_eq!(a.embeddings, b.embeddings);
        let c = planted_ngrams(&config, 6).unwrap();
        assert_ne!(a.embeddings, c.embeddings);
    }

    #[test]
    fn ambiguity_balances_counts_and_hides_sense_from_neighbours() {
        let config = AmbiguityConfig {
            queries: 3,
            ..AmbiguityConfig::default()
        };
        let c = ambiguous_terms(&config, 2).unwrap();
        for q in &c.queries {
            let (p, s) = (&q.tokens[0], &q.tokens[1]);
            let sense = c.embeddings.get(s).unwrap();
            for (did, grade) in c.judgments.merged_for_query(&q.query_id) {
                let doc = c.corpus.get(did).unwrap();
                assert_eq!(doc.tokens.len(), ambiguity_doc_len(&config));
                assert!(!doc.tokens.contains(s));
                let occurrences = positions(doc, |t| t == p);
                assert_eq!(occurrences.len(), config.blocks);
                let sign = |t: &str| cosine(c.embeddings.get(t).unwrap(), sense);
                let plus = doc.tokens.iter().filter(|t| sign(t) > 0.5).count();
                let minus = doc.tokens.iter().filter(|t| sign(t) < -0.5).count();
                assert_eq!(plus, minus);
                for &i in &occurrences {
                    for d in [1, 2] {
                        assert!(sign(&doc.tokens[i - d]).abs() < 0.6);
                        assert!(sign(&doc.tokens[i + d]).abs() < 0.6);
                    }
                    let around = sign(&doc.tokens[i + 3]) + sign(&doc.tokens[i - 3]);
                    match grade {
                        MergedGrade::HRel => assert!(around > 1.0),
                        _ => assert!(around < -1.0),
                    }
                }
            }
        }
    }

    #[test]
    fn written_files_reload() {
        let config = PlantedConfig {
            queries: 2,
            ..PlantedConfig::default()
        };
        let c = planted_ngrams(&config, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write_to_dir(dir.path()).unwrap();
        let docs = crate::corpus::load_documents(&dir.path().join("docs.tsv")).unwrap();
        assert_eq!(docs.len(), 40);
        let qrels = crate::corpus::read_qrels(&dir.path().join("qrels.txt")).unwrap();
        assert_eq!(qrels, c.judgments);
        let run = crate::corpus::read_run(&dir.path().join("run.txt")).unwrap();
        assert_eq!(run.len(), 2);
        let emb = EmbeddingTable::load(&dir.path().join("embeddings.txt")).unwrap();
        assert_eq!(emb.len(), c.embeddings.len());
    }
}
