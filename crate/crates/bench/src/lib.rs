//! Fixtures shared by the benchmarks.

use copacrr::corpus::{Document, Query};
use copacrr::embedding::{EmbeddingTable, SimInput};
use copacrr::model::{ModelConfig, ModelParams};
use copacrr::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("consistent shape")
}

/// A fully populated input of the configured size.
pub fn random_input(rng: &mut impl Rng, config: &ModelConfig) -> SimInput {
    let (lq, ld) = (config.query_len, config.doc_len);
    let idf = Tensor::vector((0..lq).map(|_| rng.random_range(0.0..1.0)).collect());
    SimInput::from_parts(uniform(rng, &[lq, ld]), uniform(rng, &[ld]), idf, lq, ld)
        .expect("well-formed input")
}

pub fn model(config: &ModelConfig, seed: u64) -> ModelParams {
    ModelParams::init(config, &mut rng(seed)).expect("valid configuration")
}

/// A vocabulary of `vocab` random vectors, a query of `query_len`
/// of its terms and a document of `doc_len` terms.
pub fn text_fixture(vocab: usize, dim: usize, query_len: usize, doc_len: usize) -> (EmbeddingTable, Query, Document) {
    let mut r = rng(0);
    let mut table = EmbeddingTable::new(dim);
    for i in 0..vocab {
        let v = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        table.insert(format!("w{i}"), v).expect("finite vector");
    }
    let pick = |r: &mut ChaCha8Rng| format!("w{}", r.random_range(0..vocab));
    let q_tokens: Vec<String> = (0..query_len).map(|_| pick(&mut r)).collect();
    let idfs = vec![1.0; query_len];
    let query = Query::new("q", q_tokens, &idfs).expect("valid query");
    let d_tokens = (0..doc_len).map(|_| pick(&mut r)).collect();
    let doc = Document::new("d", d_tokens).expect("valid document");
    (table, query, doc)
}
