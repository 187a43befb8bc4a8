use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::corpus::{Judgments, LabelPair, MergedGrade};
use crate::error::{Error, Result};

/// A document judged higher than another for the same query.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingPair {
    pub query_id: String,
    pub pos_doc_id: String,
    pub neg_doc_id: String,
    pub pos_grade: MergedGrade,
    pub neg_grade: MergedGrade,
}

#[derive(Clone, Debug)]
struct QueryPool {
    query_id: String,
    /// Judged documents per merged grade, indexed by grade value.
    docs: [Vec<String>; 3],
    /// `(label pair, cumulative tuple count)`.
    buckets: Vec<(LabelPair, u64)>,
}

/// Draws (query, higher-graded doc, lower-graded doc) tuples uniformly from
/// all tuples whose label pair is allowed, without listing them.
#[derive(Clone, Debug)]
pub struct PairSampler {
    pools: Vec<QueryPool>,
    cumulative: Vec<u64>,
    skipped: Vec<String>,
}

impl PairSampler {
    pub fn new(judgments: &Judgments, queries: &[String], allowed: &[LabelPair]) -> Result<Self> {
        let mut pools = Vec::new();
        let mut cumulative = Vec::new();
        let mut skipped = Vec::new();
        let mut total = 0u64;
        for qid in queries {
            let mut docs: [Vec<String>; 3] = Default::default();
            for (doc, grade) in judgments.merged_for_query(qid) {
                docs[grade.value() as usize].push(doc.to_string());
            }
            let mut buckets = Vec::new();
            let mut q_total = 0u64;
            for &pair in LabelPair::ALL.iter().filter(|p| allowed.contains(p)) {
                let (hi, lo) = pair.grades();
                let n = docs[hi.value() as usize].len() as u64 * docs[lo.value() as usize].len() as u64;
                if n > 0 {
                    q_total += n;
                    buckets.push((pair, q_total));
                }
            }
            if q_total == 0 {
                skipped.push(qid.clone());
                continue;
            }
            total += q_total;
            cumulative.push(total);
            pools.push(QueryPool {
                query_id: qid.clone(),
                docs,
                buckets,
            });
        }
        if !skipped.is_empty() {
            log::info!("{} queries have no usable training pair", skipped.len());
        }
        if pools.is_empty() {
            return Err(Error::Data("no query has a valid training pair".into()));
        }
        Ok(Self {
            pools,
            cumulative,
            skipped,
        })
    }

    pub fn total_pairs(&self) -> u64 {
        *self.cumulative.last().expect("at least one pool")
    }

    /// Queries without any valid pair.
    pub fn skipped_queries(&self) -> &[String] {
        &self.skipped
    }

    /// The `index`-th tuple in a fixed enumeration, `index < total_pairs()`.
    pub fn pair_at(&self, index: u64) -> TrainingPair {
        let q = self.cumulative.partition_point(|&c| c <= index);
        let pool = &self.pools[q];
        let mut rem = index - if q == 0 { 0 } else { self.cumulative[q - 1] };
        let b = pool.buckets.partition_point(|&(_, c)| c <= rem);
        if b > 0 {
            rem -= pool.buckets[b - 1].1;
        }
        let (pair, _) = pool.buckets[b];
        let (hi, lo) = pair.grades();
        let lows = &pool.docs[lo.value() as usize];
        let hi_doc = &pool.docs[hi.value() as usize][(rem / lows.len() as u64) as usize];
        let lo_doc = &lows[(rem % lows.len() as u64) as usize];
        TrainingPair {
            query_id: pool.query_id.clone(),
            pos_doc_id: hi_doc.clone(),
            neg_doc_id: lo_doc.clone(),
            pos_grade: hi,
            neg_grade: lo,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> TrainingPair {
        self.pair_at(rng.random_range(0..self.total_pairs()))
    }

    pub fn all_pairs(&self) -> impl Iterator<Item = TrainingPair> + '_ {
        (0..self.total_pairs()).map(|i| self.pair_at(i))
    }
}
