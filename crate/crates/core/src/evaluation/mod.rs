//! ERR@k, re-ranking statistics and pair accuracy.

mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{GradeScale, Judgments, LabelPair, RankedList};
use crate::error::{Error, Result};

pub use report::{format_table, MetricRecord};

/// Grades of a ranking, top first, on a scale with known maximum.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GradedRanking {
    grades: Vec<u8>,
    max_grade: u8,
}

impl GradedRanking {
    pub fn new(grades: Vec<u8>, max_grade: u8) -> Result<Self> {
        if let Some(g) = grades.iter().find(|&&g| g > max_grade) {
            return Err(Error::Data(format!("grade {g} exceeds maximum {max_grade}")));
        }
        Ok(Self { grades, max_grade })
    }

    /// Looks up every ranked document; unjudged documents get grade 0.
    pub fn from_list(list: &RankedList, judgments: &Judgments, scale: GradeScale) -> Self {
        let grades = list
            .doc_ids()
            .map(|d| judgments.graded(&list.query_id, d, scale).unwrap_or(0))
            .collect();
        Self {
            grades,
            max_grade: scale.max_grade(),
        }
    }

    pub fn grades(&self) -> &[u8] {
        &self.grades
    }

    pub fn max_grade(&self) -> u8 {
        self.max_grade
    }
}

/// Expected reciprocal rank over the first `k` positions.
pub fn err_at_k(ranking: &GradedRanking, k: usize) -> f64 {
    let denom = f64::powi(2.0, ranking.max_grade as i32);
    let mut not_stopped = 1.0;
    let mut err = 0.0;
    for (r, &g) in ranking.grades.iter().take(k).enumerate() {
        let stop = (f64::powi(2.0, g as i32) - 1.0) / denom;
        err += not_stopped * stop / (r + 1) as f64;
        not_stopped *= 1.0 - stop;
    }
    err
}

/// Mean ERR@k over lists, each query weighted equally. Empty input gives 0.
pub fn mean_err(lists: &[RankedList], judgments: &Judgments, scale: GradeScale, k: usize) -> f64 {
    if lists.is_empty() {
        return 0.0;
    }
    let total: f64 = lists
        .iter()
        .map(|l| err_at_k(&GradedRanking::from_list(l, judgments, scale), k))
        .sum();
    total / lists.len() as f64
}

/// Re-ranked list plus the number of documents the scorer could not score.
#[derive(Clone, Debug, PartialEq)]
pub struct Reranked {
    pub list: RankedList,
    pub missing: usize,
}

/// Reorders candidates by descending score, keeping the original order among
/// equal scores. Documents the scorer returns `None` for sink to the bottom
/// with score `-inf`.
pub fn rerank_with_model(
    candidates: &RankedList,
    mut scorer: impl FnMut(&str) -> Option<f64>,
) -> Result<Reranked> {
    let mut missing = 0;
    let scored: Vec<(String, f64)> = candidates
        .doc_ids()
        .map(|d| {
            let score = scorer(d).unwrap_or_else(|| {
                missing += 1;
                f64::NEG_INFINITY
            });
            (d.to_string(), score)
        })
        .collect();
    if missing > 0 {
        log::warn!(
            "query {}: {missing} candidate documents could not be scored",
            candidates.query_id
        );
    }
    Ok(Reranked {
        list: RankedList::from_scored(candidates.query_id.clone(), scored)?,
        missing,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunDelta {
    pub run: String,
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankAllStats {
    pub runs: Vec<RunDelta>,
    /// Share of runs whose mean ERR went up.
    pub improved_fraction: f64,
    /// Mean of `(after - before) / before` over runs with a non-zero baseline.
    pub mean_relative_delta: f64,
    pub zero_baseline_runs: usize,
    pub missing_docs: usize,
}

impl RerankAllStats {
    pub fn from_deltas(runs: Vec<RunDelta>) -> Self {
        let improved = runs.iter().filter(|r| r.after > r.before).count();
        let relative: Vec<f64> = runs
            .iter()
            .filter(|r| r.before != 0.0)
            .map(|r| (r.after - r.before) / r.before)
            .collect();
        let mean_relative_delta = if relative.is_empty() {
            0.0
        } else {
            relative.iter().sum::<f64>() / relative.len() as f64
        };
        Self {
            improved_fraction: if runs.is_empty() {
                0.0
            } else {
                improved as f64 / runs.len() as f64
            },
            mean_relative_delta,
            zero_baseline_runs: runs.len() - relative.len(),
            runs,
            missing_docs: 0,
        }
    }
}

/// Re-ranks every run with `scorer(query_id, doc_id)` and compares mean
/// ERR@k before and after.
pub fn rerank_all_stats(
    runs: &[(String, Vec<RankedList>)],
    mut scorer: impl FnMut(&str, &str) -> Option<f64>,
    judgments: &Judgments,
    scale: GradeScale,
    k: usize,
) -> Result<RerankAllStats> {
    if runs.is_empty() {
        return Err(Error::Data("no runs to re-rank".into()));
    }
    let mut deltas = Vec::with_capacity(runs.len());
    let mut missing = 0;
    for (name, lists) in runs {
        let mut after = Vec::with_capacity(lists.len());
        for list in lists {
            let r = rerank_with_model(list, |d| scorer(&list.query_id, d))?;
            missing += r.missing;
            after.push(r.list);
        }
        deltas.push(RunDelta {
            run: name.clone(),
            before: mean_err(lists, judgments, scale, k),
            after: mean_err(&after, judgments, scale, k),
        });
    }
    let mut stats = RerankAllStats::from_deltas(deltas);
    stats.missing_docs = missing;
    Ok(stats)
}

/// How pairs with equal scores are counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TiePolicy {
    #[default]
    Incorrect,
    Half,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub tested: u64,
    pub correct: u64,
    pub ties: u64,
}

impl PairCounts {
    pub fn accuracy(&self, policy: TiePolicy) -> f64 {
        if self.tested == 0 {
            return 0.0;
        }
        let credit = match policy {
            TiePolicy::Incorrect => self.correct as f64,
            TiePolicy::Half => self.correct as f64 + 0.5 * self.ties as f64,
        };
        credit / self.tested as f64
    }

    fn add(&mut self, other: &PairCounts) {
        self.tested += other.tested;
        self.correct += other.correct;
        self.ties += other.ties;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairAccuracyReport {
    pub policy: TiePolicy,
    pub by_label: BTreeMap<LabelPair, PairCounts>,
    /// Judged documents skipped because the scorer had no score for them.
    pub unscored_docs: u64,
}

impl PairAccuracyReport {
    pub fn counts(&self, pair: LabelPair) -> PairCounts {
        self.by_label.get(&pair).copied().unwrap_or_default()
    }

    pub fn accuracy(&self, pair: LabelPair) -> f64 {
        self.counts(pair).accuracy(self.policy)
    }

    pub fn overall(&self) -> f64 {
        let mut all = PairCounts::default();
        for c in self.by_label.values() {
            all.add(c);
        }
        all.accuracy(self.policy)
    }
}

/// Checks every differently-graded pair of judged documents per query: a pair
/// is correct when the higher-graded document gets the strictly higher score.
pub fn pair_accuracy(
    judgments: &Judgments,
    mut scorer: impl FnMut(&str, &str) -> Option<f64>,
    queries: &[String],
    policy: TiePolicy,
) -> PairAccuracyReport {
    let mut report = PairAccuracyReport {
        policy,
        by_label: LabelPair::ALL.iter().map(|&p| (p, PairCounts::default())).collect(),
        unscored_docs: 0,
    };
    for qid in queries {
        let mut scored = Vec::new();
        for (doc, grade) in judgments.merged_for_query(qid) {
            match scorer(qid, doc) {
                Some(s) => scored.push((grade, s)),
                None => report.unscored_docs += 1,
            }
        }
        for (i, &(ga, sa)) in scored.iter().enumerate() {
            for &(gb, sb) in &scored[i + 1..] {
                let Some(pair) = LabelPair::of(ga, gb) else {
                    continue;
                };
                let (hi, lo) = if ga > gb { (sa, sb) } else { (sb, sa) };
                let c = report.by_label.get_mut(&pair).expect("all pairs present");
                c.tested += 1;
                if hi > lo {
                    c.correct += 1;
                } else if hi == lo {
                    c.ties += 1;
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Grade;
    use proptest::prelude::*;
    use rand::seq::{IndexedRandom, SliceRandom};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ranking(grades: &[u8]) -> GradedRanking {
        GradedRanking::new(grades.to_vec(), 2).unwrap()
    }

    fn list(qid: &str, docs: &[&str]) -> RankedList {
        let n = docs.len();
        RankedList::from_scored(
            qid,
            docs.iter().enumerate().map(|(i, d)| (d.to_string(), (n - i) as f64)),
        )
        .unwrap()
    }

    #[test]
    fn err_hand_examples() {
        assert!((err_at_k(&ranking(&[2]), 20) - 0.75).abs() < 1e-12);
        assert_eq!(err_at_k(&ranking(&[0, 0, 0]), 20), 0.0);
        assert!((err_at_k(&ranking(&[2, 2]), 2) - 0.84375).abs() < 1e-12);
        assert_eq!(err_at_k(&ranking(&[]), 5), 0.0);
        assert!(GradedRanking::new(vec![3], 2).is_err());
    }

    #[test]
    fn unjudged_documents_count_as_zero() {
        let mut j = Judgments::new();
        j.insert("q", "a", Grade::HRel);
        j.insert("q", "n", Grade::Nav);
        let g = GradedRanking::from_list(&list("q", &["x", "a", "n"]), &j, GradeScale::Merged);
        assert_eq!(g.grades(), &[0, 2, 0]);
        let raw = GradedRanking::from_list(&list("q", &["x", "a", "n"]), &j, GradeScale::Raw);
        assert_eq!(raw.grades(), &[0, 2, 4]);
    }

    proptest! {
        #[test]
        fn err_bounded_and_monotone_in_k(grades in proptest::collection::vec(0u8..=2, 0..30)) {
            let r = ranking(&grades);
            let mut prev = 0.0;
            for k in 1..=31 {
                let e = err_at_k(&r, k);
                prop_assert!((0.0..=1.0).contains(&e));
                prop_assert!(e >= prev);
                prev = e;
            }
        }
    }

    #[test]
    fn promoting_higher_grade_never_hurts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.random_range(2..25);
            let grades: Vec<u8> = (0..n).map(|_| rng.random_range(0..=2)).collect();
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            let (i, j) = (i.min(j), i.max(j));
            if grades[j] <= grades[i] {
                continue;
            }
            let mut swapped = grades.clone();
            swapped.swap(i, j);
            for k in [1, 5, 20, n] {
                assert!(err_at_k(&ranking(&swapped), k) >= err_at_k(&ranking(&grades), k) - 1e-15);
            }
        }
    }

    #[test]
    fn rerank_examples() {
        let c = list("q", &["a", "b", "c", "d"]);
        let rank_of = |d: &str| c.doc_ids().position(|x| x == d).unwrap() as f64;
        let reversed = rerank_with_model(&c, |d| Some(rank_of(d))).unwrap();
        assert_eq!(reversed.list.doc_ids().collect::<Vec<_>>(), ["d", "c", "b", "a"]);
        let constant = rerank_with_model(&c, |_| Some(0.5)).unwrap();
        assert_eq!(constant.list.doc_ids().collect::<Vec<_>>(), ["a", "b", "c", "d"]);
        let missing = rerank_with_model(&c, |d| (d != "a").then_some(1.0)).unwrap();
        assert_eq!(missing.missing, 1);
        assert_eq!(missing.list.doc_ids().last(), Some("a"));
    }

    #[test]
    fn rerank_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let n = rng.random_range(1..30);
            let docs: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
            let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
            let c = list("q", &refs);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
            let got = rerank_with_model(&c, |d| Some(scores[d[1..].parse::<usize>().unwrap()])).unwrap();
            let mut idx: Vec<usize> = (0..n).collect();
            // Brute force: repeatedly take the first best-scored remaining doc.
            let mut oracle = Vec::new();
            while !idx.is_empty() {
                let mut best = 0;
                for (p, &i) in idx.iter().enumerate() {
                    if scores[i] > scores[idx[best]] {
                        best = p;
                    }
                }
                oracle.push(format!("d{}", idx.remove(best)));
            }
            assert_eq!(got.list.doc_ids().collect::<Vec<_>>(), oracle);
        }
    }

    proptest! {
        #[test]
        fn rerank_preserves_docs_and_ignores_monotone_transforms(
            scores in proptest::collection::vec(-5.0f64..5.0, 1..25)
        ) {
            let docs: Vec<String> = (0..scores.len()).map(|i| format!("d{i}")).collect();
            let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
            let c = list("q", &refs);
            let idx = |d: &str| d[1..].parse::<usize>().unwrap();
            let a = rerank_with_model(&c, |d| Some(scores[idx(d)])).unwrap().list;
            let b = rerank_with_model(&c, |d| Some(scores[idx(d)].exp() * 3.0 + 1.0)).unwrap().list;
            let mut sa: Vec<&str> = a.doc_ids().collect();
            let order_a = sa.clone();
            sa.sort();
            let mut sorted = refs.clone();
            sorted.sort();
            prop_assert_eq!(sa, sorted);
            prop_assert_eq!(order_a, b.doc_ids().collect::<Vec<_>>());
        }
    }

    fn graded_judgments(grades: &[(&str, &str, Grade)]) -> Judgments {
        let mut j = Judgments::new();
        for (q, d, g) in grades {
            j.insert(q, d, *g);
        }
        j
    }

    #[test]
    fn rerank_all_examples() {
        let j = graded_judgments(&[("q", "a", Grade::NRel), ("q", "b", Grade::HRel), ("q", "c", Grade::Rel)]);
        let runs = vec![
            ("r1".to_string(), vec![list("q", &["a", "b", "c"])]),
            ("r2".to_string(), vec![list("q", &["c", "a", "b"])]),
        ];
        let positions = |qid: &str, d: &str| -> Vec<f64> {
            runs.iter()
                .map(|(_, ls)| {
                    let l = ls.iter().find(|l| l.query_id == qid).unwrap();
                    -(l.doc_ids().position(|x| x == d).unwrap() as f64)
                })
                .collect()
        };
        for (r, run) in runs.iter().enumerate() {
            let single = vec![run.clone()];
            let s = rerank_all_stats(&single, |q, d| Some(positions(q, d)[r]), &j, GradeScale::Merged, 20).unwrap();
            assert_eq!(s.improved_fraction, 0.0);
            assert_eq!(s.mean_relative_delta, 0.0);
        }
        let oracle = |q: &str, d: &str| j.graded(q, d, GradeScale::Merged).map(f64::from);
        let s = rerank_all_stats(&runs, oracle, &j, GradeScale::Merged, 20).unwrap();
        assert_eq!(s.improved_fraction, 1.0);
        assert!(rerank_all_stats(&[], oracle, &j, GradeScale::Merged, 20).is_err());

        let hand = RerankAllStats::from_deltas(vec![
            RunDelta { run: "up".into(), before: 0.5, after: 0.55 },
            RunDelta { run: "down".into(), before: 0.5, after: 0.45 },
            RunDelta { run: "zero".into(), before: 0.0, after: 0.0 },
        ]);
        assert!((hand.improved_fraction - 1.0 / 3.0).abs() < 1e-12);
        assert!(hand.mean_relative_delta.abs() < 1e-12);
        assert_eq!(hand.zero_baseline_runs, 1);
        let two = RerankAllStats::from_deltas(hand.runs[..2].to_vec());
        assert_eq!(two.improved_fraction, 0.5);
        assert!(two.mean_relative_delta.abs() < 1e-12);
    }

    #[test]
    fn pair_accuracy_examples() {
        let j = graded_judgments(&[
            ("q", "h", Grade::HRel),
            ("q", "r", Grade::Rel),
            ("q", "n", Grade::NRel),
            ("q", "nav", Grade::Nav),
        ]);
        let qs = vec!["q".to_string()];
        let oracle = pair_accuracy(&j, |q, d| j.merged(q, d).map(|g| g.value() as f64), &qs, TiePolicy::Incorrect);
        for p in LabelPair::ALL {
            assert_eq!(oracle.accuracy(p), 1.0);
            assert_eq!(oracle.counts(p).tested, 1);
        }
        let constant = pair_accuracy(&j, |_, _| Some(1.0), &qs, TiePolicy::Incorrect);
        assert_eq!(constant.overall(), 0.0);
        let half = pair_accuracy(&j, |_, _| Some(1.0), &qs, TiePolicy::Half);
        assert_eq!(half.overall(), 0.5);
        let table = |d: &str| match d {
            "h" => Some(0.9),
            "r" => Some(0.1),
            "n" => Some(0.5),
            _ => None,
        };
        let r = pair_accuracy(&j, |_, d| table(d), &qs, TiePolicy::Incorrect);
        assert_eq!(r.accuracy(LabelPair::HRelNRel), 1.0);
        assert_eq!(r.accuracy(LabelPair::HRelRel), 1.0);
        assert_eq!(r.accuracy(LabelPair::RelNRel), 0.0);
        assert_eq!(r.unscored_docs, 0);
    }

    proptest! {
        #[test]
        fn negated_scorer_complements_accuracy(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut j = Judgments::new();
            let grades = [Grade::NRel, Grade::Rel, Grade::HRel, Grade::Junk, Grade::Key];
            let mut scores = BTreeMap::new();
            let mut pool: Vec<u32> = (0..200).collect();
            pool.shuffle(&mut rng);
            for (i, &s) in pool.iter().take(30).enumerate() {
                let q = format!("q{}", i % 3);
                let d = format!("d{i}");
                j.insert(&q, &d, *grades.choose(&mut rng).unwrap());
                scores.insert(d, s as f64);
            }
            let qs: Vec<String> = (0..3).map(|i| format!("q{i}")).collect();
            let pos = pair_accuracy(&j, |_, d| scores.get(d).copied(), &qs, TiePolicy::Incorrect);
            let neg = pair_accuracy(&j, |_, d| scores.get(d).map(|s| -s), &qs, TiePolicy::Incorrect);
            let shifted = pair_accuracy(&j, |_, d| scores.get(d).map(|s| s * 2.0 + 7.0), &qs, TiePolicy::Incorrect);
            for p in LabelPair::ALL {
                if pos.counts(p).tested > 0 {
                    prop_assert!((pos.accuracy(p) + neg.accuracy(p) - 1.0).abs() < 1e-12);
                }
                prop_assert_eq!(pos.counts(p), shifted.counts(p));
            }
        }
    }
}
