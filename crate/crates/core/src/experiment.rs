//! Train-and-evaluate runs over a query split, shared by ablation sweeps.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Judgments, LabelPair, RankedList};
use crate::error::{Error, Result};
use crate::evaluation::{mean_err, pair_accuracy, PairAccuracyReport, TiePolicy};
use crate::model::{score_inference, Components, ModelConfig, ModelParams};
use crate::training::{rerank_lists, run_fold, EpochRecord, FoldData, InputTable, PairSampler, TrainConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl QuerySplit {
    pub fn validate(&self) -> Result<()> {
        for (name, set) in [("train", &self.train), ("validation", &self.validation)] {
            if set.is_empty() {
                return Err(Error::Config(format!("{name} query set is empty")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for q in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(q) {
                return Err(Error::Config(format!("query {q} is in more than one split")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ExperimentData<'a> {
    pub judgments: &'a Judgments,
    pub inputs: &'a InputTable,
    pub candidates: &'a [RankedList],
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub variant: Components,
    pub best_epoch: usize,
    pub validation_err: f64,
    pub test_err: f64,
    pub train_pairs: PairAccuracyReport,
    pub test_pairs: PairAccuracyReport,
    pub history: Vec<EpochRecord>,
    pub params: ModelParams,
}

fn lists_for<'a>(candidates: &'a [RankedList], ids: &[String]) -> Vec<RankedList> {
    let by_id: HashMap<&str, &'a RankedList> =
        candidates.iter().map(|l| (l.query_id.as_str(), l)).collect();
    ids.iter().filter_map(|q| by_id.get(q.as_str()).map(|l| (*l).clone())).collect()
}

/// Pair accuracy of a trained model over `queries`.
pub fn model_pair_accuracy(
    params: &ModelParams,
    model: &ModelConfig,
    judgments: &Judgments,
    inputs: &InputTable,
    queries: &[String],
    policy: TiePolicy,
) -> Result<PairAccuracyReport> {
    let mut failure = None;
    let report = pair_accuracy(
        judgments,
        |q, d| {
            let input = inputs.get(q, d)?;
            match score_inference(input, params, model) {
                Ok(s) => Some(s),
                Err(e) => {
                    failure.get_or_insert(e);
                    None
                }
            }
        },
        queries,
        policy,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Trains one model on `split.train`, selects the epoch on
/// `split.validation` and reports ERR and pair accuracy.
pub fn run_variant(
    data: ExperimentData<'_>,
    split: &QuerySplit,
    model: &ModelConfig,
    train: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<VariantResult> {
    split.validate()?;
    let judgments = data.inputs.restrict(data.judgments);
    let sampler = PairSampler::new(&judgments, &split.train, &train.label_pairs)?;
    let validation = lists_for(data.candidates, &split.validation);
    let fold = FoldData {
        sampler: &sampler,
        validation: &validation,
        judgments: data.judgments,
        inputs: data.inputs,
    };
    let result = run_fold(fold, model, train, on_epoch)?;
    let test_lists = lists_for(data.candidates, &split.test);
    let reranked = rerank_lists(&test_lists, &result.params, model, data.inputs)?;
    let policy = TiePolicy::Incorrect;
    Ok(VariantResult {
        variant: model.components,
        best_epoch: result.best_epoch,
        validation_err: result.best_metric,
        test_err: mean_err(&reranked, data.judgments, train.grade_scale, train.eval_cutoff),
        train_pairs: model_pair_accuracy(&result.params, model, &judgments, data.inputs, &split.train, policy)?,
        test_pairs: model_pair_accuracy(&result.params, model, &judgments, data.inputs, &split.test, policy)?,
        history: result.history,
        params: result.params,
    })
}

/// Column order of ablation tables.
pub fn ablation_columns() -> Vec<String> {
    Components::all_variants().iter().map(|c| c.name()).collect()
}

type Metric = Box<dyn Fn(&VariantResult) -> f64>;

/// Rows of metric values, one column per variant, formatted to four places.
pub fn ablation_rows(results: &[VariantResult]) -> Vec<Vec<String>> {
    let mut rows: Vec<(String, Metric)> = vec![
        ("validation ERR@20".into(), Box::new(|r| r.validation_err)),
        ("test ERR@20".into(), Box::new(|r| r.test_err)),
        ("best epoch".into(), Box::new(|r| r.best_epoch as f64)),
    ];
    for pair in LabelPair::ALL {
        rows.push((format!("test {pair}"), Box::new(move |r| r.test_pairs.accuracy(pair))));
    }
    rows.push(("test pairs overall".into(), Box::new(|r| r.test_pairs.overall())));
    rows.into_iter()
        .map(|(name, f)| {
            let mut row = vec![name.clone()];
            for r in results {
                row.push(if name == "best epoch" {
                    format!("{}", r.best_epoch)
                } else {
                    format!("{:.4}", f(r))
                });
            }
            row
        })
        .collect()
}
