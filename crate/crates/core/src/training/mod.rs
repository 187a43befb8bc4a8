//! Pairwise training, validation-based epoch selection and fold plumbing.

mod optim;
mod sampler;
mod split;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, GradeScale, Judgments, LabelPair, Query, RankedList};
use crate::embedding::{EmbeddingTable, InputShape, SimInput};
use crate::error::{Error, Result};
use crate::evaluation::{mean_err, rerank_with_model};
use crate::model::{score_inference, score_node, LossKind, ModelConfig, ModelParams, ParamNodes};
use crate::numerics::Graph;

pub use optim::{Adam, AdamConfig};
pub use sampler::{PairSampler, TrainingPair};
pub use split::{Fold, SplitPlan};

/// Precomputed model inputs keyed by query and document.
#[derive(Clone, Debug, Default)]
pub struct InputTable {
    inputs: HashMap<String, HashMap<String, SimInput>>,
    oov_queries: Vec<String>,
}

impl InputTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: &str, doc_id: &str, input: SimInput) {
        self.inputs
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), input);
    }

    pub fn get(&self, query_id: &str, doc_id: &str) -> Option<&SimInput> {
        self.inputs.get(query_id)?.get(doc_id)
    }

    pub fn len(&self) -> usize {
        self.inputs.values().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Queries whose terms were all out of vocabulary; their inputs carry a
    /// zero context signal.
    pub fn oov_queries(&self) -> &[String] {
        &self.oov_queries
    }

    /// Builds inputs for every `(query, doc)` in `pairs` whose document is in
    /// the corpus. Documents missing from the corpus are skipped.
    pub fn build(
        queries: &[Query],
        pairs: &[(String, String)],
        corpus: &Corpus,
        table: &EmbeddingTable,
        shape: InputShape,
    ) -> Result<Self> {
        let by_id: HashMap<&str, &Query> = queries.iter().map(|q| (q.query_id.as_str(), q)).collect();
        let mut oov = Vec::new();
        for q in queries {
            if let Err(Error::OovQuery { .. }) = crate::embedding::query_vec(q, table) {
                log::warn!("query {}: every term is out of vocabulary", q.query_id);
                oov.push(q.query_id.clone());
            }
        }
        let built: Vec<Option<(String, String, SimInput)>> = pairs
            .par_iter()
            .map(|(qid, did)| {
                let (Some(q), Some(doc)) = (by_id.get(qid.as_str()), corpus.get(did)) else {
                    return Ok(None);
                };
                let input = if oov.contains(qid) {
                    SimInput::build_without_context(q, doc, table, shape)?
                } else {
                    SimInput::build(q, doc, table, shape)?
                };
                Ok(Some((qid.clone(), did.clone(), input)))
            })
            .collect::<Result<_>>()?;
        let mut out = Self {
            oov_queries: oov,
            ..Self::default()
        };
        for (q, d, input) in built.into_iter().flatten() {
            out.insert(&q, &d, input);
        }
        Ok(out)
    }

    /// Judgments restricted to documents that have an input.
    pub fn restrict(&self, judgments: &Judgments) -> Judgments {
        let mut out = Judgments::new();
        for q in judgments.queries() {
            for (d, g) in judgments.for_query(q) {
                if self.get(q, d).is_some() {
                    out.insert(q, d, g);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    /// Upper bound on training iterations.
    pub iterations: usize,
    pub batches_per_iteration: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Label pairs eligible for training.
    pub label_pairs: Vec<LabelPair>,
    /// ERR cutoff used for validation.
    pub eval_cutoff: usize,
    pub grade_scale: GradeScale,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            iterations: 150,
            batches_per_iteration: 32,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            label_pairs: LabelPair::ALL.to_vec(),
            eval_cutoff: 20,
            grade_scale: GradeScale::Merged,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batches_per_iteration == 0 {
            return Err(Error::Config("batch size and batches per iteration must be positive".into()));
        }
        if self.eval_cutoff == 0 {
            return Err(Error::Config("evaluation cutoff must be positive".into()));
        }
        if self.label_pairs.is_empty() {
            return Err(Error::Config("at least one label pair must be enabled".into()));
        }
        let o = self.optimizer;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite())
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || o.epsilon.is_nan()
            || o.epsilon <= 0.0
        {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestEpoch {
    pub epoch: usize,
    pub metric: f64,
    pub params: ModelParams,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    rng: ChaCha8Rng,
    pub best: Option<BestEpoch>,
}

impl TrainState {
    /// Fresh parameters drawn from `train.seed`.
    pub fn new(model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let params = ModelParams::init(model, &mut rng)?;
        Ok(Self::with_params(params, model, train, rng))
    }

    pub fn with_params(
        params: ModelParams,
        model: &ModelConfig,
        train: &TrainConfig,
        rng: ChaCha8Rng,
    ) -> Self {
        Self {
            params,
            optimizer: Adam::new(train.optimizer, model),
            epoch: 0,
            seed: train.seed,
            rng,
            best: None,
        }
    }

    /// Records `metric` for the epoch just finished; strictly better values
    /// replace the kept parameters, so ties keep the earlier epoch.
    pub fn observe(&mut self, metric: f64) {
        if self.best.as_ref().is_none_or(|b| metric > b.metric) {
            self.best = Some(BestEpoch {
                epoch: self.epoch,
                metric,
                params: self.params.clone(),
            });
        }
    }
}

/// Loss of one pair and its parameter gradients. `perm` reorders the feature
/// rows of both documents identically.
pub fn pair_loss_and_grad(
    params: &ModelParams,
    model: &ModelConfig,
    pos: &SimInput,
    neg: &SimInput,
    perm: Option<&[usize]>,
) -> Result<(f64, ModelParams)> {
    let mut graph = Graph::new();
    let nodes = ParamNodes::attach(&mut graph, params);
    let a = score_node(&mut graph, &nodes, pos, model, perm)?;
    let b = score_node(&mut graph, &nodes, neg, model, perm)?;
    let loss = match model.loss {
        LossKind::CrossEntropy => graph.pairwise_ce_loss(a, b)?,
        LossKind::MaxMargin => graph.pairwise_margin_loss(a, b)?,
    };
    graph.backward(loss)?;
    Ok((graph.value(loss).item(), nodes.gradients(&graph)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Runs `batches_per_iteration` batches of freshly sampled pairs, one
/// optimizer step per batch on the batch-mean loss.
pub fn train_epoch(
    state: &mut TrainState,
    sampler: &PairSampler,
    inputs: &InputTable,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<EpochStats> {
    let mut loss_sum = 0.0;
    for batch in 0..train.batches_per_iteration {
        let pairs: Vec<TrainingPair> = (0..train.batch_size)
            .map(|_| sampler.sample(&mut state.rng))
            .collect();
        let perms: Vec<Option<Vec<usize>>> = pairs
            .iter()
            .map(|_| {
                model.components.shuffle.then(|| {
                    let mut p: Vec<usize> = (0..model.query_len).collect();
                    p.shuffle(&mut state.rng);
                    p
                })
            })
            .collect();
        let params = &state.params;
        let results: Vec<(f64, ModelParams)> = pairs
            .par_iter()
            .zip(perms.par_iter())
            .map(|(pair, perm)| {
                let lookup = |doc: &str| {
                    inputs.get(&pair.query_id, doc).ok_or_else(|| {
                        Error::Data(format!("no input for query {} document {doc}", pair.query_id))
                    })
                };
                let pos = lookup(&pair.pos_doc_id)?;
                let neg = lookup(&pair.neg_doc_id)?;
                pair_loss_and_grad(params, model, pos, neg, perm.as_deref())
            })
            .collect::<Result<_>>()?;

        let n = results.len() as f64;
        let mut grads = ModelParams::zeros(model);
        let mut batch_loss = 0.0;
        for (i, (loss, g)) in results.iter().enumerate() {
            if !loss.is_finite() {
                let p = &pairs[i];
                return Err(Error::Numerical(format!(
                    "epoch {} batch {batch}: loss {loss} on query {} ({} over {})",
                    state.epoch + 1,
                    p.query_id,
                    p.pos_doc_id,
                    p.neg_doc_id
                )));
            }
            batch_loss += loss;
            for (acc, t) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                acc.add_assign(t);
            }
        }
        for t in grads.tensors_mut() {
            for v in t.data_mut() {
                *v /= n;
            }
        }
        state.optimizer.step(&mut state.params, &grads);
        loss_sum += batch_loss / n;
    }
    state.epoch += 1;
    Ok(EpochStats {
        epoch: state.epoch,
        mean_loss: loss_sum / train.batches_per_iteration as f64,
    })
}

/// The 1-based epoch with the highest metric, earliest on ties.
pub fn select_epoch(metrics: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &m) in metrics.iter().enumerate() {
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((i, m));
        }
    }
    best.map(|(i, _)| i + 1)
}

/// Re-ranks each candidate list with the model.
pub fn rerank_lists(
    lists: &[RankedList],
    params: &ModelParams,
    model: &ModelConfig,
    inputs: &InputTable,
) -> Result<Vec<RankedList>> {
    lists
        .par_iter()
        .map(|list| {
            let mut scores = HashMap::new();
            for d in list.doc_ids() {
                if let Some(input) = inputs.get(&list.query_id, d) {
                    scores.insert(d.to_string(), score_inference(input, params, model)?);
                }
            }
            Ok(rerank_with_model(list, |d| scores.get(d).copied())?.list)
        })
        .collect()
}

/// Mean ERR over the re-ranked validation candidates.
pub fn validation_err(
    lists: &[RankedList],
    params: &ModelParams,
    model: &ModelConfig,
    inputs: &InputTable,
    judgments: &Judgments,
    train: &TrainConfig,
) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let reranked = rerank_lists(lists, params, model, inputs)?;
    Ok(mean_err(&reranked, judgments, train.grade_scale, train.eval_cutoff))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation_err: f64,
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub best_epoch: usize,
    pub best_metric: f64,
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
}

/// Data one fold trains and validates on.
#[derive(Clone, Copy, Debug)]
pub struct FoldData<'a> {
    pub sampler: &'a PairSampler,
    pub validation: &'a [RankedList],
    pub judgments: &'a Judgments,
    pub inputs: &'a InputTable,
}

/// Trains for `train.iterations` epochs, validating after each, and returns
/// the parameters of the best validation epoch.
pub fn run_fold(
    data: FoldData<'_>,
    model: &ModelConfig,
    train: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FoldResult> {
    model.validate()?;
    train.validate()?;
    if data.validation.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut state = TrainState::new(model, train)?;
    let mut history = Vec::with_capacity(train.iterations);
    for _ in 0..train.iterations {
        let stats = train_epoch(&mut state, data.sampler, data.inputs, model, train)?;
        let metric = validation_err(
            data.validation,
            &state.params,
            model,
            data.inputs,
            data.judgments,
            train,
        )?;
        state.observe(metric);
        let record = EpochRecord {
            epoch: stats.epoch,
            mean_loss: stats.mean_loss,
            validation_err: metric,
        };
        on_epoch(&record);
        history.push(record);
    }
    let best = state
        .best
        .ok_or_else(|| Error::Config("training needs at least one iteration".into()))?;
    Ok(FoldResult {
        best_epoch: best.epoch,
        best_metric: best.metric,
        params: best.params,
        history,
    })
}
