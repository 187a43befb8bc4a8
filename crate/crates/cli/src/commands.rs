//! The subcommands. Each returns the text it reports; files named by
//! `output`/`records`/`log` are written here.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use copacrr::corpus::{
    load_documents, read_qrels, read_queries, read_run, write_run, Corpus, Judgments, LabelPair, Query, RankedList,
};
use copacrr::embedding::{query_vec, EmbeddingTable};
use copacrr::evaluation::{format_table, mean_err, rerank_all_stats, MetricRecord};
use copacrr::experiment::{ablation_columns, ablation_rows, model_pair_accuracy, run_variant, ExperimentData, QuerySplit};
use copacrr::model::{load_checkpoint, save_checkpoint, score_inference, Components, ModelConfig, ModelParams};
use copacrr::synthetic::{ambiguity_doc_len, ambiguous_terms, planted_ngrams, AmbiguityConfig, PlantedConfig};
use copacrr::training::{rerank_lists, InputTable};
use copacrr::{Error, Result};

use crate::cache::{content_hash, CacheStats, SimCache};
use crate::config::{RunConfig, SynthKind};

const GROUPS: usize = 5;

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn write_records(cfg: &RunConfig, records: &[MetricRecord]) -> Result<()> {
    if let Some(path) = &cfg.records {
        let text: String = records.iter().map(|r| r.to_json_line() + "\n").collect();
        write_file(path, &text)?;
    }
    Ok(())
}

/// Text output goes to `output` when set; the caller prints it otherwise.
fn emit(cfg: &RunConfig, text: String) -> Result<String> {
    if let Some(path) = &cfg.output {
        write_file(path, &text)?;
    }
    Ok(text)
}

fn run_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Everything loaded from disk for one invocation.
struct Loaded {
    corpus: Corpus,
    queries: Vec<Query>,
    table: EmbeddingTable,
    embeddings_hash: String,
}

fn load_inputs(cfg: &RunConfig) -> Result<Loaded> {
    let emb_path = cfg.require(&cfg.embeddings, "embeddings")?;
    let bytes = fs::read(emb_path).map_err(|e| Error::io(emb_path, e))?;
    let embeddings_hash = content_hash(&bytes);
    let table = EmbeddingTable::load(emb_path)?;
    let corpus = Corpus::new(load_documents(cfg.require(&cfg.docs, "docs")?)?)?;
    let mut queries = Vec::new();
    for (id, text) in read_queries(cfg.require(&cfg.queries, "queries")?)? {
        queries.push(corpus.query(id, &text)?);
    }
    log::info!(
        "loaded {} documents, {} queries, {} embeddings",
        corpus.len(),
        queries.len(),
        table.len()
    );
    Ok(Loaded {
        corpus,
        queries,
        table,
        embeddings_hash,
    })
}

fn load_runs(cfg: &RunConfig) -> Result<Vec<(String, Vec<RankedList>)>> {
    cfg.runs
        .iter()
        .map(|p| {
            if !p.exists() {
                return Err(Error::Data(format!("run: {} does not exist", p.display())));
            }
            Ok((run_name(p), read_run(p)?))
        })
        .collect()
}

/// Builds inputs for `pairs` through the cache. Returns the table, the cache
/// counters and the ids of all-OOV queries.
fn build_cached(
    cfg: &RunConfig,
    model: &ModelConfig,
    data: &Loaded,
    pairs: &[(String, String)],
) -> Result<(InputTable, CacheStats, Vec<String>)> {
    let cache = SimCache::new(&cfg.cache_dir, data.embeddings_hash.clone())?;
    let by_id: HashMap<&str, &Query> = data.queries.iter().map(|q| (q.query_id.as_str(), q)).collect();
    let oov: BTreeSet<String> = data
        .queries
        .iter()
        .filter(|q| matches!(query_vec(q, &data.table), Err(Error::OovQuery { .. })))
        .map(|q| q.query_id.clone())
        .collect();
    for q in &oov {
        log::warn!("query {q}: every term is out of vocabulary; context signal set to zero");
    }
    let shape = model.input_shape();
    let mut missing_docs = 0usize;
    let work: Vec<(&Query, &copacrr::corpus::Document)> = pairs
        .iter()
        .filter_map(|(q, d)| {
            let query = by_id.get(q.as_str())?;
            match data.corpus.get(d) {
                Some(doc) => Some((*query, doc)),
                None => {
                    missing_docs += 1;
                    None
                }
            }
        })
        .collect();
    if missing_docs > 0 {
        log::warn!("{missing_docs} judged or candidate documents are not in the corpus");
    }
    let built: Vec<_> = work
        .par_iter()
        .map(|(q, d)| {
            let input = cache.input(q, d, &data.table, shape, oov.contains(&q.query_id))?;
            Ok((q.query_id.clone(), d.doc_id.clone(), input))
        })
        .collect::<Result<_>>()?;
    let mut table = InputTable::new();
    for (q, d, input) in built {
        table.insert(&q, &d, input);
    }
    Ok((table, cache.stats(), oov.into_iter().collect()))
}

/// Judged pairs plus every run candidate, deduplicated, in a fixed order.
fn all_pairs(judgments: Option<&Judgments>, runs: &[(String, Vec<RankedList>)]) -> Vec<(String, String)> {
    let mut set = BTreeSet::new();
    if let Some(j) = judgments {
        for q in j.queries() {
            for (d, _) in j.for_query(q) {
                set.insert((q.to_string(), d.to_string()));
            }
        }
    }
    for (_, lists) in runs {
        for l in lists {
            for d in l.doc_ids() {
                set.insert((l.query_id.clone(), d.to_string()));
            }
        }
    }
    set.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrepareReport {
    pub pairs: usize,
    pub stats: CacheStats,
    pub oov_queries: Vec<String>,
}

pub fn cmd_prepare(cfg: &RunConfig) -> Result<(PrepareReport, String)> {
    let data = load_inputs(cfg)?;
    let judgments = match &cfg.qrels {
        Some(_) => Some(read_qrels(cfg.require(&cfg.qrels, "qrels")?)?),
        None => None,
    };
    let runs = load_runs(cfg)?;
    if judgments.is_none() && runs.is_empty() {
        return Err(Error::Config("prepare needs `qrels` or `run`".into()));
    }
    let pairs = all_pairs(judgments.as_ref(), &runs);
    let (table, stats, oov) = build_cached(cfg, &cfg.model, &data, &pairs)?;
    let mut text = format!(
        "prepared {} inputs ({} from cache, {} computed)\n",
        table.len(),
        stats.input_hits,
        stats.inputs - stats.input_hits
    );
    for q in &oov {
        text.push_str(&format!("query {q}: all terms out of vocabulary\n"));
    }
    let report = PrepareReport {
        pairs: table.len(),
        stats,
        oov_queries: oov,
    };
    Ok((report, emit(cfg, text)?))
}

/// Query ids with judgments, each assigned to a group.
fn query_groups(cfg: &RunConfig, judgments: &Judgments, queries: &[Query]) -> Result<BTreeMap<String, String>> {
    let known: BTreeSet<&str> = queries.iter().map(|q| q.query_id.as_str()).collect();
    let judged: Vec<String> = judgments
        .queries()
        .filter(|q| known.contains(q))
        .map(str::to_string)
        .collect();
    let mut groups = BTreeMap::new();
    match &cfg.groups {
        Some(_) => {
            let path = cfg.require(&cfg.groups, "groups")?;
            let assigned: HashMap<String, String> = read_queries(path)?
                .into_iter()
                .map(|(q, g)| (q, g.trim().to_string()))
                .collect();
            for q in judged {
                if let Some(g) = assigned.get(&q) {
                    groups.insert(q, g.clone());
                }
            }
        }
        None => {
            for (i, q) in judged.into_iter().enumerate() {
                groups.insert(q, format!("g{}", i % GROUPS));
            }
        }
    }
    Ok(groups)
}

fn make_split(cfg: &RunConfig, groups: &BTreeMap<String, String>) -> Result<QuerySplit> {
    let names: Vec<&String> = groups.values().collect::<BTreeSet<_>>().into_iter().collect();
    if names.len() < 3 {
        return Err(Error::Config(format!(
            "need at least 3 query groups for train/validation/test, found {}",
            names.len()
        )));
    }
    let test = cfg.test_group.clone().unwrap_or_else(|| names[names.len() - 1].clone());
    let validation = cfg
        .validation_group
        .clone()
        .unwrap_or_else(|| names[names.len() - 2].clone());
    if test == validation {
        return Err(Error::Config("validation and test groups must differ".into()));
    }
    for g in [&test, &validation] {
        if !names.contains(&g) {
            return Err(Error::Config(format!("query group `{g}` does not exist")));
        }
    }
    let pick = |f: &dyn Fn(&str) -> bool| -> Vec<String> {
        groups.iter().filter(|(_, g)| f(g)).map(|(q, _)| q.clone()).collect()
    };
    let split = QuerySplit {
        train: pick(&|g| g != test && g != validation),
        validation: pick(&|g| g == validation),
        test: pick(&|g| g == test),
    };
    split.validate()?;
    Ok(split)
}

/// Candidate lists: the given runs, or every judged document per query in
/// document-id order.
fn candidates(runs: &[(String, Vec<RankedList>)], judgments: &Judgments) -> Result<Vec<RankedList>> {
    if let Some((_, lists)) = runs.first() {
        return Ok(lists.clone());
    }
    judgments
        .queries()
        .map(|q| {
            let docs: Vec<(String, f64)> = judgments.for_query(q).map(|(d, _)| (d.to_string(), 0.0)).collect();
            RankedList::from_scored(q, docs)
        })
        .collect()
}

struct Experiment {
    judgments: Judgments,
    inputs: InputTable,
    candidates: Vec<RankedList>,
    split: QuerySplit,
}

fn prepare_experiment(cfg: &RunConfig) -> Result<Experiment> {
    let data = load_inputs(cfg)?;
    let judgments = read_qrels(cfg.require(&cfg.qrels, "qrels")?)?;
    let runs = load_runs(cfg)?;
    let groups = query_groups(cfg, &judgments, &data.queries)?;
    let split = make_split(cfg, &groups)?;
    log::info!(
        "split: {} train, {} validation, {} test queries",
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    let candidates = candidates(&runs, &judgments)?;
    let pairs = all_pairs(Some(&judgments), &runs[..runs.len().min(1)]);
    let (inputs, _, _) = build_cached(cfg, &cfg.model, &data, &pairs)?;
    Ok(Experiment {
        judgments,
        inputs,
        candidates,
        split,
    })
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let checkpoint = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("`checkpoint` is required for train".into()))?;
    let exp = prepare_experiment(cfg)?;
    let data = ExperimentData {
        judgments: &exp.judgments,
        inputs: &exp.inputs,
        candidates: &exp.candidates,
    };
    let mut log_lines = String::new();
    let result = run_variant(data, &exp.split, &cfg.model, &cfg.train, |r| {
        log::info!(
            "epoch {} loss {:.6} validation ERR@{} {:.4}",
            r.epoch,
            r.mean_loss,
            cfg.train.eval_cutoff,
            r.validation_err
        );
        log_lines.push_str(&serde_json::to_string(r).expect("plain record serializes"));
        log_lines.push('\n');
    })?;
    save_checkpoint(&checkpoint, &cfg.model, &result.params)?;
    let log_path = cfg.log.clone().unwrap_or_else(|| {
        let mut p = checkpoint.clone().into_os_string();
        p.push(".log.jsonl");
        p.into()
    });
    write_file(&log_path, &log_lines)?;
    let name = cfg.model.components.name();
    let mut records = vec![
        MetricRecord::new(&name, "best_epoch", result.best_epoch as f64),
        MetricRecord::new(&name, format!("validation_err@{}", cfg.train.eval_cutoff), result.validation_err),
    ];
    let mut text = format!(
        "{name}: best epoch {} of {}, validation ERR@{} {:.4}\n",
        result.best_epoch, cfg.train.iterations, cfg.train.eval_cutoff, result.validation_err
    );
    if !exp.split.test.is_empty() {
        text.push_str(&format!(
            "test ERR@{} {:.4}, test pair accuracy {:.4}\n",
            cfg.train.eval_cutoff,
            result.test_err,
            result.test_pairs.overall()
        ));
        records.push(MetricRecord::new(&name, format!("test_err@{}", cfg.train.eval_cutoff), result.test_err));
        for p in LabelPair::ALL {
            let c = result.test_pairs.counts(p);
            records.push(MetricRecord::new(&name, format!("test_pair_accuracy:{p}"), result.test_pairs.accuracy(p)).with_count(c.tested));
        }
    }
    write_records(cfg, &records)?;
    Ok(text)
}

fn load_model(cfg: &RunConfig) -> Result<(ModelConfig, ModelParams)> {
    load_checkpoint(cfg.require(&cfg.checkpoint, "checkpoint")?)
}

pub fn cmd_rerank(cfg: &RunConfig) -> Result<String> {
    let output = cfg
        .output
        .clone()
        .ok_or_else(|| Error::Config("`output` is required for rerank".into()))?;
    let (model, params) = load_model(cfg)?;
    let runs = load_runs(cfg)?;
    let [(_, lists)] = runs.as_slice() else {
        return Err(Error::Config("rerank needs exactly one `run`".into()));
    };
    let data = load_inputs(cfg)?;
    let pairs = all_pairs(None, &runs);
    let (inputs, _, _) = build_cached(cfg, &model, &data, &pairs)?;
    let reranked = rerank_lists(lists, &params, &model, &inputs)?;
    write_run(&reranked, &output, "copacrr")?;
    Ok(format!("re-ranked {} queries into {}\n", reranked.len(), output.display()))
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    let judgments = read_qrels(cfg.require(&cfg.qrels, "qrels")?)?;
    let runs = load_runs(cfg)?;
    if runs.is_empty() {
        return Err(Error::Config("eval needs at least one `run`".into()));
    }
    let k = cfg.train.eval_cutoff;
    let scale = cfg.train.grade_scale;
    let metric = format!("ERR@{k}");
    let mut records = Vec::new();
    let mut header = vec!["run".to_string(), "queries".to_string(), metric.clone()];
    let mut rows: Vec<Vec<String>> = runs
        .iter()
        .map(|(name, lists)| {
            let err = mean_err(lists, &judgments, scale, k);
            records.push(MetricRecord::new(name, format!("err@{k}"), err).with_count(lists.len() as u64));
            vec![name.clone(), lists.len().to_string(), format!("{err:.4}")]
        })
        .collect();
    let mut text = String::new();
    if cfg.checkpoint.is_some() {
        let (model, params) = load_model(cfg)?;
        let data = load_inputs(cfg)?;
        let pairs = all_pairs(Some(&judgments), &runs);
        let (inputs, _, _) = build_cached(cfg, &model, &data, &pairs)?;
        let score = |q: &str, d: &str| inputs.get(q, d).and_then(|i| score_inference(i, &params, &model).ok());
        let stats = rerank_all_stats(&runs, score, &judgments, scale, k)?;
        header.push(format!("re-ranked {metric}"));
        for (row, delta) in rows.iter_mut().zip(&stats.runs) {
            row.push(format!("{:.4}", delta.after));
            records.push(MetricRecord::new(&delta.run, format!("reranked_err@{k}"), delta.after));
        }
        text.push_str(&format_table(&header, &rows));
        text.push_str(&format!(
            "\nimproved runs {:.4}, mean relative change {:+.4}",
            stats.improved_fraction, stats.mean_relative_delta
        ));
        if stats.zero_baseline_runs > 0 {
            text.push_str(&format!(" ({} runs with zero baseline excluded)", stats.zero_baseline_runs));
        }
        text.push('\n');
        records.push(MetricRecord::new("all", "improved_fraction", stats.improved_fraction).with_count(runs.len() as u64));
        records.push(MetricRecord::new("all", "mean_relative_delta", stats.mean_relative_delta));

        let queries: Vec<String> = judgments.queries().map(str::to_string).collect();
        let report = model_pair_accuracy(&params, &model, &judgments, &inputs, &queries, cfg.tie_policy)?;
        let pair_rows: Vec<Vec<String>> = LabelPair::ALL
            .iter()
            .map(|&p| {
                let c = report.counts(p);
                records.push(MetricRecord::new("model", format!("pair_accuracy:{p}"), report.accuracy(p)).with_count(c.tested));
                vec![p.to_string(), c.tested.to_string(), c.ties.to_string(), format!("{:.4}", report.accuracy(p))]
            })
            .collect();
        text.push('\n');
        text.push_str(&format_table(
            &["label pair".into(), "pairs".into(), "ties".into(), "accuracy".into()],
            &pair_rows,
        ));
    } else {
        text.push_str(&format_table(&header, &rows));
    }
    write_records(cfg, &records)?;
    emit(cfg, text)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<String> {
    let exp = prepare_experiment(cfg)?;
    let data = ExperimentData {
        judgments: &exp.judgments,
        inputs: &exp.inputs,
        candidates: &exp.candidates,
    };
    let mut results = Vec::new();
    for variant in Components::all_variants() {
        let model = ModelConfig {
            components: variant,
            ..cfg.model.clone()
        };
        log::info!("training {}", variant.name());
        results.push(run_variant(data, &exp.split, &model, &cfg.train, |_| {})?);
    }
    let mut header = vec!["metric".to_string()];
    header.extend(ablation_columns());
    let rows = ablation_rows(&results);
    let mut records = Vec::new();
    for r in &results {
        let name = r.variant.name();
        records.push(MetricRecord::new(&name, "validation_err", r.validation_err));
        records.push(MetricRecord::new(&name, "test_err", r.test_err));
        for p in LabelPair::ALL {
            records.push(MetricRecord::new(&name, format!("test_pair_accuracy:{p}"), r.test_pairs.accuracy(p)).with_count(r.test_pairs.counts(p).tested));
        }
    }
    write_records(cfg, &records)?;
    emit(cfg, format_table(&header, &rows))
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    let dir = cfg
        .output
        .clone()
        .ok_or_else(|| Error::Config("`output` directory is required for synth".into()))?;
    let seed = cfg.train.seed;
    let (collection, doc_len, query_len) = match cfg.synth_kind {
        SynthKind::Planted => {
            let c = PlantedConfig {
                queries: cfg.synth_queries,
                ..PlantedConfig::default()
            };
            (planted_ngrams(&c, seed)?, c.doc_len, c.terms_per_query)
        }
        SynthKind::Ambiguity => {
            let c = AmbiguityConfig {
                queries: cfg.synth_queries,
                ..AmbiguityConfig::default()
            };
            (ambiguous_terms(&c, seed)?, ambiguity_doc_len(&c), 2)
        }
    };
    collection.write_to_dir(&dir)?;
    Ok(format!(
        "wrote {} queries and {} documents to {} (documents have {doc_len} tokens, queries {query_len} terms)\n",
        collection.queries.len(),
        collection.corpus.len(),
        dir.display()
    ))
}
