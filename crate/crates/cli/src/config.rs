//! Run configuration: a flat `key = value` file overridden by flags.
//!
//! Recognised keys:
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `embeddings` | word2vec text or binary embedding cache | |
//! | `docs` | directory of `<id>.txt` files or `id<TAB>text` file | |
//! | `queries` | `id<TAB>text` file | |
//! | `qrels` | TREC qrels | |
//! | `run` | TREC run(s), comma separated; candidates to re-rank | |
//! | `checkpoint` | model checkpoint to write (train) or read | |
//! | `output` | run file, report or directory, by command | stdout |
//! | `records` | line-delimited JSON metric records | none |
//! | `log` | line-delimited JSON training log | `<checkpoint>.log.jsonl` |
//! | `cache_dir` | similarity cache (env `COPACRR_CACHE_DIR`) | `.copacrr-cache` |
//! | `groups` | `query_id<TAB>group` file | round-robin into 5 groups |
//! | `validation_group`, `test_group` | held-out groups | last two groups |
//! | `query_len`, `doc_len`, `max_ngram`, `filters`, `top_k`, `cascade_positions`, `context_window` | model dimensions | 16, 800, 3, 32, 3, 4, 4 |
//! | `hidden` | dense layer sizes, comma separated | `16,16` |
//! | `variant` | `PACRR`, `C-PACRR`, ..., `Co-PACRR` | `Co-PACRR` |
//! | `loss` | `cross_entropy` or `max_margin` | `cross_entropy` |
//! | `seed`, `iterations`, `batches_per_iteration`, `batch_size`, `learning_rate` | training | 42, 150, 32, 16, 0.001 |
//! | `label_pairs` | training label pairs, comma separated | all three |
//! | `eval_cutoff` | ERR cutoff | 20 |
//! | `grade_scale` | `merged` or `raw` | `merged` |
//! | `tie_policy` | `incorrect` or `half` | `incorrect` |
//! | `threads` | worker threads, 0 for all cores | 0 |
//! | `synth_kind`, `synth_queries` | `planted` or `ambiguity`; query count | `planted`, 50 |
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys are
//! rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use copacrr::corpus::{GradeScale, LabelPair};
use copacrr::evaluation::TiePolicy;
use copacrr::model::{Components, LossKind, ModelConfig};
use copacrr::training::{AdamConfig, TrainConfig};
use copacrr::{Error, Result};

pub const KEYS: &[&str] = &[
    "embeddings",
    "docs",
    "queries",
    "qrels",
    "run",
    "checkpoint",
    "output",
    "records",
    "log",
    "cache_dir",
    "groups",
    "validation_group",
    "test_group",
    "query_len",
    "doc_len",
    "max_ngram",
    "filters",
    "top_k",
    "cascade_positions",
    "context_window",
    "hidden",
    "variant",
    "loss",
    "seed",
    "iterations",
    "batches_per_iteration",
    "batch_size",
    "learning_rate",
    "label_pairs",
    "eval_cutoff",
    "grade_scale",
    "tie_policy",
    "threads",
    "synth_kind",
    "synth_queries",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Planted,
    Ambiguity,
}

/// Raw key/value settings, later keys overriding earlier ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown configuration key `{key}`")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Parses `key = value` (or `key=value`) assignments.
    pub fn apply_assignment(&mut self, line: &str) -> Result<()> {
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("expected `key = value`, got `{line}`")));
        };
        self.set(k.trim(), v.trim())
    }

    pub fn parse_file_content(&mut self, content: &str, path: &Path) -> Result<()> {
        for (n, line) in content.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply_assignment(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.parse_file_content(&content, path)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        debug_assert!(KEYS.contains(&key), "unregistered key {key}");
        self.values.get(key).map(String::as_str)
    }

    fn parse<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).filter(|v| !v.is_empty()).map(PathBuf::from)
    }
}

/// Fully resolved settings for one invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub embeddings: Option<PathBuf>,
    pub docs: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub runs: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub groups: Option<PathBuf>,
    pub validation_group: Option<String>,
    pub test_group: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tie_policy: TiePolicy,
    pub threads: usize,
    pub synth_kind: SynthKind,
    pub synth_queries: usize,
}

fn list<T: FromStr<Err = Error>>(v: &str) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(T::from_str).collect()
}

impl RunConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let defaults = ModelConfig::default();
        let hidden = match s.get("hidden") {
            None => defaults.hidden.clone(),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|x| !x.is_empty())
                .map(|x| x.parse::<usize>().map_err(|_| Error::Config(format!("`hidden`: bad size `{x}`"))))
                .collect::<Result<_>>()?,
        };
        let components = match s.get("variant") {
            None => defaults.components,
            Some(v) => v.parse::<Components>()?,
        };
        let loss = match s.get("loss") {
            None => defaults.loss,
            Some(v) => v.parse::<LossKind>()?,
        };
        let model = ModelConfig {
            query_len: s.parse("query_len", defaults.query_len)?,
            doc_len: s.parse("doc_len", defaults.doc_len)?,
            max_ngram: s.parse("max_ngram", defaults.max_ngram)?,
            filters: s.parse("filters", defaults.filters)?,
            top_k: s.parse("top_k", defaults.top_k)?,
            cascade_positions: s.parse("cascade_positions", defaults.cascade_positions)?,
            context_window: s.parse("context_window", defaults.context_window)?,
            hidden,
            components,
            loss,
        };
        model.validate()?;

        let td = TrainConfig::default();
        let grade_scale = match s.get("grade_scale") {
            None | Some("merged") => GradeScale::Merged,
            Some("raw") => GradeScale::Raw,
            Some(other) => return Err(Error::Config(format!("`grade_scale`: unknown scale `{other}`"))),
        };
        let train = TrainConfig {
            seed: s.parse("seed", td.seed)?,
            iterations: s.parse("iterations", td.iterations)?,
            batches_per_iteration: s.parse("batches_per_iteration", td.batches_per_iteration)?,
            batch_size: s.parse("batch_size", td.batch_size)?,
            optimizer: AdamConfig {
                learning_rate: s.parse("learning_rate", td.optimizer.learning_rate)?,
                ..td.optimizer
            },
            label_pairs: match s.get("label_pairs") {
                None => td.label_pairs.clone(),
                Some(v) => list::<LabelPair>(v)?,
            },
            eval_cutoff: s.parse("eval_cutoff", td.eval_cutoff)?,
            grade_scale,
        };
        train.validate()?;
        if train.iterations == 0 {
            return Err(Error::Config("`iterations` must be positive".into()));
        }

        let tie_policy = match s.get("tie_policy") {
            None | Some("incorrect") => TiePolicy::Incorrect,
            Some("half") => TiePolicy::Half,
            Some(other) => return Err(Error::Config(format!("`tie_policy`: unknown policy `{other}`"))),
        };
        let synth_kind = match s.get("synth_kind") {
            None | Some("planted") => SynthKind::Planted,
            Some("ambiguity") => SynthKind::Ambiguity,
            Some(other) => return Err(Error::Config(format!("`synth_kind`: unknown kind `{other}`"))),
        };
        Ok(Self {
            embeddings: s.path("embeddings"),
            docs: s.path("docs"),
            queries: s.path("queries"),
            qrels: s.path("qrels"),
            runs: s
                .get("run")
                .map(|v| v.split(',').map(str::trim).filter(|p| !p.is_empty()).map(PathBuf::from).collect())
                .unwrap_or_default(),
            checkpoint: s.path("checkpoint"),
            output: s.path("output"),
            records: s.path("records"),
            log: s.path("log"),
            cache_dir: s.path("cache_dir").unwrap_or_else(|| PathBuf::from(".copacrr-cache")),
            groups: s.path("groups"),
            validation_group: s.get("validation_group").map(str::to_string),
            test_group: s.get("test_group").map(str::to_string),
            model,
            train,
            tie_policy,
            threads: s.parse("threads", 0)?,
            synth_kind,
            synth_queries: s.parse("synth_queries", 50)?,
        })
    }

    /// Returns the path for `key`, or a configuration error naming it.
    pub fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        let path = value
            .as_deref()
            .ok_or_else(|| Error::Config(format!("`{key}` is required for this command")))?;
        if !path.exists() {
            return Err(Error::Data(format!("{key}: {} does not exist", path.display())));
        }
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let mut s = Settings::new();
        s.parse_file_content("# experiment\nseed = 7\nvariant = CD-PACRR\nhidden = 8, 4\n\n", Path::new("x.conf"))
            .unwrap();
        s.apply_assignment("seed=9").unwrap();
        let c = RunConfig::from_settings(&s).unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.model.components, Components::new(true, true, false));
        assert_eq!(c.model.hidden, vec![8, 4]);
        assert_eq!(c.model.doc_len, 800);
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        let mut s = Settings::new();
        let err = s.parse_file_content("seed = 1\nlearnin_rate = 3\n", Path::new("x.conf")).unwrap_err();
        assert!(err.to_string().contains("x.conf:2:"), "{err}");
        assert!(s.apply_assignment("no equals sign").is_err());
        s.set("filters", "many").unwrap();
        assert!(RunConfig::from_settings(&s).is_err());
        let mut s = Settings::new();
        s.set("top_k", "0").unwrap();
        assert!(RunConfig::from_settings(&s).is_err());
    }

    #[test]
    fn lists_parse() {
        let mut s = Settings::new();
        s.set("label_pairs", "HRel-NRel, Rel-NRel").unwrap();
        s.set("run", "a.run,b.run").unwrap();
        let c = RunConfig::from_settings(&s).unwrap();
        assert_eq!(c.train.label_pairs, vec![LabelPair::HRelNRel, LabelPair::RelNRel]);
        assert_eq!(c.runs.len(), 2);
    }
}
