//! Command-line front end: configuration, the similarity cache and the
//! subcommands.

pub mod cache;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use copacrr::{Error, ErrorKind, Result};

use config::{RunConfig, Settings};

#[derive(Debug, Parser)]
#[command(name = "copacrr", version, about = "Neural re-ranking of ad-hoc retrieval runs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute and cache similarity inputs for judged and candidate pairs.
    Prepare,
    /// Train a model and write a checkpoint.
    Train,
    /// Re-rank one run with a trained checkpoint.
    Rerank,
    /// Report ERR for runs, and re-ranking gains and pair accuracy when a
    /// checkpoint is given.
    Eval,
    /// Train all eight component variants on the same split and seed.
    Ablate,
    /// Write a synthetic collection to the output directory.
    Synth,
}

#[derive(Debug, Default, Args)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, env = "COPACRR_CACHE_DIR", global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Worker threads, 0 for all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(short, long, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, global = true)]
    pub docs: Option<PathBuf>,
    #[arg(long, global = true)]
    pub queries: Option<PathBuf>,
    #[arg(long, global = true)]
    pub qrels: Option<PathBuf>,
    /// Run file; repeatable.
    #[arg(long = "run", global = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub records: Option<PathBuf>,
    #[arg(long, global = true)]
    pub variant: Option<String>,
}

fn path_str(p: &std::path::Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Config file, then `--set`, then dedicated flags.
pub fn resolve(common: &Common) -> Result<RunConfig> {
    let mut s = Settings::new();
    if let Some(path) = &common.config {
        s.load_file(path)?;
    }
    for a in &common.set {
        s.apply_assignment(a)?;
    }
    let paths = [
        ("cache_dir", &common.cache_dir),
        ("output", &common.output),
        ("embeddings", &common.embeddings),
        ("docs", &common.docs),
        ("queries", &common.queries),
        ("qrels", &common.qrels),
        ("checkpoint", &common.checkpoint),
        ("records", &common.records),
    ];
    for (key, value) in paths {
        if let Some(p) = value {
            s.set(key, path_str(p))?;
        }
    }
    if !common.runs.is_empty() {
        let joined: Vec<String> = common.runs.iter().map(|p| path_str(p)).collect();
        s.set("run", joined.join(","))?;
    }
    if let Some(t) = common.threads {
        s.set("threads", t.to_string())?;
    }
    if let Some(seed) = common.seed {
        s.set("seed", seed.to_string())?;
    }
    if let Some(v) = &common.variant {
        s.set("variant", v.clone())?;
    }
    RunConfig::from_settings(&s)
}

/// Runs one command and returns its report text.
pub fn execute(command: &Command, cfg: &RunConfig) -> Result<String> {
    match command {
        Command::Prepare => commands::cmd_prepare(cfg).map(|(_, text)| text),
        Command::Train => commands::cmd_train(cfg),
        Command::Rerank => commands::cmd_rerank(cfg),
        Command::Eval => commands::cmd_eval(cfg),
        Command::Ablate => commands::cmd_ablate(cfg),
        Command::Synth => commands::cmd_synth(cfg),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = resolve(&cli.common).and_then(|cfg| {
        if cfg.threads > 0 {
            // Fails only if a pool already exists, which is harmless.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
        }
        // Reports written to `output` are not echoed.
        let echo = cfg.output.is_none() || matches!(cli.command, Command::Rerank | Command::Synth);
        execute(&cli.command, &cfg).map(|text| (text, echo))
    });
    match result {
        Ok((text, echo)) => {
            if echo {
                print!("{text}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
