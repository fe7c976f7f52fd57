//! Command implementations behind the `topicsel` binary.

pub mod chat;

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use topicsel::checkpoint::Checkpoint;
use topicsel::config::KeyValues;
use topicsel::corpus::{load_corpus, split_corpus, write_corpus, Corpus, Splits};
use topicsel::evalsuite::ablation::{ablation_csv, run_ablation, sweep, sweep_csv, AblationSpec, Grid};
use topicsel::evalsuite::{evaluate, EvalOptions, MetricReport};
use topicsel::model::Variant;
use topicsel::synthgen::{generate_world, WorldSpec};
use topicsel::training::{prepare_split, train, TrainConfig, TrainOptions};
use topicsel::Error;

use chat::ChatSession;

pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// A failure with its process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    /// 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e {
                Error::Invalid(_) | Error::Parse { .. } => 1,
                Error::Io { .. } | Error::Data(_) | Error::Json(_) => 2,
                Error::Numeric(_) => 3,
            },
        }
    }

    /// The reason on one line.
    pub fn line(&self) -> String {
        let text = match self {
            CliError::Usage(m) => format!("usage: {m}"),
            CliError::Core(e) => e.to_string(),
        };
        text.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Settings shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub sets: Vec<String>,
}

impl Common {
    /// Config file entries overridden by `--set` pairs.
    pub fn key_values(&self) -> CliResult<KeyValues> {
        let mut kv = match &self.config {
            Some(p) => KeyValues::read(p)?,
            None => KeyValues::new(),
        };
        for s in &self.sets {
            let (k, v) = KeyValues::parse_override(s)?;
            kv.set(&k, &v);
        }
        Ok(kv)
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let mut cfg = TrainConfig::default();
        cfg.apply(&self.key_values()?)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> CliResult<&Path> {
        fs::create_dir_all(&self.out).map_err(|e| Error::Io {
            path: self.out.clone(),
            source: e,
        })?;
        Ok(&self.out)
    }
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn load_splits(data: &Path, cfg: &TrainConfig) -> CliResult<(Corpus, Splits)> {
    let (corpus, _) = load_corpus(data)?;
    let splits = split_corpus(&corpus, cfg.train_frac, cfg.valid_frac, cfg.seed)?;
    Ok((corpus, splits))
}

/// Writes `corpus.jsonl` and `ground_truth.json`; returns their paths.
pub fn cmd_gen_data(common: &Common) -> CliResult<(PathBuf, PathBuf)> {
    let mut spec = WorldSpec::default();
    spec.apply(&common.key_values()?)?;
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    let (corpus, truth) = generate_world(&spec)?;
    let dir = common.out_dir()?;
    let corpus_path = dir.join("corpus.jsonl");
    let truth_path = dir.join("ground_truth.json");
    write_corpus(&corpus, &corpus_path)?;
    truth.write(&truth_path)?;
    log::info!(
        "{} dialogues, {} users, {} topics",
        corpus.dialogues.len(),
        corpus.users.len(),
        corpus.topics.len()
    );
    Ok((corpus_path, truth_path))
}

/// Trains, writes the checkpoint and logs; returns the best validation report.
pub fn cmd_train(common: &Common, data: &Path) -> CliResult<MetricReport> {
    let cfg = common.train_config()?;
    let (_, splits) = load_splits(data, &cfg)?;
    let dir = common.out_dir()?;
    let opts = TrainOptions {
        log_csv: Some(dir.join("train_log.csv")),
        topic_sets_csv: Some(dir.join("topic_sets.csv")),
        ..Default::default()
    };
    let outcome = train(&splits, &cfg, &opts)?;
    let report = outcome.state.best.clone().expect("training records the best epoch");
    let ckpt = Checkpoint {
        train: cfg,
        state: outcome.state,
    };
    ckpt.save(dir.join(CHECKPOINT_FILE))?;
    report.write_json(dir.join("valid_metrics.json"))?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(SplitName::Train),
            "valid" => Ok(SplitName::Valid),
            "test" => Ok(SplitName::Test),
            _ => Err(format!("unknown split {s:?} (train, valid or test)")),
        }
    }
}

/// Scores a checkpoint on one split of `data`, writing metrics and generations.
pub fn cmd_eval(common: &Common, checkpoint: &Path, data: &Path, split: SplitName) -> CliResult<MetricReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = &ckpt.state.model;
    let (corpus, splits) = load_splits(data, &ckpt.train)?;
    model.check_corpus(&corpus)?;
    let part = match split {
        SplitName::Train => &splits.train,
        SplitName::Valid => &splits.valid,
        SplitName::Test => &splits.test,
    };
    let examples = prepare_split(model, part, ckpt.train.history);
    let opts = EvalOptions {
        seed: common.seed.unwrap_or(ckpt.train.seed),
        ..Default::default()
    };
    let mut report = evaluate(model, &examples, &opts)?;
    report.variant = model.config.variant.name().to_string();
    report.check()?;
    let dir = common.out_dir()?;
    report.write_json(dir.join("metrics.json"))?;
    report.write_generations(dir.join("generations.jsonl"))?;
    Ok(report)
}

/// Variant names, or every variant for `all`.
pub fn parse_variants(s: &str) -> CliResult<Vec<Variant>> {
    if s == "all" {
        return Ok(Variant::ALL.to_vec());
    }
    s.split(',')
        .map(|v| v.trim().parse::<Variant>().map_err(CliError::from))
        .collect()
}

/// One trained run per variant; writes `ablation.csv` and per-variant JSON.
pub fn cmd_ablate(common: &Common, data: &Path, variants: &[Variant]) -> CliResult<Vec<MetricReport>> {
    let cfg = common.train_config()?;
    let (_, splits) = load_splits(data, &cfg)?;
    let dir = common.out_dir()?.to_path_buf();
    let eval = EvalOptions::default();
    let mut reports = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut report = run_ablation(&AblationSpec::new(v), &splits, &cfg, &eval)?;
        report.write_json(dir.join(format!("ablation_{}.json", v.name())))?;
        report.records.clear();
        reports.push(report);
        write(&dir.join("ablation.csv"), &ablation_csv(&reports))?;
    }
    Ok(reports)
}

pub fn cmd_sweep(common: &Common, data: &Path, grid: &Grid) -> CliResult<String> {
    let cfg = common.train_config()?;
    let (_, splits) = load_splits(data, &cfg)?;
    let rows = sweep(grid, &splits, &cfg, &EvalOptions::default())?;
    let csv = sweep_csv(&rows);
    write(&common.out_dir()?.join("sweep.csv"), &csv)?;
    Ok(csv)
}

/// Runs the REPL over `input`; the transcript goes to `transcript.jsonl`.
pub fn cmd_chat(
    common: &Common,
    checkpoint: &Path,
    data: Option<&Path>,
    user: usize,
    input: impl BufRead,
    output: impl Write,
) -> CliResult<PathBuf> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = &ckpt.state.model;
    if let Some(d) = data {
        let (corpus, _) = load_corpus(d)?;
        model.check_corpus(&corpus)?;
    }
    let seed = common.seed.unwrap_or(ckpt.train.seed);
    let mut session = ChatSession::new(model, user, ckpt.train.history, seed)?;
    session.run(input, output)?;
    let path = common.out_dir()?.join("transcript.jsonl");
    write(&path, &session.transcript_jsonl()?)?;
    Ok(path)
}
