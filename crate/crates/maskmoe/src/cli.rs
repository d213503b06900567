//! Subcommand front end over the library pipeline: `analyze`,
//! `build-masks`, `train`, `eval`, `compare`, `report`.
//!
//! Run configuration lives in a flat `key=value` text file. Lines whose
//! first non-blank character is `#` are comments; unknown keys are
//! rejected. Keys mirror the [`RunConfig`] fields plus the paths
//! `corpus`, `eval_corpus`, and `out_dir` (relative paths resolve against
//! the working directory). Every training run writes its fully resolved
//! config, vocabulary, frequency table, split, and mask table into the
//! run directory, so any artifact can be traced back to the exact setup
//! that produced it.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

use crate::autograd::Scalar;
use crate::checkpoint::{self, NO_MASK_DIGEST};
use crate::config::{Architecture, DtypeChoice, Placement, RunConfig};
use crate::corpus::{
    build_vocab, count_frequencies, encode_corpus, split_by_coverage, FreqTable, FrequencySplit,
    Vocab,
};
use crate::error::{Error, Result};
use crate::maskgen::{build_mask_table, MaskConfig, MaskTable};
use crate::metrics::{evaluate, fluctuation, EvalStats, FluctuationStats};
use crate::model::{init_params, ModelDims, ModelParams};
use crate::optim::{AdamW, ADAM_EPS};
use crate::train::{read_routing_log, train, TrainArtifacts, TrainOptions};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Map an error to the process exit code: validation and argument
/// problems are usage errors (2), everything else is a runtime failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Run { source, .. } => exit_code(source),
        _ => EXIT_RUNTIME,
    }
}

#[derive(Debug, Parser)]
#[command(name = "maskmoe", about = "Frequency-masked mixture-of-experts language-model lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize a corpus and write vocabulary, frequencies, and the
    /// frequent/infrequent split
    Analyze(AnalyzeArgs),
    /// Build a per-token expert-visibility mask table from a split file
    BuildMasks(BuildMasksArgs),
    /// Train one run from a key=value config file
    Train(TrainArgs),
    /// Evaluate a finished run directory on a corpus
    Eval(EvalArgs),
    /// Train several configs and print a side-by-side table
    Compare(CompareArgs),
    /// Summarize a finished run directory into report.json + counts.csv
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Corpus text file
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory for vocab.txt, freq.tsv, split.tsv
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Vocabulary cap (specials included)
    #[arg(long, default_value_t = 8192)]
    pub max_vocab: usize,
    /// Coverage fraction P deciding the frequent class
    #[arg(long, default_value_t = 0.4)]
    pub coverage: f64,
}

#[derive(Debug, Args)]
pub struct BuildMasksArgs {
    /// Split file from `analyze`
    #[arg(long)]
    pub split: PathBuf,
    /// Output mask table (JSON lines)
    #[arg(long)]
    pub out: PathBuf,
    /// Number of experts N
    #[arg(long)]
    pub experts: usize,
    /// Visible experts for frequent tokens
    #[arg(long, default_value_t = 8)]
    pub va: usize,
    /// Visible experts for infrequent tokens
    #[arg(long, default_value_t = 1)]
    pub vb: usize,
    /// Mask sampling seed
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key=value run config
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's corpus path
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Override the config's out_dir
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Continue from out_dir/model.ckpt
    #[arg(long)]
    pub resume: bool,
    /// Stop this session after at most this many steps
    #[arg(long)]
    pub session_steps: Option<usize>,
    /// Force the always-on shared expert on
    #[arg(long, conflicts_with = "no_shared_expert")]
    pub shared_expert: bool,
    /// Force the always-on shared expert off
    #[arg(long)]
    pub no_shared_expert: bool,
    /// Skip the post-training evaluation pass
    #[arg(long)]
    pub no_eval: bool,
    /// Suppress per-step progress output
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory holding config.json, vocab.txt, model.ckpt, ...
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Corpus to score (tokenized with the run's vocabulary)
    #[arg(long)]
    pub corpus: PathBuf,
    /// Where to write the stats (default: run_dir/eval.json)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// key=value config files, one run each
    #[arg(required = true)]
    pub configs: Vec<PathBuf>,
    /// Base directory for the runs (default: each config's own out_dir)
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Suppress per-step progress output
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory holding eval.json and routing.jsonl
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Where to write report.json (default: run_dir/report.json)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A parsed config file: the run parameters plus the pipeline paths.
#[derive(Debug, Clone)]
pub struct FileConfig {
    pub run: RunConfig,
    pub corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

pub fn parse_config(path: &Path) -> Result<FileConfig> {
    if !path.exists() {
        return Err(Error::InvalidArgument(format!(
            "config not found: {}",
            path.display()
        )));
    }
    parse_config_str(&std::fs::read_to_string(path)?)
}

fn config_err(line_no: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("config line {line_no}: {msg}"))
}

/// Parse the flat key=value config format. `#` lines are comments; every
/// key may appear once; unknown keys are errors.
pub fn parse_config_str(text: &str) -> Result<FileConfig> {
    let mut pairs: Vec<(usize, String, String)> = Vec::new();
    let mut seen: std::collections::BTreeSet<String> = Default::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| config_err(line_no, format!("expected key=value, got {line:?}")))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(config_err(line_no, "empty key or value"));
        }
        if !seen.insert(key.clone()) {
            return Err(config_err(line_no, format!("duplicate key {key:?}")));
        }
        pairs.push((line_no, key, value));
    }

    let arch: Architecture = pairs
        .iter()
        .find(|(_, k, _)| k == "arch")
        .ok_or_else(|| Error::Config("config must set arch=...".into()))?
        .2
        .parse()
        .map_err(|e| Error::Config(format!("bad arch: {e}")))?;

    let mut fc = FileConfig {
        run: RunConfig::new(arch),
        corpus: None,
        eval_corpus: None,
        out_dir: None,
    };
    fn num<T: std::str::FromStr>(line_no: usize, key: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| config_err(line_no, format!("bad value {v:?} for {key}")))
    }
    for (line_no, key, v) in &pairs {
        let (n, k, v) = (*line_no, key.as_str(), v.as_str());
        let cfg = &mut fc.run;
        match k {
            "arch" => {}
            "seed" => cfg.seed = num(n, k, v)?,
            "dtype" => {
                cfg.dtype = match v {
                    "f32" => DtypeChoice::F32,
                    "f64" => DtypeChoice::F64,
                    _ => return Err(config_err(n, format!("bad dtype {v:?} (f32|f64)"))),
                }
            }
            "max_vocab" => cfg.max_vocab = num(n, k, v)?,
            "d_model" => cfg.d_model = num(n, k, v)?,
            "n_heads" => cfg.n_heads = num(n, k, v)?,
            "n_layers" => cfg.n_layers = num(n, k, v)?,
            "d_ff" => cfg.d_ff = num(n, k, v)?,
            "n_experts" => cfg.n_experts = num(n, k, v)?,
            "top_k" => cfg.top_k = num(n, k, v)?,
            "placement" => {
                cfg.placement = v
                    .parse::<Placement>()
                    .map_err(|e| config_err(n, e.to_string()))?
            }
            "shared_expert" => cfg.shared_expert = Some(num::<bool>(n, k, v)?),
            "coverage_p" => cfg.coverage_p = num(n, k, v)?,
            "v_a" => cfg.v_a = num(n, k, v)?,
            "v_b" => cfg.v_b = num(n, k, v)?,
            "mask_seed" => cfg.mask_seed = num(n, k, v)?,
            "seq_len" => cfg.seq_len = num(n, k, v)?,
            "batch_seqs" => cfg.batch_seqs = num(n, k, v)?,
            "steps" => cfg.steps = num(n, k, v)?,
            "lr_peak" => cfg.lr_peak = num(n, k, v)?,
            "lr_min_ratio" => cfg.lr_min_ratio = num(n, k, v)?,
            "weight_decay" => cfg.weight_decay = num(n, k, v)?,
            "beta1" => cfg.beta1 = num(n, k, v)?,
            "beta2" => cfg.beta2 = num(n, k, v)?,
            "grad_clip" => cfg.grad_clip = num(n, k, v)?,
            "log_every" => cfg.log_every = num(n, k, v)?,
            "checkpoint_every" => cfg.checkpoint_every = num(n, k, v)?,
            "corpus" => fc.corpus = Some(PathBuf::from(v)),
            "eval_corpus" => fc.eval_corpus = Some(PathBuf::from(v)),
            "out_dir" => fc.out_dir = Some(PathBuf::from(v)),
            other => return Err(config_err(n, format!("unknown key {other:?}"))),
        }
    }
    fc.run.validate()?;
    Ok(fc)
}

fn open_corpus(path: &Path) -> Result<BufReader<File>> {
    if !path.exists() {
        return Err(Error::InvalidArgument(format!(
            "corpus not found: {}",
            path.display()
        )));
    }
    Ok(BufReader::new(File::open(path)?))
}

/// Everything `train`/`eval` derive from a raw corpus before the first
/// optimizer step.
pub struct Prepared {
    pub vocab: Vocab,
    pub freq: FreqTable,
    pub split: FrequencySplit,
    pub masks: Option<MaskTable>,
    pub tokens: Vec<u32>,
}

/// Run the corpus pipeline for a config: vocabulary, encoding,
/// frequencies, coverage split, and (for mask-routed architectures) the
/// mask table. `hash` takes a uniform V=1 table, which pins every token
/// to its fixed hash expert.
pub fn prepare(cfg: &RunConfig, corpus: &Path) -> Result<Prepared> {
    let vocab = build_vocab(open_corpus(corpus)?, cfg.max_vocab)?;
    let tokens = encode_corpus(open_corpus(corpus)?, &vocab)?;
    let freq = count_frequencies(open_corpus(corpus)?, &vocab)?;
    let split = split_by_coverage(&freq, cfg.coverage_p)?;
    let masks = match cfg.arch {
        Architecture::Hash => Some(MaskTable::uniform(
            vocab.len(),
            cfg.n_experts,
            1,
            cfg.mask_seed,
        )?),
        Architecture::MaskMoe => {
            let mc = MaskConfig { n_experts: cfg.n_experts, v_a: cfg.v_a, v_b: cfg.v_b };
            Some(build_mask_table(vocab.len(), &split, &mc, cfg.mask_seed)?)
        }
        _ => None,
    };
    Ok(Prepared { vocab, freq, split, masks, tokens })
}

fn save_run_inputs(dir: &Path, cfg: &RunConfig, prep: &Prepared) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    cfg.save(&dir.join("config.json"))?;
    prep.vocab.save(&dir.join("vocab.txt"))?;
    prep.freq.save(&dir.join("freq.tsv"))?;
    prep.split.save(&dir.join("split.tsv"))?;
    if let Some(masks) = &prep.masks {
        masks.save(&dir.join("masks.jsonl"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyzeSummary {
    pub vocab_size: usize,
    pub total_tokens: u64,
    pub frequent: usize,
    pub infrequent: usize,
    /// Fraction of corpus occurrences covered by the frequent class.
    pub realized_coverage: f64,
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<AnalyzeSummary> {
    let vocab = build_vocab(open_corpus(&args.corpus)?, args.max_vocab)?;
    let freq = count_frequencies(open_corpus(&args.corpus)?, &vocab)?;
    let split = split_by_coverage(&freq, args.coverage)?;

    std::fs::create_dir_all(&args.out_dir)?;
    vocab.save(&args.out_dir.join("vocab.txt"))?;
    freq.save(&args.out_dir.join("freq.tsv"))?;
    split.save(&args.out_dir.join("split.tsv"))?;

    let covered: u64 = split.frequent_ids().map(|t| freq.counts[t as usize]).sum();
    let summary = AnalyzeSummary {
        vocab_size: vocab.len(),
        total_tokens: freq.total,
        frequent: split.frequent_ids().count(),
        infrequent: split.infrequent_ids().count(),
        realized_coverage: covered as f64 / freq.total as f64,
    };
    println!(
        "vocab {} tokens, corpus {} occurrences",
        summary.vocab_size, summary.total_tokens
    );
    println!(
        "coverage P={}: {} frequent / {} infrequent (realized {:.3})",
        args.coverage, summary.frequent, summary.infrequent, summary.realized_coverage
    );
    Ok(summary)
}

pub fn cmd_build_masks(args: &BuildMasksArgs) -> Result<()> {
    let split = FrequencySplit::load(&args.split)?;
    let mc = MaskConfig { n_experts: args.experts, v_a: args.va, v_b: args.vb };
    let table = build_mask_table(split.vocab_size(), &split, &mc, args.seed)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    table.save(&args.out)?;
    println!(
        "wrote {} masks (N={}, v_a={}, v_b={}, seed {}) to {}",
        table.vocab_size(),
        args.experts,
        args.va,
        args.vb,
        args.seed,
        args.out.display()
    );
    Ok(())
}

/// Outcome of one `train` invocation, for callers driving the CLI from
/// code.
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub artifacts: TrainArtifacts,
    pub eval: Option<EvalStats>,
}

fn run_train_typed<T: Scalar>(
    cfg: &RunConfig,
    prep: &Prepared,
    eval_tokens: Option<&[u32]>,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<(TrainArtifacts, Option<EvalStats>)> {
    let (params, artifacts) =
        train::<T>(cfg, prep.vocab.len(), &prep.tokens, prep.masks.as_ref(), opts)?;
    let eval = match eval_tokens {
        Some(toks) => {
            let dims = ModelDims::from_run(cfg, prep.vocab.len());
            let stats = evaluate(
                &params,
                &dims,
                prep.masks.as_ref(),
                toks,
                Some(&prep.split),
                eval_batch(cfg),
            )?;
            stats.save(&out_dir.join("eval.json"))?;
            Some(stats)
        }
        None => None,
    };
    Ok((artifacts, eval))
}

/// Evaluation batching; purely a throughput knob, every window is scored
/// independently of its batch.
fn eval_batch(cfg: &RunConfig) -> usize {
    cfg.batch_seqs.max(8)
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let fc = parse_config(&args.config)?;
    let mut cfg = fc.run;
    if args.shared_expert {
        cfg.shared_expert = Some(true);
    }
    if args.no_shared_expert {
        cfg.shared_expert = Some(false);
    }
    cfg.validate()?;

    let corpus = args
        .corpus
        .clone()
        .or(fc.corpus)
        .ok_or_else(|| Error::InvalidArgument("no corpus given (config key or --corpus)".into()))?;
    let out_dir = args
        .out_dir
        .clone()
        .or(fc.out_dir)
        .ok_or_else(|| Error::InvalidArgument("no out_dir given (config key or --out-dir)".into()))?;

    let prep = prepare(&cfg, &corpus)?;
    save_run_inputs(&out_dir, &cfg, &prep)?;

    let eval_tokens = if args.no_eval {
        None
    } else {
        match &fc.eval_corpus {
            Some(path) => Some(encode_corpus(open_corpus(path)?, &prep.vocab)?),
            None => Some(prep.tokens.clone()),
        }
    };

    let mut opts = TrainOptions::new(&out_dir);
    opts.routing_log_every = cfg.log_every;
    opts.checkpoint_every = cfg.checkpoint_every;
    opts.resume = args.resume;
    opts.session_steps = args.session_steps;
    opts.quiet = args.quiet;

    let (artifacts, eval) = match cfg.dtype {
        DtypeChoice::F32 => {
            run_train_typed::<f32>(&cfg, &prep, eval_tokens.as_deref(), &out_dir, &opts)?
        }
        DtypeChoice::F64 => {
            run_train_typed::<f64>(&cfg, &prep, eval_tokens.as_deref(), &out_dir, &opts)?
        }
    };

    if let Some(stats) = &artifacts.final_stats {
        println!(
            "trained {} for {} steps (total loss {:.4}) in {:.1}s",
            cfg.arch, artifacts.steps_run, stats.total, artifacts.wall_seconds
        );
    } else {
        println!("wrote initial checkpoint for {} (0 steps)", cfg.arch);
    }
    if let Some(stats) = &eval {
        println!("eval ppl {:.4} over {} tokens", stats.perplexity, stats.tokens);
    }
    Ok(TrainOutcome { out_dir, artifacts, eval })
}

fn load_run_model<T: Scalar>(
    run_dir: &Path,
    cfg: &RunConfig,
    masks: Option<&MaskTable>,
    vocab_size: usize,
) -> Result<ModelParams<T>> {
    let dims = ModelDims::from_run(cfg, vocab_size);
    let mut params = init_params::<T>(&dims, cfg.seed);
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, ADAM_EPS, cfg.weight_decay);
    let mask_digest = masks.map_or(NO_MASK_DIGEST, |m| m.digest());
    checkpoint::load(
        &run_dir.join("model.ckpt"),
        &cfg.digest(),
        &mask_digest,
        &mut params,
        &mut opt,
    )?;
    Ok(params)
}

fn eval_run_dir(run_dir: &Path, corpus: &Path) -> Result<EvalStats> {
    if !run_dir.join("config.json").exists() {
        return Err(Error::InvalidArgument(format!(
            "no run at {}: config.json missing",
            run_dir.display()
        )));
    }
    let cfg = RunConfig::load(&run_dir.join("config.json"))?;
    let vocab = Vocab::load(&run_dir.join("vocab.txt"))?;
    let split = FrequencySplit::load(&run_dir.join("split.tsv"))?;
    let masks = if cfg.arch.uses_masks() {
        Some(MaskTable::load(&run_dir.join("masks.jsonl"))?)
    } else {
        None
    };
    let tokens = encode_corpus(open_corpus(corpus)?, &vocab)?;
    let dims = ModelDims::from_run(&cfg, vocab.len());
    match cfg.dtype {
        DtypeChoice::F32 => {
            let params = load_run_model::<f32>(run_dir, &cfg, masks.as_ref(), vocab.len())?;
            evaluate(&params, &dims, masks.as_ref(), &tokens, Some(&split), eval_batch(&cfg))
        }
        DtypeChoice::F64 => {
            let params = load_run_model::<f64>(run_dir, &cfg, masks.as_ref(), vocab.len())?;
            evaluate(&params, &dims, masks.as_ref(), &tokens, Some(&split), eval_batch(&cfg))
        }
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalStats> {
    let stats = eval_run_dir(&args.run_dir, &args.corpus)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.run_dir.join("eval.json"));
    stats.save(&out)?;
    println!(
        "ppl {:.4} (mean nll {:.4}) over {} tokens -> {}",
        stats.perplexity,
        stats.mean_nll,
        stats.tokens,
        out.display()
    );
    Ok(stats)
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub name: String,
    pub arch: Architecture,
    pub ppl: f64,
    pub fluct_frequent: Option<f64>,
    pub fluct_infrequent: Option<f64>,
    pub load_cv: Option<f64>,
    pub balance: Option<f64>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub fn cmd_compare(args: &CompareArgs) -> Result<Vec<CompareRow>> {
    let mut rows = Vec::new();
    for path in &args.configs {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let row = compare_one(path, &name, args).map_err(|e| e.in_run(name.clone()))?;
        rows.push(row);
    }

    println!(
        "{:<14} {:<9} {:>9} {:>11} {:>13} {:>8} {:>9}",
        "run", "arch", "ppl", "fluct_freq", "fluct_infreq", "cv", "balance"
    );
    for r in &rows {
        println!(
            "{:<14} {:<9} {:>9.4} {:>11} {:>13} {:>8} {:>9}",
            r.name,
            r.arch.to_string(),
            r.ppl,
            opt_cell(r.fluct_frequent),
            opt_cell(r.fluct_infrequent),
            opt_cell(r.load_cv),
            opt_cell(r.balance)
        );
    }
    Ok(rows)
}

fn compare_one(config: &Path, name: &str, args: &CompareArgs) -> Result<CompareRow> {
    let train_args = TrainArgs {
        config: config.to_path_buf(),
        corpus: None,
        out_dir: args.out_dir.as_ref().map(|base| base.join(name)),
        resume: false,
        session_steps: None,
        shared_expert: false,
        no_shared_expert: false,
        no_eval: false,
        quiet: args.quiet,
    };
    let outcome = cmd_train(&train_args)?;
    let eval = outcome
        .eval
        .expect("compare always evaluates");
    let fluct = fluct_from_log(&outcome.out_dir)?;
    Ok(CompareRow {
        name: name.to_string(),
        arch: parse_config(config)?.run.arch,
        ppl: eval.perplexity,
        fluct_frequent: fluct.as_ref().and_then(|f| f.frequent.map(|p| p.rate)),
        fluct_infrequent: fluct.as_ref().and_then(|f| f.infrequent.map(|p| p.rate)),
        load_cv: eval.load_cv,
        balance: eval.balance,
    })
}

/// Fluctuation stats from a run directory's routing log, classed by its
/// split file. `None` when the log is empty (dense runs).
fn fluct_from_log(run_dir: &Path) -> Result<Option<FluctuationStats>> {
    let lines = read_routing_log(&run_dir.join("routing.jsonl"))?;
    if lines.is_empty() {
        return Ok(None);
    }
    let split = FrequencySplit::load(&run_dir.join("split.tsv"))?;
    Ok(Some(fluctuation(&lines, Some(&split))))
}

/// Fixed-schema summary of one run, `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub fluct_frequent: f64,
    pub fluct_infrequent: f64,
    pub fluct_all: f64,
    pub cv_per_layer: Vec<f64>,
    pub balance_loss_eval: Option<f64>,
    pub ppl: f64,
}

pub fn cmd_report(args: &ReportArgs) -> Result<RunReport> {
    let run_dir = &args.run_dir;
    let eval_path = run_dir.join("eval.json");
    if !eval_path.exists() {
        return Err(Error::InvalidArgument(format!(
            "{} has no eval.json; run `eval` first",
            run_dir.display()
        )));
    }
    let eval = EvalStats::load(&eval_path)?;
    let fluct = fluct_from_log(run_dir)?;

    let report = RunReport {
        fluct_frequent: fluct
            .as_ref()
            .and_then(|f| f.frequent.map(|p| p.rate))
            .unwrap_or(0.0),
        fluct_infrequent: fluct
            .as_ref()
            .and_then(|f| f.infrequent.map(|p| p.rate))
            .unwrap_or(0.0),
        fluct_all: fluct.as_ref().map_or(0.0, |f| f.overall.rate),
        cv_per_layer: eval.load_per_layer.iter().map(|l| l.cv).collect(),
        balance_loss_eval: eval.balance,
        ppl: eval.perplexity,
    };

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| run_dir.join("report.json"));
    let mut w = BufWriter::new(File::create(&out)?);
    serde_json::to_writer_pretty(&mut w, &report)?;
    w.write_all(b"\n")?;
    w.flush()?;

    let csv_path = out.with_file_name("counts.csv");
    let mut csv = BufWriter::new(File::create(&csv_path)?);
    writeln!(csv, "layer,expert,count")?;
    for layer in &eval.load_per_layer {
        for (expert, count) in layer.counts.iter().enumerate() {
            writeln!(csv, "{},{expert},{count}", layer.layer)?;
        }
    }
    csv.flush()?;

    println!(
        "ppl {:.4}, fluct all {:.4} (freq {:.4} / infreq {:.4}) -> {}",
        report.ppl,
        report.fluct_all,
        report.fluct_frequent,
        report.fluct_infrequent,
        out.display()
    );
    Ok(report)
}

/// Dispatch a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result: Result<()> = match &cli.command {
        Command::Analyze(a) => cmd_analyze(a).map(drop),
        Command::BuildMasks(a) => cmd_build_masks(a),
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Eval(a) => cmd_eval(a).map(drop),
        Command::Compare(a) => cmd_compare(a).map(drop),
        Command::Report(a) => cmd_report(a).map(drop),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_defaults_comments_and_overrides() {
        let text = "\
# a run
arch = maskmoe
seed = 9
v_a = 8

steps = 20
corpus = data/train.txt
out_dir = runs/mm
";
        let fc = parse_config_str(text).unwrap();
        assert_eq!(fc.run.arch, Architecture::MaskMoe);
        assert_eq!(fc.run.seed, 9);
        assert_eq!(fc.run.v_a, 8);
        assert_eq!(fc.run.v_b, 1, "untouched keys keep defaults");
        assert_eq!(fc.run.steps, 20);
        assert_eq!(fc.corpus.unwrap(), PathBuf::from("data/train.txt"));
        assert_eq!(fc.out_dir.unwrap(), PathBuf::from("runs/mm"));
        assert!(fc.eval_corpus.is_none());
    }

    #[test]
    fn config_rejects_unknown_duplicate_and_malformed_keys() {
        assert!(matches!(
            parse_config_str("arch = smoe\nnum_expert = 4\n"),
            Err(Error::Config(m)) if m.contains("unknown key") && m.contains("num_expert")
        ));
        assert!(matches!(
            parse_config_str("arch = smoe\nseed = 1\nseed = 2\n"),
            Err(Error::Config(m)) if m.contains("duplicate")
        ));
        assert!(parse_config_str("arch = smoe\nseed\n").is_err());
        assert!(parse_config_str("seed = 1\n").is_err(), "arch is mandatory");
        assert!(matches!(
            parse_config_str("arch = smoe\nsteps = many\n"),
            Err(Error::Config(m)) if m.contains("steps")
        ));
    }

    #[test]
    fn config_applies_architecture_rules() {
        // hash defaults to v=1 and rejects explicit wider masks
        let fc = parse_config_str("arch = hash\n").unwrap();
        assert_eq!((fc.run.v_a, fc.run.v_b), (1, 1));
        assert!(parse_config_str("arch = hash\nv_a = 4\n").is_err());
        // shared-expert ablation via key
        let fc = parse_config_str("arch = maskmoe\nshared_expert = false\n").unwrap();
        assert!(!fc.run.shared_expert_on());
    }

    #[test]
    fn exit_codes_split_usage_from_runtime() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::InvalidArgument("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Corpus("x".into())), EXIT_RUNTIME);
        assert_eq!(
            exit_code(&Error::NonFinite("x".into()).in_run("a")),
            EXIT_RUNTIME
        );
        assert_eq!(
            exit_code(&Error::Config("x".into()).in_run("a")),
            EXIT_USAGE
        );
    }

    #[test]
    fn cli_parses_subcommands() {
        use clap::Parser;
        let cli = Cli::try_parse_from([
            "maskmoe", "analyze", "--corpus", "c.txt", "--out-dir", "d", "--coverage", "0.5",
        ])
        .unwrap();
        match cli.command {
            Command::Analyze(a) => {
                assert_eq!(a.coverage, 0.5);
                assert_eq!(a.max_vocab, 8192);
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["maskmoe", "frobnicate"]).is_err());
        assert!(Cli::try_parse_from([
            "maskmoe", "train", "--config", "c", "--shared-expert", "--no-shared-expert",
        ])
        .is_err());
    }
}
