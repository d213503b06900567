//! Bit-exact checkpoint resume.
//!
//! A run stopped after n steps and resumed to the end produces byte-for-
//! byte the same checkpoint, metrics, and routing log as one
//! uninterrupted run: optimizer moments, the data-order cursor, and the
//! logs are all restored exactly. Checkpoints carry config and mask
//! digests, so resuming under a different setup fails instead of
//! silently drifting.
//!
//! ```bash
//! cargo run --example resume_training
//! ```

use maskmoe::cli::prepare;
use maskmoe::config::{Architecture, DtypeChoice, RunConfig};
use maskmoe::textgen::{TextGen, TextGenConfig};
use maskmoe::train::{train, TrainOptions};
use std::path::{Path, PathBuf};

fn main() -> maskmoe::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/examples/resume");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir)?;
    let corpus = dir.join("corpus.txt");
    let lang = TextGen::new(TextGenConfig { n_forms: 400, ..Default::default() }, 42)?;
    lang.write_corpus(&corpus, 30_000, 1)?;

    let mut cfg = RunConfig::new(Architecture::Smoe);
    cfg.dtype = DtypeChoice::F32;
    cfg.max_vocab = 512;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.n_layers = 2;
    cfg.d_ff = 64;
    cfg.n_experts = 4;
    cfg.seq_len = 16;
    cfg.batch_seqs = 4;
    cfg.steps = 40;
    cfg.validate()?;
    let prep = prepare(&cfg, &corpus)?;

    // One uninterrupted run.
    let solid = dir.join("solid");
    let mut opts = TrainOptions::new(&solid);
    opts.quiet = true;
    train::<f32>(&cfg, prep.vocab.len(), &prep.tokens, None, &opts)?;

    // The same run in three sessions of 15 + 15 + 10 steps.
    let pieces = dir.join("pieces");
    for (i, chunk) in [15usize, 15, 10].iter().enumerate() {
        let mut opts = TrainOptions::new(&pieces);
        opts.quiet = true;
        opts.resume = i > 0;
        opts.session_steps = Some(*chunk);
        let (_, art) = train::<f32>(&cfg, prep.vocab.len(), &prep.tokens, None, &opts)?;
        println!("session {}: ran {} steps", i + 1, art.steps_run);
    }

    for name in ["model.ckpt", "metrics.jsonl", "routing.jsonl"] {
        let a = std::fs::read(solid.join(name))?;
        let b = std::fs::read(pieces.join(name))?;
        assert_eq!(a, b, "{name} differs");
        println!("{name:<14} identical ({} bytes)", a.len());
    }

    // A checkpoint refuses to load under a different config.
    let mut other = cfg.clone();
    other.seed = 99;
    let err = resume_under(&other, &prep, &pieces).unwrap_err();
    println!("resume under a different config: {err}");
    Ok(())
}

fn resume_under(
    cfg: &RunConfig,
    prep: &maskmoe::cli::Prepared,
    dir: &Path,
) -> maskmoe::Result<()> {
    let mut opts = TrainOptions::new(dir);
    opts.quiet = true;
    opts.resume = true;
    train::<f32>(cfg, prep.vocab.len(), &prep.tokens, None, &opts)?;
    Ok(())
}
