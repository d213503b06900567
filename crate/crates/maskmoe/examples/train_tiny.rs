//! Train a small masked-routing model end to end.
//!
//! Generates a corpus, derives the frequency split and mask table, runs
//! a few hundred optimizer steps, and leaves the full artifact set
//! (config, vocab, split, masks, checkpoint, metrics, routing log) in a
//! run directory.
//!
//! ```bash
//! cargo run --example train_tiny
//! ```

use maskmoe::cli::prepare;
use maskmoe::config::{Architecture, DtypeChoice, RunConfig};
use maskmoe::textgen::{TextGen, TextGenConfig};
use maskmoe::train::{read_metrics, train, TrainOptions};
use std::path::PathBuf;

fn main() -> maskmoe::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/examples/train_tiny");
    std::fs::create_dir_all(&dir)?;
    let corpus = dir.join("corpus.txt");
    let lang = TextGen::new(TextGenConfig { n_forms: 600, ..Default::default() }, 42)?;
    lang.write_corpus(&corpus, 60_000, 1)?;

    let mut cfg = RunConfig::new(Architecture::MaskMoe);
    cfg.dtype = DtypeChoice::F32;
    cfg.max_vocab = 1_024;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.n_layers = 2;
    cfg.d_ff = 64;
    cfg.n_experts = 8;
    cfg.v_a = 4;
    cfg.v_b = 1;
    cfg.seq_len = 32;
    cfg.batch_seqs = 8;
    cfg.steps = 300;
    cfg.lr_peak = 3e-3;
    cfg.validate()?;

    let prep = prepare(&cfg, &corpus)?;
    println!(
        "corpus ready: {} tokens, vocab {}, {} frequent types",
        prep.tokens.len(),
        prep.vocab.len(),
        prep.split.frequent_ids().count()
    );

    let run_dir = dir.join("run");
    let mut opts = TrainOptions::new(&run_dir);
    opts.quiet = true;
    let (_params, artifacts) =
        train::<f32>(&cfg, prep.vocab.len(), &prep.tokens, prep.masks.as_ref(), &opts)?;

    let metrics = read_metrics(&artifacts.metrics)?;
    println!("trained {} steps in {:.1}s; loss trajectory:", artifacts.steps_run, artifacts.wall_seconds);
    for m in metrics.iter().step_by(metrics.len() / 6) {
        println!(
            "  step {:>4}: lm {:.4}  balance {:.4}  lr {:.5}",
            m.step, m.lm_loss, m.bal_loss, m.lr
        );
    }
    let last = metrics.last().expect("metrics were logged");
    let first = metrics.first().expect("metrics were logged");
    println!(
        "lm loss {:.4} -> {:.4} ({:.0}% drop)",
        first.lm_loss,
        last.lm_loss,
        100.0 * (first.lm_loss - last.lm_loss) / first.lm_loss
    );
    println!("artifacts in {}", run_dir.display());
    for name in ["model.ckpt", "metrics.jsonl", "routing.jsonl"] {
        let len = std::fs::metadata(run_dir.join(name))?.len();
        println!("  {name:<14} {len:>9} bytes");
    }
    Ok(())
}
