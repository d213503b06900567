//! Side-by-side run of the five architectures on one corpus.
//!
//! dense has no experts at all; smoe routes freely with a balance loss;
//! hash pins every token to a fixed expert; share_moe adds an always-on
//! shared expert next to the routed one; maskmoe narrows each token's
//! routing choices by frequency class. The table shows eval perplexity,
//! routing-fluctuation rates over training, and eval load spread.
//!
//! Settings here are deliberately tiny; see the `train` and `compare`
//! subcommands of the `maskmoe` binary for full-size runs.
//!
//! ```bash
//! cargo run --example compare_architectures
//! ```

use maskmoe::cli::prepare;
use maskmoe::config::{Architecture, DtypeChoice, RunConfig};
use maskmoe::metrics::{evaluate, fluctuation, EvalStats, FluctuationStats};
use maskmoe::model::ModelDims;
use maskmoe::textgen::{TextGen, TextGenConfig};
use maskmoe::train::{read_routing_log, train, TrainOptions};
use std::path::PathBuf;

fn main() -> maskmoe::Result<()> {
    let dir =
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/examples/compare_archs");
    std::fs::create_dir_all(&dir)?;
    let corpus = dir.join("corpus.txt");
    let lang = TextGen::new(TextGenConfig { n_forms: 600, ..Default::default() }, 42)?;
    lang.write_corpus(&corpus, 60_000, 1)?;

    println!(
        "{:<10} {:>8} {:>12} {:>14} {:>8}",
        "arch", "ppl", "fluct_freq", "fluct_infreq", "load_cv"
    );
    for arch in Architecture::ALL {
        let (stats, fluct) = run_one(arch, &corpus, &dir)?;
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{:<10} {:>8.2} {:>12} {:>14} {:>8}",
            arch.to_string(),
            stats.perplexity,
            opt(fluct.as_ref().and_then(|f| f.frequent.map(|p| p.rate))),
            opt(fluct.as_ref().and_then(|f| f.infrequent.map(|p| p.rate))),
            opt(stats.load_cv),
        );
    }
    println!("\nhash and maskmoe-infrequent rows pin routing, so their fluctuation is 0");
    Ok(())
}

fn run_one(
    arch: Architecture,
    corpus: &std::path::Path,
    dir: &std::path::Path,
) -> maskmoe::Result<(EvalStats, Option<FluctuationStats>)> {
    let mut cfg = RunConfig::new(arch);
    cfg.dtype = DtypeChoice::F32;
    cfg.max_vocab = 1_024;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.n_layers = 2;
    cfg.d_ff = 64;
    cfg.n_experts = 8;
    if arch == Architecture::MaskMoe {
        cfg.v_a = 4;
        cfg.v_b = 1;
    }
    cfg.seq_len = 32;
    cfg.batch_seqs = 8;
    cfg.steps = 200;
    cfg.lr_peak = 3e-3;
    cfg.validate()?;

    let prep = prepare(&cfg, corpus)?;
    let run_dir = dir.join(arch.to_string());
    let mut opts = TrainOptions::new(&run_dir);
    opts.quiet = true;
    let (params, artifacts) =
        train::<f32>(&cfg, prep.vocab.len(), &prep.tokens, prep.masks.as_ref(), &opts)?;

    let dims = ModelDims::from_run(&cfg, prep.vocab.len());
    let stats = evaluate(&params, &dims, prep.masks.as_ref(), &prep.tokens, Some(&prep.split), 16)?;

    let log = read_routing_log(&artifacts.routing_log)?;
    let fluct = if log.is_empty() {
        None
    } else {
        Some(fluctuation(&log, Some(&prep.split)))
    };
    Ok((stats, fluct))
}
