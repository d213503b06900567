//! Evaluate perplexity, split by token frequency class.
//!
//! Trains a small model briefly, then scores held-out text. The eval
//! pass reports mean negative log-likelihood and perplexity overall and
//! separately for targets in the frequent and infrequent classes, plus
//! per-expert routing load on the eval stream. An untrained model scores
//! ln(V) per token; training should beat that.
//!
//! ```bash
//! cargo run --example evaluate_ppl
//! ```

use maskmoe::cli::prepare;
use maskmoe::config::{Architecture, DtypeChoice, RunConfig};
use maskmoe::corpus::encode_corpus;
use maskmoe::metrics::{evaluate, ClassNll};
use maskmoe::model::ModelDims;
use maskmoe::textgen::{TextGen, TextGenConfig};
use maskmoe::train::{train, TrainOptions};
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

fn main() -> maskmoe::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/examples/evaluate_ppl");
    std::fs::create_dir_all(&dir)?;
    let lang = TextGen::new(TextGenConfig { n_forms: 600, ..Default::default() }, 42)?;
    let train_txt = dir.join("train.txt");
    let heldout_txt = dir.join("heldout.txt");
    lang.write_corpus(&train_txt, 60_000, 1)?;
    lang.write_corpus(&heldout_txt, 8_000, 2)?;

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

    let prep = prepare(&cfg, &train_txt)?;
    let dims = ModelDims::from_run(&cfg, prep.vocab.len());
    let heldout = encode_corpus(BufReader::new(File::open(&heldout_txt)?), &prep.vocab)?;
    let uniform_nll = (prep.vocab.len() as f64).ln();

    let mut opts = TrainOptions::new(&dir.join("run"));
    opts.quiet = true;
    let (params, _) =
        train::<f32>(&cfg, prep.vocab.len(), &prep.tokens, prep.masks.as_ref(), &opts)?;

    let stats = evaluate(&params, &dims, prep.masks.as_ref(), &heldout, Some(&prep.split), 16)?;
    println!(
        "held-out: {} scored tokens, uniform baseline nll = ln({}) = {uniform_nll:.4}",
        stats.tokens,
        prep.vocab.len()
    );
    println!("  overall     nll {:.4}  ppl {:.2}", stats.mean_nll, stats.perplexity);
    let class = |c: &Option<ClassNll>| {
        c.as_ref()
            .map(|c| format!("nll {:.4}  ppl {:.2}  ({} tokens)", c.mean_nll, c.perplexity, c.tokens))
            .unwrap_or_else(|| "none in stream".into())
    };
    println!("  frequent    {}", class(&stats.frequent));
    println!("  infrequent  {}", class(&stats.infrequent));
    assert!(stats.mean_nll < uniform_nll, "training beat the uniform baseline");

    if let Some(load) = &stats.expert_load {
        let cv = stats.load_cv.expect("cv accompanies load");
        println!("eval routing load per expert (cv {cv:.3}):");
        let total: f64 = load.iter().sum();
        for (e, l) in load.iter().enumerate() {
            println!("  expert {e}: {:>5.1}%", 100.0 * l / total);
        }
    }
    if let Some(balance) = stats.balance {
        println!("balance loss on the eval stream: {balance:.4}");
    }
    Ok(())
}
