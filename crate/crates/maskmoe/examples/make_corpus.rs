//! Generate a synthetic training corpus.
//!
//! The generator samples a Zipf-distributed vocabulary of pronounceable
//! word forms with per-word successor sets, so the text has both the
//! long-tailed frequency profile and the local predictability that make
//! language-model training worthwhile. Same seeds, same bytes.
//!
//! ```bash
//! cargo run --example make_corpus -- [tokens] [path] [sample_seed]
//! ```
//!
//! Different sample seeds draw disjoint text from the same language, so
//! a held-out evaluation split is just a second seed.

use maskmoe::textgen::{TextGen, TextGenConfig};
use std::path::PathBuf;

fn main() -> maskmoe::Result<()> {
    let mut args = std::env::args().skip(1);
    let tokens: u64 = args
        .next()
        .map(|s| s.parse().expect("tokens must be an integer"))
        .unwrap_or(200_000);
    let path: PathBuf = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| out_dir().join("corpus.txt"));
    let sample_seed: u64 = args
        .next()
        .map(|s| s.parse().expect("seed must be an integer"))
        .unwrap_or(1);

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }

    let cfg = TextGenConfig {
        n_forms: 12_000,
        ..Default::default()
    };
    let lang = TextGen::new(cfg, 42)?;
    let written = lang.write_corpus(&path, tokens, sample_seed)?;

    println!("wrote {written} tokens to {}", path.display());
    let text = std::fs::read_to_string(&path)?;
    println!("first lines:");
    for line in text.lines().take(3) {
        println!("  {line}");
    }
    Ok(())
}

fn out_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/examples")
}
