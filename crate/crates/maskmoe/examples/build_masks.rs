//! Build a per-token expert-visibility mask table.
//!
//! Frequent tokens see `v_a` experts, infrequent tokens see `v_b`. The
//! visible sets are sampled once from each token's own seeded stream, so
//! the table is a pure function of (split, N, v_a, v_b, seed): rebuild it
//! anywhere and you get byte-identical masks. With v = 1 the table
//! degenerates to fixed hash routing.
//!
//! ```bash
//! cargo run --example build_masks
//! ```

use maskmoe::corpus::{build_vocab, count_frequencies, split_by_coverage, TokenClass};
use maskmoe::maskgen::{build_mask_table, MaskConfig, MaskTable};
use maskmoe::routing::hash_route;
use maskmoe::textgen::{TextGen, TextGenConfig};
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

fn main() -> maskmoe::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/examples");
    std::fs::create_dir_all(&dir)?;
    let corpus = dir.join("build_masks_corpus.txt");
    let lang = TextGen::new(TextGenConfig { n_forms: 1_000, ..Default::default() }, 42)?;
    lang.write_corpus(&corpus, 50_000, 1)?;

    let reader = || -> maskmoe::Result<_> { Ok(BufReader::new(File::open(&corpus)?)) };
    let vocab = build_vocab(reader()?, 4_096)?;
    let freq = count_frequencies(reader()?, &vocab)?;
    let split = split_by_coverage(&freq, 0.4)?;

    let mc = MaskConfig { n_experts: 16, v_a: 4, v_b: 1 };
    let seed = 7;
    let table = build_mask_table(vocab.len(), &split, &mc, seed)?;
    let path = dir.join("masks.jsonl");
    table.save(&path)?;
    println!(
        "built masks for {} tokens (N = {}, v_a = {}, v_b = {}) -> {}",
        table.vocab_size(),
        mc.n_experts,
        mc.v_a,
        mc.v_b,
        path.display()
    );

    let sample_freq = split.frequent_ids().nth(2).expect("frequent tokens exist");
    let sample_infreq = split.infrequent_ids().next().expect("infrequent tokens exist");
    for id in [sample_freq, sample_infreq] {
        let class = match split.class(id) {
            TokenClass::Frequent => "frequent",
            TokenClass::Infrequent => "infrequent",
        };
        println!(
            "  token {:<10} ({class:<10}) sees experts {:?}",
            vocab.token(id),
            table.get(id).visible()
        );
    }

    let again = build_mask_table(vocab.len(), &split, &mc, seed)?;
    assert_eq!(table.digest(), again.digest());
    println!("rebuild under the same seed: identical (digest match)");
    let other = build_mask_table(vocab.len(), &split, &mc, seed + 1)?;
    assert_ne!(table.digest(), other.digest());
    println!("rebuild under seed {}: different table", seed + 1);

    // v = 1 everywhere pins each token to its hash expert.
    let pinned = MaskTable::uniform(vocab.len(), mc.n_experts, 1, seed)?;
    for id in 0..vocab.len() as u32 {
        assert_eq!(
            pinned.get(id).visible(),
            &[hash_route(id, mc.n_experts, seed) as u32]
        );
    }
    println!("uniform v = 1 table agrees with hash_route for all {} tokens", vocab.len());
    Ok(())
}
