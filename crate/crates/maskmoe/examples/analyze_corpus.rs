//! Corpus analysis: vocabulary, frequency table, and the coverage split.
//!
//! The split is what drives mask construction later: the smallest set of
//! most-frequent types whose occurrences cover fraction P of the corpus
//! is the "frequent" class, everything else is "infrequent".
//!
//! ```bash
//! cargo run --example analyze_corpus -- [corpus.txt] [coverage_p]
//! ```

use maskmoe::corpus::{build_vocab, count_frequencies, split_by_coverage};
use maskmoe::textgen::{TextGen, TextGenConfig};
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

fn main() -> maskmoe::Result<()> {
    let mut args = std::env::args().skip(1);
    let corpus = match args.next() {
        Some(p) => PathBuf::from(p),
        None => {
            let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/examples");
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("analyze_corpus.txt");
            let lang = TextGen::new(TextGenConfig { n_forms: 2_000, ..Default::default() }, 42)?;
            lang.write_corpus(&path, 100_000, 1)?;
            println!("(no corpus given, generated {})", path.display());
            path
        }
    };
    let coverage: f64 = args
        .next()
        .map(|s| s.parse().expect("coverage must be a float"))
        .unwrap_or(0.4);

    let reader = || -> maskmoe::Result<_> { Ok(BufReader::new(File::open(&corpus)?)) };
    let vocab = build_vocab(reader()?, 8_192)?;
    let freq = count_frequencies(reader()?, &vocab)?;
    let split = split_by_coverage(&freq, coverage)?;

    println!("vocabulary: {} types over {} occurrences", vocab.len(), freq.total);
    println!("most frequent types:");
    let mut by_count: Vec<(u32, u64)> = (0..vocab.len() as u32)
        .map(|id| (id, freq.counts[id as usize]))
        .collect();
    by_count.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    for &(id, count) in by_count.iter().take(8) {
        println!(
            "  {:<10} {:>8}  ({:.2}% of corpus)",
            vocab.token(id),
            count,
            100.0 * count as f64 / freq.total as f64
        );
    }

    let frequent = split.frequent_ids().count();
    let infrequent = split.infrequent_ids().count();
    let covered: u64 = split.frequent_ids().map(|t| freq.counts[t as usize]).sum();
    println!(
        "coverage P = {coverage}: {frequent} frequent types carry {:.1}% of occurrences, \
         {infrequent} infrequent types carry the rest",
        100.0 * covered as f64 / freq.total as f64
    );
    Ok(())
}
