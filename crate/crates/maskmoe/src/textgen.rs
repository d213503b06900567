//! Seeded synthetic corpus generator.
//!
//! The generated language has two properties the experiments need:
//!
//! * token frequencies follow a Zipf law, so a coverage split separates
//!   a small frequent head from a long infrequent tail;
//! * each word has a small successor set, half of it drawn from nearby
//!   frequency ranks, so infrequent words tend to appear in predictable
//!   contexts after other infrequent words. A model that tracks bigram
//!   structure beats the unigram baseline by a wide margin.
//!
//! The language itself (word forms and successor sets) is fixed by one
//! seed; train and eval streams are separate samples from it under
//! different sample seeds.

use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use rand_distr::{Distribution, Zipf};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

const ONSETS: [&str; 24] = [
    "b", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr",
    "gr", "kl", "pl", "st", "tr", "sk",
];
const VOWELS: [&str; 8] = ["a", "e", "i", "o", "u", "ai", "ei", "ou"];
const N_SYLLABLES: usize = ONSETS.len() * VOWELS.len();

/// Pronounceable unique word for a frequency rank.
pub fn form(rank: usize) -> String {
    let mut digits = Vec::new();
    let mut n = rank;
    loop {
        digits.push(n % N_SYLLABLES);
        n /= N_SYLLABLES;
        if n == 0 {
            break;
        }
    }
    let mut s = String::new();
    for d in digits.iter().rev() {
        s.push_str(ONSETS[d / VOWELS.len()]);
        s.push_str(VOWELS[d % VOWELS.len()]);
    }
    s
}

#[derive(Debug, Clone)]
pub struct TextGenConfig {
    /// Distinct word forms in the language.
    pub n_forms: usize,
    /// Zipf exponent for the marginal frequency law.
    pub zipf_s: f64,
    /// Successor-set size per word.
    pub succ_size: usize,
    /// Fraction of each successor set drawn from nearby ranks.
    pub local_frac: f64,
    /// Probability the next word comes from the successor set rather
    /// than the global marginal.
    pub follow_prob: f64,
    pub min_line: usize,
    pub max_line: usize,
    pub comma_prob: f64,
}

impl Default for TextGenConfig {
    fn default() -> Self {
        TextGenConfig {
            n_forms: 12_000,
            zipf_s: 1.05,
            succ_size: 24,
            local_frac: 0.5,
            follow_prob: 0.7,
            min_line: 8,
            max_line: 24,
            comma_prob: 0.06,
        }
    }
}

impl TextGenConfig {
    fn validate(&self) -> Result<()> {
        if self.n_forms < 2 {
            return Err(Error::InvalidArgument("n_forms must be at least 2".into()));
        }
        if self.succ_size == 0 || self.min_line == 0 || self.min_line > self.max_line {
            return Err(Error::InvalidArgument(
                "successor size and line bounds must be positive and ordered".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.local_frac)
            || !(0.0..=1.0).contains(&self.follow_prob)
            || !(0.0..=1.0).contains(&self.comma_prob)
        {
            return Err(Error::InvalidArgument(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        if self.zipf_s <= 0.0 {
            return Err(Error::InvalidArgument("zipf_s must be positive".into()));
        }
        Ok(())
    }
}

/// A fixed synthetic language: word forms plus successor sets.
pub struct TextGen {
    cfg: TextGenConfig,
    forms: Vec<String>,
    succ: Vec<Vec<u32>>,
}

impl TextGen {
    pub fn new(cfg: TextGenConfig, language_seed: u64) -> Result<TextGen> {
        cfg.validate()?;
        let n = cfg.n_forms;
        let forms: Vec<String> = (0..n).map(form).collect();

        let mut rng = rng::chacha(rng::mix64(language_seed, 0x6c616e67));
        let zipf = Zipf::new(n as f64, cfg.zipf_s).map_err(|e| {
            Error::InvalidArgument(format!("bad zipf parameters: {e}"))
        })?;
        let n_local = (cfg.succ_size as f64 * cfg.local_frac).round() as usize;
        let mut succ = Vec::with_capacity(n);
        for r in 0..n {
            let window = (r / 4).max(50);
            let lo = r.saturating_sub(window);
            let hi = (r + window + 1).min(n);
            let mut set = Vec::with_capacity(cfg.succ_size);
            for i in 0..cfg.succ_size {
                let next = if i < n_local {
                    rng.random_range(lo..hi)
                } else {
                    zipf.sample(&mut rng) as usize - 1
                };
                set.push(next as u32);
            }
            succ.push(set);
        }
        Ok(TextGen { cfg, forms, succ })
    }

    pub fn n_forms(&self) -> usize {
        self.cfg.n_forms
    }

    pub fn successors(&self, rank: usize) -> &[u32] {
        &self.succ[rank]
    }

    /// Append roughly `approx_tokens` tokens (words plus punctuation) of
    /// sampled text to `out`, one sentence per line. Returns the exact
    /// token count.
    pub fn sample_into(
        &self,
        out: &mut impl Write,
        approx_tokens: u64,
        sample_seed: u64,
    ) -> Result<u64> {
        let mut rng = rng::chacha(rng::mix64(sample_seed, 0x73616d70));
        let zipf = Zipf::new(self.cfg.n_forms as f64, self.cfg.zipf_s)
            .expect("validated at construction");
        let mut written = 0u64;
        let mut line = String::new();
        while written < approx_tokens {
            line.clear();
            let len = rng.random_range(self.cfg.min_line..=self.cfg.max_line);
            let mut cur = zipf.sample(&mut rng) as usize - 1;
            for i in 0..len {
                if i > 0 {
                    line.push(' ');
                }
                line.push_str(&self.forms[cur]);
                written += 1;
                if rng.random::<f64>() < self.cfg.comma_prob {
                    line.push_str(" ,");
                    written += 1;
                }
                cur = if rng.random::<f64>() < self.cfg.follow_prob {
                    self.succ[cur][rng.random_range(0..self.succ[cur].len())] as usize
                } else {
                    zipf.sample(&mut rng) as usize - 1
                };
            }
            line.push_str(" .\n");
            written += 1;
            out.write_all(line.as_bytes())?;
        }
        Ok(written)
    }

    /// Write a corpus file. See [`TextGen::sample_into`].
    pub fn write_corpus(
        &self,
        path: &Path,
        approx_tokens: u64,
        sample_seed: u64,
    ) -> Result<u64> {
        let mut out = BufWriter::new(File::create(path)?);
        let n = self.sample_into(&mut out, approx_tokens, sample_seed)?;
        out.flush()?;
        Ok(n)
    }
}
