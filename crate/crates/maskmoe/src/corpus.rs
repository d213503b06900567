//! Corpus ingestion: tokenizer, vocabulary, token frequencies, and the
//! frequent/infrequent split that drives mask construction.
//!
//! Plain-file artifacts:
//! * `vocab.txt` - one token per line, line number = token id
//! * `freq.tsv` - `token_id<TAB>count`
//! * `split.tsv` - `token_id<TAB>F|I`

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const UNK_ID: u32 = 0;
pub const BOS_ID: u32 = 1;

/// Lowercase, split on Unicode whitespace, and peel surrounding ASCII
/// punctuation off each piece into single-character tokens. Interior
/// punctuation (apostrophes, hyphens) stays attached.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        let (mut start, mut end) = (0usize, chars.len());
        let mut lead = Vec::new();
        let mut trail = Vec::new();
        while start < end && chars[start].is_ascii_punctuation() {
            lead.push(chars[start]);
            start += 1;
        }
        while end > start && chars[end - 1].is_ascii_punctuation() {
            trail.push(chars[end - 1]);
            end -= 1;
        }
        out.extend(lead.into_iter().map(String::from));
        if end > start {
            out.push(chars[start..end].iter().collect());
        }
        out.extend(trail.into_iter().rev().map(String::from));
    }
    out
}

/// Token table. Ids 0 and 1 are reserved for [`UNK`] and [`BOS`].
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < 2 || tokens[0] != UNK || tokens[1] != BOS {
            return Err(Error::Corpus(format!(
                "vocab must start with {UNK} and {BOS}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Corpus(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let reader = BufReader::new(File::open(path)?);
        let mut tokens = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.is_empty() {
                return Err(Error::format(path.display().to_string(), "empty vocab line"));
            }
            tokens.push(line);
        }
        Vocab::from_tokens(tokens)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
    }
}

/// Build a vocabulary of the `max_vocab - 2` most frequent surface tokens
/// (ties broken by ascending token string) plus the two reserved ids.
pub fn build_vocab(reader: impl BufRead, max_vocab: usize) -> Result<Vocab> {
    if max_vocab < 2 {
        return Err(Error::InvalidArgument(format!(
            "max_vocab must be at least 2, got {max_vocab}"
        )));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut any = false;
    for line in reader.lines() {
        for tok in tokenize(&line?) {
            any = true;
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(Error::Corpus("empty corpus: no tokens found".into()));
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_vocab - 2);
    let mut tokens = vec![UNK.to_string(), BOS.to_string()];
    tokens.extend(ranked.into_iter().map(|(t, _)| t));
    Vocab::from_tokens(tokens)
}

/// Stream the encoded corpus: each non-empty line becomes BOS followed by
/// its token ids, out-of-vocabulary tokens mapping to UNK.
pub fn for_each_encoded<R: BufRead>(
    reader: R,
    vocab: &Vocab,
    mut f: impl FnMut(u32),
) -> Result<()> {
    for line in reader.lines() {
        let toks = tokenize(&line?);
        if toks.is_empty() {
            continue;
        }
        f(BOS_ID);
        for t in &toks {
            f(vocab.id_or_unk(t));
        }
    }
    Ok(())
}

/// Encode a whole corpus into one id stream (BOS at each line start).
pub fn encode_corpus(reader: impl BufRead, vocab: &Vocab) -> Result<Vec<u32>> {
    let mut ids = Vec::new();
    for_each_encoded(reader, vocab, |id| ids.push(id))?;
    Ok(ids)
}

/// Per-token-id occurrence counts over the encoded corpus (BOS included).
#[derive(Debug, Clone)]
pub struct FreqTable {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl FreqTable {
    pub fn from_counts(counts: Vec<u64>) -> FreqTable {
        let total = counts.iter().sum();
        FreqTable { counts, total }
    }

    pub fn vocab_size(&self) -> usize {
        self.counts.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (id, c) in self.counts.iter().enumerate() {
            writeln!(w, "{id}\t{c}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FreqTable> {
        let reader = BufReader::new(File::open(path)?);
        let mut counts = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let (id_s, count_s) = line.split_once('\t').ok_or_else(|| {
                Error::format(path.display().to_string(), format!("line {lineno}: expected id<TAB>count"))
            })?;
            let id: usize = id_s.parse().map_err(|_| {
                Error::format(path.display().to_string(), format!("line {lineno}: bad id {id_s:?}"))
            })?;
            if id != lineno {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("line {lineno}: ids must be dense and ordered, got {id}"),
                ));
            }
            let count: u64 = count_s.parse().map_err(|_| {
                Error::format(path.display().to_string(), format!("line {lineno}: bad count {count_s:?}"))
            })?;
            counts.push(count);
        }
        if counts.is_empty() {
            return Err(Error::format(path.display().to_string(), "empty frequency table"));
        }
        Ok(FreqTable::from_counts(counts))
    }
}

/// Count encoded-token frequencies (vocabulary ids, BOS and UNK included).
pub fn count_frequencies(reader: impl BufRead, vocab: &Vocab) -> Result<FreqTable> {
    let mut counts = vec![0u64; vocab.len()];
    for_each_encoded(reader, vocab, |id| counts[id as usize] += 1)?;
    Ok(FreqTable::from_counts(counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Frequent,
    Infrequent,
}

/// Frequent/infrequent partition of the vocabulary.
#[derive(Debug, Clone)]
pub struct FrequencySplit {
    classes: Vec<TokenClass>,
}

impl FrequencySplit {
    pub fn vocab_size(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, id: u32) -> TokenClass {
        self.classes[id as usize]
    }

    pub fn is_frequent(&self, id: u32) -> bool {
        self.class(id) == TokenClass::Frequent
    }

    pub fn frequent_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == TokenClass::Frequent)
            .map(|(i, _)| i as u32)
    }

    pub fn infrequent_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == TokenClass::Infrequent)
            .map(|(i, _)| i as u32)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (id, c) in self.classes.iter().enumerate() {
            let tag = match c {
                TokenClass::Frequent => 'F',
                TokenClass::Infrequent => 'I',
            };
            writeln!(w, "{id}\t{tag}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FrequencySplit> {
        let reader = BufReader::new(File::open(path)?);
        let mut classes = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let (id_s, tag) = line.split_once('\t').ok_or_else(|| {
                Error::format(path.display().to_string(), format!("line {lineno}: expected id<TAB>F|I"))
            })?;
            let id: usize = id_s.parse().map_err(|_| {
                Error::format(path.display().to_string(), format!("line {lineno}: bad id {id_s:?}"))
            })?;
            if id != lineno {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("line {lineno}: ids must be dense and ordered, got {id}"),
                ));
            }
            classes.push(match tag {
                "F" => TokenClass::Frequent,
                "I" => TokenClass::Infrequent,
                other => {
                    return Err(Error::format(
                        path.display().to_string(),
                        format!("line {lineno}: bad class {other:?}"),
                    ))
                }
            });
        }
        if classes.is_empty() {
            return Err(Error::format(path.display().to_string(), "empty split file"));
        }
        Ok(FrequencySplit { classes })
    }
}

/// Split the vocabulary so that frequent tokens are the maximal prefix of
/// the count-descending order (ties by ascending id) whose cumulative
/// count stays within `ceil(p * total)`. The boundary is inclusive.
pub fn split_by_coverage(freq: &FreqTable, p: f64) -> Result<FrequencySplit> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "coverage p must lie in [0, 1], got {p}"
        )));
    }
    if freq.total == 0 {
        return Err(Error::Corpus("cannot split: total count is zero".into()));
    }
    let threshold = (p * freq.total as f64).ceil() as u64;
    let mut order: Vec<u32> = (0..freq.vocab_size() as u32).collect();
    order.sort_by(|&a, &b| {
        freq.counts[b as usize]
            .cmp(&freq.counts[a as usize])
            .then_with(|| a.cmp(&b))
    });
    let mut classes = vec![TokenClass::Infrequent; freq.vocab_size()];
    let mut cum = 0u64;
    for &id in &order {
        cum += freq.counts[id as usize];
        if cum > threshold {
            break;
        }
        classes[id as usize] = TokenClass::Frequent;
    }
    Ok(FrequencySplit { classes })
}
