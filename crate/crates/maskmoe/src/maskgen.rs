//! Routing-mask construction.
//!
//! Each vocabulary token gets a fixed set of visible experts, sampled
//! without replacement from its own seeded stream before training starts.
//! Frequent tokens see `v_a` experts, infrequent tokens `v_b`. The same
//! table is shared by every MoE layer of a model, so a token's mask never
//! varies by depth or by step.
//!
//! On-disk format (`masks.jsonl`): a header line
//! `{"n_experts":..,"v_a":..,"v_b":..,"seed":..}` followed by one
//! `{"id":..,"visible":[..]}` line per token id, in order.

use crate::autograd::Scalar;
use crate::corpus::TokenClass;
use crate::error::{Error, Result};
use crate::rng;
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy)]
pub struct MaskConfig {
    pub n_experts: usize,
    pub v_a: usize,
    pub v_b: usize,
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 {
            return Err(Error::Config("n_experts must be positive".into()));
        }
        for (name, v) in [("v_a", self.v_a), ("v_b", self.v_b)] {
            if v < 1 || v > self.n_experts {
                return Err(Error::Config(format!(
                    "{name} must lie in [1, {}], got {v}",
                    self.n_experts
                )));
            }
        }
        Ok(())
    }
}

/// Visibility mask for a single token: the sorted set of expert ids whose
/// router logits survive; all others are pushed to the dtype's most
/// negative finite value before the softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVector {
    n_experts: usize,
    visible: Vec<u32>,
}

impl MaskVector {
    pub fn new(n_experts: usize, mut visible: Vec<u32>) -> Result<MaskVector> {
        if visible.is_empty() {
            return Err(Error::Mask("mask must keep at least one expert visible".into()));
        }
        visible.sort_unstable();
        if visible.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Mask("duplicate expert in mask".into()));
        }
        if visible.last().map(|&e| e as usize >= n_experts).unwrap_or(false) {
            return Err(Error::Mask(format!(
                "expert id out of range for {n_experts} experts"
            )));
        }
        Ok(MaskVector { n_experts, visible })
    }

    pub fn all_visible(n_experts: usize) -> MaskVector {
        MaskVector {
            n_experts,
            visible: (0..n_experts as u32).collect(),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn visible(&self) -> &[u32] {
        &self.visible
    }

    pub fn visible_count(&self) -> usize {
        self.visible.len()
    }

    pub fn is_visible(&self, expert: usize) -> bool {
        self.visible.binary_search(&(expert as u32)).is_ok()
    }

    pub fn is_all_visible(&self) -> bool {
        self.visible.len() == self.n_experts
    }

    /// Additive logit entries: 0 where visible, most-negative-finite where
    /// masked. Adding these before the softmax drives masked
    /// probabilities to exactly zero in both f32 and f64.
    pub fn entries<T: Scalar>(&self) -> Array1<T> {
        let mut m = Array1::from_elem(self.n_experts, T::min_value());
        for &e in &self.visible {
            m[e as usize] = T::zero();
        }
        m
    }
}

/// Sample the visibility mask for one token: `v_a` distinct experts if the
/// token is frequent, `v_b` if infrequent, drawn from the token's own
/// stream so the result is independent of every other token.
pub fn build_mask(
    token_id: u32,
    class: TokenClass,
    cfg: &MaskConfig,
    seed: u64,
) -> Result<MaskVector> {
    cfg.validate()?;
    let v = match class {
        TokenClass::Frequent => cfg.v_a,
        TokenClass::Infrequent => cfg.v_b,
    };
    let mut stream = rng::token_stream(seed, token_id);
    let visible = rng::sample_distinct(&mut stream, v, cfg.n_experts);
    MaskVector::new(cfg.n_experts, visible)
}

/// Whole-vocabulary mask table, shared across all MoE layers of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTable {
    pub n_experts: usize,
    pub v_a: usize,
    pub v_b: usize,
    pub seed: u64,
    masks: Vec<MaskVector>,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    n_experts: usize,
    v_a: usize,
    v_b: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct FileLine {
    id: u32,
    visible: Vec<u32>,
}

impl MaskTable {
    pub fn vocab_size(&self) -> usize {
        self.masks.len()
    }

    pub fn get(&self, token_id: u32) -> &MaskVector {
        &self.masks[token_id as usize]
    }

    /// Same visible count `v` for every token regardless of class
    /// (`v = 1` realizes hash routing).
    pub fn uniform(vocab_size: usize, n_experts: usize, v: usize, seed: u64) -> Result<MaskTable> {
        let cfg = MaskConfig { n_experts, v_a: v, v_b: v };
        let mut masks = Vec::with_capacity(vocab_size);
        for id in 0..vocab_size as u32 {
            masks.push(build_mask(id, TokenClass::Infrequent, &cfg, seed)?);
        }
        Ok(MaskTable { n_experts, v_a: v, v_b: v, seed, masks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.canonical_bytes()?)?;
        Ok(())
    }

    fn canonical_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let header = FileHeader {
            n_experts: self.n_experts,
            v_a: self.v_a,
            v_b: self.v_b,
            seed: self.seed,
        };
        serde_json::to_writer(&mut buf, &header)?;
        buf.push(b'\n');
        for (id, m) in self.masks.iter().enumerate() {
            let line = FileLine { id: id as u32, visible: m.visible.clone() };
            serde_json::to_writer(&mut buf, &line)?;
            buf.push(b'\n');
        }
        Ok(buf)
    }

    /// SHA-256 of the canonical file serialization; recorded in
    /// checkpoints so a resumed run can refuse a swapped mask table.
    pub fn digest(&self) -> [u8; 32] {
        let bytes = self.canonical_bytes().expect("mask serialization");
        let mut h = Sha256::new();
        h.update(&bytes);
        h.finalize().into()
    }

    pub fn load(path: &Path) -> Result<MaskTable> {
        let p = path.display().to_string();
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::format(&p, "missing header line"))??;
        let header: FileHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::format(&p, format!("bad header: {e}")))?;
        let cfg = MaskConfig {
            n_experts: header.n_experts,
            v_a: header.v_a,
            v_b: header.v_b,
        };
        cfg.validate().map_err(|e| Error::format(&p, e.to_string()))?;
        let mut masks = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let parsed: FileLine = serde_json::from_str(&line)
                .map_err(|e| Error::format(&p, format!("line {}: {e}", i + 1)))?;
            if parsed.id as usize != i {
                return Err(Error::format(
                    &p,
                    format!("line {}: ids must be dense and ordered, got {}", i + 1, parsed.id),
                ));
            }
            let mv = MaskVector::new(header.n_experts, parsed.visible)
                .map_err(|e| Error::format(&p, format!("line {}: {e}", i + 1)))?;
            let count = mv.visible_count();
            if count != header.v_a && count != header.v_b {
                return Err(Error::format(
                    &p,
                    format!(
                        "line {}: visible count {count} matches neither v_a={} nor v_b={}",
                        i + 1,
                        header.v_a,
                        header.v_b
                    ),
                ));
            }
            masks.push(mv);
        }
        if masks.is_empty() {
            return Err(Error::format(&p, "no mask lines"));
        }
        Ok(MaskTable {
            n_experts: header.n_experts,
            v_a: header.v_a,
            v_b: header.v_b,
            seed: header.seed,
            masks,
        })
    }
}

/// Build masks for the whole vocabulary from its frequency split.
pub fn build_mask_table(
    vocab_size: usize,
    split: &crate::corpus::FrequencySplit,
    cfg: &MaskConfig,
    seed: u64,
) -> Result<MaskTable> {
    cfg.validate()?;
    if split.vocab_size() != vocab_size {
        return Err(Error::Mask(format!(
            "split covers {} tokens but vocab has {vocab_size}",
            split.vocab_size()
        )));
    }
    let mut masks = Vec::with_capacity(vocab_size);
    for id in 0..vocab_size as u32 {
        masks.push(build_mask(id, split.class(id), cfg, seed)?);
    }
    Ok(MaskTable {
        n_experts: cfg.n_experts,
        v_a: cfg.v_a,
        v_b: cfg.v_b,
        seed,
        masks,
    })
}
