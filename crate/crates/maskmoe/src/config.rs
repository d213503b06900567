//! Run configuration: architecture menu, model/training hyperparameters,
//! validation, and the canonical digest recorded in checkpoints.

use crate::autograd::Dtype;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Feed-forward wiring of the transformer blocks.
///
/// * `dense` - ordinary FFN in every block
/// * `smoe` - learned softmax router over full-width experts
/// * `hash` - fixed random assignment (one visible expert per token)
/// * `share_moe` - router plus an always-on shared expert; routed experts
///   run at half width
/// * `maskmoe` - share_moe plus per-token visibility masks sized by token
///   frequency (shared expert on by default, can be disabled)
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Dense,
    Smoe,
    Hash,
    ShareMoe,
    #[serde(rename = "maskmoe")]
    MaskMoe,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::Dense,
        Architecture::Smoe,
        Architecture::Hash,
        Architecture::ShareMoe,
        Architecture::MaskMoe,
    ];

    pub fn is_moe(self) -> bool {
        self != Architecture::Dense
    }

    /// Architectures that consume a mask table.
    pub fn uses_masks(self) -> bool {
        matches!(self, Architecture::Hash | Architecture::MaskMoe)
    }

    fn default_shared(self) -> bool {
        matches!(self, Architecture::ShareMoe | Architecture::MaskMoe)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Architecture::Dense => "dense",
            Architecture::Smoe => "smoe",
            Architecture::Hash => "hash",
            Architecture::ShareMoe => "share_moe",
            Architecture::MaskMoe => "maskmoe",
        };
        f.write_str(s)
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Architecture> {
        match s {
            "dense" => Ok(Architecture::Dense),
            "smoe" => Ok(Architecture::Smoe),
            "hash" => Ok(Architecture::Hash),
            "share_moe" => Ok(Architecture::ShareMoe),
            "maskmoe" => Ok(Architecture::MaskMoe),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture {other:?} (dense|smoe|hash|share_moe|maskmoe)"
            ))),
        }
    }
}

/// Which blocks swap their FFN for a MoE layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    Last,
    EveryOther,
}

impl Placement {
    pub fn is_moe_block(self, layer: usize, n_layers: usize) -> bool {
        match self {
            Placement::Last => layer + 1 == n_layers,
            Placement::EveryOther => layer % 2 == 1,
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::Last => "last",
            Placement::EveryOther => "every_other",
        })
    }
}

impl FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Placement> {
        match s {
            "last" => Ok(Placement::Last),
            "every_other" => Ok(Placement::EveryOther),
            other => Err(Error::InvalidArgument(format!(
                "unknown placement {other:?} (last|every_other)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DtypeChoice {
    #[default]
    F32,
    F64,
}

impl DtypeChoice {
    pub fn dtype(self) -> Dtype {
        match self {
            DtypeChoice::F32 => Dtype::F32,
            DtypeChoice::F64 => Dtype::F64,
        }
    }
}

fn d_seed() -> u64 { 1 }
fn d_vocab() -> usize { 8192 }
fn d_dmodel() -> usize { 256 }
fn d_heads() -> usize { 8 }
fn d_layers() -> usize { 8 }
fn d_dff() -> usize { 512 }
fn d_experts() -> usize { 16 }
fn d_topk() -> usize { 1 }
fn d_p() -> f64 { 0.4 }
fn d_va() -> usize { 4 }
fn d_vb() -> usize { 1 }
fn d_mask_seed() -> u64 { 7 }
fn d_seq() -> usize { 64 }
fn d_bs() -> usize { 2 }
fn d_steps() -> usize { 3000 }
fn d_lr() -> f64 { 1e-3 }
fn d_lr_min_ratio() -> f64 { 0.1 }
fn d_wd() -> f64 { 0.1 }
fn d_b1() -> f64 { 0.9 }
fn d_b2() -> f64 { 0.95 }
fn d_clip() -> f64 { 1.0 }
fn d_log() -> usize { 10 }

/// Everything one run needs, JSON-serializable. Unset fields take the
/// desk-experiment defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub arch: Architecture,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default)]
    pub dtype: DtypeChoice,

    #[serde(default = "d_vocab")]
    pub max_vocab: usize,
    #[serde(default = "d_dmodel")]
    pub d_model: usize,
    #[serde(default = "d_heads")]
    pub n_heads: usize,
    #[serde(default = "d_layers")]
    pub n_layers: usize,
    #[serde(default = "d_dff")]
    pub d_ff: usize,
    #[serde(default = "d_experts")]
    pub n_experts: usize,
    #[serde(default = "d_topk")]
    pub top_k: usize,
    #[serde(default)]
    pub placement: Placement,
    /// Shared always-on expert; `None` means the architecture default
    /// (on for share_moe and maskmoe, off otherwise).
    #[serde(default)]
    pub shared_expert: Option<bool>,

    #[serde(default = "d_p")]
    pub coverage_p: f64,
    #[serde(default = "d_va")]
    pub v_a: usize,
    #[serde(default = "d_vb")]
    pub v_b: usize,
    #[serde(default = "d_mask_seed")]
    pub mask_seed: u64,

    #[serde(default = "d_seq")]
    pub seq_len: usize,
    #[serde(default = "d_bs")]
    pub batch_seqs: usize,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_lr")]
    pub lr_peak: f64,
    #[serde(default = "d_lr_min_ratio")]
    pub lr_min_ratio: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_b1")]
    pub beta1: f64,
    #[serde(default = "d_b2")]
    pub beta2: f64,
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    #[serde(default = "d_log")]
    pub log_every: usize,
    /// 0 means checkpoint only at the end.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl RunConfig {
    pub fn new(arch: Architecture) -> RunConfig {
        let mut cfg: RunConfig =
            serde_json::from_value(serde_json::json!({ "arch": arch.to_string() }))
                .expect("defaults are valid");
        if arch == Architecture::Hash {
            cfg.v_a = 1;
            cfg.v_b = 1;
        }
        cfg
    }

    pub fn shared_expert_on(&self) -> bool {
        self.shared_expert.unwrap_or_else(|| self.arch.default_shared())
    }

    /// Hidden width of routed experts: halved when a full-width shared
    /// expert runs alongside them.
    pub fn routed_d_ff(&self) -> usize {
        if self.shared_expert_on() {
            self.d_ff / 2
        } else {
            self.d_ff
        }
    }

    /// Linear warmup length: 1% of total steps, at least 1 (0 only for
    /// no-op zero-step runs).
    pub fn warmup_steps(&self) -> usize {
        if self.steps == 0 {
            0
        } else {
            (self.steps / 100).max(1)
        }
    }

    pub fn lr_min(&self) -> f64 {
        self.lr_peak * self.lr_min_ratio
    }

    pub fn tokens_per_step(&self) -> usize {
        self.seq_len * self.batch_seqs
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.max_vocab < 3 {
            return fail(format!("max_vocab must be at least 3, got {}", self.max_vocab));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return fail("head dim must be even for rotary pairs".into());
        }
        if self.n_layers == 0 {
            return fail("n_layers must be positive".into());
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if self.seq_len < 2 || self.batch_seqs == 0 {
            return fail(format!(
                "need seq_len >= 2 and batch_seqs >= 1 (got {}, {})",
                self.seq_len, self.batch_seqs
            ));
        }
        if !(self.lr_peak > 0.0) || !(self.lr_min_ratio >= 0.0) {
            return fail("lr_peak must be positive and lr_min_ratio non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return fail("weight_decay and grad_clip must be non-negative".into());
        }
        if self.log_every == 0 {
            return fail("log_every must be positive".into());
        }

        if self.arch.is_moe() {
            if self.n_experts == 0 {
                return fail("n_experts must be positive".into());
            }
            if self.top_k < 1 || self.top_k > self.n_experts {
                return fail(format!(
                    "top_k {} must lie in [1, n_experts={}]",
                    self.top_k, self.n_experts
                ));
            }
            if self.shared_expert_on() && self.d_ff % 2 != 0 {
                return fail("d_ff must be even to halve routed experts next to a shared one".into());
            }
        }
        match self.arch {
            Architecture::Hash => {
                if self.top_k != 1 {
                    return fail("hash routing is single-expert: top_k must be 1".into());
                }
                if self.v_a != 1 || self.v_b != 1 {
                    return fail(format!(
                        "hash fixes one visible expert per token: v_a and v_b must be 1 \
                         (got {}, {})",
                        self.v_a, self.v_b
                    ));
                }
                if self.shared_expert_on() {
                    return fail("hash has no shared expert".into());
                }
            }
            Architecture::Smoe => {
                if self.shared_expert_on() {
                    return fail("smoe has no shared expert".into());
                }
            }
            Architecture::ShareMoe => {
                if !self.shared_expert_on() {
                    return fail("share_moe requires the shared expert".into());
                }
            }
            Architecture::MaskMoe => {
                if !(0.0..=1.0).contains(&self.coverage_p) {
                    return fail(format!("coverage_p must lie in [0,1], got {}", self.coverage_p));
                }
                for (name, v) in [("v_a", self.v_a), ("v_b", self.v_b)] {
                    if v < 1 || v > self.n_experts {
                        return fail(format!(
                            "{name} must lie in [1, n_experts={}], got {v}",
                            self.n_experts
                        ));
                    }
                }
                if self.top_k > self.v_a.min(self.v_b) {
                    return fail(format!(
                        "top_k {} exceeds the smallest visible count {}",
                        self.top_k,
                        self.v_a.min(self.v_b)
                    ));
                }
            }
            Architecture::Dense => {}
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization (all fields resolved).
    pub fn digest(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("config serialization");
        let mut h = Sha256::new();
        h.update(&bytes);
        h.finalize().into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let bytes = std::fs::read(path)?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
