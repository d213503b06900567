//! Decoder-only transformer with swappable FFN/MoE sublayers.
//!
//! Pre-norm blocks: `x += attn(ln1(x))`, then `x += ffn(ln2(x))`, a final
//! LayerNorm, and an untied language-model head. Attention uses rotary
//! position embeddings on q/k and no biases. The lm head starts at zero,
//! so an untrained model predicts the uniform distribution and its
//! perplexity equals the vocabulary size exactly, a cheap sanity oracle.
//!
//! Initialization draws in f64 from a seeded stream and casts, so f32 and
//! f64 models of the same seed share parameter values bit for bit (up to
//! the f32 cast).

use crate::autograd::{Graph, Scalar, Var, ATTN_NEG};
use crate::config::{Architecture, Placement, RunConfig};
use crate::error::{Error, Result};
use crate::losses::{balance_loss_graph, mean_scalars};
use crate::maskgen::MaskTable;
use crate::moe::{ffn_graph, moe_graph, FfnParams, FfnVars, MoeGraphOut, MoeLayerParams, MoeVars};
use crate::rng;
use crate::routing::RouterParams;
use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};

/// Resolved model shape (run config + actual vocabulary size).
#[derive(Debug, Clone)]
pub struct ModelDims {
    pub arch: Architecture,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub routed_d_ff: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub placement: Placement,
    pub shared_expert: bool,
    pub seq_len: usize,
}

impl ModelDims {
    pub fn from_run(cfg: &RunConfig, vocab_size: usize) -> ModelDims {
        ModelDims {
            arch: cfg.arch,
            vocab_size,
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            n_layers: cfg.n_layers,
            d_ff: cfg.d_ff,
            routed_d_ff: cfg.routed_d_ff(),
            n_experts: cfg.n_experts,
            top_k: cfg.top_k,
            placement: cfg.placement,
            shared_expert: cfg.shared_expert_on(),
            seq_len: cfg.seq_len,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn is_moe_block(&self, layer: usize) -> bool {
        self.arch.is_moe() && self.placement.is_moe_block(layer, self.n_layers)
    }

    pub fn moe_blocks(&self) -> Vec<usize> {
        (0..self.n_layers).filter(|&l| self.is_moe_block(l)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Norm<T: Scalar> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

impl<T: Scalar> Norm<T> {
    fn identity(d: usize) -> Norm<T> {
        Norm {
            gamma: Array1::from_elem(d, T::one()),
            beta: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttnParams<T: Scalar> {
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
}

#[derive(Debug, Clone)]
pub enum BlockFfn<T: Scalar> {
    Dense(FfnParams<T>),
    Moe(MoeLayerParams<T>),
}

#[derive(Debug, Clone)]
pub struct BlockParams<T: Scalar> {
    pub ln1: Norm<T>,
    pub attn: AttnParams<T>,
    pub ln2: Norm<T>,
    pub ffn: BlockFfn<T>,
}

#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    pub embed: Array2<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: Norm<T>,
    pub lm_head: Array2<T>,
}

struct Init {
    rng: rand_chacha::ChaCha8Rng,
}

impl Init {
    fn mat<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<T> {
        let normal = Normal::new(0.0, std).expect("positive std");
        let data: Vec<T> = (0..rows * cols)
            .map(|_| T::from_f64(normal.sample(&mut self.rng)))
            .collect();
        Array2::from_shape_vec((rows, cols), data).expect("shape matches data")
    }

    fn ffn<T: Scalar>(&mut self, d: usize, ff: usize, std: f64, out_std: f64) -> FfnParams<T> {
        FfnParams {
            w1: self.mat(d, ff, std),
            b1: Array1::zeros(ff),
            w2: self.mat(ff, d, out_std),
            b2: Array1::zeros(d),
        }
    }
}

/// Weight std for general matrices.
const INIT_STD: f64 = 0.02;

/// Initialize parameters for the given shape. All draws come from one
/// stream in a fixed traversal order; residual-output projections
/// (`wo`, every FFN's `w2`) are scaled down by `sqrt(2 * n_layers)` and
/// the lm head starts at zero.
pub fn init_params<T: Scalar>(dims: &ModelDims, seed: u64) -> ModelParams<T> {
    let mut init = Init { rng: rng::chacha(rng::mix64(seed, 0x6d6f64656c)) };
    let d = dims.d_model;
    let out_std = INIT_STD / (2.0 * dims.n_layers as f64).sqrt();

    let embed = init.mat(dims.vocab_size, d, INIT_STD);
    let mut blocks = Vec::with_capacity(dims.n_layers);
    for layer in 0..dims.n_layers {
        let attn = AttnParams {
            wq: init.mat(d, d, INIT_STD),
            wk: init.mat(d, d, INIT_STD),
            wv: init.mat(d, d, INIT_STD),
            wo: init.mat(d, d, out_std),
        };
        let ffn = if dims.is_moe_block(layer) {
            let router = RouterParams::new(init.mat(dims.n_experts, d, INIT_STD));
            let experts = (0..dims.n_experts)
                .map(|_| init.ffn(d, dims.routed_d_ff, INIT_STD, out_std))
                .collect();
            let shared = dims
                .shared_expert
                .then(|| init.ffn(d, dims.d_ff, INIT_STD, out_std));
            BlockFfn::Moe(MoeLayerParams { router, experts, shared })
        } else {
            BlockFfn::Dense(init.ffn(d, dims.d_ff, INIT_STD, out_std))
        };
        blocks.push(BlockParams {
            ln1: Norm::identity(d),
            attn,
            ln2: Norm::identity(d),
            ffn,
        });
    }
    ModelParams {
        embed,
        blocks,
        final_norm: Norm::identity(d),
        lm_head: Array2::zeros((d, dims.vocab_size)),
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Visit every parameter in registry order: name, shape, data.
    pub fn for_each(&self, mut f: impl FnMut(&str, &[usize], &[T])) {
        let emit1 = |name: String, a: &Array1<T>, f: &mut dyn FnMut(&str, &[usize], &[T])| {
            f(&name, a.shape(), a.as_slice().expect("standard layout"));
        };
        let emit2 = |name: String, a: &Array2<T>, f: &mut dyn FnMut(&str, &[usize], &[T])| {
            f(&name, a.shape(), a.as_slice().expect("standard layout"));
        };
        emit2("embed".into(), &self.embed, &mut f);
        for (l, b) in self.blocks.iter().enumerate() {
            emit1(format!("block{l}.ln1.gamma"), &b.ln1.gamma, &mut f);
            emit1(format!("block{l}.ln1.beta"), &b.ln1.beta, &mut f);
            emit2(format!("block{l}.attn.wq"), &b.attn.wq, &mut f);
            emit2(format!("block{l}.attn.wk"), &b.attn.wk, &mut f);
            emit2(format!("block{l}.attn.wv"), &b.attn.wv, &mut f);
            emit2(format!("block{l}.attn.wo"), &b.attn.wo, &mut f);
            emit1(format!("block{l}.ln2.gamma"), &b.ln2.gamma, &mut f);
            emit1(format!("block{l}.ln2.beta"), &b.ln2.beta, &mut f);
            match &b.ffn {
                BlockFfn::Dense(ffn) => {
                    emit2(format!("block{l}.ffn.w1"), &ffn.w1, &mut f);
                    emit1(format!("block{l}.ffn.b1"), &ffn.b1, &mut f);
                    emit2(format!("block{l}.ffn.w2"), &ffn.w2, &mut f);
                    emit1(format!("block{l}.ffn.b2"), &ffn.b2, &mut f);
                }
                BlockFfn::Moe(moe) => {
                    emit2(format!("block{l}.moe.router.w"), &moe.router.w, &mut f);
                    for (e, ex) in moe.experts.iter().enumerate() {
                        emit2(format!("block{l}.moe.expert{e}.w1"), &ex.w1, &mut f);
                        emit1(format!("block{l}.moe.expert{e}.b1"), &ex.b1, &mut f);
                        emit2(format!("block{l}.moe.expert{e}.w2"), &ex.w2, &mut f);
                        emit1(format!("block{l}.moe.expert{e}.b2"), &ex.b2, &mut f);
                    }
                    if let Some(sh) = &moe.shared {
                        emit2(format!("block{l}.moe.shared.w1"), &sh.w1, &mut f);
                        emit1(format!("block{l}.moe.shared.b1"), &sh.b1, &mut f);
                        emit2(format!("block{l}.moe.shared.w2"), &sh.w2, &mut f);
                        emit1(format!("block{l}.moe.shared.b2"), &sh.b2, &mut f);
                    }
                }
            }
        }
        emit1("final_norm.gamma".into(), &self.final_norm.gamma, &mut f);
        emit1("final_norm.beta".into(), &self.final_norm.beta, &mut f);
        emit2("lm_head".into(), &self.lm_head, &mut f);
    }

    /// Visit every parameter mutably, same order and names as `for_each`.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut [T])) {
        f("embed", self.embed.as_slice_mut().expect("standard layout"));
        for (l, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{l}.ln1.gamma"), b.ln1.gamma.as_slice_mut().unwrap());
            f(&format!("block{l}.ln1.beta"), b.ln1.beta.as_slice_mut().unwrap());
            f(&format!("block{l}.attn.wq"), b.attn.wq.as_slice_mut().unwrap());
            f(&format!("block{l}.attn.wk"), b.attn.wk.as_slice_mut().unwrap());
            f(&format!("block{l}.attn.wv"), b.attn.wv.as_slice_mut().unwrap());
            f(&format!("block{l}.attn.wo"), b.attn.wo.as_slice_mut().unwrap());
            f(&format!("block{l}.ln2.gamma"), b.ln2.gamma.as_slice_mut().unwrap());
            f(&format!("block{l}.ln2.beta"), b.ln2.beta.as_slice_mut().unwrap());
            match &mut b.ffn {
                BlockFfn::Dense(ffn) => {
                    f(&format!("block{l}.ffn.w1"), ffn.w1.as_slice_mut().unwrap());
                    f(&format!("block{l}.ffn.b1"), ffn.b1.as_slice_mut().unwrap());
                    f(&format!("block{l}.ffn.w2"), ffn.w2.as_slice_mut().unwrap());
                    f(&format!("block{l}.ffn.b2"), ffn.b2.as_slice_mut().unwrap());
                }
                BlockFfn::Moe(moe) => {
                    f(&format!("block{l}.moe.router.w"), moe.router.w.as_slice_mut().unwrap());
                    for (e, ex) in moe.experts.iter_mut().enumerate() {
                        f(&format!("block{l}.moe.expert{e}.w1"), ex.w1.as_slice_mut().unwrap());
                        f(&format!("block{l}.moe.expert{e}.b1"), ex.b1.as_slice_mut().unwrap());
                        f(&format!("block{l}.moe.expert{e}.w2"), ex.w2.as_slice_mut().unwrap());
                        f(&format!("block{l}.moe.expert{e}.b2"), ex.b2.as_slice_mut().unwrap());
                    }
                    if let Some(sh) = &mut moe.shared {
                        f(&format!("block{l}.moe.shared.w1"), sh.w1.as_slice_mut().unwrap());
                        f(&format!("block{l}.moe.shared.b1"), sh.b1.as_slice_mut().unwrap());
                        f(&format!("block{l}.moe.shared.w2"), sh.w2.as_slice_mut().unwrap());
                        f(&format!("block{l}.moe.shared.b2"), sh.b2.as_slice_mut().unwrap());
                    }
                }
            }
        }
        f("final_norm.gamma", self.final_norm.gamma.as_slice_mut().unwrap());
        f("final_norm.beta", self.final_norm.beta.as_slice_mut().unwrap());
        f("lm_head", self.lm_head.as_slice_mut().unwrap());
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _, data| n += data.len());
        n
    }
}

struct AttnVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
}

enum BlockFfnVars {
    Dense(FfnVars),
    Moe(MoeVars),
}

struct BlockVars {
    ln1: (Var, Var),
    attn: AttnVars,
    ln2: (Var, Var),
    ffn: BlockFfnVars,
}

struct ModelVars {
    embed: Var,
    blocks: Vec<BlockVars>,
    final_norm: (Var, Var),
    lm_head: Var,
}

struct Binder<'g, T: Scalar> {
    g: &'g mut Graph<T>,
    bound: Vec<(String, Var)>,
}

impl<'g, T: Scalar> Binder<'g, T> {
    fn leaf1(&mut self, name: String, a: &Array1<T>) -> Var {
        let v = self.g.leaf(a.clone().into_dyn());
        self.bound.push((name, v));
        v
    }

    fn leaf2(&mut self, name: String, a: &Array2<T>) -> Var {
        let v = self.g.leaf(a.clone().into_dyn());
        self.bound.push((name, v));
        v
    }

    fn norm(&mut self, prefix: &str, n: &Norm<T>) -> (Var, Var) {
        (
            self.leaf1(format!("{prefix}.gamma"), &n.gamma),
            self.leaf1(format!("{prefix}.beta"), &n.beta),
        )
    }

    fn ffn(&mut self, prefix: &str, f: &FfnParams<T>) -> FfnVars {
        FfnVars {
            w1: self.leaf2(format!("{prefix}.w1"), &f.w1),
            b1: self.leaf1(format!("{prefix}.b1"), &f.b1),
            w2: self.leaf2(format!("{prefix}.w2"), &f.w2),
            b2: self.leaf1(format!("{prefix}.b2"), &f.b2),
        }
    }
}

fn bind_model<T: Scalar>(g: &mut Graph<T>, params: &ModelParams<T>) -> (ModelVars, Vec<(String, Var)>) {
    let mut b = Binder { g, bound: Vec::new() };
    let embed = b.leaf2("embed".into(), &params.embed);
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for (l, block) in params.blocks.iter().enumerate() {
        let ln1 = b.norm(&format!("block{l}.ln1"), &block.ln1);
        let attn = AttnVars {
            wq: b.leaf2(format!("block{l}.attn.wq"), &block.attn.wq),
            wk: b.leaf2(format!("block{l}.attn.wk"), &block.attn.wk),
            wv: b.leaf2(format!("block{l}.attn.wv"), &block.attn.wv),
            wo: b.leaf2(format!("block{l}.attn.wo"), &block.attn.wo),
        };
        let ln2 = b.norm(&format!("block{l}.ln2"), &block.ln2);
        let ffn = match &block.ffn {
            BlockFfn::Dense(f) => BlockFfnVars::Dense(b.ffn(&format!("block{l}.ffn"), f)),
            BlockFfn::Moe(moe) => {
                let router_w = b.leaf2(format!("block{l}.moe.router.w"), &moe.router.w);
                let experts = moe
                    .experts
                    .iter()
                    .enumerate()
                    .map(|(e, ex)| b.ffn(&format!("block{l}.moe.expert{e}"), ex))
                    .collect();
                let shared = moe
                    .shared
                    .as_ref()
                    .map(|sh| b.ffn(&format!("block{l}.moe.shared"), sh));
                BlockFfnVars::Moe(MoeVars { router_w, experts, shared })
            }
        };
        blocks.push(BlockVars { ln1, attn, ln2, ffn });
    }
    let final_norm = b.norm("final_norm", &params.final_norm);
    let lm_head = b.leaf2("lm_head".into(), &params.lm_head);
    let bound = b.bound;
    (
        ModelVars { embed, blocks, final_norm, lm_head },
        bound,
    )
}

fn attn_graph<T: Scalar>(
    g: &mut Graph<T>,
    x_ln: Var,
    vars: &AttnVars,
    seq_len: usize,
    n_heads: usize,
    causal: Var,
) -> Var {
    let m = g.value(x_ln).shape()[0];
    let d = g.value(x_ln).shape()[1];
    let seqs = m / seq_len;
    let dh = d / n_heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let positions: Vec<usize> = (0..seq_len).collect();

    let q = g.matmul(x_ln, vars.wq);
    let k = g.matmul(x_ln, vars.wk);
    let v = g.matmul(x_ln, vars.wv);

    let mut seq_outs = Vec::with_capacity(seqs);
    for s in 0..seqs {
        let rows: Vec<usize> = (s * seq_len..(s + 1) * seq_len).collect();
        let qs = g.gather_rows(q, &rows);
        let ks = g.gather_rows(k, &rows);
        let vs = g.gather_rows(v, &rows);
        let mut head_outs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = g.slice_cols(qs, h * dh, dh);
            let kh = g.slice_cols(ks, h * dh, dh);
            let vh = g.slice_cols(vs, h * dh, dh);
            let qr = g.rope(qh, &positions);
            let kr = g.rope(kh, &positions);
            let kt = g.transpose(kr);
            let scores = g.matmul(qr, kt);
            let scaled = g.scale(scores, scale);
            let masked = g.add(scaled, causal);
            let probs = g.softmax_rows(masked);
            head_outs.push(g.matmul(probs, vh));
        }
        seq_outs.push(g.concat_cols(&head_outs));
    }
    let ctx = if seq_outs.len() == 1 {
        seq_outs[0]
    } else {
        g.concat_rows(&seq_outs)
    };
    g.matmul(ctx, vars.wo)
}

/// One MoE sublayer's routing record within a forward pass.
pub struct MoeLayerOut {
    pub layer: usize,
    pub graph: MoeGraphOut,
}

/// Forward-pass handles: the logits node, every bound parameter (name ->
/// leaf) for gradient extraction, and per-MoE-layer routing records.
pub struct ForwardOut {
    pub logits: Var,
    pub binding: Vec<(String, Var)>,
    pub moe_layers: Vec<MoeLayerOut>,
}

/// Build the full forward graph over a flat token batch
/// (`tokens.len() = batch_seqs * seq_len`).
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    dims: &ModelDims,
    tokens: &[u32],
    masks: Option<&MaskTable>,
) -> Result<ForwardOut> {
    let seq_len = dims.seq_len;
    if tokens.is_empty() || tokens.len() % seq_len != 0 {
        return Err(Error::Shape(format!(
            "token count {} is not a positive multiple of seq_len {seq_len}",
            tokens.len()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= dims.vocab_size) {
        return Err(Error::Corpus(format!(
            "token id {bad} outside vocabulary of {}",
            dims.vocab_size
        )));
    }
    if dims.arch.uses_masks() && masks.is_none() {
        return Err(Error::Mask(format!(
            "architecture {} requires a mask table",
            dims.arch
        )));
    }

    let (vars, binding) = bind_model(g, params);

    let mut causal_mat = Array2::<T>::zeros((seq_len, seq_len));
    for i in 0..seq_len {
        for j in (i + 1)..seq_len {
            causal_mat[(i, j)] = T::from_f64(ATTN_NEG);
        }
    }
    let causal = g.constant(causal_mat.into_dyn());

    let token_rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut x = g.gather_rows(vars.embed, &token_rows);

    let mut moe_layers = Vec::new();
    for (l, bv) in vars.blocks.iter().enumerate() {
        let ln1 = g.layer_norm(x, bv.ln1.0, bv.ln1.1);
        let attn_out = attn_graph(g, ln1, &bv.attn, seq_len, dims.n_heads, causal);
        x = g.add(x, attn_out);

        let ln2 = g.layer_norm(x, bv.ln2.0, bv.ln2.1);
        let ffn_out = match &bv.ffn {
            BlockFfnVars::Dense(fv) => ffn_graph(g, ln2, fv),
            BlockFfnVars::Moe(mv) => {
                let table = if dims.arch.uses_masks() { masks } else { None };
                let out = moe_graph(g, ln2, mv, tokens, table, dims.top_k)?;
                let var = out.out;
                moe_layers.push(MoeLayerOut { layer: l, graph: out });
                var
            }
        };
        x = g.add(x, ffn_out);
    }

    let xf = g.layer_norm(x, vars.final_norm.0, vars.final_norm.1);
    let logits = g.matmul(xf, vars.lm_head);
    Ok(ForwardOut { logits, binding, moe_layers })
}

/// Loss nodes assembled from a forward pass.
pub struct LossVars {
    pub total: Var,
    pub lm: Var,
    pub balance: Option<Var>,
}

/// Cross-entropy plus (for MoE forwards) the mean balance loss across MoE
/// layers, combined with unit coefficient.
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    fwd: &ForwardOut,
    targets: &[usize],
    n_experts: usize,
) -> LossVars {
    let lm = g.cross_entropy_mean(fwd.logits, targets);
    if fwd.moe_layers.is_empty() {
        return LossVars { total: lm, lm, balance: None };
    }
    let parts: Vec<Var> = fwd
        .moe_layers
        .iter()
        .map(|ml| balance_loss_graph(g, ml.graph.probs, &ml.graph.balance_rows, n_experts))
        .collect();
    let bal = mean_scalars(g, &parts);
    let total = g.add(lm, bal);
    LossVars { total, lm, balance: Some(bal) }
}
