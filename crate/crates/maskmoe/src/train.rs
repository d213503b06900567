//! Training loop: shuffled-window batching, one optimizer step per batch,
//! per-step metrics, periodic routing logs, and resumable checkpoints.
//!
//! The batch order is a pure function of `(seed, epoch)`, so a resumed
//! run draws exactly the batches the uninterrupted run would have drawn
//! and lands on bit-identical parameters.

use crate::autograd::{Graph, Scalar};
use crate::checkpoint::{self, CheckpointMeta, NO_MASK_DIGEST};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::maskgen::MaskTable;
use crate::model::{forward_graph, init_params, loss_graph, ModelDims, ModelParams};
use crate::optim::{clip_global_norm, cosine_lr, AdamW, GradMap, ADAM_EPS};
use crate::rng;
use crate::routing::RoutingDecision;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Stream tag separating batch-order draws from model-init draws.
const DATA_STREAM: u64 = 0x64617461;

/// Deals non-overlapping `(seq_len + 1)`-token windows in an order
/// shuffled per epoch.
pub struct Batcher {
    n_windows: usize,
    win_len: usize,
    seq_len: usize,
    batch_seqs: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<u32>,
}

/// One training batch: flat inputs `[batch_seqs * seq_len]` and the
/// same-shaped next-token targets.
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<usize>,
}

impl Batcher {
    pub fn new(n_tokens: usize, seq_len: usize, batch_seqs: usize, seed: u64) -> Result<Batcher> {
        let win_len = seq_len + 1;
        let n_windows = n_tokens / win_len;
        if n_windows < batch_seqs {
            return Err(Error::Corpus(format!(
                "corpus of {n_tokens} tokens yields {n_windows} windows of {win_len}, \
                 fewer than batch_seqs {batch_seqs}"
            )));
        }
        let mut b = Batcher {
            n_windows,
            win_len,
            seq_len,
            batch_seqs,
            seed,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        };
        b.reshuffle();
        Ok(b)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n_windows as u32).collect();
        let mut rng = rng::chacha(rng::mix64(self.seed, self.epoch));
        rng::shuffle(&mut rng, &mut self.order);
    }

    pub fn state(&self) -> (u64, u64) {
        (self.epoch, self.cursor as u64)
    }

    pub fn restore(&mut self, epoch: u64, cursor: u64) {
        self.epoch = epoch;
        self.cursor = cursor as usize;
        self.reshuffle();
    }

    pub fn next_batch(&mut self, tokens: &[u32]) -> Batch {
        if self.cursor + self.batch_seqs > self.n_windows {
            self.epoch += 1;
            self.cursor = 0;
            self.reshuffle();
        }
        let mut inputs = Vec::with_capacity(self.batch_seqs * self.seq_len);
        let mut targets = Vec::with_capacity(self.batch_seqs * self.seq_len);
        for &w in &self.order[self.cursor..self.cursor + self.batch_seqs] {
            let start = w as usize * self.win_len;
            let win = &tokens[start..start + self.win_len];
            inputs.extend_from_slice(&win[..self.seq_len]);
            targets.extend(win[1..].iter().map(|&t| t as usize));
        }
        self.cursor += self.batch_seqs;
        Batch { inputs, targets }
    }
}

/// Per-step training record, one JSON line in `metrics.jsonl`.
/// `bal_loss` is 0 for architectures without a balance term, keeping the
/// line schema uniform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub lm_loss: f64,
    pub bal_loss: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// One routed token occurrence, one JSON line in `routing.jsonl`.
/// `experts` lists the selected experts in descending gate order, so
/// `experts[0]` is the top-1 assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingLine {
    pub step: usize,
    pub layer: usize,
    pub token: u32,
    pub experts: Vec<usize>,
}

/// One forward/backward/update. Returns the step's losses and each MoE
/// layer's routing decisions.
///
/// `grads` is a workspace reused across steps so gradient buffers are
/// allocated once; its contents on entry are irrelevant.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    params: &mut ModelParams<T>,
    dims: &ModelDims,
    masks: Option<&MaskTable>,
    batch: &Batch,
    opt: &mut AdamW,
    grads: &mut GradMap,
    lr: f64,
    clip: f64,
    step: usize,
) -> Result<(StepStats, Vec<(usize, Vec<RoutingDecision>)>)> {
    let mut g = Graph::<T>::new();
    let fwd = forward_graph(&mut g, params, dims, &batch.inputs, masks)?;
    let loss = loss_graph(&mut g, &fwd, &batch.targets, dims.n_experts);

    let lm_loss = g.scalar(loss.lm);
    let bal_loss = loss.balance.map_or(0.0, |b| g.scalar(b));
    let total = g.scalar(loss.total);
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "step {step}: loss {total} (lm {lm_loss}, balance {bal_loss})"
        )));
    }

    g.backward(loss.total);
    let mut live: BTreeSet<&str> = BTreeSet::new();
    for (name, var) in &fwd.binding {
        if let Some(grad) = g.grad(*var) {
            live.insert(name.as_str());
            let buf = grads.entry(name.clone()).or_default();
            buf.clear();
            match grad.as_slice() {
                Some(src) => buf.extend(src.iter().map(|x| x.into_f64())),
                None => buf.extend(grad.iter().map(|x| x.into_f64())),
            }
        }
    }
    // Unselected experts produce no gradient this step; their stale
    // buffers must not leak into the update.
    grads.retain(|k, _| live.contains(k.as_str()));
    let grad_norm = clip_global_norm(grads, clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("step {step}: gradient norm {grad_norm}")));
    }
    opt.update(params, grads, lr);

    let decisions = fwd
        .moe_layers
        .into_iter()
        .map(|ml| (ml.layer, ml.graph.decisions))
        .collect();
    let stats = StepStats { step, lm_loss, bal_loss, total, lr, grad_norm };
    Ok((stats, decisions))
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Log routing decisions every this many steps (0 disables).
    pub routing_log_every: usize,
    /// Write a mid-run checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
    /// Resume from `out_dir/model.ckpt` when present.
    pub resume: bool,
    /// Stop this session after at most this many steps (the run can be
    /// resumed later); `None` trains to `cfg.steps`.
    pub session_steps: Option<usize>,
    /// Suppress progress lines on stderr.
    pub quiet: bool,
}

impl TrainOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> TrainOptions {
        TrainOptions {
            out_dir: out_dir.into(),
            routing_log_every: 10,
            checkpoint_every: 0,
            resume: false,
            session_steps: None,
            quiet: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub steps_run: usize,
    pub final_stats: Option<StepStats>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub routing_log: PathBuf,
    pub wall_seconds: f64,
}

/// Drop log lines at or past `from_step` so a resumed run's logs match an
/// uninterrupted run's.
fn truncate_log(path: &Path, from_step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<String> = BufReader::new(File::open(path)?)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|line| {
            serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("step").and_then(|s| s.as_u64()))
                .is_some_and(|s| (s as usize) < from_step)
        })
        .collect();
    let mut w = BufWriter::new(File::create(path)?);
    for line in kept {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Train a model from scratch (or resume) over a pre-encoded token
/// stream. Returns the trained parameters and where the artifacts went.
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    vocab_size: usize,
    tokens: &[u32],
    masks: Option<&MaskTable>,
    opts: &TrainOptions,
) -> Result<(ModelParams<T>, TrainArtifacts)> {
    cfg.validate()?;
    if cfg.arch.uses_masks() && masks.is_none() {
        return Err(Error::Mask(format!("architecture {} requires masks", cfg.arch)));
    }
    if let Some(t) = masks {
        if t.n_experts != cfg.n_experts {
            return Err(Error::Mask(format!(
                "mask table built for {} experts, config has {}",
                t.n_experts, cfg.n_experts
            )));
        }
    }
    if T::DTYPE != cfg.dtype.dtype() {
        return Err(Error::Config(format!(
            "config dtype {:?} does not match requested {:?}",
            cfg.dtype.dtype(),
            T::DTYPE
        )));
    }

    std::fs::create_dir_all(&opts.out_dir)?;
    let ckpt_path = opts.out_dir.join("model.ckpt");
    let metrics_path = opts.out_dir.join("metrics.jsonl");
    let routing_path = opts.out_dir.join("routing.jsonl");

    let dims = ModelDims::from_run(cfg, vocab_size);
    let mut params = init_params::<T>(&dims, cfg.seed);
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, ADAM_EPS, cfg.weight_decay);
    let mut batcher = Batcher::new(
        tokens.len(),
        cfg.seq_len,
        cfg.batch_seqs,
        rng::mix64(cfg.seed, DATA_STREAM),
    )?;

    let config_digest = cfg.digest();
    let mask_digest = masks.map_or(NO_MASK_DIGEST, |t| t.digest());

    let mut start_step = 0usize;
    if opts.resume && ckpt_path.exists() {
        let meta = checkpoint::load(&ckpt_path, &config_digest, &mask_digest, &mut params, &mut opt)?;
        start_step = meta.step as usize;
        batcher.restore(meta.epoch, meta.cursor);
        truncate_log(&metrics_path, start_step)?;
        truncate_log(&routing_path, start_step)?;
        if !opts.quiet {
            eprintln!("resumed {} at step {start_step}", ckpt_path.display());
        }
    } else {
        // fresh run: stale logs would corrupt downstream analysis
        let _ = std::fs::remove_file(&metrics_path);
        let _ = std::fs::remove_file(&routing_path);
    }

    let mut metrics_w = BufWriter::new(
        OpenOptions::new().create(true).append(true).open(&metrics_path)?,
    );
    let mut routing_w = BufWriter::new(
        OpenOptions::new().create(true).append(true).open(&routing_path)?,
    );

    let warmup = cfg.warmup_steps();
    let end_step = match opts.session_steps {
        Some(cap) => cfg.steps.min(start_step + cap),
        None => cfg.steps,
    };
    let started = Instant::now();
    let mut final_stats = None;
    let mut grads = GradMap::new();
    for step in start_step..end_step {
        let lr = cosine_lr(step, cfg.steps, warmup, cfg.lr_peak, cfg.lr_min());
        let batch = batcher.next_batch(tokens);
        let (stats, decisions) = train_step(
            &mut params, &dims, masks, &batch, &mut opt, &mut grads, lr, cfg.grad_clip, step,
        )?;

        if let Some(table) = masks {
            for (layer, decs) in &decisions {
                for d in decs {
                    let mv = table.get(d.token_id);
                    if let Some(&bad) = d.selected.iter().find(|&&e| !mv.is_visible(e)) {
                        return Err(Error::Routing(format!(
                            "step {step} layer {layer}: token {} routed to hidden expert {bad}",
                            d.token_id
                        )));
                    }
                }
            }
        }

        serde_json::to_writer(&mut metrics_w, &stats)?;
        metrics_w.write_all(b"\n")?;

        if opts.routing_log_every > 0 && step % opts.routing_log_every == 0 {
            for (layer, decs) in &decisions {
                for d in decs {
                    let line = RoutingLine {
                        step,
                        layer: *layer,
                        token: d.token_id,
                        experts: d.selected.clone(),
                    };
                    serde_json::to_writer(&mut routing_w, &line)?;
                    routing_w.write_all(b"\n")?;
                }
            }
        }

        if opts.checkpoint_every > 0 && (step + 1) % opts.checkpoint_every == 0 {
            metrics_w.flush()?;
            routing_w.flush()?;
            let (epoch, cursor) = batcher.state();
            let meta = CheckpointMeta {
                dtype: T::DTYPE,
                step: (step + 1) as u64,
                epoch,
                cursor,
                config_digest,
                mask_digest,
            };
            checkpoint::save(&ckpt_path, &meta, &params, &opt)?;
        }

        if !opts.quiet && (step % 50 == 0 || step + 1 == end_step) {
            eprintln!(
                "step {step}/{} lm {:.4} total {:.4} lr {:.2e} ({:.0} ms/step)",
                cfg.steps,
                stats.lm_loss,
                stats.total,
                stats.lr,
                started.elapsed().as_millis() as f64 / (step - start_step + 1) as f64
            );
        }
        final_stats = Some(stats);
    }

    metrics_w.flush()?;
    routing_w.flush()?;
    let (epoch, cursor) = batcher.state();
    let meta = CheckpointMeta {
        dtype: T::DTYPE,
        step: end_step as u64,
        epoch,
        cursor,
        config_digest,
        mask_digest,
    };
    checkpoint::save(&ckpt_path, &meta, &params, &opt)?;

    Ok((
        params,
        TrainArtifacts {
            steps_run: end_step - start_step,
            final_stats,
            checkpoint: ckpt_path,
            metrics: metrics_path,
            routing_log: routing_path,
            wall_seconds: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Read back a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<StepStats>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Read back a routing log.
pub fn read_routing_log(path: &Path) -> Result<Vec<RoutingLine>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Architecture;
    use crate::corpus::{split_by_coverage, FreqTable};
    use crate::maskgen::{build_mask_table, MaskConfig};

    fn tiny_cfg(arch: Architecture) -> RunConfig {
        let mut cfg = RunConfig::new(arch);
        cfg.dtype = crate::config::DtypeChoice::F64;
        cfg.max_vocab = 19;
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.n_layers = 2;
        cfg.d_ff = 8;
        cfg.n_experts = 4;
        cfg.top_k = 1;
        cfg.v_a = 2;
        cfg.v_b = 1;
        cfg.seq_len = 6;
        cfg.batch_seqs = 3;
        cfg.steps = 12;
        cfg.lr_peak = 3e-3;
        cfg.validate().unwrap();
        cfg
    }

    fn toy_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
        // token t follows (t * 3 + 1) mod vocab with occasional noise, so
        // there is structure to learn
        let mut rng = rng::chacha(seed);
        let mut cur = 1u32;
        (0..n)
            .map(|_| {
                let out = cur;
                cur = if rng::draw_index(&mut rng, 10) < 8 {
                    (cur * 3 + 1) % vocab as u32
                } else {
                    rng::draw_index(&mut rng, vocab) as u32
                };
                out
            })
            .collect()
    }

    fn toy_masks(cfg: &RunConfig, vocab: usize) -> MaskTable {
        let counts: Vec<u64> = (0..vocab).map(|i| 1000 / (i as u64 + 1) + 1).collect();
        let split = split_by_coverage(&FreqTable::from_counts(counts), cfg.coverage_p).unwrap();
        let mc = MaskConfig { n_experts: cfg.n_experts, v_a: cfg.v_a, v_b: cfg.v_b };
        build_mask_table(vocab, &split, &mc, cfg.mask_seed).unwrap()
    }

    #[test]
    fn batcher_covers_every_window_once_per_epoch() {
        let tokens: Vec<u32> = (0..70).map(|i| i as u32).collect();
        let mut b = Batcher::new(tokens.len(), 6, 2, 5).unwrap();
        assert_eq!(b.n_windows, 10);
        let mut starts = Vec::new();
        for _ in 0..5 {
            let batch = b.next_batch(&tokens);
            assert_eq!(batch.inputs.len(), 12);
            assert_eq!(batch.targets.len(), 12);
            for s in batch.inputs.chunks(6).map(|c| c[0]) {
                starts.push(s);
            }
            // target is the next token within the same window
            for (chunk_i, chunk_t) in batch.inputs.chunks(6).zip(batch.targets.chunks(6)) {
                for i in 0..5 {
                    assert_eq!(chunk_i[i + 1] as usize, chunk_t[i]);
                }
            }
        }
        starts.sort_unstable();
        let expected: Vec<u32> = (0..10).map(|w| w * 7).collect();
        assert_eq!(starts, expected, "each window exactly once per epoch");

        let (epoch0, _) = b.state();
        assert_eq!(epoch0, 0);
        b.next_batch(&tokens);
        assert_eq!(b.state().0, 1, "wraps into a new epoch");
    }

    #[test]
    fn batcher_restore_replays_the_same_batches() {
        let tokens: Vec<u32> = (0..700).map(|i| (i % 97) as u32).collect();
        let mut a = Batcher::new(tokens.len(), 6, 4, 9).unwrap();
        for _ in 0..30 {
            a.next_batch(&tokens);
        }
        let (epoch, cursor) = a.state();
        let mut b = Batcher::new(tokens.len(), 6, 4, 9).unwrap();
        b.restore(epoch, cursor);
        for _ in 0..10 {
            let ba = a.next_batch(&tokens);
            let bb = b.next_batch(&tokens);
            assert_eq!(ba.inputs, bb.inputs);
            assert_eq!(ba.targets, bb.targets);
        }
    }

    #[test]
    fn loss_decreases_on_learnable_toy_data() {
        let mut cfg = tiny_cfg(Architecture::Dense);
        cfg.steps = 150;
        cfg.batch_seqs = 8;
        cfg.lr_peak = 5e-3;
        let tokens = toy_tokens(8000, cfg.max_vocab, 3);
        let dir = tempfile::tempdir().unwrap();
        let mut opts = TrainOptions::new(dir.path());
        opts.quiet = true;
        let (_, art) = train::<f64>(&cfg, cfg.max_vocab, &tokens, None, &opts).unwrap();

        let metrics = read_metrics(&art.metrics).unwrap();
        assert_eq!(metrics.len(), 150);
        let first: f64 = metrics[..5].iter().map(|m| m.lm_loss).sum::<f64>() / 5.0;
        let last: f64 = metrics[145..].iter().map(|m| m.lm_loss).sum::<f64>() / 5.0;
        assert!(
            last < first * 0.7,
            "lm loss should fall on toy data: first {first}, last {last}"
        );
        for m in &metrics {
            assert!(m.total.is_finite());
            assert_eq!(m.bal_loss, 0.0, "dense runs carry no balance loss");
        }
    }

    #[test]
    fn maskmoe_run_logs_routing_and_respects_masks() {
        let cfg = tiny_cfg(Architecture::MaskMoe);
        let tokens = toy_tokens(2000, cfg.max_vocab, 5);
        let masks = toy_masks(&cfg, cfg.max_vocab);
        let dir = tempfile::tempdir().unwrap();
        let mut opts = TrainOptions::new(dir.path());
        opts.quiet = true;
        opts.routing_log_every = 5;
        let (_, art) = train::<f64>(&cfg, cfg.max_vocab, &tokens, Some(&masks), &opts).unwrap();

        let metrics = read_metrics(&art.metrics).unwrap();
        // batches made purely of V=1 tokens are balance-exempt, so zero is
        // legal for a step, but not for the whole run
        assert!(metrics.iter().all(|m| m.bal_loss >= 0.0 && m.bal_loss.is_finite()));
        assert!(metrics.iter().any(|m| m.bal_loss > 0.0));

        let lines = read_routing_log(&art.routing_log).unwrap();
        // steps 0,5,10 for the single MoE layer under last placement,
        // one line per token occurrence
        let per_step = cfg.batch_seqs * cfg.seq_len;
        assert_eq!(lines.len(), 3 * per_step);
        for line in &lines {
            assert!(matches!(line.step, 0 | 5 | 10));
            assert_eq!(line.layer, cfg.n_layers - 1);
            assert_eq!(line.experts.len(), cfg.top_k);
            for e in &line.experts {
                assert!(
                    masks.get(line.token).is_visible(*e),
                    "logged expert must be visible"
                );
            }
        }
    }

    #[test]
    fn resume_is_bit_exact() {
        let mut cfg = tiny_cfg(Architecture::MaskMoe);
        cfg.steps = 10;
        let tokens = toy_tokens(2000, cfg.max_vocab, 7);
        let masks = toy_masks(&cfg, cfg.max_vocab);

        // uninterrupted
        let dir_a = tempfile::tempdir().unwrap();
        let mut opts_a = TrainOptions::new(dir_a.path());
        opts_a.quiet = true;
        let (pa, art_a) = train::<f64>(&cfg, cfg.max_vocab, &tokens, Some(&masks), &opts_a).unwrap();

        // interrupted at 6, resumed to 10
        let dir_b = tempfile::tempdir().unwrap();
        let mut opts_b = TrainOptions::new(dir_b.path());
        opts_b.quiet = true;
        opts_b.session_steps = Some(6);
        let (_, art_short) =
            train::<f64>(&cfg, cfg.max_vocab, &tokens, Some(&masks), &opts_b).unwrap();
        assert_eq!(art_short.steps_run, 6);
        let mut opts_resume = opts_b.clone();
        opts_resume.resume = true;
        opts_resume.session_steps = None;
        let (pb, art_b) =
            train::<f64>(&cfg, cfg.max_vocab, &tokens, Some(&masks), &opts_resume).unwrap();
        assert_eq!(art_b.steps_run, 4);

        let bits = |p: &ModelParams<f64>| {
            let mut v = Vec::new();
            p.for_each(|_, _, d| v.extend(d.iter().map(|x| x.to_bits())));
            v
        };
        assert_eq!(bits(&pa), bits(&pb), "resume must reproduce the exact run");

        let ma = read_metrics(&art_a.metrics).unwrap();
        let mb = read_metrics(&art_b.metrics).unwrap();
        assert_eq!(ma.len(), mb.len());
        for (a, b) in ma.iter().zip(mb.iter()) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.lm_loss.to_bits(), b.lm_loss.to_bits());
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
    }

    #[test]
    fn train_rejects_mismatched_setups() {
        let cfg = tiny_cfg(Architecture::MaskMoe);
        let tokens = toy_tokens(2000, cfg.max_vocab, 7);
        let dir = tempfile::tempdir().unwrap();
        let mut opts = TrainOptions::new(dir.path());
        opts.quiet = true;

        // masks required
        assert!(train::<f64>(&cfg, cfg.max_vocab, &tokens, None, &opts).is_err());
        // dtype mismatch
        let masks = toy_masks(&cfg, cfg.max_vocab);
        assert!(train::<f32>(&cfg, cfg.max_vocab, &tokens, Some(&masks), &opts).is_err());
        // corpus too small
        assert!(train::<f64>(&cfg, cfg.max_vocab, &tokens[..10], Some(&masks), &opts).is_err());
    }
}
