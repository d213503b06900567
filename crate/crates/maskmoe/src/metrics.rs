//! Evaluation and analysis: perplexity, negative log-likelihood split by
//! target-token frequency class, expert load statistics, and routing
//! fluctuation rates derived from training logs.
//!
//! All likelihood arithmetic happens in f64 from the raw logits, outside
//! the autograd machinery, so it doubles as an independent check on the
//! training-side loss.

use crate::autograd::{Graph, Scalar};
use crate::corpus::{FrequencySplit, TokenClass};
use crate::error::{Error, Result};
use crate::losses::load_balance_loss;
use crate::maskgen::MaskTable;
use crate::model::{forward_graph, ModelDims, ModelParams};
use crate::train::RoutingLine;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassNll {
    pub tokens: usize,
    pub mean_nll: f64,
    pub perplexity: f64,
}

/// Top-1 assignment histogram for one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerLoad {
    pub layer: usize,
    pub counts: Vec<u64>,
    pub cv: f64,
}

/// Coefficient of variation of a count histogram: population stddev over
/// mean. Zero when every count is equal or the histogram is empty.
pub fn count_cv(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if counts.is_empty() || total == 0 {
        return 0.0;
    }
    let mean = total as f64 / counts.len() as f64;
    let var = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / counts.len() as f64;
    var.sqrt() / mean
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalStats {
    pub tokens: usize,
    pub mean_nll: f64,
    pub perplexity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frequent: Option<ClassNll>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub infrequent: Option<ClassNll>,
    /// Mean balance loss over MoE layers, on balance-eligible rows.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub balance: Option<f64>,
    /// Fraction of top-1 assignments landing on each expert, aggregated
    /// over MoE layers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expert_load: Option<Vec<f64>>,
    /// Coefficient of variation of the aggregate top-1 load histogram.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub load_cv: Option<f64>,
    /// Top-1 counts per MoE layer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub load_per_layer: Vec<LayerLoad>,
    /// Aggregate top-1 counts restricted to frequent routed tokens;
    /// present when a frequency split is supplied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub load_frequent: Option<Vec<u64>>,
    /// Aggregate top-1 counts restricted to infrequent routed tokens.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub load_infrequent: Option<Vec<u64>>,
}

impl EvalStats {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EvalStats> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

fn row_nll(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Score a token stream with fixed non-overlapping context windows of
/// `dims.seq_len + 1`; every window position contributes one next-token
/// prediction.
///
/// Class-conditional NLL is keyed by the *target* token's frequency
/// class; class-conditional expert load is keyed by the *routed* token
/// (the input at the position being dispatched), since that is what the
/// mask conditions on.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    dims: &ModelDims,
    masks: Option<&MaskTable>,
    tokens: &[u32],
    split: Option<&FrequencySplit>,
    batch_seqs: usize,
) -> Result<EvalStats> {
    let win_len = dims.seq_len + 1;
    let n_windows = tokens.len() / win_len;
    if n_windows == 0 {
        return Err(Error::Corpus(format!(
            "need at least {win_len} tokens to evaluate, got {}",
            tokens.len()
        )));
    }
    if batch_seqs == 0 {
        return Err(Error::InvalidArgument("batch_seqs must be positive".into()));
    }

    let n = dims.n_experts;
    let mut nll_sum = 0.0f64;
    let mut count = 0usize;
    let mut class_sum = [0.0f64; 2];
    let mut class_count = [0usize; 2];
    let mut bal_sum = 0.0f64;
    let mut bal_batches = 0usize;
    let mut load_counts: Vec<u64> = vec![0; n];
    let mut layer_counts: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    let mut class_load = [vec![0u64; n], vec![0u64; n]];
    let mut any_moe = false;

    let class_of = |sp: &FrequencySplit, t: u32| match sp.class(t) {
        TokenClass::Frequent => 0usize,
        TokenClass::Infrequent => 1,
    };

    for chunk in (0..n_windows).collect::<Vec<_>>().chunks(batch_seqs) {
        let mut inputs = Vec::with_capacity(chunk.len() * dims.seq_len);
        let mut targets = Vec::with_capacity(chunk.len() * dims.seq_len);
        for &w in chunk {
            let start = w * win_len;
            let win = &tokens[start..start + win_len];
            inputs.extend_from_slice(&win[..dims.seq_len]);
            targets.extend(win[1..].iter().map(|&t| t as usize));
        }

        let mut g = Graph::<T>::new();
        let fwd = forward_graph(&mut g, params, dims, &inputs, masks)?;
        let logits = g.value(fwd.logits);
        let vocab = dims.vocab_size;
        let flat: Vec<f64> = logits.iter().map(|x| x.into_f64()).collect();
        for (row, &t) in targets.iter().enumerate() {
            let nll = row_nll(&flat[row * vocab..(row + 1) * vocab], t);
            nll_sum += nll;
            count += 1;
            if let Some(sp) = split {
                let c = class_of(sp, t as u32);
                class_sum[c] += nll;
                class_count[c] += 1;
            }
        }

        for ml in &fwd.moe_layers {
            any_moe = true;
            let probs = g.value(ml.graph.probs);
            let rows = &ml.graph.balance_rows;
            if !rows.is_empty() {
                let mut sel = ndarray::Array2::<f64>::zeros((rows.len(), n));
                for (i, &r) in rows.iter().enumerate() {
                    for e in 0..n {
                        sel[(i, e)] = probs[[r, e]].into_f64();
                    }
                }
                bal_sum += load_balance_loss(&sel.view(), n)?;
                bal_batches += 1;
            }
            let per_layer = layer_counts.entry(ml.layer).or_insert_with(|| vec![0; n]);
            for d in &ml.graph.decisions {
                let e = d.top1();
                load_counts[e] += 1;
                per_layer[e] += 1;
                if let Some(sp) = split {
                    class_load[class_of(sp, d.token_id)][e] += 1;
                }
            }
        }
    }

    let mean_nll = nll_sum / count as f64;
    let class = |c: usize| -> Option<ClassNll> {
        if split.is_none() {
            return None;
        }
        let tokens = class_count[c];
        let mean = if tokens > 0 { class_sum[c] / tokens as f64 } else { f64::NAN };
        Some(ClassNll { tokens, mean_nll: mean, perplexity: mean.exp() })
    };
    let (expert_load, load_cv) = if any_moe {
        let total: u64 = load_counts.iter().sum();
        let fracs: Vec<f64> = load_counts.iter().map(|&c| c as f64 / total as f64).collect();
        (Some(fracs), Some(count_cv(&load_counts)))
    } else {
        (None, None)
    };
    let load_per_layer: Vec<LayerLoad> = layer_counts
        .into_iter()
        .map(|(layer, counts)| LayerLoad { layer, cv: count_cv(&counts), counts })
        .collect();
    let [freq_load, infreq_load] = class_load;

    Ok(EvalStats {
        tokens: count,
        mean_nll,
        perplexity: mean_nll.exp(),
        frequent: class(0),
        infrequent: class(1),
        balance: if bal_batches > 0 { Some(bal_sum / bal_batches as f64) } else { None },
        expert_load,
        load_cv,
        load_per_layer,
        load_frequent: (any_moe && split.is_some()).then_some(freq_load),
        load_infrequent: (any_moe && split.is_some()).then_some(infreq_load),
    })
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct FluctPart {
    pub comparisons: u64,
    pub changes: u64,
    pub rate: f64,
}

impl FluctPart {
    fn finish(mut self) -> FluctPart {
        self.rate = if self.comparisons > 0 {
            self.changes as f64 / self.comparisons as f64
        } else {
            0.0
        };
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FluctuationStats {
    pub overall: FluctPart,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frequent: Option<FluctPart>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub infrequent: Option<FluctPart>,
    /// Distinct (layer, token) series with at least one comparison.
    pub tracked: usize,
}

/// Transition counts per (layer, token) series. An occurrence is one
/// logged line; consecutive occurrences of the same token in the same
/// layer form one comparison each, counted as a change when the top-1
/// expert differs. Series with fewer than two occurrences are absent.
pub fn fluctuation_by_series(lines: &[RoutingLine]) -> BTreeMap<(usize, u32), FluctPart> {
    let mut last: BTreeMap<(usize, u32), usize> = BTreeMap::new();
    let mut series: BTreeMap<(usize, u32), FluctPart> = BTreeMap::new();
    for line in lines {
        let Some(&top1) = line.experts.first() else { continue };
        let key = (line.layer, line.token);
        if let Some(prev) = last.insert(key, top1) {
            let part = series.entry(key).or_default();
            part.comparisons += 1;
            if prev != top1 {
                part.changes += 1;
            }
        }
    }
    for part in series.values_mut() {
        *part = part.finish();
    }
    series
}

/// Fluctuation rate of one token in one layer: the fraction of
/// consecutive logged occurrences whose top-1 expert differs from the
/// previous occurrence's. A log of assignments `[A, A, B, A]` has three
/// transitions and two changes, rate 2/3. Fewer than two occurrences
/// leave the rate undefined, returned as `None`.
pub fn fluctuation_rate(lines: &[RoutingLine], token: u32, layer: usize) -> Option<f64> {
    let mut prev: Option<usize> = None;
    let mut comparisons = 0u64;
    let mut changes = 0u64;
    for line in lines.iter().filter(|l| l.layer == layer && l.token == token) {
        let Some(&top1) = line.experts.first() else { continue };
        if let Some(p) = prev {
            comparisons += 1;
            if p != top1 {
                changes += 1;
            }
        }
        prev = Some(top1);
    }
    (comparisons > 0).then(|| changes as f64 / comparisons as f64)
}

/// Aggregate fluctuation over a routing log. Rates are occurrence
/// weighted: total changes over total comparisons, so tokens logged more
/// often contribute proportionally more.
pub fn fluctuation(lines: &[RoutingLine], split: Option<&FrequencySplit>) -> FluctuationStats {
    let series = fluctuation_by_series(lines);
    let mut overall = FluctPart::default();
    let mut per_class = [FluctPart::default(), FluctPart::default()];
    for ((_, token), part) in &series {
        overall.comparisons += part.comparisons;
        overall.changes += part.changes;
        if let Some(sp) = split {
            let c = match sp.class(*token) {
                TokenClass::Frequent => 0,
                TokenClass::Infrequent => 1,
            };
            per_class[c].comparisons += part.comparisons;
            per_class[c].changes += part.changes;
        }
    }
    FluctuationStats {
        overall: overall.finish(),
        frequent: split.map(|_| per_class[0].finish()),
        infrequent: split.map(|_| per_class[1].finish()),
        tracked: series.len(),
    }
}

/// Expert-load summary of a routing log: top-1 assignment histograms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadReport {
    pub per_layer: Vec<LayerLoad>,
    /// Counts summed over layers.
    pub totals: Vec<u64>,
    pub cv: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frequent_counts: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub infrequent_counts: Option<Vec<u64>>,
    /// Balance objective realized on an evaluation stream; the log alone
    /// carries no router probabilities, so callers fill this from
    /// [`EvalStats::balance`] when available.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub balance_eval: Option<f64>,
}

pub fn load_report(
    lines: &[RoutingLine],
    n_experts: usize,
    split: Option<&FrequencySplit>,
) -> Result<LoadReport> {
    if lines.is_empty() {
        return Err(Error::InvalidArgument("routing log is empty".into()));
    }
    let mut layer_counts: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    let mut totals = vec![0u64; n_experts];
    let mut class_counts = [vec![0u64; n_experts], vec![0u64; n_experts]];
    for line in lines {
        let Some(&top1) = line.experts.first() else { continue };
        if top1 >= n_experts {
            return Err(Error::InvalidArgument(format!(
                "expert {top1} out of range for {n_experts} experts"
            )));
        }
        layer_counts.entry(line.layer).or_insert_with(|| vec![0; n_experts])[top1] += 1;
        totals[top1] += 1;
        if let Some(sp) = split {
            let c = match sp.class(line.token) {
                TokenClass::Frequent => 0,
                TokenClass::Infrequent => 1,
            };
            class_counts[c][top1] += 1;
        }
    }
    let per_layer = layer_counts
        .into_iter()
        .map(|(layer, counts)| LayerLoad { layer, cv: count_cv(&counts), counts })
        .collect();
    let [frequent_counts, infrequent_counts] = class_counts;
    Ok(LoadReport {
        per_layer,
        cv: count_cv(&totals),
        totals,
        frequent_counts: split.map(|_| frequent_counts),
        infrequent_counts: split.map(|_| infrequent_counts),
        balance_eval: None,
    })
}

/// Mean of the first and last `window` lm-loss values of a training log.
pub fn smoothed_endpoints(lm_losses: &[f64], window: usize) -> Option<(f64, f64)> {
    if lm_losses.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(lm_losses.len());
    let first = lm_losses[..w].iter().sum::<f64>() / w as f64;
    let last = lm_losses[lm_losses.len() - w..].iter().sum::<f64>() / w as f64;
    Some((first, last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Architecture, RunConfig};
    use crate::corpus::{split_by_coverage, FreqTable};
    use crate::maskgen::{build_mask_table, MaskConfig};
    use crate::model::{init_params, loss_graph};
    use rand::Rng;

    fn tiny(arch: Architecture) -> (RunConfig, ModelDims) {
        let mut cfg = RunConfig::new(arch);
        cfg.dtype = crate::config::DtypeChoice::F64;
        cfg.max_vocab = 17;
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.n_layers = 2;
        cfg.d_ff = 8;
        cfg.n_experts = 4;
        cfg.top_k = 1;
        cfg.v_a = 2;
        cfg.v_b = 1;
        cfg.seq_len = 5;
        cfg.validate().unwrap();
        let dims = ModelDims::from_run(&cfg, 17);
        (cfg, dims)
    }

    fn tiny_split(vocab: usize, p: f64) -> FrequencySplit {
        let counts: Vec<u64> = (0..vocab).map(|i| 900 / (i as u64 + 1) + 1).collect();
        split_by_coverage(&FreqTable::from_counts(counts), p).unwrap()
    }

    fn stream(n: usize, vocab: usize) -> Vec<u32> {
        (0..n).map(|i| ((i * 7 + 3) % vocab) as u32).collect()
    }

    fn line(step: usize, layer: usize, token: u32, expert: usize) -> RoutingLine {
        RoutingLine { step, layer, token, experts: vec![expert] }
    }

    #[test]
    fn untrained_model_scores_uniform_everywhere() {
        let (cfg, dims) = tiny(Architecture::Dense);
        let params = init_params::<f64>(&dims, 2);
        let toks = stream(400, cfg.max_vocab);
        let split = tiny_split(cfg.max_vocab, 0.4);
        let stats = evaluate(&params, &dims, None, &toks, Some(&split), 4).unwrap();

        let expect = (cfg.max_vocab as f64).ln();
        assert!((stats.mean_nll - expect).abs() < 1e-12);
        assert!((stats.perplexity - cfg.max_vocab as f64).abs() < 1e-9);
        let f = stats.frequent.unwrap();
        let i = stats.infrequent.unwrap();
        assert_eq!(f.tokens + i.tokens, stats.tokens);
        assert!((f.mean_nll - expect).abs() < 1e-12);
        assert!((i.mean_nll - expect).abs() < 1e-12);
        assert!(stats.balance.is_none());
        assert!(stats.expert_load.is_none());
        assert!(stats.load_per_layer.is_empty());
        assert!(stats.load_frequent.is_none());
        assert_eq!(stats.tokens, (400 / 6) * 5);
    }

    #[test]
    fn eval_nll_matches_autograd_cross_entropy() {
        let (cfg, dims) = tiny(Architecture::MaskMoe);
        let mut params = init_params::<f64>(&dims, 4);
        // randomize the head so logits are nontrivial
        params.lm_head.iter_mut().enumerate().for_each(|(i, x)| {
            *x = ((i as f64 * 0.13).sin()) * 0.8;
        });
        let split = tiny_split(cfg.max_vocab, 0.4);
        let mc = MaskConfig { n_experts: cfg.n_experts, v_a: cfg.v_a, v_b: cfg.v_b };
        let masks = build_mask_table(cfg.max_vocab, &split, &mc, 3).unwrap();

        // one batch worth of tokens so both paths see identical windows
        let toks = stream(3 * 6, cfg.max_vocab);
        let stats = evaluate(&params, &dims, Some(&masks), &toks, Some(&split), 3).unwrap();

        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for w in 0..3 {
            let win = &toks[w * 6..w * 6 + 6];
            inputs.extend_from_slice(&win[..5]);
            targets.extend(win[1..].iter().map(|&t| t as usize));
        }
        let mut g = Graph::<f64>::new();
        let fwd = forward_graph(&mut g, &params, &dims, &inputs, Some(&masks)).unwrap();
        let loss = loss_graph(&mut g, &fwd, &targets, dims.n_experts);
        let ce = g.scalar(loss.lm);
        assert!(
            (stats.mean_nll - ce).abs() < 1e-12,
            "eval nll {} vs autograd {}",
            stats.mean_nll,
            ce
        );
        assert!(stats.balance.is_some());
        let load = stats.expert_load.unwrap();
        assert!((load.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(stats.load_cv.unwrap() >= 0.0);

        // per-layer and per-class counts tile the aggregate
        let routed: u64 = stats.load_per_layer.iter().flat_map(|l| &l.counts).sum();
        assert_eq!(routed, 15, "one MoE layer, 3 windows of 5 positions");
        let f = stats.load_frequent.unwrap();
        let i = stats.load_infrequent.unwrap();
        for e in 0..dims.n_experts {
            let by_layer: u64 = stats.load_per_layer.iter().map(|l| l.counts[e]).sum();
            assert_eq!(f[e] + i[e], by_layer);
        }
        // V_b=1: an infrequent token's count can only land on its sole
        // visible expert
        for id in split.infrequent_ids() {
            let vis = masks.get(id).visible();
            assert_eq!(vis.len(), 1);
        }
    }

    #[test]
    fn fluctuation_rate_counts_transitions_per_occurrence() {
        // token 5 in layer 0 is logged A, A, B, A: three transitions, two
        // of them changes
        let lines = vec![
            line(0, 0, 5, 0),
            line(10, 0, 5, 0),
            line(20, 0, 5, 1),
            line(30, 0, 5, 0),
            line(0, 0, 9, 2),
        ];
        let r = fluctuation_rate(&lines, 5, 0).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(fluctuation_rate(&lines, 9, 0), None, "one occurrence, undefined");
        assert_eq!(fluctuation_rate(&lines, 5, 1), None, "layers are separate series");
    }

    #[test]
    fn alternating_assignments_fluctuate_fully() {
        let lines: Vec<RoutingLine> =
            (0..4).map(|s| line(s * 10, 2, 7, s % 2)).collect();
        assert_eq!(fluctuation_rate(&lines, 7, 2), Some(1.0));
        let stable: Vec<RoutingLine> = (0..4).map(|s| line(s * 10, 2, 7, 3)).collect();
        assert_eq!(fluctuation_rate(&stable, 7, 2), Some(0.0));
    }

    #[test]
    fn occurrences_within_one_step_still_compare() {
        // the same token twice in one logged step is two occurrences
        let lines = vec![line(0, 0, 4, 1), line(0, 0, 4, 2)];
        assert_eq!(fluctuation_rate(&lines, 4, 0), Some(1.0));
    }

    #[test]
    fn aggregates_are_occurrence_weighted() {
        let split = tiny_split(17, 0.4);
        let f_id = split.frequent_ids().next().unwrap();
        let i_id = split.infrequent_ids().next().unwrap();
        // frequent token: A,A,B,A = 2 changes over 3 comparisons;
        // infrequent token: C,C = 0 changes over 1 comparison
        let lines = vec![
            line(0, 0, f_id, 0),
            line(10, 0, f_id, 0),
            line(20, 0, f_id, 1),
            line(30, 0, f_id, 0),
            line(0, 0, i_id, 3),
            line(10, 0, i_id, 3),
        ];
        let stats = fluctuation(&lines, Some(&split));
        assert_eq!(stats.overall.comparisons, 4);
        assert_eq!(stats.overall.changes, 2);
        assert!((stats.overall.rate - 0.5).abs() < 1e-15);
        assert_eq!(stats.tracked, 2);
        let f = stats.frequent.unwrap();
        let i = stats.infrequent.unwrap();
        assert!((f.rate - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(i.changes, 0);
        assert_eq!(i.rate, 0.0);

        let series = fluctuation_by_series(&lines);
        assert_eq!(series.len(), 2);
        assert_eq!(series[&(0, f_id)].comparisons, 3);
        assert_eq!(series[&(0, i_id)].comparisons, 1);
    }

    #[test]
    fn layers_are_tracked_independently() {
        let lines = vec![
            line(0, 0, 4, 0),
            line(0, 1, 4, 2),
            line(10, 0, 4, 0),
            line(10, 1, 4, 2),
        ];
        let stats = fluctuation(&lines, None);
        assert_eq!(stats.overall.comparisons, 2);
        assert_eq!(stats.overall.changes, 0, "cross-layer differences are not changes");
        assert!(stats.frequent.is_none());
    }

    #[test]
    fn load_report_matches_hand_counts() {
        // all 12 tokens to expert 0 in a 4-expert layer: counts (12,0,0,0),
        // mean 3, stddev 3*sqrt(3), cv sqrt(3)
        let lines: Vec<RoutingLine> =
            (0..12).map(|i| line(i, 0, (i % 5) as u32, 0)).collect();
        let rep = load_report(&lines, 4, None).unwrap();
        assert_eq!(rep.totals, vec![12, 0, 0, 0]);
        assert!((rep.cv - 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(rep.per_layer.len(), 1);
        assert_eq!(rep.per_layer[0].counts, vec![12, 0, 0, 0]);

        // exactly equal counts: cv 0
        let even: Vec<RoutingLine> =
            (0..12).map(|i| line(i, 0, i as u32, i % 4)).collect();
        let rep = load_report(&even, 4, None).unwrap();
        assert_eq!(rep.cv, 0.0);

        assert!(load_report(&[], 4, None).is_err());
    }

    #[test]
    fn uniform_random_load_concentrates() {
        let mut rng = crate::rng::chacha(11);
        let lines: Vec<RoutingLine> = (0..64_000)
            .map(|i| line(i, 0, (i % 97) as u32, rng.gen_range(0..64)))
            .collect();
        let rep = load_report(&lines, 64, None).unwrap();
        assert_eq!(rep.totals.iter().sum::<u64>(), 64_000);
        assert!(rep.cv < 0.05, "multinomial cv {} should be small", rep.cv);
    }

    #[test]
    fn smoothing_takes_means_at_both_ends() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let (first, last) = smoothed_endpoints(&xs, 3).unwrap();
        assert!((first - 1.0).abs() < 1e-15);
        assert!((last - 8.0).abs() < 1e-15);
        assert!(smoothed_endpoints(&[], 3).is_none());
        let (f, l) = smoothed_endpoints(&xs, 100).unwrap();
        assert!((f - 4.5).abs() < 1e-15);
        assert!((l - 4.5).abs() < 1e-15);
    }

    #[test]
    fn eval_stats_roundtrip_json() {
        let (cfg, dims) = tiny(Architecture::Dense);
        let params = init_params::<f64>(&dims, 2);
        let toks = stream(200, cfg.max_vocab);
        let stats = evaluate(&params, &dims, None, &toks, None, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.json");
        stats.save(&path).unwrap();
        let back = EvalStats::load(&path).unwrap();
        assert_eq!(back.tokens, stats.tokens);
        assert_eq!(back.mean_nll.to_bits(), stats.mean_nll.to_bits());
    }
}
