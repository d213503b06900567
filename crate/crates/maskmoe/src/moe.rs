//! Feed-forward experts and the MoE dispatch graph.
//!
//! Dispatch is fully differentiable through the gates: tokens are gathered
//! into per-expert sub-batches, run through their expert, scaled by the
//! router probability of that expert (the gate, never renormalized), and
//! scattered back. Experts that no token selected are absent from the
//! graph, so their parameters receive no gradient at all. The optional
//! shared expert runs on every token with no gate.

use crate::autograd::{Graph, Scalar, Var};
use crate::error::{Error, Result};
use crate::maskgen::{MaskTable, MaskVector};
use crate::routing::{self, RouterParams, RoutingDecision};
use ndarray::{Array1, Array2, ArrayView1};

/// Two-layer FFN: `w2 . silu(w1 . h + b1) + b2`, stored in row-activation
/// orientation (`x [m,d] . w1 [d,ff]`).
#[derive(Debug, Clone)]
pub struct FfnParams<T: Scalar> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

impl<T: Scalar> FfnParams<T> {
    pub fn d_model(&self) -> usize {
        self.w1.nrows()
    }

    pub fn d_ff(&self) -> usize {
        self.w1.ncols()
    }

    /// Direct single-vector forward.
    pub fn forward1(&self, h: &ArrayView1<T>) -> Array1<T> {
        let mut hidden = h.dot(&self.w1) + &self.b1;
        hidden.mapv_inplace(|x| {
            let s = T::one() / (T::one() + (-x).exp());
            x * s
        });
        hidden.dot(&self.w2) + &self.b2
    }
}

/// Graph handles for one FFN's parameters.
#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// FFN over a batch node `x [m, d]`.
pub fn ffn_graph<T: Scalar>(g: &mut Graph<T>, x: Var, vars: &FfnVars) -> Var {
    let h = g.matmul(x, vars.w1);
    let h = g.add_bias(h, vars.b1);
    let h = g.silu(h);
    let out = g.matmul(h, vars.w2);
    g.add_bias(out, vars.b2)
}

/// One MoE sublayer's parameters.
#[derive(Debug, Clone)]
pub struct MoeLayerParams<T: Scalar> {
    pub router: RouterParams<T>,
    pub experts: Vec<FfnParams<T>>,
    pub shared: Option<FfnParams<T>>,
}

impl<T: Scalar> MoeLayerParams<T> {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Direct single-token forward; the reference the graph path is
    /// tested against.
    pub fn forward1(
        &self,
        h: &ArrayView1<T>,
        mask: &MaskVector,
        k: usize,
        token_id: u32,
    ) -> Result<(Array1<T>, RoutingDecision)> {
        let decision = routing::route(h, &self.router, mask, k, token_id)?;
        let mut out = Array1::<T>::zeros(h.len());
        for (slot, &e) in decision.selected.iter().enumerate() {
            let gate = T::from_f64(decision.gates[slot]);
            out = out + self.experts[e].forward1(h).mapv(|v| v * gate);
        }
        if let Some(shared) = &self.shared {
            out = out + shared.forward1(h);
        }
        Ok((out, decision))
    }
}

/// Graph handles for one MoE sublayer.
pub struct MoeVars {
    pub router_w: Var,
    pub experts: Vec<FfnVars>,
    pub shared: Option<FfnVars>,
}

/// Outputs of one MoE sublayer's graph construction.
pub struct MoeGraphOut {
    /// `[m, d]` combined expert output.
    pub out: Var,
    /// `[m, n_experts]` masked routing probabilities (graph node).
    pub probs: Var,
    /// Per-row routing outcome, in row order.
    pub decisions: Vec<RoutingDecision>,
    /// Rows whose mask keeps more than one expert visible; only these
    /// enter the balance loss.
    pub balance_rows: Vec<usize>,
}

/// Build the dispatch graph for a batch `x [m, d]` of hidden states
/// belonging to `tokens` (one id per row).
///
/// The mask table, when present, contributes a constant additive matrix
/// before the softmax; a table that leaves everything visible is skipped
/// so the op sequence is identical to unmasked routing.
pub fn moe_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    vars: &MoeVars,
    tokens: &[u32],
    masks: Option<&MaskTable>,
    k: usize,
) -> Result<MoeGraphOut> {
    let m = tokens.len();
    let n_experts = vars.experts.len();
    if g.value(x).shape()[0] != m {
        return Err(Error::Shape(format!(
            "{} hidden rows for {m} tokens",
            g.value(x).shape()[0]
        )));
    }
    if let Some(table) = masks {
        if table.n_experts != n_experts {
            return Err(Error::Mask(format!(
                "mask table over {} experts used with {n_experts} experts",
                table.n_experts
            )));
        }
        for &t in tokens {
            if (t as usize) >= table.vocab_size() {
                return Err(Error::Mask(format!(
                    "token {t} outside mask table ({} entries)",
                    table.vocab_size()
                )));
            }
            let visible = table.get(t).visible_count();
            if k > visible {
                return Err(Error::Routing(format!(
                    "top-k {k} exceeds visible count {visible} of token {t}"
                )));
            }
        }
    } else if k > n_experts {
        return Err(Error::Routing(format!(
            "top-k {k} exceeds expert count {n_experts}"
        )));
    }

    let wt = g.transpose(vars.router_w);
    let logits = g.matmul(x, wt);
    let masked_logits = match masks {
        Some(table) if !(table.v_a == n_experts && table.v_b == n_experts) => {
            let mm = routing::mask_matrix::<T>(table, tokens).into_dyn();
            let mc = g.constant(mm);
            g.add(logits, mc)
        }
        _ => logits,
    };
    let probs = g.softmax_rows(masked_logits);

    let mut decisions = Vec::with_capacity(m);
    {
        let pv = g.value(probs);
        let pv2 = pv.view().into_dimensionality::<ndarray::Ix2>().expect("2-d probs");
        for (row, &tok) in tokens.iter().enumerate() {
            let prow = pv2.row(row);
            let selected = routing::select_top_k(&prow, k);
            let gates = selected.iter().map(|&e| prow[e].into_f64()).collect();
            decisions.push(RoutingDecision {
                token_id: tok,
                probs: prow.iter().map(|p| p.into_f64()).collect(),
                selected,
                gates,
            });
        }
    }

    let mut acc: Option<Var> = None;
    for e in 0..n_experts {
        let rows: Vec<usize> = decisions
            .iter()
            .enumerate()
            .filter(|(_, d)| d.selected.contains(&e))
            .map(|(row, _)| row)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let sub = g.gather_rows(x, &rows);
        let expert_out = ffn_graph(g, sub, &vars.experts[e]);
        let gate_idx: Vec<(usize, usize)> = rows.iter().map(|&r| (r, e)).collect();
        let gates = g.gather_elems(probs, &gate_idx);
        let gated = g.scale_rows(expert_out, gates);
        let placed = g.scatter_rows(gated, &rows, m);
        acc = Some(match acc {
            Some(a) => g.add(a, placed),
            None => placed,
        });
    }
    let mut out = acc.expect("at least one expert receives tokens");
    if let Some(shared) = &vars.shared {
        let shared_out = ffn_graph(g, x, shared);
        out = g.add(out, shared_out);
    }

    let balance_rows = match masks {
        Some(table) => (0..m)
            .filter(|&row| table.get(tokens[row]).visible_count() > 1)
            .collect(),
        None => (0..m).collect(),
    };

    Ok(MoeGraphOut { out, probs, decisions, balance_rows })
}
