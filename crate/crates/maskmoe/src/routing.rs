//! Router math: masked softmax over expert logits, top-k selection, and
//! the fixed hash router.
//!
//! Masks act additively on logits before the softmax. A masked entry gets
//! the dtype's most negative finite value, which the exponential
//! underflows to exactly zero, so masked experts carry probability 0 and
//! receive no gradient. Gates for selected experts are the raw masked
//! probabilities; they are never renormalized after top-k.

use crate::autograd::Scalar;
use crate::error::{Error, Result};
use crate::maskgen::{MaskTable, MaskVector};
use crate::rng;
use ndarray::{Array1, Array2, ArrayView1};

/// Router weights, `[n_experts, d_model]`; logits are `w . h`.
#[derive(Debug, Clone)]
pub struct RouterParams<T: Scalar> {
    pub w: Array2<T>,
}

impl<T: Scalar> RouterParams<T> {
    pub fn new(w: Array2<T>) -> RouterParams<T> {
        RouterParams { w }
    }

    pub fn n_experts(&self) -> usize {
        self.w.nrows()
    }

    pub fn logits(&self, h: &ArrayView1<T>) -> Array1<T> {
        self.w.dot(h)
    }
}

/// Max-shifted softmax of a 1-d vector.
pub fn softmax1<T: Scalar>(x: &ArrayView1<T>) -> Array1<T> {
    let max = x.iter().fold(T::min_value(), |a, &b| a.max(b));
    let mut out = x.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// Softmax after adding the mask's logit entries. With an all-visible
/// mask this takes the plain softmax path, bit for bit.
pub fn masked_softmax<T: Scalar>(logits: &ArrayView1<T>, mask: &MaskVector) -> Result<Array1<T>> {
    if logits.len() != mask.n_experts() {
        return Err(Error::Routing(format!(
            "logit count {} does not match mask over {} experts",
            logits.len(),
            mask.n_experts()
        )));
    }
    if mask.is_all_visible() {
        return Ok(softmax1(logits));
    }
    let masked = logits.to_owned() + mask.entries::<T>();
    Ok(softmax1(&masked.view()))
}

/// Indices of the `k` largest entries, probability descending, ties going
/// to the lowest index. Deterministic across platforms.
pub fn select_top_k<T: Scalar>(probs: &ArrayView1<T>, k: usize) -> Vec<usize> {
    assert!(k >= 1 && k <= probs.len(), "top-k k={k} out of range");
    let mut taken = vec![false; probs.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..probs.len() {
            if taken[i] {
                continue;
            }
            match best {
                Some(b) if probs[i] <= probs[b] => {}
                _ => best = Some(i),
            }
        }
        let b = best.expect("non-empty candidate set");
        taken[b] = true;
        out.push(b);
    }
    out
}

/// One token's routing outcome. Probabilities are kept in f64 for logging
/// and balance accounting regardless of the model dtype.
#[derive(Debug, Clone)]
pub struct RoutingDecision {
    pub token_id: u32,
    pub probs: Vec<f64>,
    pub selected: Vec<usize>,
    pub gates: Vec<f64>,
}

impl RoutingDecision {
    /// Expert that receives the top-1 assignment.
    pub fn top1(&self) -> usize {
        self.selected[0]
    }
}

/// Route one hidden state: masked softmax over router logits, then top-k.
pub fn route<T: Scalar>(
    h: &ArrayView1<T>,
    params: &RouterParams<T>,
    mask: &MaskVector,
    k: usize,
    token_id: u32,
) -> Result<RoutingDecision> {
    if h.len() != params.w.ncols() {
        return Err(Error::Routing(format!(
            "hidden size {} does not match router width {}",
            h.len(),
            params.w.ncols()
        )));
    }
    if k < 1 || k > mask.visible_count() {
        return Err(Error::Routing(format!(
            "k={k} must lie in [1, visible_count={}]",
            mask.visible_count()
        )));
    }
    let logits = params.logits(h);
    let probs = masked_softmax(&logits.view(), mask)?;
    let selected = select_top_k(&probs.view(), k);
    let gates = selected.iter().map(|&e| probs[e].into_f64()).collect();
    Ok(RoutingDecision {
        token_id,
        probs: probs.iter().map(|p| p.into_f64()).collect(),
        selected,
        gates,
    })
}

/// Fixed random token-to-expert assignment: the first draw of the token's
/// stream, the same draw that seeds mask sampling. A `v = 1` mask table
/// built under the same seed is therefore visible exactly at this expert.
pub fn hash_route(token_id: u32, n_experts: usize, seed: u64) -> usize {
    rng::draw_index(&mut rng::token_stream(seed, token_id), n_experts)
}

/// Per-row additive mask entries for a batch of tokens, `[m, n_experts]`.
pub fn mask_matrix<T: Scalar>(table: &MaskTable, tokens: &[u32]) -> Array2<T> {
    let mut m = Array2::zeros((tokens.len(), table.n_experts));
    for (i, &t) in tokens.iter().enumerate() {
        m.row_mut(i).assign(&table.get(t).entries::<T>());
    }
    m
}
