//! One MoE sublayer, taken apart.
//!
//! The layer output is the gate-weighted sum of the selected experts'
//! FFN outputs (gates are the masked routing probabilities, never
//! renormalized after top-k), plus the shared expert when one is
//! configured. This example rebuilds that sum by hand and checks it
//! against the layer.
//!
//! ```bash
//! cargo run --example moe_forward
//! ```

use maskmoe::maskgen::MaskVector;
use maskmoe::moe::{FfnParams, MoeLayerParams};
use maskmoe::rng;
use maskmoe::routing::RouterParams;
use ndarray::{Array1, Array2};
use rand::Rng;

fn main() -> maskmoe::Result<()> {
    let (n_experts, d_model, d_ff, k) = (4, 8, 16, 2);
    let mut r = rng::chacha(9);
    let mut mat = |rows: usize, cols: usize| {
        Array2::from_shape_fn((rows, cols), |_| r.random_range(-0.4..0.4))
    };

    let mut experts = Vec::new();
    for _ in 0..n_experts {
        experts.push(FfnParams {
            w1: mat(d_model, d_ff),
            b1: Array1::zeros(d_ff),
            w2: mat(d_ff, d_model),
            b2: Array1::zeros(d_model),
        });
    }
    let layer = MoeLayerParams {
        router: RouterParams::new(mat(n_experts, d_model)),
        experts,
        shared: None,
    };

    let h = Array1::from_shape_fn(d_model, |_| r.random_range(-1.0..1.0));
    let everything = MaskVector::all_visible(n_experts);
    let (out, decision) = layer.forward1(&h.view(), &everything, k, 0)?;

    println!("routing: probs {:?}", rounded(&decision.probs));
    println!("selected experts {:?} with gates {:?}", decision.selected, rounded(&decision.gates));

    let mut by_hand = Array1::<f64>::zeros(d_model);
    for (slot, &e) in decision.selected.iter().enumerate() {
        by_hand = by_hand + layer.experts[e].forward1(&h.view()).mapv(|v| v * decision.gates[slot]);
    }
    let err = (&out - &by_hand).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
    println!("gate-weighted sum rebuilt by hand: max |diff| = {err:.2e}");
    assert_eq!(out, by_hand);

    // Gates stay un-renormalized: with k < N they sum to less than 1.
    let gate_sum: f64 = decision.gates.iter().sum();
    println!("gate sum = {gate_sum:.6} (< 1, the unselected mass is dropped)");
    assert!(gate_sum < 1.0);

    // Masking reroutes: hide the top expert and the layer must recompose
    // from the remaining ones.
    let top = decision.selected[0];
    let visible: Vec<u32> = (0..n_experts as u32).filter(|&e| e as usize != top).collect();
    let mask = MaskVector::new(n_experts, visible)?;
    let (_, masked) = layer.forward1(&h.view(), &mask, k, 0)?;
    println!("with expert {top} hidden, selection becomes {:?}", masked.selected);
    assert!(!masked.selected.contains(&top));
    assert_eq!(masked.probs[top], 0.0);
    Ok(())
}

fn rounded(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}
