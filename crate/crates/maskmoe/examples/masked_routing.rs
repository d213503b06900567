//! The routing core, one hidden state at a time.
//!
//! A router is a linear map to expert logits. A mask adds 0 to visible
//! logits and negative infinity to hidden ones before the softmax, so
//! hidden experts get exactly zero probability and the visible slice is
//! the renormalized restriction of the unmasked distribution. Top-k then
//! picks the gates.
//!
//! ```bash
//! cargo run --example masked_routing
//! ```

use maskmoe::maskgen::MaskVector;
use maskmoe::rng;
use maskmoe::routing::{route, softmax1, RouterParams};
use ndarray::{Array1, Array2};
use rand::Rng;

fn main() -> maskmoe::Result<()> {
    let (n_experts, d_model) = (8, 16);
    let mut r = rng::chacha(3);
    let w = Array2::from_shape_fn((n_experts, d_model), |_| r.random_range(-0.5..0.5));
    let router = RouterParams::new(w);
    let h = Array1::from_shape_fn(d_model, |_| r.random_range(-1.0..1.0));

    let everything = MaskVector::all_visible(n_experts);
    let open = route(&h.view(), &router, &everything, 2, 0)?;
    println!("unmasked probabilities (top-2 selection):");
    print_probs(&open.probs, &open.selected);

    // An all-visible mask is a no-op: same bits as the plain softmax.
    let plain = softmax1(&router.logits(&h.view()).view());
    assert_eq!(open.probs, plain.to_vec());
    println!("all-visible mask == plain softmax, bit for bit\n");

    let narrow = MaskVector::new(n_experts, vec![1, 4, 6])?;
    let masked = route(&h.view(), &router, &narrow, 2, 0)?;
    println!("masked to {{1, 4, 6}}:");
    print_probs(&masked.probs, &masked.selected);
    for e in 0..n_experts {
        if !narrow.is_visible(e) {
            assert_eq!(masked.probs[e], 0.0);
        }
    }

    // Masking renormalizes rather than reshuffles: visible experts keep
    // their relative odds.
    let ratio_open = open.probs[1] / open.probs[4];
    let ratio_masked = masked.probs[1] / masked.probs[4];
    println!(
        "relative odds preserved: p1/p4 = {ratio_open:.6} unmasked, {ratio_masked:.6} masked\n"
    );

    // v = 1 leaves no choice at all; the gate is pinned at probability 1.
    let pinned = MaskVector::new(n_experts, vec![5])?;
    let forced = route(&h.view(), &router, &pinned, 1, 0)?;
    assert_eq!(forced.selected, vec![5]);
    assert_eq!(forced.gates, vec![1.0]);
    println!("v = 1 mask: expert 5 selected with gate 1.0 regardless of the router");
    Ok(())
}

fn print_probs(probs: &[f64], selected: &[usize]) {
    for (e, p) in probs.iter().enumerate() {
        let tag = match selected.iter().position(|&s| s == e) {
            Some(rank) => format!("<- pick {}", rank + 1),
            None => String::new(),
        };
        println!("  expert {e}: {p:.6} {tag}");
    }
}
