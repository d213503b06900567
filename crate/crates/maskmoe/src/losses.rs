//! Training objectives: language-model cross-entropy lives in the graph
//! (`cross_entropy_mean`); this module adds the auxiliary load-balance
//! loss and the total.
//!
//! Balance loss over a batch of routing distributions `r^j` (`j < B`,
//! `N` experts):
//!
//! ```text
//! w_i = (1/B) * #{ j : argmax(r^j) = i }      (no gradient, ties -> lowest i)
//! R_i = (1/B) * sum_j r^j_i
//! L   = N * sum_i w_i * R_i
//! ```
//!
//! Uniform distributions give exactly 1, fully concentrated ones give N.
//! Tokens whose mask leaves a single expert visible have nothing to
//! balance and are excluded from B. An empty batch contributes 0. With
//! multiple MoE layers the per-layer losses are averaged, and the total
//! objective is `lm + balance` with unit coefficient.

use crate::autograd::{Graph, Scalar, Var};
use crate::error::{Error, Result};
use ndarray::{Array1, ArrayView2};

/// Hard top-1 assignment fractions `w` (ties to the lowest index).
fn assignment_fractions(probs: &ArrayView2<f64>) -> Array1<f64> {
    let (b, n) = probs.dim();
    let mut w = Array1::<f64>::zeros(n);
    for j in 0..b {
        let row = probs.row(j);
        let mut best = 0usize;
        for i in 1..n {
            if row[i] > row[best] {
                best = i;
            }
        }
        w[best] += 1.0;
    }
    w / b as f64
}

/// Direct-evaluation balance loss over `[B, n_experts]` routing
/// probabilities. Rows must be simplex vectors; `B = 0` yields 0.
pub fn load_balance_loss(probs: &ArrayView2<f64>, n_experts: usize) -> Result<f64> {
    let (b, n) = probs.dim();
    if b == 0 {
        return Ok(0.0);
    }
    if n != n_experts {
        return Err(Error::Shape(format!(
            "probs have {n} columns but n_experts = {n_experts}"
        )));
    }
    for j in 0..b {
        let row = probs.row(j);
        let sum: f64 = row.sum();
        if !sum.is_finite() || (sum - 1.0).abs() > 1e-4 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::Routing(format!(
                "row {j} is not a probability distribution (sum {sum})"
            )));
        }
    }
    let w = assignment_fractions(probs);
    let r = probs.mean_axis(ndarray::Axis(0)).expect("b > 0");
    Ok(n_experts as f64 * w.dot(&r))
}

/// Graph form of the balance loss over the routing-probability node
/// `probs` (`[m, n_experts]`), restricted to the non-exempt `rows`.
/// `w` is computed from current values and enters as a constant, so the
/// gradient flows only through the soft means `R`.
pub fn balance_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    rows: &[usize],
    n_experts: usize,
) -> Var {
    if rows.is_empty() {
        return g.constant(ndarray::arr0(T::zero()).into_dyn());
    }
    let sub = g.gather_rows(probs, rows);
    let sub_f64 = g
        .value(sub)
        .mapv(|v| v.into_f64())
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d probs");
    let w = assignment_fractions(&sub_f64.view()).mapv(T::from_f64);
    let w_const = g.constant(w.into_dyn());
    let r = g.col_means(sub);
    let wr = g.mul(r, w_const);
    let s = g.sum(wr);
    g.scale(s, T::from_f64(n_experts as f64))
}

/// Mean of scalar graph nodes (per-layer balance losses).
pub fn mean_scalars<T: Scalar>(g: &mut Graph<T>, parts: &[Var]) -> Var {
    assert!(!parts.is_empty(), "mean_scalars: no inputs");
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p);
    }
    g.scale(acc, T::from_f64(1.0 / parts.len() as f64))
}

/// Total objective with unit balance coefficient. Rejects non-finite parts.
pub fn total_loss(lm: f64, balance: f64) -> Result<f64> {
    if !lm.is_finite() {
        return Err(Error::NonFinite(format!("lm loss = {lm}")));
    }
    if !balance.is_finite() {
        return Err(Error::NonFinite(format!("balance loss = {balance}")));
    }
    Ok(lm + balance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use crate::rng::chacha;
    use ndarray::{Array2, ArrayD};
    use proptest::prelude::*;
    use rand_chacha::rand_core::RngCore;

    fn random_simplex_rows(seed: u64, b: usize, n: usize) -> Array2<f64> {
        let mut rng = chacha(seed);
        let mut m = Array2::<f64>::zeros((b, n));
        for j in 0..b {
            let mut sum = 0.0;
            for i in 0..n {
                let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                let v = u.max(1e-9);
                m[(j, i)] = v;
                sum += v;
            }
            for i in 0..n {
                m[(j, i)] /= sum;
            }
        }
        m
    }

    #[test]
    fn uniform_batch_scores_exactly_one() {
        let n = 12;
        let probs = Array2::from_elem((30, n), 1.0 / n as f64);
        let loss = load_balance_loss(&probs.view(), n).unwrap();
        assert!((loss - 1.0).abs() < 1e-9, "got {loss}");
    }

    #[test]
    fn concentrated_batch_scores_exactly_n() {
        let n = 9;
        let mut probs = Array2::zeros((17, n));
        for j in 0..17 {
            probs[(j, 4)] = 1.0;
        }
        let loss = load_balance_loss(&probs.view(), n).unwrap();
        assert!((loss - n as f64).abs() < 1e-9, "got {loss}");
    }

    #[test]
    fn empty_batch_scores_zero() {
        let probs = Array2::<f64>::zeros((0, 8));
        assert_eq!(load_balance_loss(&probs.view(), 8).unwrap(), 0.0);
    }

    #[test]
    fn rejects_non_simplex_rows_and_shape_mismatch() {
        let mut probs = Array2::from_elem((3, 4), 0.25);
        assert!(load_balance_loss(&probs.view(), 5).is_err());
        probs[(1, 0)] = 0.9;
        assert!(load_balance_loss(&probs.view(), 4).is_err());
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        let n = 4;
        let probs = Array2::from_elem((8, n), 1.0 / n as f64);
        let w = assignment_fractions(&probs.view());
        assert_eq!(w[0], 1.0);
        assert_eq!(w.sum(), 1.0);
    }

    #[test]
    fn graph_matches_direct_evaluation() {
        for seed in 0..10u64 {
            let probs = random_simplex_rows(seed, 13, 7);
            let direct = load_balance_loss(&probs.view(), 7).unwrap();

            let mut g = Graph::<f64>::new();
            let v = g.leaf(probs.into_dyn());
            let rows: Vec<usize> = (0..13).collect();
            let loss = balance_loss_graph(&mut g, v, &rows, 7);
            assert!((g.scalar(loss) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn exempt_rows_are_excluded() {
        let probs = random_simplex_rows(3, 10, 5);
        let keep: Vec<usize> = vec![0, 2, 3, 7, 9];
        let sub = probs.select(ndarray::Axis(0), &keep);
        let direct = load_balance_loss(&sub.view(), 5).unwrap();

        let mut g = Graph::<f64>::new();
        let v = g.leaf(probs.into_dyn());
        let loss = balance_loss_graph(&mut g, v, &keep, 5);
        assert!((g.scalar(loss) - direct).abs() < 1e-12);

        let empty = balance_loss_graph(&mut g, v, &[], 5);
        assert_eq!(g.scalar(empty), 0.0);
        g.backward(empty);
        assert!(g.grad(v).is_none(), "empty balance term must not touch probs");
    }

    #[test]
    fn gradient_is_frozen_w_over_batch() {
        let b = 9;
        let n = 6;
        let probs = random_simplex_rows(11, b, n);
        let rows: Vec<usize> = (0..b).collect();

        let err = grad_check(
            |g, v| {
                let r = rows.clone();
                balance_loss_graph(g, v[0], &r, n)
            },
            &[probs.clone().into_dyn()],
            1e-6,
        );
        assert!(err < 1e-6, "rel err {err}");

        let mut g = Graph::<f64>::new();
        let v = g.leaf(probs.clone().into_dyn());
        let loss = balance_loss_graph(&mut g, v, &rows, n);
        g.backward(loss);
        let grad = g.grad(v).unwrap();
        let w = assignment_fractions(&probs.view());
        for j in 0..b {
            for i in 0..n {
                let want = n as f64 * w[i] / b as f64;
                assert!((grad[[j, i]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_scalars_averages() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(ndarray::arr0(2.0).into_dyn());
        let b = g.leaf(ndarray::arr0(4.0).into_dyn());
        let c = g.leaf(ndarray::arr0(9.0).into_dyn());
        let m = mean_scalars(&mut g, &[a, b, c]);
        assert!((g.scalar(m) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn total_loss_rejects_non_finite() {
        assert_eq!(total_loss(1.5, 0.25).unwrap(), 1.75);
        assert!(total_loss(f64::NAN, 0.0).is_err());
        assert!(total_loss(0.0, f64::INFINITY).is_err());
    }

    proptest! {
        #[test]
        fn loss_is_bounded_and_consistent(seed in any::<u64>(), b in 1usize..20, n in 2usize..12) {
            let probs = random_simplex_rows(seed, b, n);
            let direct = load_balance_loss(&probs.view(), n).unwrap();
            prop_assert!(direct >= 0.0 && direct <= n as f64 + 1e-9);

            let mut g = Graph::<f64>::new();
            let v = g.leaf(ArrayD::from(probs.into_dyn()));
            let rows: Vec<usize> = (0..b).collect();
            let loss = balance_loss_graph(&mut g, v, &rows, n);
            prop_assert!((g.scalar(loss) - direct).abs() < 1e-10);
        }
    }
}
