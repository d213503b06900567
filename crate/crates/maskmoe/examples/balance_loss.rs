//! The load-balance auxiliary loss and its two fixed points.
//!
//! For a batch of routing distributions, the loss is N times the dot
//! product of the hard assignment fractions with the mean soft
//! probabilities. Perfectly uniform routing scores exactly 1, total
//! collapse onto one expert scores exactly N, and everything else lies
//! in between, so the loss penalizes concentration in both the hard and
//! soft views at once.
//!
//! ```bash
//! cargo run --example balance_loss
//! ```

use maskmoe::losses::load_balance_loss;
use maskmoe::rng;
use ndarray::Array2;
use rand::Rng;

fn main() -> maskmoe::Result<()> {
    let n = 8;
    let batch = 64;

    let uniform = Array2::from_elem((batch, n), 1.0 / n as f64);
    let loss = load_balance_loss(&uniform.view(), n)?;
    println!("uniform routing:      loss = {loss:.12}  (exactly 1)");
    assert!((loss - 1.0).abs() < 1e-12);

    let mut collapsed = Array2::zeros((batch, n));
    for j in 0..batch {
        collapsed[[j, 3]] = 1.0;
    }
    let loss = load_balance_loss(&collapsed.view(), n)?;
    println!("collapsed onto one:   loss = {loss:.12}  (exactly N = {n})");
    assert!((loss - n as f64).abs() < 1e-12);

    // Random simplex rows land strictly between the fixed points.
    let mut r = rng::chacha(17);
    let mut random = Array2::zeros((batch, n));
    for j in 0..batch {
        let mut row: Vec<f64> = (0..n).map(|_| -f64::ln(r.random::<f64>())).collect();
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= sum);
        for (e, p) in row.into_iter().enumerate() {
            random[[j, e]] = p;
        }
    }
    let loss = load_balance_loss(&random.view(), n)?;
    println!("random routing:       loss = {loss:.12}");
    assert!(loss > 1.0 && loss < n as f64);

    // Mild concentration already moves the needle: tilt 60% of rows
    // toward expert 0.
    let mut tilted = uniform.clone();
    for j in 0..(batch * 6 / 10) {
        for e in 0..n {
            tilted[[j, e]] = if e == 0 { 0.5 } else { 0.5 / (n - 1) as f64 };
        }
    }
    let loss = load_balance_loss(&tilted.view(), n)?;
    println!("tilted to expert 0:   loss = {loss:.12}");
    assert!(loss > 1.0);
    Ok(())
}
