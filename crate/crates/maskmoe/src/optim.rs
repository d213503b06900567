//! AdamW with decoupled weight decay, plus the cosine learning-rate
//! schedule and global-norm gradient clipping.
//!
//! Optimizer math runs in f64 no matter the parameter dtype: first and
//! second moments are stored as f64 and parameters round-trip through f64
//! for the update. Parameters the current step produced no gradient for
//! (e.g. experts no token selected) still decay their moments and feel
//! weight decay, exactly as if their gradient were zero.

use crate::autograd::Scalar;
use crate::model::ModelParams;
use std::collections::BTreeMap;

/// Per-step gradients keyed by registry parameter name, flattened row-major.
/// Parameters absent from the map are treated as zero-gradient. Ordered so
/// norm reductions over it are deterministic.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Adam epsilon used by every run.
pub const ADAM_EPS: f64 = 1e-8;

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> AdamW {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// Iterate stored moments in name order (for checkpointing).
    pub fn moments(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.state
            .iter()
            .map(|(k, mo)| (k.as_str(), mo.m.as_slice(), mo.v.as_slice()))
    }

    /// Restore one parameter's moments (for checkpoint load).
    pub fn insert_moments(&mut self, name: String, m: Vec<f64>, v: Vec<f64>) {
        assert_eq!(m.len(), v.len(), "moment length mismatch for {name}");
        self.state.insert(name, Moments { m, v });
    }

    /// Apply one update over every parameter in registry order.
    ///
    /// Per element, with bias corrections `bc1 = 1 - beta1^t` and
    /// `bc2 = 1 - beta2^t` applied as precomputed reciprocals:
    ///
    /// ```text
    /// m = beta1 m + (1 - beta1) g        m_hat = m / bc1
    /// v = beta2 v + (1 - beta2) g^2      v_hat = v / bc2
    /// w = w - lr wd w - lr m_hat / (sqrt(v_hat) + eps)
    /// ```
    pub fn update<T: Scalar>(&mut self, params: &mut ModelParams<T>, grads: &GradMap, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let inv_bc1 = 1.0 / (1.0 - self.beta1.powi(t));
        let inv_bc2 = 1.0 / (1.0 - self.beta2.powi(t));
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let (omb1, omb2) = (1.0 - b1, 1.0 - b2);
        let state = &mut self.state;
        params.for_each_mut(|name, data| {
            let mo = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; data.len()],
                v: vec![0.0; data.len()],
            });
            assert_eq!(mo.m.len(), data.len(), "stale moment shape for {name}");
            let g = grads.get(name).map(|g| {
                assert_eq!(g.len(), data.len(), "gradient shape mismatch for {name}");
                g.as_slice()
            });
            // Blocked single-type passes so each loop vectorizes.
            const B: usize = 512;
            let mut theta = [0.0f64; B];
            let mut start = 0;
            while start < data.len() {
                let n = (data.len() - start).min(B);
                let mc = &mut mo.m[start..start + n];
                let vc = &mut mo.v[start..start + n];
                match g {
                    Some(g) => {
                        let gc = &g[start..start + n];
                        for i in 0..n {
                            mc[i] = b1 * mc[i] + omb1 * gc[i];
                        }
                        for i in 0..n {
                            vc[i] = b2 * vc[i] + omb2 * gc[i] * gc[i];
                        }
                    }
                    None => {
                        for m in mc.iter_mut() {
                            *m = b1 * *m + omb1 * 0.0;
                        }
                        for v in vc.iter_mut() {
                            *v = b2 * *v + omb2 * 0.0;
                        }
                    }
                }
                let wc = &mut data[start..start + n];
                for i in 0..n {
                    theta[i] = wc[i].into_f64();
                }
                for i in 0..n {
                    let m_hat = mc[i] * inv_bc1;
                    let v_hat = vc[i] * inv_bc2;
                    theta[i] -= lr * wd * theta[i] + lr * m_hat / (v_hat.sqrt() + eps);
                }
                for i in 0..n {
                    wc[i] = T::from_f64(theta[i]);
                }
                start += n;
            }
        });
    }
}

/// Cosine schedule with a linear warmup ramp. During warmup the rate is
/// `peak * (step + 1) / warmup`; afterwards it follows a half cosine from
/// `peak` down to `floor` at the final step.
pub fn cosine_lr(step: usize, total_steps: usize, warmup: usize, peak: f64, floor: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm. The reduction runs in a fixed order (map
/// name order, eight lanes per tensor), so the result is deterministic.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.values() {
        let mut lanes = [0.0f64; 8];
        let mut chunks = g.chunks_exact(8);
        for c in &mut chunks {
            for (acc, &x) in lanes.iter_mut().zip(c) {
                *acc += x * x;
            }
        }
        sq += lanes.iter().sum::<f64>();
        sq += chunks.remainder().iter().map(|&x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}
