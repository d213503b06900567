//! Tape-based reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Graph`] is an append-only arena of nodes. Builder methods compute
//! values eagerly (define-by-run) and record the operation so
//! [`Graph::backward`] can replay the tape in reverse. [`Var`] is a plain
//! index handle; everything lives in the arena, so graphs are cheap to
//! build per step and dropped afterwards.
//!
//! Gradients are reset at the start of every `backward` call and
//! reaccumulated in a fixed order, so repeated calls on the same graph
//! produce bit-identical results.
//!
//! Shape conventions: activations are 2-d `[rows, cols]`, biases and gate
//! vectors are 1-d, and loss roots are 0-d scalars.

use ndarray::{concatenate, s, Array1, Array2, ArrayD, Axis, Ix1, Ix2};
use num_traits::Float;

/// LayerNorm epsilon, fixed crate-wide.
pub const LN_EPS: f64 = 1e-5;

/// Additive constant for causal attention masking. Large enough to zero
/// the softmax, small enough that adding an ordinary score never
/// overflows f32 to -inf.
pub const ATTN_NEG: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(t: u8) -> Option<Dtype> {
        match t {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    /// Bytes per element.
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Element type the engine is generic over (f32 or f64).
pub trait Scalar:
    Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::NumAssignOps
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(x: f64) -> f64 {
        x
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Matmul(Var, Var),
    Transpose(Var),
    Silu(Var),
    Ln(Var),
    Exp(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Array1<T>, rstd: Array1<T> },
    SoftmaxRows(Var),
    CrossEntropyMean { logits: Var, targets: Vec<usize>, probs: Array2<T> },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    GatherElems { x: Var, idx: Vec<(usize, usize)> },
    ScaleRows { x: Var, s: Var },
    Rope { x: Var, positions: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Sum(Var),
    ColMeans(Var),
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    grad: Option<ArrayD<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

fn view2<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-d tensor")
}

fn view1<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView1<'_, T> {
    a.view()
        .into_dimensionality::<Ix1>()
        .expect("expected a 1-d tensor")
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input node.
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input node (masks, targets-as-data, constants).
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    /// Value of a scalar (single-element) node as f64.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() on a node with {} elements", val.len());
        val.iter().next().unwrap().into_f64()
    }

    /// Gradient accumulated by the last `backward` call, if any.
    pub fn grad(&self, v: Var) -> Option<&ArrayD<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = va + vb;
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    /// `[m,n] + [n]`, bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let va = view2(&self.nodes[a.0].value);
        let vb = view1(&self.nodes[bias.0].value);
        assert_eq!(va.ncols(), vb.len(), "add_bias: width mismatch");
        let out = (&va + &vb).into_dyn();
        let ng = self.ng(&[a, bias]);
        self.push(out, Op::AddBias(a, bias), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = va * vb;
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = &self.nodes[a.0].value * c;
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// `[m,k] . [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = view2(&self.nodes[a.0].value);
        let vb = view2(&self.nodes[b.0].value);
        assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dim mismatch");
        let out = va.dot(&vb).into_dyn();
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Matmul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = view2(&self.nodes[a.0].value);
        let out = va.t().to_owned().into_dyn();
        let ng = self.ng(&[a]);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| x * sigmoid(x));
        let ng = self.ng(&[a]);
        self.push(out, Op::Silu(a), ng)
    }

    /// Elementwise natural log. Caller guarantees positive inputs.
    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| x.ln());
        let ng = self.ng(&[a]);
        self.push(out, Op::Ln(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| x.exp());
        let ng = self.ng(&[a]);
        self.push(out, Op::Exp(a), ng)
    }

    /// Row-wise LayerNorm with learned gain/offset: `[m,n], [n], [n] -> [m,n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = view2(&self.nodes[x.0].value);
        let vg = view1(&self.nodes[gamma.0].value);
        let vb = view1(&self.nodes[beta.0].value);
        let (m, n) = vx.dim();
        assert_eq!(vg.len(), n, "layer_norm: gamma width mismatch");
        assert_eq!(vb.len(), n, "layer_norm: beta width mismatch");
        let eps = T::from_f64(LN_EPS);
        let inv_n = T::from_f64(1.0 / n as f64);
        let mut out = Array2::<T>::zeros((m, n));
        let mut mean = Array1::<T>::zeros(m);
        let mut rstd = Array1::<T>::zeros(m);
        for i in 0..m {
            let row = vx.row(i);
            let mu = row.iter().fold(T::zero(), |acc, &v| acc + v) * inv_n;
            let var = row
                .iter()
                .fold(T::zero(), |acc, &v| acc + (v - mu) * (v - mu))
                * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            mean[i] = mu;
            rstd[i] = rs;
            for j in 0..n {
                out[(i, j)] = (row[j] - mu) * rs * vg[j] + vb[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(out.into_dyn(), Op::LayerNorm { x, gamma, beta, mean, rstd }, ng)
    }

    /// Row-wise softmax with max-shift: `[m,n] -> [m,n]`.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = view2(&self.nodes[a.0].value);
        let (m, n) = va.dim();
        let mut out = Array2::<T>::zeros((m, n));
        for i in 0..m {
            let row = va.row(i);
            let max = row.iter().fold(T::min_value(), |acc, &v| acc.max(v));
            let mut sum = T::zero();
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[(i, j)] = e;
                sum += e;
            }
            for j in 0..n {
                out[(i, j)] /= sum;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out.into_dyn(), Op::SoftmaxRows(a), ng)
    }

    /// Mean cross-entropy of `[m,v]` logits against `m` target ids (0-d output).
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Var {
        let vl = view2(&self.nodes[logits.0].value);
        let (m, v) = vl.dim();
        assert_eq!(targets.len(), m, "cross_entropy_mean: target count mismatch");
        assert!(m > 0, "cross_entropy_mean: empty batch");
        let mut probs = Array2::<T>::zeros((m, v));
        let mut total = 0.0f64;
        for i in 0..m {
            let t = targets[i];
            assert!(t < v, "cross_entropy_mean: target {t} out of range {v}");
            let row = vl.row(i);
            let max = row.iter().fold(T::min_value(), |acc, &x| acc.max(x));
            let mut sum = T::zero();
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[(i, j)] = e;
                sum += e;
            }
            for j in 0..v {
                probs[(i, j)] /= sum;
            }
            let lse = max.into_f64() + sum.into_f64().ln();
            total += lse - row[t].into_f64();
        }
        let out = ndarray::arr0(T::from_f64(total / m as f64)).into_dyn();
        let ng = self.ng(&[logits]);
        self.push(out, Op::CrossEntropyMean { logits, targets: targets.to_vec(), probs }, ng)
    }

    /// Copy rows `idx` of `[m,n]` into `[idx.len(),n]`. Duplicate indices allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let vx = view2(&self.nodes[x.0].value);
        let (m, n) = vx.dim();
        let mut out = Array2::<T>::zeros((idx.len(), n));
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < m, "gather_rows: row {r} out of range {m}");
            out.row_mut(i).assign(&vx.row(r));
        }
        let ng = self.ng(&[x]);
        self.push(out.into_dyn(), Op::GatherRows { x, idx: idx.to_vec() }, ng)
    }

    /// Scatter-add rows of `[k,n]` into a zero `[out_rows,n]` at positions `idx`.
    /// Duplicate target rows accumulate.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], out_rows: usize) -> Var {
        let vx = view2(&self.nodes[x.0].value);
        let (k, n) = vx.dim();
        assert_eq!(idx.len(), k, "scatter_rows: index count mismatch");
        let mut out = Array2::<T>::zeros((out_rows, n));
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < out_rows, "scatter_rows: row {r} out of range {out_rows}");
            let src = vx.row(i);
            let mut dst = out.row_mut(r);
            dst += &src;
        }
        let ng = self.ng(&[x]);
        self.push(out.into_dyn(), Op::ScatterRows { x, idx: idx.to_vec() }, ng)
    }

    /// Pick single elements `(row, col)` of `[m,n]` into a 1-d `[k]` vector.
    pub fn gather_elems(&mut self, x: Var, idx: &[(usize, usize)]) -> Var {
        let vx = view2(&self.nodes[x.0].value);
        let (m, n) = vx.dim();
        let mut out = Array1::<T>::zeros(idx.len());
        for (i, &(r, c)) in idx.iter().enumerate() {
            assert!(r < m && c < n, "gather_elems: ({r},{c}) out of range ({m},{n})");
            out[i] = vx[(r, c)];
        }
        let ng = self.ng(&[x]);
        self.push(out.into_dyn(), Op::GatherElems { x, idx: idx.to_vec() }, ng)
    }

    /// Multiply each row of `[m,n]` by the matching entry of a 1-d `[m]` vector.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let vx = view2(&self.nodes[x.0].value);
        let vs = view1(&self.nodes[s.0].value);
        let (m, n) = vx.dim();
        assert_eq!(vs.len(), m, "scale_rows: scale length mismatch");
        let mut out = Array2::<T>::zeros((m, n));
        for i in 0..m {
            let si = vs[i];
            for j in 0..n {
                out[(i, j)] = vx[(i, j)] * si;
            }
        }
        let ng = self.ng(&[x, s]);
        self.push(out.into_dyn(), Op::ScaleRows { x, s }, ng)
    }

    /// Rotary position embedding over `[m, d]` with one position per row.
    /// Columns are split in halves: pair `(j, j + d/2)` rotates by the
    /// angle `pos / 10000^(2j/d)`.
    pub fn rope(&mut self, x: Var, positions: &[usize]) -> Var {
        let vx = view2(&self.nodes[x.0].value);
        let (m, d) = vx.dim();
        assert_eq!(positions.len(), m, "rope: position count mismatch");
        assert!(d % 2 == 0, "rope: head dim must be even");
        let half = d / 2;
        let mut out = Array2::<T>::zeros((m, d));
        for i in 0..m {
            let p = positions[i] as f64;
            for j in 0..half {
                let theta = p / 10000f64.powf(2.0 * j as f64 / d as f64);
                let (sin, cos) = (T::from_f64(theta.sin()), T::from_f64(theta.cos()));
                let (x1, x2) = (vx[(i, j)], vx[(i, j + half)]);
                out[(i, j)] = x1 * cos - x2 * sin;
                out[(i, j + half)] = x1 * sin + x2 * cos;
            }
        }
        let ng = self.ng(&[x]);
        self.push(out.into_dyn(), Op::Rope { x, positions: positions.to_vec() }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let views: Vec<_> = parts.iter().map(|v| view2(&self.nodes[v.0].value)).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        let ng = self.ng(parts);
        self.push(out.into_dyn(), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let views: Vec<_> = parts.iter().map(|v| view2(&self.nodes[v.0].value)).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: height mismatch");
        let ng = self.ng(parts);
        self.push(out.into_dyn(), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = view2(&self.nodes[x.0].value);
        assert!(start + len <= vx.ncols(), "slice_cols: range out of bounds");
        let out = vx.slice(s![.., start..start + len]).to_owned().into_dyn();
        let ng = self.ng(&[x]);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    /// Sum of all elements (0-d output).
    pub fn sum(&mut self, a: Var) -> Var {
        let out = ndarray::arr0(self.nodes[a.0].value.sum()).into_dyn();
        let ng = self.ng(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    /// Column means of `[m,n] -> [n]`.
    pub fn col_means(&mut self, a: Var) -> Var {
        let va = view2(&self.nodes[a.0].value);
        let (m, _) = va.dim();
        assert!(m > 0, "col_means: empty input");
        let out = (va.sum_axis(Axis(0)) / T::from_f64(m as f64)).into_dyn();
        let ng = self.ng(&[a]);
        self.push(out, Op::ColMeans(a), ng)
    }

    fn accum(&mut self, v: Var, c: ArrayD<T>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match node.grad.take() {
            Some(mut g) => {
                g += &c;
                node.grad = Some(g);
            }
            None => node.grad = Some(c),
        }
    }

    /// Vector-Jacobian product: owned gradient contributions for each input
    /// of node `i`, given the output gradient `g`.
    fn vjp(&self, i: usize, g: &ArrayD<T>) -> Vec<(Var, ArrayD<T>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddBias(a, bias) => {
                let g2 = view2(g);
                vec![(*a, g.clone()), (*bias, g2.sum_axis(Axis(0)).into_dyn())]
            }
            Op::Mul(a, b) => vec![
                (*a, g * &self.nodes[b.0].value),
                (*b, g * &self.nodes[a.0].value),
            ],
            Op::Scale(a, c) => vec![(*a, g * *c)],
            Op::Matmul(a, b) => {
                let g2 = view2(g);
                let va = view2(&self.nodes[a.0].value);
                let vb = view2(&self.nodes[b.0].value);
                vec![
                    (*a, g2.dot(&vb.t()).into_dyn()),
                    (*b, va.t().dot(&g2).into_dyn()),
                ]
            }
            Op::Transpose(a) => vec![(*a, view2(g).t().to_owned().into_dyn())],
            Op::Silu(a) => {
                let dx = self.nodes[a.0].value.mapv(|x| {
                    let s = sigmoid(x);
                    s * (T::one() + x * (T::one() - s))
                });
                vec![(*a, g * &dx)]
            }
            Op::Ln(a) => vec![(*a, g / &self.nodes[a.0].value)],
            Op::Exp(a) => vec![(*a, g * &node.value)],
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let g2 = view2(g);
                let vx = view2(&self.nodes[x.0].value);
                let vg = view1(&self.nodes[gamma.0].value);
                let (m, n) = vx.dim();
                let inv_n = T::from_f64(1.0 / n as f64);
                let mut dx = Array2::<T>::zeros((m, n));
                let mut dgamma = Array1::<T>::zeros(n);
                let mut dbeta = Array1::<T>::zeros(n);
                for i in 0..m {
                    let (mu, rs) = (mean[i], rstd[i]);
                    let mut mean_dy = T::zero();
                    let mut mean_dy_xhat = T::zero();
                    for j in 0..n {
                        let xhat = (vx[(i, j)] - mu) * rs;
                        let dy = g2[(i, j)] * vg[j];
                        mean_dy += dy;
                        mean_dy_xhat += dy * xhat;
                        dgamma[j] += g2[(i, j)] * xhat;
                        dbeta[j] += g2[(i, j)];
                    }
                    mean_dy *= inv_n;
                    mean_dy_xhat *= inv_n;
                    for j in 0..n {
                        let xhat = (vx[(i, j)] - mu) * rs;
                        let dy = g2[(i, j)] * vg[j];
                        dx[(i, j)] = rs * (dy - mean_dy - xhat * mean_dy_xhat);
                    }
                }
                vec![
                    (*x, dx.into_dyn()),
                    (*gamma, dgamma.into_dyn()),
                    (*beta, dbeta.into_dyn()),
                ]
            }
            Op::SoftmaxRows(a) => {
                let g2 = view2(g);
                let y = view2(&node.value);
                let (m, n) = y.dim();
                let mut dx = Array2::<T>::zeros((m, n));
                for i in 0..m {
                    let mut dot = T::zero();
                    for j in 0..n {
                        dot += g2[(i, j)] * y[(i, j)];
                    }
                    for j in 0..n {
                        dx[(i, j)] = y[(i, j)] * (g2[(i, j)] - dot);
                    }
                }
                vec![(*a, dx.into_dyn())]
            }
            Op::CrossEntropyMean { logits, targets, probs } => {
                let gs = g.iter().next().copied().unwrap_or_else(T::zero);
                let (m, _v) = probs.dim();
                let scale = gs * T::from_f64(1.0 / m as f64);
                let mut dl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dl[(i, t)] -= T::one();
                }
                vec![(*logits, (dl * scale).into_dyn())]
            }
            Op::GatherRows { x, idx } => {
                let g2 = view2(g);
                let (m, n) = view2(&self.nodes[x.0].value).dim();
                let mut dx = Array2::<T>::zeros((m, n));
                for (i, &r) in idx.iter().enumerate() {
                    let mut dst = dx.row_mut(r);
                    dst += &g2.row(i);
                }
                vec![(*x, dx.into_dyn())]
            }
            Op::ScatterRows { x, idx } => {
                let g2 = view2(g);
                let (k, n) = view2(&self.nodes[x.0].value).dim();
                let mut dx = Array2::<T>::zeros((k, n));
                for (i, &r) in idx.iter().enumerate() {
                    dx.row_mut(i).assign(&g2.row(r));
                }
                vec![(*x, dx.into_dyn())]
            }
            Op::GatherElems { x, idx } => {
                let g1 = view1(g);
                let (m, n) = view2(&self.nodes[x.0].value).dim();
                let mut dx = Array2::<T>::zeros((m, n));
                for (i, &(r, c)) in idx.iter().enumerate() {
                    dx[(r, c)] += g1[i];
                }
                vec![(*x, dx.into_dyn())]
            }
            Op::ScaleRows { x, s } => {
                let g2 = view2(g);
                let vx = view2(&self.nodes[x.0].value);
                let vs = view1(&self.nodes[s.0].value);
                let (m, n) = vx.dim();
                let mut dx = Array2::<T>::zeros((m, n));
                let mut ds = Array1::<T>::zeros(m);
                for i in 0..m {
                    for j in 0..n {
                        dx[(i, j)] = g2[(i, j)] * vs[i];
                        ds[i] += g2[(i, j)] * vx[(i, j)];
                    }
                }
                vec![(*x, dx.into_dyn()), (*s, ds.into_dyn())]
            }
            Op::Rope { x, positions } => {
                let g2 = view2(g);
                let (m, d) = g2.dim();
                let half = d / 2;
                let mut dx = Array2::<T>::zeros((m, d));
                for i in 0..m {
                    let p = positions[i] as f64;
                    for j in 0..half {
                        let theta = p / 10000f64.powf(2.0 * j as f64 / d as f64);
                        let (sin, cos) = (T::from_f64(theta.sin()), T::from_f64(theta.cos()));
                        let (g1, gh) = (g2[(i, j)], g2[(i, j + half)]);
                        dx[(i, j)] = g1 * cos + gh * sin;
                        dx[(i, j + half)] = -g1 * sin + gh * cos;
                    }
                }
                vec![(*x, dx.into_dyn())]
            }
            Op::ConcatRows(parts) => {
                let g2 = view2(g);
                let mut out = Vec::with_capacity(parts.len());
                let mut row = 0;
                for &p in parts {
                    let h = view2(&self.nodes[p.0].value).nrows();
                    out.push((p, g2.slice(s![row..row + h, ..]).to_owned().into_dyn()));
                    row += h;
                }
                out
            }
            Op::ConcatCols(parts) => {
                let g2 = view2(g);
                let mut out = Vec::with_capacity(parts.len());
                let mut col = 0;
                for &p in parts {
                    let w = view2(&self.nodes[p.0].value).ncols();
                    out.push((p, g2.slice(s![.., col..col + w]).to_owned().into_dyn()));
                    col += w;
                }
                out
            }
            Op::SliceCols { x, start } => {
                let g2 = view2(g);
                let (m, n) = view2(&self.nodes[x.0].value).dim();
                let mut dx = Array2::<T>::zeros((m, n));
                dx.slice_mut(s![.., *start..*start + g2.ncols()]).assign(&g2);
                vec![(*x, dx.into_dyn())]
            }
            Op::Sum(a) => {
                let gs = g.iter().next().copied().unwrap_or_else(T::zero);
                let shape = self.nodes[a.0].value.raw_dim();
                vec![(*a, ArrayD::from_elem(shape, gs))]
            }
            Op::ColMeans(a) => {
                let g1 = view1(g);
                let (m, n) = view2(&self.nodes[a.0].value).dim();
                let inv_m = T::from_f64(1.0 / m as f64);
                let mut dx = Array2::<T>::zeros((m, n));
                for i in 0..m {
                    for j in 0..n {
                        dx[(i, j)] = g1[j] * inv_m;
                    }
                }
                vec![(*a, dx.into_dyn())]
            }
        }
    }

    /// Reverse pass from a scalar root. Clears all gradients first, so
    /// calling it twice yields bit-identical results.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be a scalar"
        );
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].needs_grad {
            return;
        }
        let shape = self.nodes[root.0].value.raw_dim();
        self.nodes[root.0].grad = Some(ArrayD::from_elem(shape, T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.vjp(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, c) in contributions {
                self.accum(v, c);
            }
        }
    }
}

/// Max relative error between analytic and central-difference gradients of
/// a scalar-valued builder over the given inputs.
///
/// The builder must be deterministic. Relative error uses
/// `|a - n| / max(|a|, |n|, 1)`.
pub fn grad_check<F>(build: F, inputs: &[ArrayD<f64>], eps: f64) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let root = build(&mut g, &vars);
        g.scalar(root)
    };

    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let root = build(&mut g, &vars);
    g.backward(root);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| match g.grad(v) {
            Some(gr) => gr.iter().copied().collect(),
            None => vec![0.0; g.value(v).len()],
        })
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let orig = work[k].as_slice_mut().unwrap()[idx];
            work[k].as_slice_mut().unwrap()[idx] = orig + eps;
            let plus = eval(&work);
            work[k].as_slice_mut().unwrap()[idx] = orig - eps;
            let minus = eval(&work);
            work[k].as_slice_mut().unwrap()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k][idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}
