//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Graph`] records operations on `Array2<f64>` values. Frozen weights
//! enter as constants and never receive gradients; only leaves created with
//! [`Graph::param`] are differentiated. Operations whose inputs are all
//! constant are evaluated eagerly and stored without backward state, so an
//! inference-only forward pass costs no more than a plain evaluation.

use std::cell::{Ref, RefCell};

use ndarray::{s, Array1, Array2, Axis, Zip};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Transpose(Var),
    LayerNorm {
        input: Var,
        gamma: Array1<f64>,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    PixelShuffle {
        input: Var,
        grid: (usize, usize),
        patch: usize,
        channels: usize,
    },
    BceWithLogits {
        logits: Var,
        target: Array2<f64>,
    },
    Dice {
        logits: Var,
        target: Array2<f64>,
        eps: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every differentiable node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss
    /// through any differentiable path.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub(crate) const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + exp(-|x|)) + max(x, 0) - x*y`.
pub(crate) fn bce_term(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

fn layer_norm_values(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, istd) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        *istd = 1.0 / (var + LN_EPS).sqrt();
        let is = *istd;
        row.mapv_inplace(|v| (v - mean) * is);
    }
    let y = &xhat * gamma + beta;
    (y, xhat, inv_std)
}

pub(crate) fn dice_value(probs: &Array2<f64>, target: &Array2<f64>, eps: f64) -> f64 {
    let inter: f64 = Zip::from(probs).and(target).fold(0.0, |acc, p, y| acc + p * y);
    1.0 - (2.0 * inter + eps) / (probs.sum() + target.sum() + eps)
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Array2<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&*self.value(b));
        self.push(value, Op::MatMul(a, b), self.needs(&[a, b]))
    }

    /// `a @ w` for a constant right operand held outside the graph.
    pub fn linear(&self, a: Var, w: &Array2<f64>) -> Var {
        let wv = self.constant(w.clone());
        self.matmul(a, wv)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) + &*self.value(b);
        self.push(value, Op::Add(a, b), self.needs(&[a, b]))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let value = &*self.value(a) * factor;
        self.push(value, Op::Scale(a, factor), self.needs(&[a]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a), self.needs(&[a]))
    }

    pub fn gelu(&self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a), self.needs(&[a]))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a), self.needs(&[a]))
    }

    /// Row-wise layer normalization with frozen affine parameters.
    pub fn layer_norm(&self, a: Var, gamma: &Array1<f64>, beta: &Array1<f64>) -> Var {
        let (value, xhat, inv_std) = layer_norm_values(&self.value(a), gamma, beta);
        let op = Op::LayerNorm {
            input: a,
            gamma: gamma.clone(),
            xhat,
            inv_std,
        };
        self.push(value, op, self.needs(&[a]))
    }

    /// Multi-head scaled dot-product attention on already-projected
    /// queries `(n, d)`, keys `(m, d)` and values `(m, d)`.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (value, probs) = {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            let d = qv.ncols();
            assert_eq!(kv.ncols(), d, "attention key width");
            assert_eq!(vv.ncols(), d, "attention value width");
            assert_eq!(kv.nrows(), vv.nrows(), "attention key/value count");
            assert!(heads > 0 && d % heads == 0, "attention heads must divide width");
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut out = Array2::zeros((qv.nrows(), d));
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut scores = qv.slice(cols).dot(&kv.slice(cols).t());
                scores *= scale;
                softmax_rows(&mut scores);
                out.slice_mut(cols).assign(&scores.dot(&vv.slice(cols)));
                probs.push(scores);
            }
            (out, probs)
        };
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        };
        self.push(value, op, self.needs(&[q, k, v]))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows width mismatch")
        };
        self.push(value, Op::ConcatRows(parts.to_vec()), self.needs(parts))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start), self.needs(&[a]))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start), self.needs(&[a]))
    }

    /// Rearranges per-token blocks of `patch*patch*channels` values into a
    /// pixel grid of `(grid.0*patch) * (grid.1*patch)` rows of `channels`.
    pub fn pixel_shuffle(&self, a: Var, grid: (usize, usize), patch: usize, channels: usize) -> Var {
        let value = {
            let x = self.value(a);
            assert_eq!(x.dim(), (grid.0 * grid.1, patch * patch * channels));
            let width = grid.1 * patch;
            let mut out = Array2::zeros((grid.0 * patch * width, channels));
            for ty in 0..grid.0 {
                for tx in 0..grid.1 {
                    let token = x.row(ty * grid.1 + tx);
                    for py in 0..patch {
                        for px in 0..patch {
                            let pixel = (ty * patch + py) * width + tx * patch + px;
                            let base = (py * patch + px) * channels;
                            for c in 0..channels {
                                out[[pixel, c]] = token[base + c];
                            }
                        }
                    }
                }
            }
            out
        };
        let op = Op::PixelShuffle {
            input: a,
            grid,
            patch,
            channels,
        };
        self.push(value, op, self.needs(&[a]))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`.
    pub fn bce_with_logits(&self, logits: Var, target: &Array2<f64>) -> Var {
        let value = {
            let x = self.value(logits);
            assert_eq!(x.dim(), target.dim(), "bce shape");
            let total: f64 = Zip::from(&*x).and(target).fold(0.0, |acc, &x, &y| acc + bce_term(x, y));
            total / x.len() as f64
        };
        let op = Op::BceWithLogits {
            logits,
            target: target.clone(),
        };
        self.push(Array2::from_elem((1, 1), value), op, self.needs(&[logits]))
    }

    /// Soft Dice loss of `sigmoid(logits)` against `target`.
    pub fn dice_with_logits(&self, logits: Var, target: &Array2<f64>, eps: f64) -> Var {
        let value = {
            let x = self.value(logits);
            assert_eq!(x.dim(), target.dim(), "dice shape");
            dice_value(&x.mapv(sigmoid), target, eps)
        };
        let op = Op::Dice {
            logits,
            target: target.clone(),
            eps,
        };
        self.push(Array2::from_elem((1, 1), value), op, self.needs(&[logits]))
    }

    /// Back-propagates from the 1x1 node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let live = |v: &Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if live(a) {
                        accumulate(&mut grads, *a, g.dot(&nodes[b.0].value.t()));
                    }
                    if live(b) {
                        accumulate(&mut grads, *b, nodes[a.0].value.t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if live(a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if live(b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, &g * *f),
                Op::Relu(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(&nodes[a.0].value)
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    accumulate(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(&nodes[a.0].value)
                        .for_each(|d, &x| *d *= gelu_grad(x));
                    accumulate(&mut grads, *a, d);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::LayerNorm {
                    input,
                    gamma,
                    xhat,
                    inv_std,
                } => {
                    let n = xhat.ncols() as f64;
                    let dxhat = &g * gamma;
                    let mut dx = Array2::zeros(dxhat.dim());
                    for r in 0..dxhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_d = dh.sum();
                        let sum_dx = dh.dot(&xh);
                        let istd = inv_std[r];
                        for c in 0..dh.len() {
                            dx[[r, c]] = istd / n * (n * dh[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Array2::zeros(qv.dim());
                    let mut dk = Array2::zeros(kv.dim());
                    let mut dv = Array2::zeros(vv.dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let gh = g.slice(cols);
                        let dp = gh.dot(&vv.slice(cols).t());
                        dv.slice_mut(cols).assign(&p.t().dot(&gh));
                        let mut ds = &dp * p;
                        let row_sums = ds.sum_axis(Axis(1));
                        Zip::from(ds.rows_mut())
                            .and(p.rows())
                            .and(&row_sums)
                            .for_each(|mut ds_row, p_row, &rs| ds_row.scaled_add(-rs, &p_row));
                        ds *= scale;
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    if live(q) {
                        accumulate(&mut grads, *q, dq);
                    }
                    if live(k) {
                        accumulate(&mut grads, *k, dk);
                    }
                    if live(v) {
                        accumulate(&mut grads, *v, dv);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = nodes[p.0].value.nrows();
                        if live(p) {
                            accumulate(&mut grads, *p, g.slice(s![start..start + rows, ..]).to_owned());
                        }
                        start += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(nodes[a.0].value.dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(nodes[a.0].value.dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, d);
                }
                Op::PixelShuffle {
                    input,
                    grid,
                    patch,
                    channels,
                } => {
                    let width = grid.1 * patch;
                    let mut d = Array2::zeros((grid.0 * grid.1, patch * patch * channels));
                    for ty in 0..grid.0 {
                        for tx in 0..grid.1 {
                            let t = ty * grid.1 + tx;
                            for py in 0..*patch {
                                for px in 0..*patch {
                                    let pixel = (ty * patch + py) * width + tx * patch + px;
                                    let base = (py * patch + px) * channels;
                                    for c in 0..*channels {
                                        d[[t, base + c]] = g[[pixel, c]];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *input, d);
                }
                Op::BceWithLogits { logits, target } => {
                    let x = &nodes[logits.0].value;
                    let n = x.len() as f64;
                    let gs = g[[0, 0]];
                    let mut d = Array2::zeros(x.dim());
                    Zip::from(&mut d)
                        .and(x)
                        .and(target)
                        .for_each(|d, &x, &y| *d = gs * (sigmoid(x) - y) / n);
                    accumulate(&mut grads, *logits, d);
                }
                Op::Dice {
                    logits,
                    target,
                    eps,
                } => {
                    let x = &nodes[logits.0].value;
                    let p = x.mapv(sigmoid);
                    let inter: f64 = Zip::from(&p).and(target).fold(0.0, |a, p, y| a + p * y);
                    let num = 2.0 * inter + eps;
                    let den = p.sum() + target.sum() + eps;
                    let gs = g[[0, 0]];
                    let mut d = Array2::zeros(x.dim());
                    Zip::from(&mut d)
                        .and(&p)
                        .and(target)
                        .for_each(|d, &p, &y| {
                            let dl_dp = -(2.0 * y * den - num) / (den * den);
                            *d = gs * dl_dp * p * (1.0 - p);
                        });
                    accumulate(&mut grads, *logits, d);
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(build)/d(input) for every entry.
    fn check<F>(input: Array2<f64>, build: F)
    where
        F: Fn(&Graph, Var) -> Var,
    {
        let g = Graph::new();
        let x = g.param(input.clone());
        let out = build(&g, x);
        let analytic = g.backward(out).get(x).cloned().unwrap();
        let h = 1e-6;
        for idx in 0..input.len() {
            let eval = |delta: f64| {
                let mut p = input.clone();
                p.as_slice_mut().unwrap()[idx] += delta;
                let g = Graph::new();
                let x = g.constant(p);
                let out = build(&g, x);
                g.scalar(out)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "entry {idx}: analytic {a} numeric {numeric}");
        }
    }

    // Reduces any matrix to a scalar through a fixed random linear functional.
    fn project(g: &Graph, v: Var, seed: u64) -> Var {
        let (r, c) = g.shape(v);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(&mut rng, c, 1);
        let y = g.linear(v, &w);
        let yt = g.transpose(y);
        let ones = g.constant(Array2::ones((r, 1)));
        g.matmul(yt, ones)
    }

    #[test]
    fn matmul_and_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 3, 4);
        check(random(&mut rng, 2, 3), |g, x| {
            let y = g.linear(x, &w);
            let t = g.transpose(y);
            let z = g.matmul(y, t);
            project(g, z, 7)
        });
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gamma = Array1::from_vec(vec![0.5, 1.5, -1.0, 2.0]);
        let beta = Array1::from_vec(vec![0.1, 0.0, -0.3, 0.2]);
        check(random(&mut rng, 3, 4), |g, x| {
            let y = g.layer_norm(x, &gamma, &beta);
            project(g, y, 3)
        });
    }

    #[test]
    fn attention_gradient_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random(&mut rng, 5, 4);
        let wq = random(&mut rng, 4, 4);
        check(random(&mut rng, 3, 4), |g, x| {
            let q = g.linear(x, &wq);
            let kk = g.constant(k.clone());
            let keys = g.concat_rows(&[kk, x]);
            let a = g.attention(q, keys, keys, 2);
            project(g, a, 5)
        });
    }

    #[test]
    fn gelu_relu_slices_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(random(&mut rng, 4, 6), |g, x| {
            let a = g.gelu(x);
            let b = g.slice_cols(a, 1, 4);
            let c = g.slice_rows(x, 0, 2);
            let c = g.relu(c);
            let c = g.slice_cols(c, 0, 3);
            let c = g.scale(c, 0.7);
            let top = g.slice_rows(b, 1, 3);
            let s = g.add(top, c);
            project(g, s, 9)
        });
    }

    #[test]
    fn pixel_shuffle_gradient_and_layout() {
        let g = Graph::new();
        let x = Array2::from_shape_fn((4, 8), |(t, j)| (t * 8 + j) as f64);
        let v = g.constant(x);
        let y = g.pixel_shuffle(v, (2, 2), 2, 2);
        let y = g.value(y);
        assert_eq!(y.dim(), (16, 2));
        // pixel (row 1, col 2) belongs to token 1 sub-position (1, 0)
        assert_eq!(y[[1 * 4 + 2, 0]], (8 + 2 * 2) as f64);
        drop(y);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check(random(&mut rng, 4, 8), |g, x| {
            let y = g.pixel_shuffle(x, (2, 2), 2, 2);
            project(g, y, 11)
        });
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let target = Array2::from_shape_fn((3, 3), |(i, j)| ((i + j) % 2) as f64);
        check(random(&mut rng, 3, 3) * 3.0, |g, x| g.bce_with_logits(x, &target));
        check(random(&mut rng, 3, 3) * 3.0, |g, x| g.dice_with_logits(x, &target, 1.0));
    }

    #[test]
    fn constants_record_no_gradient() {
        let g = Graph::new();
        let a = g.constant(Array2::ones((2, 2)));
        let p = g.param(Array2::ones((2, 2)));
        let b = g.matmul(a, a);
        assert!(!g.requires_grad(b));
        let c = g.matmul(b, p);
        let loss = project(&g, c, 1);
        let grads = g.backward(loss);
        assert!(grads.get(a).is_none());
        assert!(grads.get(p).is_some());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut s = random(&mut rng, 4, 7) * 10.0;
        softmax_rows(&mut s);
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
