//! Minimal reverse-mode automatic differentiation over `f64` n-d arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the recipe for propagating gradients to its inputs. Graphs are built fresh
//! for each forward pass and dropped afterwards. All stored values are kept in
//! standard (row-major) layout so reshapes never copy twice.

use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Slice, Zip};

pub type Array = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Narrow { input: Var, start: usize },
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { input: Var, inv_std: Array },
    SumAll(Var),
    MeanAxes { input: Var, count: usize },
    Upsample { input: Var, factor: usize },
    AvgPool { input: Var, factor: usize },
    Bce { p: Var, target: Array, weight: Array },
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub const BCE_EPS: f64 = 1e-7;

fn standard(a: Array) -> Array {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn reshaped(a: Array, shape: &[usize]) -> Array {
    standard(a)
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape of standard-layout array with equal element count")
}

fn as_matrix(a: &Array, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    a.view()
        .into_shape_with_order((rows, cols))
        .expect("standard-layout array viewed as matrix")
}

/// Reduces a broadcast gradient back to `shape`.
fn sum_to_shape(grad: Array, shape: &[usize]) -> Array {
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    standard(g)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Source indices and weights for half-pixel bilinear upsampling along one axis.
pub(crate) fn bilinear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let n_out = n_in * factor;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let w1 = src - i0 as f64;
            (i0, i1, w1)
        })
        .collect()
}

fn dims4(a: &Array) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected a 4-d channels-last array, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn upsample_forward(x: &Array, factor: usize) -> Array {
    let (b, h, w, c) = dims4(x);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut out = Array::zeros(IxDyn(&[b, h * factor, w * factor, c]));
    for bi in 0..b {
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                for ci in 0..c {
                    let v = (1.0 - wy) * ((1.0 - wx) * x[[bi, y0, x0, ci]] + wx * x[[bi, y0, x1, ci]])
                        + wy * ((1.0 - wx) * x[[bi, y1, x0, ci]] + wx * x[[bi, y1, x1, ci]]);
                    out[[bi, oy, ox, ci]] = v;
                }
            }
        }
    }
    out
}

fn upsample_backward(g: &Array, in_shape: &[usize], factor: usize) -> Array {
    let (b, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut gx = Array::zeros(IxDyn(in_shape));
    for bi in 0..b {
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                for ci in 0..c {
                    let go = g[[bi, oy, ox, ci]];
                    gx[[bi, y0, x0, ci]] += go * (1.0 - wy) * (1.0 - wx);
                    gx[[bi, y0, x1, ci]] += go * (1.0 - wy) * wx;
                    gx[[bi, y1, x0, ci]] += go * wy * (1.0 - wx);
                    gx[[bi, y1, x1, ci]] += go * wy * wx;
                }
            }
        }
    }
    gx
}

fn avgpool_forward(x: &Array, f: usize) -> Array {
    let (b, h, w, c) = dims4(x);
    let (oh, ow) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f64;
    let mut out = Array::zeros(IxDyn(&[b, oh, ow, c]));
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                for ci in 0..c {
                    out[[bi, y / f, xx / f, ci]] += x[[bi, y, xx, ci]] * norm;
                }
            }
        }
    }
    out
}

fn bce_value(p: f64, t: f64) -> f64 {
    let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
}

fn bce_grad(p: f64, t: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        return 0.0;
    }
    -t / p + (1.0 - t) / (1.0 - p)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: standard(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.len(), 1, "scalar() on non-scalar node");
        a.iter().copied().next().unwrap_or(0.0)
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array::from_elem(IxDyn(&[]), value))
    }

    /// Copies the value into a new constant node; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// `a[..., m, k] @ w[k, n]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Var {
        let (av, wv) = (self.value(a), self.value(w));
        let k = *av.shape().last().expect("matmul input has at least one axis");
        assert_eq!(wv.ndim(), 2, "matmul weight must be 2-d");
        assert_eq!(wv.shape()[0], k, "matmul inner dimension mismatch");
        let n = wv.shape()[1];
        let rows = av.len() / k.max(1);
        let w2 = wv.view().into_dimensionality::<Ix2>().expect("2-d weight");
        let out = as_matrix(av, rows, k).dot(&w2);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = reshaped(out.into_dyn(), &shape);
        let rg = self.rg(a) || self.rg(w);
        self.push(value, Op::MatMul(a, w), rg)
    }

    /// Batched `a[..., m, k] @ b[..., k, n]` with identical leading dimensions.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let value = bmm_values(self.value(a), self.value(b), false, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::BatchMatMul(a, b), rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let value = self.value(a).clone().permuted_axes(IxDyn(axes));
        let rg = self.rg(a);
        self.push(value, Op::Permute(a, axes.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = reshaped(self.value(a).clone(), shape);
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Rows `start..start+len` along axis 0.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self
            .value(a)
            .slice_axis(Axis(0), Slice::from(start..start + len))
            .to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Narrow { input: a, start }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let last = Axis(value.ndim() - 1);
        for mut lane in value.lanes_mut(last) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|x| (x - max).exp());
            let sum = lane.sum();
            lane.mapv_inplace(|x| x / sum);
        }
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Parameter-free layer normalization over the last axis.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let last = Axis(x.ndim() - 1);
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.len() / x.shape()[x.ndim() - 1].max(1));
        for mut lane in value.lanes_mut(last) {
            let n = lane.len() as f64;
            let mean = lane.sum() / n;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            lane.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let mut is_shape = x.shape().to_vec();
        *is_shape.last_mut().unwrap() = 1;
        let inv_std = Array::from_shape_vec(IxDyn(&is_shape), inv_std).expect("lane count");
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm { input: a, inv_std }, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array::from_elem(IxDyn(&[]), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over `axes`, keeping them as size-1 dimensions.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let mut value = self.value(a).clone();
        let mut count = 1;
        for &ax in axes {
            count *= value.shape()[ax];
            value = value.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        value.mapv_inplace(|v| v / count.max(1) as f64);
        let rg = self.rg(a);
        self.push(value, Op::MeanAxes { input: a, count }, rg)
    }

    /// Half-pixel bilinear upsampling of a `[B, H, W, C]` array by an integer factor.
    pub fn upsample(&mut self, a: Var, factor: usize) -> Var {
        if factor == 1 {
            return a;
        }
        let value = upsample_forward(self.value(a), factor);
        let rg = self.rg(a);
        self.push(value, Op::Upsample { input: a, factor }, rg)
    }

    /// Non-overlapping average pooling of a `[B, H, W, C]` array.
    pub fn avg_pool(&mut self, a: Var, factor: usize) -> Var {
        if factor == 1 {
            return a;
        }
        let value = avgpool_forward(self.value(a), factor);
        let rg = self.rg(a);
        self.push(value, Op::AvgPool { input: a, factor }, rg)
    }

    /// Elementwise `weight * BCE(clamp(p), target)`; target and weight are constants.
    pub fn bce(&mut self, p: Var, target: Array, weight: Array) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.shape(), target.shape(), "bce target shape");
        assert_eq!(pv.shape(), weight.shape(), "bce weight shape");
        let mut value = pv.clone();
        Zip::from(&mut value)
            .and(&target)
            .and(&weight)
            .for_each(|v, &t, &w| *v = w * bce_value(*v, t));
        let rg = self.rg(p);
        self.push(value, Op::Bce { p, target, weight }, rg)
    }

    /// Reverse pass from a scalar node. Nodes that do not require gradients get none.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::ones(IxDyn(self.value(loss).shape())));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |v: Var, contrib: Array| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(standard(contrib)),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves keep their gradient"),
                Op::Add(a, b) => {
                    send(*a, sum_to_shape(g.clone(), self.shape(*a)));
                    send(*b, sum_to_shape(g.clone(), self.shape(*b)));
                }
                Op::Sub(a, b) => {
                    send(*a, sum_to_shape(g.clone(), self.shape(*a)));
                    send(*b, sum_to_shape(-&g, self.shape(*b)));
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        send(*a, sum_to_shape(&g * self.value(*b), self.shape(*a)));
                    }
                    if self.rg(*b) {
                        send(*b, sum_to_shape(&g * self.value(*a), self.shape(*b)));
                    }
                }
                Op::Scale(a, c) => send(*a, &g * *c),
                Op::MatMul(a, w) => {
                    let (av, wv) = (self.value(*a), self.value(*w));
                    let k = wv.shape()[0];
                    let n = wv.shape()[1];
                    let rows = av.len() / k.max(1);
                    let g2 = as_matrix(&g, rows, n);
                    if self.rg(*a) {
                        let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
                        let ga = g2.dot(&w2.t());
                        send(*a, reshaped(ga.into_dyn(), av.shape()));
                    }
                    if self.rg(*w) {
                        let gw: Array2<f64> = as_matrix(av, rows, k).t().dot(&g2);
                        send(*w, gw.into_dyn());
                    }
                }
                Op::BatchMatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        send(*a, bmm_values(&g, bv, false, true));
                    }
                    if self.rg(*b) {
                        send(*b, bmm_values(av, &g, true, false));
                    }
                }
                Op::Permute(a, axes) => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    send(*a, g.permuted_axes(IxDyn(&inv)));
                }
                Op::Reshape(a) => send(*a, reshaped(g, self.shape(*a))),
                Op::Narrow { input, start } => {
                    let mut full = Array::zeros(IxDyn(self.shape(*input)));
                    let len = g.shape()[0];
                    full.slice_axis_mut(Axis(0), Slice::from(*start..*start + len))
                        .assign(&g);
                    send(*input, full);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    send(*a, &g * &y.mapv(|s| s * (1.0 - s)));
                }
                Op::Gelu(a) => send(*a, &g * &self.value(*a).mapv(gelu_grad)),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy = &g * y;
                    let last = Axis(y.ndim() - 1);
                    let s = gy.sum_axis(last).insert_axis(last);
                    send(*a, y * &(&g - &s));
                }
                Op::LayerNorm { input, inv_std } => {
                    let xhat = &node.value;
                    let last = Axis(xhat.ndim() - 1);
                    let n = xhat.shape()[xhat.ndim() - 1] as f64;
                    let mean_g = g.sum_axis(last).insert_axis(last) / n;
                    let mean_gx = (&g * xhat).sum_axis(last).insert_axis(last) / n;
                    let gx = (&g - &mean_g - &(xhat * &mean_gx)) * inv_std;
                    send(*input, gx);
                }
                Op::SumAll(a) => {
                    let s = g.iter().copied().next().unwrap_or(0.0);
                    send(*a, Array::from_elem(IxDyn(self.shape(*a)), s));
                }
                Op::MeanAxes { input, count } => {
                    let full = g.broadcast(IxDyn(self.shape(*input))).unwrap().to_owned();
                    send(*input, full / *count as f64);
                }
                Op::Upsample { input, factor } => {
                    send(*input, upsample_backward(&g, self.shape(*input), *factor));
                }
                Op::AvgPool { input, factor } => {
                    let f = *factor;
                    let shape = self.shape(*input).to_vec();
                    let norm = 1.0 / (f * f) as f64;
                    let mut gx = Array::zeros(IxDyn(&shape));
                    for ((b, y, x, c), v) in gx
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix4>()
                        .unwrap()
                        .indexed_iter_mut()
                    {
                        *v = g[[b, y / f, x / f, c]] * norm;
                    }
                    send(*input, gx);
                }
                Op::Bce { p, target, weight } => {
                    let mut gp = self.value(*p).clone();
                    Zip::from(&mut gp)
                        .and(target)
                        .and(weight)
                        .and(&g)
                        .for_each(|v, &t, &w, &go| *v = go * w * bce_grad(*v, t));
                    send(*p, gp);
                }
            }
        }
        Gradients { grads }
    }
}

/// Batched matrix product with optional transposition of the trailing two axes.
fn bmm_values(a: &Array, b: &Array, ta: bool, tb: bool) -> Array {
    let nd = a.ndim();
    assert!(nd >= 2 && b.ndim() == nd, "bmm operands need equal rank >= 2");
    assert_eq!(a.shape()[..nd - 2], b.shape()[..nd - 2], "bmm batch dims");
    let batch: usize = a.shape()[..nd - 2].iter().product();
    let (ar, ac) = (a.shape()[nd - 2], a.shape()[nd - 1]);
    let (br, bc) = (b.shape()[nd - 2], b.shape()[nd - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "bmm inner dimension mismatch");
    let a3 = a.view().into_shape_with_order((batch, ar, ac)).unwrap();
    let b3 = b.view().into_shape_with_order((batch, br, bc)).unwrap();
    let mut out = ndarray::Array3::<f64>::zeros((batch, m, n));
    for i in 0..batch {
        let am = a3.index_axis(Axis(0), i);
        let bm = b3.index_axis(Axis(0), i);
        let am = if ta { am.reversed_axes() } else { am };
        let bm = if tb { bm.reversed_axes() } else { bm };
        out.index_axis_mut(Axis(0), i).assign(&am.dot(&bm));
    }
    let mut shape = a.shape()[..nd - 2].to_vec();
    shape.extend([m, n]);
    reshaped(out.into_dyn(), &shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
        Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(f(x) * probe))/dx for a unary graph function.
    fn check_unary(shape: &[usize], f: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_array(&mut rng, shape);
        let eval = |x: &Array| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), true);
            let y = f(&mut g, xv);
            let mut prng = ChaCha8Rng::seed_from_u64(99);
            let probe = rand_array(&mut prng, g.shape(y));
            let p = g.constant(probe);
            let prod = g.mul(y, p);
            let s = g.sum_all(prod);
            (g, xv, s)
        };
        let (g, xv, s) = eval(&x0);
        let grads = g.backward(s);
        let analytic = grads.get(xv).cloned().unwrap_or_else(|| Array::zeros(x0.raw_dim()));
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            let mut xm = x0.clone();
            xm.as_slice_mut().unwrap()[i] -= h;
            let (gp, _, sp) = eval(&xp);
            let (gm, _, sm) = eval(&xm);
            let fd = (gp.scalar(sp) - gm.scalar(sm)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!((a - fd).abs() / denom < 1e-5, "index {i}: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check_unary(&[3, 4], |g, x| g.sigmoid(x));
        check_unary(&[3, 4], |g, x| g.gelu(x));
        check_unary(&[2, 5], |g, x| g.softmax(x));
        check_unary(&[2, 6], |g, x| g.layer_norm(x, 1e-6));
        check_unary(&[2, 3, 4], |g, x| g.mean_axes(x, &[1]));
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        check_unary(&[2, 3, 4], |g, x| g.permute(x, &[2, 0, 1]));
        check_unary(&[2, 3, 4], |g, x| g.reshape(x, &[6, 4]));
        check_unary(&[4, 3], |g, x| g.narrow(x, 1, 2));
        check_unary(&[1, 3, 2, 2], |g, x| g.upsample(x, 2));
        check_unary(&[1, 2, 3, 1], |g, x| g.upsample(x, 4));
        check_unary(&[2, 4, 4, 3], |g, x| g.avg_pool(x, 2));
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_array(&mut rng, &[4, 3]);
        let other = rand_array(&mut rng, &[2, 3, 5]);
        let row = rand_array(&mut rng, &[1, 4]);
        check_unary(&[2, 3, 4], |g, x| {
            let wv = g.constant(w.clone());
            g.matmul(x, wv)
        });
        check_unary(&[2, 4, 3], |g, x| {
            let o = g.constant(other.clone());
            g.bmm(x, o)
        });
        check_unary(&[3, 4], |g, x| {
            let r = g.constant(row.clone());
            let a = g.add(x, r);
            let m = g.mul(a, x);
            g.sub(m, r)
        });
        // gradient w.r.t. the broadcast operand
        let base = rand_array(&mut rng, &[3, 4]);
        check_unary(&[1, 4], |g, r| {
            let b = g.constant(base.clone());
            let m = g.mul(b, r);
            g.add(m, r)
        });
    }

    #[test]
    fn weight_gradient_of_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_array(&mut rng, &[2, 3, 4]);
        check_unary(&[4, 2], |g, w| {
            let xv = g.constant(x.clone());
            g.matmul(xv, w)
        });
    }

    #[test]
    fn bce_gradient_and_clamp() {
        let mut g = Graph::new();
        let p = g.leaf(Array::from_shape_vec(IxDyn(&[3]), vec![0.2, 0.0, 0.7]).unwrap(), true);
        let t = Array::from_shape_vec(IxDyn(&[3]), vec![1.0, 1.0, 0.0]).unwrap();
        let l = g.bce(p, t, Array::ones(IxDyn(&[3])));
        let s = g.sum_all(l);
        let grads = g.backward(s);
        let gp = grads.get(p).unwrap();
        assert!((gp[0] + 1.0 / 0.2).abs() < 1e-12);
        assert_eq!(gp[1], 0.0, "clamped entries pass no gradient");
        assert!((gp[2] - 1.0 / 0.3).abs() < 1e-12);
        assert!((g.value(l)[1] + (BCE_EPS).ln()).abs() < 1e-9);
    }

    #[test]
    fn detached_nodes_block_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Array::from_elem(IxDyn(&[2]), 3.0), true);
        let d = g.detach(x);
        let y = g.mul(x, d);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().as_slice().unwrap(), &[3.0, 3.0]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn upsample_constant_is_constant() {
        let mut g = Graph::new();
        let x = g.constant(Array::from_elem(IxDyn(&[1, 3, 2, 2]), 1.25));
        let y = g.upsample(x, 4);
        assert_eq!(g.shape(y), &[1, 12, 8, 2]);
        assert!(g.value(y).iter().all(|&v| (v - 1.25).abs() < 1e-15));
    }
}
