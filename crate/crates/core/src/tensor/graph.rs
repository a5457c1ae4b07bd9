use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self, broadcast_binary, reduce_to_shape};
use super::{numel, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    SumAxis(Var, usize),
    SumAll(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Relu(Var),
    Gelu(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Clamp { x: Var, lo: T, hi: T },
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    DepthwiseConv { x: Var, w: Var, b: Option<Var> },
    Focused { x: Var, p: u32 },
    Guard { x: Var, floor: T },
    IndexSelect { table: Var, idx: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run tape.
///
/// Nodes are appended in execution order, so inputs always precede their
/// consumers and a reverse sweep visits each node once. A graph created with
/// [`Graph::inference`] keeps values but records no backward information.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    recording: bool,
    guard_hits: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            guard_hits: 0,
        }
    }

    /// A graph that never tracks gradients.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of elements whose denominator was clamped by [`Graph::guard`].
    pub fn guard_hits(&self) -> usize {
        self.guard_hits
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of the leaf `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// A leaf that receives gradient when the graph records.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.recording;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let value = broadcast_binary(name, self.value(a), self.value(b), f)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let value = self.value(x).map(|v| v + s);
        self.push(value, Op::AddScalar(x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)`; `ta`/`tb` transpose the last two axes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = kernels::matmul_t(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(value, Op::MatMul { a, ta, b, tb }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = kernels::permute(self.value(x), perm)?;
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {r} < 2")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = kernels::sum_axis_keep(self.value(x), axis)?;
        Ok(self.push(value, Op::SumAxis(x, axis), &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        kernels::check_axis("mean", self.shape(x), axis)?;
        let n = self.shape(x)[axis];
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = kernels::slice_axis(self.value(x), axis, start, len)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = kernels::concat(&values, axis)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::relu);
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::silu);
        self.push(value, Op::Silu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::exp);
        self.push(value, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::ln);
        self.push(value, Op::Log(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Clamp into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(value, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = kernels::softmax_last(self.value(x))?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    pub fn layernorm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (value, rstd) = kernels::layernorm_last(self.value(x), eps)?;
        Ok(self.push(value, Op::LayerNorm { x, rstd }, &[x]))
    }

    pub fn conv2d_depthwise(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = kernels::conv2d_depthwise(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::DepthwiseConv { x, w, b }, &inputs))
    }

    pub fn focused(&mut self, x: Var, p: u32) -> Result<Var> {
        let value = kernels::focused(self.value(x), p)?;
        Ok(self.push(value, Op::Focused { x, p }, &[x]))
    }

    /// Pushes every element away from zero to at least `floor` in magnitude,
    /// keeping its sign. Clamped elements pass no gradient and are counted in
    /// [`Graph::guard_hits`].
    pub fn guard(&mut self, x: Var, floor: f64) -> Var {
        let floor = T::lit(floor);
        let hits = self.value(x).data().iter().filter(|v| v.abs() < floor).count();
        let value = self.value(x).map(|v| {
            if v.abs() < floor {
                if v < T::zero() {
                    -floor
                } else {
                    floor
                }
            } else {
                v
            }
        });
        self.guard_hits += hits;
        self.push(value, Op::Guard { x, floor }, &[x])
    }

    pub fn index_select(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let value = kernels::index_select(self.value(table), idx)?;
        Ok(self.push(
            value,
            Op::IndexSelect {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.recording {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        let n = self.nodes.len();
        self.grads.resize(n, None);
        let mut pending: Vec<Option<Vec<T>>> = vec![None; n];
        pending[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut pending)?;
            if !matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Clears accumulated gradients.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn backprop_node(&self, i: usize, g: &[T], pending: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let mut send = |v: Var, grad: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            debug_assert_eq!(grad.len(), self.nodes[v.0].value.len());
            match &mut pending[v.0] {
                Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a = *a + *b),
                slot @ None => *slot = Some(grad),
            }
        };
        let gt = || Tensor::from_parts(out_shape.to_vec(), g.to_vec());
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, reduce_to_shape(g, out_shape, self.shape(*a)));
                send(*b, reduce_to_shape(g, out_shape, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                send(*a, reduce_to_shape(g, out_shape, self.shape(*a)));
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                send(*b, reduce_to_shape(&neg, out_shape, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = broadcast_binary("mul", &gt(), vb, |x, y| x * y)?;
                    send(*a, reduce_to_shape(ga.data(), out_shape, va.shape()));
                }
                if self.requires_grad(*b) {
                    let gb = broadcast_binary("mul", &gt(), va, |x, y| x * y)?;
                    send(*b, reduce_to_shape(gb.data(), out_shape, vb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = broadcast_binary("div", &gt(), vb, |x, y| x / y)?;
                    send(*a, reduce_to_shape(ga.data(), out_shape, va.shape()));
                }
                if self.requires_grad(*b) {
                    // d(a/b)/db = -(a/b)/b = -out/b
                    let q = broadcast_binary("div", &node.value, vb, |x, y| x / y)?;
                    let gb: Vec<T> = q.data().iter().zip(g).map(|(&x, &y)| -x * y).collect();
                    send(*b, reduce_to_shape(&gb, out_shape, vb.shape()));
                }
            }
            Op::Scale(x, s) => send(*x, g.iter().map(|&v| v * *s).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => send(*x, g.to_vec()),
            Op::MatMul { a, ta, b, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let dc = gt();
                if self.requires_grad(*a) {
                    let da = if *ta {
                        kernels::matmul_impl(vb, *tb, &dc, true, false)?
                    } else {
                        kernels::matmul_impl(&dc, false, vb, !*tb, false)?
                    };
                    send(*a, reduce_to_shape(da.data(), da.shape(), va.shape()));
                }
                if self.requires_grad(*b) {
                    let db = if *tb {
                        kernels::matmul_impl(&dc, true, va, *ta, false)?
                    } else {
                        kernels::matmul_impl(va, !*ta, &dc, false, false)?
                    };
                    send(*b, reduce_to_shape(db.data(), db.shape(), vb.shape()));
                }
            }
            Op::Permute(x, perm) => {
                let back = kernels::permute(&gt(), &kernels::inverse_perm(perm))?;
                send(*x, back.into_data());
            }
            Op::SumAxis(x, axis) => {
                let xs = self.shape(*x);
                let outer = numel(&xs[..*axis]);
                let n = xs[*axis];
                let inner = numel(&xs[axis + 1..]);
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                send(*x, gx);
            }
            Op::SumAll(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let outer = numel(&xs[..*axis]);
                let n = xs[*axis];
                let inner = numel(&xs[axis + 1..]);
                let len = out_shape[*axis];
                let mut gx = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, gx);
            }
            Op::Concat { parts, axis } => {
                let outer = numel(&out_shape[..*axis]);
                let total = out_shape[*axis];
                let inner = numel(&out_shape[axis + 1..]);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    let mut gp = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[src..src + n * inner]);
                    }
                    offset += n;
                    send(p, gp);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                send(
                    *x,
                    xv.iter()
                        .zip(g)
                        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                );
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                send(*x, xv.iter().zip(g).map(|(&v, &d)| d * kernels::gelu_grad(v)).collect());
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                send(*x, xv.iter().zip(g).map(|(&v, &d)| d * kernels::silu_grad(v)).collect());
            }
            Op::Exp(x) => {
                let y = node.value.data();
                send(*x, y.iter().zip(g).map(|(&v, &d)| d * v).collect());
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                send(*x, xv.iter().zip(g).map(|(&v, &d)| d / v).collect());
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                send(
                    *x,
                    xv.iter()
                        .zip(g)
                        .map(|(&v, &d)| if v >= *lo && v <= *hi { d } else { T::zero() })
                        .collect(),
                );
            }
            Op::Softmax(x) => {
                let n = *out_shape.last().expect("softmax rank >= 1");
                send(*x, kernels::softmax_backward(node.value.data(), g, n));
            }
            Op::LayerNorm { x, rstd } => {
                let n = *out_shape.last().expect("layernorm rank >= 1");
                send(*x, kernels::layernorm_backward(node.value.data(), rstd, g, n));
            }
            Op::DepthwiseConv { x, w, b } => {
                let (dx, dw, db) =
                    kernels::conv2d_depthwise_backward(self.value(*x), self.value(*w), g);
                send(*x, dx);
                send(*w, dw);
                if let Some(b) = b {
                    send(*b, db);
                }
            }
            Op::Focused { x, p } => {
                let n = *out_shape.last().expect("focused rank >= 1");
                send(*x, kernels::focused_backward(self.value(*x).data(), g, n, *p));
            }
            Op::Guard { x, floor } => {
                let xv = self.value(*x).data();
                send(
                    *x,
                    xv.iter()
                        .zip(g)
                        .map(|(&v, &d)| if v.abs() < *floor { T::zero() } else { d })
                        .collect(),
                );
            }
            Op::IndexSelect { table, idx } => {
                let ts = self.shape(*table);
                let dim = ts[1];
                let mut gt = vec![T::zero(); numel(ts)];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..dim {
                        gt[i * dim + j] = gt[i * dim + j] + g[r * dim + j];
                    }
                }
                send(*table, gt);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64([3], &[1., -2., 5.]).unwrap());
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64([2], &[1., 2.]).unwrap());
        let sq = g.square(x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64([3], &[1., 2., 3.]).unwrap());
        let y = g.constant(Tensor::from_f64([3], &[4., -5., 6.]).unwrap());
        let p = g.mul(x, y).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4., -5., 6.]);
        assert!(g.grad(y).is_none());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64([2], &[1., 2.]).unwrap());
        let l = g.sum(x);
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 2.]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_graph_records_nothing() {
        let mut g = Graph::<f32>::inference();
        let x = g.leaf(Tensor::ones([2]));
        let y = g.relu(x);
        assert!(!g.requires_grad(y));
        let l = g.sum(y);
        assert!(g.backward(l).is_err());
    }

    #[test]
    fn mean_and_reshape_round_trip() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64([2], &[2., 4.]).unwrap());
        let m = g.mean(x);
        assert_eq!(g.value(m).item().unwrap(), 3.0);
        let r = g.reshape(x, &[1, 2]).unwrap();
        let back = g.reshape(r, &[2]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn guard_counts_and_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64([3], &[1e-9, -1e-9, 0.5]).unwrap());
        let y = g.guard(x, 1e-6);
        assert_eq!(g.value(y).data(), &[1e-6, -1e-6, 0.5]);
        assert_eq!(g.guard_hits(), 2);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0., 0., 1.]);
    }
}
