use std::collections::BTreeMap;

use crate::kernels;
use crate::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward pass is computed by the caller and whose
/// backward pass is supplied here.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &str;

    /// Vector-Jacobian products for each input; `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Powf(Var, T),
    Sqrt(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    Resize(Var),
    AvgPool2(Var),
    Sum(Var),
    WeightedSum(Vec<(Var, T)>),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run computation graph with reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for the backward sweep.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A constant input: gradients never flow into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A named trainable parameter. Repeated requests for the same name return
    /// the same node, so shared sub-networks accumulate into one gradient.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(t.clone());
        self.params.insert(name.to_string(), v);
        v
    }

    /// Registered parameters in name order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Elementwise `x^q`; inputs must be positive where `q` is fractional.
    pub fn powf(&mut self, a: Var, q: T) -> Var {
        let out = self.value(a).map(|x| x.powf(q));
        let rg = self.rg(a);
        self.push(out, Op::Powf(a, q), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.sqrt());
        let rg = self.rg(a);
        self.push(out, Op::Sqrt(a), rg)
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat_channels(&vals);
        let rg = parts.iter().any(|&v| self.rg(v));
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    /// Channels `[start, start + len)`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = kernels::narrow_channels(self.value(x), start, len);
        let rg = self.rg(x);
        self.push(out, Op::Narrow { x, start }, rg)
    }

    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let (out, inv_std) = kernels::instance_norm_forward(self.value(x), eps);
        let rg = self.rg(x);
        self.push(out, Op::InstanceNorm { x, inv_std }, rg)
    }

    /// Bilinear resampling of the two spatial axes (half-pixel centres, clamped edges).
    pub fn resize_bilinear(&mut self, x: Var, ho: usize, wo: usize) -> Var {
        let out = kernels::resize_bilinear_forward(self.value(x), ho, wo);
        let rg = self.rg(x);
        self.push(out, Op::Resize(x), rg)
    }

    /// 2x2 mean over the two trailing axes.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let out = kernels::avg_pool2_forward(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::AvgPool2(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// `sum_k w_k * x_k` over equally shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let mut out = Tensor::zeros(self.value(terms[0].0).shape());
        for &(v, w) in terms {
            out.add_scaled(self.value(v), w);
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(out, Op::WeightedSum(terms.to_vec()), rg)
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, rg)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        self.backward_with(root, Tensor::full(self.value(root).shape(), T::one()))
    }

    /// Reverse sweep seeded with an explicit cotangent for `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.value(root).shape());
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_scaled(&g, T::one()),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let need = [self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b))];
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, need);
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = g.zip_map(self.value(*b), |g, v| g * v);
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = g.zip_map(self.value(*a), |g, v| g * v);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let d = g.zip_map(y, |g, y| if y > T::zero() { g } else { T::zero() });
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(y, |g, y| g * (T::one() - y * y));
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(y, |g, y| g * y * (T::one() - y));
                self.accumulate(grads, *a, d);
            }
            Op::Powf(a, q) => {
                let q = *q;
                let d = g.zip_map(self.value(*a), |g, x| g * q * x.powf(q - T::one()));
                self.accumulate(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let half = T::of(0.5);
                let d = g.zip_map(y, |g, y| g * half / y);
                self.accumulate(grads, *a, d);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).dim(1);
                    if self.rg(p) {
                        self.accumulate(grads, p, kernels::narrow_channels(g, start, c));
                    }
                    start += c;
                }
            }
            Op::Narrow { x, start } => {
                let xs = self.value(*x).shape();
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let len = g.dim(1);
                let mut d = vec![T::zero(); self.value(*x).len()];
                for s in 0..n {
                    let dst = (s * c + start) * inner;
                    let src = s * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::from_vec(xs, d));
            }
            Op::InstanceNorm { x, inv_std } => {
                self.accumulate(grads, *x, kernels::instance_norm_backward(y, inv_std, g));
            }
            Op::Resize(x) => {
                let d = kernels::resize_bilinear_backward(self.value(*x).shape(), g);
                self.accumulate(grads, *x, d);
            }
            Op::AvgPool2(x) => {
                let d = kernels::avg_pool2_backward(self.value(*x).shape(), g);
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.rg(v) {
                        self.accumulate(grads, v, g.map(|x| x * w));
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.rg(v)).collect();
                let ds = op.backward(&vals, y, g, &needs);
                assert_eq!(ds.len(), inputs.len(), "custom op '{}' returned wrong arity", op.name());
                for (&v, d) in inputs.iter().zip(ds) {
                    if let Some(d) = d {
                        assert_eq!(d.shape(), self.value(v).shape(), "custom op '{}' gradient shape", op.name());
                        self.accumulate(grads, v, d);
                    }
                }
            }
        }
    }
}

/// Gradients of differentiable leaves after a backward sweep.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
