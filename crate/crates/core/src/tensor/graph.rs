use std::sync::atomic::{AtomicU64, Ordering};

use super::{Tensor, TensorError};
use crate::nn::kernels::{self, Activation, ConvGeom};
use crate::Scalar;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Elementwise {
        op: ElementwiseOp,
        a: Var,
        b: Var,
    },
    Reduce {
        op: ReduceOp,
        a: Var,
        /// Input shape with reduced axes set to 1.
        kept_shape: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Activation {
        kind: Activation,
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
}

/// Append-only tape of recorded operations.
///
/// Nodes are stored in creation order, so inputs always precede their
/// consumers and a reverse sweep is a valid topological traversal.
#[derive(Debug)]
pub struct Graph<T> {
    id: u64,
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn check(&self, v: Var) -> Result<(), TensorError> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::DetachedRoot(v.index));
        }
        Ok(())
    }

    /// Records a tensor as an input; it participates in differentiation iff
    /// it was created with `requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        // the graph keeps its own accumulation buffer
        let rg = tensor.requires_grad();
        tensor.grad = None;
        tensor.requires_grad = rg;
        self.push_node(tensor, Op::Leaf)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push_node(tensor.detached(), Op::Leaf)
    }

    /// Records a trainable parameter by copying its values.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        let mut t = tensor.detached();
        t.requires_grad = true;
        self.push_node(t, Op::Leaf)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op });
        Var { graph: self.id, index }
    }

    /// Pushes a computed node; it requires grad iff any input does.
    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let mut value = Tensor::from_parts(shape, data);
        value.requires_grad = inputs.iter().any(|v| self.nodes[v.index].value.requires_grad);
        self.push_node(value, op)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.index].value
    }

    #[cfg(test)]
    pub(crate) fn value_at(&self, index: usize) -> &Tensor<T> {
        &self.nodes[index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.index].value.shape()
    }

    /// Accumulated gradient of `v`, present once a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.index].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].value.requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let map = BroadcastMap::new(&sa, &sb)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(av.len());
        map.for_each(|i, j| {
            let (x, y) = (av[i], bv[j]);
            out.push(match op {
                ElementwiseOp::Add => x + y,
                ElementwiseOp::Sub => x - y,
                ElementwiseOp::Mul => x * y,
            });
        });
        Ok(self.push(sa, out, Op::Elementwise { op, a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(ElementwiseOp::Mul, a, b)
    }

    pub fn reduce(&mut self, op: ReduceOp, a: Var, axes: &[usize], keep_dims: bool) -> Result<Var, TensorError> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &axis in axes {
            if axis >= rank {
                return Err(TensorError::InvalidAxis { axis, rank });
            }
            reduced[axis] = true;
        }
        let kept_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let map = BroadcastMap::new(&shape, &kept_shape)?;
        // accumulate in f64 so long f32 reductions do not drift
        let mut acc = vec![0f64; kept_shape.iter().product()];
        let av = self.value(a).data();
        map.for_each(|i, j| acc[j] += av[i].to_f64().unwrap_or(f64::NAN));
        if op == ReduceOp::Mean {
            let count = (av.len() / acc.len()) as f64;
            acc.iter_mut().for_each(|v| *v /= count);
        }
        let out: Vec<T> = acc.into_iter().map(|v| T::from_f64(v).unwrap_or(T::nan())).collect();
        let out_shape = if keep_dims {
            kept_shape.clone()
        } else {
            let s: Vec<usize> = shape
                .iter()
                .zip(&reduced)
                .filter(|(_, &r)| !r)
                .map(|(&d, _)| d)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        Ok(self.push(out_shape, out, Op::Reduce { op, a, kept_shape }, &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(ReduceOp::Sum, a, &axes, false)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(ReduceOp::Mean, a, &axes, false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.check(a)?;
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidShape(shape.to_vec()));
        }
        if numel != self.value(a).numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape(a)
            )));
        }
        let data = self.value(a).data().to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape { a }, &[a]))
    }

    /// Reverse sweep from a scalar root. Gradients are added to whatever
    /// the nodes already hold.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        self.check(root)?;
        let root_value = &self.nodes[root.index].value;
        if root_value.numel() != 1 {
            return Err(TensorError::NotScalar(root_value.shape().to_vec()));
        }
        if !root_value.requires_grad {
            return Ok(());
        }
        let mut adjoints: Vec<Option<Vec<T>>> = (0..=root.index).map(|_| None).collect();
        adjoints[root.index] = Some(vec![T::one()]);
        for idx in (0..=root.index).rev() {
            let Some(upstream) = adjoints[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut adjoints);
            self.nodes[idx].value.accumulate_grad_owned(upstream);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, up: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.index].value;
        let wants = |v: Var| nodes[v.index].value.requires_grad;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Elementwise { op, a, b } => {
                let map = BroadcastMap::new(val(*a).shape(), val(*b).shape()).expect("validated in forward");
                if wants(*a) {
                    let da = slot(adj, *a, val(*a).numel());
                    match op {
                        ElementwiseOp::Add | ElementwiseOp::Sub => {
                            da.iter_mut().zip(up).for_each(|(d, u)| *d = *d + *u);
                        }
                        ElementwiseOp::Mul => {
                            let bv = val(*b).data();
                            map.for_each(|i, j| da[i] = da[i] + up[i] * bv[j]);
                        }
                    }
                }
                if wants(*b) {
                    let av = val(*a).data();
                    let db = slot(adj, *b, val(*b).numel());
                    match op {
                        ElementwiseOp::Add => map.for_each(|i, j| db[j] = db[j] + up[i]),
                        ElementwiseOp::Sub => map.for_each(|i, j| db[j] = db[j] - up[i]),
                        ElementwiseOp::Mul => map.for_each(|i, j| db[j] = db[j] + up[i] * av[i]),
                    }
                }
            }
            Op::Reduce { op, a, kept_shape } => {
                if wants(*a) {
                    let map = BroadcastMap::new(val(*a).shape(), kept_shape).expect("validated in forward");
                    let n_in = val(*a).numel();
                    let scale = match op {
                        ReduceOp::Sum => T::one(),
                        ReduceOp::Mean => T::one() / T::from_usize_lossy(n_in / up.len()),
                    };
                    let da = slot(adj, *a, n_in);
                    map.for_each(|i, j| da[i] = da[i] + up[j] * scale);
                }
            }
            Op::Reshape { a } => {
                if wants(*a) {
                    let da = slot(adj, *a, up.len());
                    da.iter_mut().zip(up).for_each(|(d, u)| *d = *d + *u);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (x, w) = (val(*input).data(), val(*weight).data());
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    kernels::conv2d_backward_bias(up, geom, slot(adj, b, geom.c_out));
                }
                if wants(*weight) {
                    kernels::conv2d_backward_weight(up, x, geom, slot(adj, *weight, w.len()));
                }
                if wants(*input) {
                    kernels::conv2d_backward_input(up, w, geom, slot(adj, *input, x.len()));
                }
            }
            Op::Depthwise { input, weight, geom } => {
                let (x, w) = (val(*input).data(), val(*weight).data());
                if wants(*weight) {
                    kernels::depthwise_backward_weight(up, x, geom, slot(adj, *weight, w.len()));
                }
                if wants(*input) {
                    kernels::depthwise_backward_input(up, w, geom, slot(adj, *input, x.len()));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let x = val(*input);
                let dims = kernels::nchw(x.shape());
                let gv = val(*gamma).data();
                let (dgamma, dbeta) = kernels::batch_norm_param_grads(up, x.data(), dims, mean, inv_std);
                if wants(*gamma) {
                    add_into(slot(adj, *gamma, dims.1), &dgamma);
                }
                if wants(*beta) {
                    add_into(slot(adj, *beta, dims.1), &dbeta);
                }
                if wants(*input) {
                    kernels::batch_norm_backward_input(
                        up,
                        x.data(),
                        dims,
                        gv,
                        mean,
                        inv_std,
                        (&dgamma, &dbeta),
                        *train,
                        slot(adj, *input, x.numel()),
                    );
                }
            }
            Op::Activation { kind, input } => {
                if wants(*input) {
                    let x = val(*input).data();
                    let dx = slot(adj, *input, x.len());
                    for ((d, &xi), &u) in dx.iter_mut().zip(x).zip(up) {
                        *d = *d + u * kind.derivative(xi);
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                if wants(*input) {
                    let x = val(*input);
                    let (_, _, h, w) = kernels::nchw(x.shape());
                    let hw = h * w;
                    let scale = T::one() / T::from_usize_lossy(hw);
                    let dx = slot(adj, *input, x.numel());
                    for (plane, &u) in dx.chunks_mut(hw).zip(up) {
                        let g = u * scale;
                        plane.iter_mut().for_each(|d| *d = *d + g);
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = val(*input);
                let w = val(*weight);
                let (n, f) = (x.shape()[0], x.shape()[1]);
                let g = w.shape()[0];
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    let db = slot(adj, b, g);
                    for row in up.chunks(g) {
                        add_into(db, row);
                    }
                }
                if wants(*weight) {
                    let dw = slot(adj, *weight, g * f);
                    // dW (g×f) += dyᵀ (g×n) · x (n×f)
                    T::gemm(
                        g,
                        n,
                        f,
                        T::one(),
                        up,
                        (1, g as isize),
                        x.data(),
                        (f as isize, 1),
                        T::one(),
                        dw,
                        (f as isize, 1),
                    );
                }
                if wants(*input) {
                    let dx = slot(adj, *input, n * f);
                    // dx (n×f) += dy (n×g) · W (g×f)
                    T::gemm(
                        n,
                        g,
                        f,
                        T::one(),
                        up,
                        (g as isize, 1),
                        w.data(),
                        (f as isize, 1),
                        T::one(),
                        dx,
                        (f as isize, 1),
                    );
                }
            }
            Op::Dropout { input, mask } => {
                if wants(*input) {
                    let dx = slot(adj, *input, mask.len());
                    for ((d, &m), &u) in dx.iter_mut().zip(mask).zip(up) {
                        *d = *d + u * m;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if wants(*logits) {
                    let n = targets.len();
                    let g = probs.len() / n;
                    let scale = up[0] / T::from_usize_lossy(n);
                    let dl = slot(adj, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..g {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            let i = r * g + c;
                            dl[i] = dl[i] + (probs[i] - onehot) * scale;
                        }
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(adj: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    adj[v.index].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s);
}

/// Index mapping from a full shape onto a same-rank shape whose extents are
/// either equal or 1.
struct BroadcastMap {
    shape: Vec<usize>,
    small_strides: Vec<usize>,
    /// Set when each small element covers one contiguous run of this length.
    block: Option<usize>,
}

impl BroadcastMap {
    fn new(full: &[usize], small: &[usize]) -> Result<Self, TensorError> {
        if small.len() > full.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "{small:?} cannot broadcast to {full:?}"
            )));
        }
        // left-pad the smaller shape with unit extents
        let pad = full.len() - small.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, pad).chain(small.iter().copied()).collect();
        let mut strides = vec![0; full.len()];
        let mut acc = 1;
        for axis in (0..full.len()).rev() {
            let (f, s) = (full[axis], padded[axis]);
            if s == f {
                strides[axis] = if s == 1 { 0 } else { acc };
            } else if s == 1 {
                strides[axis] = 0;
            } else {
                return Err(TensorError::ShapeMismatch(format!(
                    "{small:?} cannot broadcast to {full:?}"
                )));
            }
            acc *= s;
        }
        let split = padded.iter().rposition(|&s| s != 1).map_or(0, |p| p + 1);
        let block = (padded[..split] == full[..split]).then(|| full[split..].iter().product());
        Ok(Self {
            shape: full.to_vec(),
            small_strides: strides,
            block,
        })
    }

    /// Calls `f(full_index, small_index)` in row-major order of the full shape.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let total: usize = self.shape.iter().product();
        if let Some(block) = self.block.filter(|&b| b > 0) {
            for j in 0..total / block {
                for i in j * block..(j + 1) * block {
                    f(i, j);
                }
            }
            return;
        }
        let rank = self.shape.len();
        let inner = self.shape[rank - 1];
        let inner_stride = self.small_strides[rank - 1];
        let mut counter = vec![0usize; rank];
        let mut base = 0usize;
        let mut i = 0;
        while i < total {
            for k in 0..inner {
                f(i + k, base + k * inner_stride);
            }
            i += inner;
            // advance the outer counter
            let mut axis = rank - 1;
            while axis > 0 {
                axis -= 1;
                counter[axis] += 1;
                base += self.small_strides[axis];
                if counter[axis] < self.shape[axis] {
                    break;
                }
                base -= self.small_strides[axis] * counter[axis];
                counter[axis] = 0;
            }
        }
    }
}
