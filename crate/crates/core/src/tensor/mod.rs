//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! Every op builds a node in an implicit tape; [`Tensor::backward`] walks the
//! tape in reverse creation order and accumulates gradients for every node
//! that (transitively) depends on a [`Tensor::var`] leaf. Values are always
//! kept in standard (row-major) layout, all math is `f64`, and nothing is
//! threaded, so forward and backward passes are bit-deterministic.

mod conv;

pub use conv::{conv2d, depthwise_conv2d};

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &Node) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    id: u64,
    value: ArrayD<f64>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// A value in the autodiff graph. Cloning is cheap (shared node).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.shape())
            .field("needs_grad", &self.inner.needs_grad)
            .finish()
    }
}

fn standardize(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

impl Tensor {
    /// A node with no gradient tracking.
    pub fn constant(value: ArrayD<f64>) -> Self {
        Tensor {
            inner: Rc::new(Node {
                id: fresh_id(),
                value: standardize(value),
                parents: Vec::new(),
                backward: None,
                needs_grad: false,
            }),
        }
    }

    /// A leaf whose gradient is collected by [`Tensor::backward`].
    pub fn var(value: ArrayD<f64>) -> Self {
        Tensor {
            inner: Rc::new(Node {
                id: fresh_id(),
                value: standardize(value),
                parents: Vec::new(),
                backward: None,
                needs_grad: true,
            }),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    fn op(value: ArrayD<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Self {
        let needs_grad = parents.iter().any(|p| p.inner.needs_grad);
        Tensor {
            inner: Rc::new(Node {
                id: fresh_id(),
                value: standardize(value),
                parents,
                backward: needs_grad.then_some(backward),
                needs_grad,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.inner.value
    }

    pub fn shape(&self) -> &[usize] {
        self.inner.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.inner.value.len()
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }

    /// The single element of a 1-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        *self.inner.value.iter().next().unwrap()
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.inner.value.clone())
    }

    fn slice(&self) -> &[f64] {
        self.inner
            .value
            .as_slice()
            .expect("tensor values are standard layout")
    }

    // ---- elementwise binary (broadcasting) ----

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        binary(self, rhs, BinOp::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        binary(self, rhs, BinOp::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        binary(self, rhs, BinOp::Mul)
    }

    // ---- elementwise unary ----

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let value = self.value().mapv(|v| v * c);
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.mapv(|v| v * c))]),
        )
    }

    pub fn shift(&self, c: f64) -> Tensor {
        let value = self.value().mapv(|v| v + c);
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.clone())]),
        )
    }

    pub fn recip(&self) -> Tensor {
        let value = self.value().mapv(|v| 1.0 / v);
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(|g, node| {
                let x = node.parents[0].value();
                vec![Some(
                    ndarray::Zip::from(g).and(x).map_collect(|&g, &x| -g / (x * x)),
                )]
            }),
        )
    }

    pub fn sqrt_t(&self) -> Tensor {
        let value = self.value().mapv(f64::sqrt);
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(|g, node| {
                let y = &node.value;
                vec![Some(
                    ndarray::Zip::from(g).and(y).map_collect(|&g, &y| 0.5 * g / y),
                )]
            }),
        )
    }

    pub fn abs_t(&self) -> Tensor {
        let value = self.value().mapv(f64::abs);
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(|g, node| {
                let x = node.parents[0].value();
                vec![Some(ndarray::Zip::from(g).and(x).map_collect(|&g, &x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }))]
            }),
        )
    }

    pub fn exp_t(&self) -> Tensor {
        let value = self.value().mapv(f64::exp);
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(|g, node| {
                vec![Some(ndarray::Zip::from(g).and(&node.value).map_collect(|&g, &y| g * y))]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let value = self.value().mapv(|v| 1.0 / (1.0 + (-v).exp()));
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(|g, node| {
                vec![Some(
                    ndarray::Zip::from(g)
                        .and(&node.value)
                        .map_collect(|&g, &y| g * y * (1.0 - y)),
                )]
            }),
        )
    }

    pub fn tanh_t(&self) -> Tensor {
        let value = self.value().mapv(f64::tanh);
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(|g, node| {
                vec![Some(
                    ndarray::Zip::from(g)
                        .and(&node.value)
                        .map_collect(|&g, &y| g * (1.0 - y * y)),
                )]
            }),
        )
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&self) -> Tensor {
        let value = self.value().mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(|g, node| {
                let x = node.parents[0].value();
                vec![Some(
                    ndarray::Zip::from(g)
                        .and(x)
                        .map_collect(|&g, &x| g / (1.0 + (-x).exp())),
                )]
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let value = self.value().mapv(|v| if v > 0.0 { v } else { slope * v });
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g, node| {
                let x = node.parents[0].value();
                vec![Some(ndarray::Zip::from(g).and(x).map_collect(|&g, &x| {
                    if x > 0.0 {
                        g
                    } else {
                        slope * g
                    }
                }))]
            }),
        )
    }

    /// Tanh-form GELU.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let value = self
            .value()
            .mapv(|x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()));
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(|g, node| {
                let x = node.parents[0].value();
                vec![Some(ndarray::Zip::from(g).and(x).map_collect(|&g, &x| {
                    let u = C * (x + A * x * x * x);
                    let t = u.tanh();
                    let sech2 = 1.0 - t * t;
                    let du = C * (1.0 + 3.0 * A * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * du)
                }))]
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let value = ArrayD::from_elem(IxDyn(&[1]), self.value().sum());
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(|g, node| {
                let g0 = g[[0]];
                vec![Some(ArrayD::from_elem(
                    node.parents[0].value().raw_dim(),
                    g0,
                ))]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum along one axis, keeping it as a length-1 dim.
    pub fn sum_axis_keep(&self, axis: usize) -> Tensor {
        let value = self.value().sum_axis(Axis(axis)).insert_axis(Axis(axis));
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g, node| {
                let target = node.parents[0].value().raw_dim();
                let gb = g.broadcast(target.clone()).unwrap().to_owned();
                vec![Some(gb)]
            }),
        )
    }

    pub fn mean_axis_keep(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis_keep(axis).scale(1.0 / n)
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let shape = self.shape().to_vec();
        let t = *shape.last().expect("softmax needs at least 1-d");
        let rows = self.numel() / t;
        let xs = self.slice();
        let mut out = vec![0.0; self.numel()];
        for r in 0..rows {
            let row = &xs[r * t..(r + 1) * t];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out[r * t..(r + 1) * t].iter_mut().zip(row) {
                let e = (v - m).exp();
                *o = e;
                sum += e;
            }
            for o in &mut out[r * t..(r + 1) * t] {
                *o /= sum;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g, node| {
                let y = node.value.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut gx = vec![0.0; y.len()];
                for r in 0..rows {
                    let (ys, gg) = (&y[r * t..(r + 1) * t], &gs[r * t..(r + 1) * t]);
                    let dot: f64 = ys.iter().zip(gg).map(|(&y, &g)| y * g).sum();
                    for i in 0..t {
                        gx[r * t + i] = ys[i] * (gg[i] - dot);
                    }
                }
                vec![Some(
                    ArrayD::from_shape_vec(node.parents[0].value().raw_dim(), gx).unwrap(),
                )]
            }),
        )
    }

    // ---- shape ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            self.numel(),
            shape.iter().product::<usize>(),
            "reshape numel mismatch: {:?} -> {:?}",
            self.shape(),
            shape
        );
        let value = self
            .value()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("standard layout reshape");
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(|g, node| {
                let target = node.parents[0].value().raw_dim();
                vec![Some(g.clone().into_shape_with_order(target).unwrap())]
            }),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let axes_v = axes.to_vec();
        let value = self
            .value()
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut inverse = vec![0usize; axes_v.len()];
                for (i, &a) in axes_v.iter().enumerate() {
                    inverse[a] = i;
                }
                vec![Some(
                    g.clone()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .to_owned(),
                )]
            }),
        )
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let value = self
            .value()
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g, node| {
                let mut gx = ArrayD::zeros(node.parents[0].value().raw_dim());
                gx.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                vec![Some(gx)]
            }),
        )
    }

    // ---- indexing along the (flattened) last axis ----

    /// Gather along the last axis: `out[..., l] = x[..., idx[l]]`, with
    /// `idx[l] == -1` producing zero. The same machinery implements window
    /// partitioning, cyclic shifts, zero padding, crops, and reflect padding.
    pub fn gather_last(&self, idx: &Rc<Vec<i64>>) -> Tensor {
        let p = *self.shape().last().expect("gather needs at least 1-d");
        let rows = self.numel() / p;
        let l = idx.len();
        let xs = self.slice();
        let mut out = vec![0.0; rows * l];
        for r in 0..rows {
            let src = &xs[r * p..(r + 1) * p];
            let dst = &mut out[r * l..(r + 1) * l];
            for (o, &i) in dst.iter_mut().zip(idx.iter()) {
                if i >= 0 {
                    *o = src[i as usize];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = l;
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let idx = Rc::clone(idx);
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g, node| {
                let gs = g.as_slice().unwrap();
                let mut gx = vec![0.0; node.parents[0].value().len()];
                for r in 0..rows {
                    let dst = &mut gx[r * p..(r + 1) * p];
                    let src = &gs[r * l..(r + 1) * l];
                    for (&gv, &i) in src.iter().zip(idx.iter()) {
                        if i >= 0 {
                            dst[i as usize] += gv;
                        }
                    }
                }
                vec![Some(
                    ArrayD::from_shape_vec(node.parents[0].value().raw_dim(), gx).unwrap(),
                )]
            }),
        )
    }

    /// Adjoint of [`Tensor::gather_last`]: scatter-add along the last axis
    /// into a fresh axis of length `out_len` (`out[..., idx[l]] += x[..., l]`;
    /// `idx[l] == -1` drops the element).
    pub fn place_last(&self, idx: &Rc<Vec<i64>>, out_len: usize) -> Tensor {
        let l = *self.shape().last().expect("place needs at least 1-d");
        assert_eq!(l, idx.len(), "place_last index length mismatch");
        let rows = self.numel() / l;
        let xs = self.slice();
        let mut out = vec![0.0; rows * out_len];
        for r in 0..rows {
            let src = &xs[r * l..(r + 1) * l];
            let dst = &mut out[r * out_len..(r + 1) * out_len];
            for (&v, &i) in src.iter().zip(idx.iter()) {
                if i >= 0 {
                    dst[i as usize] += v;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = out_len;
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let idx = Rc::clone(idx);
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g, node| {
                let gs = g.as_slice().unwrap();
                let mut gx = vec![0.0; node.parents[0].value().len()];
                for r in 0..rows {
                    let dst = &mut gx[r * l..(r + 1) * l];
                    let src = &gs[r * out_len..(r + 1) * out_len];
                    for (o, &i) in dst.iter_mut().zip(idx.iter()) {
                        if i >= 0 {
                            *o = src[i as usize];
                        }
                    }
                }
                vec![Some(
                    ArrayD::from_shape_vec(node.parents[0].value().raw_dim(), gx).unwrap(),
                )]
            }),
        )
    }

    // ---- matmul ----

    /// Matrix product. Supports `[m,k]x[k,n]`, batched `[b,m,k]x[b,k,n]`,
    /// and `[b,m,k]x[k,n]` with a shared right operand.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let (la, lb) = (self.shape().len(), rhs.shape().len());
        match (la, lb) {
            (2, 2) => matmul_22(self, rhs),
            (3, 3) => matmul_33(self, rhs),
            (3, 2) => matmul_32(self, rhs),
            _ => panic!("unsupported matmul ranks {la}x{lb}"),
        }
    }

    // ---- backward ----

    /// Reverse pass from a 1-element tensor; returns gradients for every
    /// reachable grad-requiring node (vars included).
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.numel(), 1, "backward() needs a scalar loss");
        assert!(self.needs_grad(), "backward() on a graph with no vars");

        // Collect the reachable grad-requiring subgraph.
        let mut nodes: HashMap<u64, Tensor> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.inner.needs_grad || nodes.contains_key(&t.inner.id) {
                continue;
            }
            for p in &t.inner.parents {
                stack.push(p.clone());
            }
            nodes.insert(t.inner.id, t);
        }
        let mut order: Vec<u64> = nodes.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        let mut grads: HashMap<u64, ArrayD<f64>> = HashMap::new();
        grads.insert(self.inner.id, ArrayD::from_elem(self.value().raw_dim(), 1.0));

        for id in order {
            let t = &nodes[&id];
            let Some(g) = grads.get(&id) else { continue };
            let Some(backward) = &t.inner.backward else {
                continue;
            };
            let parent_grads = backward(g, &t.inner);
            for (p, pg) in t.inner.parents.iter().zip(parent_grads) {
                if !p.inner.needs_grad {
                    continue;
                }
                let Some(pg) = pg else { continue };
                debug_assert_eq!(
                    pg.shape(),
                    p.value().shape(),
                    "gradient shape mismatch for node {}",
                    p.inner.id
                );
                grads
                    .entry(p.inner.id)
                    .and_modify(|acc| *acc += &pg)
                    .or_insert(pg);
            }
        }
        Gradients { map: grads }
    }
}

/// Gradients keyed by tensor id, produced by [`Tensor::backward`].
pub struct Gradients {
    map: HashMap<u64, ArrayD<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&ArrayD<f64>> {
        self.map.get(&t.id())
    }

    pub fn get_by_id(&self, id: u64) -> Option<&ArrayD<f64>> {
        self.map.get(&id)
    }
}

// ---- helpers ----

enum BinOp {
    Add,
    Sub,
    Mul,
}

fn co_broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let ad = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let bd = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = if ad == bd {
            ad
        } else if ad == 1 {
            bd
        } else if bd == 1 {
            ad
        } else {
            panic!("incompatible broadcast {a:?} vs {b:?}")
        };
    }
    out
}

/// Reduce `grad` (shaped like the broadcast output) back to `target` shape.
fn reduce_to_shape(grad: ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    let mut g = grad;
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if target[ax] == 1 && g.shape()[ax] > 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn binary(a: &Tensor, b: &Tensor, op: BinOp) -> Tensor {
    let shape = co_broadcast_shape(a.shape(), b.shape());
    let av = a.value().broadcast(IxDyn(&shape)).expect("lhs broadcast");
    let bv = b.value().broadcast(IxDyn(&shape)).expect("rhs broadcast");
    let value = match op {
        BinOp::Add => &av + &bv,
        BinOp::Sub => &av - &bv,
        BinOp::Mul => &av * &bv,
    };
    let backward: BackwardFn = match op {
        BinOp::Add => Box::new(|g, node| {
            vec![
                Some(reduce_to_shape(g.clone(), node.parents[0].shape())),
                Some(reduce_to_shape(g.clone(), node.parents[1].shape())),
            ]
        }),
        BinOp::Sub => Box::new(|g, node| {
            vec![
                Some(reduce_to_shape(g.clone(), node.parents[0].shape())),
                Some(reduce_to_shape(g.mapv(|v| -v), node.parents[1].shape())),
            ]
        }),
        BinOp::Mul => Box::new(|g, node| {
            let out_shape = node.value.raw_dim();
            let av = node.parents[0].value().broadcast(out_shape.clone()).unwrap();
            let bv = node.parents[1].value().broadcast(out_shape).unwrap();
            vec![
                Some(reduce_to_shape(g * &bv, node.parents[0].shape())),
                Some(reduce_to_shape(g * &av, node.parents[1].shape())),
            ]
        }),
    };
    Tensor::op(value, vec![a.clone(), b.clone()], backward)
}

/// Concatenate along an axis.
pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    assert!(!parts.is_empty());
    let views: Vec<_> = parts.iter().map(|t| t.value().view()).collect();
    let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
    let parents: Vec<Tensor> = parts.iter().map(|&t| t.clone()).collect();
    Tensor::op(
        value,
        parents,
        Box::new(move |g, node| {
            let mut out = Vec::with_capacity(node.parents.len());
            let mut offset = 0;
            for p in &node.parents {
                let len = p.shape()[axis];
                out.push(Some(
                    g.slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + len))
                        .to_owned(),
                ));
                offset += len;
            }
            out
        }),
    )
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality().unwrap()
}

fn as3(a: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality().unwrap()
}

fn matmul_22(a: &Tensor, b: &Tensor) -> Tensor {
    let value = as2(a.value()).dot(&as2(b.value())).into_dyn();
    Tensor::op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|g, node| {
            let g2 = as2(g);
            let av = as2(node.parents[0].value());
            let bv = as2(node.parents[1].value());
            vec![
                Some(g2.dot(&bv.t()).into_dyn()),
                Some(av.t().dot(&g2).into_dyn()),
            ]
        }),
    )
}

fn matmul_33(a: &Tensor, b: &Tensor) -> Tensor {
    let av = as3(a.value());
    let bv = as3(b.value());
    let (ba, m, _k) = av.dim();
    let (bb, _, n) = bv.dim();
    assert_eq!(ba, bb, "batched matmul batch mismatch");
    let mut out = ndarray::Array3::zeros((ba, m, n));
    for i in 0..ba {
        out.index_axis_mut(Axis(0), i)
            .assign(&av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i)));
    }
    Tensor::op(
        out.into_dyn(),
        vec![a.clone(), b.clone()],
        Box::new(|g, node| {
            let g3 = as3(g);
            let av = as3(node.parents[0].value());
            let bv = as3(node.parents[1].value());
            let (batch, m, k) = av.dim();
            let n = bv.dim().2;
            let mut ga = ndarray::Array3::zeros((batch, m, k));
            let mut gb = ndarray::Array3::zeros((batch, k, n));
            for i in 0..batch {
                let gi = g3.index_axis(Axis(0), i);
                ga.index_axis_mut(Axis(0), i)
                    .assign(&gi.dot(&bv.index_axis(Axis(0), i).t()));
                gb.index_axis_mut(Axis(0), i)
                    .assign(&av.index_axis(Axis(0), i).t().dot(&gi));
            }
            vec![Some(ga.into_dyn()), Some(gb.into_dyn())]
        }),
    )
}

fn matmul_32(a: &Tensor, b: &Tensor) -> Tensor {
    let av = as3(a.value());
    let bv = as2(b.value());
    let (batch, m, _k) = av.dim();
    let n = bv.dim().1;
    let mut out = ndarray::Array3::zeros((batch, m, n));
    for i in 0..batch {
        out.index_axis_mut(Axis(0), i)
            .assign(&av.index_axis(Axis(0), i).dot(&bv));
    }
    Tensor::op(
        out.into_dyn(),
        vec![a.clone(), b.clone()],
        Box::new(|g, node| {
            let g3 = as3(g);
            let av = as3(node.parents[0].value());
            let bv = as2(node.parents[1].value());
            let (batch, m, k) = av.dim();
            let mut ga = ndarray::Array3::zeros((batch, m, k));
            let mut gb = ndarray::Array2::zeros(bv.raw_dim());
            for i in 0..batch {
                let gi = g3.index_axis(Axis(0), i);
                ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&bv.t()));
                gb += &av.index_axis(Axis(0), i).t().dot(&gi);
            }
            vec![Some(ga.into_dyn()), Some(gb.into_dyn())]
        }),
    )
}

/// Rearrange `[n, c*r*r, h, w]` into `[n, c, h*r, w*r]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Tensor {
    let s = x.shape().to_vec();
    assert_eq!(s.len(), 4, "pixel_shuffle expects 4-d input");
    let (n, crr, h, w) = (s[0], s[1], s[2], s[3]);
    assert_eq!(crr % (r * r), 0, "channels not divisible by r^2");
    let c = crr / (r * r);
    x.reshape(&[n, c, r, r, h, w])
        .permute(&[0, 1, 4, 2, 5, 3])
        .reshape(&[n, c, h * r, w * r])
}

/// Bilinear upsampling/downsampling of `[n, c, h, w]` to an exact target
/// size (half-pixel centers, edges clamped).
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = x.shape().to_vec();
    assert_eq!(s.len(), 4, "bilinear_resize expects 4-d input");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let l = out_h * out_w;
    let mut idx = [
        Vec::with_capacity(l),
        Vec::with_capacity(l),
        Vec::with_capacity(l),
        Vec::with_capacity(l),
    ];
    let mut wt = [
        Vec::with_capacity(l),
        Vec::with_capacity(l),
        Vec::with_capacity(l),
        Vec::with_capacity(l),
    ];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f64;
            idx[0].push((y0 * w + x0) as i64);
            idx[1].push((y0 * w + x1) as i64);
            idx[2].push((y1 * w + x0) as i64);
            idx[3].push((y1 * w + x1) as i64);
            wt[0].push((1.0 - dy) * (1.0 - dx));
            wt[1].push((1.0 - dy) * dx);
            wt[2].push(dy * (1.0 - dx));
            wt[3].push(dy * dx);
        }
    }
    let flat = x.reshape(&[n, c, h * w]);
    let mut acc: Option<Tensor> = None;
    for corner in 0..4 {
        let gathered = flat.gather_last(&Rc::new(std::mem::take(&mut idx[corner])));
        let weights = Tensor::constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, l]), std::mem::take(&mut wt[corner])).unwrap(),
        );
        let term = gathered.mul(&weights);
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term),
        });
    }
    acc.unwrap().reshape(&[n, c, out_h, out_w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn add_broadcast_reduces_gradient() {
        let a = Tensor::var(randn(&[2, 3, 4], 1));
        let b = Tensor::var(randn(&[1, 3, 1], 2));
        let loss = a.add(&b).mul(&a).sum_all();
        let grads = loss.backward();
        assert_eq!(grads.get(&b).unwrap().shape(), &[1, 3, 1]);
        assert_eq!(grads.get(&a).unwrap().shape(), &[2, 3, 4]);
    }

    #[test]
    fn matmul_shapes() {
        let a = Tensor::var(randn(&[4, 3], 3));
        let b = Tensor::var(randn(&[3, 5], 4));
        assert_eq!(a.matmul(&b).shape(), &[4, 5]);
        let ab = Tensor::var(randn(&[2, 4, 3], 5));
        let bb = Tensor::var(randn(&[2, 3, 5], 6));
        assert_eq!(ab.matmul(&bb).shape(), &[2, 4, 5]);
        assert_eq!(ab.matmul(&b).shape(), &[2, 4, 5]);
    }

    #[test]
    fn gather_place_round_trip() {
        let x = Tensor::var(randn(&[2, 3, 8], 7));
        let idx: Rc<Vec<i64>> = Rc::new(vec![3, 1, 0, 2, 7, 6, 5, 4]);
        let g = x.gather_last(&idx);
        let back = g.place_last(&idx, 8);
        assert_eq!(back.value(), x.value());
    }

    #[test]
    fn gather_pads_zero() {
        let x = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 3]), 5.0));
        let idx: Rc<Vec<i64>> = Rc::new(vec![0, -1, 2]);
        let g = x.gather_last(&idx);
        assert_eq!(g.value().as_slice().unwrap(), &[5.0, 0.0, 5.0]);
    }

    #[test]
    fn pixel_shuffle_matches_reference() {
        // [1, 4, 1, 2] with r=2 -> [1, 1, 2, 4]
        let v = ArrayD::from_shape_vec(IxDyn(&[1, 4, 1, 2]), (0..8).map(|v| v as f64).collect())
            .unwrap();
        let y = pixel_shuffle(&Tensor::constant(v), 2);
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        // channel (ry, rx) layout: out[y*r+ry
        // , x*r+rx] = in[ry*r+rx, y, x]
        assert_eq!(
            y.value().as_slice().unwrap(),
            &[0.0, 2.0, 1.0, 3.0, 4.0, 6.0, 5.0, 7.0]
        );
    }

    #[test]
    fn bilinear_resize_identity_and_constant() {
        let x = Tensor::var(randn(&[1, 2, 5, 5], 11).mapv(f64::abs));
        let y = bilinear_resize(&x, 5, 5);
        for (a, b) in x.value().iter().zip(y.value().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 4, 4]), 0.7));
        let up = bilinear_resize(&c, 9, 13);
        for v in up.value().iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let a = Tensor::var(randn(&[3], 13));
        let loss = a.detach().mul(&a).sum_all();
        let grads = loss.backward();
        // d/da (c * a) = c, not 2a.
        let g = grads.get(&a).unwrap();
        for (gv, av) in g.iter().zip(a.value().iter()) {
            assert!((gv - av).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let a = Tensor::var(ArrayD::from_elem(IxDyn(&[1]), 3.0));
        let b = a.mul(&a); // a^2
        let loss = b.add(&b).sum_all(); // 2 a^2
        let grads = loss.backward();
        assert!((grads.get(&a).unwrap()[[0]] - 12.0).abs() < 1e-12);
    }
}
