//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order. [`Graph::backward`] walks the tape in reverse and returns the
//! gradients of every leaf created with [`Graph::param`]. Leaves created with
//! [`Graph::constant`] (and anything computed only from constants) never
//! receive gradients and cost nothing in the backward pass.

use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Below this estimate a weight is treated as numerically zero and left unscaled.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Abs,
    /// `ln(clamp(x, eps, 1 - eps))`.
    ClampedLog(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geometry: ConvGeometry,
    },
    Upsample {
        input: usize,
        mode: UpsampleMode,
    },
    Concat {
        inputs: Vec<usize>,
    },
    SliceChannels {
        input: usize,
        start: usize,
    },
    Reshape {
        input: usize,
    },
    TransposeLast2 {
        input: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
    },
    Softmax {
        input: usize,
    },
    Unary {
        input: usize,
        kind: Unary,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Affine {
        input: usize,
        scale: f64,
    },
    Sum {
        input: usize,
    },
    MeanTrailing {
        input: usize,
        axis: usize,
    },
    SpectralNorm {
        weight: usize,
        u: Rc<[f64]>,
        v: Rc<[f64]>,
        sigma: Option<f64>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation tape. Create one per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`], substituting zeros for an unreached leaf.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
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
        self.nodes.borrow().is_empty()
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse pass from a one-element `output`.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        assert_eq!(
            output.value().numel(),
            1,
            "backward needs a scalar output, got shape {:?}",
            output.shape()
        );
        let seed = Tensor::full(output.shape(), 1.0);
        self.backward_with(output, seed)
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, output: Var<'_>, seed: Tensor) -> Gradients {
        assert!(std::ptr::eq(output.graph, self), "variable from another graph");
        let nodes = self.nodes.borrow();
        assert_eq!(seed.shape(), nodes[output.id].value.shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(seed);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            backprop_node(&nodes, node, &grad, &mut grads);
        }
        // Only leaves keep their gradients.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[id] = None;
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, grad: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let need = |id: usize| nodes[id].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geometry,
        } => {
            let x = val(*input);
            let w = val(*weight);
            let batch = x.dim(0);
            let out_channels = w.dim(0);
            let res = kernels::conv2d_backward(
                x.data(),
                batch,
                geometry,
                w.data(),
                out_channels,
                grad.data(),
                need(*input),
                need(*weight),
                bias.is_some_and(&need),
            );
            if let Some(dx) = res.input {
                accumulate(grads, *input, Tensor::from_vec(x.shape(), dx));
            }
            if let Some(dw) = res.weight {
                accumulate(grads, *weight, Tensor::from_vec(w.shape(), dw));
            }
            if let (Some(b), Some(db)) = (bias, res.bias) {
                accumulate(grads, *b, Tensor::from_vec(val(*b).shape(), db));
            }
        }
        Op::Upsample { input, mode } => {
            let x = val(*input);
            let (n, c, h, w) = dims4(x);
            let dx = match mode {
                UpsampleMode::Nearest => kernels::upsample_nearest_backward(grad.data(), n * c, h, w),
                UpsampleMode::Bilinear => {
                    kernels::upsample_bilinear_backward(grad.data(), n * c, h, w)
                }
            };
            accumulate(grads, *input, Tensor::from_vec(x.shape(), dx));
        }
        Op::Concat { inputs } => {
            let batch = grad.dim(0);
            let rest: usize = grad.shape()[2..].iter().product();
            let total_c = grad.dim(1);
            let mut offset = 0;
            for &part in inputs {
                let xs = val(part);
                let c = xs.dim(1);
                if need(part) {
                    let mut d = Vec::with_capacity(xs.numel());
                    for n in 0..batch {
                        let base = (n * total_c + offset) * rest;
                        d.extend_from_slice(&grad.data()[base..base + c * rest]);
                    }
                    accumulate(grads, part, Tensor::from_vec(xs.shape(), d));
                }
                offset += c;
            }
        }
        Op::SliceChannels { input, start } => {
            let x = val(*input);
            let batch = x.dim(0);
            let total_c = x.dim(1);
            let rest: usize = x.shape()[2..].iter().product();
            let len = grad.dim(1);
            let mut d = vec![0.0; x.numel()];
            for n in 0..batch {
                let dst = (n * total_c + start) * rest;
                let src = n * len * rest;
                d[dst..dst + len * rest].copy_from_slice(&grad.data()[src..src + len * rest]);
            }
            accumulate(grads, *input, Tensor::from_vec(x.shape(), d));
        }
        Op::Reshape { input } => {
            let shape = val(*input).shape().to_vec();
            accumulate(grads, *input, grad.clone().reshape(shape));
        }
        Op::TransposeLast2 { input } => {
            let g = transpose_last2(grad);
            accumulate(grads, *input, g);
        }
        Op::BatchMatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (batch, m, k) = (av.dim(0), av.dim(1), av.dim(2));
            let n = bv.dim(2);
            if need(*a) {
                let mut d = vec![0.0; av.numel()];
                for i in 0..batch {
                    crate::gemm::gemm(
                        m,
                        n,
                        k,
                        1.0,
                        &grad.data()[i * m * n..],
                        false,
                        &bv.data()[i * k * n..],
                        true,
                        0.0,
                        &mut d[i * m * k..],
                    );
                }
                accumulate(grads, *a, Tensor::from_vec(av.shape(), d));
            }
            if need(*b) {
                let mut d = vec![0.0; bv.numel()];
                for i in 0..batch {
                    crate::gemm::gemm(
                        k,
                        m,
                        n,
                        1.0,
                        &av.data()[i * m * k..],
                        true,
                        &grad.data()[i * m * n..],
                        false,
                        0.0,
                        &mut d[i * k * n..],
                    );
                }
                accumulate(grads, *b, Tensor::from_vec(bv.shape(), d));
            }
        }
        Op::Softmax { input } => {
            let y = &node.value;
            let cols = *y.shape().last().unwrap();
            let mut d = vec![0.0; y.numel()];
            for ((dr, yr), gr) in d
                .chunks_mut(cols)
                .zip(y.data().chunks(cols))
                .zip(grad.data().chunks(cols))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = yv * (gv - dot);
                }
            }
            accumulate(grads, *input, Tensor::from_vec(y.shape(), d));
        }
        Op::Unary { input, kind } => {
            let x = val(*input);
            let y = &node.value;
            let d: Vec<f64> = match *kind {
                Unary::Relu => x
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                    .collect(),
                Unary::LeakyRelu(slope) => x
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&xv, &g)| if xv > 0.0 { g } else { slope * g })
                    .collect(),
                Unary::Tanh => y
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&yv, &g)| g * (1.0 - yv * yv))
                    .collect(),
                Unary::Sigmoid => y
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&yv, &g)| g * yv * (1.0 - yv))
                    .collect(),
                Unary::Abs => x
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&xv, &g)| g * sign(xv))
                    .collect(),
                Unary::ClampedLog(eps) => x
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&xv, &g)| {
                        if xv < eps || xv > 1.0 - eps {
                            0.0
                        } else {
                            g / xv
                        }
                    })
                    .collect(),
            };
            accumulate(grads, *input, Tensor::from_vec(x.shape(), d));
        }
        Op::Add { a, b } => {
            if need(*a) {
                accumulate(grads, *a, grad.clone());
            }
            if need(*b) {
                accumulate(grads, *b, grad.clone());
            }
        }
        Op::Sub { a, b } => {
            if need(*a) {
                accumulate(grads, *a, grad.clone());
            }
            if need(*b) {
                accumulate(grads, *b, grad.scale(-1.0));
            }
        }
        Op::Mul { a, b } => {
            if need(*a) {
                accumulate(grads, *a, grad.zip_map(val(*b), |g, bv| g * bv));
            }
            if need(*b) {
                accumulate(grads, *b, grad.zip_map(val(*a), |g, av| g * av));
            }
        }
        Op::Affine { input, scale } => {
            accumulate(grads, *input, grad.scale(*scale));
        }
        Op::Sum { input } => {
            let x = val(*input);
            accumulate(grads, *input, Tensor::full(x.shape(), grad.item()));
        }
        Op::MeanTrailing { input, axis } => {
            let x = val(*input);
            let inner: usize = x.shape()[*axis..].iter().product();
            let inv = 1.0 / inner as f64;
            let mut d = Vec::with_capacity(x.numel());
            for &g in grad.data() {
                d.extend(std::iter::repeat_n(g * inv, inner));
            }
            accumulate(grads, *input, Tensor::from_vec(x.shape(), d));
        }
        Op::SpectralNorm {
            weight,
            u,
            v,
            sigma,
        } => {
            let Some(sigma) = *sigma else {
                accumulate(grads, *weight, grad.clone());
                return;
            };
            let w = val(*weight);
            let cols = v.len();
            // d(W/s)/dW = G/s - <G, W>/s^2 * u v^T, with s = u^T W v.
            let inner: f64 = grad.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            let coef = inner / (sigma * sigma);
            let mut d = Vec::with_capacity(w.numel());
            for (r, &ur) in u.iter().enumerate() {
                for (c, &vc) in v.iter().enumerate() {
                    d.push(grad.data()[r * cols + c] / sigma - coef * ur * vc);
                }
            }
            accumulate(grads, *weight, Tensor::from_vec(w.shape(), d));
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    assert_eq!(t.ndim(), 4, "expected (N, C, H, W), got {:?}", t.shape());
    (t.dim(0), t.dim(1), t.dim(2), t.dim(3))
}

fn transpose_last2(t: &Tensor) -> Tensor {
    assert_eq!(t.ndim(), 3, "transpose expects (B, M, N), got {:?}", t.shape());
    let (b, m, n) = (t.dim(0), t.dim(1), t.dim(2));
    let mut out = vec![0.0; t.numel()];
    for i in 0..b {
        let src = &t.data()[i * m * n..(i + 1) * m * n];
        let dst = &mut out[i * m * n..(i + 1) * m * n];
        for r in 0..m {
            for c in 0..n {
                dst[c * m + r] = src[r * n + c];
            }
        }
    }
    Tensor::from_vec([b, n, m], out)
}

/// Largest-singular-value estimate `u^T W v` with `W` flattened to `(rows, rest)`.
pub fn bilinear_sigma(weight: &Tensor, u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(weight.dim(0), u.len(), "u length must equal weight rows");
    assert_eq!(weight.numel() / weight.dim(0), v.len(), "v length must equal weight columns");
    weight
        .data()
        .chunks(v.len())
        .zip(u)
        .map(|(row, &ur)| ur * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.graph.nodes.borrow()[self.id].value.dim(axis)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    fn same_graph(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "variables from different graphs"
        );
    }

    fn derive(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'g> {
        let needs = parents.iter().any(|&p| self.graph.needs(p));
        self.graph.push(value, op, needs)
    }

    /// 2-D convolution with a square kernel and symmetric zero padding.
    /// `self` is `(N, C, H, W)`, `weight` is `(O, C, k, k)`, `bias` is `(O)`.
    pub fn conv2d(&self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, padding: usize) -> Var<'g> {
        self.same_graph(&weight);
        let x = self.value();
        let w = weight.value();
        let (batch, c, h, wd) = dims4(&x);
        assert_eq!(w.ndim(), 4, "conv weight must be (O, C, k, k), got {:?}", w.shape());
        assert_eq!(w.dim(1), c, "conv expects {} input channels, got {c}", w.dim(1));
        assert_eq!(w.dim(2), w.dim(3), "conv kernel must be square");
        assert!(stride >= 1, "conv stride must be positive");
        let geometry = ConvGeometry {
            in_channels: c,
            height: h,
            width: wd,
            kernel: w.dim(2),
            stride,
            padding,
        };
        assert!(
            h + 2 * padding >= geometry.kernel && wd + 2 * padding >= geometry.kernel,
            "conv kernel larger than padded input"
        );
        let out_channels = w.dim(0);
        let bias_val = bias.map(|b| {
            self.same_graph(&b);
            let bv = b.value();
            assert_eq!(bv.shape(), &[out_channels], "conv bias shape mismatch");
            bv
        });
        let out = kernels::conv2d_forward(
            x.data(),
            batch,
            &geometry,
            w.data(),
            out_channels,
            bias_val.as_deref().map(Tensor::data),
        );
        let shape = [batch, out_channels, geometry.out_height(), geometry.out_width()];
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        self.derive(
            Tensor::from_vec(shape, out),
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                geometry,
            },
            &parents,
        )
    }

    /// Spatial 2x upsampling of an `(N, C, H, W)` map.
    pub fn upsample2x(&self, mode: UpsampleMode) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x);
        let out = match mode {
            UpsampleMode::Nearest => kernels::upsample_nearest(x.data(), n * c, h, w),
            UpsampleMode::Bilinear => kernels::upsample_bilinear(x.data(), n * c, h, w),
        };
        self.derive(
            Tensor::from_vec([n, c, 2 * h, 2 * w], out),
            Op::Upsample {
                input: self.id,
                mode,
            },
            &[self.id],
        )
    }

    /// Concatenation along axis 1 of tensors that agree on every other axis.
    pub fn concat(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0];
        let values: Vec<Rc<Tensor>> = parts
            .iter()
            .map(|p| {
                first.same_graph(p);
                p.value()
            })
            .collect();
        let batch = values[0].dim(0);
        let tail = values[0].shape()[2..].to_vec();
        let rest: usize = tail.iter().product();
        for v in &values {
            assert_eq!(v.dim(0), batch, "concat batch mismatch");
            assert_eq!(
                &v.shape()[2..],
                tail.as_slice(),
                "concat requires equal trailing dims: {:?} vs {:?}",
                v.shape(),
                values[0].shape()
            );
        }
        let total_c: usize = values.iter().map(|v| v.dim(1)).sum();
        let mut out = Vec::with_capacity(batch * total_c * rest);
        for n in 0..batch {
            for v in &values {
                let c = v.dim(1);
                out.extend_from_slice(&v.data()[n * c * rest..(n + 1) * c * rest]);
            }
        }
        let mut shape = vec![batch, total_c];
        shape.extend(tail);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first.derive(
            Tensor::from_vec(shape, out),
            Op::Concat { inputs: ids.clone() },
            &ids,
        )
    }

    /// Channels `start..start + len` along axis 1.
    pub fn slice_channels(&self, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let batch = x.dim(0);
        let total_c = x.dim(1);
        assert!(start + len <= total_c, "channel slice out of range");
        let rest: usize = x.shape()[2..].iter().product();
        let mut out = Vec::with_capacity(batch * len * rest);
        for n in 0..batch {
            let base = (n * total_c + start) * rest;
            out.extend_from_slice(&x.data()[base..base + len * rest]);
        }
        let mut shape = x.shape().to_vec();
        shape[1] = len;
        self.derive(
            Tensor::from_vec(shape, out),
            Op::SliceChannels {
                input: self.id,
                start,
            },
            &[self.id],
        )
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<'g> {
        let value = (*self.value()).clone().reshape(shape);
        self.derive(value, Op::Reshape { input: self.id }, &[self.id])
    }

    /// Swaps the last two axes of a `(B, M, N)` tensor.
    pub fn transpose_last2(&self) -> Var<'g> {
        let value = transpose_last2(&self.value());
        self.derive(value, Op::TransposeLast2 { input: self.id }, &[self.id])
    }

    /// `(B, M, K) x (B, K, N) -> (B, M, N)`.
    pub fn batch_matmul(&self, rhs: Var<'g>) -> Var<'g> {
        self.same_graph(&rhs);
        let (a, b) = (self.value(), rhs.value());
        assert!(a.ndim() == 3 && b.ndim() == 3, "batch_matmul expects 3-D operands");
        let (batch, m, k) = (a.dim(0), a.dim(1), a.dim(2));
        assert_eq!(b.dim(0), batch, "batch_matmul batch mismatch");
        assert_eq!(b.dim(1), k, "batch_matmul inner dim mismatch");
        let n = b.dim(2);
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            crate::gemm::gemm(
                m,
                k,
                n,
                1.0,
                &a.data()[i * m * k..],
                false,
                &b.data()[i * k * n..],
                false,
                0.0,
                &mut out[i * m * n..],
            );
        }
        self.derive(
            Tensor::from_vec([batch, m, n], out),
            Op::BatchMatMul {
                a: self.id,
                b: rhs.id,
            },
            &[self.id, rhs.id],
        )
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Var<'g> {
        let x = self.value();
        let cols = *x.shape().last().expect("softmax of a scalar");
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.derive(
            Tensor::from_vec(x.shape(), out),
            Op::Softmax { input: self.id },
            &[self.id],
        )
    }

    fn unary(&self, kind: Unary, f: impl Fn(f64) -> f64) -> Var<'g> {
        let value = self.value().map(f);
        self.derive(value, Op::Unary { input: self.id, kind }, &[self.id])
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(Unary::Relu, |x| if x < 0.0 { 0.0 } else { x })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g> {
        self.unary(Unary::LeakyRelu(slope), move |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(Unary::Tanh, f64::tanh)
    }

    /// Logistic function kept inside the open interval `(0, 1)`, so finite
    /// logits never saturate to exactly 0 or 1.
    pub fn sigmoid(&self) -> Var<'g> {
        const HI: f64 = 1.0 - f64::EPSILON / 2.0;
        self.unary(Unary::Sigmoid, |x| {
            let p = if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            };
            p.clamp(f64::MIN_POSITIVE, HI)
        })
    }

    pub fn abs(&self) -> Var<'g> {
        self.unary(Unary::Abs, f64::abs)
    }

    /// `ln(clamp(x, eps, 1 - eps))`; the gradient is zero where clamping is active.
    pub fn clamped_log(&self, eps: f64) -> Var<'g> {
        self.unary(Unary::ClampedLog(eps), move |x| x.clamp(eps, 1.0 - eps).ln())
    }

    fn binary(&self, rhs: Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'g> {
        self.same_graph(&rhs);
        let value = self.value().zip_map(&rhs.value(), f);
        self.derive(value, op, &[self.id, rhs.id])
    }

    pub fn add(&self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, Op::Add { a: self.id, b: rhs.id }, |a, b| a + b)
    }

    pub fn sub(&self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, Op::Sub { a: self.id, b: rhs.id }, |a, b| a - b)
    }

    pub fn mul(&self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, Op::Mul { a: self.id, b: rhs.id }, |a, b| a * b)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&self, scale: f64, shift: f64) -> Var<'g> {
        let value = self.value().map(|x| scale * x + shift);
        self.derive(value, Op::Affine { input: self.id, scale }, &[self.id])
    }

    pub fn scale(&self, factor: f64) -> Var<'g> {
        self.affine(factor, 0.0)
    }

    pub fn sum(&self) -> Var<'g> {
        let value = Tensor::scalar(self.value().sum());
        self.derive(value, Op::Sum { input: self.id }, &[self.id])
    }

    pub fn mean(&self) -> Var<'g> {
        self.mean_from_axis(0)
    }

    /// Mean over axes `axis..`, keeping the leading `axis` axes.
    pub fn mean_from_axis(&self, axis: usize) -> Var<'g> {
        let x = self.value();
        assert!(axis <= x.ndim(), "mean axis out of range");
        let inner: usize = x.shape()[axis..].iter().product();
        let out: Vec<f64> = x
            .data()
            .chunks(inner.max(1))
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        self.derive(
            Tensor::from_vec(x.shape()[..axis].to_vec(), out),
            Op::MeanTrailing {
                input: self.id,
                axis,
            },
            &[self.id],
        )
    }

    /// `W / (u^T W v)` with `W` viewed as `(rows, rest)`. The singular-vector
    /// estimates `u`, `v` are treated as constants. When the estimate falls
    /// below [`SIGMA_FLOOR`] the weight passes through unchanged.
    pub fn spectral_normalize(&self, u: &[f64], v: &[f64]) -> Var<'g> {
        let w = self.value();
        let sigma = bilinear_sigma(&w, u, v);
        let (value, sigma) = if sigma.abs() < SIGMA_FLOOR || !sigma.is_finite() {
            log::warn!("spectral norm estimate {sigma:e} below floor; weight left unnormalized");
            ((*w).clone(), None)
        } else {
            (w.scale(1.0 / sigma), Some(sigma))
        };
        self.derive(
            value,
            Op::SpectralNorm {
                weight: self.id,
                u: Rc::from(u),
                v: Rc::from(v),
                sigma,
            },
            &[self.id],
        )
    }
}
