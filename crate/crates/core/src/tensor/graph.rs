use crate::error::{Error, Result};

use super::conv::{ConvGeom, ConvOpts};
use super::{Real, Tensor};

const LEAKY_SLOPE: f64 = 0.2;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    /// Leaky ReLU with negative slope 0.2.
    LeakyRelu,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::LeakyRelu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::LeakyRelu => "leaky_relu",
        }
    }

    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(LEAKY_SLOPE)
                }
            }
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::LeakyRelu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(LEAKY_SLOPE)
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    GlobalAvgPool {
        input: Var,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    SpatialGate {
        features: Var,
        mask: Var,
    },
    ChannelGate {
        features: Var,
        weights: Var,
    },
    Reshape {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    BceLogits {
        logits: Var,
        target: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Recorded computation. Nodes are appended in evaluation order, so the
/// node list is already a topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// 2-D cross-correlation of `[B,Cin,H,W]` with `[Cout,Cin,Kh,Kw]` plus bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, opts: ConvOpts) -> Result<Var> {
        let (b, cin, h, w) = self.value(input).dims4("conv2d")?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4("conv2d")?;
        if wcin != cin {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "in_channels",
                expected: wcin,
                got: cin,
            });
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "bias",
                expected: cout,
                got: self.value(bias).numel(),
            });
        }
        let ho = opts.output_extent(h, kh, "height")?;
        let wo = opts.output_extent(w, kw, "width")?;
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            opts,
        };
        let k = geom.col_rows();
        let n = geom.col_cols();
        let keep_cols = self.nodes[weight.0].requires_grad;

        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let bs = self.value(bias).data();
        let mut out = vec![T::zero(); b * cout * n];
        let mut cols = vec![T::zero(); if keep_cols { b * k * n } else { k * n }];
        for bi in 0..b {
            let col = if keep_cols {
                &mut cols[bi * k * n..(bi + 1) * k * n]
            } else {
                &mut cols[..]
            };
            geom.im2col(&x[bi * cin * h * w..(bi + 1) * cin * h * w], col);
            let dst = &mut out[bi * cout * n..(bi + 1) * cout * n];
            for (co, row) in dst.chunks_mut(n).enumerate() {
                row.fill(bs[co]);
            }
            T::gemm(
                cout,
                k,
                n,
                T::one(),
                wt,
                k as isize,
                1,
                col,
                n as isize,
                1,
                T::one(),
                dst,
                n as isize,
                1,
            );
        }
        if !keep_cols {
            cols = Vec::new();
        }
        let value = Tensor::new(vec![b, cout, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            &[input, weight, bias],
        ))
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4("max_pool2d")?;
        if h % 2 != 0 {
            return Err(Error::OddPoolExtent {
                axis: "height",
                extent: h,
            });
        }
        if w % 2 != 0 {
            return Err(Error::OddPoolExtent {
                axis: "width",
                extent: w,
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![b, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, &[input]))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::shape("upsample_nearest", "factor must be at least 1"));
        }
        let (b, c, h, w) = self.value(input).dims4("upsample_nearest")?;
        let (ho, wo) = (h * factor, w * factor);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); b * c * ho * wo];
        for plane in 0..b * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for oy in 0..ho {
                let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
                for (ox, d) in dst[oy * wo..(oy + 1) * wo].iter_mut().enumerate() {
                    *d = row[ox / factor];
                }
            }
        }
        let value = Tensor::new(vec![b, c, ho, wo], out)?;
        Ok(self.push(value, Op::Upsample { input, factor }, &[input]))
    }

    /// Affine map `[B,Fin] x [Fout,Fin]^T + bias`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (b, fin) = self.value(input).dims2("dense")?;
        let (fout, wfin) = self.value(weight).dims2("dense")?;
        if wfin != fin {
            return Err(Error::Dimension {
                op: "dense",
                axis: "in_features",
                expected: wfin,
                got: fin,
            });
        }
        if self.value(bias).shape() != [fout] {
            return Err(Error::Dimension {
                op: "dense",
                axis: "bias",
                expected: fout,
                got: self.value(bias).numel(),
            });
        }
        let bs = self.value(bias).data();
        let mut out: Vec<T> = (0..b).flat_map(|_| bs.iter().copied()).collect();
        T::gemm(
            b,
            fin,
            fout,
            T::one(),
            self.value(input).data(),
            fin as isize,
            1,
            self.value(weight).data(),
            1,
            fin as isize,
            T::one(),
            &mut out,
            fout as isize,
            1,
        );
        let value = Tensor::new(vec![b, fout], out)?;
        Ok(self.push(value, Op::Dense { input, weight, bias }, &[input, weight, bias]))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let x = self.value(input);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| kind.apply(v)).collect(),
        };
        self.push(value, Op::Act { input, kind }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    /// Per-channel spatial mean, `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4("global_avg_pool")?;
        if h * w == 0 {
            return Err(Error::shape("global_avg_pool", "empty spatial extent"));
        }
        let hw = h * w;
        let scale = T::one() / T::lit(hw as f64);
        let data = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * scale)
            .collect();
        let value = Tensor::new(vec![b, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool { input }, &[input]))
    }

    /// Mean over all elements of `(pred - target)^2`. The target receives no gradient.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        if p.shape() != t.shape() {
            return Err(Error::shape(
                "mse_loss",
                format!("pred {:?} vs target {:?}", p.shape(), t.shape()),
            ));
        }
        let n = T::lit(p.numel().max(1) as f64);
        let sse: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let value = Tensor::scalar(sse / n);
        Ok(self.push(value, Op::Mse { pred, target }, &[pred]))
    }

    /// `features[B,C,H,W] * mask[B,1,H,W]`, the mask broadcast over channels.
    pub fn spatial_gate(&mut self, features: Var, mask: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(features).dims4("spatial_gate")?;
        let (mb, mc, mh, mw) = self.value(mask).dims4("spatial_gate")?;
        if mc != 1 {
            return Err(Error::Dimension {
                op: "spatial_gate",
                axis: "mask_channels",
                expected: 1,
                got: mc,
            });
        }
        if (mb, mh, mw) != (b, h, w) {
            return Err(Error::shape(
                "spatial_gate",
                format!("mask {:?} does not cover features {:?}", [mb, mc, mh, mw], [b, c, h, w]),
            ));
        }
        let hw = h * w;
        let f = self.value(features).data();
        let m = self.value(mask).data();
        let mut out = Vec::with_capacity(f.len());
        for bi in 0..b {
            let mrow = &m[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                let frow = &f[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                out.extend(frow.iter().zip(mrow).map(|(&a, &s)| a * s));
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(value, Op::SpatialGate { features, mask }, &[features, mask]))
    }

    /// `features[B,C,H,W] * weights[B,C]`, one scale per channel.
    pub fn channel_gate(&mut self, features: Var, weights: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(features).dims4("channel_gate")?;
        if self.value(weights).shape() != [b, c] {
            return Err(Error::shape(
                "channel_gate",
                format!(
                    "weights {:?} do not match [B,C] = {:?}",
                    self.value(weights).shape(),
                    [b, c]
                ),
            ));
        }
        let hw = h * w;
        let f = self.value(features).data();
        let s = self.value(weights).data();
        let out = f
            .chunks(hw)
            .zip(s)
            .flat_map(|(plane, &k)| plane.iter().map(move |&v| v * k))
            .collect();
        let value = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(value, Op::ChannelGate { features, weights }, &[features, weights]))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(&p, &q)| p + q).collect(),
        };
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::Sum { input }, &[input])
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = self.value(input);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| v * factor).collect(),
        };
        self.push(value, Op::Scale { input, factor }, &[input])
    }

    /// Mean logistic loss of `logits` against a constant label in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, target: T) -> Var {
        let x = self.value(logits);
        let n = T::lit(x.numel().max(1) as f64);
        let total: T = x
            .data()
            .iter()
            .map(|&v| v.max(T::zero()) - v * target + (T::one() + (-v.abs()).exp()).ln())
            .sum();
        let value = Tensor::scalar(total / n);
        self.push(value, Op::BceLogits { logits, target }, &[logits])
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients are added to any
    /// previously accumulated ones; call [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: lower,
            };
            propagate(&self.nodes[i], g, &mut sink);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            if !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &d)| *a += d),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Real> GradSink<'_, T> {
    fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient buffer of `v`, or `None` when `v` does not take gradients.
    fn buf(&mut self, v: Var) -> Option<&mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

fn propagate<T: Real>(node: &Node<T>, g: &[T], sink: &mut GradSink<'_, T>) {
    let nodes = sink.nodes;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => {
            let (b, cout, _, _) = node.value.dims4("conv2d").expect("rank checked in forward");
            let k = geom.col_rows();
            let n = geom.col_cols();
            if let Some(db) = sink.buf(*bias) {
                for (i, plane) in g.chunks(n).enumerate() {
                    db[i % cout] += plane.iter().copied().sum::<T>();
                }
            }
            if let Some(dw) = sink.buf(*weight) {
                for bi in 0..b {
                    T::gemm(
                        cout,
                        n,
                        k,
                        T::one(),
                        &g[bi * cout * n..(bi + 1) * cout * n],
                        n as isize,
                        1,
                        &cols[bi * k * n..(bi + 1) * k * n],
                        1,
                        n as isize,
                        T::one(),
                        dw,
                        k as isize,
                        1,
                    );
                }
            }
            if sink.nodes[input.0].requires_grad {
                let wt = nodes[weight.0].value.data();
                let plane = geom.cin * geom.h * geom.w;
                let mut dcol = vec![T::zero(); k * n];
                let dx = sink.buf(*input).expect("requires_grad checked");
                for bi in 0..b {
                    T::gemm(
                        k,
                        cout,
                        n,
                        T::one(),
                        &wt,
                        1,
                        k as isize,
                        &g[bi * cout * n..(bi + 1) * cout * n],
                        n as isize,
                        1,
                        T::zero(),
                        &mut dcol,
                        n as isize,
                        1,
                    );
                    geom.col2im(&dcol, &mut dx[bi * plane..(bi + 1) * plane]);
                }
            }
        }
        Op::MaxPool2d { input, argmax } => {
            if let Some(dx) = sink.buf(*input) {
                for (&src, &d) in argmax.iter().zip(g) {
                    dx[src] += d;
                }
            }
        }
        Op::Upsample { input, factor } => {
            let (_, _, ho, wo) = node.value.dims4("upsample").expect("rank checked");
            let (h, w) = (ho / factor, wo / factor);
            if let Some(dx) = sink.buf(*input) {
                for (plane, gp) in g.chunks(ho * wo).enumerate() {
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for oy in 0..ho {
                        let row = &mut dst[(oy / factor) * w..(oy / factor + 1) * w];
                        for (ox, &d) in gp[oy * wo..(oy + 1) * wo].iter().enumerate() {
                            row[ox / factor] += d;
                        }
                    }
                }
            }
        }
        Op::Dense {
            input,
            weight,
            bias,
        } => {
            let (b, fin) = sink.value(*input).dims2("dense").expect("rank checked");
            let fout = node.value.shape()[1];
            if let Some(db) = sink.buf(*bias) {
                for row in g.chunks(fout) {
                    db.iter_mut().zip(row).for_each(|(a, &d)| *a += d);
                }
            }
            if sink.nodes[weight.0].requires_grad {
                let x = nodes[input.0].value.data();
                let dw = sink.buf(*weight).expect("requires_grad checked");
                T::gemm(
                    fout,
                    b,
                    fin,
                    T::one(),
                    g,
                    1,
                    fout as isize,
                    &x,
                    fin as isize,
                    1,
                    T::one(),
                    dw,
                    fin as isize,
                    1,
                );
            }
            if sink.nodes[input.0].requires_grad {
                let wt = nodes[weight.0].value.data();
                let dx = sink.buf(*input).expect("requires_grad checked");
                T::gemm(
                    b,
                    fout,
                    fin,
                    T::one(),
                    g,
                    fout as isize,
                    1,
                    &wt,
                    fin as isize,
                    1,
                    T::one(),
                    dx,
                    fin as isize,
                    1,
                );
            }
        }
        Op::Act { input, kind } => {
            let kind = *kind;
            if sink.nodes[input.0].requires_grad {
                let x = nodes[input.0].value.data();
                let y = node.value.data();
                let dx = sink.buf(*input).expect("requires_grad checked");
                for i in 0..dx.len() {
                    dx[i] += g[i] * kind.derivative(x[i], y[i]);
                }
            }
        }
        Op::GlobalAvgPool { input } => {
            let (_, _, h, w) = sink.value(*input).dims4("gap").expect("rank checked");
            let scale = T::one() / T::lit((h * w) as f64);
            if let Some(dx) = sink.buf(*input) {
                for (plane, &d) in dx.chunks_mut(h * w).zip(g) {
                    let share = d * scale;
                    plane.iter_mut().for_each(|a| *a += share);
                }
            }
        }
        Op::Mse { pred, target } => {
            let t = nodes[target.0].value.data();
            let p = nodes[pred.0].value.data();
            let coef = g[0] * T::lit(2.0) / T::lit(p.len().max(1) as f64);
            if let Some(dp) = sink.buf(*pred) {
                for i in 0..dp.len() {
                    dp[i] += coef * (p[i] - t[i]);
                }
            }
        }
        Op::SpatialGate { features, mask } => {
            let (b, c, h, w) = node.value.dims4("spatial_gate").expect("rank checked");
            let hw = h * w;
            if sink.nodes[features.0].requires_grad {
                let m = nodes[mask.0].value.data();
                let df = sink.buf(*features).expect("requires_grad checked");
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for j in 0..hw {
                            df[off + j] += g[off + j] * m[bi * hw + j];
                        }
                    }
                }
            }
            if sink.nodes[mask.0].requires_grad {
                let f = nodes[features.0].value.data();
                let dm = sink.buf(*mask).expect("requires_grad checked");
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for j in 0..hw {
                            dm[bi * hw + j] += g[off + j] * f[off + j];
                        }
                    }
                }
            }
        }
        Op::ChannelGate { features, weights } => {
            let (_, _, h, w) = node.value.dims4("channel_gate").expect("rank checked");
            let hw = h * w;
            if sink.nodes[features.0].requires_grad {
                let s = nodes[weights.0].value.data();
                let df = sink.buf(*features).expect("requires_grad checked");
                for (plane, (dp, &k)) in df.chunks_mut(hw).zip(s).enumerate() {
                    for (j, a) in dp.iter_mut().enumerate() {
                        *a += g[plane * hw + j] * k;
                    }
                }
            }
            if sink.nodes[weights.0].requires_grad {
                let f = nodes[features.0].value.data();
                let ds = sink.buf(*weights).expect("requires_grad checked");
                for (plane, a) in ds.iter_mut().enumerate() {
                    let range = plane * hw..(plane + 1) * hw;
                    *a += g[range.clone()]
                        .iter()
                        .zip(&f[range])
                        .map(|(&d, &v)| d * v)
                        .sum::<T>();
                }
            }
        }
        Op::Reshape { input } => {
            if let Some(dx) = sink.buf(*input) {
                dx.iter_mut().zip(g).for_each(|(a, &d)| *a += d);
            }
        }
        Op::Add { a, b } => {
            for v in [*a, *b] {
                if let Some(dx) = sink.buf(v) {
                    dx.iter_mut().zip(g).for_each(|(acc, &d)| *acc += d);
                }
            }
        }
        Op::Sum { input } => {
            if let Some(dx) = sink.buf(*input) {
                dx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::Scale { input, factor } => {
            let factor = *factor;
            if let Some(dx) = sink.buf(*input) {
                dx.iter_mut().zip(g).for_each(|(a, &d)| *a += d * factor);
            }
        }
        Op::BceLogits { logits, target } => {
            let target = *target;
            let x = nodes[logits.0].value.data();
            let coef = g[0] / T::lit(x.len().max(1) as f64);
            if let Some(dx) = sink.buf(*logits) {
                for (a, &v) in dx.iter_mut().zip(x) {
                    *a += coef * (sigmoid(v) - target);
                }
            }
        }
    }
}
