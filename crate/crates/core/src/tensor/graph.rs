use std::cell::RefCell;
use std::collections::HashMap;

use super::kernels::{self, Padding};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        pad: Padding,
    },
    Downsample2(usize),
    Upsample2(usize),
    PixelUnshuffle(usize, usize),
    PixelShuffle(usize, usize),
    ChannelMean(usize),
    ChannelVar(usize),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>),
    Silu(usize),
    Normalize {
        x: usize,
        groups: usize,
        inv_std: Vec<f64>,
    },
    MulChannels(usize, usize),
    AddChannels(usize, usize),
    Mse(usize, usize),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of tensor operations.
///
/// Leaves are created with [`Graph::param`] (tracked) or [`Graph::constant`];
/// every op on a [`Var`] appends a node. [`Graph::backward`] accumulates
/// `∂loss/∂leaf` into each tracked leaf until [`Graph::zero_grad`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<HashMap<usize, Tensor>>,
}

/// Handle to a node of a [`Graph`].
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

    /// A tracked leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize], name: &'static str) -> Result<Var<'_>> {
        let value = value.ensure_finite(name)?;
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Accumulated gradient of a tracked leaf, if backward reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.leaf_grads.borrow().get(&var.id).cloned()
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Concatenate along axis 1; every other extent must agree.
    pub fn concat_channels<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or(Error::EmptyReduction { op: "concat_channels" })?;
        let base = first.shape();
        if base.len() < 2 {
            return Err(Error::InvalidShape {
                op: "concat_channels",
                msg: format!("need a channel axis, got {base:?}"),
            });
        }
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let mut channels = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            channels += s[1];
        }
        let n = base[0];
        let inner: usize = base[2..].iter().product();
        let mut data = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for v in &values {
                let chunk = v.shape()[1] * inner;
                data.extend_from_slice(&v.data()[b * chunk..(b + 1) * chunk]);
            }
        }
        let mut shape = base.clone();
        shape[1] = channels;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push(Tensor::from_parts(shape, data), Op::Concat(ids.clone()), &ids, "concat_channels")
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match leaf_grads.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        leaf_grads.insert(id, g);
                    }
                }
                continue;
            }
            for (input, gi) in local_grads(node, &g, &nodes) {
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }
}

fn dims4(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::InvalidShape {
            op,
            msg: format!("expected N×C×H×W, got {:?}", t.shape()),
        }),
    }
}

/// `(N, C, inner)` view for channel-wise ops on rank ≥ 3 tensors.
fn channel_view(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 3 {
        return Err(Error::EmptyReduction { op });
    }
    Ok((s[0], s[1], s[2..].iter().product()))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// Fallible elementwise ops; the operator traits cannot return `Result`.
#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn binary(self, other: Var<'g>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, name, f)?;
        self.graph.push(out, op, &[self.id, other.id], name)
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, s: f64) -> Result<Var<'g>> {
        let out = self.value().scale(s);
        self.graph.push(out, Op::Scale(self.id, s), &[self.id], "scale")
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'g>> {
        let out = self.value().map(|v| v + s);
        self.graph.push(out, Op::AddScalar(self.id), &[self.id], "add_scalar")
    }

    /// `[m,k] × [k,n]`.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = match (a.shape(), b.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                })
            }
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, 1.0, a.data(), false, b.data(), false, 0.0, &mut out);
        let op = Op::Matmul(self.id, other.id);
        self.graph.push(Tensor::from_parts(vec![m, n], out), op, &[self.id, other.id], "matmul")
    }

    /// `x Wᵀ + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(self, w: Var<'g>, b: Option<Var<'g>>) -> Result<Var<'g>> {
        let (x, wt) = (self.value(), w.value());
        let (n, fin, fout) = match (x.shape(), wt.shape()) {
            ([n, i], [o, i2]) if i == i2 => (*n, *i, *o),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    lhs: x.shape().to_vec(),
                    rhs: wt.shape().to_vec(),
                })
            }
        };
        let mut out = vec![0.0; n * fout];
        kernels::gemm(n, fin, fout, 1.0, x.data(), false, wt.data(), true, 0.0, &mut out);
        let mut inputs = vec![self.id, w.id];
        if let Some(b) = b {
            let bv = b.value();
            if bv.shape() != [fout] {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    lhs: vec![fout],
                    rhs: bv.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(fout) {
                for (o, bias) in row.iter_mut().zip(bv.data()) {
                    *o += bias;
                }
            }
            inputs.push(b.id);
        }
        let op = Op::Linear {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
        };
        self.graph.push(Tensor::from_parts(vec![n, fout], out), op, &inputs, "linear")
    }

    /// Same-size 2-D convolution. `w` is `[C_out, C_in, k, k]` with odd `k`.
    pub fn conv2d(self, w: Var<'g>, b: Option<Var<'g>>, pad: Padding) -> Result<Var<'g>> {
        let (x, wt) = (self.value(), w.value());
        let (n, cin, h, wd) = dims4(&x, "conv2d")?;
        let (cout, k) = match *wt.shape() {
            [co, ci, k1, k2] if ci == cin && k1 == k2 && k1 % 2 == 1 => (co, k1),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: x.shape().to_vec(),
                    rhs: wt.shape().to_vec(),
                })
            }
        };
        let hw = h * wd;
        let kk = cin * k * k;
        let bias = match b {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [cout] {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d",
                        lhs: vec![cout],
                        rhs: bv.shape().to_vec(),
                    });
                }
                Some(bv)
            }
            None => None,
        };
        let mut out = vec![0.0; n * cout * hw];
        for s in 0..n {
            let xs = &x.data()[s * cin * hw..(s + 1) * cin * hw];
            let os = &mut out[s * cout * hw..(s + 1) * cout * hw];
            if k == 1 {
                kernels::gemm(cout, kk, hw, 1.0, wt.data(), false, xs, false, 0.0, os);
            } else {
                let cols = kernels::im2col(xs, cin, h, wd, k, pad);
                kernels::gemm(cout, kk, hw, 1.0, wt.data(), false, &cols, false, 0.0, os);
            }
            if let Some(bv) = &bias {
                for (plane, bias) in os.chunks_mut(hw).zip(bv.data()) {
                    plane.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let mut inputs = vec![self.id, w.id];
        inputs.extend(b.map(|b| b.id));
        let op = Op::Conv2d {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
            pad,
        };
        self.graph.push(Tensor::from_parts(vec![n, cout, h, wd], out), op, &inputs, "conv2d")
    }

    /// 2×2 average pooling.
    pub fn downsample2x(self) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x, "downsample2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "downsample2x",
                msg: format!("odd spatial extent {h}×{w}"),
            });
        }
        let out = kernels::avg_pool2(x.data(), n * c, h, w);
        let t = Tensor::from_parts(vec![n, c, h / 2, w / 2], out);
        self.graph.push(t, Op::Downsample2(self.id), &[self.id], "downsample2x")
    }

    pub fn upsample2x_nearest(self) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x, "upsample2x_nearest")?;
        let out = kernels::upsample2(x.data(), n * c, h, w);
        let t = Tensor::from_parts(vec![n, c, 2 * h, 2 * w], out);
        self.graph.push(t, Op::Upsample2(self.id), &[self.id], "upsample2x_nearest")
    }

    /// Space-to-depth by `factor`: `[N,C,H,W] → [N, C·f², H/f, W/f]`.
    pub fn pixel_unshuffle(self, factor: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x, "pixel_unshuffle")?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::InvalidShape {
                op: "pixel_unshuffle",
                msg: format!("{h}×{w} not divisible by {factor}"),
            });
        }
        let map = kernels::unshuffle_index(c, h, w, factor);
        let per = c * h * w;
        let mut out = vec![0.0; n * per];
        for s in 0..n {
            let src = &x.data()[s * per..(s + 1) * per];
            for (o, &i) in out[s * per..(s + 1) * per].iter_mut().zip(&map) {
                *o = src[i];
            }
        }
        let t = Tensor::from_parts(vec![n, c * factor * factor, h / factor, w / factor], out);
        self.graph.push(t, Op::PixelUnshuffle(self.id, factor), &[self.id], "pixel_unshuffle")
    }

    /// Depth-to-space, the inverse of [`Var::pixel_unshuffle`].
    pub fn pixel_shuffle(self, factor: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x, "pixel_shuffle")?;
        if factor == 0 || c % (factor * factor) != 0 {
            return Err(Error::InvalidShape {
                op: "pixel_shuffle",
                msg: format!("{c} channels not divisible by {}", factor * factor),
            });
        }
        let co = c / (factor * factor);
        let map = kernels::unshuffle_index(co, h * factor, w * factor, factor);
        let per = c * h * w;
        let mut out = vec![0.0; n * per];
        for s in 0..n {
            let src = &x.data()[s * per..(s + 1) * per];
            let dst = &mut out[s * per..(s + 1) * per];
            for (j, &i) in map.iter().enumerate() {
                dst[i] = src[j];
            }
        }
        let t = Tensor::from_parts(vec![n, co, h * factor, w * factor], out);
        self.graph.push(t, Op::PixelShuffle(self.id, factor), &[self.id], "pixel_shuffle")
    }

    /// Per-sample, per-channel mean: `[N, C, ...] → [N, C]`.
    pub fn channel_mean(self) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, m) = channel_view(&x, "channel_mean")?;
        let out = x.data().chunks(m).map(|p| p.iter().sum::<f64>() / m as f64).collect();
        let t = Tensor::from_parts(vec![n, c], out);
        self.graph.push(t, Op::ChannelMean(self.id), &[self.id], "channel_mean")
    }

    /// Per-sample, per-channel population variance.
    pub fn channel_var(self) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, m) = channel_view(&x, "channel_var")?;
        let out = x
            .data()
            .chunks(m)
            .map(|p| {
                let mu = p.iter().sum::<f64>() / m as f64;
                p.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64
            })
            .collect();
        let t = Tensor::from_parts(vec![n, c], out);
        self.graph.push(t, Op::ChannelVar(self.id), &[self.id], "channel_var")
    }

    pub fn sum(self) -> Result<Var<'g>> {
        let t = Tensor::scalar(self.value().sum());
        self.graph.push(t, Op::Sum(self.id), &[self.id], "sum")
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let t = Tensor::scalar(self.value().mean());
        self.graph.push(t, Op::Mean(self.id), &[self.id], "mean")
    }

    pub fn silu(self) -> Result<Var<'g>> {
        let t = self.value().map(|v| v * sigmoid(v));
        self.graph.push(t, Op::Silu(self.id), &[self.id], "silu")
    }

    /// Group normalization without affine terms: each of `groups` contiguous
    /// channel groups of every sample gets zero mean and unit variance.
    pub fn normalize_channels(self, groups: usize, eps: f64) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, m) = channel_view(&x, "normalize_channels")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::InvalidShape {
                op: "normalize_channels",
                msg: format!("{c} channels not divisible into {groups} groups"),
            });
        }
        let size = c / groups * m;
        if size < 2 {
            return Err(Error::InvalidShape {
                op: "normalize_channels",
                msg: "each group needs at least two elements".into(),
            });
        }
        let mut out = x.to_vec();
        let mut inv_std = Vec::with_capacity(n * groups);
        for chunk in out.chunks_mut(size) {
            let mu = chunk.iter().sum::<f64>() / size as f64;
            let var = chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / size as f64;
            let r = 1.0 / (var + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mu) * r);
            inv_std.push(r);
        }
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        let op = Op::Normalize {
            x: self.id,
            groups,
            inv_std,
        };
        self.graph.push(t, op, &[self.id], "normalize_channels")
    }

    fn channel_broadcast(self, s: Var<'g>, name: &'static str, mul: bool) -> Result<Var<'g>> {
        let (x, sv) = (self.value(), s.value());
        let (n, c, m) = channel_view(&x, name)?;
        if sv.shape() != [n, c] {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: x.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let mut out = x.to_vec();
        for (plane, &f) in out.chunks_mut(m).zip(sv.data()) {
            if mul {
                plane.iter_mut().for_each(|v| *v *= f);
            } else {
                plane.iter_mut().for_each(|v| *v += f);
            }
        }
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        let op = if mul {
            Op::MulChannels(self.id, s.id)
        } else {
            Op::AddChannels(self.id, s.id)
        };
        self.graph.push(t, op, &[self.id, s.id], name)
    }

    /// Multiply each `[n, c]` plane by `s[n, c]`.
    pub fn mul_channels(self, s: Var<'g>) -> Result<Var<'g>> {
        self.channel_broadcast(s, "mul_channels", true)
    }

    /// Add `b[n, c]` to each `[n, c]` plane.
    pub fn add_channels(self, b: Var<'g>) -> Result<Var<'g>> {
        self.channel_broadcast(b, "add_channels", false)
    }

    /// Mean squared error against `target`.
    pub fn mse(self, target: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), target.value());
        a.check_same_shape(&b, "mse")?;
        let n = a.numel() as f64;
        let v = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        self.graph
            .push(Tensor::scalar(v), Op::Mse(self.id, target.id), &[self.id, target.id], "mse")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let t = self.value().reshape(shape)?;
        self.graph.push(t, Op::Reshape(self.id), &[self.id], "reshape")
    }
}

/// Vector-Jacobian products of one node, for inputs that need gradients.
fn local_grads(node: &Node, g: &Tensor, nodes: &[Node]) -> Vec<(usize, Tensor)> {
    let needs = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &nodes[i].value;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(*a) {
                out.push((*a, g.clone()));
            }
            if needs(*b) {
                out.push((*b, g.clone()));
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                out.push((*a, g.clone()));
            }
            if needs(*b) {
                out.push((*b, g.scale(-1.0)));
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                out.push((*a, zip(g, val(*b), |g, y| g * y)));
            }
            if needs(*b) {
                out.push((*b, zip(g, val(*a), |g, x| g * x)));
            }
        }
        Op::Scale(a, s) => out.push((*a, g.scale(*s))),
        Op::AddScalar(a) => out.push((*a, g.clone())),
        Op::Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if needs(*a) {
                let mut da = vec![0.0; m * k];
                kernels::gemm(m, n, k, 1.0, g.data(), false, bv.data(), true, 0.0, &mut da);
                out.push((*a, Tensor::from_parts(vec![m, k], da)));
            }
            if needs(*b) {
                let mut db = vec![0.0; k * n];
                kernels::gemm(k, m, n, 1.0, av.data(), true, g.data(), false, 0.0, &mut db);
                out.push((*b, Tensor::from_parts(vec![k, n], db)));
            }
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (n, fin) = (xv.shape()[0], xv.shape()[1]);
            let fout = wv.shape()[0];
            if needs(*x) {
                let mut dx = vec![0.0; n * fin];
                kernels::gemm(n, fout, fin, 1.0, g.data(), false, wv.data(), false, 0.0, &mut dx);
                out.push((*x, Tensor::from_parts(vec![n, fin], dx)));
            }
            if needs(*w) {
                let mut dw = vec![0.0; fout * fin];
                kernels::gemm(fout, n, fin, 1.0, g.data(), true, xv.data(), false, 0.0, &mut dw);
                out.push((*w, Tensor::from_parts(vec![fout, fin], dw)));
            }
            if let Some(b) = b {
                if needs(*b) {
                    let mut db = vec![0.0; fout];
                    for row in g.data().chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    out.push((*b, Tensor::from_parts(vec![fout], db)));
                }
            }
        }
        Op::Conv2d { x, w, b, pad } => {
            let (xv, wv) = (val(*x), val(*w));
            let (n, cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            let (cout, k) = (wv.shape()[0], wv.shape()[2]);
            let hw = h * wd;
            let kk = cin * k * k;
            let mut dw = needs(*w).then(|| vec![0.0; cout * kk]);
            let mut dx = needs(*x).then(|| vec![0.0; n * cin * hw]);
            for s in 0..n {
                let gs = &g.data()[s * cout * hw..(s + 1) * cout * hw];
                let xs = &xv.data()[s * cin * hw..(s + 1) * cin * hw];
                if let Some(dw) = dw.as_mut() {
                    if k == 1 {
                        kernels::gemm(cout, hw, kk, 1.0, gs, false, xs, true, 1.0, dw);
                    } else {
                        let cols = kernels::im2col(xs, cin, h, wd, k, *pad);
                        kernels::gemm(cout, hw, kk, 1.0, gs, false, &cols, true, 1.0, dw);
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let dxs = &mut dx[s * cin * hw..(s + 1) * cin * hw];
                    if k == 1 {
                        kernels::gemm(kk, cout, hw, 1.0, wv.data(), true, gs, false, 0.0, dxs);
                    } else {
                        let mut dcols = vec![0.0; kk * hw];
                        kernels::gemm(kk, cout, hw, 1.0, wv.data(), true, gs, false, 0.0, &mut dcols);
                        kernels::col2im(&dcols, dxs, cin, h, wd, k, *pad);
                    }
                }
            }
            if let Some(dx) = dx {
                out.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
            }
            if let Some(dw) = dw {
                out.push((*w, Tensor::from_parts(wv.shape().to_vec(), dw)));
            }
            if let Some(b) = b {
                if needs(*b) {
                    let mut db = vec![0.0; cout];
                    for (i, plane) in g.data().chunks(hw).enumerate() {
                        db[i % cout] += plane.iter().sum::<f64>();
                    }
                    out.push((*b, Tensor::from_parts(vec![cout], db)));
                }
            }
        }
        Op::Downsample2(x) => {
            let s = val(*x).shape();
            let dx = kernels::avg_pool2_backward(g.data(), s[0] * s[1], s[2], s[3]);
            out.push((*x, Tensor::from_parts(s.to_vec(), dx)));
        }
        Op::Upsample2(x) => {
            let s = val(*x).shape();
            let dx = kernels::upsample2_backward(g.data(), s[0] * s[1], s[2], s[3]);
            out.push((*x, Tensor::from_parts(s.to_vec(), dx)));
        }
        Op::PixelUnshuffle(x, f) => {
            let s = val(*x).shape();
            let map = kernels::unshuffle_index(s[1], s[2], s[3], *f);
            let per = map.len();
            let mut dx = vec![0.0; g.numel()];
            for b in 0..s[0] {
                let src = &g.data()[b * per..(b + 1) * per];
                let dst = &mut dx[b * per..(b + 1) * per];
                for (j, &i) in map.iter().enumerate() {
                    dst[i] = src[j];
                }
            }
            out.push((*x, Tensor::from_parts(s.to_vec(), dx)));
        }
        Op::PixelShuffle(x, f) => {
            let s = val(*x).shape();
            let co = s[1] / (f * f);
            let map = kernels::unshuffle_index(co, s[2] * f, s[3] * f, *f);
            let per = map.len();
            let mut dx = vec![0.0; g.numel()];
            for b in 0..s[0] {
                let src = &g.data()[b * per..(b + 1) * per];
                let dst = &mut dx[b * per..(b + 1) * per];
                for (o, &i) in dst.iter_mut().zip(&map) {
                    *o = src[i];
                }
            }
            out.push((*x, Tensor::from_parts(s.to_vec(), dx)));
        }
        Op::ChannelMean(x) => {
            let xv = val(*x);
            let m = xv.numel() / g.numel();
            let mut dx = Vec::with_capacity(xv.numel());
            for &gv in g.data() {
                dx.extend(std::iter::repeat_n(gv / m as f64, m));
            }
            out.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
        }
        Op::ChannelVar(x) => {
            let xv = val(*x);
            let m = xv.numel() / g.numel();
            let mut dx = Vec::with_capacity(xv.numel());
            for (plane, &gv) in xv.data().chunks(m).zip(g.data()) {
                let mu = plane.iter().sum::<f64>() / m as f64;
                let f = 2.0 * gv / m as f64;
                dx.extend(plane.iter().map(|v| f * (v - mu)));
            }
            out.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
        }
        Op::Sum(x) => {
            let gv = g.data()[0];
            out.push((*x, Tensor::full(val(*x).shape(), gv)));
        }
        Op::Mean(x) => {
            let xv = val(*x);
            let gv = g.data()[0] / xv.numel() as f64;
            out.push((*x, Tensor::full(xv.shape(), gv)));
        }
        Op::Concat(ids) => {
            let s = node.value.shape();
            let n = s[0];
            let inner: usize = s[2..].iter().product();
            let total = s[1] * inner;
            let mut offset = 0;
            for &i in ids {
                let si = val(i).shape();
                let chunk = si[1] * inner;
                if needs(i) {
                    let mut d = Vec::with_capacity(n * chunk);
                    for b in 0..n {
                        let start = b * total + offset;
                        d.extend_from_slice(&g.data()[start..start + chunk]);
                    }
                    out.push((i, Tensor::from_parts(si.to_vec(), d)));
                }
                offset += chunk;
            }
        }
        Op::Silu(x) => {
            out.push((
                *x,
                zip(g, val(*x), |g, v| {
                    let s = sigmoid(v);
                    g * s * (1.0 + v * (1.0 - s))
                }),
            ));
        }
        Op::Normalize { x, groups, inv_std } => {
            let y = &node.value;
            let size = y.numel() / inv_std.len();
            debug_assert_eq!(size * inv_std.len(), y.numel());
            let _ = groups;
            let mut dx = Vec::with_capacity(y.numel());
            for ((yc, gc), &r) in y.data().chunks(size).zip(g.data().chunks(size)).zip(inv_std) {
                let mg = gc.iter().sum::<f64>() / size as f64;
                let mgy = gc.iter().zip(yc).map(|(a, b)| a * b).sum::<f64>() / size as f64;
                dx.extend(gc.iter().zip(yc).map(|(gv, yv)| r * (gv - mg - yv * mgy)));
            }
            out.push((*x, Tensor::from_parts(y.shape().to_vec(), dx)));
        }
        Op::MulChannels(x, s) => {
            let (xv, sv) = (val(*x), val(*s));
            let m = xv.numel() / sv.numel();
            if needs(*x) {
                let mut dx = g.to_vec();
                for (plane, &f) in dx.chunks_mut(m).zip(sv.data()) {
                    plane.iter_mut().for_each(|v| *v *= f);
                }
                out.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
            }
            if needs(*s) {
                let ds = g
                    .data()
                    .chunks(m)
                    .zip(xv.data().chunks(m))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                    .collect();
                out.push((*s, Tensor::from_parts(sv.shape().to_vec(), ds)));
            }
        }
        Op::AddChannels(x, b) => {
            let bv = val(*b);
            let m = g.numel() / bv.numel();
            if needs(*x) {
                out.push((*x, g.clone()));
            }
            if needs(*b) {
                let db = g.data().chunks(m).map(|p| p.iter().sum()).collect();
                out.push((*b, Tensor::from_parts(bv.shape().to_vec(), db)));
            }
        }
        Op::Mse(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let f = 2.0 * g.data()[0] / av.numel() as f64;
            let da = zip(av, bv, |x, y| f * (x - y));
            if needs(*b) {
                out.push((*b, da.scale(-1.0)));
            }
            if needs(*a) {
                out.push((*a, da));
            }
        }
        Op::Reshape(x) => {
            out.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), g.to_vec())));
        }
    }
    out
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}
