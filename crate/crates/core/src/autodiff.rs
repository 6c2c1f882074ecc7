//! Eager tape for reverse-mode differentiation.
//!
//! Every operation computes its value immediately and appends a node; `backward`
//! walks the nodes in reverse. Leaves are either parameters (receive gradients)
//! or constants.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::metrics;
use crate::ops;
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Param,
    Constant,
    Conv2d { x: Var, k: Var, b: Option<Var>, ph: usize, pw: usize },
    Linear { x: Var, w: Var, b: Var },
    PixelShuffle { x: Var, r: usize },
    Gelu { x: Var },
    Add { a: Var, b: Var },
    Affine { x: Var, scale: f64, shift: f64 },
    Pad { x: Var, p: usize },
    DepthwiseFixed { x: Var, filter: [f64; 9], pad: usize },
    ChannelScale { x: Var, s: Var },
    PadKernel { k: Var },
    ComposePointwise { outer: Var, inner: Var },
    BiasThrough { k: Var, b: Var },
    ScaledFilterKernel { s: Var, filter: [f64; 9] },
    Reshape { x: Var, shape: [usize; 4] },
    Clamp01 { x: Var },
    Sum { x: Var },
    Dot { a: Var, b: Var },
    MeanAbsDiff { pred: Var, target: Var },
    Ssim { pred: Var, target: Var },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match *self {
            Param | Constant => vec![],
            Conv2d { x, k, b, .. } => {
                let mut v = vec![x, k];
                v.extend(b);
                v
            }
            Linear { x, w, b } => vec![x, w, b],
            PixelShuffle { x, .. }
            | Gelu { x }
            | Affine { x, .. }
            | Pad { x, .. }
            | DepthwiseFixed { x, .. }
            | Reshape { x, .. }
            | Clamp01 { x }
            | Sum { x } => vec![x],
            Add { a, b } | Dot { a, b } => vec![a, b],
            ChannelScale { x, s } => vec![x, s],
            PadKernel { k } => vec![k],
            ComposePointwise { outer, inner } => vec![outer, inner],
            BiasThrough { k, b } => vec![k, b],
            ScaledFilterKernel { s, .. } => vec![s],
            MeanAbsDiff { pred, target } | Ssim { pred, target } => vec![pred, target],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<T: Scalar = f32> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Tape(format!("variable {v:?} does not belong to this tape")));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.index()].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.index()].op
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, idx }
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Param, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Constant, false)
    }

    /// Records `op`, evaluating it from the current input values.
    pub fn push(&mut self, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        for &v in &inputs {
            self.check(v)?;
        }
        let value = self.eval(&op, |v| &self.nodes[v.index()].value)?;
        let rg = inputs.iter().any(|v| self.nodes[v.index()].requires_grad);
        Ok(self.push_node(value, op, rg))
    }

    fn eval<'a>(&'a self, op: &Op, get: impl Fn(Var) -> &'a Tensor<T>) -> Result<Tensor<T>> {
        use Op::*;
        Ok(match *op {
            Param | Constant => return Err(Error::Tape("leaves have no forward rule".into())),
            Conv2d { x, k, b, ph, pw } => ops::conv2d_padded(get(x), get(k), b.map(&get), ph, pw)?,
            Linear { x, w, b } => ops::linear(get(x), get(w), get(b))?,
            PixelShuffle { x, r } => ops::pixel_shuffle(get(x), r)?,
            Gelu { x } => ops::gelu(get(x)),
            Add { a, b } => get(a).zip_map(get(b), |p, q| p + q)?,
            Affine { x, scale, shift } => {
                let (s, t) = (c::<T>(scale), c::<T>(shift));
                get(x).map(|v| v * s + t)
            }
            Pad { x, p } => ops::pad_spatial(get(x), p),
            DepthwiseFixed { x, ref filter, pad } => ops::depthwise_fixed(get(x), filter, pad)?,
            ChannelScale { x, s } => ops::channel_scale(get(x), get(s))?,
            PadKernel { k } => ops::pad_kernel_3x3(get(k))?,
            ComposePointwise { outer, inner } => ops::compose_pointwise(get(outer), get(inner))?,
            BiasThrough { k, b } => ops::bias_through(get(k), get(b))?,
            ScaledFilterKernel { s, ref filter } => {
                let sv = get(s);
                if sv.shape()[0] != 1 || sv.shape()[2] != 1 || sv.shape()[3] != 1 {
                    return shape_err(format!("scale vector {:?}", sv.shape()));
                }
                ops::scaled_filter_kernel(sv, filter)
            }
            Reshape { x, shape } => get(x).reshape(shape)?,
            Clamp01 { x } => get(x).map(|v| v.max(T::zero()).min(T::one())),
            Sum { x } => Tensor::scalar(get(x).sum()),
            Dot { a, b } => {
                let (p, q) = (get(a), get(b));
                if p.shape() != q.shape() {
                    return shape_err(format!("dot: {:?} vs {:?}", p.shape(), q.shape()));
                }
                Tensor::scalar(p.data().iter().zip(q.data()).map(|(&u, &v)| u * v).sum())
            }
            MeanAbsDiff { pred, target } => {
                let d = get(pred).zip_map(get(target), |p, q| (p - q).abs())?;
                let n = c::<T>(d.len().max(1) as f64);
                Tensor::scalar(d.sum() / n)
            }
            Ssim { pred, target } => {
                let (v, _) = metrics::ssim_with_grad(get(pred), get(target))?;
                Tensor::scalar(v)
            }
        })
    }

    /// Recomputes every non-leaf node from the leaves.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut vals: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Param | Op::Constant => node.value.clone(),
                ref op => self.eval(op, |v| &vals[v.index()])?,
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Number of recorded nodes satisfying `pred`.
    pub fn count_ops(&self, pred: impl Fn(&Op) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(&n.op)).count()
    }

    /// Convolutions whose input is `x`.
    pub fn convs_over(&self, x: Var) -> usize {
        self.count_ops(|op| matches!(op, Op::Conv2d { x: xi, .. } if *xi == x))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        if self.nodes[loss.index()].value.shape() != [1, 1, 1, 1] {
            return Err(Error::Tape(format!(
                "loss must be scalar, got {:?}",
                self.nodes[loss.index()].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index()] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.index()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for (v, gi) in self.local_grads(&node.op, &node.value, &g)? {
                if !self.nodes[v.index()].requires_grad {
                    continue;
                }
                match &mut grads[v.index()] {
                    Some(acc) => acc.add_assign(&gi)?,
                    slot @ None => *slot = Some(gi),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
        })
    }

    fn local_grads(&self, op: &Op, out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        use Op::*;
        let val = |v: Var| &self.nodes[v.index()].value;
        let needs = |v: Var| self.nodes[v.index()].requires_grad;
        Ok(match *op {
            Param | Constant => vec![],
            Conv2d { x, k, b, ph, pw } => {
                let mut r = Vec::with_capacity(3);
                if needs(x) {
                    r.push((x, ops::conv2d_backward_input(g, val(k), val(x).shape(), ph, pw)));
                }
                if needs(k) {
                    r.push((k, ops::conv2d_backward_kernel(g, val(x), val(k).shape(), ph, pw)));
                }
                if let Some(b) = b {
                    r.push((b, ops::channel_sums(g)));
                }
                r
            }
            Linear { x, w, b } => {
                let (gx, gw, gb) = ops::linear_backward(g, val(x), val(w));
                vec![(x, gx), (w, gw), (b, gb)]
            }
            PixelShuffle { x, r } => vec![(x, ops::pixel_unshuffle(g, r)?)],
            Gelu { x } => vec![(x, val(x).zip_map(g, |v, gv| ops::gelu_grad_scalar(v) * gv)?)],
            Add { a, b } => vec![(a, g.clone()), (b, g.clone())],
            Affine { x, scale, .. } => vec![(x, g.scale(c(scale)))],
            Pad { x, p } => vec![(x, ops::crop_spatial(g, p))],
            DepthwiseFixed { x, ref filter, pad } => {
                vec![(x, ops::depthwise_fixed_backward(g, filter, val(x).shape(), pad))]
            }
            ChannelScale { x, s } => {
                let gx = ops::channel_scale(g, val(s))?;
                let prod = g.zip_map(val(x), |a, b| a * b)?;
                vec![(x, gx), (s, ops::channel_sums(&prod))]
            }
            PadKernel { k } => {
                let [_, _, kh, kw] = val(k).shape();
                vec![(k, ops::unpad_kernel(g, kh, kw))]
            }
            ComposePointwise { outer, inner } => {
                let (ga, gb) = ops::compose_pointwise_backward(g, val(outer), val(inner));
                vec![(outer, ga), (inner, gb)]
            }
            BiasThrough { k, b } => {
                let (gk, gb) = ops::bias_through_backward(g, val(k), val(b));
                vec![(k, gk), (b, gb)]
            }
            ScaledFilterKernel { s, ref filter } => {
                vec![(s, ops::scaled_filter_kernel_backward(g, filter))]
            }
            Reshape { x, .. } => vec![(x, g.reshape(val(x).shape())?)],
            Clamp01 { x } => {
                let gx = val(x).zip_map(g, |v, gv| {
                    if v > T::zero() && v < T::one() {
                        gv
                    } else {
                        T::zero()
                    }
                })?;
                vec![(x, gx)]
            }
            Sum { x } => vec![(x, Tensor::full(val(x).shape(), g.data()[0]))],
            Dot { a, b } => {
                let s = g.data()[0];
                vec![(a, val(b).scale(s)), (b, val(a).scale(s))]
            }
            MeanAbsDiff { pred, target } => {
                let s = g.data()[0] / c::<T>(val(pred).len().max(1) as f64);
                let gp = val(pred).zip_map(val(target), |p, q| {
                    if p > q {
                        s
                    } else if p < q {
                        -s
                    } else {
                        T::zero()
                    }
                })?;
                let gt = gp.scale(-T::one());
                vec![(pred, gp), (target, gt)]
            }
            Ssim { pred, target } => {
                let _ = out;
                let s = g.data()[0];
                let (_, gp) = metrics::ssim_with_grad(val(pred), val(target))?;
                let mut r = vec![(pred, gp.scale(s))];
                if needs(target) {
                    let (_, gt) = metrics::ssim_with_grad(val(target), val(pred))?;
                    r.push((target, gt.scale(s)));
                }
                r
            }
        })
    }

    // Convenience builders.

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, ph: usize, pw: usize) -> Result<Var> {
        self.push(Op::Conv2d { x, k, b, ph, pw })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.push(Op::Linear { x, w, b })
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        self.push(Op::PixelShuffle { x, r })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Gelu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add { a, b })
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.push(Op::Affine { x, scale, shift })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum { x })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Dot { a, b })
    }

    pub fn reshape(&mut self, x: Var, shape: [usize; 4]) -> Result<Var> {
        self.push(Op::Reshape { x, shape })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    tape: u32,
    shapes: Vec<[usize; 4]>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        assert_eq!(v.tape, self.tape, "variable from a different tape");
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.index()]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        assert_eq!(v.tape, self.tape, "variable from a different tape");
        self.grads[v.index()]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.index()]))
    }
}
