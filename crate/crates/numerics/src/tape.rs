//! Reverse-mode differentiation over a per-batch tape.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its parents; node ids increase along the forward pass, so walking them in
//! reverse is a valid topological order for the backward sweep.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{invalid, mismatch, NumericsError, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Identifies a learnable parameter across tapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Conv2d { x: Var, k: Var, b: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, k: Var, b: Var, stride: usize, pad: usize },
    LeakyRelu { x: Var, alpha: f64 },
    Sigmoid { x: Var },
    Linear { x: Var, w: Var, b: Var },
    GlobalAvgPool { x: Var },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    AddScalar { x: Var },
    MulScalar { x: Var, c: f64 },
    Sqrt { x: Var },
    Square { x: Var },
    Abs { x: Var },
    ClampMin { x: Var, min: f64 },
    PowScalar { x: Var, p: f64 },
    Sum { x: Var },
    Mean { x: Var },
    Filter { x: Var, taps: Rc<[f64]> },
    AvgPool2 { x: Var },
    ReplicatePad { x: Var, p: usize },
    MaxSpatial { x: Var, argmax: Vec<usize> },
    DivBroadcast { x: Var, d: Var },
    MaskedMean { x: Var, weights: Rc<Tensor>, totals: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    /// Adds `scale · other` into these gradients (missing entries start at zero).
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (id, g) in other.iter() {
            let dst = self.grads.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                *d += scale * s;
            }
        }
    }
}

/// L2 norm over the concatenation of the selected gradient tensors.
/// Parameters absent from `grads` contribute zero.
pub fn grad_global_norm(grads: &Gradients, ids: &[ParamId]) -> Result<f64> {
    if ids.is_empty() {
        return Err(invalid("grad_global_norm", "empty parameter set"));
    }
    let sq: f64 = ids
        .iter()
        .filter_map(|id| grads.get(*id))
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum();
    Ok(sq.sqrt())
}

/// Computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, usize)>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, "operand shape", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient (inputs, targets, fixed kernels).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((id, v.0));
        v
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = kernels::conv2d(self.value(x), self.value(k), self.value(b), stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, k, b, stride, pad }, &[x, k, b]))
    }

    pub fn conv_transpose2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = kernels::conv_transpose2d(self.value(x), self.value(k), self.value(b), stride, pad)?;
        Ok(self.push(y, Op::ConvT2d { x, k, b, stride, pad }, &[x, k, b]))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        if alpha <= 0.0 {
            return Err(invalid("leaky_relu", format!("alpha must be > 0, got {alpha}")));
        }
        let y = self.value(x).map(|v| kernels::leaky_relu(v, alpha));
        Ok(self.push(y, Op::LeakyRelu { x, alpha }, &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(kernels::sigmoid);
        self.push(y, Op::Sigmoid { x }, &[x])
    }

    /// Batched affine map `x·wᵀ + b` with `x: N×In`, `w: Out×In`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::affine(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }, &[x]))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(y, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(y, Op::Mul { a, b }, &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(y, Op::Div { a, b }, &[a, b]))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v + c);
        self.push(y, Op::AddScalar { x }, &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::MulScalar { x, c }, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::sqrt);
        self.push(y, Op::Sqrt { x }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * v);
        self.push(y, Op::Square { x }, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::abs);
        self.push(y, Op::Abs { x }, &[x])
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        let y = self.value(x).map(|v| v.max(min));
        self.push(y, Op::ClampMin { x, min }, &[x])
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let y = self.value(x).map(|v| v.powf(p));
        self.push(y, Op::PowScalar { x, p }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(y, Op::Mean { x }, &[x])
    }

    /// Depthwise separable filter with "valid" extent.
    pub fn filter_valid(&mut self, x: Var, taps: Rc<[f64]>) -> Result<Var> {
        let y = kernels::separable_filter_valid(self.value(x), &taps)?;
        Ok(self.push(y, Op::Filter { x, taps }, &[x]))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let y = kernels::avg_pool2(self.value(x))?;
        Ok(self.push(y, Op::AvgPool2 { x }, &[x]))
    }

    pub fn replicate_pad(&mut self, x: Var, p: usize) -> Result<Var> {
        let y = kernels::replicate_pad(self.value(x), p)?;
        Ok(self.push(y, Op::ReplicatePad { x, p }, &[x]))
    }

    /// Per-plane maximum: `N×C×H×W → N×C`. Ties route the gradient to the
    /// first maximal element.
    pub fn max_spatial(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4("max_spatial")?;
        let hw = h * w;
        let mut argmax = Vec::with_capacity(n * c);
        let mut vals = Vec::with_capacity(n * c);
        for (pi, plane) in t.data().chunks(hw).enumerate() {
            let (mut bi, mut bv) = (0, f64::NEG_INFINITY);
            for (i, &v) in plane.iter().enumerate() {
                if v > bv {
                    bi = i;
                    bv = v;
                }
            }
            argmax.push(pi * hw + bi);
            vals.push(bv);
        }
        let y = Tensor::new(vec![n, c], vals)?;
        Ok(self.push(y, Op::MaxSpatial { x, argmax }, &[x]))
    }

    /// `x[n,c,·,·] / d[n,c]`.
    pub fn div_broadcast(&mut self, x: Var, d: Var) -> Result<Var> {
        let (tx, td) = (self.value(x), self.value(d));
        let (n, c, h, w) = tx.dims4("div_broadcast")?;
        if td.shape() != [n, c] {
            return Err(mismatch("div_broadcast", "divisor shape", format!("expected [{n}, {c}], got {:?}", td.shape())));
        }
        let hw = h * w;
        let data = tx
            .data()
            .chunks(hw)
            .zip(td.data())
            .flat_map(|(p, dv)| p.iter().map(move |v| v / dv))
            .collect();
        let y = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(y, Op::DivBroadcast { x, d }, &[x, d]))
    }

    /// Weighted per-sample mean: `y[n] = Σ w·x / Σ w` over all non-batch axes.
    pub fn masked_mean(&mut self, x: Var, weights: Rc<Tensor>) -> Result<Var> {
        let tx = self.value(x);
        same_shape("masked_mean", tx, &weights)?;
        let n = tx.shape()[0];
        let per = tx.len() / n.max(1);
        let mut totals = Vec::with_capacity(n);
        let mut vals = Vec::with_capacity(n);
        for (xs, ws) in tx.data().chunks(per).zip(weights.data().chunks(per)) {
            let tot: f64 = ws.iter().sum();
            if tot <= 0.0 {
                return Err(invalid("masked_mean", "empty mask"));
            }
            totals.push(tot);
            vals.push(xs.iter().zip(ws).map(|(a, b)| a * b).sum::<f64>() / tot);
        }
        let y = Tensor::new(vec![n], vals)?;
        Ok(self.push(y, Op::MaskedMean { x, weights, totals }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`. Every parameter registered on this
    /// tape gets an entry; unreachable ones are zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, g, &mut grads, &mut out)?;
        }
        for &(id, idx) in &self.params {
            out.grads
                .entry(id)
                .or_insert_with(|| Tensor::zeros(self.nodes[idx].value.shape()));
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn elementwise(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor, f: impl Fn(usize, f64) -> f64) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let d = Tensor::from_fn(g.shape(), |i| f(i, g.data()[i]));
        self.accumulate(grads, v, d);
    }

    fn propagate(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => match out.grads.get_mut(id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.grads.insert(*id, g);
                }
            },
            Op::Conv2d { x, k, b, stride, pad } => {
                let (dx, dk, db) = kernels::conv2d_backward(val(*x), val(*k), &g, *stride, *pad)?;
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *b, db);
            }
            Op::ConvT2d { x, k, b, stride, pad } => {
                let (dx, dk, db) = kernels::conv_transpose2d_backward(val(*x), val(*k), &g, *stride, *pad)?;
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *b, db);
            }
            Op::LeakyRelu { x, alpha } => {
                let xv = val(*x).data();
                self.elementwise(grads, *x, &g, |i, gi| if xv[i] >= 0.0 { gi } else { alpha * gi });
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                self.elementwise(grads, *x, &g, |i, gi| gi * y[i] * (1.0 - y[i]));
            }
            Op::Linear { x, w, b } => {
                let (n, din) = val(*x).dims2("linear")?;
                let (dout, _) = val(*w).dims2("linear")?;
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; n * din];
                    kernels::gemm(n, dout, din, g.data(), false, val(*w).data(), false, 0.0, &mut dx);
                    self.accumulate(grads, *x, Tensor::new(vec![n, din], dx)?);
                }
                let mut dw = vec![0.0; dout * din];
                kernels::gemm(dout, n, din, g.data(), true, val(*x).data(), false, 0.0, &mut dw);
                self.accumulate(grads, *w, Tensor::new(vec![dout, din], dw)?);
                let mut db = vec![0.0; dout];
                for row in g.data().chunks(dout) {
                    db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                }
                self.accumulate(grads, *b, Tensor::new(vec![dout], db)?);
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = val(*x).dims4("global_avg_pool")?;
                let hw = h * w;
                let inv = 1.0 / hw as f64;
                self.elementwise(grads, *x, val(*x), |i, _| g.data()[i / hw] * inv);
            }
            Op::Reshape { x } => {
                let d = g.reshape(val(*x).shape())?;
                self.accumulate(grads, *x, d);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::Sub { a, b } => {
                self.elementwise(grads, *b, &g, |_, gi| -gi);
                self.accumulate(grads, *a, g);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                self.elementwise(grads, *a, &g, |i, gi| gi * bv[i]);
                self.elementwise(grads, *b, &g, |i, gi| gi * av[i]);
            }
            Op::Div { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                self.elementwise(grads, *a, &g, |i, gi| gi / bv[i]);
                self.elementwise(grads, *b, &g, |i, gi| -gi * av[i] / (bv[i] * bv[i]));
            }
            Op::AddScalar { x } => self.accumulate(grads, *x, g),
            Op::MulScalar { x, c } => self.elementwise(grads, *x, &g, |_, gi| gi * c),
            Op::Sqrt { x } => {
                let y = node.value.data();
                self.elementwise(grads, *x, &g, |i, gi| gi * 0.5 / y[i]);
            }
            Op::Square { x } => {
                let xv = val(*x).data();
                self.elementwise(grads, *x, &g, |i, gi| 2.0 * gi * xv[i]);
            }
            Op::Abs { x } => {
                let xv = val(*x).data();
                self.elementwise(grads, *x, &g, |i, gi| {
                    if xv[i] > 0.0 {
                        gi
                    } else if xv[i] < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
            }
            Op::ClampMin { x, min } => {
                let xv = val(*x).data();
                self.elementwise(grads, *x, &g, |i, gi| if xv[i] > *min { gi } else { 0.0 });
            }
            Op::PowScalar { x, p } => {
                let xv = val(*x).data();
                self.elementwise(grads, *x, &g, |i, gi| gi * p * xv[i].powf(p - 1.0));
            }
            Op::Sum { x } => {
                let gi = g.item();
                self.elementwise(grads, *x, val(*x), |_, _| gi);
            }
            Op::Mean { x } => {
                let gi = g.item() / val(*x).len() as f64;
                self.elementwise(grads, *x, val(*x), |_, _| gi);
            }
            Op::Filter { x, taps } => {
                if self.nodes[x.0].requires_grad {
                    let d = kernels::separable_filter_valid_backward(&g, taps, val(*x).shape())?;
                    self.accumulate(grads, *x, d);
                }
            }
            Op::AvgPool2 { x } => {
                let d = kernels::avg_pool2_backward(&g, val(*x).shape())?;
                self.accumulate(grads, *x, d);
            }
            Op::ReplicatePad { x, p } => {
                let d = kernels::replicate_pad_backward(&g, *p, val(*x).shape())?;
                self.accumulate(grads, *x, d);
            }
            Op::MaxSpatial { x, argmax } => {
                let mut d = Tensor::zeros(val(*x).shape());
                for (gi, &idx) in g.data().iter().zip(argmax) {
                    d.data_mut()[idx] += gi;
                }
                self.accumulate(grads, *x, d);
            }
            Op::DivBroadcast { x, d } => {
                let (xv, dv) = (val(*x), val(*d));
                let hw = xv.len() / dv.len();
                self.elementwise(grads, *x, &g, |i, gi| gi / dv.data()[i / hw]);
                if self.nodes[d.0].requires_grad {
                    let mut dd = vec![0.0; dv.len()];
                    for (i, (gi, xi)) in g.data().iter().zip(xv.data()).enumerate() {
                        let di = dv.data()[i / hw];
                        dd[i / hw] -= gi * xi / (di * di);
                    }
                    self.accumulate(grads, *d, Tensor::new(dv.shape().to_vec(), dd)?);
                }
            }
            Op::MaskedMean { x, weights, totals } => {
                let per = weights.len() / totals.len();
                let wv = weights.data();
                self.elementwise(grads, *x, weights, |i, _| g.data()[i / per] * wv[i] / totals[i / per]);
            }
        }
        Ok(())
    }
}
