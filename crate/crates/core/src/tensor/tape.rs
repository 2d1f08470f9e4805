use super::ops::{self, ConvAttrs, PoolAttrs, SCALE_TOLERANCE};
use super::Tensor;
use crate::error::{Error, Result};
use crate::spectral::{self, KernelShape};
use num_complex::Complex64;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    Conv2d { x: Var, w: Var, attrs: ConvAttrs },
    Relu(Var),
    MaxPool { x: Var, attrs: PoolAttrs },
    AvgPool { x: Var, attrs: PoolAttrs },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Vec<Var>),
    Concat(Vec<Var>),
    Scale { x: Var, c: f64 },
    DivScalar { x: Var, s: Var },
    Symlog(Var),
    Sigmoid(Var),
    BatchNormRep(Var),
    Mean(Var),
    Std(Var),
    MatMul(Var, Var),
    TransposeBatchChannel(Var),
    Materialize { fk: Var, target: KernelShape },
}

#[derive(Clone, Debug)]
enum Saved {
    None,
    Argmax(Vec<usize>),
    InvStd(Vec<f64>),
    Spectrum(Vec<Complex64>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    saved: Saved,
    requires_grad: bool,
}

/// Records forward operations in execution order so gradients can be
/// propagated back to parameter leaves.
///
/// A tape is append-only; every input of a node precedes it.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the seed does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(Op::Param, t, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Op::Constant, t, false)
    }

    fn leaf(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            saved: Saved::None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let (value, saved) = self.compute(&op, |v| &self.nodes[v.0].value)?;
        let requires_grad = inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            saved,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn compute<'a>(&'a self, op: &Op, val: impl Fn(Var) -> &'a Tensor) -> Result<(Tensor, Saved)> {
        let plain = |t: Tensor| (t, Saved::None);
        Ok(match op {
            Op::Param | Op::Constant => unreachable!("leaves are not recomputed"),
            Op::Conv2d { x, w, attrs } => plain(ops::conv2d(val(*x), val(*w), *attrs)?),
            Op::Relu(x) => plain(val(*x).map(|v| if v > 0.0 { v } else { 0.0 })),
            Op::MaxPool { x, attrs } => {
                let (t, arg) = ops::maxpool2d(val(*x), *attrs)?;
                (t, Saved::Argmax(arg))
            }
            Op::AvgPool { x, attrs } => plain(ops::avgpool2d(val(*x), *attrs)?),
            Op::GlobalAvgPool(x) => plain(ops::global_avg_pool(val(*x))?),
            Op::Linear { x, w, b } => plain(ops::linear(val(*x), val(*w), b.map(&val))?),
            Op::Add(xs) => {
                let first = val(xs[0]);
                let mut acc = first.clone();
                for x in &xs[1..] {
                    let t = val(*x);
                    if t.shape() != first.shape() {
                        return Err(Error::shape("add", format!("{:?} vs {:?}", first.shape(), t.shape())));
                    }
                    acc.add_assign(t);
                }
                plain(acc)
            }
            Op::Concat(xs) => {
                let ts: Vec<&Tensor> = xs.iter().map(|x| val(*x)).collect();
                plain(ops::concat_channels(&ts)?)
            }
            Op::Scale { x, c } => plain(val(*x).scale(*c)),
            Op::DivScalar { x, s } => {
                let st = val(*s);
                if !st.is_scalar() {
                    return Err(Error::shape("divide_by_scalar", format!("divisor shape {:?}", st.shape())));
                }
                let d = st.item();
                if !(d.abs() >= SCALE_TOLERANCE) {
                    return Err(Error::DegenerateScale {
                        context: "divide_by_scalar".into(),
                        value: d,
                    });
                }
                plain(val(*x).map(|v| v / d))
            }
            Op::Symlog(x) => plain(val(*x).map(ops::symlog)),
            Op::Sigmoid(x) => plain(val(*x).map(ops::sigmoid)),
            Op::BatchNormRep(x) => {
                let (t, inv) = ops::batch_norm_rep(val(*x))?;
                (t, Saved::InvStd(inv))
            }
            Op::Mean(x) => plain(Tensor::scalar(val(*x).mean())),
            Op::Std(x) => plain(Tensor::scalar(val(*x).std())),
            Op::MatMul(a, b) => plain(ops::matmul(val(*a), val(*b))?),
            Op::TransposeBatchChannel(x) => plain(ops::transpose_batch_channel(val(*x))?),
            Op::Materialize { fk, target } => {
                let z = spectral::materialize_complex(val(*fk), *target);
                let t = Tensor::new(target.dims().to_vec(), z.iter().map(|c| c.norm()).collect())?;
                (t, Saved::Spectrum(z))
            }
        })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, attrs: ConvAttrs) -> Result<Var> {
        self.push(Op::Conv2d { x, w, attrs })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu(x))
    }

    pub fn maxpool2d(&mut self, x: Var, attrs: PoolAttrs) -> Result<Var> {
        self.push(Op::MaxPool { x, attrs })
    }

    pub fn avgpool2d(&mut self, x: Var, attrs: PoolAttrs) -> Result<Var> {
        self.push(Op::AvgPool { x, attrs })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.push(Op::GlobalAvgPool(x))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.push(Op::Linear { x, w, b })
    }

    pub fn add(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("add", "no inputs"));
        }
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.push(Op::Add(xs.to_vec()))
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        self.push(Op::Concat(xs.to_vec()))
    }

    pub fn scale_by_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale { x, c })
    }

    /// `x / s` for a one-element `s`; `|s| < 1e-12` is a degenerate-scale error.
    pub fn divide_by_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.push(Op::DivScalar { x, s })
    }

    pub fn symlog(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Symlog(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sigmoid(x))
    }

    pub fn batch_norm_rep(&mut self, x: Var) -> Result<Var> {
        self.push(Op::BatchNormRep(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Mean(x))
    }

    /// Population standard deviation over every entry.
    pub fn std(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Std(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose_batch_channel(&mut self, x: Var) -> Result<Var> {
        self.push(Op::TransposeBatchChannel(x))
    }

    /// Synthesize a convolution weight from the frequency tensor `fk`.
    pub fn materialize(&mut self, fk: Var, target: KernelShape) -> Result<Var> {
        if self.value(fk).shape().len() != 4 {
            return Err(Error::shape("materialize", format!("frequency tensor {:?}", self.value(fk).shape())));
        }
        self.push(Op::Materialize { fk, target })
    }

    /// Recompute every non-leaf value from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let t = match node.op {
                Op::Param | Op::Constant => node.value.clone(),
                _ => self.compute(&node.op, |v| &values[v.0])?.0,
            };
            values.push(t);
        }
        Ok(values)
    }

    /// Reverse pass from a scalar seed.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        self.backward_scaled(seed, 1.0)
    }

    /// Reverse pass with `d(loss)/d(seed) = scale`.
    pub fn backward_scaled(&self, seed: Var, scale: f64) -> Result<Gradients> {
        let sv = &self.nodes[seed.0].value;
        if !sv.is_scalar() {
            return Err(Error::NonScalarSeed(sv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(Tensor::full(sv.shape(), scale));
        for i in (0..=seed.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let send = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if needs(v) {
                accumulate(&mut grads[v.0], t);
            }
        };
        match (&node.op, &node.saved) {
            (Op::Param | Op::Constant, _) => {}
            (Op::Conv2d { x, w, attrs }, _) => {
                let (dx, dw) = ops::conv2d_backward(val(*x), val(*w), g, *attrs);
                send(*x, dx, grads);
                send(*w, dw, grads);
            }
            (Op::Relu(x), _) => {
                let xv = val(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &gv)| if a > 0.0 { gv } else { 0.0 })
                    .collect();
                send(*x, Tensor::new(xv.shape().to_vec(), d).expect("shape"), grads);
            }
            (Op::MaxPool { x, .. }, Saved::Argmax(arg)) => {
                send(*x, ops::maxpool2d_backward(val(*x), arg, g), grads);
            }
            (Op::AvgPool { x, attrs }, _) => {
                send(*x, ops::avgpool2d_backward(val(*x), g, *attrs), grads);
            }
            (Op::GlobalAvgPool(x), _) => {
                send(*x, ops::global_avg_pool_backward(val(*x), g), grads);
            }
            (Op::Linear { x, w, b }, _) => {
                let (xv, wv) = (val(*x), val(*w));
                if needs(*x) {
                    send(*x, ops::matmul(g, wv).expect("shape"), grads);
                }
                if needs(*w) {
                    send(*w, ops::matmul(&ops::transpose2(g), xv).expect("shape"), grads);
                }
                if let Some(b) = b {
                    let (n, fout) = g.dims2("linear").expect("rank 2");
                    let mut db = vec![0.0; fout];
                    for r in 0..n {
                        for (d, gv) in db.iter_mut().zip(&g.data()[r * fout..(r + 1) * fout]) {
                            *d += gv;
                        }
                    }
                    send(*b, Tensor::new(vec![fout], db).expect("shape"), grads);
                }
            }
            (Op::Add(xs), _) => {
                for x in xs {
                    send(*x, g.clone(), grads);
                }
            }
            (Op::Concat(xs), _) => {
                let shapes: Vec<Vec<usize>> = xs.iter().map(|x| val(*x).shape().to_vec()).collect();
                for (x, t) in xs.iter().zip(ops::concat_channels_backward(&shapes, g)) {
                    send(*x, t, grads);
                }
            }
            (Op::Scale { x, c }, _) => send(*x, g.scale(*c), grads),
            (Op::DivScalar { x, s }, _) => {
                let d = val(*s).item();
                send(*x, g.scale(1.0 / d), grads);
                if needs(*s) {
                    let dot: f64 = g.data().iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                    let shape = val(*s).shape().to_vec();
                    send(*s, Tensor::full(&shape, -dot / (d * d)), grads);
                }
            }
            (Op::Symlog(x), _) => {
                let xv = val(*x);
                let d = xv.data().iter().zip(g.data()).map(|(&a, &gv)| gv * ops::symlog_grad(a)).collect();
                send(*x, Tensor::new(xv.shape().to_vec(), d).expect("shape"), grads);
            }
            (Op::Sigmoid(x), _) => {
                let y = &node.value;
                let d = y.data().iter().zip(g.data()).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                send(*x, Tensor::new(y.shape().to_vec(), d).expect("shape"), grads);
            }
            (Op::BatchNormRep(x), Saved::InvStd(inv)) => {
                send(*x, ops::batch_norm_rep_backward(&node.value, inv, g), grads);
            }
            (Op::Mean(x), _) => {
                let xv = val(*x);
                send(*x, Tensor::full(xv.shape(), g.item() / xv.len() as f64), grads);
            }
            (Op::Std(x), _) => {
                let xv = val(*x);
                let sd = node.value.item();
                let n = xv.len() as f64;
                let t = if sd == 0.0 {
                    Tensor::zeros(xv.shape())
                } else {
                    let m = xv.mean();
                    let k = g.item() / (n * sd);
                    xv.map(|v| (v - m) * k)
                };
                send(*x, t, grads);
            }
            (Op::MatMul(a, b), _) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    send(*a, ops::matmul(g, &ops::transpose2(bv)).expect("shape"), grads);
                }
                if needs(*b) {
                    send(*b, ops::matmul(&ops::transpose2(av), g).expect("shape"), grads);
                }
            }
            (Op::TransposeBatchChannel(x), _) => {
                send(*x, ops::transpose_batch_channel(g).expect("rank checked"), grads);
            }
            (Op::Materialize { fk, target }, Saved::Spectrum(z)) => {
                let shape = val(*fk).shape().to_vec();
                send(*fk, spectral::materialize_backward(&shape, *target, z, g), grads);
            }
            (op, saved) => unreachable!("missing saved state for {op:?}: {saved:?}"),
        }
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Param | Op::Constant => vec![],
        Op::Conv2d { x, w, .. } => vec![*x, *w],
        Op::Linear { x, w, b } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Op::Add(xs) | Op::Concat(xs) => xs.clone(),
        Op::DivScalar { x, s } => vec![*x, *s],
        Op::MatMul(a, b) => vec![*a, *b],
        Op::Materialize { fk, .. } => vec![*fk],
        Op::Relu(x)
        | Op::MaxPool { x, .. }
        | Op::AvgPool { x, .. }
        | Op::GlobalAvgPool(x)
        | Op::Scale { x, .. }
        | Op::Symlog(x)
        | Op::Sigmoid(x)
        | Op::BatchNormRep(x)
        | Op::Mean(x)
        | Op::Std(x)
        | Op::TransposeBatchChannel(x) => vec![*x],
    }
}
