use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::kernels;
use super::{shape_err, Result, Tensor, TensorError};

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    /// Leaky ReLU with negative slope 0.2.
    LeakyRelu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }

    pub fn apply_slice(self, xs: &mut [f64]) {
        if self != Activation::Identity {
            for x in xs {
                *x = self.apply(*x);
            }
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::LeakyRelu => 0,
            Activation::Tanh => 1,
            Activation::Sigmoid => 2,
            Activation::Identity => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::LeakyRelu,
            1 => Activation::Tanh,
            2 => Activation::Sigmoid,
            3 => Activation::Identity,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::LeakyRelu => "leaky_relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Param { name: String, trainable: bool },
    Const,
    MatMul { a: NodeId, b: NodeId, transpose_b: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Act(NodeId, Activation),
    Square(NodeId),
    Abs(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Clamp { a: NodeId, lo: f64, hi: f64 },
    Sum(NodeId),
    Mean(NodeId),
    Concat(NodeId, NodeId),
    Slice { a: NodeId, start: usize, len: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param { .. } => "param",
            Op::Const => "const",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Act(_, a) => a.name(),
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) | Op::Param { .. } | Op::Const => vec![],
            Op::MatMul { a, b, .. }
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Concat(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Act(a, _)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Clamp { a, .. }
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Slice { a, .. } => vec![a],
        }
    }
}

/// Gradients keyed by parameter or input name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) -> Option<Tensor> {
        self.map.insert(name.into(), grad)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }
}

/// A static computation graph. Nodes are appended in topological order by
/// the builder methods; `evaluate` binds named inputs and computes every
/// node, and `backward` propagates a seed gradient in exact reverse order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    ops: Vec<Op>,
    fixed: Vec<Option<Tensor>>,
    values: Vec<Option<Tensor>>,
    evaluated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, fixed: Option<Tensor>) -> NodeId {
        self.ops.push(op);
        self.fixed.push(fixed);
        self.values.push(None);
        self.evaluated = false;
        NodeId(self.ops.len() - 1)
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_string()), None)
    }

    /// Trainable named parameter.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(
            Op::Param {
                name: name.to_string(),
                trainable: true,
            },
            Some(value),
        )
    }

    /// Named parameter that never receives a gradient.
    pub fn frozen(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(
            Op::Param {
                name: name.to_string(),
                trainable: false,
            },
            Some(value),
        )
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, Some(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(
            Op::MatMul {
                a,
                b,
                transpose_b: false,
            },
            None,
        )
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(
            Op::MatMul {
                a,
                b,
                transpose_b: true,
            },
            None,
        )
    }

    /// Element-wise sum; `b` may also be a row broadcast over the rows of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b), None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b), None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b), None)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor), None)
    }

    pub fn activation(&mut self, a: NodeId, act: Activation) -> NodeId {
        self.push(Op::Act(a, act), None)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a), None)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Abs(a), None)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a), None)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a), None)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(Op::Clamp { a, lo, hi }, None)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), None)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), None)
    }

    /// Concatenation along the trailing axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Concat(a, b), None)
    }

    /// Columns `start..start + len` of the trailing axis.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::Slice { a, start, len }, None)
    }

    /// Mean of squared differences, a common loss building block.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let s = self.square(d);
        self.mean(s)
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.fixed[id.0].as_ref().or(self.values[id.0].as_ref())
    }

    /// Current value of a named parameter.
    pub fn param_value(&self, name: &str) -> Option<&Tensor> {
        self.ops.iter().enumerate().find_map(|(i, op)| match op {
            Op::Param { name: n, .. } if n == name => self.fixed[i].as_ref(),
            _ => None,
        })
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.value(id).expect("operand evaluated before use")
    }

    pub fn evaluate(&mut self, inputs: &[(&str, &Tensor)]) -> Result<()> {
        self.evaluated = false;
        for i in 0..self.ops.len() {
            if self.fixed[i].is_some() {
                continue;
            }
            let out = match &self.ops[i] {
                Op::Input(name) => inputs
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| (*t).clone())
                    .ok_or_else(|| TensorError::UnboundInput(name.clone()))?,
                op => self.compute(op)?,
            };
            if !out.is_finite() {
                return Err(TensorError::NonFiniteValue {
                    node: i,
                    op: self.ops[i].name(),
                });
            }
            self.values[i] = Some(out);
        }
        self.evaluated = true;
        Ok(())
    }

    fn compute(&self, op: &Op) -> Result<Tensor> {
        Ok(match *op {
            Op::Input(_) | Op::Param { .. } | Op::Const => unreachable!("fixed or bound"),
            Op::MatMul { a, b, transpose_b } => {
                let (a, b) = (self.val(a), self.val(b));
                if a.rank() != 2 || b.rank() != 2 {
                    return Err(shape_err("matmul", "operands must be matrices"));
                }
                let (m, k) = (a.shape()[0], a.shape()[1]);
                if transpose_b {
                    let (n, k2) = (b.shape()[0], b.shape()[1]);
                    if k != k2 {
                        return Err(shape_err(
                            "matmul",
                            format!("{:?} · {:?}ᵀ", a.shape(), b.shape()),
                        ));
                    }
                    Tensor::new(vec![m, n], kernels::matmul_nt(a.data(), b.data(), m, k, n))?
                } else {
                    let (k2, n) = (b.shape()[0], b.shape()[1]);
                    if k != k2 {
                        return Err(shape_err(
                            "matmul",
                            format!("{:?} · {:?}", a.shape(), b.shape()),
                        ));
                    }
                    Tensor::new(vec![m, n], kernels::matmul_nn(a.data(), b.data(), m, k, n))?
                }
            }
            Op::Add(a, b) => self.binary("add", a, b, |x, y| x + y)?,
            Op::Sub(a, b) => self.binary("sub", a, b, |x, y| x - y)?,
            Op::Mul(a, b) => self.binary("mul", a, b, |x, y| x * y)?,
            Op::Scale(a, f) => self.val(a).map(|x| x * f),
            Op::Act(a, act) => {
                let mut t = self.val(a).clone();
                act.apply_slice(t.data_mut());
                t
            }
            Op::Square(a) => self.val(a).map(|x| x * x),
            Op::Abs(a) => self.val(a).map(f64::abs),
            Op::Log(a) => self.val(a).map(f64::ln),
            Op::Exp(a) => self.val(a).map(f64::exp),
            Op::Clamp { a, lo, hi } => self.val(a).map(|x| x.clamp(lo, hi)),
            Op::Sum(a) => Tensor::scalar(self.val(a).sum()),
            Op::Mean(a) => Tensor::scalar(self.val(a).mean()),
            Op::Concat(a, b) => {
                let (a, b) = (self.val(a), self.val(b));
                if a.rows() != b.rows() || a.rank() != b.rank() {
                    return Err(shape_err(
                        "concat",
                        format!("{:?} ++ {:?}", a.shape(), b.shape()),
                    ));
                }
                let (ca, cb) = (a.cols(), b.cols());
                let mut data = Vec::with_capacity(a.len() + b.len());
                for r in 0..a.rows() {
                    data.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
                    data.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
                }
                let mut shape = a.shape().to_vec();
                *shape.last_mut().unwrap() = ca + cb;
                Tensor::new(shape, data)?
            }
            Op::Slice { a, start, len } => {
                let a = self.val(a);
                let c = a.cols();
                if len == 0 || start + len > c {
                    return Err(shape_err(
                        "slice",
                        format!("{start}..{} of {c} columns", start + len),
                    ));
                }
                let mut data = Vec::with_capacity(a.rows() * len);
                for r in 0..a.rows() {
                    data.extend_from_slice(&a.data()[r * c + start..r * c + start + len]);
                }
                let mut shape = a.shape().to_vec();
                *shape.last_mut().unwrap() = len;
                Tensor::new(shape, data)?
            }
        })
    }

    fn binary(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (a, b) = (self.val(a), self.val(b));
        if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(a.shape().to_vec(), data);
        }
        if b.len() == a.cols() && (b.rank() == 1 || b.rows() == 1) {
            let c = a.cols();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data()[i % c]))
                .collect();
            return Tensor::new(a.shape().to_vec(), data);
        }
        Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }

    /// Propagates `seed` (shaped like `output`) back through the graph.
    /// Returns gradients for every trainable parameter the output depends on
    /// and for the named inputs in `wrt_inputs`.
    pub fn backward(
        &self,
        output: NodeId,
        seed: &Tensor,
        wrt_inputs: &[&str],
    ) -> Result<Gradients> {
        if !self.evaluated {
            return Err(TensorError::GraphNotEvaluated);
        }
        if self.val(output).shape() != seed.shape() {
            return Err(shape_err(
                "backward",
                format!("seed {:?} for output {:?}", seed.shape(), self.val(output).shape()),
            ));
        }
        let n = output.0 + 1;
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = match &self.ops[i] {
                Op::Input(name) => wrt_inputs.contains(&name.as_str()),
                Op::Param { trainable, .. } => *trainable,
                Op::Const => false,
                op => op.operands().iter().any(|o| needs[o.0]),
            };
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        if needs[output.0] {
            grads[output.0] = Some(seed.clone());
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient {
                    node: i,
                    op: self.ops[i].name(),
                });
            }
            // keep leaf gradients for the result
            if matches!(self.ops[i], Op::Input(_) | Op::Param { .. }) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &needs, &mut grads)?;
        }
        let mut map = BTreeMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match &self.ops[i] {
                Op::Input(name) | Op::Param { name, .. } => {
                    accumulate_named(&mut map, name, g);
                }
                _ => {}
            }
        }
        Ok(Gradients { map })
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor,
        needs: &[bool],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let out = self.values[i].as_ref().expect("evaluated");
        match self.ops[i] {
            Op::Input(_) | Op::Param { .. } | Op::Const => {}
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (self.val(a), self.val(b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = out.shape()[1];
                if needs[a.0] {
                    // dA = G · B (transposed) or G · Bᵀ
                    let da = if transpose_b {
                        kernels::matmul_nn(g.data(), bv.data(), m, n, k)
                    } else {
                        kernels::matmul_nt(g.data(), bv.data(), m, n, k)
                    };
                    add_grad(grads, a, Tensor::new(vec![m, k], da)?);
                }
                if needs[b.0] {
                    let db = if transpose_b {
                        Tensor::new(vec![n, k], kernels::matmul_tn(g.data(), av.data(), m, n, k))?
                    } else {
                        Tensor::new(vec![k, n], kernels::matmul_tn(av.data(), g.data(), m, k, n))?
                    };
                    add_grad(grads, b, db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.ops[i], Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs[a.0] {
                    add_grad(grads, a, g.clone());
                }
                if needs[b.0] {
                    let bshape = self.val(b).shape().to_vec();
                    let gb = reduce_to(g, &bshape).map(|x| sign * x);
                    add_grad(grads, b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                if needs[a.0] {
                    let c = bv.len();
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, &x)| x * bv.data()[j % c])
                        .collect();
                    add_grad(grads, a, Tensor::new(av.shape().to_vec(), data)?);
                }
                if needs[b.0] {
                    let prod = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                    )?;
                    add_grad(grads, b, reduce_to(&prod, bv.shape()));
                }
            }
            Op::Scale(a, f) => add_grad(grads, a, g.map(|x| x * f)),
            Op::Act(a, act) => {
                let x = self.val(a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(out.data())
                    .map(|((&gv, &xv), &yv)| gv * act.derivative(xv, yv))
                    .collect();
                add_grad(grads, a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::Square(a) => add_grad(grads, a, zip_map(g, self.val(a), |gv, x| 2.0 * x * gv)),
            Op::Abs(a) => add_grad(
                grads,
                a,
                zip_map(g, self.val(a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Log(a) => add_grad(grads, a, zip_map(g, self.val(a), |gv, x| gv / x)),
            Op::Exp(a) => add_grad(grads, a, zip_map(g, out, |gv, y| gv * y)),
            Op::Clamp { a, lo, hi } => add_grad(
                grads,
                a,
                zip_map(g, self.val(a), |gv, x| if x < lo || x > hi { 0.0 } else { gv }),
            ),
            Op::Sum(a) => {
                let s = g.data()[0];
                add_grad(grads, a, Tensor::full(self.val(a).shape(), s));
            }
            Op::Mean(a) => {
                let av = self.val(a);
                let s = g.data()[0] / av.len() as f64;
                add_grad(grads, a, Tensor::full(av.shape(), s));
            }
            Op::Concat(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                let (ca, cb) = (av.cols(), bv.cols());
                let c = ca + cb;
                if needs[a.0] {
                    let mut d = Vec::with_capacity(av.len());
                    for r in 0..av.rows() {
                        d.extend_from_slice(&g.data()[r * c..r * c + ca]);
                    }
                    add_grad(grads, a, Tensor::new(av.shape().to_vec(), d)?);
                }
                if needs[b.0] {
                    let mut d = Vec::with_capacity(bv.len());
                    for r in 0..bv.rows() {
                        d.extend_from_slice(&g.data()[r * c + ca..(r + 1) * c]);
                    }
                    add_grad(grads, b, Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            Op::Slice { a, start, len } => {
                let av = self.val(a);
                let c = av.cols();
                let mut d = vec![0.0; av.len()];
                for r in 0..av.rows() {
                    d[r * c + start..r * c + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                add_grad(grads, a, Tensor::new(av.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Sums a broadcast gradient back down to a row-shaped operand.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let c: usize = shape.iter().product();
    let mut out = vec![0.0; c];
    for row in g.data().chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("row shape")
}

fn add_grad(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_named(map: &mut BTreeMap<String, Tensor>, name: &str, g: Tensor) {
    match map.get_mut(name) {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => {
            map.insert(name.to_string(), g);
        }
    }
}
