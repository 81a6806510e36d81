//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is a static computation graph built once via [`TapeBuilder`]:
//! an append-only sequence of nodes whose inputs always reference earlier
//! nodes, so the insertion order is already a topological order. Leaves are
//! named variables bound at execution time; [`Tape::forward`] evaluates into
//! a separate [`Execution`] buffer, which keeps the tape itself immutable and
//! shareable across threads. [`Tape::backward`] walks the node list in
//! reverse and accumulates vector-Jacobian products.
//!
//! The op set is intentionally small: exactly what an MLP classifier with
//! softmax heads, clamped-log losses, and stop-gradient routing needs.
//! Logarithms only ever see arguments clamped to `[EPS_LOG, 1]`, so every
//! loss built on this module is finite by construction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{
    add_bias_into, leaky_relu_into, matmul_at_acc, matmul_bt_acc, matmul_into, softmax_rows_into,
    Tensor,
};

/// Lower clamp for every log argument. Probabilities are clamped to
/// `[EPS_LOG, 1]` before `ln`, making cross-entropy and entropy finite even
/// on saturated predictions.
pub const EPS_LOG: f64 = 1e-12;

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub enum Op {
    /// Named leaf bound at forward time. `requires_grad = false` marks a
    /// stop-gradient leaf: backward reports an all-zero gradient for it.
    Var { name: String, requires_grad: bool },
    Const(Tensor),
    /// Elementwise sum of two same-shape nodes.
    Add(NodeId, NodeId),
    /// `[n x m] + [m]`, bias broadcast over rows.
    AddBias(NodeId, NodeId),
    /// Elementwise product of two same-shape nodes.
    Mul(NodeId, NodeId),
    /// Multiply by a compile-time constant.
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    LeakyRelu(NodeId, f64),
    /// Row-wise stable softmax.
    Softmax(NodeId),
    /// Row-wise fused log-softmax: `x - max - ln(sum(exp(x - max)))`.
    /// Cross-entropy built on this keeps its `p - y` gradient even when the
    /// softmax saturates.
    LogSoftmax(NodeId),
    /// `ln(clamp(x, EPS_LOG, 1))`; derivative is `1/x` inside the clamp
    /// window and exactly 0 outside it.
    ClampedLog(NodeId),
    /// Identity forward, blocks gradient flow backward.
    StopGrad(NodeId),
    /// Sum of all entries, producing a `[1]` scalar.
    SumAll(NodeId),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Var { .. } => "var",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::ClampedLog(_) => "clamped_log",
            Op::StopGrad(_) => "stop_grad",
            Op::SumAll(_) => "sum_all",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Immutable computation graph. Construct with [`TapeBuilder`].
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    vars: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

/// Incrementally builds a [`Tape`], inferring and checking shapes as nodes
/// are appended so shape errors surface at graph-construction time.
#[derive(Debug, Default)]
pub struct TapeBuilder {
    nodes: Vec<Node>,
    vars: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl TapeBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape });
        id
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Named differentiable leaf (network parameters, probe perturbations).
    pub fn var(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.add_var(name, shape, true)
    }

    /// Named stop-gradient leaf (batch inputs, labels, loss weights).
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.add_var(name, shape, false)
    }

    fn add_var(&mut self, name: &str, shape: &[usize], requires_grad: bool) -> Result<NodeId> {
        if self.vars.contains_key(name) {
            return Err(Error::invalid("tape var", format!("duplicate leaf `{name}`")));
        }
        let id = self.push(
            Op::Var {
                name: name.to_string(),
                requires_grad,
            },
            shape.to_vec(),
        );
        self.vars.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Const(t), shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape("add", self.shape_of(a), self.shape_of(b)));
        }
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.shape_of(x).to_vec();
        let bs = self.shape_of(bias).to_vec();
        if xs.len() != 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::shape("add_bias", &xs, &bs));
        }
        Ok(self.push(Op::AddBias(x, bias), xs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape("mul", self.shape_of(a), self.shape_of(b)));
        }
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Scale(x, c), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::LeakyRelu(x, slope), shape)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Softmax(x), shape)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::LogSoftmax(x), shape)
    }

    pub fn clamped_log(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::ClampedLog(x), shape)
    }

    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::StopGrad(x), shape)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumAll(x), vec![1])
    }

    /// Register `node` as a named output of the finished tape.
    pub fn output(&mut self, name: &str, node: NodeId) {
        self.outputs.insert(name.to_string(), node);
    }

    pub fn finish(self) -> Tape {
        Tape {
            nodes: self.nodes,
            vars: self.vars,
            outputs: self.outputs,
        }
    }
}

/// Values computed by one forward pass over a tape. Kept separate from the
/// tape so concurrent executions never share mutable state.
#[derive(Debug)]
pub struct Execution {
    values: Vec<Tensor>,
}

impl Execution {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }
}

/// Leaf bindings for one forward pass, keyed by variable name.
#[derive(Debug, Default, Clone)]
pub struct Bindings<'a> {
    map: BTreeMap<&'a str, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: &'a str, value: &'a Tensor) -> &mut Self {
        self.map.insert(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

impl Tape {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn output_node(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn output_names(&self) -> impl Iterator<Item = &str> {
        self.outputs.keys().map(|s| s.as_str())
    }

    pub fn var_node(&self, name: &str) -> Option<NodeId> {
        self.vars.get(name).copied()
    }

    pub fn var_names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    fn ctx(&self, id: NodeId) -> String {
        format!("node {id} ({})", self.nodes[id].op.kind())
    }

    /// Evaluate every node given leaf bindings. Deterministic: replaying with
    /// identical inputs reproduces identical values bit for bit.
    pub fn forward(&self, bindings: &Bindings) -> Result<Execution> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let out = match &node.op {
                Op::Var { name, .. } => {
                    let t = bindings.get(name).ok_or_else(|| {
                        Error::invalid("tape forward", format!("missing binding for leaf `{name}`"))
                    })?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::shape(
                            format!("leaf `{name}`"),
                            &node.shape,
                            t.shape(),
                        ));
                    }
                    t.clone()
                }
                Op::Const(t) => t.clone(),
                Op::Add(a, b) => {
                    let (va, vb) = (&values[*a], &values[*b]);
                    let mut out = va.clone();
                    for (o, &x) in out.data_mut().iter_mut().zip(vb.data()) {
                        *o += x;
                    }
                    out
                }
                Op::AddBias(x, b) => {
                    let (vx, vb) = (&values[*x], &values[*b]);
                    let (n, m) = (vx.shape()[0], vx.shape()[1]);
                    let mut out = Tensor::zeros(vec![n, m]);
                    add_bias_into(n, m, vx.data(), vb.data(), out.data_mut());
                    out
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&values[*a], &values[*b]);
                    let mut out = va.clone();
                    for (o, &x) in out.data_mut().iter_mut().zip(vb.data()) {
                        *o *= x;
                    }
                    out
                }
                Op::Scale(x, c) => {
                    let mut out = values[*x].clone();
                    for o in out.data_mut() {
                        *o *= c;
                    }
                    out
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&values[*a], &values[*b]);
                    let (n, k) = (va.shape()[0], va.shape()[1]);
                    let m = vb.shape()[1];
                    let mut out = Tensor::zeros(vec![n, m]);
                    matmul_into(n, k, m, va.data(), vb.data(), out.data_mut());
                    out
                }
                Op::LeakyRelu(x, slope) => {
                    let vx = &values[*x];
                    let mut out = Tensor::zeros(vx.shape().to_vec());
                    leaky_relu_into(vx.data(), *slope, out.data_mut());
                    out
                }
                Op::Softmax(x) => {
                    let vx = &values[*x];
                    let (n, m) = (vx.rows(), vx.cols());
                    let mut out = Tensor::zeros(vx.shape().to_vec());
                    softmax_rows_into(n, m, vx.data(), out.data_mut());
                    out
                }
                Op::LogSoftmax(x) => {
                    let vx = &values[*x];
                    let (n, m) = (vx.rows(), vx.cols());
                    let mut out = Tensor::zeros(vx.shape().to_vec());
                    for i in 0..n {
                        let row = &vx.data()[i * m..(i + 1) * m];
                        let o = &mut out.data_mut()[i * m..(i + 1) * m];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
                        for (ov, &v) in o.iter_mut().zip(row) {
                            *ov = v - mx - lse;
                        }
                    }
                    out
                }
                Op::ClampedLog(x) => {
                    let vx = &values[*x];
                    let mut out = Tensor::zeros(vx.shape().to_vec());
                    for (o, &v) in out.data_mut().iter_mut().zip(vx.data()) {
                        *o = v.clamp(EPS_LOG, 1.0).ln();
                    }
                    out
                }
                Op::StopGrad(x) => values[*x].clone(),
                Op::SumAll(x) => Tensor::scalar(values[*x].data().iter().sum()),
            };
            if !out.all_finite() {
                return Err(Error::NonFinite {
                    context: self.ctx(id),
                });
            }
            values.push(out);
        }
        Ok(Execution { values })
    }

    /// Reverse sweep from a scalar `root`, returning one gradient tensor per
    /// named leaf. Stop-gradient leaves receive an exact-zero gradient.
    pub fn backward(&self, exec: &Execution, root: NodeId) -> Result<BTreeMap<String, Tensor>> {
        if !exec.values[root].is_scalar() {
            return Err(Error::invalid(
                "tape backward",
                format!("root {} is not scalar: shape {:?}", root, self.nodes[root].shape),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[root] = Some(Tensor::scalar(1.0));

        for id in (0..=root).rev() {
            let Some(grad) = adj[id].take() else { continue };
            let g = grad.data();
            match &self.nodes[id].op {
                Op::Var { .. } | Op::Const(_) => {
                    adj[id] = Some(grad); // keep for collection below
                    continue;
                }
                Op::Add(a, b) => {
                    self.acc(&mut adj, *a, g.to_vec());
                    self.acc(&mut adj, *b, g.to_vec());
                }
                Op::AddBias(x, b) => {
                    let (n, m) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                    self.acc(&mut adj, *x, g.to_vec());
                    let mut db = vec![0.0; m];
                    for i in 0..n {
                        for (o, &gv) in db.iter_mut().zip(&g[i * m..(i + 1) * m]) {
                            *o += gv;
                        }
                    }
                    self.acc(&mut adj, *b, db);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&exec.values[*a], &exec.values[*b]);
                    let da = g.iter().zip(vb.data()).map(|(&gv, &x)| gv * x).collect();
                    let db = g.iter().zip(va.data()).map(|(&gv, &x)| gv * x).collect();
                    self.acc(&mut adj, *a, da);
                    self.acc(&mut adj, *b, db);
                }
                Op::Scale(x, c) => {
                    let dx = g.iter().map(|&gv| gv * c).collect();
                    self.acc(&mut adj, *x, dx);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&exec.values[*a], &exec.values[*b]);
                    let (n, k) = (va.shape()[0], va.shape()[1]);
                    let m = vb.shape()[1];
                    let mut da = vec![0.0; n * k];
                    matmul_bt_acc(n, m, k, g, vb.data(), &mut da);
                    let mut db = vec![0.0; k * m];
                    matmul_at_acc(n, k, m, va.data(), g, &mut db);
                    self.acc(&mut adj, *a, da);
                    self.acc(&mut adj, *b, db);
                }
                Op::LeakyRelu(x, slope) => {
                    let vx = &exec.values[*x];
                    let dx = g
                        .iter()
                        .zip(vx.data())
                        .map(|(&gv, &v)| if v > 0.0 { gv } else { gv * slope })
                        .collect();
                    self.acc(&mut adj, *x, dx);
                }
                Op::Softmax(x) => {
                    // dx_row = y (.) (g_row - <g_row, y_row>)
                    let y = &exec.values[id];
                    let (n, m) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; n * m];
                    for i in 0..n {
                        let yr = &y.data()[i * m..(i + 1) * m];
                        let gr = &g[i * m..(i + 1) * m];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yv), &gv) in dx[i * m..(i + 1) * m].iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    self.acc(&mut adj, *x, dx);
                }
                Op::LogSoftmax(x) => {
                    // dx = g - softmax(x) .* rowsum(g), softmax recovered as
                    // exp of the stored output.
                    let y = &exec.values[id];
                    let (n, m) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; n * m];
                    for i in 0..n {
                        let yr = &y.data()[i * m..(i + 1) * m];
                        let gr = &g[i * m..(i + 1) * m];
                        let gsum: f64 = gr.iter().sum();
                        for ((o, &yv), &gv) in dx[i * m..(i + 1) * m].iter_mut().zip(yr).zip(gr) {
                            *o = gv - yv.exp() * gsum;
                        }
                    }
                    self.acc(&mut adj, *x, dx);
                }
                Op::ClampedLog(x) => {
                    let vx = &exec.values[*x];
                    let dx = g
                        .iter()
                        .zip(vx.data())
                        .map(|(&gv, &v)| if v < EPS_LOG || v > 1.0 { 0.0 } else { gv / v })
                        .collect();
                    self.acc(&mut adj, *x, dx);
                }
                Op::StopGrad(_) => {}
                Op::SumAll(x) => {
                    let numel = exec.values[*x].numel();
                    self.acc(&mut adj, *x, vec![g[0]; numel]);
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (name, &id) in &self.vars {
            let g = match &self.nodes[id].op {
                Op::Var { requires_grad, .. } if *requires_grad => match adj[id].take() {
                    Some(t) => t,
                    None => Tensor::zeros(self.nodes[id].shape.clone()),
                },
                _ => Tensor::zeros(self.nodes[id].shape.clone()),
            };
            grads.insert(name.clone(), g);
        }
        Ok(grads)
    }

    fn acc(&self, adj: &mut [Option<Tensor>], target: NodeId, contribution: Vec<f64>) {
        match &mut adj[target] {
            Some(t) => {
                for (o, v) in t.data_mut().iter_mut().zip(contribution) {
                    *o += v;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(
                    self.nodes[target].shape.clone(),
                    contribution,
                ));
            }
        }
    }

    /// Compare analytic gradients against central finite differences of the
    /// scalar at `root`. Returns the maximum over the selected leaves'
    /// coordinates of `|analytic - fd| / max(1, |analytic|)`.
    pub fn grad_check(
        &self,
        bindings: &Bindings,
        root: NodeId,
        step: f64,
        select: &dyn Fn(&str) -> bool,
    ) -> Result<f64> {
        if step <= 0.0 {
            return Err(Error::invalid("grad_check", "step must be positive"));
        }
        let exec = self.forward(bindings)?;
        let analytic = self.backward(&exec, root)?;

        // Owned, mutable copies of every binding so single coordinates can be
        // perturbed in place.
        let mut owned: BTreeMap<String, Tensor> = BTreeMap::new();
        for name in self.vars.keys() {
            let t = bindings.get(name).ok_or_else(|| {
                Error::invalid("grad_check", format!("missing binding for leaf `{name}`"))
            })?;
            owned.insert(name.clone(), t.clone());
        }

        let eval = |owned: &BTreeMap<String, Tensor>| -> Result<f64> {
            let mut b = Bindings::new();
            for (name, t) in owned {
                b.bind(name, t);
            }
            Ok(self.forward(&b)?.value(root).item())
        };

        let mut max_err: f64 = 0.0;
        let names: Vec<String> = self
            .vars
            .keys()
            .filter(|n| select(n))
            .cloned()
            .collect();
        for name in names {
            let n = owned[&name].numel();
            for i in 0..n {
                let orig = owned[&name].data()[i];
                owned.get_mut(&name).unwrap().data_mut()[i] = orig + step;
                let f_plus = eval(&owned)?;
                owned.get_mut(&name).unwrap().data_mut()[i] = orig - step;
                let f_minus = eval(&owned)?;
                owned.get_mut(&name).unwrap().data_mut()[i] = orig;
                let fd = (f_plus - f_minus) / (2.0 * step);
                let an = analytic[&name].data()[i];
                let err = (an - fd).abs() / an.abs().max(1.0);
                max_err = max_err.max(err);
            }
        }
        Ok(max_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn square_tape() -> (Tape, NodeId) {
        let mut tb = TapeBuilder::new();
        let x = tb.var("x", &[1]).unwrap();
        let y = tb.mul(x, x).unwrap();
        tb.output("y", y);
        (tb.finish(), y)
    }

    #[test]
    fn forward_square() {
        let (tape, y) = square_tape();
        let x = Tensor::scalar(3.0);
        let mut b = Bindings::new();
        b.bind("x", &x);
        let exec = tape.forward(&b).unwrap();
        assert_eq!(exec.value(y).item(), 9.0);
    }

    #[test]
    fn backward_square() {
        let (tape, y) = square_tape();
        let x = Tensor::scalar(3.0);
        let mut b = Bindings::new();
        b.bind("x", &x);
        let exec = tape.forward(&b).unwrap();
        let grads = tape.backward(&exec, y).unwrap();
        assert_eq!(grads["x"].item(), 6.0);
    }

    #[test]
    fn softmax_of_zero_vector_is_uniform() {
        let mut tb = TapeBuilder::new();
        let x = tb.input("x", &[1, 4]).unwrap();
        let s = tb.softmax(x);
        tb.output("s", s);
        let tape = tb.finish();
        let x = Tensor::zeros(vec![1, 4]);
        let mut b = Bindings::new();
        b.bind("x", &x);
        let exec = tape.forward(&b).unwrap();
        for &v in exec.value(s).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let mut tb = TapeBuilder::new();
        let eye = tb.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = tb.input("a", &[2, 2]).unwrap();
        let c = tb.matmul(eye, a).unwrap();
        tb.output("c", c);
        let tape = tb.finish();
        let a = Tensor::matrix(2, 2, vec![4.0, -2.0, 0.5, 9.0]).unwrap();
        let mut b = Bindings::new();
        b.bind("a", &a);
        let exec = tape.forward(&b).unwrap();
        assert_eq!(exec.value(c).data(), a.data());
    }

    #[test]
    fn cross_entropy_grad_is_probs_minus_target() {
        // CE(softmax(logits), y) gradient wrt logits equals p - y.
        let k = 5;
        let mut tb = TapeBuilder::new();
        let logits = tb.var("logits", &[1, k]).unwrap();
        let p = tb.softmax(logits);
        let logp = tb.clamped_log(p);
        let y = tb.input("y", &[1, k]).unwrap();
        let prod = tb.mul(y, logp).unwrap();
        let s = tb.sum_all(prod);
        let loss = tb.scale(s, -1.0);
        tb.output("loss", loss);
        let tape = tb.finish();

        let logits_v = Tensor::matrix(1, k, vec![0.3, -1.2, 2.0, 0.0, 0.7]).unwrap();
        let mut y_v = Tensor::zeros(vec![1, k]);
        y_v.data_mut()[2] = 1.0;
        let mut b = Bindings::new();
        b.bind("logits", &logits_v);
        b.bind("y", &y_v);
        let exec = tape.forward(&b).unwrap();
        let grads = tape.backward(&exec, loss).unwrap();
        let probs = exec.value(p);
        for i in 0..k {
            let expected = probs.data()[i] - y_v.data()[i];
            assert!((grads["logits"].data()[i] - expected).abs() < 1e-12);
        }
    }

    /// A small 3-layer MLP loss; finite differences are the oracle.
    fn mlp_tape(d: usize, h: usize, k: usize, n: usize, slope: f64) -> (Tape, NodeId) {
        let mut tb = TapeBuilder::new();
        let x = tb.input("x", &[n, d]).unwrap();
        let y = tb.input("y", &[n, k]).unwrap();
        let w0 = tb.var("w0", &[d, h]).unwrap();
        let b0 = tb.var("b0", &[h]).unwrap();
        let w1 = tb.var("w1", &[h, h]).unwrap();
        let b1 = tb.var("b1", &[h]).unwrap();
        let w2 = tb.var("w2", &[h, k]).unwrap();
        let b2 = tb.var("b2", &[k]).unwrap();
        let mut z = tb.matmul(x, w0).unwrap();
        z = tb.add_bias(z, b0).unwrap();
        z = tb.leaky_relu(z, slope);
        z = tb.matmul(z, w1).unwrap();
        z = tb.add_bias(z, b1).unwrap();
        z = tb.leaky_relu(z, slope);
        z = tb.matmul(z, w2).unwrap();
        z = tb.add_bias(z, b2).unwrap();
        let p = tb.softmax(z);
        let logp = tb.clamped_log(p);
        let prod = tb.mul(y, logp).unwrap();
        let s = tb.sum_all(prod);
        let loss = tb.scale(s, -1.0 / n as f64);
        tb.output("loss", loss);
        (tb.finish(), loss)
    }

    fn deterministic_fill(t: &mut Tensor, seed: u64) {
        // Cheap LCG so the test needs no RNG dependency.
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        for v in t.data_mut() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let (d, h, k, n) = (3, 6, 3, 4);
        let (tape, loss) = mlp_tape(d, h, k, n, 0.1);
        let mut vals: Vec<(String, Tensor)> = Vec::new();
        for (i, (name, shape)) in [
            ("x", vec![n, d]),
            ("w0", vec![d, h]),
            ("b0", vec![h]),
            ("w1", vec![h, h]),
            ("b1", vec![h]),
            ("w2", vec![h, k]),
            ("b2", vec![k]),
        ]
        .into_iter()
        .enumerate()
        {
            let mut t = Tensor::zeros(shape);
            deterministic_fill(&mut t, 1000 + i as u64);
            vals.push((name.to_string(), t));
        }
        let mut y = Tensor::zeros(vec![n, k]);
        for i in 0..n {
            y.data_mut()[i * k + i % k] = 1.0;
        }
        let mut b = Bindings::new();
        for (name, t) in &vals {
            b.bind(name, t);
        }
        b.bind("y", &y);
        let err = tape
            .grad_check(&b, loss, 1e-5, &|name| name.starts_with('w') || name.starts_with('b'))
            .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn linear_layer_grad_check_is_tight() {
        // Purely linear scalar output: central differences are exact up to
        // rounding on quadratics.
        let (n, d) = (3, 4);
        let mut tb = TapeBuilder::new();
        let x = tb.input("x", &[n, d]).unwrap();
        let w = tb.var("w", &[d, 1]).unwrap();
        let z = tb.matmul(x, w).unwrap();
        let loss = tb.sum_all(z);
        tb.output("loss", loss);
        let tape = tb.finish();

        let mut xv = Tensor::zeros(vec![n, d]);
        deterministic_fill(&mut xv, 7);
        let mut wv = Tensor::zeros(vec![d, 1]);
        deterministic_fill(&mut wv, 8);
        let mut b = Bindings::new();
        b.bind("x", &xv);
        b.bind("w", &wv);
        let err = tape.grad_check(&b, loss, 1e-5, &|n| n == "w").unwrap();
        assert!(err < 1e-7, "max relative error {err}");
    }

    #[test]
    fn stop_grad_leaf_gets_zero_gradient() {
        let mut tb = TapeBuilder::new();
        let x = tb.var("x", &[1]).unwrap();
        let c = tb.input("c", &[1]).unwrap(); // stop-gradient leaf
        let prod = tb.mul(x, c).unwrap();
        let loss = tb.sum_all(prod);
        tb.output("loss", loss);
        let tape = tb.finish();
        let xv = Tensor::scalar(2.0);
        let cv = Tensor::scalar(5.0);
        let mut b = Bindings::new();
        b.bind("x", &xv);
        b.bind("c", &cv);
        let exec = tape.forward(&b).unwrap();
        let grads = tape.backward(&exec, loss).unwrap();
        assert_eq!(grads["c"].item(), 0.0);
        assert_eq!(grads["x"].item(), 5.0);
    }

    #[test]
    fn stop_grad_op_blocks_flow() {
        let mut tb = TapeBuilder::new();
        let x = tb.var("x", &[1]).unwrap();
        let s = tb.stop_grad(x);
        let prod = tb.mul(s, x).unwrap(); // d/dx (sg(x) * x) = sg(x)
        let loss = tb.sum_all(prod);
        tb.output("loss", loss);
        let tape = tb.finish();
        let xv = Tensor::scalar(3.0);
        let mut b = Bindings::new();
        b.bind("x", &xv);
        let exec = tape.forward(&b).unwrap();
        let grads = tape.backward(&exec, loss).unwrap();
        assert_eq!(grads["x"].item(), 3.0);
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let (tape, loss) = mlp_tape(3, 5, 3, 2, 0.1);
        let mut binds: Vec<(String, Tensor)> = Vec::new();
        for (name, shape) in [
            ("x", vec![2usize, 3]),
            ("y", vec![2, 3]),
            ("w0", vec![3, 5]),
            ("b0", vec![5]),
            ("w1", vec![5, 5]),
            ("b1", vec![5]),
            ("w2", vec![5, 3]),
            ("b2", vec![3]),
        ] {
            let mut t = Tensor::zeros(shape);
            deterministic_fill(&mut t, name.len() as u64 * 31);
            binds.push((name.to_string(), t));
        }
        let mut b = Bindings::new();
        for (name, t) in &binds {
            b.bind(name, t);
        }
        let v1 = tape.forward(&b).unwrap().value(loss).item();
        let v2 = tape.forward(&b).unwrap().value(loss).item();
        assert_eq!(v1.to_bits(), v2.to_bits());
    }

    #[test]
    fn missing_binding_names_the_leaf() {
        let (tape, _) = square_tape();
        let b = Bindings::new();
        let err = tape.forward(&b).unwrap_err();
        assert!(err.to_string().contains("`x`"), "{err}");
    }

    #[test]
    fn shape_mismatch_names_the_leaf() {
        let (tape, _) = square_tape();
        let x = Tensor::zeros(vec![2]);
        let mut b = Bindings::new();
        b.bind("x", &x);
        let err = tape.forward(&b).unwrap_err();
        assert!(err.to_string().contains("`x`"), "{err}");
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tb = TapeBuilder::new();
        let x = tb.var("x", &[2]).unwrap();
        let y = tb.scale(x, 2.0);
        tb.output("y", y);
        let tape = tb.finish();
        let xv = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut b = Bindings::new();
        b.bind("x", &xv);
        let exec = tape.forward(&b).unwrap();
        assert!(tape.backward(&exec, y).is_err());
    }
}
