//! Reverse-mode autodiff on an index-based arena.
//!
//! Every operation appends a node to the tape, so node indices are already a
//! topological order of the computation graph. `backward` walks indices in
//! reverse and accumulates gradients into each node's `grad` buffer.
//!
//! Supported ranks are 1 and 2. The only broadcast is bias-add
//! (`[m,n] + [n]`); everything else requires exact shape agreement.

use crate::error::NumericsError;
use crate::tensor::Tensor;

/// Handle into a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul,
    Add,
    BiasAdd,
    Sub,
    Mul,
    Scale(f64),
    ScaleBy,
    Concat,
    StackRows,
    Slice { start: usize },
    Sigmoid,
    Tanh,
    Relu,
    Cos,
    Log,
    NegLogSigmoid,
    Softmax,
    MaskedSoftmax,
    Sum,
    Mean,
    SumAxis(usize),
    MeanAxis(usize),
    Dot,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

type OpResult = Result<Var, NumericsError>;

fn shape_err(op: &'static str, details: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, details }
}

fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    /// Gradient buffer of `v` after `backward`; `None` if `v` did not
    /// participate in the loss or does not require gradients.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Non-trainable input. Values are expected to be finite already; this is
    /// checked in debug builds only.
    pub fn constant(&mut self, value: Tensor) -> Var {
        debug_assert!(value.is_finite(), "non-finite constant pushed to tape");
        self.push(Op::Constant, vec![], value, false)
    }

    /// Trainable input; receives a gradient buffer during `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        debug_assert!(value.is_finite(), "non-finite leaf pushed to tape");
        self.push(Op::Leaf, vec![], value, true)
    }

    /// Register honoring the tensor's own `requires_grad` flag.
    pub fn register(&mut self, value: &Tensor) -> Var {
        if value.requires_grad() {
            self.leaf(value.clone())
        } else {
            self.constant(value.clone())
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, inputs, value, grad: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        op_name: &'static str,
        op: Op,
        inputs: Vec<Var>,
        value: Tensor,
    ) -> OpResult {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, inputs, value, requires_grad))
    }

    /// Matrix product. Accepts `[m,k]x[k,n] -> [m,n]`, `[m,k]x[k] -> [m]`
    /// and `[k]x[k,n] -> [n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> OpResult {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (out_shape, m, k, n) = match (av.ndim(), bv.ndim()) {
            (2, 2) => {
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let (k2, n) = (bv.shape()[0], bv.shape()[1]);
                if k != k2 {
                    return Err(shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
                }
                (vec![m, n], m, k, n)
            }
            (2, 1) => {
                let (m, k) = (av.shape()[0], av.shape()[1]);
                if k != bv.shape()[0] {
                    return Err(shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
                }
                (vec![m], m, k, 1)
            }
            (1, 2) => {
                let k = av.shape()[0];
                let (k2, n) = (bv.shape()[0], bv.shape()[1]);
                if k != k2 {
                    return Err(shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
                }
                (vec![n], 1, k, n)
            }
            _ => {
                return Err(shape_err(
                    "matmul",
                    format!("unsupported ranks {:?} x {:?}", av.shape(), bv.shape()),
                ))
            }
        };
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            for l in 0..k {
                let aval = ad[i * k + l];
                if aval == 0.0 {
                    continue;
                }
                let brow = &bd[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aval * brow[j];
                }
            }
        }
        self.push_checked("matmul", Op::MatMul, vec![a, b], Tensor::new(out_shape, out))
    }

    /// Elementwise add for equal shapes, or bias add `[m,n] + [n]`.
    pub fn add(&mut self, a: Var, b: Var) -> OpResult {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
            let value = Tensor::new(av.shape().to_vec(), data);
            return self.push_checked("add", Op::Add, vec![a, b], value);
        }
        if av.ndim() == 2 && bv.ndim() == 1 && av.shape()[1] == bv.shape()[0] {
            let (m, n) = (av.shape()[0], av.shape()[1]);
            let mut data = av.data().to_vec();
            for i in 0..m {
                for j in 0..n {
                    data[i * n + j] += bv.data()[j];
                }
            }
            let value = Tensor::matrix(m, n, data);
            return self.push_checked("add", Op::BiasAdd, vec![a, b], value);
        }
        Err(shape_err("add", format!("{:?} + {:?}", av.shape(), bv.shape())))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> OpResult {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err("sub", format!("{:?} - {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(av.shape().to_vec(), data);
        self.push_checked("sub", Op::Sub, vec![a, b], value)
    }

    /// Elementwise (Hadamard) product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> OpResult {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data);
        self.push_checked("mul", Op::Mul, vec![a, b], value)
    }

    /// Multiply by a compile-time-known scalar.
    pub fn scale(&mut self, a: Var, factor: f64) -> OpResult {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(av.shape().to_vec(), data);
        self.push_checked("scale", Op::Scale(factor), vec![a], value)
    }

    /// Multiply by a scalar tape value (shape `[1]`).
    pub fn scale_by(&mut self, a: Var, s: Var) -> OpResult {
        let sv = &self.nodes[s.0].value;
        if sv.len() != 1 {
            return Err(shape_err("scale_by", format!("scalar has shape {:?}", sv.shape())));
        }
        let factor = sv.item();
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(av.shape().to_vec(), data);
        self.push_checked("scale_by", Op::ScaleBy, vec![a, s], value)
    }

    /// Concatenate rank-1 tensors in order.
    pub fn concat(&mut self, parts: &[Var]) -> OpResult {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".to_string()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.ndim() != 1 {
                return Err(shape_err("concat", format!("rank-{} input", pv.ndim())));
            }
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::vector(data);
        self.push_checked("concat", Op::Concat, parts.to_vec(), value)
    }

    /// Stack rank-1 tensors of equal length into a `[rows, cols]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> OpResult {
        if rows.is_empty() {
            return Err(shape_err("stack_rows", "no inputs".to_string()));
        }
        let cols = self.nodes[rows[0].0].value.len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let rv = &self.nodes[r.0].value;
            if rv.ndim() != 1 || rv.len() != cols {
                return Err(shape_err(
                    "stack_rows",
                    format!("expected [{}], got {:?}", cols, rv.shape()),
                ));
            }
            data.extend_from_slice(rv.data());
        }
        let value = Tensor::matrix(rows.len(), cols, data);
        self.push_checked("stack_rows", Op::StackRows, rows.to_vec(), value)
    }

    /// Contiguous sub-vector `[start, start+len)` of a rank-1 tensor.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> OpResult {
        let av = &self.nodes[a.0].value;
        if av.ndim() != 1 || start + len > av.len() || len == 0 {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) of shape {:?}", start + len, av.shape()),
            ));
        }
        let value = Tensor::vector(av.data()[start..start + len].to_vec());
        self.push_checked("slice", Op::Slice { start }, vec![a], value)
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        op: Op,
        a: Var,
        f: impl Fn(f64) -> f64,
    ) -> OpResult {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data);
        self.push_checked(op_name, op, vec![a], value)
    }

    pub fn sigmoid(&mut self, a: Var) -> OpResult {
        self.unary("sigmoid", Op::Sigmoid, a, sigmoid_scalar)
    }

    pub fn tanh(&mut self, a: Var) -> OpResult {
        self.unary("tanh", Op::Tanh, a, f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> OpResult {
        self.unary("relu", Op::Relu, a, |x| x.max(0.0))
    }

    pub fn cos(&mut self, a: Var) -> OpResult {
        self.unary("cos", Op::Cos, a, f64::cos)
    }

    /// Natural log. Non-positive inputs surface as a non-finite error.
    pub fn log(&mut self, a: Var) -> OpResult {
        self.unary("log", Op::Log, a, f64::ln)
    }

    /// `-log(sigmoid(x))`, computed as `softplus(-x)` for stability.
    pub fn neg_log_sigmoid(&mut self, a: Var) -> OpResult {
        self.unary("neg_log_sigmoid", Op::NegLogSigmoid, a, |x| {
            if x >= 0.0 {
                (-x).exp().ln_1p()
            } else {
                -x + x.exp().ln_1p()
            }
        })
    }

    pub fn softmax(&mut self, a: Var) -> OpResult {
        let av = &self.nodes[a.0].value;
        if av.ndim() != 1 || av.is_empty() {
            return Err(shape_err("softmax", format!("shape {:?}", av.shape())));
        }
        let value = Tensor::vector(softmax_forward(av.data(), None));
        self.push_checked("softmax", Op::Softmax, vec![a], value)
    }

    /// Softmax over entries where `mask` is true; masked entries get weight
    /// exactly 0 (treated as -inf logits). At least one entry must be live.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> OpResult {
        let av = &self.nodes[a.0].value;
        if av.ndim() != 1 || av.len() != mask.len() {
            return Err(shape_err(
                "masked_softmax",
                format!("shape {:?} with mask length {}", av.shape(), mask.len()),
            ));
        }
        if !mask.iter().any(|&m| m) {
            return Err(NumericsError::Invalid {
                op: "masked_softmax",
                details: "all entries masked".to_string(),
            });
        }
        let value = Tensor::vector(softmax_forward(av.data(), Some(mask)));
        self.push_checked("masked_softmax", Op::MaskedSoftmax, vec![a], value)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> OpResult {
        let total = self.nodes[a.0].value.data().iter().sum();
        self.push_checked("sum", Op::Sum, vec![a], Tensor::scalar(total))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> OpResult {
        let av = &self.nodes[a.0].value;
        if av.is_empty() {
            return Err(shape_err("mean", "empty tensor".to_string()));
        }
        let total: f64 = av.data().iter().sum();
        let value = Tensor::scalar(total / av.len() as f64);
        self.push_checked("mean", Op::Mean, vec![a], value)
    }

    /// Sum a rank-2 tensor along `axis` (0 collapses rows, 1 collapses cols).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> OpResult {
        let value = self.axis_reduce(a, axis, "sum_axis", false)?;
        self.push_checked("sum_axis", Op::SumAxis(axis), vec![a], value)
    }

    /// Mean along `axis` of a rank-2 tensor.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> OpResult {
        let value = self.axis_reduce(a, axis, "mean_axis", true)?;
        self.push_checked("mean_axis", Op::MeanAxis(axis), vec![a], value)
    }

    fn axis_reduce(
        &self,
        a: Var,
        axis: usize,
        op: &'static str,
        mean: bool,
    ) -> Result<Tensor, NumericsError> {
        let av = &self.nodes[a.0].value;
        if av.ndim() != 2 || axis > 1 {
            return Err(shape_err(op, format!("axis {axis} of shape {:?}", av.shape())));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let d = av.data();
        let out = if axis == 0 {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += d[i * n + j];
                }
            }
            if mean {
                out.iter_mut().for_each(|v| *v /= m as f64);
            }
            out
        } else {
            let mut out = vec![0.0; m];
            for i in 0..m {
                out[i] = d[i * n..(i + 1) * n].iter().sum();
            }
            if mean {
                out.iter_mut().for_each(|v| *v /= n as f64);
            }
            out
        };
        Ok(Tensor::vector(out))
    }

    /// Inner product of two equal-length rank-1 tensors, shape `[1]`.
    pub fn dot(&mut self, a: Var, b: Var) -> OpResult {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.ndim() != 1 || av.shape() != bv.shape() {
            return Err(shape_err("dot", format!("{:?} . {:?}", av.shape(), bv.shape())));
        }
        let total = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        self.push_checked("dot", Op::Dot, vec![a, b], Tensor::scalar(total))
    }

    /// Reverse pass from a scalar loss. Resets all gradient buffers first, so
    /// calling it twice yields identical results.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NumericsError::NotScalar(self.nodes[loss.0].value.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // loss does not depend on any trainable leaf
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &rest[0];
            if !node.requires_grad || node.grad.is_none() {
                continue;
            }
            let g = node.grad.as_ref().expect("checked above");
            backprop_node(node, g, before)?;
        }
        Ok(())
    }
}

fn softmax_forward(logits: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let live = |i: usize| mask.map_or(true, |m| m[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &x) in logits.iter().enumerate() {
        if live(i) && x > max {
            max = x;
        }
    }
    let mut out = vec![0.0; logits.len()];
    let mut denom = 0.0;
    for (i, &x) in logits.iter().enumerate() {
        if live(i) {
            let e = (x - max).exp();
            out[i] = e;
            denom += e;
        }
    }
    for v in &mut out {
        *v /= denom;
    }
    out
}

/// Gradient slot of `v`, allocated on first touch; `None` for non-trainable
/// nodes so constants never accumulate.
fn grad_slot(before: &mut [Node], v: Var) -> Option<&mut Vec<f64>> {
    let node = &mut before[v.index()];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(node.grad.get_or_insert_with(|| vec![0.0; len]))
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop_node(node: &Node, g: &[f64], before: &mut [Node]) -> Result<(), NumericsError> {
    let inputs = &node.inputs;
    let y = &node.value;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let av = &before[a.index()].value;
            let bv = &before[b.index()].value;
            // Treat all three accepted rank combinations as [m,k]x[k,n]:
            // a rank-1 left operand is a row, a rank-1 right operand a column.
            let (m, k, n) = match (av.ndim(), bv.ndim()) {
                (2, 2) => (av.shape()[0], av.shape()[1], bv.shape()[1]),
                (2, 1) => (av.shape()[0], av.shape()[1], 1),
                (1, 2) => (1, av.shape()[0], bv.shape()[1]),
                _ => unreachable!("matmul ranks validated during forward"),
            };
            let needs_a = before[a.index()].requires_grad;
            let needs_b = before[b.index()].requires_grad;
            let da = needs_a.then(|| {
                let mut da = vec![0.0; m * k];
                let bd = bv.data();
                for i in 0..m {
                    for l in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * bd[l * n + j];
                        }
                        da[i * k + l] = acc;
                    }
                }
                da
            });
            let db = needs_b.then(|| {
                let mut db = vec![0.0; k * n];
                let ad = av.data();
                for i in 0..m {
                    for l in 0..k {
                        let aval = ad[i * k + l];
                        if aval == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[l * n + j] += aval * g[i * n + j];
                        }
                    }
                }
                db
            });
            if let Some(da) = da {
                axpy(grad_slot(before, a).expect("needs_a"), &da);
            }
            if let Some(db) = db {
                axpy(grad_slot(before, b).expect("needs_b"), &db);
            }
        }
        Op::Add => {
            for &v in inputs {
                if let Some(slot) = grad_slot(before, v) {
                    axpy(slot, g);
                }
            }
        }
        Op::BiasAdd => {
            let (a, b) = (inputs[0], inputs[1]);
            let n = before[b.index()].value.len();
            if let Some(slot) = grad_slot(before, a) {
                axpy(slot, g);
            }
            if let Some(slot) = grad_slot(before, b) {
                for (i, &gv) in g.iter().enumerate() {
                    slot[i % n] += gv;
                }
            }
        }
        Op::Sub => {
            let (a, b) = (inputs[0], inputs[1]);
            if let Some(slot) = grad_slot(before, a) {
                axpy(slot, g);
            }
            if let Some(slot) = grad_slot(before, b) {
                for (d, s) in slot.iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let bd = before[b.index()].value.data().to_vec();
            let ad = before[a.index()].value.data().to_vec();
            if let Some(slot) = grad_slot(before, a) {
                for i in 0..slot.len() {
                    slot[i] += g[i] * bd[i];
                }
            }
            if let Some(slot) = grad_slot(before, b) {
                for i in 0..slot.len() {
                    slot[i] += g[i] * ad[i];
                }
            }
        }
        Op::Scale(factor) => {
            if let Some(slot) = grad_slot(before, inputs[0]) {
                for (d, s) in slot.iter_mut().zip(g) {
                    *d += factor * s;
                }
            }
        }
        Op::ScaleBy => {
            let (a, s) = (inputs[0], inputs[1]);
            let factor = before[s.index()].value.item();
            let ad = before[a.index()].value.data().to_vec();
            if let Some(slot) = grad_slot(before, a) {
                for (d, gv) in slot.iter_mut().zip(g) {
                    *d += factor * gv;
                }
            }
            if let Some(slot) = grad_slot(before, s) {
                slot[0] += g.iter().zip(&ad).map(|(gv, av)| gv * av).sum::<f64>();
            }
        }
        Op::Concat => {
            let mut offset = 0;
            for &p in inputs {
                let len = before[p.index()].value.len();
                if let Some(slot) = grad_slot(before, p) {
                    axpy(slot, &g[offset..offset + len]);
                }
                offset += len;
            }
        }
        Op::StackRows => {
            let cols = y.cols();
            for (r, &p) in inputs.iter().enumerate() {
                if let Some(slot) = grad_slot(before, p) {
                    axpy(slot, &g[r * cols..(r + 1) * cols]);
                }
            }
        }
        Op::Slice { start } => {
            if let Some(slot) = grad_slot(before, inputs[0]) {
                axpy(&mut slot[*start..*start + g.len()], g);
            }
        }
        Op::Sigmoid => {
            let yd = y.data().to_vec();
            if let Some(slot) = grad_slot(before, inputs[0]) {
                for i in 0..slot.len() {
                    slot[i] += g[i] * yd[i] * (1.0 - yd[i]);
                }
            }
        }
        Op::Tanh => {
            let yd = y.data().to_vec();
            if let Some(slot) = grad_slot(before, inputs[0]) {
                for i in 0..slot.len() {
                    slot[i] += g[i] * (1.0 - yd[i] * yd[i]);
                }
            }
        }
        Op::Relu => {
            let xd = before[inputs[0].index()].value.data().to_vec();
            if let Some(slot) = grad_slot(before, inputs[0]) {
                for i in 0..slot.len() {
                    if xd[i] > 0.0 {
                        slot[i] += g[i];
                    }
                }
            }
        }
        Op::Cos => {
            let xd = before[inputs[0].index()].value.data().to_vec();
            if let Some(slot) = grad_slot(before, inputs[0]) {
                for i in 0..slot.len() {
                    slot[i] -= g[i] * xd[i].sin();
                }
            }
        }
        Op::Log => {
            let xd = before[inputs[0].index()].value.data().to_vec();
            if let Some(slot) = grad_slot(before, inputs[0]) {
                for i in 0..slot.len() {
                    slot[i] += g[i] / xd[i];
                }
            }
        }
        Op::NegLogSigmoid => {
            let xd = before[inputs[0].index()].value.data().to_vec();
            if let Some(slot) = grad_slot(before, inputs[0]) {
                for i in 0..slot.len() {
                    slot[i] += g[i] * (sigmoid_scalar(xd[i]) - 1.0);
                }
            }
        }
        Op::Softmax | Op::MaskedSoftmax => {
            // Masked entries have y = 0, so the shared formula zeroes them.
            let yd = y.data().to_vec();
            let inner: f64 = g.iter().zip(&yd).map(|(gv, yv)| gv * yv).sum();
            if let Some(slot) = grad_slot(before, inputs[0]) {
                for i in 0..slot.len() {
                    slot[i] += yd[i] * (g[i] - inner);
                }
            }
        }
        Op::Sum => {
            if let Some(slot) = grad_slot(before, inputs[0]) {
                for d in slot.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean => {
            let n = before[inputs[0].index()].value.len() as f64;
            if let Some(slot) = grad_slot(before, inputs[0]) {
                for d in slot.iter_mut() {
                    *d += g[0] / n;
                }
            }
        }
        Op::SumAxis(axis) | Op::MeanAxis(axis) => {
            let shape = before[inputs[0].index()].value.shape().to_vec();
            let (m, n) = (shape[0], shape[1]);
            let divisor = match node.op {
                Op::MeanAxis(0) => m as f64,
                Op::MeanAxis(1) => n as f64,
                _ => 1.0,
            };
            if let Some(slot) = grad_slot(before, inputs[0]) {
                for i in 0..m {
                    for j in 0..n {
                        let gv = if *axis == 0 { g[j] } else { g[i] };
                        slot[i * n + j] += gv / divisor;
                    }
                }
            }
        }
        Op::Dot => {
            let (a, b) = (inputs[0], inputs[1]);
            let ad = before[a.index()].value.data().to_vec();
            let bd = before[b.index()].value.data().to_vec();
            if let Some(slot) = grad_slot(before, a) {
                for i in 0..slot.len() {
                    slot[i] += g[0] * bd[i];
                }
            }
            if let Some(slot) = grad_slot(before, b) {
                for i in 0..slot.len() {
                    slot[i] += g[0] * ad[i];
                }
            }
        }
    }
    Ok(())
}
