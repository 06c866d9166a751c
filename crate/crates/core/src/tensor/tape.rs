use std::sync::atomic::{AtomicUsize, Ordering};

use super::Tensor;
use crate::error::{shape_err, Error, Result};

static NEXT_TAPE: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    idx: usize,
}

/// Local derivative of a custom operation.
///
/// Called with the upstream gradient, the input values and the output
/// value; returns one gradient buffer per input.
pub type BackwardFn = Box<dyn Fn(&[f64], &[&[f64]], &[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul { a: usize, b: usize, p: usize, q: usize, r: usize },
    Linear { x: usize, w: usize, b: usize, rows: usize, q: usize, r: usize },
    Relu(usize),
    Softmax(usize),
    Log(usize),
    ClampMin(usize, f64),
    Sum(usize),
    Mean(usize),
    L2NormSq(usize),
    Cosine(usize, usize),
    RowMean { x: usize, rows: usize, cols: usize },
    Stack(Vec<usize>),
    Select(usize, usize),
    Custom { inputs: Vec<usize>, backward: BackwardFn },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of a forward computation.
///
/// Nodes are appended in execution order, so every node's inputs precede
/// it. A tape supports exactly one backward pass.
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require gradients or is not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Usage("variable belongs to a different tape".into()));
        }
        Ok(v.idx)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Cosine(a, b) => self.rg(*a) || self.rg(*b),
            Op::Matmul { a, b, .. } => self.rg(*a) || self.rg(*b),
            Op::Linear { x, w, b, .. } => self.rg(*x) || self.rg(*w) || self.rg(*b),
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::Log(a)
            | Op::ClampMin(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::L2NormSq(a)
            | Op::Select(a, _)
            | Op::RowMean { x: a, .. } => self.rg(*a),
            Op::Stack(xs) | Op::Custom { inputs: xs, .. } => xs.iter().any(|&i| self.rg(i)),
        };
        self.nodes.push(Node { shape, value, requires_grad, op });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Records a copy of `t` as a leaf. The leaf tracks gradients iff the
    /// tensor does.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf);
        self.nodes[v.idx].requires_grad = t.requires_grad();
        v
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx].shape
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        match self.value(v) {
            [x] => Ok(*x),
            other => Err(Error::Usage(format!("expected a scalar, got {} values", other.len()))),
        }
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.idx];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shapes are consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    fn same_shape(&self, a: usize, b: usize, what: &str) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return shape_err(format!("{what}: shapes {:?} and {:?} differ", self.nodes[a].shape, self.nodes[b].shape));
        }
        Ok(())
    }

    fn matrix_dims(&self, i: usize, what: &str) -> Result<(usize, usize)> {
        match self.nodes[i].shape[..] {
            [r, c] => Ok((r, c)),
            _ => shape_err(format!("{what}: expected a matrix, got {:?}", self.nodes[i].shape)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(ia, ib, "add")?;
        let value = zip_map(&self.nodes[ia].value, &self.nodes[ib].value, |x, y| x + y);
        Ok(self.push(self.nodes[ia].shape.clone(), value, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(ia, ib, "sub")?;
        let value = zip_map(&self.nodes[ia].value, &self.nodes[ib].value, |x, y| x - y);
        Ok(self.push(self.nodes[ia].shape.clone(), value, Op::Sub(ia, ib)))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(ia, ib, "mul")?;
        let value = zip_map(&self.nodes[ia].value, &self.nodes[ib].value, |x, y| x * y);
        Ok(self.push(self.nodes[ia].shape.clone(), value, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.iter().map(|x| x * k).collect();
        Ok(self.push(self.nodes[ia].shape.clone(), value, Op::Scale(ia, k)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (p, q) = self.matrix_dims(ia, "matmul lhs")?;
        let (q2, r) = self.matrix_dims(ib, "matmul rhs")?;
        if q != q2 {
            return shape_err(format!("matmul: inner dimensions {q} and {q2} differ"));
        }
        let value = matmul_raw(&self.nodes[ia].value, &self.nodes[ib].value, p, q, r);
        Ok(self.push(vec![p, r], value, Op::Matmul { a: ia, b: ib, p, q, r }))
    }

    /// `x · weight + bias`, the bias broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (rows, q) = self.matrix_dims(ix, "linear input")?;
        let (q2, r) = self.matrix_dims(iw, "linear weight")?;
        if q != q2 {
            return shape_err(format!("linear: input width {q} but weight has {q2} rows"));
        }
        if self.nodes[ib].shape != [r] {
            return shape_err(format!("linear: bias shape {:?}, expected [{r}]", self.nodes[ib].shape));
        }
        let mut value = matmul_raw(&self.nodes[ix].value, &self.nodes[iw].value, rows, q, r);
        let bias = &self.nodes[ib].value;
        for row in value.chunks_mut(r) {
            row.iter_mut().zip(bias).for_each(|(v, &bb)| *v += bb);
        }
        Ok(self.push(vec![rows, r], value, Op::Linear { x: ix, w: iw, b: ib, rows, q, r }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.iter().map(|&x| x.max(0.0)).collect();
        Ok(self.push(self.nodes[ia].shape.clone(), value, Op::Relu(ia)))
    }

    /// Softmax over all elements, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let value = softmax_raw(x);
        Ok(self.push(self.nodes[ia].shape.clone(), value, Op::Softmax(ia)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("log input is NaN".into()));
        }
        if let Some(bad) = x.iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let value = x.iter().map(|v| v.ln()).collect();
        Ok(self.push(self.nodes[ia].shape.clone(), value, Op::Log(ia)))
    }

    /// `max(x, floor)` element-wise; clamped entries pass no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.iter().map(|&x| x.max(floor)).collect();
        Ok(self.push(self.nodes[ia].shape.clone(), value, Op::ClampMin(ia, floor)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.iter().sum();
        Ok(self.push(vec![1], vec![s], Op::Sum(ia)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        Ok(self.push(vec![1], vec![m], Op::Mean(ia)))
    }

    pub fn l2_norm_sq(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.iter().map(|x| x * x).sum();
        Ok(self.push(vec![1], vec![s], Op::L2NormSq(ia)))
    }

    /// Cosine similarity of two same-shaped tensors, viewed flat.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(ia, ib, "cosine_similarity")?;
        let c = super::cosine(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(vec![1], vec![c], Op::Cosine(ia, ib)))
    }

    /// Mean over the rows of a matrix, giving a `[1 × cols]` matrix.
    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (rows, cols) = self.matrix_dims(ia, "row_mean")?;
        let mut out = vec![0.0; cols];
        for row in self.nodes[ia].value.chunks(cols) {
            out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        Ok(self.push(vec![1, cols], out, Op::RowMean { x: ia, rows, cols }))
    }

    /// Concatenates scalars into a vector.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return shape_err("stack of zero scalars");
        }
        let mut idx = Vec::with_capacity(xs.len());
        let mut value = Vec::with_capacity(xs.len());
        for &x in xs {
            let i = self.check(x)?;
            match self.nodes[i].value[..] {
                [v] => value.push(v),
                _ => return shape_err("stack expects scalar inputs"),
            }
            idx.push(i);
        }
        Ok(self.push(vec![xs.len()], value, Op::Stack(idx)))
    }

    /// Picks the `k`-th element (flat index) as a scalar.
    pub fn select(&mut self, a: Var, k: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let n = self.nodes[ia].value.len();
        if k >= n {
            return Err(Error::Usage(format!("select index {k} out of range for {n} values")));
        }
        let v = self.nodes[ia].value[k];
        Ok(self.push(vec![1], vec![v], Op::Select(ia, k)))
    }

    /// Records an operation whose forward value was computed by the caller
    /// and whose local derivative is supplied as a closure.
    pub fn custom(&mut self, inputs: &[Var], shape: Vec<usize>, value: Vec<f64>, backward: BackwardFn) -> Result<Var> {
        let idx = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        if shape.iter().product::<usize>() != value.len() {
            return shape_err("custom op value does not match its shape");
        }
        Ok(self.push(shape, value, Op::Custom { inputs: idx, backward }))
    }

    /// Reverse pass from a scalar root. Gradients of every node reachable
    /// from `loss` are summed over all uses.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if self.consumed {
            return Err(Error::Usage("backward already ran on this tape; record a new graph".into()));
        }
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Usage(format!("backward root must be scalar, got shape {:?}", self.nodes[root].shape)));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if self.nodes[root].requires_grad {
            grads[root] = Some(vec![1.0]);
        }

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let nodes = &self.nodes;
            let mut send = |j: usize, contrib: Vec<f64>| {
                if !nodes[j].requires_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.iter().map(|x| -x).collect());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].requires_grad {
                        send(*a, zip_map(&g, vb, |x, y| x * y));
                    }
                    if nodes[*b].requires_grad {
                        send(*b, zip_map(&g, va, |x, y| x * y));
                    }
                }
                Op::Scale(a, k) => send(*a, g.iter().map(|x| x * k).collect()),
                Op::Matmul { a, b, p, q, r } => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].requires_grad {
                        send(*a, matmul_bt(&g, vb, *p, *r, *q));
                    }
                    if nodes[*b].requires_grad {
                        send(*b, matmul_at(va, &g, *p, *q, *r));
                    }
                }
                Op::Linear { x, w, b, rows, q, r } => {
                    let (vx, vw) = (&nodes[*x].value, &nodes[*w].value);
                    if nodes[*x].requires_grad {
                        send(*x, matmul_bt(&g, vw, *rows, *r, *q));
                    }
                    if nodes[*w].requires_grad {
                        send(*w, matmul_at(vx, &g, *rows, *q, *r));
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![0.0; *r];
                        for row in g.chunks(*r) {
                            gb.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                        }
                        send(*b, gb);
                    }
                }
                Op::Relu(a) => {
                    let va = &nodes[*a].value;
                    send(*a, zip_map(&g, va, |gi, x| if x > 0.0 { gi } else { 0.0 }));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    send(*a, zip_map(&g, y, |gi, yi| yi * (gi - dot)));
                }
                Op::Log(a) => {
                    let va = &nodes[*a].value;
                    send(*a, zip_map(&g, va, |gi, x| gi / x));
                }
                Op::ClampMin(a, floor) => {
                    let va = &nodes[*a].value;
                    send(*a, zip_map(&g, va, |gi, x| if x > *floor { gi } else { 0.0 }));
                }
                Op::Sum(a) => send(*a, vec![g[0]; nodes[*a].value.len()]),
                Op::Mean(a) => {
                    let len = nodes[*a].value.len();
                    send(*a, vec![g[0] / len as f64; len]);
                }
                Op::L2NormSq(a) => send(*a, nodes[*a].value.iter().map(|x| 2.0 * x * g[0]).collect()),
                Op::Cosine(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (ga, gb) = cosine_grads(va, vb, node.value[0]);
                    send(*a, ga.into_iter().map(|x| x * g[0]).collect());
                    send(*b, gb.into_iter().map(|x| x * g[0]).collect());
                }
                Op::RowMean { x, rows, cols } => {
                    let k = 1.0 / *rows as f64;
                    let mut out = Vec::with_capacity(rows * cols);
                    for _ in 0..*rows {
                        out.extend(g.iter().map(|v| v * k));
                    }
                    send(*x, out);
                }
                Op::Stack(xs) => {
                    for (&j, &gj) in xs.iter().zip(&g) {
                        send(j, vec![gj]);
                    }
                }
                Op::Select(a, k) => {
                    let mut out = vec![0.0; nodes[*a].value.len()];
                    out[*k] = g[0];
                    send(*a, out);
                }
                Op::Custom { inputs, backward } => {
                    if inputs.iter().any(|&j| nodes[j].requires_grad) {
                        let vals: Vec<&[f64]> = inputs.iter().map(|&j| &nodes[j].value[..]).collect();
                        let gs = backward(&g, &vals, &node.value);
                        for (&j, gj) in inputs.iter().zip(gs) {
                            send(j, gj);
                        }
                    }
                }
            }
            // Leaves keep their gradient for the caller; interior buffers are dropped.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn softmax_raw(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

/// `[p×q]·[q×r]`
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let orow = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += aik * bv);
        }
    }
    out
}

/// `G[p×r] · Bᵀ` where `B` is `[q×r]`, giving `[p×q]`.
fn matmul_bt(g: &[f64], b: &[f64], p: usize, r: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for i in 0..p {
        let grow = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let brow = &b[k * r..(k + 1) * r];
            out[i * q + k] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `Aᵀ · G` where `A` is `[p×q]` and `G` is `[p×r]`, giving `[q×r]`.
fn matmul_at(a: &[f64], g: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; q * r];
    for i in 0..p {
        let grow = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            out[k * r..(k + 1) * r].iter_mut().zip(grow).for_each(|(o, &gv)| *o += aik * gv);
        }
    }
    out
}

/// Partial derivatives of `cos(a, b)` with respect to `a` and `b`.
pub(crate) fn cosine_grads(a: &[f64], b: &[f64], cos: f64) -> (Vec<f64>, Vec<f64>) {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let inv = 1.0 / (na * nb);
    let ga = a.iter().zip(b).map(|(&x, &y)| y * inv - cos * x / (na * na)).collect();
    let gb = a.iter().zip(b).map(|(&x, &y)| x * inv - cos * y / (nb * nb)).collect();
    (ga, gb)
}
