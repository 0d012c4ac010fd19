//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A `Tape` records every operation in creation order, which is already a
//! topological order, so the backward pass is a single reverse scan that
//! visits each node exactly once. Gradients accumulate additively across
//! fan-out; the optimizer owns zeroing (a fresh tape is built per step, so
//! there is nothing to zero here).
//!
//! Single-threaded by design: one tape belongs to one training job.

use crate::error::{DegiaError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    /// `[m,n] + [n]`, row vector broadcast over rows.
    AddRow(Var, Var),
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    /// `[m,n] -> [m]`, sum over columns.
    SumAxis1(Var),
    Reshape(Var),
    /// Column range `[c0, c1)` of a 2-D tensor.
    SliceCols(Var, usize, usize),
    ConcatCols(Var, Var),
    /// Row lookup into a `[rows, n]` table; gradient scatters into rows.
    GatherRows(Var, Vec<usize>),
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    /// `[n,c,h,w] + [c]`, per-channel bias.
    BiasChannels(Var, Var),
    AvgPool2(Var),
    /// Mean over the batch of `-log softmax(logits)[label]`.
    CrossEntropyLogits { logits: Var, labels: Vec<usize> },
    /// Per-row `-log softmax(logits)[label]`, shape `[b]`.
    CrossEntropyRows { logits: Var, labels: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    /// True if this node is a grad-enabled leaf or depends on one.
    needs_grad: bool,
}

/// Recorded computation graph plus, after `backward`, the gradients.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf. `requires_grad` opts it into the backward pass;
    /// a detached leaf participates in the forward value only.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy a node's value into a fresh detached leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if `v`
    /// participated. Detached nodes yield `None`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(DegiaError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(DegiaError::shape(op, format!("expected 2-D, got {s:?}"))),
        }
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.binary(a, b, t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.binary(a, b, t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.binary(a, b, t, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x / y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.binary(a, b, t, Op::Div(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.unary(a, t, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.unary(a, t, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.unary(a, t, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.unary(a, t, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| softplus(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.unary(a, t, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.exp()).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.unary(a, t, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.ln()).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.unary(a, t, Op::Log(a))
    }

    // ---- reductions and shape ops ----------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.unary(a, Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.unary(a, Tensor::scalar(s / n), Op::Mean(a))
    }

    pub fn sum_axis1(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("sum_axis1", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = src[i * n..(i + 1) * n].iter().sum();
        }
        let t = Tensor::new(vec![m], out)?;
        Ok(self.unary(a, t, Op::SumAxis1(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        Ok(self.unary(a, t, Op::Reshape(a)))
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", a)?;
        if c0 >= c1 || c1 > n {
            return Err(DegiaError::shape("slice_cols", format!("range {c0}..{c1} of {n} cols")));
        }
        let src = self.value(a).data();
        let w = c1 - c0;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + c0..i * n + c1]);
        }
        let t = Tensor::new(vec![m, w], out)?;
        Ok(self.unary(a, t, Op::SliceCols(a, c0, c1)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.dims2("concat_cols", a)?;
        let (mb, nb) = self.dims2("concat_cols", b)?;
        if ma != mb {
            return Err(DegiaError::shape("concat_cols", format!("{ma} rows vs {mb} rows")));
        }
        let (sa, sb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ma * (na + nb));
        for i in 0..ma {
            out.extend_from_slice(&sa[i * na..(i + 1) * na]);
            out.extend_from_slice(&sb[i * nb..(i + 1) * nb]);
        }
        let t = Tensor::new(vec![ma, na + nb], out)?;
        Ok(self.binary(a, b, t, Op::ConcatCols(a, b)))
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, n) = self.dims2("gather_rows", table)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(DegiaError::contract(
                "gather_rows",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(vec![indices.len(), n], out)?;
        Ok(self.unary(table, t, Op::GatherRows(table, indices.to_vec())))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(DegiaError::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(a, b, t, Op::Matmul(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_row", a)?;
        if self.shape(row) != [n] {
            return Err(DegiaError::shape(
                "add_row",
                format!("row {:?} vs {n} cols", self.shape(row)),
            ));
        }
        let (sa, sr) = (self.value(a).data(), self.value(row).data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(sa[i * n + j] + sr[j]);
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(a, row, t, Op::AddRow(a, row)))
    }

    // ---- convolution stack -------------------------------------------------

    /// Cross-correlation convolution of `[n,c,h,w]` with kernels `[f,c,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = conv_geometry("conv2d", self.shape(input), self.shape(kernel), stride, pad)?;
        let out = conv2d_forward(self.value(input).data(), self.value(kernel).data(), &g);
        let t = Tensor::new(vec![g.n, g.f, g.oh, g.ow], out)?;
        Ok(self.binary(input, kernel, t, Op::Conv2d { input, kernel, stride, pad }))
    }

    pub fn bias_channels(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = match self.shape(a) {
            [n, c, h, w] => (*n, *c, *h, *w),
            s => return Err(DegiaError::shape("bias_channels", format!("expected 4-D, got {s:?}"))),
        };
        if self.shape(bias) != [c] {
            return Err(DegiaError::shape(
                "bias_channels",
                format!("bias {:?} vs {c} channels", self.shape(bias)),
            ));
        }
        let (sa, sb) = (self.value(a).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(sa.len());
        let plane = h * w;
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let b = sb[ci];
                out.extend(sa[base..base + plane].iter().map(|v| v + b));
            }
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.binary(a, bias, t, Op::BiasChannels(a, bias)))
    }

    /// 2x2 average pooling with stride 2. Spatial dims must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = match self.shape(a) {
            [n, c, h, w] => (*n, *c, *h, *w),
            s => return Err(DegiaError::shape("avg_pool2", format!("expected 4-D, got {s:?}"))),
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(DegiaError::shape("avg_pool2", format!("odd spatial dims {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let p = base + 2 * i * w + 2 * j;
                        out.push(0.25 * (src[p] + src[p + 1] + src[p + w] + src[p + w + 1]));
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.unary(a, t, Op::AvgPool2(a)))
    }

    // ---- fused losses -------------------------------------------------------

    /// Mean over the batch of `-log softmax(logits)[label]`, computed via the
    /// shifted log-sum-exp for stability.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2("cross_entropy_logits", logits)?;
        if labels.len() != b {
            return Err(DegiaError::shape(
                "cross_entropy_logits",
                format!("{b} rows vs {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(DegiaError::contract(
                "cross_entropy_logits",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let src = self.value(logits).data();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &src[i * c..(i + 1) * c];
            total += log_sum_exp(row) - row[y];
        }
        let t = Tensor::scalar(total / b as f64);
        Ok(self.unary(logits, t, Op::CrossEntropyLogits { logits, labels: labels.to_vec() }))
    }

    /// Per-sample `-log softmax(logits)[label]` as a `[b]` vector.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2("cross_entropy_rows", logits)?;
        if labels.len() != b {
            return Err(DegiaError::shape(
                "cross_entropy_rows",
                format!("{b} rows vs {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(DegiaError::contract(
                "cross_entropy_rows",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let src = self.value(logits).data();
        let mut rows = Vec::with_capacity(b);
        for (i, &y) in labels.iter().enumerate() {
            let row = &src[i * c..(i + 1) * c];
            rows.push(log_sum_exp(row) - row[y]);
        }
        let t = Tensor::new(vec![b], rows)?;
        Ok(self.unary(logits, t, Op::CrossEntropyRows { logits, labels: labels.to_vec() }))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradients land on every grad-enabled
    /// node reachable from `loss` and are readable via `grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(DegiaError::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // nothing upstream wants gradients
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            apply_backward(&self.nodes, &mut self.grads, i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Accumulate into the gradient buffer of `v` if it participates.
fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, update: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    update(buf);
}

fn apply_backward(nodes: &[Node], grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) -> Result<()> {
    let val = |v: &Var| nodes[v.0].value.data();
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |d| add_assign(d, g));
            acc(nodes, grads, *b, |d| add_assign(d, g));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |d| add_assign(d, g));
            acc(nodes, grads, *b, |d| sub_assign(d, g));
        }
        Op::Mul(a, b) => {
            acc(nodes, grads, *a, |d| mul_add_assign(d, g, val(b)));
            acc(nodes, grads, *b, |d| mul_add_assign(d, g, val(a)));
        }
        Op::Div(a, b) => {
            acc(nodes, grads, *a, |d| {
                for (di, (gi, bi)) in d.iter_mut().zip(g.iter().zip(val(b))) {
                    *di += gi / bi;
                }
            });
            acc(nodes, grads, *b, |d| {
                for (di, ((gi, ai), bi)) in d.iter_mut().zip(g.iter().zip(val(a)).zip(val(b))) {
                    *di -= gi * ai / (bi * bi);
                }
            });
        }
        Op::AddScalar(a) => acc(nodes, grads, *a, |d| add_assign(d, g)),
        Op::Scale(a, c) => {
            let c = *c;
            acc(nodes, grads, *a, |d| {
                for (di, gi) in d.iter_mut().zip(g) {
                    *di += c * gi;
                }
            });
        }
        Op::Relu(a) => {
            acc(nodes, grads, *a, |d| {
                for (di, (gi, ai)) in d.iter_mut().zip(g.iter().zip(val(a))) {
                    if *ai > 0.0 {
                        *di += gi;
                    }
                }
            });
        }
        Op::Tanh(a) => {
            let out = nodes[idx].value.data();
            acc(nodes, grads, *a, |d| {
                for (di, (gi, oi)) in d.iter_mut().zip(g.iter().zip(out)) {
                    *di += gi * (1.0 - oi * oi);
                }
            });
        }
        Op::Softplus(a) => {
            acc(nodes, grads, *a, |d| {
                for (di, (gi, ai)) in d.iter_mut().zip(g.iter().zip(val(a))) {
                    *di += gi * sigmoid(*ai);
                }
            });
        }
        Op::Exp(a) => {
            let out = nodes[idx].value.data();
            acc(nodes, grads, *a, |d| {
                for (di, (gi, oi)) in d.iter_mut().zip(g.iter().zip(out)) {
                    *di += gi * oi;
                }
            });
        }
        Op::Log(a) => {
            acc(nodes, grads, *a, |d| {
                for (di, (gi, ai)) in d.iter_mut().zip(g.iter().zip(val(a))) {
                    *di += gi / ai;
                }
            });
        }
        Op::Sum(a) => {
            let gv = g[0];
            acc(nodes, grads, *a, |d| {
                for di in d.iter_mut() {
                    *di += gv;
                }
            });
        }
        Op::Mean(a) => {
            let gv = g[0] / nodes[a.0].value.len() as f64;
            acc(nodes, grads, *a, |d| {
                for di in d.iter_mut() {
                    *di += gv;
                }
            });
        }
        Op::SumAxis1(a) => {
            let [_, n] = *two_dims(nodes[a.0].value.shape());
            acc(nodes, grads, *a, |d| {
                for (i, gi) in g.iter().enumerate() {
                    for dj in &mut d[i * n..(i + 1) * n] {
                        *dj += gi;
                    }
                }
            });
        }
        Op::Reshape(a) => acc(nodes, grads, *a, |d| add_assign(d, g)),
        Op::SliceCols(a, c0, c1) => {
            let [_, n] = *two_dims(nodes[a.0].value.shape());
            let (c0, w) = (*c0, c1 - c0);
            acc(nodes, grads, *a, |d| {
                for (i, row) in g.chunks_exact(w).enumerate() {
                    add_assign(&mut d[i * n + c0..i * n + c0 + w], row);
                }
            });
        }
        Op::ConcatCols(a, b) => {
            let [_, na] = *two_dims(nodes[a.0].value.shape());
            let [_, nb] = *two_dims(nodes[b.0].value.shape());
            let n = na + nb;
            acc(nodes, grads, *a, |d| {
                for (i, row) in g.chunks_exact(n).enumerate() {
                    add_assign(&mut d[i * na..(i + 1) * na], &row[..na]);
                }
            });
            acc(nodes, grads, *b, |d| {
                for (i, row) in g.chunks_exact(n).enumerate() {
                    add_assign(&mut d[i * nb..(i + 1) * nb], &row[na..]);
                }
            });
        }
        Op::GatherRows(table, indices) => {
            let [_, n] = *two_dims(nodes[table.0].value.shape());
            acc(nodes, grads, *table, |d| {
                for (r, &i) in indices.iter().enumerate() {
                    add_assign(&mut d[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                }
            });
        }
        Op::Matmul(a, b) => {
            let [m, k] = *two_dims(nodes[a.0].value.shape());
            let [_, n] = *two_dims(nodes[b.0].value.shape());
            // dA[i,p] += sum_j g[i,j] * B[p,j]
            acc(nodes, grads, *a, |d| {
                let vb = val(b);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let drow = &mut d[i * k..(i + 1) * k];
                    for p in 0..k {
                        let brow = &vb[p * n..(p + 1) * n];
                        let mut s = 0.0;
                        for j in 0..n {
                            s += grow[j] * brow[j];
                        }
                        drow[p] += s;
                    }
                }
            });
            // dB[p,j] += sum_i A[i,p] * g[i,j]
            acc(nodes, grads, *b, |d| {
                let va = val(a);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = va[i * k + p];
                        if av != 0.0 {
                            let drow = &mut d[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += av * grow[j];
                            }
                        }
                    }
                }
            });
        }
        Op::AddRow(a, row) => {
            let [m, n] = *two_dims(nodes[a.0].value.shape());
            acc(nodes, grads, *a, |d| add_assign(d, g));
            acc(nodes, grads, *row, |d| {
                for i in 0..m {
                    add_assign(d, &g[i * n..(i + 1) * n]);
                }
            });
        }
        Op::Conv2d { input, kernel, stride, pad } => {
            let geo = conv_geometry(
                "conv2d",
                nodes[input.0].value.shape(),
                nodes[kernel.0].value.shape(),
                *stride,
                *pad,
            )?;
            let need_in = nodes[input.0].needs_grad;
            let need_ker = nodes[kernel.0].needs_grad;
            let (din, dker) = conv2d_backward(val(input), val(kernel), g, &geo, need_in, need_ker);
            if let Some(din) = din {
                acc(nodes, grads, *input, |d| add_assign(d, &din));
            }
            if let Some(dker) = dker {
                acc(nodes, grads, *kernel, |d| add_assign(d, &dker));
            }
        }
        Op::BiasChannels(a, bias) => {
            let shape = nodes[a.0].value.shape();
            let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
            acc(nodes, grads, *a, |d| add_assign(d, g));
            acc(nodes, grads, *bias, |d| {
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        d[ci] += g[base..base + plane].iter().sum::<f64>();
                    }
                }
            });
        }
        Op::AvgPool2(a) => {
            let shape = nodes[a.0].value.shape();
            let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let (oh, ow) = (h / 2, w / 2);
            acc(nodes, grads, *a, |d| {
                for nc in 0..n * c {
                    let ibase = nc * h * w;
                    let obase = nc * oh * ow;
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = 0.25 * g[obase + i * ow + j];
                            let p = ibase + 2 * i * w + 2 * j;
                            d[p] += gv;
                            d[p + 1] += gv;
                            d[p + w] += gv;
                            d[p + w + 1] += gv;
                        }
                    }
                }
            });
        }
        Op::CrossEntropyLogits { logits, labels } => {
            let [b, c] = *two_dims(nodes[logits.0].value.shape());
            let gv = g[0] / b as f64;
            acc(nodes, grads, *logits, |d| {
                let src = val(logits);
                for (i, &y) in labels.iter().enumerate() {
                    let row = &src[i * c..(i + 1) * c];
                    let lse = log_sum_exp(row);
                    for j in 0..c {
                        let p = (row[j] - lse).exp();
                        d[i * c + j] += gv * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
            });
        }
        Op::CrossEntropyRows { logits, labels } => {
            let [_, c] = *two_dims(nodes[logits.0].value.shape());
            acc(nodes, grads, *logits, |d| {
                let src = val(logits);
                for (i, &y) in labels.iter().enumerate() {
                    let row = &src[i * c..(i + 1) * c];
                    let lse = log_sum_exp(row);
                    for j in 0..c {
                        let p = (row[j] - lse).exp();
                        d[i * c + j] += g[i] * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
            });
        }
    }
    Ok(())
}

fn two_dims(shape: &[usize]) -> &[usize; 2] {
    shape.try_into().expect("2-D shape")
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn add_assign(d: &mut [f64], g: &[f64]) {
    for (di, gi) in d.iter_mut().zip(g) {
        *di += gi;
    }
}

fn sub_assign(d: &mut [f64], g: &[f64]) {
    for (di, gi) in d.iter_mut().zip(g) {
        *di -= gi;
    }
}

fn mul_add_assign(d: &mut [f64], g: &[f64], v: &[f64]) {
    for (di, (gi, vi)) in d.iter_mut().zip(g.iter().zip(v)) {
        *di += gi * vi;
    }
}

/// `out += a x b` for row-major `[m,k] x [k,n]`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_geometry(
    op: &'static str,
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    let [n, c, h, w] = match input {
        [n, c, h, w] => [*n, *c, *h, *w],
        s => return Err(DegiaError::shape(op, format!("input must be 4-D, got {s:?}"))),
    };
    let [f, kc, kh, kw] = match kernel {
        [f, kc, kh, kw] => [*f, *kc, *kh, *kw],
        s => return Err(DegiaError::shape(op, format!("kernel must be 4-D, got {s:?}"))),
    };
    if kc != c {
        return Err(DegiaError::shape(op, format!("input has {c} channels, kernel expects {kc}")));
    }
    if stride == 0 {
        return Err(DegiaError::contract(op, "stride must be positive".to_string()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(DegiaError::shape(
            op,
            format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
        ));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvGeometry { n, c, h, w, f, kh, kw, stride, pad, oh, ow })
}

/// im2col patch matrix for one sample: `[oh*ow, c*kh*kw]`.
fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let kk = g.c * g.kh * g.kw;
    cols.fill(0.0);
    for i in 0..g.oh {
        for j in 0..g.ow {
            let dst = &mut cols[(i * g.ow + j) * kk..(i * g.ow + j + 1) * kk];
            for c in 0..g.c {
                for ki in 0..g.kh {
                    let y = (i * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y as usize >= g.h {
                        continue;
                    }
                    for kj in 0..g.kw {
                        let xx = (j * g.stride + kj) as isize - g.pad as isize;
                        if xx < 0 || xx as usize >= g.w {
                            continue;
                        }
                        dst[c * g.kh * g.kw + ki * g.kw + kj] =
                            x[(c * g.h + y as usize) * g.w + xx as usize];
                    }
                }
            }
        }
    }
}

fn kernel_as_cols(kernel: &[f64], g: &ConvGeometry) -> Vec<f64> {
    // [f, c*kh*kw] row-major -> transpose to [c*kh*kw, f]
    let kk = g.c * g.kh * g.kw;
    let mut w2 = vec![0.0; kk * g.f];
    for f in 0..g.f {
        for q in 0..kk {
            w2[q * g.f + f] = kernel[f * kk + q];
        }
    }
    w2
}

fn conv2d_forward(x: &[f64], kernel: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let kk = g.c * g.kh * g.kw;
    let p = g.oh * g.ow;
    let w2 = kernel_as_cols(kernel, g);
    let mut cols = vec![0.0; p * kk];
    let mut prod = vec![0.0; p * g.f];
    let mut out = vec![0.0; g.n * g.f * p];
    for ni in 0..g.n {
        im2col(&x[ni * g.c * g.h * g.w..], g, &mut cols);
        prod.fill(0.0);
        matmul_acc(&cols, &w2, p, kk, g.f, &mut prod);
        // [p, f] -> [f, p]
        let base = ni * g.f * p;
        for pi in 0..p {
            for f in 0..g.f {
                out[base + f * p + pi] = prod[pi * g.f + f];
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    gout: &[f64],
    g: &ConvGeometry,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let kk = g.c * g.kh * g.kw;
    let p = g.oh * g.ow;
    let mut din = if need_input { Some(vec![0.0; g.n * g.c * g.h * g.w]) } else { None };
    let mut dker = if need_kernel { Some(vec![0.0; g.f * kk]) } else { None };

    let w2 = kernel_as_cols(kernel, g); // [kk, f]
    let mut cols = vec![0.0; p * kk];
    let mut gmat = vec![0.0; p * g.f];
    let mut dcols = vec![0.0; p * kk];

    for ni in 0..g.n {
        // upstream gradient for this sample as [p, f]
        let base = ni * g.f * p;
        for f in 0..g.f {
            for pi in 0..p {
                gmat[pi * g.f + f] = gout[base + f * p + pi];
            }
        }
        if let Some(dker) = dker.as_deref_mut() {
            im2col(&x[ni * g.c * g.h * g.w..], g, &mut cols);
            // dW[f, q] += sum_p cols[p, q] * gmat[p, f]
            for pi in 0..p {
                let crow = &cols[pi * kk..(pi + 1) * kk];
                let grow = &gmat[pi * g.f..(pi + 1) * g.f];
                for (f, &gv) in grow.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    let drow = &mut dker[f * kk..(f + 1) * kk];
                    for q in 0..kk {
                        drow[q] += gv * crow[q];
                    }
                }
            }
        }
        if let Some(din) = din.as_deref_mut() {
            // dCols[p, q] = sum_f gmat[p, f] * w2[q, f]
            dcols.fill(0.0);
            for pi in 0..p {
                let grow = &gmat[pi * g.f..(pi + 1) * g.f];
                let drow = &mut dcols[pi * kk..(pi + 1) * kk];
                for q in 0..kk {
                    let wrow = &w2[q * g.f..(q + 1) * g.f];
                    let mut s = 0.0;
                    for f in 0..g.f {
                        s += grow[f] * wrow[f];
                    }
                    drow[q] = s;
                }
            }
            // col2im scatter
            let dx = &mut din[ni * g.c * g.h * g.w..(ni + 1) * g.c * g.h * g.w];
            for i in 0..g.oh {
                for j in 0..g.ow {
                    let src = &dcols[(i * g.ow + j) * kk..(i * g.ow + j + 1) * kk];
                    for c in 0..g.c {
                        for ki in 0..g.kh {
                            let y = (i * g.stride + ki) as isize - g.pad as isize;
                            if y < 0 || y as usize >= g.h {
                                continue;
                            }
                            for kj in 0..g.kw {
                                let xx = (j * g.stride + kj) as isize - g.pad as isize;
                                if xx < 0 || xx as usize >= g.w {
                                    continue;
                                }
                                dx[(c * g.h + y as usize) * g.w + xx as usize] +=
                                    src[c * g.kh * g.kw + ki * g.kw + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    (din, dker)
}
