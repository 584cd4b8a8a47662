//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] is built fresh for every training step: each op evaluates
//! eagerly as it is recorded, and [`Graph::backward`] replays the tape in
//! reverse. Tape order is topological by construction, so no sorting pass
//! is needed. The op set is closed; higher-level losses are composed from it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// x * c for a compile-time constant c
    Scale(Var, f64),
    AddConst(Var),
    Square(Var),
    /// [m,k] @ [k,n]
    Matmul(Var, Var, usize, usize, usize),
    /// Contiguous 1-d slice.
    Slice(Var, usize, usize),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    /// clamp(x, 0, 1); gradient passes only strictly inside the interval
    Clamp01(Var),
    /// (x, gamma, beta) row-wise; saved (mean, inv_std) per row
    LayerNorm(Var, Var, Var, Vec<(f64, f64)>),
    SoftmaxRows(Var),
    /// (table, ids); out[i] = table[ids[i]]
    Embedding(Var, Vec<u32>),
    /// (logits [b,c], labels [b]) -> scalar mean NLL
    CrossEntropyMean(Var, Vec<u32>),
    /// (pred, targets) -> scalar mean squared error
    MseMean(Var, Vec<f64>),
    /// x[r,d] * v[d] broadcast over rows
    MulRow(Var, Var),
    /// x[r,d] + b[d] broadcast over rows
    AddRow(Var, Var),
    /// x * s where s is a 1-element var
    MulScalar(Var, Var),
    /// (q, k, batch, seq, dh) -> [b*s, s] scaled dot products
    AttnScores(Var, Var, usize, usize, usize),
    /// (p, v, batch, seq, dh) -> [b*s, dh]
    AttnApply(Var, Var, usize, usize, usize),
    /// [b*s, d] -> [b, d] mean over positions
    MeanPool(Var, usize, usize),
    /// Gather whole rows of a 2-d tensor by index.
    SelectRows(Var, Vec<u32>),
    Sum(Var),
    Mean(Var),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Per-step computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, shape, value, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Forward value of a node, as a tensor snapshot.
    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("node shape/value consistent")
    }

    pub fn item(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    /// Gradient of the last backward pass wrt `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Register a tensor as a graph input. Gradients flow iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Convenience: non-differentiable input from raw data.
    pub fn constant(&mut self, shape: &[usize], data: &[f64]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(Op::Leaf, shape.to_vec(), data.to_vec(), false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, vec![1], vec![v], false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), CoreError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(CoreError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, CoreError> {
        self.same_shape(a, b, "add")?;
        let value = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), self.nodes[a.0].shape.clone(), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, CoreError> {
        self.same_shape(a, b, "sub")?;
        let value = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), self.nodes[a.0].shape.clone(), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, CoreError> {
        self.same_shape(a, b, "mul")?;
        let value = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), self.nodes[a.0].shape.clone(), value, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.val(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), self.nodes[a.0].shape.clone(), value, rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.val(a).iter().map(|x| x + c).collect();
        let rg = self.rg(a);
        self.push(Op::AddConst(a), self.nodes[a.0].shape.clone(), value, rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.val(a).iter().map(|x| x * x).collect();
        let rg = self.rg(a);
        self.push(Op::Square(a), self.nodes[a.0].shape.clone(), value, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, CoreError> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let (m, k) = match sa.as_slice() {
            [m, k] => (*m, *k),
            _ => return Err(CoreError::Shape(format!("matmul lhs must be 2-d, got {sa:?}"))),
        };
        let (k2, n) = match sb.as_slice() {
            [k2, n] => (*k2, *n),
            _ => return Err(CoreError::Shape(format!("matmul rhs must be 2-d, got {sb:?}"))),
        };
        if k != k2 {
            return Err(CoreError::Shape(format!("matmul: {sa:?} incompatible with {sb:?}")));
        }
        let value = kernels::matmul_nn(self.val(a), self.val(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Matmul(a, b, m, k, n), vec![m, n], value, rg))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, CoreError> {
        let total = self.nodes[a.0].value.len();
        if start + len > total {
            return Err(CoreError::Shape(format!(
                "slice [{start}, {start}+{len}) out of bounds for length {total}"
            )));
        }
        let value = self.val(a)[start..start + len].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::Slice(a, start, len), vec![len], value, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.val(a).iter().map(|&x| kernels::sigmoid(x)).collect();
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), self.nodes[a.0].shape.clone(), value, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.val(a).iter().map(|&x| libm::tanh(x)).collect();
        let rg = self.rg(a);
        self.push(Op::Tanh(a), self.nodes[a.0].shape.clone(), value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.val(a).iter().map(|&x| kernels::relu(x)).collect();
        let rg = self.rg(a);
        self.push(Op::Relu(a), self.nodes[a.0].shape.clone(), value, rg)
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        let value = self.val(a).iter().map(|&x| x.clamp(0.0, 1.0)).collect();
        let rg = self.rg(a);
        self.push(Op::Clamp01(a), self.nodes[a.0].shape.clone(), value, rg)
    }

    /// Row-wise layer norm of x[r,d] with affine params gamma[d], beta[d].
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, CoreError> {
        let (rows, cols) = self.dims2(x)?;
        if self.nodes[gamma.0].value.len() != cols || self.nodes[beta.0].value.len() != cols {
            return Err(CoreError::Shape(format!(
                "layer_norm: x {:?} vs gamma {:?} / beta {:?}",
                self.nodes[x.0].shape, self.nodes[gamma.0].shape, self.nodes[beta.0].shape
            )));
        }
        let mut value = vec![0.0; rows * cols];
        let stats = kernels::layer_norm_rows(
            self.val(x),
            self.val(gamma),
            self.val(beta),
            &mut value,
            rows,
            cols,
            LN_EPS,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Op::LayerNorm(x, gamma, beta, stats), self.nodes[x.0].shape.clone(), value, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, CoreError> {
        let (rows, cols) = self.dims2(x)?;
        let mut value = self.val(x).to_vec();
        kernels::softmax_rows(&mut value, rows, cols);
        let rg = self.rg(x);
        Ok(self.push(Op::SoftmaxRows(x), self.nodes[x.0].shape.clone(), value, rg))
    }

    /// Gather rows of `table`[vocab, d] by token id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var, CoreError> {
        let st = &self.nodes[table.0].shape;
        let (vocab, d) = match st.as_slice() {
            [v, d] => (*v, *d),
            _ => return Err(CoreError::Shape(format!("embedding table must be 2-d, got {st:?}"))),
        };
        let mut value = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(CoreError::Invalid(format!("token id {id} >= vocab size {vocab}")));
            }
            value.extend_from_slice(&self.val(table)[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(Op::Embedding(table, ids.to_vec()), vec![ids.len(), d], value, rg))
    }

    /// Mean negative log likelihood of `labels` under row-softmax of logits[b, c].
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[u32]) -> Result<Var, CoreError> {
        let (rows, cols) = self.dims2(logits)?;
        if labels.len() != rows {
            return Err(CoreError::Shape(format!(
                "cross_entropy: {rows} logit rows vs {} labels",
                labels.len()
            )));
        }
        let mut probs = self.val(logits).to_vec();
        kernels::softmax_rows(&mut probs, rows, cols);
        let mut nll = 0.0;
        for (r, &lab) in labels.iter().enumerate() {
            let lab = lab as usize;
            if lab >= cols {
                return Err(CoreError::Invalid(format!("label {lab} >= {cols} classes")));
            }
            nll -= libm::log(probs[r * cols + lab].max(1e-300));
        }
        let value = vec![nll / rows as f64];
        let rg = self.rg(logits);
        Ok(self.push(Op::CrossEntropyMean(logits, labels.to_vec()), vec![1], value, rg))
    }

    /// Mean squared error against constant targets.
    pub fn mse_mean(&mut self, pred: Var, targets: &[f64]) -> Result<Var, CoreError> {
        if self.nodes[pred.0].value.len() != targets.len() {
            return Err(CoreError::Shape(format!(
                "mse: {} predictions vs {} targets",
                self.nodes[pred.0].value.len(),
                targets.len()
            )));
        }
        let n = targets.len() as f64;
        let sse: f64 = self.val(pred).iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
        let rg = self.rg(pred);
        Ok(self.push(Op::MseMean(pred, targets.to_vec()), vec![1], vec![sse / n], rg))
    }

    /// x[r,d] * v[d], v broadcast across rows.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var, CoreError> {
        let (rows, cols) = self.dims2(x)?;
        if self.nodes[v.0].value.len() != cols {
            return Err(CoreError::Shape(format!(
                "mul_row: x {:?} vs v {:?}",
                self.nodes[x.0].shape, self.nodes[v.0].shape
            )));
        }
        let mut value = self.val(x).to_vec();
        for r in 0..rows {
            for c in 0..cols {
                value[r * cols + c] *= self.val(v)[c];
            }
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(Op::MulRow(x, v), self.nodes[x.0].shape.clone(), value, rg))
    }

    /// x[r,d] + b[d], b broadcast across rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, CoreError> {
        let (rows, cols) = self.dims2(x)?;
        if self.nodes[b.0].value.len() != cols {
            return Err(CoreError::Shape(format!(
                "add_row: x {:?} vs b {:?}",
                self.nodes[x.0].shape, self.nodes[b.0].shape
            )));
        }
        let mut value = self.val(x).to_vec();
        for r in 0..rows {
            for c in 0..cols {
                value[r * cols + c] += self.val(b)[c];
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Op::AddRow(x, b), self.nodes[x.0].shape.clone(), value, rg))
    }

    /// x scaled by a 1-element variable.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, CoreError> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(CoreError::Shape(format!(
                "mul_scalar: scale must be 1 element, got {:?}",
                self.nodes[s.0].shape
            )));
        }
        let sv = self.val(s)[0];
        let value = self.val(x).iter().map(|x| x * sv).collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Op::MulScalar(x, s), self.nodes[x.0].shape.clone(), value, rg))
    }

    /// Scaled dot-product attention scores per batch item.
    pub fn attn_scores(&mut self, q: Var, k: Var, batch: usize, seq: usize) -> Result<Var, CoreError> {
        self.same_shape(q, k, "attn_scores")?;
        let (rows, dh) = self.dims2(q)?;
        if rows != batch * seq {
            return Err(CoreError::Shape(format!(
                "attn_scores: {rows} rows vs batch {batch} * seq {seq}"
            )));
        }
        let value = kernels::attn_scores(self.val(q), self.val(k), batch, seq, dh);
        let rg = self.rg(q) || self.rg(k);
        Ok(self.push(Op::AttnScores(q, k, batch, seq, dh), vec![batch * seq, seq], value, rg))
    }

    /// Weighted sum of values by attention probabilities per batch item.
    pub fn attn_apply(&mut self, p: Var, v: Var, batch: usize, seq: usize) -> Result<Var, CoreError> {
        let (prows, pcols) = self.dims2(p)?;
        let (vrows, dh) = self.dims2(v)?;
        if prows != batch * seq || pcols != seq || vrows != batch * seq {
            return Err(CoreError::Shape(format!(
                "attn_apply: probs {:?} values {:?} vs batch {batch} seq {seq}",
                self.nodes[p.0].shape, self.nodes[v.0].shape
            )));
        }
        let value = kernels::attn_apply(self.val(p), self.val(v), batch, seq, dh);
        let rg = self.rg(p) || self.rg(v);
        Ok(self.push(Op::AttnApply(p, v, batch, seq, dh), vec![batch * seq, dh], value, rg))
    }

    /// Mean over sequence positions: [b*s, d] -> [b, d].
    pub fn mean_pool(&mut self, x: Var, batch: usize, seq: usize) -> Result<Var, CoreError> {
        let (rows, d) = self.dims2(x)?;
        if rows != batch * seq {
            return Err(CoreError::Shape(format!(
                "mean_pool: {rows} rows vs batch {batch} * seq {seq}"
            )));
        }
        let mut value = vec![0.0; batch * d];
        for b in 0..batch {
            for s in 0..seq {
                let row = &self.val(x)[(b * seq + s) * d..(b * seq + s + 1) * d];
                for c in 0..d {
                    value[b * d + c] += row[c];
                }
            }
        }
        for v in value.iter_mut() {
            *v /= seq as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(Op::MeanPool(x, batch, seq), vec![batch, d], value, rg))
    }

    /// Gather rows of x[r, d] by index; duplicates allowed.
    pub fn select_rows(&mut self, x: Var, rows: &[u32]) -> Result<Var, CoreError> {
        let (r, d) = self.dims2(x)?;
        let mut value = Vec::with_capacity(rows.len() * d);
        for &row in rows {
            let row = row as usize;
            if row >= r {
                return Err(CoreError::Invalid(format!("row index {row} >= {r} rows")));
            }
            value.extend_from_slice(&self.val(x)[row * d..(row + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(Op::SelectRows(x, rows.to_vec()), vec![rows.len(), d], value, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = vec![self.val(a).iter().sum()];
        let rg = self.rg(a);
        self.push(Op::Sum(a), vec![1], value, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.val(a).len() as f64;
        let value = vec![self.val(a).iter().sum::<f64>() / n];
        let rg = self.rg(a);
        self.push(Op::Mean(a), vec![1], value, rg)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize), CoreError> {
        match self.nodes[v.0].shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(CoreError::Shape(format!("expected at most 2 dims, got {s:?}"))),
        }
    }

    /// Reverse pass from a scalar loss. Every leaf with `requires_grad`
    /// reachable from `loss` receives its gradient; repeated calls on fresh
    /// graphs are independent.
    pub fn backward(&mut self, loss: Var) -> Result<(), CoreError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(CoreError::Invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || self.grads[i].is_none() {
                continue;
            }
            let dy = self.grads[i].clone().expect("checked above");
            self.apply_vjp(i, &dy);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; len]);
        }
        contrib(slot.as_mut().expect("just filled"));
    }

    fn apply_vjp(&mut self, i: usize, dy: &[f64]) {
        // Values are read before grads are mutated; ops never alias value
        // storage with grad storage.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accum(a, |g| {
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g += d;
                    }
                });
                self.accum(b, |g| {
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g += d;
                    }
                });
            }
            &Op::Sub(a, b) => {
                self.accum(a, |g| {
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g += d;
                    }
                });
                self.accum(b, |g| {
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g -= d;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                self.accum(a, |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(&bv) {
                        *g += d * x;
                    }
                });
                self.accum(b, |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(&av) {
                        *g += d * x;
                    }
                });
            }
            &Op::Scale(a, c) => {
                self.accum(a, |g| {
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g += c * d;
                    }
                });
            }
            &Op::AddConst(a) => {
                self.accum(a, |g| {
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g += d;
                    }
                });
            }
            &Op::Square(a) => {
                let av = self.nodes[a.0].value.clone();
                self.accum(a, |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(&av) {
                        *g += 2.0 * x * d;
                    }
                });
            }
            &Op::Matmul(a, b, m, k, n) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                self.accum(a, |g| kernels::matmul_nt_acc(dy, &bv, g, m, n, k));
                self.accum(b, |g| kernels::matmul_tn_acc(&av, dy, g, m, k, n));
            }
            &Op::Slice(a, start, len) => {
                self.accum(a, |g| {
                    for (g, d) in g[start..start + len].iter_mut().zip(dy) {
                        *g += d;
                    }
                });
            }
            &Op::Sigmoid(a) => {
                let yv = self.nodes[i].value.clone();
                self.accum(a, |g| {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(&yv) {
                        *g += d * y * (1.0 - y);
                    }
                });
            }
            &Op::Tanh(a) => {
                let yv = self.nodes[i].value.clone();
                self.accum(a, |g| {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(&yv) {
                        *g += d * (1.0 - y * y);
                    }
                });
            }
            &Op::Relu(a) => {
                let xv = self.nodes[a.0].value.clone();
                self.accum(a, |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(&xv) {
                        if *x > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            &Op::Clamp01(a) => {
                let yv = self.nodes[i].value.clone();
                self.accum(a, |g| {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(&yv) {
                        if *y > 0.0 && *y < 1.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::LayerNorm(x, gamma, beta, stats) => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let stats = stats.clone();
                let xv = self.nodes[x.0].value.clone();
                let gv = self.nodes[gamma.0].value.clone();
                let cols = gv.len();
                let rows = xv.len() / cols;
                // x_hat and the two row reductions of the standard LN backward
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    let (mean, inv_std) = stats[r];
                    let xr = &xv[r * cols..(r + 1) * cols];
                    let dyr = &dy[r * cols..(r + 1) * cols];
                    let mut sum_dg = 0.0;
                    let mut sum_dgx = 0.0;
                    for c in 0..cols {
                        let xh = (xr[c] - mean) * inv_std;
                        let dg = dyr[c] * gv[c];
                        sum_dg += dg;
                        sum_dgx += dg * xh;
                        dgamma[c] += dyr[c] * xh;
                        dbeta[c] += dyr[c];
                    }
                    let inv_n = 1.0 / cols as f64;
                    for c in 0..cols {
                        let xh = (xr[c] - mean) * inv_std;
                        let dg = dyr[c] * gv[c];
                        dx[r * cols + c] = inv_std * (dg - inv_n * sum_dg - xh * inv_n * sum_dgx);
                    }
                }
                self.accum(x, |g| {
                    for (g, d) in g.iter_mut().zip(&dx) {
                        *g += d;
                    }
                });
                self.accum(gamma, |g| {
                    for (g, d) in g.iter_mut().zip(&dgamma) {
                        *g += d;
                    }
                });
                self.accum(beta, |g| {
                    for (g, d) in g.iter_mut().zip(&dbeta) {
                        *g += d;
                    }
                });
            }
            &Op::SoftmaxRows(x) => {
                let yv = self.nodes[i].value.clone();
                let cols = *self.nodes[i].shape.last().expect("2-d") ;
                let rows = yv.len() / cols;
                let mut dx = vec![0.0; yv.len()];
                for r in 0..rows {
                    let yr = &yv[r * cols..(r + 1) * cols];
                    let dyr = &dy[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(dyr).map(|(y, d)| y * d).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (dyr[c] - dot);
                    }
                }
                self.accum(x, |g| {
                    for (g, d) in g.iter_mut().zip(&dx) {
                        *g += d;
                    }
                });
            }
            Op::Embedding(table, ids) => {
                let table = *table;
                let ids = ids.clone();
                let d = self.nodes[table.0].shape[1];
                self.accum(table, |g| {
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut g[id as usize * d..(id as usize + 1) * d];
                        let src = &dy[i * d..(i + 1) * d];
                        for (g, d) in dst.iter_mut().zip(src) {
                            *g += d;
                        }
                    }
                });
            }
            Op::CrossEntropyMean(logits, labels) => {
                let logits = *logits;
                let labels = labels.clone();
                let cols = self.nodes[logits.0].shape[self.nodes[logits.0].shape.len() - 1];
                let mut probs = self.nodes[logits.0].value.clone();
                let rows = probs.len() / cols;
                kernels::softmax_rows(&mut probs, rows, cols);
                let scale = dy[0] / rows as f64;
                self.accum(logits, |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            let onehot = if labels[r] as usize == c { 1.0 } else { 0.0 };
                            g[r * cols + c] += scale * (probs[r * cols + c] - onehot);
                        }
                    }
                });
            }
            Op::MseMean(pred, targets) => {
                let pred = *pred;
                let targets = targets.clone();
                let pv = self.nodes[pred.0].value.clone();
                let scale = 2.0 * dy[0] / targets.len() as f64;
                self.accum(pred, |g| {
                    for ((g, p), t) in g.iter_mut().zip(&pv).zip(&targets) {
                        *g += scale * (p - t);
                    }
                });
            }
            &Op::MulRow(x, v) => {
                let xv = self.nodes[x.0].value.clone();
                let vv = self.nodes[v.0].value.clone();
                let cols = vv.len();
                let rows = xv.len() / cols;
                self.accum(x, |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[r * cols + c] += dy[r * cols + c] * vv[c];
                        }
                    }
                });
                self.accum(v, |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[c] += dy[r * cols + c] * xv[r * cols + c];
                        }
                    }
                });
            }
            &Op::AddRow(x, b) => {
                let cols = self.nodes[b.0].value.len();
                let rows = self.nodes[x.0].value.len() / cols;
                self.accum(x, |g| {
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g += d;
                    }
                });
                self.accum(b, |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[c] += dy[r * cols + c];
                        }
                    }
                });
            }
            &Op::MulScalar(x, s) => {
                let xv = self.nodes[x.0].value.clone();
                let sv = self.nodes[s.0].value[0];
                self.accum(x, |g| {
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g += sv * d;
                    }
                });
                self.accum(s, |g| {
                    let mut acc = 0.0;
                    for (d, x) in dy.iter().zip(&xv) {
                        acc += d * x;
                    }
                    g[0] += acc;
                });
            }
            &Op::AttnScores(q, k, batch, seq, dh) => {
                let qv = self.nodes[q.0].value.clone();
                let kv = self.nodes[k.0].value.clone();
                let scale = 1.0 / libm::sqrt(dh as f64);
                let scaled_dy: Vec<f64> = dy.iter().map(|d| d * scale).collect();
                self.accum(q, |g| {
                    for b in 0..batch {
                        let dsb = &scaled_dy[b * seq * seq..(b + 1) * seq * seq];
                        let kb = &kv[b * seq * dh..(b + 1) * seq * dh];
                        let gb = &mut g[b * seq * dh..(b + 1) * seq * dh];
                        kernels::matmul_nn_acc(dsb, kb, gb, seq, seq, dh);
                    }
                });
                self.accum(k, |g| {
                    for b in 0..batch {
                        let dsb = &scaled_dy[b * seq * seq..(b + 1) * seq * seq];
                        let qb = &qv[b * seq * dh..(b + 1) * seq * dh];
                        let gb = &mut g[b * seq * dh..(b + 1) * seq * dh];
                        kernels::matmul_tn_acc(dsb, qb, gb, seq, seq, dh);
                    }
                });
            }
            &Op::AttnApply(p, v, batch, seq, dh) => {
                let pv = self.nodes[p.0].value.clone();
                let vv = self.nodes[v.0].value.clone();
                self.accum(p, |g| {
                    for b in 0..batch {
                        let dyb = &dy[b * seq * dh..(b + 1) * seq * dh];
                        let vb = &vv[b * seq * dh..(b + 1) * seq * dh];
                        let gb = &mut g[b * seq * seq..(b + 1) * seq * seq];
                        kernels::matmul_nt_acc(dyb, vb, gb, seq, dh, seq);
                    }
                });
                self.accum(v, |g| {
                    for b in 0..batch {
                        let pb = &pv[b * seq * seq..(b + 1) * seq * seq];
                        let dyb = &dy[b * seq * dh..(b + 1) * seq * dh];
                        let gb = &mut g[b * seq * dh..(b + 1) * seq * dh];
                        kernels::matmul_tn_acc(pb, dyb, gb, seq, seq, dh);
                    }
                });
            }
            &Op::MeanPool(x, batch, seq) => {
                let d = self.nodes[i].shape[1];
                let inv = 1.0 / seq as f64;
                self.accum(x, |g| {
                    for b in 0..batch {
                        let dyb = &dy[b * d..(b + 1) * d];
                        for s in 0..seq {
                            let gr = &mut g[(b * seq + s) * d..(b * seq + s + 1) * d];
                            for (g, d) in gr.iter_mut().zip(dyb) {
                                *g += d * inv;
                            }
                        }
                    }
                });
            }
            Op::SelectRows(x, rows) => {
                let x = *x;
                let rows = rows.clone();
                let d = self.nodes[i].shape[1];
                self.accum(x, |g| {
                    for (k, &row) in rows.iter().enumerate() {
                        let dst = &mut g[row as usize * d..(row as usize + 1) * d];
                        for (g, dv) in dst.iter_mut().zip(&dy[k * d..(k + 1) * d]) {
                            *g += dv;
                        }
                    }
                });
            }
            &Op::Sum(a) => {
                let d0 = dy[0];
                self.accum(a, |g| {
                    for g in g.iter_mut() {
                        *g += d0;
                    }
                });
            }
            &Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let d0 = dy[0] / n;
                self.accum(a, |g| {
                    for g in g.iter_mut() {
                        *g += d0;
                    }
                });
            }
        }
    }
}
