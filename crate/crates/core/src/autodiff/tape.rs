use std::sync::Arc;

use rand::Rng;

use super::dense::{dot, DenseMatrix};
use super::sparse::{SparseMatrix, SparsePattern};
use crate::error::{Error, Result};

/// Degrees below this are treated as isolated rows by the renormalisation.
pub const DEGREE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Value {
    Dense(DenseMatrix),
    Sparse(SparseMatrix),
}

impl Value {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Value::Dense(d) => d.shape(),
            Value::Sparse(s) => s.shape(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Value::Dense(_) => "dense",
            Value::Sparse(_) => "sparse",
        }
    }
}

/// Gradient of a node: a full matrix for dense nodes, one entry per stored
/// value for sparse nodes.
#[derive(Clone, Debug)]
enum Grad {
    Dense(DenseMatrix),
    Values(Vec<f64>),
}

impl Grad {
    fn zeros_like(value: &Value) -> Grad {
        match value {
            Value::Dense(d) => Grad::Dense(DenseMatrix::zeros(d.rows(), d.cols())),
            Value::Sparse(s) => Grad::Values(vec![0.0; s.nnz()]),
        }
    }

    fn dense_mut(&mut self) -> &mut DenseMatrix {
        match self {
            Grad::Dense(d) => d,
            Grad::Values(_) => unreachable!("dense gradient requested for sparse node"),
        }
    }

    fn values_mut(&mut self) -> &mut Vec<f64> {
        match self {
            Grad::Values(v) => v,
            Grad::Dense(_) => unreachable!("value gradient requested for dense node"),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Var, Var),
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Sum(Var),
    Dropout {
        input: Var,
        multiplier: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: DenseMatrix,
        labels: Vec<usize>,
        mask: Vec<usize>,
    },
    GatherPairs {
        z: Var,
        pairs: Arc<[(usize, usize)]>,
    },
    SparseFromValues(Var),
    Symmetrize {
        input: Var,
        source: Vec<usize>,
    },
    SparseAdd {
        a: Var,
        b: Var,
        map_a: Vec<usize>,
        map_b: Vec<usize>,
    },
    SymmetricScale {
        input: Var,
        inv_sqrt_degree: Vec<f64>,
        guarded: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Value,
    requires_grad: bool,
}

/// Records matrix operations in evaluation order so gradients can be
/// accumulated in reverse. Nodes are appended only, so every node's inputs
/// precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Grad>>,
    shapes: Vec<(usize, usize, usize)>,
}

impl Gradients {
    /// Gradient of a dense node; zeros when the node did not influence the loss.
    pub fn wrt(&self, var: Var) -> DenseMatrix {
        match &self.grads[var.0] {
            Some(Grad::Dense(d)) => d.clone(),
            Some(Grad::Values(_)) => panic!("node {} is sparse; use wrt_values", var.0),
            None => {
                let (r, c, _) = self.shapes[var.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }

    /// Gradient with respect to the stored values of a sparse node.
    pub fn wrt_values(&self, var: Var) -> Vec<f64> {
        match &self.grads[var.0] {
            Some(Grad::Values(v)) => v.clone(),
            Some(Grad::Dense(_)) => panic!("node {} is dense; use wrt", var.0),
            None => vec![0.0; self.shapes[var.0].2],
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Value, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Non-trainable dense input.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(Op::Leaf, Value::Dense(value), false)
    }

    /// Trainable dense leaf.
    pub fn param(&mut self, value: DenseMatrix) -> Var {
        self.push(Op::Leaf, Value::Dense(value), true)
    }

    pub fn sparse_constant(&mut self, value: SparseMatrix) -> Var {
        self.push(Op::Leaf, Value::Sparse(value), false)
    }

    /// Sparse leaf whose stored values are trainable; structure stays fixed.
    pub fn sparse_param(&mut self, value: SparseMatrix) -> Var {
        self.push(Op::Leaf, Value::Sparse(value), true)
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    pub fn dense(&self, v: Var) -> Result<&DenseMatrix> {
        match &self.nodes[v.0].value {
            Value::Dense(d) => Ok(d),
            other => Err(Error::Tape(format!("node {} is {}, expected dense", v.0, other.kind()))),
        }
    }

    pub fn sparse(&self, v: Var) -> Result<&SparseMatrix> {
        match &self.nodes[v.0].value {
            Value::Sparse(s) => Ok(s),
            other => Err(Error::Tape(format!("node {} is {}, expected sparse", v.0, other.kind()))),
        }
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let d = self.dense(v)?;
        if d.shape() != (1, 1) {
            return Err(Error::Tape(format!("node {} has shape {:?}, not scalar", v.0, d.shape())));
        }
        Ok(d.data()[0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.dense(a)?.matmul(self.dense(b)?)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Value::Dense(out), rg))
    }

    /// Sparse × dense product. Gradients reach the dense operand and the
    /// sparse operand's stored values.
    pub fn spmm(&mut self, s: Var, d: Var) -> Result<Var> {
        let out = self.sparse(s)?.matmul_dense(self.dense(d)?)?;
        let rg = self.rg(s) || self.rg(d);
        Ok(self.push(Op::SpMM(s, d), Value::Dense(out), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.dense(a)?;
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = DenseMatrix::from_vec(x.rows(), x.cols(), data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Relu(a), Value::Dense(out), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.dense(a)?.add(self.dense(b)?)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), Value::Dense(out), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.dense(a)?.scale(c);
        let rg = self.rg(a);
        Ok(self.push(Op::Scale(a, c), Value::Dense(out), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.dense(a)?.transpose();
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose(a), Value::Dense(out), rg))
    }

    /// Sum of all entries of a dense node, or of the stored values of a sparse one.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = match self.value(a) {
            Value::Dense(d) => d.sum(),
            Value::Sparse(s) => s.values().iter().sum(),
        };
        let rg = self.rg(a);
        Ok(self.push(Op::Sum(a), Value::Dense(DenseMatrix::filled(1, 1, total)), rg))
    }

    /// Inverted dropout on a dense matrix or on a sparse matrix's stored values.
    /// Identity (no node recorded) in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let len = match self.value(a) {
            Value::Dense(d) => d.data().len(),
            Value::Sparse(s) => s.nnz(),
        };
        let multiplier: Vec<f64> = (0..len)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let value = match self.value(a) {
            Value::Dense(d) => {
                let data = d.data().iter().zip(&multiplier).map(|(x, m)| x * m).collect();
                Value::Dense(DenseMatrix::from_vec(d.rows(), d.cols(), data)?)
            }
            Value::Sparse(s) => {
                let vals = s.values().iter().zip(&multiplier).map(|(x, m)| x * m).collect();
                Value::Sparse(s.with_values(vals)?)
            }
        };
        let rg = self.rg(a);
        Ok(self.push(Op::Dropout { input: a, multiplier }, value, rg))
    }

    /// Mean softmax cross-entropy over the nodes listed in `mask`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], mask: &[usize]) -> Result<Var> {
        if mask.is_empty() {
            return Err(Error::invalid("cross-entropy mask is empty"));
        }
        let l = self.dense(logits)?;
        let (n, c) = l.shape();
        if labels.len() != n {
            return Err(Error::invalid(format!("{} labels for {n} logit rows", labels.len())));
        }
        let mut probs = DenseMatrix::zeros(mask.len(), c);
        let mut mask_labels = Vec::with_capacity(mask.len());
        let mut total = 0.0;
        for (t, &i) in mask.iter().enumerate() {
            if i >= n {
                return Err(Error::Index {
                    op: "cross-entropy mask",
                    index: i,
                    limit: n,
                });
            }
            let y = labels[i];
            if y >= c {
                return Err(Error::Index {
                    op: "cross-entropy label",
                    index: y,
                    limit: c,
                });
            }
            let row = l.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut norm = 0.0;
            for (p, &v) in probs.row_mut(t).iter_mut().zip(row) {
                *p = (v - max).exp();
                norm += *p;
            }
            for p in probs.row_mut(t) {
                *p /= norm;
            }
            total += norm.ln() - (row[y] - max);
            mask_labels.push(y);
        }
        let loss = total / mask.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: mask_labels,
                mask: mask.to_vec(),
            },
            Value::Dense(DenseMatrix::filled(1, 1, loss)),
            rg,
        ))
    }

    /// Row dot products `z_i · z_j` for each pair, as a column vector.
    pub fn gather_pair_products(&mut self, z: Var, pairs: Arc<[(usize, usize)]>) -> Result<Var> {
        let zm = self.dense(z)?;
        let n = zm.rows();
        let mut out = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs.iter() {
            let bad = if i >= n { Some(i) } else if j >= n { Some(j) } else { None };
            if let Some(index) = bad {
                return Err(Error::Index {
                    op: "gather_pair_products",
                    index,
                    limit: n,
                });
            }
            out.push(dot(zm.row(i), zm.row(j)));
        }
        let value = DenseMatrix::from_vec(out.len(), 1, out)?;
        let rg = self.rg(z);
        Ok(self.push(Op::GatherPairs { z, pairs }, Value::Dense(value), rg))
    }

    /// Places a column vector of values onto a fixed sparse pattern, in storage order.
    pub fn sparse_from_values(&mut self, pattern: Arc<SparsePattern>, values: Var) -> Result<Var> {
        let v = self.dense(values)?;
        if v.cols() != 1 || v.rows() != pattern.nnz() {
            return Err(Error::shape("sparse_from_values", (pattern.nnz(), 1), v.shape()));
        }
        let s = SparseMatrix::new(pattern, v.data().to_vec())?;
        let rg = self.rg(values);
        Ok(self.push(Op::SparseFromValues(values), Value::Sparse(s), rg))
    }

    /// Symmetrises a sparse square matrix over the union of its support and
    /// its transpose's support. For each unordered pair with directional
    /// values `a = s_ij`, `b = s_ji` (zero when not stored): both ≥ 0 keeps the
    /// max, both ≤ 0 keeps the min, mixed signs keep the larger magnitude with
    /// ties going to the upper-triangle entry.
    pub fn symmetrize(&mut self, input: Var) -> Result<Var> {
        let s = self.sparse(input)?;
        let (out, source) = symmetrize_values(s)?;
        let rg = self.rg(input);
        Ok(self.push(Op::Symmetrize { input, source }, Value::Sparse(out), rg))
    }

    /// Sparse union-add; overlapping entries sum.
    pub fn sparse_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, map_a, map_b) = self.sparse(a)?.union_add(self.sparse(b)?)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::SparseAdd { a, b, map_a, map_b }, Value::Sparse(out), rg))
    }

    /// Differentiable `D^{-1/2} (S + I) D^{-1/2}` with absolute-value degrees.
    /// With `add_self_loops` false the identity contributes zero-valued
    /// diagonal slots only.
    pub fn renormalize(&mut self, s: Var, add_self_loops: bool) -> Result<Var> {
        let (rows, cols) = self.sparse(s)?.shape();
        if rows != cols {
            return Err(Error::shape("renormalize", (rows, cols), (cols, rows)));
        }
        let mut eye = SparseMatrix::identity(rows);
        if !add_self_loops {
            eye.values_mut().fill(0.0);
        }
        let eye = self.sparse_constant(eye);
        let with_loops = self.sparse_add(s, eye)?;
        let m = self.sparse(with_loops)?;
        let (values, inv_sqrt_degree, guarded) = symmetric_scale(m);
        let out = m.with_values(values)?;
        let rg = self.rg(with_loops);
        Ok(self.push(
            Op::SymmetricScale {
                input: with_loops,
                inv_sqrt_degree,
                guarded,
            },
            Value::Sparse(out),
            rg,
        ))
    }

    /// Reverse-mode accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_shape = self.value(root).shape();
        if root_shape != (1, 1) {
            return Err(Error::Tape(format!(
                "backward needs a scalar root, node {} has shape {root_shape:?}",
                root.0
            )));
        }
        let mut grads: Vec<Option<Grad>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Grad::Dense(DenseMatrix::filled(1, 1, 1.0)));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| match &n.value {
                Value::Dense(d) => (d.rows(), d.cols(), d.data().len()),
                Value::Sparse(s) => (s.rows(), s.cols(), s.nnz()),
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Grad>], v: Var) -> Option<&'g mut Grad> {
        if !self.rg(v) {
            return None;
        }
        let value = &self.nodes[v.0].value;
        Some(grads[v.0].get_or_insert_with(|| Grad::zeros_like(value)))
    }

    fn propagate(&self, node: &Node, g: &Grad, grads: &mut [Option<Grad>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let g = dense_grad(g);
                if self.rg(*a) {
                    let da = g.matmul_t(self.dense(*b)?)?;
                    self.slot(grads, *a).unwrap().dense_mut().add_assign(&da);
                }
                if self.rg(*b) {
                    let db = self.dense(*a)?.t_matmul(g)?;
                    self.slot(grads, *b).unwrap().dense_mut().add_assign(&db);
                }
            }
            Op::SpMM(s, d) => {
                let g = dense_grad(g);
                let sm = self.sparse(*s)?;
                if self.rg(*d) {
                    let dd = sm.t_matmul_dense(g)?;
                    self.slot(grads, *d).unwrap().dense_mut().add_assign(&dd);
                }
                if self.rg(*s) {
                    let dm = self.dense(*d)?;
                    let rows = sm.pattern().row_indices();
                    let cols = sm.pattern().col_indices();
                    let gv = self.slot(grads, *s).unwrap().values_mut();
                    for (k, gk) in gv.iter_mut().enumerate() {
                        *gk += dot(g.row(rows[k]), dm.row(cols[k]));
                    }
                }
            }
            Op::Relu(a) => {
                let g = dense_grad(g);
                let x = self.dense(*a)?;
                let ga = self.slot(grads, *a).unwrap().dense_mut();
                for ((o, &gi), &xi) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                    if xi > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::Add(a, b) => {
                let g = dense_grad(g);
                for v in [a, b] {
                    if let Some(slot) = self.slot(grads, *v) {
                        slot.dense_mut().add_assign(g);
                    }
                }
            }
            Op::Scale(a, c) => {
                let g = dense_grad(g);
                let ga = self.slot(grads, *a).unwrap().dense_mut();
                for (o, &gi) in ga.data_mut().iter_mut().zip(g.data()) {
                    *o += c * gi;
                }
            }
            Op::Transpose(a) => {
                let gt = dense_grad(g).transpose();
                self.slot(grads, *a).unwrap().dense_mut().add_assign(&gt);
            }
            Op::Sum(a) => {
                let seed = dense_grad(g).data()[0];
                match self.slot(grads, *a).unwrap() {
                    Grad::Dense(d) => d.data_mut().iter_mut().for_each(|o| *o += seed),
                    Grad::Values(v) => v.iter_mut().for_each(|o| *o += seed),
                }
            }
            Op::Dropout { input, multiplier } => {
                let upstream = match g {
                    Grad::Dense(d) => d.data(),
                    Grad::Values(v) => v.as_slice(),
                };
                let out: &mut [f64] = match self.slot(grads, *input).unwrap() {
                    Grad::Dense(d) => d.data_mut(),
                    Grad::Values(v) => v.as_mut_slice(),
                };
                for ((o, &gi), &m) in out.iter_mut().zip(upstream).zip(multiplier) {
                    *o += gi * m;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
                mask,
            } => {
                let seed = dense_grad(g).data()[0] / mask.len() as f64;
                let gl = self.slot(grads, *logits).unwrap().dense_mut();
                for (t, &i) in mask.iter().enumerate() {
                    let row = gl.row_mut(i);
                    for (o, &p) in row.iter_mut().zip(probs.row(t)) {
                        *o += seed * p;
                    }
                    row[labels[t]] -= seed;
                }
            }
            Op::GatherPairs { z, pairs } => {
                let g = dense_grad(g);
                let zm = self.dense(*z)?;
                let gz = self.slot(grads, *z).unwrap().dense_mut();
                for (t, &(i, j)) in pairs.iter().enumerate() {
                    let gt = g.data()[t];
                    if gt == 0.0 {
                        continue;
                    }
                    for (o, &x) in gz.row_mut(i).iter_mut().zip(zm.row(j)) {
                        *o += gt * x;
                    }
                    for (o, &x) in gz.row_mut(j).iter_mut().zip(zm.row(i)) {
                        *o += gt * x;
                    }
                }
            }
            Op::SparseFromValues(values) => {
                let gv = values_grad(g);
                let out = self.slot(grads, *values).unwrap().dense_mut();
                for (o, &gi) in out.data_mut().iter_mut().zip(gv) {
                    *o += gi;
                }
            }
            Op::Symmetrize { input, source } => {
                let gv = values_grad(g);
                let out = self.slot(grads, *input).unwrap().values_mut();
                for (&src, &gi) in source.iter().zip(gv) {
                    out[src] += gi;
                }
            }
            Op::SparseAdd { a, b, map_a, map_b } => {
                let gv = values_grad(g);
                for (v, map) in [(a, map_a), (b, map_b)] {
                    if let Some(slot) = self.slot(grads, *v) {
                        for (o, &k) in slot.values_mut().iter_mut().zip(map) {
                            *o += gv[k];
                        }
                    }
                }
            }
            Op::SymmetricScale {
                input,
                inv_sqrt_degree: r,
                guarded,
            } => {
                let gv = values_grad(g);
                let m = self.sparse(*input)?;
                let rows = m.pattern().row_indices();
                let cols = m.pattern().col_indices();
                let vals = m.values();
                // dL/dr per node, accumulated over both endpoints of every entry.
                let mut d_r = vec![0.0; r.len()];
                for k in 0..vals.len() {
                    let (i, j) = (rows[k], cols[k]);
                    if guarded[i] {
                        continue;
                    }
                    d_r[i] += gv[k] * vals[k] * r[j];
                    d_r[j] += gv[k] * vals[k] * r[i];
                }
                let out = self.slot(grads, *input).unwrap().values_mut();
                for k in 0..vals.len() {
                    let (i, j) = (rows[k], cols[k]);
                    if guarded[i] {
                        continue;
                    }
                    let d_degree = -0.5 * r[i] * r[i] * r[i] * d_r[i];
                    out[k] += gv[k] * r[i] * r[j] + sign(vals[k]) * d_degree;
                }
            }
        }
        Ok(())
    }
}

fn dense_grad(g: &Grad) -> &DenseMatrix {
    match g {
        Grad::Dense(d) => d,
        Grad::Values(_) => unreachable!("dense op received value gradient"),
    }
}

fn values_grad(g: &Grad) -> &[f64] {
    match g {
        Grad::Values(v) => v,
        Grad::Dense(_) => unreachable!("sparse op received dense gradient"),
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scales `m` to `D^{-1/2} m D^{-1/2}` with `D_ii = Σ_j |m_ij|`. Rows with
/// degree below [`DEGREE_EPS`] become a bare unit self-loop (their diagonal
/// slot must be stored) and contribute nothing to other rows.
pub(crate) fn symmetric_scale(m: &SparseMatrix) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let n = m.rows();
    let cols = m.pattern().col_indices();
    let vals = m.values();
    let mut degree = vec![0.0; n];
    for (i, d) in degree.iter_mut().enumerate() {
        for k in m.pattern().row_range(i) {
            *d += vals[k].abs();
        }
    }
    let guarded: Vec<bool> = degree.iter().map(|&d| d < DEGREE_EPS).collect();
    let r: Vec<f64> = degree
        .iter()
        .zip(&guarded)
        .map(|(&d, &g)| if g { 0.0 } else { 1.0 / d.sqrt() })
        .collect();
    let mut out = vec![0.0; vals.len()];
    for i in 0..n {
        for k in m.pattern().row_range(i) {
            let j = cols[k];
            out[k] = if guarded[i] {
                if j == i {
                    1.0
                } else {
                    0.0
                }
            } else if guarded[j] {
                0.0
            } else {
                vals[k] / (degree[i] * degree[j]).sqrt()
            };
        }
    }
    (out, r, guarded)
}

/// Value-level symmetrisation shared by the tape op and the non-differentiable
/// helpers. Returns the symmetric matrix and, per output entry, the input
/// entry its value was taken from.
pub(crate) fn symmetrize_values(s: &SparseMatrix) -> Result<(SparseMatrix, Vec<usize>)> {
    if s.rows() != s.cols() {
        return Err(Error::shape("symmetrize", s.shape(), (s.cols(), s.rows())));
    }
    let transposed: Vec<(usize, usize, f64)> = s.triplets().into_iter().map(|(r, c, _)| (c, r, 0.0)).collect();
    let t = SparseMatrix::from_triplets(s.rows(), s.cols(), &transposed)?;
    let zeroed = s.with_values(vec![0.0; s.nnz()])?;
    let (union, _, _) = zeroed.union_add(&t)?;
    let pattern = union.pattern().clone();
    let coords = pattern.coords();
    let mut values = Vec::with_capacity(coords.len());
    let mut source = Vec::with_capacity(coords.len());
    for &(i, j) in &coords {
        let ij = s.pattern().find(i, j);
        let ji = s.pattern().find(j, i);
        let a = ij.map_or(0.0, |k| s.values()[k]);
        let b = ji.map_or(0.0, |k| s.values()[k]);
        // Orientation-free choice: compare in the canonical (upper, lower) order.
        let (first, second, first_src, second_src) = if i <= j { (a, b, ij, ji) } else { (b, a, ji, ij) };
        let take_first = if first >= 0.0 && second >= 0.0 {
            first >= second
        } else if first <= 0.0 && second <= 0.0 {
            first <= second
        } else {
            first.abs() >= second.abs()
        };
        let (v, src) = if take_first { (first, first_src) } else { (second, second_src) };
        // An absent entry is zero; a stored entry always wins such a comparison
        // or ties with it, so fall back to whichever side is stored.
        let src = src.or(first_src).or(second_src).expect("union entry has a stored source");
        values.push(v);
        source.push(src);
    }
    Ok((SparseMatrix::new(pattern, values)?, source))
}
