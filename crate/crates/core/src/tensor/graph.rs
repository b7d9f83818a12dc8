use std::borrow::Cow;
use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    AffineConst(Var, f64),
    ScalarAffine {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat(Vec<Var>),
    BroadcastRows(Var),
    SliceCols(Var, usize),
    Row(Var, usize),
    Gather(Var, Vec<usize>),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    MaskedSoftmax(Var),
    WeightedSum(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Pick(Var, usize),
    Clamp(Var, f64, f64),
    Ln(Var),
    Sum(Var),
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    shape: Vec<usize>,
    op: Op,
}

/// Tape of executed operations. Nodes are appended in execution order, so
/// every node's inputs precede it and a reverse sweep is a valid
/// reverse-topological traversal.
///
/// Parameter leaves borrow their values from the [`ParamStore`] the graph
/// was created with; a parameter used several times maps to one node.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: Option<&'p ParamStore>,
    param_nodes: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'p> Graph<'p> {
    /// A graph without trainable parameters.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            param_nodes: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            nodes: Vec::new(),
            params: Some(params),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.to_vec()).expect("node shape is consistent")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
    ) -> Result<Var> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} produced {bad}")));
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            value: Cow::Owned(data),
            shape,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::shape(
                op,
                format!("expected a matrix, got shape {s:?}"),
            )),
        }
    }

    fn dims1(&self, v: Var, op: &'static str) -> Result<usize> {
        match *self.shape(v) {
            [n] => Ok(n),
            ref s => Err(Error::shape(
                op,
                format!("expected a vector, got shape {s:?}"),
            )),
        }
    }

    /// (rows, cols) treating the last axis as columns.
    fn rows_cols(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [n] => Ok((1, n)),
            [m, n] => Ok((m, n)),
            ref s => Err(Error::shape(
                op,
                format!("expected rank 1 or 2, got shape {s:?}"),
            )),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---- leaves ----------------------------------------------------------

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            value: Cow::Owned(t.into_data()),
            shape,
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a trainable parameter. Panics if the graph has no store.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self
            .params
            .expect("graph was created without a parameter store");
        let p = store.get(id);
        self.nodes.push(Node {
            value: Cow::Borrowed(p.value.data()),
            shape: p.value.shape().to_vec(),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    // ---- linear algebra --------------------------------------------------

    /// `a: m x k`, `b: k x n` -> `m x n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// `a: m x k`, `x: k` -> `m`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matvec")?;
        let k2 = self.dims1(x, "matvec")?;
        if k != k2 {
            return Err(Error::shape("matvec", format!("{m}x{k} times {k2}")));
        }
        let (av, xv) = (self.value(a), self.value(x));
        let out = (0..m).map(|i| dot(&av[i * k..(i + 1) * k], xv)).collect();
        self.push("matvec", vec![m], out, Op::MatVec(a, x))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        self.push("transpose", vec![n, m], out, Op::Transpose(a))
    }

    /// `x: d_in` or `x: m x d_in`, `w: d_in x d_out`, optional `b: d_out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        if let [d] = *self.shape(x) {
            let x2 = self.reshape(x, vec![1, d])?;
            let y = self.affine(x2, w, b)?;
            let d_out = self.shape(y)[1];
            return self.reshape(y, vec![d_out]);
        }
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} into {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", shape, out, Op::Reshape(x))
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    /// Adds vector `b: n` to every row of `a: m x n`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_bias")?;
        if self.dims1(b, "add_bias")? != n {
            return Err(Error::shape(
                "add_bias",
                format!("{m}x{n} plus {:?}", self.shape(b)),
            ));
        }
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        self.push("add_bias", vec![m, n], out, Op::AddBias(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b))
    }

    /// Elementwise product with a constant of the same number of elements
    /// (dropout masks, row masks).
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::shape(
                "mul_const",
                format!("{} constants for shape {:?}", c.len(), self.shape(a)),
            ));
        }
        let out = self.value(a).iter().zip(&c).map(|(x, y)| x * y).collect();
        self.push("mul_const", self.shape(a).to_vec(), out, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push("scale", self.shape(a).to_vec(), out, Op::Scale(a, s))
    }

    /// `y = a * x + b` with constant `a`, `b`.
    pub fn affine_const(&mut self, x: Var, a: f64, b: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| a * v + b).collect();
        self.push(
            "affine_const",
            self.shape(x).to_vec(),
            out,
            Op::AffineConst(x, a),
        )
    }

    /// `y = w * x + b` with single-element trainable `w`, `b`.
    pub fn scalar_affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        if self.value(w).len() != 1 || self.value(b).len() != 1 {
            return Err(Error::shape(
                "scalar_affine",
                "w and b must hold one value each",
            ));
        }
        let (wv, bv) = (self.value(w)[0], self.value(b)[0]);
        let out = self.value(x).iter().map(|v| wv * v + bv).collect();
        self.push(
            "scalar_affine",
            self.shape(x).to_vec(),
            out,
            Op::ScalarAffine { x, w, b },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        self.push("relu", self.shape(x).to_vec(), out, Op::Relu(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        self.push("gelu", self.shape(x).to_vec(), out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.push("sigmoid", self.shape(x).to_vec(), out, Op::Sigmoid(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.clamp(lo, hi)).collect();
        self.push("clamp", self.shape(x).to_vec(), out, Op::Clamp(x, lo, hi))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.ln()).collect();
        self.push("ln", self.shape(x).to_vec(), out, Op::Ln(x))
    }

    // ---- structural ------------------------------------------------------

    /// Concatenates along the last (feature) axis. Inputs are all vectors or
    /// all matrices with the same number of rows.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_last", "no inputs"))?;
        let rank = self.shape(first).len();
        let (rows, _) = self.rows_cols(first, "concat_last")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rows_cols(p, "concat_last")?;
            if r != rows || self.shape(p).len() != rank {
                return Err(Error::shape(
                    "concat_last",
                    format!("{:?} vs {:?}", self.shape(first), self.shape(p)),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let shape = if rank == 1 {
            vec![total]
        } else {
            vec![rows, total]
        };
        self.push("concat_last", shape, out, Op::Concat(parts.to_vec()))
    }

    /// Repeats vector `v: h` as `rows x h`.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let h = self.dims1(v, "broadcast_rows")?;
        let out = self.value(v).repeat(rows);
        self.push("broadcast_rows", vec![rows, h], out, Op::BroadcastRows(v))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start > end || end > n {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {n} columns"),
            ));
        }
        let av = self.value(a);
        let out = (0..m)
            .flat_map(|i| av[i * n + start..i * n + end].iter().copied())
            .collect();
        self.push(
            "slice_cols",
            vec![m, end - start],
            out,
            Op::SliceCols(a, start),
        )
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "row")?;
        if i >= m {
            return Err(Error::shape("row", format!("row {i} of {m}")));
        }
        let out = self.value(a)[i * n..(i + 1) * n].to_vec();
        self.push("row", vec![n], out, Op::Row(a, i))
    }

    /// Embedding lookup: rows of `table: V x h` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, h) = self.dims2(table, "gather_rows")?;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape(
                "gather_rows",
                format!("id {bad} out of {v} rows"),
            ));
        }
        let tv = self.value(table);
        let out = ids
            .iter()
            .flat_map(|&i| tv[i * h..(i + 1) * h].iter().copied())
            .collect();
        self.push(
            "gather_rows",
            vec![ids.len(), h],
            out,
            Op::Gather(table, ids.to_vec()),
        )
    }

    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var> {
        let n = self.dims1(x, "pick")?;
        if i >= n {
            return Err(Error::shape("pick", format!("index {i} of {n}")));
        }
        let v = self.value(x)[i];
        self.push("pick", Vec::new(), vec![v], Op::Pick(x, i))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(x))
    }

    // ---- attention -------------------------------------------------------

    /// Softmax over the last axis of each row. Positions with `mask[t] ==
    /// false` behave as `-inf` logits: their probability is exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x, "masked_softmax")?;
        if mask.len() != cols {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask of length {} for {cols} logits", mask.len()),
            ));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllMasked);
        }
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let logits = &xv[r * cols..(r + 1) * cols];
            let probs = &mut out[r * cols..(r + 1) * cols];
            masked_softmax_row(logits, mask, probs);
        }
        self.push(
            "masked_softmax",
            self.shape(x).to_vec(),
            out,
            Op::MaskedSoftmax(x),
        )
    }

    /// `sum_t weights[t] * rows[t]` for `weights: L`, `rows: L x h`.
    pub fn weighted_sum(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let l = self.dims1(weights, "weighted_sum")?;
        let (l2, h) = self.dims2(rows, "weighted_sum")?;
        if l != l2 {
            return Err(Error::shape(
                "weighted_sum",
                format!("{l} weights for {l2} rows"),
            ));
        }
        let (wv, rv) = (self.value(weights), self.value(rows));
        let mut out = vec![0.0; h];
        for (t, &w) in wv.iter().enumerate() {
            axpy(w, &rv[t * h..(t + 1) * h], &mut out);
        }
        self.push("weighted_sum", vec![h], out, Op::WeightedSum(weights, rows))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.dims1(gain, "layer_norm")? != n || self.dims1(bias, "layer_norm")? != n {
            return Err(Error::shape(
                "layer_norm",
                "gain/bias width differs from input",
            ));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let (mean, inv_std) = row_stats(row, eps);
            for j in 0..n {
                out[i * n + j] = gv[j] * (row[j] - mean) * inv_std + bv[j];
            }
        }
        self.push(
            "layer_norm",
            vec![m, n],
            out,
            Op::LayerNorm { x, gain, bias, eps },
        )
    }

    // ---- reverse sweep ---------------------------------------------------

    /// Reverse-mode accumulation from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_with_seed(loss, 1.0)
    }

    /// As [`backward`](Self::backward) with `d loss = seed`; used to fold a
    /// batch-mean factor into per-example passes.
    pub fn backward_with_seed(&self, loss: Var, seed: f64) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut out = Gradients::with_len(self.params.map_or(0, ParamStore::len));
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![seed]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let slot = &mut out.grads[id.0];
                    match slot {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                &Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    let (av, bv) = (self.value(a), self.value(b));
                    {
                        let da = acc(&mut grads, a, m * k);
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                da[r * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                            }
                        }
                    }
                    let db = acc(&mut grads, b, k * n);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            axpy(av[r * k + p], grow, &mut db[p * n..(p + 1) * n]);
                        }
                    }
                }
                &Op::MatVec(a, x) => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let (av, xv) = (self.value(a), self.value(x));
                    {
                        let da = acc(&mut grads, a, m * k);
                        for r in 0..m {
                            axpy(g[r], xv, &mut da[r * k..(r + 1) * k]);
                        }
                    }
                    let dx = acc(&mut grads, x, k);
                    for r in 0..m {
                        axpy(g[r], &av[r * k..(r + 1) * k], dx);
                    }
                }
                &Op::Transpose(a) => {
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    let da = acc(&mut grads, a, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[c * m + r];
                        }
                    }
                }
                &Op::Reshape(a) => {
                    add_into(acc(&mut grads, a, g.len()), &g);
                }
                &Op::Add(a, b) => {
                    add_into(acc(&mut grads, a, g.len()), &g);
                    add_into(acc(&mut grads, b, g.len()), &g);
                }
                &Op::AddBias(a, b) => {
                    let n = self.shape(b)[0];
                    add_into(acc(&mut grads, a, g.len()), &g);
                    let db = acc(&mut grads, b, n);
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let da = acc(&mut grads, a, g.len());
                    for ((d, gi), bi) in da.iter_mut().zip(&g).zip(bv) {
                        *d += gi * bi;
                    }
                    let db = acc(&mut grads, b, g.len());
                    for ((d, gi), ai) in db.iter_mut().zip(&g).zip(av) {
                        *d += gi * ai;
                    }
                }
                Op::MulConst(a, c) => {
                    let da = acc(&mut grads, *a, g.len());
                    for ((d, gi), ci) in da.iter_mut().zip(&g).zip(c) {
                        *d += gi * ci;
                    }
                }
                &Op::Scale(a, s) | &Op::AffineConst(a, s) => {
                    let da = acc(&mut grads, a, g.len());
                    for (d, gi) in da.iter_mut().zip(&g) {
                        *d += gi * s;
                    }
                }
                &Op::ScalarAffine { x, w, b } => {
                    let (xv, wv) = (self.value(x), self.value(w)[0]);
                    let dw_sum: f64 = g.iter().zip(xv).map(|(gi, xi)| gi * xi).sum();
                    let db_sum: f64 = g.iter().sum();
                    let dx = acc(&mut grads, x, g.len());
                    for (d, gi) in dx.iter_mut().zip(&g) {
                        *d += gi * wv;
                    }
                    acc(&mut grads, w, 1)[0] += dw_sum;
                    acc(&mut grads, b, 1)[0] += db_sum;
                }
                Op::Concat(parts) => {
                    let total = *node.shape.last().unwrap();
                    let rows = g.len() / total;
                    let mut offset = 0;
                    for &p in parts {
                        let w = *self.shape(p).last().unwrap();
                        let dp = acc(&mut grads, p, rows * w);
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                        offset += w;
                    }
                }
                &Op::BroadcastRows(v) => {
                    let h = self.shape(v)[0];
                    let dv = acc(&mut grads, v, h);
                    for row in g.chunks(h) {
                        add_into(dv, row);
                    }
                }
                &Op::SliceCols(a, start) => {
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    let w = node.shape[1];
                    let da = acc(&mut grads, a, m * n);
                    for r in 0..m {
                        add_into(
                            &mut da[r * n + start..r * n + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                }
                &Op::Row(a, r) => {
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    let da = acc(&mut grads, a, m * n);
                    add_into(&mut da[r * n..(r + 1) * n], &g);
                }
                Op::Gather(table, ids) => {
                    let (v, h) = (self.shape(*table)[0], self.shape(*table)[1]);
                    let dt = acc(&mut grads, *table, v * h);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * h..(id + 1) * h], &g[r * h..(r + 1) * h]);
                    }
                }
                &Op::Relu(x) => {
                    let xv = self.value(x);
                    let dx = acc(&mut grads, x, g.len());
                    for ((d, gi), xi) in dx.iter_mut().zip(&g).zip(xv) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
                &Op::Gelu(x) => {
                    let xv = self.value(x);
                    let dx = acc(&mut grads, x, g.len());
                    for ((d, gi), &v) in dx.iter_mut().zip(&g).zip(xv) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *d += gi * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                }
                &Op::Sigmoid(x) => {
                    let y = &node.value;
                    let dx = acc(&mut grads, x, g.len());
                    for ((d, gi), yi) in dx.iter_mut().zip(&g).zip(y.iter()) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
                &Op::Clamp(x, lo, hi) => {
                    let xv = self.value(x);
                    let dx = acc(&mut grads, x, g.len());
                    for ((d, gi), xi) in dx.iter_mut().zip(&g).zip(xv) {
                        if *xi >= lo && *xi <= hi {
                            *d += gi;
                        }
                    }
                }
                &Op::Ln(x) => {
                    let xv = self.value(x);
                    let dx = acc(&mut grads, x, g.len());
                    for ((d, gi), xi) in dx.iter_mut().zip(&g).zip(xv) {
                        *d += gi / xi;
                    }
                }
                &Op::MaskedSoftmax(x) => {
                    let cols = *node.shape.last().unwrap();
                    let y = &node.value;
                    let dx = acc(&mut grads, x, g.len());
                    for ((dr, gr), yr) in
                        dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let s = dot(gr, yr);
                        for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - s);
                        }
                    }
                }
                &Op::WeightedSum(w, rows) => {
                    let (l, h) = (self.shape(rows)[0], self.shape(rows)[1]);
                    let (wv, rv) = (self.value(w), self.value(rows));
                    {
                        let dw = acc(&mut grads, w, l);
                        for t in 0..l {
                            dw[t] += dot(&g, &rv[t * h..(t + 1) * h]);
                        }
                    }
                    let dr = acc(&mut grads, rows, l * h);
                    for t in 0..l {
                        axpy(wv[t], &g, &mut dr[t * h..(t + 1) * h]);
                    }
                }
                &Op::LayerNorm { x, gain, bias, eps } => {
                    let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                    let (xv, gv) = (self.value(x), self.value(gain));
                    let mut dgain = vec![0.0; n];
                    let mut dbias = vec![0.0; n];
                    let mut dxhat = vec![0.0; n];
                    let mut xhat = vec![0.0; n];
                    let dx = acc(&mut grads, x, m * n);
                    for r in 0..m {
                        let row = &xv[r * n..(r + 1) * n];
                        let grow = &g[r * n..(r + 1) * n];
                        let (mean, inv_std) = row_stats(row, eps);
                        for j in 0..n {
                            xhat[j] = (row[j] - mean) * inv_std;
                            dxhat[j] = grow[j] * gv[j];
                            dgain[j] += grow[j] * xhat[j];
                            dbias[j] += grow[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dot(&dxhat, &xhat) / n as f64;
                        for j in 0..n {
                            dx[r * n + j] += inv_std * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                        }
                    }
                    add_into(acc(&mut grads, gain, n), &dgain);
                    add_into(acc(&mut grads, bias, n), &dbias);
                }
                &Op::Pick(x, i) => {
                    let n = self.shape(x)[0];
                    acc(&mut grads, x, n)[i] += g[0];
                }
                &Op::Sum(x) => {
                    let n = self.value(x).len();
                    acc(&mut grads, x, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], orow);
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Writes the masked softmax of `logits` into `out`. The caller guarantees
/// at least one unmasked position.
pub(crate) fn masked_softmax_row(logits: &[f64], mask: &[bool], out: &mut [f64]) {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for ((o, &v), &m) in out.iter_mut().zip(logits).zip(mask) {
        *o = if m { (v - max).exp() } else { 0.0 };
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}
