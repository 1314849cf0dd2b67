//! Eager reverse-mode autodiff over a per-batch tape.
//!
//! A [`Graph`] records every operation as it is built; forward values are
//! computed immediately, so the tape is topologically sorted by construction.
//! [`Graph::backward`] replays the tape in reverse and accumulates exact
//! gradients for every differentiable leaf. [`Graph::reevaluate`] replays the
//! whole tape with new leaf bindings, which is what the finite-difference
//! checker and the purity tests use.
//!
//! Leaves come in two kinds: [`Graph::param`] (named, differentiable) and
//! [`Graph::frozen`] / [`Graph::constant`] (gradients never flow into them).
//! Frozen encoder weights enter as frozen leaves, so a backward pass cannot
//! reach them by construction.

use std::collections::BTreeMap;

use crate::tensor::{matmul_nt_raw, matmul_raw, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("invalid shape: {detail}")]
    InvalidShape { detail: String },
    #[error("shape mismatch in `{op}` at node {node}: {detail}")]
    ShapeMismatch { op: &'static str, node: usize, detail: String },
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("unknown variable id {0}")]
    UnknownVar(usize),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate leaf name `{0}`")]
    DuplicateLeaf(String),
    #[error("backward seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape { seed: Vec<usize>, output: Vec<usize> },
    #[error("zero-norm vector in `{op}` at node {node}")]
    ZeroNorm { op: &'static str, node: usize },
    #[error("`{op}` at node {node} requires {expected}, got {got}")]
    DomainError { op: &'static str, node: usize, expected: &'static str, got: String },
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    Matmul,
    MatmulNT,
    Transpose,
    Add,
    AddRowBroadcast,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Powf(f64),
    Log,
    Gelu,
    ConcatRows,
    ConcatCols,
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    Reshape,
    Softmax,
    LayerNorm { eps: f64 },
    EmbeddingLookup { ids: Vec<usize> },
    SumAll,
    MeanAll,
    MeanRows,
    CosineSim,
    L2Normalize,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::Matmul => "matmul",
            Op::MatmulNT => "matmul_nt",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::AddRowBroadcast => "add_row_broadcast",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Powf(_) => "powf",
            Op::Log => "log",
            Op::Gelu => "gelu",
            Op::ConcatRows => "concat_rows",
            Op::ConcatCols => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape => "reshape",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::EmbeddingLookup { .. } => "embedding_lookup",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
            Op::MeanRows => "mean_rows",
            Op::CosineSim => "cosine_similarity",
            Op::L2Normalize => "l2_normalize",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
    name: Option<String>,
}

/// Per-leaf gradients returned by [`Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.map.insert(name, grad);
    }

    /// Element-wise accumulate another gradient map (shapes must agree).
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in other.iter() {
            match self.map.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub type Result<T> = std::result::Result<T, GraphError>;

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(GraphError::NonFinite { op: op.name(), node: id });
        }
        let requires_grad = match op {
            Op::Param => true,
            Op::Constant => false,
            _ => inputs.iter().any(|&i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { op, inputs, value, requires_grad, name: None });
        Ok(Var(id))
    }

    fn named_exists(&self, name: &str) -> bool {
        self.nodes.iter().any(|n| n.name.as_deref() == Some(name))
    }

    /// Named differentiable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.named_exists(name) {
            return Err(GraphError::DuplicateLeaf(name.to_string()));
        }
        let v = self.push(Op::Param, vec![], value)?;
        self.nodes[v.0].name = Some(name.to_string());
        Ok(v)
    }

    /// Named non-differentiable leaf; rebindable but opaque to backward.
    pub fn frozen(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.named_exists(name) {
            return Err(GraphError::DuplicateLeaf(name.to_string()));
        }
        let v = self.push(Op::Constant, vec![], value)?;
        self.nodes[v.0].name = Some(name.to_string());
        Ok(v)
    }

    /// Anonymous constant.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Constant, vec![], value)
    }

    fn node_mismatch(&self, op: &'static str, detail: String) -> GraphError {
        GraphError::ShapeMismatch { op, node: self.nodes.len(), detail }
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// a[m,k] @ b[k,n] -> [m,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.node_mismatch("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push(Op::Matmul, vec![a, b], Tensor::new(vec![m, n], out)?)
    }

    /// a[m,k] @ b[n,k]^T -> [m,n].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(self.node_mismatch("matmul_nt", format!("{sa:?} @ {sb:?}^T")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let out = matmul_nt_raw(ta.data(), tb.data(), m, k, n);
        self.push(Op::MatmulNT, vec![a, b], Tensor::new(vec![m, n], out)?)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 2 {
            return Err(self.node_mismatch("transpose", format!("rank {} input", t.rank())));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let value = transpose_raw(t, m, n);
        self.push(Op::Transpose, vec![a], value)
    }

    // ── Element-wise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(self.node_mismatch("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Add, vec![a, b], value)
    }

    /// a[m,n] + b[n], b added to every row of a.
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(self.node_mismatch("add_row_broadcast", format!("{sa:?} + {sb:?}")));
        }
        let (m, n) = (sa[0], sa[1]);
        let mut data = ta.data().to_vec();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += tb.data()[c];
            }
        }
        self.push(Op::AddRowBroadcast, vec![a, b], Tensor::new(vec![m, n], data)?)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(self.node_mismatch("mul", format!("{:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Mul, vec![a, b], value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::Scale(c), vec![a], value)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|x| x + c).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::AddScalar(c), vec![a], value)
    }

    /// Element-wise x^p. Inputs must be non-negative.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if let Some(bad) = t.data().iter().find(|v| **v < 0.0) {
            return Err(GraphError::DomainError {
                op: "powf",
                node: self.nodes.len(),
                expected: "non-negative input",
                got: format!("{bad}"),
            });
        }
        let data = t.data().iter().map(|x| x.powf(p)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::Powf(p), vec![a], value)
    }

    /// Element-wise natural log. Inputs must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if let Some(bad) = t.data().iter().find(|v| **v <= 0.0) {
            return Err(GraphError::DomainError {
                op: "log",
                node: self.nodes.len(),
                expected: "strictly positive input",
                got: format!("{bad}"),
            });
        }
        let data = t.data().iter().map(|x| x.ln()).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::Log, vec![a], value)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| gelu_fwd(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::Gelu, vec![a], value)
    }

    // ── Shape ────────────────────────────────────────────────────────

    /// Concatenate along the first axis; all inputs must share trailing shape.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(self.node_mismatch("concat_rows", "empty input list".into()));
        }
        let rank = self.nodes[parts[0].0].value.rank();
        let mut data = Vec::new();
        let mut rows = 0usize;
        let mut cols = None;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.rank() != rank {
                return Err(self.node_mismatch("concat_rows", "mixed ranks".into()));
            }
            match rank {
                1 => rows += t.shape()[0],
                2 => {
                    let c = t.shape()[1];
                    if *cols.get_or_insert(c) != c {
                        return Err(self.node_mismatch("concat_rows", "column counts differ".into()));
                    }
                    rows += t.shape()[0];
                }
                _ => return Err(self.node_mismatch("concat_rows", "rank > 2".into())),
            }
            data.extend_from_slice(t.data());
        }
        let shape = match rank {
            1 => vec![rows],
            _ => vec![rows, cols.unwrap()],
        };
        self.push(Op::ConcatRows, parts.to_vec(), Tensor::new(shape, data)?)
    }

    /// Concatenate rank-2 tensors along columns; all inputs share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(self.node_mismatch("concat_cols", "empty input list".into()));
        }
        let m = self.nodes[parts[0].0].value.shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.rank() != 2 || t.shape()[0] != m {
                return Err(self.node_mismatch("concat_cols", "row counts differ".into()));
            }
            widths.push(t.shape()[1]);
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = &self.nodes[p.0].value;
            for r in 0..m {
                data[r * n + off..r * n + off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        self.push(Op::ConcatCols, parts.to_vec(), Tensor::new(vec![m, n], data)?)
    }

    /// Slice along the first axis (elements of a vector, rows of a matrix).
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let total = t.shape()[0];
        if start + len > total || len == 0 {
            return Err(self.node_mismatch(
                "slice_rows",
                format!("range {start}..{} of {total} rows", start + len),
            ));
        }
        let (value, inputs) = match t.rank() {
            1 => (Tensor::vector(t.data()[start..start + len].to_vec()), vec![a]),
            2 => {
                let c = t.shape()[1];
                let data = t.data()[start * c..(start + len) * c].to_vec();
                (Tensor::new(vec![len, c], data)?, vec![a])
            }
            _ => return Err(self.node_mismatch("slice_rows", "rank > 2".into())),
        };
        self.push(Op::SliceRows { start, len }, inputs, value)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 2 {
            return Err(self.node_mismatch("slice_cols", "rank-2 input required".into()));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        if start + len > n || len == 0 {
            return Err(self.node_mismatch(
                "slice_cols",
                format!("range {start}..{} of {n} cols", start + len),
            ));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&t.data()[r * n + start..r * n + start + len]);
        }
        self.push(Op::SliceCols { start, len }, vec![a], Tensor::new(vec![m, len], data)?)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(self.node_mismatch(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", t.shape()),
            ));
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        self.push(Op::Reshape, vec![a], value)
    }

    // ── Neural ops ───────────────────────────────────────────────────

    /// Row-wise softmax (a vector counts as a single row).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (rows, cols) = t.rows_cols();
        let mut data = vec![0.0; t.numel()];
        for r in 0..rows {
            let x = &t.data()[r * cols..(r + 1) * cols];
            softmax_row(x, &mut data[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::Softmax, vec![a], value)
    }

    /// Row-wise layer normalization without affine parameters.
    /// Degenerate (constant) rows normalize to zeros via the epsilon.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (rows, cols) = t.rows_cols();
        let mut data = vec![0.0; t.numel()];
        for r in 0..rows {
            let x = &t.data()[r * cols..(r + 1) * cols];
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = (v - mean) * inv;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::LayerNorm { eps }, vec![a], value)
    }

    /// Gather rows of `table` by fixed indices: table[V,d] -> [ids.len(), d].
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        if t.rank() != 2 {
            return Err(self.node_mismatch("embedding_lookup", "rank-2 table required".into()));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(self.node_mismatch(
                "embedding_lookup",
                format!("index {bad} out of range for table with {v} rows"),
            ));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.push(Op::EmbeddingLookup { ids: ids.to_vec() }, vec![table], value)
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::SumAll, vec![a], Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::MeanAll, vec![a], Tensor::scalar(s))
    }

    /// Column means of a rank-2 tensor: [m,n] -> [n].
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 2 {
            return Err(self.node_mismatch("mean_rows", "rank-2 input required".into()));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                out[c] += t.data()[r * n + c];
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.push(Op::MeanRows, vec![a], Tensor::vector(out))
    }

    // ── Vector geometry ──────────────────────────────────────────────

    /// Cosine similarity of two vectors -> scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 1 || tb.rank() != 1 || ta.numel() != tb.numel() {
            return Err(self.node_mismatch(
                "cosine_similarity",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (na, nb) = (ta.norm(), tb.norm());
        if na == 0.0 || nb == 0.0 {
            return Err(GraphError::ZeroNorm { op: "cosine_similarity", node: self.nodes.len() });
        }
        let c = ta.dot(tb) / (na * nb);
        self.push(Op::CosineSim, vec![a, b], Tensor::scalar(c))
    }

    /// Normalize a vector to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 1 {
            return Err(self.node_mismatch("l2_normalize", "rank-1 input required".into()));
        }
        let n = t.norm();
        if n == 0.0 {
            return Err(GraphError::ZeroNorm { op: "l2_normalize", node: self.nodes.len() });
        }
        let data = t.data().iter().map(|x| x / n).collect();
        self.push(Op::L2Normalize, vec![a], Tensor::vector(data))
    }

    // ── Composite: multi-head attention ──────────────────────────────

    /// Scaled dot-product attention over `heads` column slices of q/k/v,
    /// with an optional additive score mask (use large negatives to block).
    /// Built from the primitive ops, so gradients come from the tape.
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let d = {
            let (tq, tk, tv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
            if tq.rank() != 2 || tk.rank() != 2 || tv.rank() != 2 {
                return Err(self.node_mismatch("multi_head_attention", "rank-2 q/k/v required".into()));
            }
            let d = tq.shape()[1];
            if tk.shape()[1] != d || tv.shape()[1] != d || tk.shape()[0] != tv.shape()[0] {
                return Err(self.node_mismatch(
                    "multi_head_attention",
                    format!("q {:?}, k {:?}, v {:?}", tq.shape(), tk.shape(), tv.shape()),
                ));
            }
            if heads == 0 || d % heads != 0 {
                return Err(self.node_mismatch(
                    "multi_head_attention",
                    format!("dim {d} not divisible by {heads} heads"),
                ));
            }
            d
        };
        let head_dim = d / heads;
        let mask_var = match mask {
            Some(m) => Some(self.constant(m.clone())?),
            None => None,
        };
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.slice_cols(q, h * head_dim, head_dim)?;
            let kh = self.slice_cols(k, h * head_dim, head_dim)?;
            let vh = self.slice_cols(v, h * head_dim, head_dim)?;
            let scores = self.matmul_nt(qh, kh)?;
            let scaled = self.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
            let masked = match mask_var {
                Some(m) => self.add(scaled, m)?,
                None => scaled,
            };
            let probs = self.softmax(masked)?;
            outs.push(self.matmul(probs, vh)?);
        }
        self.concat_cols(&outs)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Backward from a scalar (or any) output with an all-ones seed.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let shape = self.nodes.get(output.0).ok_or(GraphError::UnknownVar(output.0))?.value.shape();
        let seed = Tensor::ones(shape);
        self.backward_with_seed(output, &seed)
    }

    /// Reverse pass seeded at `output`. Returns gradients for every named
    /// differentiable leaf; leaves the output does not depend on get zeros.
    pub fn backward_with_seed(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        let out_node = self.nodes.get(output.0).ok_or(GraphError::UnknownVar(output.0))?;
        if seed.shape() != out_node.value.shape() {
            return Err(GraphError::SeedShape {
                seed: seed.shape().to_vec(),
                output: out_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param, Some(name)) = (&node.op, &node.name) {
                let grad = grads[idx].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                if !grad.is_finite() {
                    return Err(GraphError::NonFinite { op: "backward", node: idx });
                }
                out.insert(name.clone(), grad);
            }
        }
        Ok(out)
    }

    fn accumulate(grads: &mut [Option<Tensor>], target: usize, delta: Tensor) {
        match &mut grads[target] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
            None => grads[target] = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let input_val = |i: usize| &self.nodes[node.inputs[i].0].value;
        let needs = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        let put = |slot: usize, delta: Tensor, grads: &mut [Option<Tensor>]| {
            Self::accumulate(grads, node.inputs[slot].0, delta);
        };

        match &node.op {
            Op::Param | Op::Constant => {}
            Op::Matmul => {
                let (a, b) = (input_val(0), input_val(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if needs(0) {
                    // dA = dC @ B^T
                    let da = matmul_nt_raw(g.data(), b.data(), m, n, k);
                    put(0, Tensor::new(vec![m, k], da)?, grads);
                }
                if needs(1) {
                    // dB = A^T @ dC
                    let db = matmul_tn_raw(a.data(), g.data(), m, k, n);
                    put(1, Tensor::new(vec![k, n], db)?, grads);
                }
            }
            Op::MatmulNT => {
                // C = A @ B^T with A[m,k], B[n,k]
                let (a, b) = (input_val(0), input_val(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[0];
                if needs(0) {
                    // dA = dC @ B
                    let da = matmul_raw(g.data(), b.data(), m, n, k);
                    put(0, Tensor::new(vec![m, k], da)?, grads);
                }
                if needs(1) {
                    // dB = dC^T @ A
                    let db = matmul_tn_raw(g.data(), a.data(), m, n, k);
                    put(1, Tensor::new(vec![n, k], db)?, grads);
                }
            }
            Op::Transpose => {
                let (n, m) = (g.shape()[0], g.shape()[1]);
                put(0, transpose_raw(g, n, m), grads);
            }
            Op::Add => {
                if needs(0) {
                    put(0, g.clone(), grads);
                }
                if needs(1) {
                    put(1, g.clone(), grads);
                }
            }
            Op::AddRowBroadcast => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                if needs(0) {
                    put(0, g.clone(), grads);
                }
                if needs(1) {
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += g.data()[r * n + c];
                        }
                    }
                    put(1, Tensor::vector(db), grads);
                }
            }
            Op::Mul => {
                let (a, b) = (input_val(0), input_val(1));
                if needs(0) {
                    let da = g.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                    put(0, Tensor::new(a.shape().to_vec(), da)?, grads);
                }
                if needs(1) {
                    let db = g.data().iter().zip(a.data()).map(|(x, y)| x * y).collect();
                    put(1, Tensor::new(b.shape().to_vec(), db)?, grads);
                }
            }
            Op::Scale(c) => {
                let da = g.data().iter().map(|x| x * c).collect();
                put(0, Tensor::new(g.shape().to_vec(), da)?, grads);
            }
            Op::AddScalar(_) => put(0, g.clone(), grads),
            Op::Powf(p) => {
                let x = input_val(0);
                let da = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| {
                        if *p == 0.0 {
                            0.0
                        } else if xv == 0.0 {
                            // subgradient convention at the boundary
                            0.0
                        } else {
                            p * xv.powf(p - 1.0) * gv
                        }
                    })
                    .collect();
                put(0, Tensor::new(x.shape().to_vec(), da)?, grads);
            }
            Op::Log => {
                let x = input_val(0);
                let da = x.data().iter().zip(g.data()).map(|(xv, gv)| gv / xv).collect();
                put(0, Tensor::new(x.shape().to_vec(), da)?, grads);
            }
            Op::Gelu => {
                let x = input_val(0);
                let da = x.data().iter().zip(g.data()).map(|(&xv, &gv)| gelu_bwd(xv) * gv).collect();
                put(0, Tensor::new(x.shape().to_vec(), da)?, grads);
            }
            Op::ConcatRows => {
                let mut off = 0;
                for (slot, &inp) in node.inputs.iter().enumerate() {
                    let t = &self.nodes[inp.0].value;
                    let len = t.numel();
                    if self.nodes[inp.0].requires_grad {
                        let part = g.data()[off..off + len].to_vec();
                        put(slot, Tensor::new(t.shape().to_vec(), part)?, grads);
                    }
                    off += len;
                }
            }
            Op::ConcatCols => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let mut off = 0;
                for (slot, &inp) in node.inputs.iter().enumerate() {
                    let t = &self.nodes[inp.0].value;
                    let w = t.shape()[1];
                    if self.nodes[inp.0].requires_grad {
                        let mut part = vec![0.0; m * w];
                        for r in 0..m {
                            part[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data()[r * n + off..r * n + off + w]);
                        }
                        put(slot, Tensor::new(vec![m, w], part)?, grads);
                    }
                    off += w;
                }
            }
            Op::SliceRows { start, len } => {
                let src = input_val(0);
                let mut da = Tensor::zeros(src.shape());
                let width = match src.rank() {
                    1 => 1,
                    _ => src.shape()[1],
                };
                da.data_mut()[start * width..(start + len) * width].copy_from_slice(g.data());
                put(0, da, grads);
            }
            Op::SliceCols { start, len } => {
                let src = input_val(0);
                let (m, n) = (src.shape()[0], src.shape()[1]);
                let mut da = Tensor::zeros(src.shape());
                for r in 0..m {
                    da.data_mut()[r * n + start..r * n + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                put(0, da, grads);
            }
            Op::Reshape => {
                let src = input_val(0);
                put(0, Tensor::new(src.shape().to_vec(), g.data().to_vec())?, grads);
            }
            Op::Softmax => {
                let y = &node.value;
                let (rows, cols) = y.rows_cols();
                let mut da = vec![0.0; y.numel()];
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        da[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                put(0, Tensor::new(y.shape().to_vec(), da)?, grads);
            }
            Op::LayerNorm { eps } => {
                let x = input_val(0);
                let y = &node.value;
                let (rows, cols) = x.rows_cols();
                let nf = cols as f64;
                let mut da = vec![0.0; x.numel()];
                for r in 0..rows {
                    let xr = &x.data()[r * cols..(r + 1) * cols];
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let mean = xr.iter().sum::<f64>() / nf;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = gr.iter().sum::<f64>() / nf;
                    let gydot = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for c in 0..cols {
                        da[r * cols + c] = inv * (gr[c] - gmean - yr[c] * gydot);
                    }
                }
                put(0, Tensor::new(x.shape().to_vec(), da)?, grads);
            }
            Op::EmbeddingLookup { ids } => {
                let table = input_val(0);
                let d = table.shape()[1];
                let mut da = Tensor::zeros(table.shape());
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        da.data_mut()[id * d + c] += g.data()[row * d + c];
                    }
                }
                put(0, da, grads);
            }
            Op::SumAll => {
                let x = input_val(0);
                let mut da = Tensor::zeros(x.shape());
                da.data_mut().fill(g.item());
                put(0, da, grads);
            }
            Op::MeanAll => {
                let x = input_val(0);
                let mut da = Tensor::zeros(x.shape());
                da.data_mut().fill(g.item() / x.numel() as f64);
                put(0, da, grads);
            }
            Op::MeanRows => {
                let x = input_val(0);
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] = g.data()[c] / m as f64;
                    }
                }
                put(0, Tensor::new(vec![m, n], da)?, grads);
            }
            Op::CosineSim => {
                let (a, b) = (input_val(0), input_val(1));
                let (na, nb) = (a.norm(), b.norm());
                let c = node.value.item();
                let gv = g.item();
                if needs(0) {
                    let da = a
                        .data()
                        .iter()
                        .zip(b.data())
                        .map(|(&av, &bv)| gv * (bv / (na * nb) - c * av / (na * na)))
                        .collect();
                    put(0, Tensor::vector(da), grads);
                }
                if needs(1) {
                    let db = a
                        .data()
                        .iter()
                        .zip(b.data())
                        .map(|(&av, &bv)| gv * (av / (na * nb) - c * bv / (nb * nb)))
                        .collect();
                    put(1, Tensor::vector(db), grads);
                }
            }
            Op::L2Normalize => {
                let x = input_val(0);
                let n = x.norm();
                let y = &node.value;
                let dot: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                let da = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| (gv - dot * yv) / n)
                    .collect();
                put(0, Tensor::vector(da), grads);
            }
        }
        Ok(())
    }

    // ── Replay ───────────────────────────────────────────────────────

    /// Replace the values of named leaves and recompute the whole tape.
    /// Forward is a pure function of the bindings: identical bindings give
    /// bitwise-identical values.
    pub fn reevaluate(&mut self, bindings: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in bindings {
            self.set_leaf(name, t.clone())?;
        }
        self.recompute()
    }

    /// Overwrite one named leaf's value without recomputing downstream nodes.
    /// Call [`Graph::recompute`] before reading any non-leaf value.
    pub fn set_leaf(&mut self, name: &str, value: Tensor) -> Result<()> {
        let node = self
            .nodes
            .iter_mut()
            .find(|n| n.name.as_deref() == Some(name))
            .ok_or_else(|| GraphError::UnknownParam(name.to_string()))?;
        if value.shape() != node.value.shape() {
            return Err(GraphError::InvalidShape {
                detail: format!(
                    "binding `{name}` has shape {:?}, leaf expects {:?}",
                    value.shape(),
                    node.value.shape()
                ),
            });
        }
        node.value = value;
        Ok(())
    }

    /// Current value of a named leaf.
    pub fn leaf_value(&self, name: &str) -> Result<&Tensor> {
        self.nodes
            .iter()
            .find(|n| n.name.as_deref() == Some(name))
            .map(|n| &n.value)
            .ok_or_else(|| GraphError::UnknownParam(name.to_string()))
    }

    /// Named differentiable leaves as (name, shape) in tape order.
    pub fn param_leaves(&self) -> Vec<(String, Vec<usize>)> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Param))
            .filter_map(|n| n.name.as_ref().map(|s| (s.clone(), n.value.shape().to_vec())))
            .collect()
    }

    /// Recompute every non-leaf node in tape order.
    pub fn recompute(&mut self) -> Result<()> {
        for idx in 0..self.nodes.len() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Param | Op::Constant) {
                continue;
            }
            let value = self.eval_node(idx)?;
            if !value.is_finite() {
                return Err(GraphError::NonFinite { op: self.nodes[idx].op.name(), node: idx });
            }
            self.nodes[idx].value = value;
        }
        Ok(())
    }

    fn eval_node(&self, idx: usize) -> Result<Tensor> {
        let node = &self.nodes[idx];
        let input = |i: usize| &self.nodes[node.inputs[i].0].value;
        Ok(match &node.op {
            Op::Param | Op::Constant => node.value.clone(),
            Op::Matmul => {
                let (a, b) = (input(0), input(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))?
            }
            Op::MatmulNT => {
                let (a, b) = (input(0), input(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
                Tensor::new(vec![m, n], matmul_nt_raw(a.data(), b.data(), m, k, n))?
            }
            Op::Transpose => {
                let a = input(0);
                transpose_raw(a, a.shape()[0], a.shape()[1])
            }
            Op::Add => {
                let (a, b) = (input(0), input(1));
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::AddRowBroadcast => {
                let (a, b) = (input(0), input(1));
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let mut data = a.data().to_vec();
                for r in 0..m {
                    for c in 0..n {
                        data[r * n + c] += b.data()[c];
                    }
                }
                Tensor::new(vec![m, n], data)?
            }
            Op::Mul => {
                let (a, b) = (input(0), input(1));
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Scale(c) => {
                let a = input(0);
                Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x * c).collect())?
            }
            Op::AddScalar(c) => {
                let a = input(0);
                Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x + c).collect())?
            }
            Op::Powf(p) => {
                let a = input(0);
                if a.data().iter().any(|v| *v < 0.0) {
                    return Err(GraphError::DomainError {
                        op: "powf",
                        node: idx,
                        expected: "non-negative input",
                        got: "negative value on replay".into(),
                    });
                }
                Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x.powf(*p)).collect())?
            }
            Op::Log => {
                let a = input(0);
                if a.data().iter().any(|v| *v <= 0.0) {
                    return Err(GraphError::DomainError {
                        op: "log",
                        node: idx,
                        expected: "strictly positive input",
                        got: "non-positive value on replay".into(),
                    });
                }
                Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x.ln()).collect())?
            }
            Op::Gelu => {
                let a = input(0);
                Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| gelu_fwd(x)).collect())?
            }
            Op::ConcatRows => {
                let mut data = Vec::with_capacity(node.value.numel());
                for &p in &node.inputs {
                    data.extend_from_slice(self.nodes[p.0].value.data());
                }
                Tensor::new(node.value.shape().to_vec(), data)?
            }
            Op::ConcatCols => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let mut data = vec![0.0; m * n];
                let mut off = 0;
                for &p in &node.inputs {
                    let t = &self.nodes[p.0].value;
                    let w = t.shape()[1];
                    for r in 0..m {
                        data[r * n + off..r * n + off + w].copy_from_slice(t.row(r));
                    }
                    off += w;
                }
                Tensor::new(vec![m, n], data)?
            }
            Op::SliceRows { start, len } => {
                let a = input(0);
                let width = match a.rank() {
                    1 => 1,
                    _ => a.shape()[1],
                };
                let data = a.data()[start * width..(start + len) * width].to_vec();
                Tensor::new(node.value.shape().to_vec(), data)?
            }
            Op::SliceCols { start, len } => {
                let a = input(0);
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let mut data = Vec::with_capacity(m * len);
                for r in 0..m {
                    data.extend_from_slice(&a.data()[r * n + start..r * n + start + len]);
                }
                Tensor::new(vec![m, *len], data)?
            }
            Op::Reshape => {
                Tensor::new(node.value.shape().to_vec(), input(0).data().to_vec())?
            }
            Op::Softmax => {
                let a = input(0);
                let (rows, cols) = a.rows_cols();
                let mut data = vec![0.0; a.numel()];
                for r in 0..rows {
                    softmax_row(
                        &a.data()[r * cols..(r + 1) * cols],
                        &mut data[r * cols..(r + 1) * cols],
                    );
                }
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::LayerNorm { eps } => {
                let a = input(0);
                let (rows, cols) = a.rows_cols();
                let mut data = vec![0.0; a.numel()];
                for r in 0..rows {
                    let x = &a.data()[r * cols..(r + 1) * cols];
                    let mean = x.iter().sum::<f64>() / cols as f64;
                    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                        *o = (v - mean) * inv;
                    }
                }
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::EmbeddingLookup { ids } => {
                let t = input(0);
                let d = t.shape()[1];
                let mut data = Vec::with_capacity(ids.len() * d);
                for &i in ids {
                    data.extend_from_slice(t.row(i));
                }
                Tensor::new(vec![ids.len(), d], data)?
            }
            Op::SumAll => Tensor::scalar(input(0).data().iter().sum()),
            Op::MeanAll => {
                let a = input(0);
                Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)
            }
            Op::MeanRows => {
                let a = input(0);
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let mut out = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        out[c] += a.data()[r * n + c];
                    }
                }
                for o in &mut out {
                    *o /= m as f64;
                }
                Tensor::vector(out)
            }
            Op::CosineSim => {
                let (a, b) = (input(0), input(1));
                let (na, nb) = (a.norm(), b.norm());
                if na == 0.0 || nb == 0.0 {
                    return Err(GraphError::ZeroNorm { op: "cosine_similarity", node: idx });
                }
                Tensor::scalar(a.dot(b) / (na * nb))
            }
            Op::L2Normalize => {
                let a = input(0);
                let n = a.norm();
                if n == 0.0 {
                    return Err(GraphError::ZeroNorm { op: "l2_normalize", node: idx });
                }
                Tensor::vector(a.data().iter().map(|x| x / n).collect())
            }
        })
    }
}

fn transpose_raw(t: &Tensor, m: usize, n: usize) -> Tensor {
    let mut data = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            data[c * m + r] = t.data()[r * n + c];
        }
    }
    Tensor::new(vec![n, m], data).expect("transpose preserves element count")
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

pub(crate) fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// a[m,k]^T @ b[m,n] -> [k,n].
fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_graph() -> (Graph, Var, Var, Var) {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(2.0)).unwrap();
        let y = g.param("y", Tensor::scalar(3.0)).unwrap();
        let z = g.mul(x, y).unwrap();
        (g, x, y, z)
    }

    #[test]
    fn product_rule() {
        // d(x*y)/dx at x=2, y=3 -> 3
        let (g, _, _, z) = scalar_graph();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 3.0);
        assert_eq!(grads.get("y").unwrap().item(), 2.0);
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_sums_to_one_and_positive() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut g = Graph::new();
            let x = g.constant(Tensor::randn(&[7], 3.0, &mut rng)).unwrap();
            let s = g.softmax(x).unwrap();
            let sum: f64 = g.value(s).data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(g.value(s).data().iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn softmax_gradient_of_sum_is_zero() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
        let s = g.softmax(x).unwrap();
        let total = g.sum_all(s).unwrap();
        let grads = g.backward(total).unwrap();
        for &v in grads.get("x").unwrap().data() {
            assert!(v.abs() < 1e-14, "grad {v} not ~0");
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![4.2; 6])).unwrap();
        let y = g.layer_norm(x, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_moments() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[4, 16], 2.0, &mut rng)).unwrap();
        let y = g.layer_norm(x, 1e-5).unwrap();
        let t = g.value(y);
        for r in 0..4 {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            // output variance is var/(var+eps), so allow the eps-sized bias
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn single_token_attention_returns_value_row() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let tok = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let x = g.constant(tok.clone()).unwrap();
        let out = g.multi_head_attention(x, x, x, 2, None).unwrap();
        assert_eq!(g.value(out).data(), tok.data());
    }

    #[test]
    fn forward_is_pure_under_rebinding() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let w0 = Tensor::randn(&[6, 6], 0.7, &mut rng);
        let x0 = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let mut g = Graph::new();
        let w = g.param("w", w0.clone()).unwrap();
        let x = g.frozen("x", x0.clone()).unwrap();
        let h = g.matmul(x, w).unwrap();
        let a = g.gelu(h).unwrap();
        let n = g.layer_norm(a, 1e-5).unwrap();
        let out = g.mean_all(n).unwrap();
        let first = g.value(out).clone();

        let mut bindings = BTreeMap::new();
        bindings.insert("w".to_string(), w0);
        bindings.insert("x".to_string(), x0);
        g.reevaluate(&bindings).unwrap();
        assert_eq!(g.value(out), &first, "replay with identical bindings must be bitwise equal");
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(1.0)).unwrap();
        let _unused = g.param("unused", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let y = g.scale(x, 4.0).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.get("x").unwrap().item(), 4.0);
    }

    #[test]
    fn frozen_leaves_get_no_gradient_entry() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(2.0)).unwrap();
        let w = g.frozen("w", Tensor::scalar(5.0)).unwrap();
        let y = g.mul(x, w).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get("w").is_none());
        assert_eq!(grads.get("x").unwrap().item(), 5.0);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let b = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("node"), "{msg}");
    }

    #[test]
    fn seed_shape_checked() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let y = g.scale(x, 2.0).unwrap();
        let bad = Tensor::scalar(1.0);
        assert!(matches!(
            g.backward_with_seed(y, &bad),
            Err(GraphError::SeedShape { .. })
        ));
    }

    #[test]
    fn masked_softmax_blocks_future_positions() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 4, vec![1.0; 8]).unwrap()).unwrap();
        let mask = Tensor::matrix(2, 2, vec![0.0, -1e9, 0.0, 0.0]).unwrap();
        let out = g.multi_head_attention(x, x, x, 1, Some(&mask)).unwrap();
        // row 0 attends only to itself -> equals the single value row
        assert_eq!(g.value(out).row(0), &[1.0; 4]);
    }
}
