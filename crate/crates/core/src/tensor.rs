//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A `Graph` is a define-by-run tape: every operation evaluates eagerly and
//! records what it needs to replay the chain rule backwards. Values are flat
//! row-major buffers tagged with a shape; the scalar shape is `[]`.

use std::fmt;

use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Errors raised while building or differentiating a graph.
#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: data length {got} does not match shape {shape:?} ({expected} elements)")]
    DataLength {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: invalid argument: {what}")]
    Invalid { op: &'static str, what: String },
    #[error("{op}: zero vector rejected")]
    ZeroVector { op: &'static str },
    #[error("gradient requested for a constant node")]
    NoGradTracked,
}

type Result<V> = std::result::Result<V, TensorError>;

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Constant,
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    MulScalarVar(Var, Var),
    DivScalarVar(Var, Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Softmax { a: Var, cols: usize },
    LogSoftmax { a: Var, cols: usize },
    L2NormLast { a: Var, cols: usize },
    Clamp { a: Var, lo: T, hi: T },
    SumAll(Var),
    MeanAll(Var),
    MeanAxis0 { a: Var, rows: usize, cols: usize },
    Reshape(Var),
    Concat0 { parts: Vec<Var> },
    GatherRows { table: Var, ids: Vec<usize> },
    Pick { a: Var, index: usize },
    AddRowVec { a: Var, v: Var },
    Conv2d { x: Var, w: Var, b: Var, dims: ConvDims },
}

struct Node<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Define-by-run computation graph.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Graph({} nodes)", self.nodes.len())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(data.len(), numel(&shape));
        self.nodes.push(Node { data, shape, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Untracked input value.
    pub fn constant(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Var> {
        if data.len() != numel(shape) {
            return Err(TensorError::DataLength {
                op: "constant",
                shape: shape.to_vec(),
                expected: numel(shape),
                got: data.len(),
            });
        }
        Ok(self.push(data, shape.to_vec(), Op::Constant, false))
    }

    /// Trainable input value; receives a gradient buffer on backward.
    pub fn leaf(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Var> {
        if data.len() != numel(shape) {
            return Err(TensorError::DataLength {
                op: "leaf",
                shape: shape.to_vec(),
                expected: numel(shape),
                got: data.len(),
            });
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf, true))
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.push(vec![v], vec![], Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// First element; intended for scalar nodes.
    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].data[0]
    }

    /// Gradient of the last `backward` target w.r.t. `v`.
    ///
    /// Tracked nodes that the loss never touched report zeros.
    pub fn grad(&mut self, v: Var) -> Result<&[T]> {
        if !self.nodes[v.0].needs_grad {
            return Err(TensorError::NoGradTracked);
        }
        let n = self.nodes[v.0].data.len();
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); n]);
        }
        Ok(slot.as_ref().unwrap())
    }

    // ── elementwise binary ──────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x / y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Div(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, Op::AddScalar(a, c), ng)
    }

    /// Multiply every element of `a` by the scalar node `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if numel(self.shape(s)) != 1 {
            return Err(TensorError::NotScalar { op: "mul_scalar_var", shape: self.shape(s).to_vec() });
        }
        let sv = self.nodes[s.0].data[0];
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x * sv).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(data, shape, Op::MulScalarVar(a, s), ng))
    }

    /// Divide every element of `a` by the scalar node `s`.
    pub fn div_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if numel(self.shape(s)) != 1 {
            return Err(TensorError::NotScalar { op: "div_scalar_var", shape: self.shape(s).to_vec() });
        }
        let sv = self.nodes[s.0].data[0];
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x / sv).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(data, shape, Op::DivScalarVar(a, s), ng))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            for i in 0..m {
                for p in 0..k {
                    let aip = da[i * k + p];
                    let row = &db[p * n..(p + 1) * n];
                    let dst = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        dst[j] += aip * row[j];
                    }
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Invalid { op: "transpose", what: format!("expected 2-d, got {s:?}") });
        }
        let (rows, cols) = (s[0], s[1]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(out, vec![cols, rows], Op::Transpose { a, rows, cols }, ng))
    }

    /// `x @ w + b` with `x: [m,k]`, `w: [k,n]`, optional row bias `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(bias) => self.add_row_vec(y, bias),
            None => Ok(y),
        }
    }

    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sv = self.shape(v).to_vec();
        if sa.len() != 2 || sv.len() != 1 || sa[1] != sv[0] {
            return Err(TensorError::ShapeMismatch { op: "add_row_vec", lhs: sa, rhs: sv });
        }
        let (m, n) = (sa[0], sa[1]);
        let mut out = Vec::with_capacity(m * n);
        {
            let da = &self.nodes[a.0].data;
            let dv = &self.nodes[v.0].data;
            for i in 0..m {
                for j in 0..n {
                    out.push(da[i * n + j] + dv[j]);
                }
            }
        }
        let ng = self.needs(a) || self.needs(v);
        Ok(self.push(out, vec![m, n], Op::AddRowVec { a, v }, ng))
    }

    // ── nonlinearities ──────────────────────────────────────────────────

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = T::one();
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| one / (one + (-x).exp())).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x.exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, Op::Ln(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::Invalid { op: "clamp", what: format!("lo {lo} > hi {hi}") });
        }
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x < lo { lo } else if x > hi { hi } else { x })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        Ok(self.push(data, shape, Op::Clamp { a, lo, hi }, ng))
    }

    // ── last-axis row ops ───────────────────────────────────────────────

    fn last_axis(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let s = self.shape(a);
        if s.is_empty() {
            return Err(TensorError::Invalid { op, what: "scalar has no last axis".into() });
        }
        let cols = s[s.len() - 1];
        if cols == 0 {
            return Err(TensorError::Invalid { op, what: "empty last axis".into() });
        }
        Ok((numel(s) / cols, cols))
    }

    /// Softmax over the last axis, numerically stabilised.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.last_axis("softmax", a)?;
        let src = &self.nodes[a.0].data;
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(row[0], T::max);
            let mut z = T::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                out[r * cols + j] = e;
                z += e;
            }
            for j in 0..cols {
                out[r * cols + j] = out[r * cols + j] / z;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        Ok(self.push(out, shape, Op::Softmax { a, cols }, ng))
    }

    /// Log-softmax over the last axis via the log-sum-exp form.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.last_axis("log_softmax", a)?;
        let src = &self.nodes[a.0].data;
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(row[0], T::max);
            let mut z = T::zero();
            for &x in row.iter() {
                z += (x - mx).exp();
            }
            let lse = mx + z.ln();
            for j in 0..cols {
                out[r * cols + j] = row[j] - lse;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        Ok(self.push(out, shape, Op::LogSoftmax { a, cols }, ng))
    }

    /// Euclidean norm over the last axis; `[..., c] -> [...]`.
    pub fn l2_norm_last(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.last_axis("l2_norm_last", a)?;
        let src = &self.nodes[a.0].data;
        let mut out = vec![T::zero(); rows];
        for r in 0..rows {
            let mut acc = T::zero();
            for j in 0..cols {
                let x = src[r * cols + j];
                acc += x * x;
            }
            out[r] = acc.sqrt();
        }
        let s = self.shape(a);
        let shape = s[..s.len() - 1].to_vec();
        let ng = self.needs(a);
        Ok(self.push(out, shape, Op::L2NormLast { a, cols }, ng))
    }

    // ── reductions and shape ────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = T::zero();
        for &x in &self.nodes[a.0].data {
            acc += x;
        }
        let ng = self.needs(a);
        self.push(vec![acc], vec![], Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len();
        let mut acc = T::zero();
        for &x in &self.nodes[a.0].data {
            acc += x;
        }
        let ng = self.needs(a);
        let m = acc / T::of_usize(n);
        self.push(vec![m], vec![], Op::MeanAll(a), ng)
    }

    /// Column means of a `[rows, cols]` matrix.
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(TensorError::Invalid { op: "mean_axis0", what: format!("expected non-empty 2-d, got {s:?}") });
        }
        let (rows, cols) = (s[0], s[1]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![T::zero(); cols];
        for r in 0..rows {
            for j in 0..cols {
                out[j] += src[r * cols + j];
            }
        }
        let inv = T::one() / T::of_usize(rows);
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let ng = self.needs(a);
        Ok(self.push(out, vec![cols], Op::MeanAxis0 { a, rows, cols }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let want = numel(shape);
        let have = self.nodes[a.0].data.len();
        if want != have {
            return Err(TensorError::DataLength {
                op: "reshape",
                shape: shape.to_vec(),
                expected: want,
                got: have,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let ng = self.needs(a);
        Ok(self.push(data, shape.to_vec(), Op::Reshape(a), ng))
    }

    /// Concatenate along axis 0. All trailing dimensions must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "concat0", what: "no parts".into() });
        }
        let first = self.shape(parts[0]).to_vec();
        if first.is_empty() {
            return Err(TensorError::Invalid { op: "concat0", what: "scalar parts; reshape to [1] first".into() });
        }
        let trail = first[1..].to_vec();
        let mut rows = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != trail[..] {
                return Err(TensorError::ShapeMismatch { op: "concat0", lhs: first, rhs: s.to_vec() });
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * numel(&trail));
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&trail);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(data, shape, Op::Concat0 { parts: parts.to_vec() }, ng))
    }

    /// Stack scalar nodes into a vector `[n]`.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut reshaped = Vec::with_capacity(parts.len());
        for &p in parts {
            reshaped.push(self.reshape(p, &[1])?);
        }
        self.concat0(&reshaped)
    }

    /// Select rows of a `[v, e]` table; backward scatter-adds into the table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Invalid { op: "gather_rows", what: format!("expected 2-d table, got {s:?}") });
        }
        let (v, e) = (s[0], s[1]);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Invalid { op: "gather_rows", what: format!("row {id} out of range {v}") });
            }
        }
        let src = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            data.extend_from_slice(&src[id * e..(id + 1) * e]);
        }
        let ng = self.needs(table);
        Ok(self.push(data, vec![ids.len(), e], Op::GatherRows { table, ids: ids.to_vec() }, ng))
    }

    /// Extract one element (by flat index) as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let n = self.nodes[a.0].data.len();
        if index >= n {
            return Err(TensorError::Invalid { op: "pick", what: format!("index {index} out of range {n}") });
        }
        let val = self.nodes[a.0].data[index];
        let ng = self.needs(a);
        Ok(self.push(vec![val], vec![], Op::Pick { a, index }, ng))
    }

    // ── convolution ─────────────────────────────────────────────────────

    /// 2-d convolution, single sample: `x [cin,h,w]`, `w [cout,cin,kh,kw]`,
    /// `b [cout]` -> `[cout,ho,wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        if sb.len() != 1 || sb[0] != sw[0] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: sw, rhs: sb });
        }
        if stride == 0 {
            return Err(TensorError::Invalid { op: "conv2d", what: "stride 0".into() });
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::Invalid { op: "conv2d", what: "kernel larger than padded input".into() });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let dims = ConvDims { cin, h, w: wd, cout, kh, kw, stride, pad, ho, wo };

        let dx = &self.nodes[x.0].data;
        let dw = &self.nodes[w.0].data;
        let db = &self.nodes[b.0].data;
        let mut out = vec![T::zero(); cout * ho * wo];
        for oc in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = db[oc];
                    for ic in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xv = dx[(ic * h + iy as usize) * wd + ix as usize];
                                let wv = dw[((oc * cin + ic) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, vec![cout, ho, wo], Op::Conv2d { x, w, b, dims }, ng))
    }

    // ── composite helpers ───────────────────────────────────────────────

    /// Cosine similarity of two 1-d vectors; rejects zero vectors.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        self.same_shape("cosine", u, v)?;
        if self.shape(u).len() != 1 {
            return Err(TensorError::Invalid { op: "cosine", what: format!("expected 1-d, got {:?}", self.shape(u)) });
        }
        let nu = self.l2_norm_last(u)?;
        let nv = self.l2_norm_last(v)?;
        if self.scalar_value(nu) == T::zero() || self.scalar_value(nv) == T::zero() {
            return Err(TensorError::ZeroVector { op: "cosine" });
        }
        let prod = self.mul(u, v)?;
        let dot = self.sum_all(prod);
        let denom = self.mul(nu, nv)?;
        self.div(dot, denom)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Fills gradient buffers for
    /// every tracked node; re-entrant (clears previous gradients).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(TensorError::NotScalar { op: "backward", shape: self.shape(loss).to_vec() });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.nodes[loss.0].needs_grad {
            // Loss independent of every tracked leaf: all gradients are zero.
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad || self.grads[id].is_none() {
                continue;
            }
            let g = self.grads[id].take().unwrap();
            let op = self.nodes[id].op.clone();
            self.apply_backward(id, &op, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, contrib: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        if self.grads[v.0].is_none() {
            self.grads[v.0] = Some(vec![T::zero(); self.nodes[v.0].data.len()]);
        }
        let mut buf = self.grads[v.0].take().unwrap();
        contrib(&mut buf);
        self.grads[v.0] = Some(buf);
    }

    fn apply_backward(&mut self, id: usize, op: &Op<T>, g: &[T]) {
        match *op {
            Op::Constant | Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(a, |buf| {
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
                self.accum(b, |buf| {
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accum(a, |buf| {
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
                self.accum(b, |buf| {
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d += -gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let db = self.nodes[b.0].data.clone();
                self.accum(a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * db[i];
                    }
                });
                let da = self.nodes[a.0].data.clone();
                self.accum(b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * da[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let db = self.nodes[b.0].data.clone();
                self.accum(a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / db[i];
                    }
                });
                let da = self.nodes[a.0].data.clone();
                self.accum(b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += -g[i] * da[i] / (db[i] * db[i]);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accum(a, |buf| {
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d += gi * c;
                    }
                });
            }
            Op::AddScalar(a, _) => {
                self.accum(a, |buf| {
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
            }
            Op::MulScalarVar(a, s) => {
                let sv = self.nodes[s.0].data[0];
                self.accum(a, |buf| {
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d += gi * sv;
                    }
                });
                let da = self.nodes[a.0].data.clone();
                self.accum(s, |buf| {
                    let mut acc = T::zero();
                    for i in 0..da.len() {
                        acc += g[i] * da[i];
                    }
                    buf[0] += acc;
                });
            }
            Op::DivScalarVar(a, s) => {
                let sv = self.nodes[s.0].data[0];
                self.accum(a, |buf| {
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d += gi / sv;
                    }
                });
                let da = self.nodes[a.0].data.clone();
                self.accum(s, |buf| {
                    let mut acc = T::zero();
                    for i in 0..da.len() {
                        acc += g[i] * da[i];
                    }
                    buf[0] += -acc / (sv * sv);
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let db = self.nodes[b.0].data.clone();
                self.accum(a, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for p in 0..k {
                                buf[i * k + p] += gij * db[p * n + j];
                            }
                        }
                    }
                });
                let da = self.nodes[a.0].data.clone();
                self.accum(b, |buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = da[i * k + p];
                            for j in 0..n {
                                buf[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose { a, rows, cols } => {
                self.accum(a, |buf| {
                    for i in 0..rows {
                        for j in 0..cols {
                            buf[i * cols + j] += g[j * rows + i];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let da = self.nodes[a.0].data.clone();
                self.accum(a, |buf| {
                    for i in 0..buf.len() {
                        if da[i] > T::zero() {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[id].data.clone();
                self.accum(a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = self.nodes[id].data.clone();
                self.accum(a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * y[i];
                    }
                });
            }
            Op::Ln(a) => {
                let da = self.nodes[a.0].data.clone();
                self.accum(a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / da[i];
                    }
                });
            }
            Op::Softmax { a, cols } => {
                let y = self.nodes[id].data.clone();
                let rows = y.len() / cols;
                self.accum(a, |buf| {
                    for r in 0..rows {
                        let off = r * cols;
                        let mut dot = T::zero();
                        for j in 0..cols {
                            dot += g[off + j] * y[off + j];
                        }
                        for j in 0..cols {
                            buf[off + j] += y[off + j] * (g[off + j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { a, cols } => {
                let y = self.nodes[id].data.clone();
                let rows = y.len() / cols;
                self.accum(a, |buf| {
                    for r in 0..rows {
                        let off = r * cols;
                        let mut gsum = T::zero();
                        for j in 0..cols {
                            gsum += g[off + j];
                        }
                        for j in 0..cols {
                            buf[off + j] += g[off + j] - y[off + j].exp() * gsum;
                        }
                    }
                });
            }
            Op::L2NormLast { a, cols } => {
                let da = self.nodes[a.0].data.clone();
                let norms = self.nodes[id].data.clone();
                self.accum(a, |buf| {
                    for r in 0..norms.len() {
                        if norms[r] == T::zero() {
                            continue;
                        }
                        let inv = g[r] / norms[r];
                        for j in 0..cols {
                            buf[r * cols + j] += inv * da[r * cols + j];
                        }
                    }
                });
            }
            Op::Clamp { a, lo, hi } => {
                let da = self.nodes[a.0].data.clone();
                self.accum(a, |buf| {
                    for i in 0..buf.len() {
                        if da[i] >= lo && da[i] <= hi {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g[0];
                self.accum(a, |buf| {
                    for d in buf.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].data.len();
                let gv = g[0] / T::of_usize(n);
                self.accum(a, |buf| {
                    for d in buf.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::MeanAxis0 { a, rows, cols } => {
                let inv = T::one() / T::of_usize(rows);
                self.accum(a, |buf| {
                    for r in 0..rows {
                        for j in 0..cols {
                            buf[r * cols + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accum(a, |buf| {
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
            }
            Op::Concat0 { ref parts } => {
                let parts = parts.clone();
                let mut offset = 0usize;
                for p in parts {
                    let len = self.nodes[p.0].data.len();
                    let slice = g[offset..offset + len].to_vec();
                    self.accum(p, |buf| {
                        for (d, &gi) in buf.iter_mut().zip(&slice) {
                            *d += gi;
                        }
                    });
                    offset += len;
                }
            }
            Op::GatherRows { table, ref ids } => {
                let ids = ids.clone();
                let e = self.nodes[id].data.len() / ids.len().max(1);
                self.accum(table, |buf| {
                    for (r, &rid) in ids.iter().enumerate() {
                        for j in 0..e {
                            buf[rid * e + j] += g[r * e + j];
                        }
                    }
                });
            }
            Op::Pick { a, index } => {
                let gv = g[0];
                self.accum(a, |buf| {
                    buf[index] += gv;
                });
            }
            Op::AddRowVec { a, v } => {
                self.accum(a, |buf| {
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
                let n = self.nodes[v.0].data.len();
                let m = self.nodes[a.0].data.len() / n;
                self.accum(v, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, dims } => {
                let ConvDims { cin, h, w: wd, cout, kh, kw, stride, pad, ho, wo } = dims;
                self.accum(b, |buf| {
                    for oc in 0..cout {
                        let mut acc = T::zero();
                        for oy in 0..ho {
                            for ox in 0..wo {
                                acc += g[(oc * ho + oy) * wo + ox];
                            }
                        }
                        buf[oc] += acc;
                    }
                });
                let dxv = self.nodes[x.0].data.clone();
                self.accum(w, |buf| {
                    for oc in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = g[(oc * ho + oy) * wo + ox];
                                if gv == T::zero() {
                                    continue;
                                }
                                for ic in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            buf[((oc * cin + ic) * kh + ky) * kw + kx] +=
                                                gv * dxv[(ic * h + iy as usize) * wd + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                let dwv = self.nodes[w.0].data.clone();
                self.accum(x, |buf| {
                    for oc in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = g[(oc * ho + oy) * wo + ox];
                                if gv == T::zero() {
                                    continue;
                                }
                                for ic in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            buf[(ic * h + iy as usize) * wd + ix as usize] +=
                                                gv * dwv[((oc * cin + ic) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}
