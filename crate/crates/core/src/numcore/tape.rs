//! Reverse-mode differentiation over dense matrices.
//!
//! Every primitive records its operands and whatever it needs from the
//! forward pass; `backward` walks the record once, newest first. Nodes that
//! do not depend on a tracked leaf are never visited on the way back.

use std::sync::Arc;

use super::{NumError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    Scale { a: Var, c: f64 },
    AddConst(Var),
    MulScalar { a: Var, s: Var },
    DivScalar { a: Var, s: Var },
    Sum(Var),
    MeanRows(Var),
    RowSums(Var),
    FrobNorm(Var),
    Transpose(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Softmax(Var),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    RowNormalize { a: Var, norms: Vec<f64> },
    RowCosine { a: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `c = op(a) · op(b)` (optionally accumulating into `c`) for row-major
/// buffers, where `op` is an optional transpose.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[f64],
    (br, bc): (usize, usize),
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    debug_assert_eq!(k, k2);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), ar * ac);
    debug_assert_eq!(b.len(), br * bc);
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the strided extents computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn cosine_parts(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut p = 0.0;
    let mut q = 0.0;
    for (a, b) in x.iter().zip(y) {
        dot += a * b;
        p += a * a;
        q += b * b;
    }
    (dot, p, q)
}

fn mat(rows: usize, cols: usize, values: Vec<f64>) -> Tensor {
    Tensor::matrix_unchecked(rows, cols, values)
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite(format!("{op:?}").chars().take(40).collect()));
        }
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn as_matrix(t: Tensor) -> Result<Tensor, NumError> {
        let (r, c) = t.dims2()?;
        if t.shape().len() == 2 {
            Ok(t)
        } else {
            t.reshape(vec![r, c])
        }
    }

    /// Records a leaf. It is tracked iff the tensor carries a gradient buffer.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var, NumError> {
        let track = t.requires_grad();
        let v = Self::as_matrix(t.detached())?;
        self.push(v, Op::Leaf, track)
    }

    /// Records a leaf that always takes part in differentiation.
    pub fn variable(&mut self, t: Tensor) -> Result<Var, NumError> {
        let v = Self::as_matrix(t.detached())?;
        self.push(v, Op::Leaf, true)
    }

    /// Records a shared, never-differentiated leaf without copying it.
    pub fn constant(&mut self, t: &Arc<Tensor>) -> Result<Var, NumError> {
        if t.shape().len() != 2 {
            return self.push(Self::as_matrix(t.detached())?, Op::Leaf, false);
        }
        if !t.is_finite() {
            return Err(NumError::NonFinite("constant".into()));
        }
        self.nodes.push(Node { value: Arc::clone(t), op: Op::Leaf, needs_grad: false });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.values()[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.shape();
        (s[0], s[1])
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize), NumError> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(NumError::Dimension(format!("{what}: {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var, NumError> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(NumError::Dimension(format!(
                "matmul inner extents {k} vs {k2} ({ar}x{ac}{} · {br}x{bc}{})",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.vals(a), (ar, ac), ta, self.vals(b), (br, bc), tb, &mut out, false);
        let ng = self.ng(&[a, b]);
        self.push(mat(m, n, out), Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.matmul_t(a, false, b, false)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<Var, NumError> {
        let (r, c) = self.same_shape(a, b, what)?;
        let out = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| f(*x, *y)).collect();
        let ng = self.ng(&[a, b]);
        self.push(mat(r, c, out), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Adds a 1×c row to every row of an r×c matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(NumError::Dimension(format!("add_row: {:?} onto {r}x{c}", self.dims(row))));
        }
        let rv = self.vals(row);
        let out = self.vals(a).chunks(c).flat_map(|x| x.iter().zip(rv).map(|(p, q)| p + q)).collect();
        let ng = self.ng(&[a, row]);
        self.push(mat(r, c, out), Op::AddRow { a, row }, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let (r, k) = self.dims(a);
        let out = self.vals(a).iter().map(|x| x * c).collect();
        let ng = self.ng(&[a]);
        self.push(mat(r, k, out), Op::Scale { a, c }, ng)
    }

    /// Adds a constant to every entry.
    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let (r, k) = self.dims(a);
        let out = self.vals(a).iter().map(|x| x + c).collect();
        let ng = self.ng(&[a]);
        self.push(mat(r, k, out), Op::AddConst(a), ng)
    }

    fn check_scalar(&self, s: Var, what: &str) -> Result<f64, NumError> {
        if self.dims(s) != (1, 1) {
            return Err(NumError::Dimension(format!("{what}: expected 1x1, got {:?}", self.dims(s))));
        }
        Ok(self.scalar(s))
    }

    /// Multiplies every entry of `a` by the 1×1 value `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, NumError> {
        let sv = self.check_scalar(s, "mul_scalar")?;
        let (r, c) = self.dims(a);
        let out = self.vals(a).iter().map(|x| x * sv).collect();
        let ng = self.ng(&[a, s]);
        self.push(mat(r, c, out), Op::MulScalar { a, s }, ng)
    }

    /// Divides every entry of `a` by the 1×1 value `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var, NumError> {
        let sv = self.check_scalar(s, "div_scalar")?;
        if sv == 0.0 {
            return Err(NumError::NumericGuard("division by zero scalar".into()));
        }
        let (r, c) = self.dims(a);
        let out = self.vals(a).iter().map(|x| x / sv).collect();
        let ng = self.ng(&[a, s]);
        self.push(mat(r, c, out), Op::DivScalar { a, s }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let s = self.vals(a).iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Column means as a 1×c row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; c];
        for row in self.vals(a).chunks(c) {
            add_into(&mut out, row);
        }
        out.iter_mut().for_each(|x| *x /= r as f64);
        let ng = self.ng(&[a]);
        self.push(mat(1, c, out), Op::MeanRows(a), ng)
    }

    /// Per-row sums as an r×1 column.
    pub fn row_sums(&mut self, a: Var) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        let out = self.vals(a).chunks(c).map(|row| row.iter().sum()).collect();
        let ng = self.ng(&[a]);
        self.push(mat(r, 1, out), Op::RowSums(a), ng)
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Result<Var, NumError> {
        let n = self.vals(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(n), Op::FrobNorm(a), ng)
    }

    /// `a / (‖a‖_F + eps)`; the gradient includes the denominator's dependence on `a`.
    pub fn normalize_frobenius(&mut self, a: Var, eps: f64) -> Result<Var, NumError> {
        if !(eps > 0.0) {
            return Err(NumError::Parameter(format!("eps must be positive, got {eps}")));
        }
        let n = self.frobenius_norm(a)?;
        let d = self.add_const(n, eps)?;
        self.div_scalar(a, d)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        let v = self.vals(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let ng = self.ng(&[a]);
        self.push(mat(c, r, out), Op::Transpose(a), ng)
    }

    /// Row-wise layer normalization with affine 1×c `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumError> {
        let (r, c) = self.dims(x);
        if self.dims(gamma) != (1, c) || self.dims(beta) != (1, c) {
            return Err(NumError::Dimension("layer_norm affine shape".into()));
        }
        let (xv, g, b) = (self.vals(x), self.vals(gamma), self.vals(beta));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(mat(r, c, out), Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        let out = self.vals(a).iter().map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())).collect();
        let ng = self.ng(&[a]);
        self.push(mat(r, c, out), Op::Gelu(a), ng)
    }

    /// Max-shifted softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; r * c];
        for (src, dst) in self.vals(a).chunks(c).zip(out.chunks_mut(c)) {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        let ng = self.ng(&[a]);
        self.push(mat(r, c, out), Op::Softmax(a), ng)
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > r {
            return Err(NumError::Dimension(format!("slice_rows {start}+{len} of {r}")));
        }
        let out = self.vals(a)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(&[a]);
        self.push(mat(len, c, out), Op::SliceRows { a, start }, ng)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > c {
            return Err(NumError::Dimension(format!("slice_cols {start}+{len} of {c}")));
        }
        let out = self.vals(a).chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let ng = self.ng(&[a]);
        self.push(mat(r, len, out), Op::SliceCols { a, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let Some(&first) = parts.first() else {
            return Err(NumError::Dimension("concat of nothing".into()));
        };
        let c = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(NumError::Dimension(format!("concat_rows: {pc} vs {c} columns")));
            }
            rows += r;
            out.extend_from_slice(self.vals(p));
        }
        let ng = self.ng(parts);
        self.push(mat(rows, c, out), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let Some(&first) = parts.first() else {
            return Err(NumError::Dimension("concat of nothing".into()));
        };
        let r = self.dims(first).0;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(NumError::Dimension("concat_cols: row count mismatch".into()));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.vals(p)[i * pc..(i + 1) * pc]);
            }
        }
        let ng = self.ng(parts);
        self.push(mat(r, total, out), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Scales each row to unit L2 norm. Zero rows are rejected.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.vals(a).chunks(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 0.0) {
                return Err(NumError::NumericGuard("zero-norm feature".into()));
            }
            norms.push(n);
            out.extend(row.iter().map(|x| x / n));
        }
        let ng = self.ng(&[a]);
        self.push(mat(r, c, out), Op::RowNormalize { a, norms }, ng)
    }

    /// Cosine similarity of matching rows as an r×1 column, evaluated as
    /// `a·b / sqrt(‖a‖²‖b‖²)` so that identical rows give exactly 1.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (r, c) = self.same_shape(a, b, "row_cosine")?;
        let mut out = Vec::with_capacity(r);
        for (x, y) in self.vals(a).chunks(c).zip(self.vals(b).chunks(c)) {
            let (dot, p, q) = cosine_parts(x, y);
            if !(p > 0.0 && q > 0.0) {
                return Err(NumError::NumericGuard("zero-norm feature".into()));
            }
            out.push(dot / (p * q).sqrt());
        }
        let ng = self.ng(&[a, b]);
        self.push(mat(r, 1, out), Op::RowCosine { a, b }, ng)
    }

    /// Mean over rows of `logsumexp(row) − row[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NumError> {
        let (r, c) = self.dims(logits);
        if labels.len() != r {
            return Err(NumError::Dimension(format!("{} labels for {r} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(NumError::Label { label: bad, classes: c });
        }
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for (i, (src, dst)) in self.vals(logits).chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
            loss += z.ln() + max - src[labels[i]];
        }
        let ng = self.ng(&[logits]);
        let labels = labels.to_vec();
        self.push(Tensor::scalar(loss / r as f64), Op::CrossEntropy { logits, labels, probs }, ng)
    }

    /// Propagates adjoints from the 1×1 `loss` back to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        if self.dims(loss) != (1, 1) {
            return Err(NumError::Contract(format!("backward needs a scalar loss, got {:?}", self.dims(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (da, db) = (self.dims(*a), self.dims(*b));
                let gd = (out.shape()[0], out.shape()[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    if *ta {
                        gemm(self.vals(*b), db, *tb, g, gd, true, ga, true);
                    } else {
                        gemm(g, gd, false, self.vals(*b), db, !*tb, ga, true);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *tb {
                        gemm(g, gd, true, self.vals(*a), da, *ta, gb, true);
                    } else {
                        gemm(self.vals(*a), da, !*ta, g, gd, false, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let bv = self.vals(*b);
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let av = self.vals(*a);
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                }
            }
            Op::AddRow { a, row } => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                let c = self.dims(*row).1;
                if let Some(gr) = self.acc(grads, *row) {
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s * c);
                }
            }
            Op::AddConst(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::MulScalar { a, s } => {
                let sv = self.scalar(*s);
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, x)| *d += x * sv);
                }
                let dot: f64 = g.iter().zip(self.vals(*a)).map(|(x, y)| x * y).sum();
                if let Some(gs) = self.acc(grads, *s) {
                    gs[0] += dot;
                }
            }
            Op::DivScalar { a, s } => {
                let sv = self.scalar(*s);
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, x)| *d += x / sv);
                }
                let dot: f64 = g.iter().zip(self.vals(*a)).map(|(x, y)| x * y).sum();
                if let Some(gs) = self.acc(grads, *s) {
                    gs[0] -= dot / (sv * sv);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanRows(a) => {
                let (r, c) = self.dims(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for row in ga.chunks_mut(c) {
                        row.iter_mut().zip(g).for_each(|(d, s)| *d += s / r as f64);
                    }
                }
            }
            Op::RowSums(a) => {
                let c = self.dims(*a).1;
                if let Some(ga) = self.acc(grads, *a) {
                    for (row, s) in ga.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|d| *d += s);
                    }
                }
            }
            Op::FrobNorm(a) => {
                let n = out.values()[0];
                if n > 0.0 {
                    let av = self.vals(*a);
                    if let Some(ga) = self.acc(grads, *a) {
                        ga.iter_mut().zip(av).for_each(|(d, x)| *d += g[0] * x / n);
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (r, c) = self.dims(*x);
                let gv = self.vals(*gamma);
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let hr = &xhat[i * c..(i + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = gr[j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * hr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            gx[i * c + j] += inv_std[i] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (k, (gk, hk)) in g.iter().zip(xhat).enumerate() {
                        gg[k % c] += gk * hk;
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for (k, gk) in g.iter().enumerate() {
                        gb[k % c] += gk;
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.vals(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        let x = av[k];
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        ga[k] += g[k] * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                }
            }
            Op::Softmax(a) => {
                let c = self.dims(*a).1;
                let y = out.values();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), dr) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::SliceRows { a, start } => {
                let c = self.dims(*a).1;
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(&mut ga[start * c..start * c + g.len()], g);
                }
            }
            Op::SliceCols { a, start } => {
                let c = self.dims(*a).1;
                let len = out.shape()[1];
                if let Some(ga) = self.acc(grads, *a) {
                    for (dst, src) in ga.chunks_mut(c).zip(g.chunks(len)) {
                        add_into(&mut dst[*start..start + len], src);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    if let Some(gp) = self.acc(grads, p) {
                        add_into(gp, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if let Some(gp) = self.acc(grads, p) {
                        for (dst, src) in gp.chunks_mut(pc).zip(g.chunks(total)) {
                            add_into(dst, &src[off..off + pc]);
                        }
                    }
                    off += pc;
                }
            }
            Op::RowNormalize { a, norms } => {
                let c = self.dims(*a).1;
                let y = out.values();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, ((gr, yr), dr)) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)).enumerate() {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            dr[j] += (gr[j] - yr[j] * dot) / norms[i];
                        }
                    }
                }
            }
            Op::RowCosine { a, b } => {
                let c = self.dims(*a).1;
                let (av, bv) = (self.vals(*a), self.vals(*b));
                let cos = out.values();
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for i in 0..g.len() {
                    let (x, y) = (&av[i * c..(i + 1) * c], &bv[i * c..(i + 1) * c]);
                    let (_, p, q) = cosine_parts(x, y);
                    let inv = 1.0 / (p * q).sqrt();
                    for j in 0..c {
                        da[i * c + j] = g[i] * (y[j] * inv - cos[i] * x[j] / p);
                        db[i * c + j] = g[i] * (x[j] * inv - cos[i] * y[j] / q);
                    }
                }
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, &da);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    add_into(gb, &db);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (r, c) = self.dims(*logits);
                if let Some(gl) = self.acc(grads, *logits) {
                    let w = g[0] / r as f64;
                    for (i, y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == *y { 1.0 } else { 0.0 };
                            gl[i * c + j] += w * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}
