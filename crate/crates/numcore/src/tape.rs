//! Define-by-run reverse-mode automatic differentiation.
//!
//! A `Tape` records every differentiable operation of one training step in
//! execution order and replays it in exact reverse on `backward`. Node
//! storage lives in an arena indexed by `Var`; the tape is dropped after
//! the step, which frees all intermediates.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// out = a @ b, a: [m,k], b: [k,n]
    Matmul { a: Var, b: Var },
    /// out = a @ b^T, a: [m,k], b: [n,k]
    MatmulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// out[i,j] = a[i,j] + row[j]
    AddRow { a: Var, row: Var },
    Scale { a: Var, c: f64 },
    Gelu { a: Var },
    /// row-wise softmax
    Softmax { a: Var },
    /// row-wise layer normalisation with affine parameters
    LayerNorm { a: Var, gamma: Var, beta: Var },
    /// rows normalised to unit length; rows with norm < eps pass through
    L2NormRows { a: Var },
    StopGrad { a: Var },
    Gather { a: Var, idx: Vec<usize> },
    /// rows of `a` scattered to `idx` in a zero matrix
    Scatter { a: Var, idx: Vec<usize> },
    SliceCols { a: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var> },
    /// mean over rows -> [1, n]
    MeanRows { a: Var },
    SumAll { a: Var },
    /// row-wise cosine similarity -> [m]; near-zero rows give 0
    CosineRows { a: Var, b: Var, eps: f64 },
    /// mean of -log softmax(logits)[target] -> [1]
    SoftmaxXent { logits: Var, targets: Vec<usize> },
    /// mean over rows of -sum_c y log softmax(logits) -> [1]
    SoftXent { logits: Var, target_probs: Var },
    /// mean elementwise binary cross entropy on logits -> [1]
    BceLogits { logits: Var, targets: Var },
    /// mask entries are 0 or 1/(1-p), fixed at record time
    Dropout { a: Var, mask: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
    /// cached forward byproducts (softmax rows, norms, ...) for backward
    saved: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// ── raw kernels ──────────────────────────────────────────────────────

/// C += A @ B with A: [m,k], B: [k,n]; ikj order so the inner loop is a
/// contiguous axpy.
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// C += A @ B^T with A: [m,k], B: [n,k].
fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                s += av * bv;
            }
            out[i * n + j] += s;
        }
    }
}

/// C += A^T @ B with A: [m,k], B: [m,n]; result [k,n].
fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797884560802865; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        let e = (x - mx).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── tape ─────────────────────────────────────────────────────────────

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, saved: Vec<f64>) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false, // set by leaf()
            Op::StopGrad { .. } => false,
            _ => self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            op,
            requires_grad,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Matmul { a, b }
            | Op::MatmulNT { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::CosineRows { a, b, .. } => vec![*a, *b],
            Op::AddRow { a, row } => vec![*a, *row],
            Op::Scale { a, .. }
            | Op::Gelu { a }
            | Op::Softmax { a }
            | Op::L2NormRows { a, .. }
            | Op::StopGrad { a }
            | Op::Gather { a, .. }
            | Op::Scatter { a, .. }
            | Op::SliceCols { a, .. }
            | Op::MeanRows { a }
            | Op::SumAll { a }
            | Op::Dropout { a, .. } => vec![*a],
            Op::LayerNorm { a, gamma, beta } => vec![*a, *gamma, *beta],
            Op::ConcatCols { parts } => parts.clone(),
            Op::SoftmaxXent { logits, .. } => vec![*logits],
            Op::SoftXent { logits, target_probs } => vec![*logits, *target_probs],
            Op::BceLogits { logits, targets } => vec![*logits, *targets],
        }
    }

    // ── construction ────────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let v = self.push(shape, data, Op::Leaf, vec![]);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> Var {
        self.leaf(t.data.clone(), t.shape.clone(), t.requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t.data.clone(), t.shape.clone(), false)
    }

    // ── accessors ───────────────────────────────────────────────────

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient buffer of a node, `None` if no gradient reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient buffer with unreached nodes reported as zeros.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].data.len()],
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(Error::BadShape {
                op,
                expected: "rank 1 or 2".into(),
                got: s.clone(),
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    // ── ops ─────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b }, vec![]))
    }

    /// a @ b^T without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatmulNT { a, b }, vec![]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Add { a, b }, vec![]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Sub { a, b }, vec![]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Mul { a, b }, vec![]))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        if self.nodes[row.0].data.len() != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[row.0].shape.clone(),
            });
        }
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += self.nodes[row.0].data[j];
            }
        }
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::AddRow { a, row }, vec![]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| c * x).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Scale { a, c }, vec![])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| gelu(x)).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Gelu { a }, vec![])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "softmax")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(
                &self.nodes[a.0].data[i * n..(i + 1) * n],
                &mut data[i * n..(i + 1) * n],
            );
        }
        let saved = data.clone();
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Softmax { a }, saved))
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "layer_norm")?;
        if self.nodes[gamma.0].data.len() != n || self.nodes[beta.0].data.len() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let mut data = vec![0.0; m * n];
        // saved: per row [mean, inv_std], then normalised rows
        let mut saved = vec![0.0; 2 * m + m * n];
        for i in 0..m {
            let row = &self.nodes[a.0].data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            saved[2 * i] = mean;
            saved[2 * i + 1] = inv_std;
            for j in 0..n {
                let xhat = (row[j] - mean) * inv_std;
                saved[2 * m + i * n + j] = xhat;
                data[i * n + j] = self.nodes[gamma.0].data[j] * xhat + self.nodes[beta.0].data[j];
            }
        }
        Ok(self.push(
            self.nodes[a.0].shape.clone(),
            data,
            Op::LayerNorm { a, gamma, beta },
            saved,
        ))
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(a, "l2_normalize")?;
        let mut data = vec![0.0; m * n];
        let mut saved = vec![0.0; m]; // row norms (0 marks pass-through)
        for i in 0..m {
            let row = &self.nodes[a.0].data[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < eps {
                data[i * n..(i + 1) * n].copy_from_slice(row);
                saved[i] = 0.0;
            } else {
                for j in 0..n {
                    data[i * n + j] = row[j] / norm;
                }
                saved[i] = norm;
            }
        }
        Ok(self.push(
            self.nodes[a.0].shape.clone(),
            data,
            Op::L2NormRows { a },
            saved,
        ))
    }

    /// Forward identity that contributes zero gradient upstream.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.clone();
        self.push(self.nodes[a.0].shape.clone(), data, Op::StopGrad { a }, vec![])
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(a, "gather_rows")?;
        for &i in idx {
            if i >= m {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    size: m,
                });
            }
        }
        let mut data = vec![0.0; idx.len() * n];
        for (r, &i) in idx.iter().enumerate() {
            data[r * n..(r + 1) * n].copy_from_slice(&self.nodes[a.0].data[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            vec![idx.len(), n],
            data,
            Op::Gather { a, idx: idx.to_vec() },
            vec![],
        ))
    }

    /// Place rows of `a` at `idx` in a fresh zero matrix with `out_rows` rows.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "scatter_rows")?;
        if idx.len() != m {
            return Err(Error::BadShape {
                op: "scatter_rows",
                expected: format!("{m} indices"),
                got: vec![idx.len()],
            });
        }
        for &i in idx {
            if i >= out_rows {
                return Err(Error::IndexOutOfRange {
                    op: "scatter_rows",
                    index: i,
                    size: out_rows,
                });
            }
        }
        let mut data = vec![0.0; out_rows * n];
        for (r, &i) in idx.iter().enumerate() {
            data[i * n..(i + 1) * n].copy_from_slice(&self.nodes[a.0].data[r * n..(r + 1) * n]);
        }
        Ok(self.push(
            vec![out_rows, n],
            data,
            Op::Scatter {
                a,
                idx: idx.to_vec(),
            },
            vec![],
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start + len > n {
            return Err(Error::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                size: n,
            });
        }
        let mut data = vec![0.0; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&self.nodes[a.0].data[i * n + start..i * n + start + len]);
        }
        Ok(self.push(vec![m, len], data, Op::SliceCols { a, start, len }, vec![]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (mp, np) = self.dims2(p, "concat_cols")?;
            if mp != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            widths.push(np);
            total += np;
        }
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(widths.iter()) {
            for i in 0..m {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&self.nodes[p.0].data[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(
            vec![m, total],
            data,
            Op::ConcatCols { parts: parts.to_vec() },
            vec![],
        ))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "mean_rows")?;
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += self.nodes[a.0].data[i * n + j];
            }
        }
        for d in data.iter_mut() {
            *d /= m as f64;
        }
        Ok(self.push(vec![1, n], data, Op::MeanRows { a }, vec![]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(vec![1], vec![s], Op::SumAll { a }, vec![])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Row-wise cosine similarity; rows where either norm < eps give 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape(a, b, "cosine")?;
        let (m, n) = self.dims2(a, "cosine")?;
        let mut data = vec![0.0; m];
        for i in 0..m {
            let ra = &self.nodes[a.0].data[i * n..(i + 1) * n];
            let rb = &self.nodes[b.0].data[i * n..(i + 1) * n];
            let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na < eps || nb < eps {
                data[i] = 0.0;
            } else {
                let dot: f64 = ra.iter().zip(rb.iter()).map(|(x, y)| x * y).sum();
                data[i] = dot / (na * nb);
            }
        }
        Ok(self.push(vec![m], data, Op::CosineRows { a, b, eps }, vec![]))
    }

    /// Mean of -log softmax(logits)[target] over rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, k) = self.dims2(logits, "softmax_cross_entropy")?;
        if targets.len() != m {
            return Err(Error::BadShape {
                op: "softmax_cross_entropy",
                expected: format!("{m} targets"),
                got: vec![targets.len()],
            });
        }
        for &t in targets {
            if t >= k {
                return Err(Error::IndexOutOfRange {
                    op: "softmax_cross_entropy",
                    index: t,
                    size: k,
                });
            }
        }
        let mut saved = vec![0.0; m * k]; // softmax rows
        let mut loss = 0.0;
        for i in 0..m {
            let row = &self.nodes[logits.0].data[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
            softmax_row(row, &mut saved[i * k..(i + 1) * k]);
        }
        loss /= m as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
            },
            saved,
        ))
    }

    /// Soft-label cross entropy: mean over rows of -sum_c y_c log softmax_c.
    pub fn soft_cross_entropy(&mut self, logits: Var, target_probs: Var) -> Result<Var> {
        self.same_shape(logits, target_probs, "soft_cross_entropy")?;
        let (m, k) = self.dims2(logits, "soft_cross_entropy")?;
        let mut saved = vec![0.0; m * k];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &self.nodes[logits.0].data[i * k..(i + 1) * k];
            let yrow = &self.nodes[target_probs.0].data[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for j in 0..k {
                loss += yrow[j] * (lse - row[j]);
            }
            softmax_row(row, &mut saved[i * k..(i + 1) * k]);
        }
        loss /= m as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftXent { logits, target_probs },
            saved,
        ))
    }

    /// Mean binary cross entropy over all entries, on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.same_shape(logits, targets, "bce_with_logits")?;
        let n = self.nodes[logits.0].data.len();
        let mut loss = 0.0;
        for i in 0..n {
            let x = self.nodes[logits.0].data[i];
            let y = self.nodes[targets.0].data[i];
            loss += x.max(0.0) - x * y + (1.0 + (-x.abs()).exp()).ln();
        }
        loss /= n as f64;
        Ok(self.push(vec![1], vec![loss], Op::BceLogits { logits, targets }, vec![]))
    }

    /// Inverted-scale dropout with a mask drawn by the caller.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut crate::rng::Rng) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.nodes[a.0].data.len())
            .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(mask.iter())
            .map(|(x, m)| x * m)
            .collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Dropout { a, mask }, vec![])
    }

    // ── backward ────────────────────────────────────────────────────

    fn accum(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta.iter()) {
                    *gi += di;
                }
            }
            None => node.grad = Some(delta.to_vec()),
        }
    }

    /// Reverse sweep from a scalar loss. Populates gradient buffers for
    /// every node a gradient reaches; untouched nodes read back as zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss {
                got: self.nodes[loss.0].shape.clone(),
            });
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let grad = self.nodes[i].grad.clone().unwrap();
            self.backward_op(Var(i), &op, &grad);
        }
        Ok(())
    }

    fn backward_op(&mut self, out: Var, op: &Op, c: &[f64]) {
        match op {
            Op::Leaf | Op::StopGrad { .. } => {}

            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[out.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    // da = c @ b^T
                    let mut da = vec![0.0; m * k];
                    matmul_nt_acc(c, &self.nodes[b.0].data, m, n, k, &mut da);
                    self.accum(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // db = a^T @ c
                    let mut db = vec![0.0; k * n];
                    matmul_tn_acc(&self.nodes[a.0].data, c, m, k, n, &mut db);
                    self.accum(*b, &db);
                }
            }

            Op::MatmulNT { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                if self.nodes[a.0].requires_grad {
                    // da = c @ b
                    let mut da = vec![0.0; m * k];
                    matmul_acc(c, &self.nodes[b.0].data, m, n, k, &mut da);
                    self.accum(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // db = c^T @ a
                    let mut db = vec![0.0; n * k];
                    matmul_tn_acc(c, &self.nodes[a.0].data, m, n, k, &mut db);
                    self.accum(*b, &db);
                }
            }

            Op::Add { a, b } => {
                if self.nodes[a.0].requires_grad {
                    self.accum(*a, c);
                }
                if self.nodes[b.0].requires_grad {
                    self.accum(*b, c);
                }
            }

            Op::Sub { a, b } => {
                if self.nodes[a.0].requires_grad {
                    self.accum(*a, c);
                }
                if self.nodes[b.0].requires_grad {
                    let neg: Vec<f64> = c.iter().map(|x| -x).collect();
                    self.accum(*b, &neg);
                }
            }

            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> = c
                        .iter()
                        .zip(self.nodes[b.0].data.iter())
                        .map(|(g, y)| g * y)
                        .collect();
                    self.accum(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f64> = c
                        .iter()
                        .zip(self.nodes[a.0].data.iter())
                        .map(|(g, x)| g * x)
                        .collect();
                    self.accum(*b, &db);
                }
            }

            Op::AddRow { a, row } => {
                let n = self.nodes[row.0].data.len();
                let m = c.len() / n;
                if self.nodes[a.0].requires_grad {
                    self.accum(*a, c);
                }
                if self.nodes[row.0].requires_grad {
                    let mut dr = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dr[j] += c[i * n + j];
                        }
                    }
                    self.accum(*row, &dr);
                }
            }

            Op::Scale { a, c: k } => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> = c.iter().map(|g| g * k).collect();
                    self.accum(*a, &da);
                }
            }

            Op::Gelu { a } => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> = c
                        .iter()
                        .zip(self.nodes[a.0].data.iter())
                        .map(|(g, &x)| g * gelu_grad(x))
                        .collect();
                    self.accum(*a, &da);
                }
            }

            Op::Softmax { a } => {
                if self.nodes[a.0].requires_grad {
                    let s = &self.nodes[out.0].saved;
                    let n = self.nodes[out.0].shape[1];
                    let m = s.len() / n;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let srow = &s[i * n..(i + 1) * n];
                        let crow = &c[i * n..(i + 1) * n];
                        let dot: f64 = srow.iter().zip(crow.iter()).map(|(x, y)| x * y).sum();
                        for j in 0..n {
                            da[i * n + j] = srow[j] * (crow[j] - dot);
                        }
                    }
                    self.accum(*a, &da);
                }
            }

            Op::LayerNorm { a, gamma, beta } => {
                let n = self.nodes[gamma.0].data.len();
                let m = c.len() / n;
                let saved = self.nodes[out.0].saved.clone();
                let xhat = &saved[2 * m..];
                if self.nodes[beta.0].requires_grad {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += c[i * n + j];
                        }
                    }
                    self.accum(*beta, &db);
                }
                if self.nodes[gamma.0].requires_grad {
                    let mut dg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += c[i * n + j] * xhat[i * n + j];
                        }
                    }
                    self.accum(*gamma, &dg);
                }
                if self.nodes[a.0].requires_grad {
                    let gdat = self.nodes[gamma.0].data.clone();
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let inv_std = saved[2 * i + 1];
                        let mut sum_cg = 0.0;
                        let mut sum_cgx = 0.0;
                        for j in 0..n {
                            let cg = c[i * n + j] * gdat[j];
                            sum_cg += cg;
                            sum_cgx += cg * xhat[i * n + j];
                        }
                        for j in 0..n {
                            let cg = c[i * n + j] * gdat[j];
                            da[i * n + j] = inv_std / n as f64
                                * (n as f64 * cg - sum_cg - xhat[i * n + j] * sum_cgx);
                        }
                    }
                    self.accum(*a, &da);
                }
            }

            Op::L2NormRows { a, .. } => {
                if self.nodes[a.0].requires_grad {
                    let n = self.nodes[out.0].shape[self.nodes[out.0].shape.len() - 1];
                    let m = c.len() / n;
                    let norms = self.nodes[out.0].saved.clone();
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let norm = norms[i];
                        let crow = &c[i * n..(i + 1) * n];
                        if norm == 0.0 {
                            // degenerate row passed through unchanged
                            da[i * n..(i + 1) * n].copy_from_slice(crow);
                        } else {
                            let yrow = &self.nodes[out.0].data[i * n..(i + 1) * n];
                            let dot: f64 =
                                yrow.iter().zip(crow.iter()).map(|(x, y)| x * y).sum();
                            for j in 0..n {
                                da[i * n + j] = (crow[j] - yrow[j] * dot) / norm;
                            }
                        }
                    }
                    self.accum(*a, &da);
                }
            }

            Op::Gather { a, idx } => {
                if self.nodes[a.0].requires_grad {
                    let n = self.nodes[out.0].shape[1];
                    let mut da = vec![0.0; self.nodes[a.0].data.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            da[i * n + j] += c[r * n + j];
                        }
                    }
                    self.accum(*a, &da);
                }
            }

            Op::Scatter { a, idx, .. } => {
                if self.nodes[a.0].requires_grad {
                    let n = self.nodes[out.0].shape[1];
                    let mut da = vec![0.0; idx.len() * n];
                    for (r, &i) in idx.iter().enumerate() {
                        da[r * n..(r + 1) * n].copy_from_slice(&c[i * n..(i + 1) * n]);
                    }
                    self.accum(*a, &da);
                }
            }

            Op::SliceCols { a, start, len } => {
                if self.nodes[a.0].requires_grad {
                    let n = self.nodes[a.0].shape[1];
                    let m = self.nodes[a.0].shape[0];
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        da[i * n + start..i * n + start + len]
                            .copy_from_slice(&c[i * len..(i + 1) * len]);
                    }
                    self.accum(*a, &da);
                }
            }

            Op::ConcatCols { parts } => {
                let total = self.nodes[out.0].shape[1];
                let m = self.nodes[out.0].shape[0];
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if self.nodes[p.0].requires_grad {
                        let mut dp = vec![0.0; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&c[i * total + off..i * total + off + w]);
                        }
                        self.accum(p, &dp);
                    }
                    off += w;
                }
            }

            Op::MeanRows { a } => {
                if self.nodes[a.0].requires_grad {
                    let n = self.nodes[out.0].shape[1];
                    let m = self.nodes[a.0].shape[0];
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = c[j] / m as f64;
                        }
                    }
                    self.accum(*a, &da);
                }
            }

            Op::SumAll { a } => {
                if self.nodes[a.0].requires_grad {
                    let da = vec![c[0]; self.nodes[a.0].data.len()];
                    self.accum(*a, &da);
                }
            }

            Op::CosineRows { a, b, eps } => {
                let n = self.nodes[a.0].shape[self.nodes[a.0].shape.len() - 1];
                let m = c.len();
                let mut da = vec![0.0; m * n];
                let mut db = vec![0.0; m * n];
                for i in 0..m {
                    let ra = &self.nodes[a.0].data[i * n..(i + 1) * n];
                    let rb = &self.nodes[b.0].data[i * n..(i + 1) * n];
                    let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if na < *eps || nb < *eps {
                        continue; // defined constant 0 on the degenerate set
                    }
                    let dot: f64 = ra.iter().zip(rb.iter()).map(|(x, y)| x * y).sum();
                    let cosv = dot / (na * nb);
                    for j in 0..n {
                        da[i * n + j] = c[i] * (rb[j] / (na * nb) - cosv * ra[j] / (na * na));
                        db[i * n + j] = c[i] * (ra[j] / (na * nb) - cosv * rb[j] / (nb * nb));
                    }
                }
                if self.nodes[a.0].requires_grad {
                    self.accum(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    self.accum(*b, &db);
                }
            }

            Op::SoftmaxXent { logits, targets } => {
                if self.nodes[logits.0].requires_grad {
                    let k = self.nodes[logits.0].shape[1];
                    let m = targets.len();
                    let s = self.nodes[out.0].saved.clone();
                    let mut dl = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..k {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            dl[i * k + j] = c[0] * (s[i * k + j] - onehot) / m as f64;
                        }
                    }
                    self.accum(*logits, &dl);
                }
            }

            Op::SoftXent { logits, target_probs } => {
                let k = self.nodes[logits.0].shape[1];
                let m = self.nodes[logits.0].shape[0];
                let s = self.nodes[out.0].saved.clone();
                if self.nodes[logits.0].requires_grad {
                    let y = self.nodes[target_probs.0].data.clone();
                    let mut dl = vec![0.0; m * k];
                    for i in 0..m {
                        let ysum: f64 = y[i * k..(i + 1) * k].iter().sum();
                        for j in 0..k {
                            dl[i * k + j] =
                                c[0] * (s[i * k + j] * ysum - y[i * k + j]) / m as f64;
                        }
                    }
                    self.accum(*logits, &dl);
                }
                if self.nodes[target_probs.0].requires_grad {
                    let mut dy = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..k {
                            dy[i * k + j] = -c[0] * s[i * k + j].ln() / m as f64;
                        }
                    }
                    self.accum(*target_probs, &dy);
                }
            }

            Op::BceLogits { logits, targets } => {
                let n = self.nodes[logits.0].data.len();
                if self.nodes[logits.0].requires_grad {
                    let dl: Vec<f64> = (0..n)
                        .map(|i| {
                            let x = self.nodes[logits.0].data[i];
                            let y = self.nodes[targets.0].data[i];
                            c[0] * (sigmoid(x) - y) / n as f64
                        })
                        .collect();
                    self.accum(*logits, &dl);
                }
                if self.nodes[targets.0].requires_grad {
                    let dy: Vec<f64> = (0..n)
                        .map(|i| -c[0] * self.nodes[logits.0].data[i] / n as f64)
                        .collect();
                    self.accum(*targets, &dy);
                }
            }

            Op::Dropout { a, mask } => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> = c.iter().zip(mask.iter()).map(|(g, m)| g * m).collect();
                    self.accum(*a, &da);
                }
            }
        }
    }
}
