//! Dense f64 tensors and a tape-based reverse-mode autodiff engine.
//!
//! The tape records every operation of a forward pass in creation order;
//! `backward` replays it in reverse. All tape values are 2-D (rows x cols);
//! 1-D tensors enter as a single row. A tape and its values are confined to
//! one thread; distinct replicas may run in parallel with no shared state.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

// ── Tensor ───────────────────────────────────────────────────────────

/// N-dimensional array of f64 with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian(0, std) initialization.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interpret as a 2-D (rows, cols) view. 1-D tensors become one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::Input(format!(
                "tensor of rank {} cannot enter the tape",
                self.shape.len()
            ))),
        }
    }

    /// Add `g` into the gradient slot, allocating it on first use.
    pub fn accum_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, &v) in grad.iter_mut().zip(g) {
            *gi += v;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    AddBias { x: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    SliceRows { x: usize, start: usize },
    ConcatRows { xs: Vec<usize> },
    ConcatCols { xs: Vec<usize> },
    SoftmaxRows { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, normed: Vec<f64>, inv_std: Vec<f64> },
    Gelu { x: usize },
    Sum { x: usize },
    L2NormRows { x: usize, inv_norm: Vec<f64> },
    CrossEntropy { logits: usize, probs: Vec<f64>, targets: Vec<usize> },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

/// Recording of one forward pass. Nodes are appended in creation order,
/// which is also a valid topological order for backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, op: Op, rows: usize, cols: usize, data: Vec<f64>, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node { op, rows, cols, data, grad: None, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Gradient of the last `backward` call, if this node participated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Constant input; never receives a gradient.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        self.push(Op::Leaf, rows, cols, data, false)
    }

    /// Register a tensor as an input. Copies the data; tracks gradients
    /// iff `t.requires_grad`.
    pub fn input(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(Op::Leaf, r, c, t.data.clone(), t.requires_grad))
    }

    // ── Forward operations ───────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::Dimension { op: "matmul", lhs: vec![m, ka], rhs: vec![kb, n] });
        }
        let out = matmul_raw(self.value(a), self.value(b), m, ka, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, m, n, out, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let src = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(x);
        self.push(Op::Transpose { x: x.0 }, c, r, out, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Dimension { op: "add", lhs: vec![sa.0, sa.1], rhs: vec![sb.0, sb.1] });
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, sa.0, sa.1, out, ng))
    }

    /// Row-wise bias add: x[n,m] + b[1,m]. The only broadcast supported.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let (br, bc) = self.shape(b);
        if br != 1 || bc != c {
            return Err(Error::Dimension { op: "add_bias", lhs: vec![r, c], rhs: vec![br, bc] });
        }
        let bias = self.value(b).to_vec();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(Op::AddBias { x: x.0, b: b.0 }, r, c, out, ng))
    }

    /// Elementwise (Hadamard) product of same-shape values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Dimension { op: "mul", lhs: vec![sa.0, sa.1], rhs: vec![sb.0, sb.1] });
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, sa.0, sa.1, out, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (r, cl) = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let ng = self.needs(x);
        self.push(Op::Scale { x: x.0, c }, r, cl, out, ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(Error::Dimension { op: "slice_rows", lhs: vec![r, c], rhs: vec![start, len] });
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let ng = self.needs(x);
        Ok(self.push(Op::SliceRows { x: x.0, start }, len, c, out, ng))
    }

    /// Vertical stack: all parts must share a column count.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Input("concat_rows of zero parts".into()));
        }
        let (_, c) = self.shape(xs[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        let mut ng = false;
        for &v in xs {
            let (r, cv) = self.shape(v);
            if cv != c {
                return Err(Error::Dimension { op: "concat_rows", lhs: vec![rows, c], rhs: vec![r, cv] });
            }
            rows += r;
            out.extend_from_slice(self.value(v));
            ng |= self.needs(v);
        }
        Ok(self.push(Op::ConcatRows { xs: xs.iter().map(|v| v.0).collect() }, rows, c, out, ng))
    }

    /// Horizontal stack: all parts must share a row count.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Input("concat_cols of zero parts".into()));
        }
        let (r, _) = self.shape(xs[0]);
        let mut cols = 0;
        let mut ng = false;
        for &v in xs {
            let (rv, cv) = self.shape(v);
            if rv != r {
                return Err(Error::Dimension { op: "concat_cols", lhs: vec![r, cols], rhs: vec![rv, cv] });
            }
            cols += cv;
            ng |= self.needs(v);
        }
        let mut out = vec![0.0; r * cols];
        let mut off = 0;
        for &v in xs {
            let (_, cv) = self.shape(v);
            let src = self.value(v);
            for i in 0..r {
                out[i * cols + off..i * cols + off + cv].copy_from_slice(&src[i * cv..(i + 1) * cv]);
            }
            off += cv;
        }
        Ok(self.push(Op::ConcatCols { xs: xs.iter().map(|v| v.0).collect() }, r, cols, out, ng))
    }

    /// Numerically stable row softmax (per-row max subtraction).
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.needs(x);
        self.push(Op::SoftmaxRows { x: x.0 }, r, c, out, ng)
    }

    /// Row layer normalization with affine parameters gamma, beta of shape [1, cols].
    pub fn layernorm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (r, c) = self.shape(x);
        let (gr, gc) = self.shape(gamma);
        if gr != 1 || gc != c {
            return Err(Error::Dimension { op: "layernorm", lhs: vec![r, c], rhs: vec![gr, gc] });
        }
        let (br, bc) = self.shape(beta);
        if br != 1 || bc != c {
            return Err(Error::Dimension { op: "layernorm", lhs: vec![r, c], rhs: vec![br, bc] });
        }
        let g = self.value(gamma).to_vec();
        let b = self.value(beta).to_vec();
        let src = self.value(x);
        let mut normed = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let nv = (row[j] - mean) * is;
                normed[i * c + j] = nv;
                out[i * c + j] = g[j] * nv + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, normed, inv_std },
            r,
            c,
            out,
            ng,
        ))
    }

    /// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|&v| gelu_fwd(v)).collect();
        let ng = self.needs(x);
        self.push(Op::Gelu { x: x.0 }, r, c, out, ng)
    }

    /// Sum of all entries; a [1,1] scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let ng = self.needs(x);
        self.push(Op::Sum { x: x.0 }, 1, 1, vec![s], ng)
    }

    /// Row-wise L2 normalization: each row divided by sqrt(sum sq + 1e-24).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let src = self.value(x);
        let mut out = vec![0.0; r * c];
        let mut inv_norm = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = (row.iter().map(|v| v * v).sum::<f64>() + 1e-24).sqrt();
            let inv = 1.0 / n;
            inv_norm[i] = inv;
            for j in 0..c {
                out[i * c + j] = row[j] * inv;
            }
        }
        let ng = self.needs(x);
        self.push(Op::L2NormRows { x: x.0, inv_norm }, r, c, out, ng)
    }

    /// Mean softmax cross-entropy of logits [B,K] against integer targets.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, k) = self.shape(logits);
        if b == 0 {
            return Err(Error::Input("cross_entropy on empty batch".into()));
        }
        if targets.len() != b {
            return Err(Error::Dimension { op: "cross_entropy", lhs: vec![b, k], rhs: vec![targets.len()] });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Input(format!("cross_entropy target {t} out of range (K={k})")));
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; b * k];
        let mut total = 0.0;
        for i in 0..b {
            let row = &src[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            total += lse - row[targets[i]];
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy { logits: logits.0, probs, targets: targets.to_vec() },
            1,
            1,
            vec![total / b as f64],
            ng,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Clears previous node gradients,
    /// then fills `grad` for every participating node up to the leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::State(format!("backward requires a scalar loss, got [{r}, {c}]")));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // loss does not depend on any tracked input
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.take().unwrap();
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn add_grad(&mut self, node: usize, delta: &[f64]) {
        if !self.nodes[node].needs_grad {
            return;
        }
        let len = self.nodes[node].data.len();
        let slot = self.nodes[node].grad.get_or_insert_with(|| vec![0.0; len]);
        for (s, &d) in slot.iter_mut().zip(delta) {
            *s += d;
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let rows = self.nodes[i].rows;
        let cols = self.nodes[i].cols;
        // Ownership dance: op is read-only here, moved out temporarily.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                let n = self.nodes[*b].cols;
                if self.nodes[*a].needs_grad {
                    // dA = g . B^T
                    let bt = transpose_raw(&self.nodes[*b].data, k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.add_grad(*a, &da);
                }
                if self.nodes[*b].needs_grad {
                    // dB = A^T . g
                    let at = transpose_raw(&self.nodes[*a].data, m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.add_grad(*b, &db);
                }
            }
            Op::Transpose { x } => {
                let gx = transpose_raw(g, rows, cols);
                self.add_grad(*x, &gx);
            }
            Op::Add { a, b } => {
                self.add_grad(*a, g);
                self.add_grad(*b, g);
            }
            Op::AddBias { x, b } => {
                self.add_grad(*x, g);
                if self.nodes[*b].needs_grad {
                    let mut gb = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    self.add_grad(*b, &gb);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].needs_grad {
                    let da: Vec<f64> = g.iter().zip(&self.nodes[*b].data).map(|(x, y)| x * y).collect();
                    self.add_grad(*a, &da);
                }
                if self.nodes[*b].needs_grad {
                    let db: Vec<f64> = g.iter().zip(&self.nodes[*a].data).map(|(x, y)| x * y).collect();
                    self.add_grad(*b, &db);
                }
            }
            Op::Scale { x, c } => {
                let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.add_grad(*x, &gx);
            }
            Op::SliceRows { x, start } => {
                if self.nodes[*x].needs_grad {
                    let xc = self.nodes[*x].cols;
                    let mut gx = vec![0.0; self.nodes[*x].data.len()];
                    gx[start * xc..start * xc + g.len()].copy_from_slice(g);
                    self.add_grad(*x, &gx);
                }
            }
            Op::ConcatRows { xs } => {
                let mut off = 0;
                for &x in xs {
                    let len = self.nodes[x].data.len();
                    if self.nodes[x].needs_grad {
                        let part = g[off..off + len].to_vec();
                        self.add_grad(x, &part);
                    }
                    off += len;
                }
            }
            Op::ConcatCols { xs } => {
                let mut off = 0;
                for &x in xs {
                    let (xr, xc) = (self.nodes[x].rows, self.nodes[x].cols);
                    if self.nodes[x].needs_grad {
                        let mut part = vec![0.0; xr * xc];
                        for i in 0..xr {
                            part[i * xc..(i + 1) * xc]
                                .copy_from_slice(&g[i * cols + off..i * cols + off + xc]);
                        }
                        self.add_grad(x, &part);
                    }
                    off += xc;
                }
            }
            Op::SoftmaxRows { x } => {
                if self.nodes[x.to_owned()].needs_grad {
                    let y = &self.nodes[i].data;
                    let mut gx = vec![0.0; y.len()];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gx[r * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.add_grad(*x, &gx);
                }
            }
            Op::LayerNorm { x, gamma, beta, normed, inv_std } => {
                if self.nodes[*beta].needs_grad {
                    let mut gb = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    self.add_grad(*beta, &gb);
                }
                if self.nodes[*gamma].needs_grad {
                    let mut gg = vec![0.0; cols];
                    for (r, row) in g.chunks(cols).enumerate() {
                        for j in 0..cols {
                            gg[j] += row[j] * normed[r * cols + j];
                        }
                    }
                    self.add_grad(*gamma, &gg);
                }
                if self.nodes[*x].needs_grad {
                    let gvals = self.nodes[*gamma].data.clone();
                    let mut gx = vec![0.0; rows * cols];
                    let m = cols as f64;
                    for r in 0..rows {
                        let nr = &normed[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gy: Vec<f64> = (0..cols).map(|j| gr[j] * gvals[j]).collect();
                        let mean_gy: f64 = gy.iter().sum::<f64>() / m;
                        let mean_gyn: f64 = gy.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / m;
                        for j in 0..cols {
                            gx[r * cols + j] = inv_std[r] * (gy[j] - mean_gy - nr[j] * mean_gyn);
                        }
                    }
                    self.add_grad(*x, &gx);
                }
            }
            Op::Gelu { x } => {
                if self.nodes[*x].needs_grad {
                    let gx: Vec<f64> = self.nodes[*x]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| gv * gelu_bwd(v))
                        .collect();
                    self.add_grad(*x, &gx);
                }
            }
            Op::Sum { x } => {
                if self.nodes[*x].needs_grad {
                    let gx = vec![g[0]; self.nodes[*x].data.len()];
                    self.add_grad(*x, &gx);
                }
            }
            Op::L2NormRows { x, inv_norm } => {
                if self.nodes[*x].needs_grad {
                    let y = &self.nodes[i].data;
                    let mut gx = vec![0.0; y.len()];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gx[r * cols + j] = inv_norm[r] * (gr[j] - yr[j] * dot);
                        }
                    }
                    self.add_grad(*x, &gx);
                }
            }
            Op::CrossEntropy { logits, probs, targets } => {
                if self.nodes[*logits].needs_grad {
                    let b = self.nodes[*logits].rows;
                    let k = self.nodes[*logits].cols;
                    let scale = g[0] / b as f64;
                    let mut gx = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        gx[i * k + t] -= 1.0;
                    }
                    for v in gx.iter_mut() {
                        *v *= scale;
                    }
                    self.add_grad(*logits, &gx);
                }
            }
        }
        self.nodes[i].op = op;
    }
}

// ── Raw kernels ──────────────────────────────────────────────────────

/// A[m,k] . B[k,n], row-major, ikj loop order.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn gelu_fwd(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
