//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value; node inputs
//! always precede the node itself, so a single reverse sweep visits each
//! recorded operation exactly once.

use super::tensor::{dims2, gemm, Tensor};
use super::TensorError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is a single row repeated over every lhs row.
    Row,
    /// rhs is a single column repeated over every lhs column.
    Col,
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Div(Var, Var, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    Pow(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Prelu { x: Var, alpha: Var },
    LayerNorm { x: Var, gain: Var, bias: Var },
    Softmax { x: Var, temperature: f64 },
    LogSoftmax(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterAddRows { x: Var, idx: Vec<usize> },
    PickPerRow { x: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Transpose(Var),
    SumAll(Var),
    MeanAll(Var),
    ColMeans(Var),
    RowSums(Var),
    NormalizeRows(Var),
    CosineRows(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    /// Op-specific forward cache (row norms, normalized activations, ...).
    aux: Vec<f64>,
}

const NORM_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

/// A computation tape. Single-threaded; independent tapes may live on
/// different threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
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

    /// Records a leaf. Its gradient is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, TensorError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn dims2(&self, v: Var) -> (usize, usize) {
        dims2(&self.nodes[v.0].shape)
    }

    /// Copies the value at `v` out as a standalone tensor.
    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape node shape is consistent")
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
        aux: Vec<f64>,
    ) -> Result<Var, TensorError> {
        if cfg!(debug_assertions) && data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            aux,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.nodes[a.0].shape.clone(),
            rhs: self.nodes[b.0].shape.clone(),
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var, TensorError> {
        let (ar, ac) = self.dims2(a);
        let (br, bc) = self.dims2(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].data,
            ta,
            &self.nodes[b.0].data,
            tb,
            &mut out,
            0.0,
        );
        self.push(
            "matmul",
            vec![m, n],
            out,
            Op::MatMul { a, b, ta, tb },
            &[a, b],
            Vec::new(),
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], out, Op::Transpose(x), &[x], Vec::new())
    }

    // ---- elementwise binary ---------------------------------------------

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast, TensorError> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let (ar, ac) = dims2(sa);
        let (br, bc) = dims2(sb);
        if ar * ac == br * bc && (sa == sb || (ar == br && ac == bc)) {
            return Ok(Broadcast::Same);
        }
        if br * bc == 1 {
            return Ok(Broadcast::Scalar);
        }
        if br == 1 && bc == ac {
            return Ok(Broadcast::Row);
        }
        if bc == 1 && br == ar {
            return Ok(Broadcast::Col);
        }
        Err(self.mismatch(op, a, b))
    }

    fn bindex(kind: Broadcast, i: usize, cols: usize) -> usize {
        match kind {
            Broadcast::Same => i,
            Broadcast::Row => i % cols,
            Broadcast::Col => i / cols,
            Broadcast::Scalar => 0,
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Broadcast) -> Op,
    ) -> Result<Var, TensorError> {
        let kind = self.broadcast(name, a, b)?;
        let cols = self.dims2(a).1.max(1);
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let out: Vec<f64> = da
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[Self::bindex(kind, i, cols)]))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(name, shape, out, mk(a, b, kind), &[a, b], Vec::new())
    }

    /// Elementwise `a + b`; `b` may broadcast as a row, column or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    // ---- elementwise unary ----------------------------------------------

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(name, shape, out, op, &[x], Vec::new())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TensorError> {
        self.scale(x, -1.0)
    }

    /// `x^p` for a constant exponent.
    pub fn pow(&mut self, x: Var, p: f64) -> Result<Var, TensorError> {
        self.unary("pow", x, |v| v.powf(p), Op::Pow(x, p))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Parametric ReLU with a per-column (`[n]`) or shared (`[1]`) slope.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var, TensorError> {
        let (_, c) = self.dims2(x);
        let na = self.nodes[alpha.0].data.len();
        if na != 1 && na != c {
            return Err(self.mismatch("prelu", x, alpha));
        }
        let a = &self.nodes[alpha.0].data;
        let out: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let s = if na == 1 { a[0] } else { a[i % c] };
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push("prelu", shape, out, Op::Prelu { x, alpha }, &[x, alpha], Vec::new())
    }

    // ---- normalization ----------------------------------------------------

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x);
        if self.nodes[gain.0].data.len() != c {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.nodes[bias.0].data.len() != c {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![0.0; r * c];
        // aux: normalized activations (r*c) followed by per-row inverse std (r)
        let mut aux = vec![0.0; r * c + r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            aux[r * c + i] = rstd;
            for j in 0..c {
                let xh = (row[j] - mu) * rstd;
                aux[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm { x, gain, bias },
            &[x, gain, bias],
            aux,
        )
    }

    /// Row-wise softmax of `x / temperature`, stabilized by the row maximum.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var, TensorError> {
        if !(temperature > 0.0) {
            return Err(TensorError::Temperature(temperature));
        }
        let (r, c) = self.dims2(x);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = ((row[j] - mx) / temperature).exp();
                out[i * c + j] = e;
                z += e;
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= z);
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push(
            "softmax",
            shape,
            out,
            Op::Softmax { x, temperature },
            &[x],
            Vec::new(),
        )
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push("log_softmax", shape, out, Op::LogSoftmax(x), &[x], Vec::new())
    }

    /// Rows divided by their L2 norm (norm clamped below at 1e-12).
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = n;
            let d = n.max(NORM_EPS);
            for j in 0..c {
                out[i * c + j] = row[j] / d;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push("normalize_rows", shape, out, Op::NormalizeRows(x), &[x], norms)
    }

    /// Cosine similarity of paired rows, shape `[m, 1]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(a);
        if self.dims2(b) != (r, c) {
            return Err(self.mismatch("cosine_rows", a, b));
        }
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut out = vec![0.0; r];
        // aux: per row (|a|, |b|, a·b)
        let mut aux = vec![0.0; 3 * r];
        for i in 0..r {
            let ra = &da[i * c..(i + 1) * c];
            let rb = &db[i * c..(i + 1) * c];
            let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            aux[3 * i] = na;
            aux[3 * i + 1] = nb;
            aux[3 * i + 2] = dot;
            out[i] = dot / (na * nb);
        }
        self.push("cosine_rows", vec![r, 1], out, Op::CosineRows(a, b), &[a, b], aux)
    }

    // ---- indexing -------------------------------------------------------

    /// `out[i] = x[idx[i]]` (row gather; embedding lookup).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::Index { op: "gather_rows", index: bad, bound: r });
        }
        let src = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(
            "gather_rows",
            vec![idx.len(), c],
            out,
            Op::GatherRows { x, idx: idx.to_vec() },
            &[x],
            Vec::new(),
        )
    }

    /// `out[idx[i]] += x[i]` into an `n_out`-row result.
    pub fn scatter_add_rows(
        &mut self,
        x: Var,
        idx: &[usize],
        n_out: usize,
    ) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x);
        if idx.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(TensorError::Index { op: "scatter_add_rows", index: bad, bound: n_out });
        }
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; n_out * c];
        for (i, &t) in idx.iter().enumerate() {
            for j in 0..c {
                out[t * c + j] += src[i * c + j];
            }
        }
        self.push(
            "scatter_add_rows",
            vec![n_out, c],
            out,
            Op::ScatterAddRows { x, idx: idx.to_vec() },
            &[x],
            Vec::new(),
        )
    }

    /// `out[i] = x[i, idx[i]]`, shape `[m]`.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x);
        if idx.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "pick_per_row",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(TensorError::Index { op: "pick_per_row", index: bad, bound: c });
        }
        let src = &self.nodes[x.0].data;
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        self.push(
            "pick_per_row",
            vec![r],
            out,
            Op::PickPerRow { x, idx: idx.to_vec() },
            &[x],
            Vec::new(),
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = *xs.first().ok_or(TensorError::Empty("concat_cols"))?;
        let r = self.dims2(first).0;
        let mut total = 0;
        for &x in xs {
            let (xr, xc) = self.dims2(x);
            if xr != r {
                return Err(self.mismatch("concat_cols", first, x));
            }
            total += xc;
        }
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for &x in xs {
            let (_, xc) = self.dims2(x);
            let src = &self.nodes[x.0].data;
            for i in 0..r {
                out[i * total + off..i * total + off + xc]
                    .copy_from_slice(&src[i * xc..(i + 1) * xc]);
            }
            off += xc;
        }
        self.push(
            "concat_cols",
            vec![r, total],
            out,
            Op::ConcatCols(xs.to_vec()),
            xs,
            Vec::new(),
        )
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = *xs.first().ok_or(TensorError::Empty("concat_rows"))?;
        let c = self.dims2(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (xr, xc) = self.dims2(x);
            if xc != c {
                return Err(self.mismatch("concat_rows", first, x));
            }
            rows += xr;
            out.extend_from_slice(&self.nodes[x.0].data);
        }
        self.push(
            "concat_rows",
            vec![rows, c],
            out,
            Op::ConcatRows(xs.to_vec()),
            xs,
            Vec::new(),
        )
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x);
        if start > end || end > c {
            return Err(TensorError::Index { op: "slice_cols", index: end, bound: c });
        }
        let w = end - start;
        let src = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        self.push(
            "slice_cols",
            vec![r, w],
            out,
            Op::SliceCols { x, start },
            &[x],
            Vec::new(),
        )
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x);
        if start > end || end > r {
            return Err(TensorError::Index { op: "slice_rows", index: end, bound: r });
        }
        let out = self.nodes[x.0].data[start * c..end * c].to_vec();
        self.push(
            "slice_rows",
            vec![end - start, c],
            out,
            Op::SliceRows { x, start },
            &[x],
            Vec::new(),
        )
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.nodes[x.0].data.iter().sum();
        self.push("sum", Vec::new(), vec![s], Op::SumAll(x), &[x], Vec::new())
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let d = &self.nodes[x.0].data;
        if d.is_empty() {
            return Err(TensorError::Empty("mean"));
        }
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean", Vec::new(), vec![s], Op::MeanAll(x), &[x], Vec::new())
    }

    /// Mean over rows, shape `[1, n]`.
    pub fn col_means(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x);
        if r == 0 {
            return Err(TensorError::Empty("col_means"));
        }
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += src[i * c + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        self.push("col_means", vec![1, c], out, Op::ColMeans(x), &[x], Vec::new())
    }

    /// Sum over columns of each row, shape `[m, 1]`.
    pub fn row_sums(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x);
        let src = &self.nodes[x.0].data;
        let out: Vec<f64> = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        self.push("row_sums", vec![r, 1], out, Op::RowSums(x), &[x], Vec::new())
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !ln.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].data.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn reduce_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        b: Var,
        kind: Broadcast,
        cols: usize,
        contrib: impl Fn(usize) -> f64,
        len: usize,
    ) {
        self.acc(grads, b, |gb| {
            for i in 0..len {
                gb[Self::bindex(kind, i, cols)] += contrib(i);
            }
        });
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len = g.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (ar, ac) = self.dims2(a);
                let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
                let n = node.shape[1];
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                self.acc(grads, a, |ga| {
                    if ta {
                        // dA (k×m) = op(B) · dCᵀ
                        gemm(k, n, m, bd, tb, g, true, ga, 1.0);
                    } else {
                        // dA (m×k) = dC · op(B)ᵀ
                        gemm(m, n, k, g, false, bd, !tb, ga, 1.0);
                    }
                });
                self.acc(grads, b, |gb| {
                    if tb {
                        // dB (n×k) = dCᵀ · op(A)
                        gemm(n, m, k, g, true, ad, ta, gb, 1.0);
                    } else {
                        // dB (k×n) = op(A)ᵀ · dC
                        gemm(k, m, n, ad, !ta, g, false, gb, 1.0);
                    }
                });
            }
            Op::Add(a, b, kind) => {
                let cols = self.dims2(*a).1.max(1);
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.reduce_broadcast(grads, *b, *kind, cols, |i| g[i], len);
            }
            Op::Sub(a, b, kind) => {
                let cols = self.dims2(*a).1.max(1);
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.reduce_broadcast(grads, *b, *kind, cols, |i| -g[i], len);
            }
            Op::Mul(a, b, kind) => {
                let cols = self.dims2(*a).1.max(1);
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                let k = *kind;
                self.acc(grads, *a, |ga| {
                    for i in 0..len {
                        ga[i] += g[i] * bd[Self::bindex(k, i, cols)];
                    }
                });
                self.reduce_broadcast(grads, *b, k, cols, |i| g[i] * ad[i], len);
            }
            Op::Div(a, b, kind) => {
                let cols = self.dims2(*a).1.max(1);
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                let k = *kind;
                self.acc(grads, *a, |ga| {
                    for i in 0..len {
                        ga[i] += g[i] / bd[Self::bindex(k, i, cols)];
                    }
                });
                self.reduce_broadcast(
                    grads,
                    *b,
                    k,
                    cols,
                    |i| {
                        let y = bd[Self::bindex(k, i, cols)];
                        -g[i] * ad[i] / (y * y)
                    },
                    len,
                );
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(s, y)| *s += c * y));
            }
            Op::AddScalar(x) => {
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(s, y)| *s += y));
            }
            Op::Pow(x, p) => {
                let p = *p;
                let xd = &self.nodes[x.0].data;
                self.acc(grads, *x, |gx| {
                    for i in 0..len {
                        let d = if p == 1.0 { 1.0 } else { p * xd[i].powf(p - 1.0) };
                        gx[i] += g[i] * d;
                    }
                });
            }
            Op::Exp(x) => {
                let y = &node.data;
                self.acc(grads, *x, |gx| {
                    for i in 0..len {
                        gx[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log(x) => {
                let xd = &self.nodes[x.0].data;
                self.acc(grads, *x, |gx| {
                    for i in 0..len {
                        gx[i] += g[i] / xd[i];
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.data;
                self.acc(grads, *x, |gx| {
                    for i in 0..len {
                        gx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu(x) => {
                let xd = &self.nodes[x.0].data;
                self.acc(grads, *x, |gx| {
                    for i in 0..len {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Prelu { x, alpha } => {
                let xd = &self.nodes[x.0].data;
                let ad = &self.nodes[alpha.0].data;
                let na = ad.len();
                let c = self.dims2(*x).1.max(1);
                let slope = |i: usize| if na == 1 { ad[0] } else { ad[i % c] };
                self.acc(grads, *x, |gx| {
                    for i in 0..len {
                        gx[i] += g[i] * if xd[i] > 0.0 { 1.0 } else { slope(i) };
                    }
                });
                self.acc(grads, *alpha, |ga| {
                    for i in 0..len {
                        if xd[i] <= 0.0 {
                            let j = if na == 1 { 0 } else { i % c };
                            ga[j] += g[i] * xd[i];
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let (r, c) = self.dims2(*x);
                let xhat = &node.aux[..r * c];
                let rstd = &node.aux[r * c..];
                let gd = &self.nodes[gain.0].data;
                self.acc(grads, *gain, |gg| {
                    for i in 0..len {
                        gg[i % c] += g[i] * xhat[i];
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for i in 0..len {
                        gb[i % c] += g[i];
                    }
                });
                self.acc(grads, *x, |gx| {
                    for i in 0..r {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dxh = g[i * c + j] * gd[j];
                            m1 += dxh;
                            m2 += dxh * xhat[i * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dxh = g[i * c + j] * gd[j];
                            gx[i * c + j] += rstd[i] * (dxh - m1 - xhat[i * c + j] * m2);
                        }
                    }
                });
            }
            Op::Softmax { x, temperature } => {
                let (r, c) = self.dims2(*x);
                let y = &node.data;
                let t = *temperature;
                self.acc(grads, *x, |gx| {
                    for i in 0..r {
                        let dot: f64 = (0..c).map(|j| g[i * c + j] * y[i * c + j]).sum();
                        for j in 0..c {
                            gx[i * c + j] += y[i * c + j] * (g[i * c + j] - dot) / t;
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let (r, c) = self.dims2(*x);
                let y = &node.data;
                self.acc(grads, *x, |gx| {
                    for i in 0..r {
                        let gs: f64 = g[i * c..(i + 1) * c].iter().sum();
                        for j in 0..c {
                            gx[i * c + j] += g[i * c + j] - y[i * c + j].exp() * gs;
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = self.dims2(*x).1;
                self.acc(grads, *x, |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[src * c + j] += g[r * c + j];
                        }
                    }
                });
            }
            Op::ScatterAddRows { x, idx } => {
                let c = self.dims2(*x).1;
                self.acc(grads, *x, |gx| {
                    for (r, &dst) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += g[dst * c + j];
                        }
                    }
                });
            }
            Op::PickPerRow { x, idx } => {
                let c = self.dims2(*x).1;
                self.acc(grads, *x, |gx| {
                    for (r, &j) in idx.iter().enumerate() {
                        gx[r * c + j] += g[r];
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let total = node.shape[1];
                let r = node.shape[0];
                let mut off = 0;
                for &x in xs {
                    let xc = self.dims2(x).1;
                    self.acc(grads, x, |gx| {
                        for i in 0..r {
                            for j in 0..xc {
                                gx[i * xc + j] += g[i * total + off + j];
                            }
                        }
                    });
                    off += xc;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.nodes[x.0].data.len();
                    self.acc(grads, x, |gx| {
                        gx.iter_mut().zip(&g[off..off + n]).for_each(|(s, y)| *s += y);
                    });
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.dims2(*x).1;
                let (r, w) = (node.shape[0], node.shape[1]);
                let s = *start;
                self.acc(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..w {
                            gx[i * c + s + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = self.dims2(*x).1;
                let s = *start;
                self.acc(grads, *x, |gx| {
                    gx[s * c..s * c + len]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                });
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims2(*x);
                self.acc(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let s = g[0];
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += s));
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].data.len() as f64;
                let s = g[0] / n;
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += s));
            }
            Op::ColMeans(x) => {
                let (r, c) = self.dims2(*x);
                self.acc(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j] / r as f64;
                        }
                    }
                });
            }
            Op::RowSums(x) => {
                let (r, c) = self.dims2(*x);
                self.acc(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[i];
                        }
                    }
                });
            }
            Op::NormalizeRows(x) => {
                let (r, c) = self.dims2(*x);
                let y = &node.data;
                let norms = &node.aux;
                self.acc(grads, *x, |gx| {
                    for i in 0..r {
                        let n = norms[i];
                        if n > NORM_EPS {
                            let dot: f64 = (0..c).map(|j| g[i * c + j] * y[i * c + j]).sum();
                            for j in 0..c {
                                gx[i * c + j] += (g[i * c + j] - y[i * c + j] * dot) / n;
                            }
                        } else {
                            for j in 0..c {
                                gx[i * c + j] += g[i * c + j] / NORM_EPS;
                            }
                        }
                    }
                });
            }
            Op::CosineRows(a, b) => {
                let (r, c) = self.dims2(*a);
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                let aux = &node.aux;
                let cos = &node.data;
                for (this, other, self_norm_at) in [(*a, bd, 0usize), (*b, ad, 1usize)] {
                    let mine = &self.nodes[this.0].data;
                    self.acc(grads, this, |gx| {
                        for i in 0..r {
                            let (na, nb) = (aux[3 * i], aux[3 * i + 1]);
                            let own = if self_norm_at == 0 { na } else { nb };
                            for j in 0..c {
                                let d = other[i * c + j] / (na * nb)
                                    - cos[i] * mine[i * c + j] / (own * own);
                                gx[i * c + j] += g[i] * d;
                            }
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.leaf(&Tensor::identity(2));
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i, a).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case_and_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t(&[2, 1], &[0.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[2.0, 4.0]);
        let z = tape.leaf(&Tensor::zeros(&[3, 2]));
        let zc = tape.matmul(z, a).unwrap();
        assert!(tape.data(zc).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], &[0.0, 0.0, 3f64.ln(), 0.0]));
        let y = tape.softmax_rows(x, 1.0).unwrap();
        let d = tape.data(y);
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);
        assert!((d[2] - 0.75).abs() < 1e-12 && (d[3] - 0.25).abs() < 1e-12);

        let x = tape.leaf(&t(&[1, 4], &[3.0, -2.0, 0.5, 1.0]));
        let y = tape.softmax_rows(x, 1e6).unwrap();
        assert!(tape.data(y).iter().all(|p| (p - 0.25).abs() < 1e-5));
        assert!(matches!(tape.softmax_rows(x, 0.0), Err(TensorError::Temperature(_))));
        assert!(tape.softmax_rows(x, -1.0).is_err());
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::filled(&[2, 2], 1.0).with_grad());
        let c = tape.leaf(&Tensor::scalar(4.0));
        let _unused = tape.sum(w).unwrap();
        let loss = tape.scale(c, 2.0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(w).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::filled(&[2, 2], 1.0).with_grad());
        assert!(matches!(tape.backward(w), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn broadcast_add_row_and_col() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let row = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let col = tape.leaf(&t(&[2, 1], &[10.0, 20.0]));
        let y = tape.add(a, row).unwrap();
        let z = tape.add(y, col).unwrap();
        assert_eq!(tape.data(z), &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0]);
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_detected_in_debug() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[-1.0]));
        assert!(matches!(tape.log(x), Err(TensorError::NonFinite { .. })));
    }
}
