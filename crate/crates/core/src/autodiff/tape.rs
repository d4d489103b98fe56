//! Wengert tape: reverse-mode differentiation via operation recording.
//!
//! Every primitive records its inputs and output values; `backward` replays
//! the list in reverse, accumulating vector-Jacobian products. Tapes are
//! single-threaded values; independent tapes may live on separate threads.

use super::tensor::Tensor;
use super::DiffError;

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    pub fn id(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Neg(Var),
    Exp(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    /// ln(max(x, eps)); gradient is zero in the clamped region.
    LnEps { x: Var, eps: f64 },
    /// max(x, 0)^p for p > 0.
    Powf { x: Var, p: f64 },
    Recip(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Scale { x: Var, c: f64 },
    AddScalar {
        x: Var,
        #[allow(dead_code)]
        c: f64,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Matmul { a: Var, b: Var },
    Transpose(Var),
    /// (r, c) matrix plus a length-c vector added to every row.
    AddRowBroadcast { m: Var, v: Var },
    /// (r, c) matrix times a length-c vector applied to every row.
    MulRowBroadcast { m: Var, v: Var },
    Sum(Var),
    Mean(Var),
    /// log(sum(exp(x))) over all elements, numerically stable.
    LogSumExp(Var),
    /// Row-wise softmax of a (r, c) matrix.
    SoftmaxRows(Var),
    /// Row-wise standardization of a (r, c) matrix: (x - mu) / sqrt(var + eps).
    LayerNormRows { x: Var, eps: f64 },
    /// Flat index select; backward scatter-adds.
    Gather { x: Var, idx: Vec<usize> },
    /// Row select from a (r, c) matrix; backward scatter-adds rows.
    GatherRows { x: Var, rows: Vec<usize> },
    /// Contiguous flat slice.
    Slice {
        x: Var,
        offset: usize,
        #[allow(dead_code)]
        len: usize,
    },
    /// Column range [c0, c1) of a (r, c) matrix.
    SliceCols { x: Var, c0: usize, c1: usize },
    /// Column-wise concatenation of matrices sharing a row count.
    ConcatCols { parts: Vec<Var> },
    /// Flat concatenation (row concatenation for matrices sharing a column count).
    Concat { parts: Vec<Var> },
    Reshape(Var),
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Neg(_) => "neg",
        Op::Exp(_) => "exp",
        Op::Tanh(_) => "tanh",
        Op::Relu(_) => "relu",
        Op::Abs(_) => "abs",
        Op::Square(_) => "square",
        Op::LnEps { .. } => "ln_eps",
        Op::Powf { .. } => "powf",
        Op::Recip(_) => "recip",
        Op::Clamp { .. } => "clamp",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Matmul { .. } => "matmul",
        Op::Transpose(_) => "transpose",
        Op::AddRowBroadcast { .. } => "add_row_broadcast",
        Op::MulRowBroadcast { .. } => "mul_row_broadcast",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::LogSumExp(_) => "logsumexp",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::LayerNormRows { .. } => "layer_norm_rows",
        Op::Gather { .. } => "gather",
        Op::GatherRows { .. } => "gather_rows",
        Op::Slice { .. } => "slice",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols { .. } => "concat_cols",
        Op::Concat { .. } => "concat",
        Op::Reshape(_) => "reshape",
    }
}

struct Node {
    op: Op,
    values: Tensor,
}

/// Recording tape. Create one per forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    /// First op that produced a non-finite value, if any.
    fault: Option<(usize, &'static str)>,
}

/// Row-major dgemm with arbitrary strides. `c += alpha * a @ b` when beta = 1.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id()].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id()].values.shape()
    }

    fn push(&mut self, op: Op, values: Tensor) -> Var {
        if self.fault.is_none() && !values.all_finite() {
            self.fault = Some((self.nodes.len(), op_name(&op)));
        }
        let id = self.nodes.len() as u32;
        self.nodes.push(Node { op, values });
        Var(id)
    }

    /// Insert a value as a leaf (input, constant, or parameter binding).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    // ---- unary elementwise -------------------------------------------------

    pub fn neg(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| -v);
        self.push(Op::Neg(x), t)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), t)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), t)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), t)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::abs);
        self.push(Op::Abs(x), t)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        self.push(Op::Square(x), t)
    }

    pub fn ln_eps(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x).map(|v| v.max(eps).ln());
        self.push(Op::LnEps { x, eps }, t)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let t = self.value(x).map(|v| v.max(0.0).powf(p));
        self.push(Op::Powf { x, p }, t)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| 1.0 / v);
        self.push(Op::Recip(x), t)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp { x, lo, hi }, t)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(Op::Scale { x, c }, t)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push(Op::AddScalar { x, c }, t)
    }

    // ---- binary elementwise ------------------------------------------------

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same_shape("add", a, b);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data);
        self.push(Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same_shape("sub", a, b);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data);
        self.push(Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same_shape("mul", a, b);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data);
        self.push(Op::Mul(a, b), t)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.check_same_shape("div", a, b);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x / y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data);
        self.push(Op::Div(a, b), t)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (k2, n) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(k, k2, "matmul: inner extents {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        dgemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            0.0,
            &mut out,
        );
        self.push(Op::Matmul { a, b }, Tensor::new(vec![m, n], out))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Op::Transpose(x), Tensor::new(vec![c, r], out))
    }

    pub fn add_row_broadcast(&mut self, m: Var, v: Var) -> Var {
        let (r, c) = (self.value(m).rows(), self.value(m).cols());
        assert_eq!(self.value(v).len(), c, "add_row_broadcast: vector length");
        let mv = self.value(m).data();
        let vv = self.value(v).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(mv[i * c + j] + vv[j]);
            }
        }
        self.push(Op::AddRowBroadcast { m, v }, Tensor::new(vec![r, c], out))
    }

    pub fn mul_row_broadcast(&mut self, m: Var, v: Var) -> Var {
        let (r, c) = (self.value(m).rows(), self.value(m).cols());
        assert_eq!(self.value(v).len(), c, "mul_row_broadcast: vector length");
        let mv = self.value(m).data();
        let vv = self.value(v).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(mv[i * c + j] * vv[j]);
            }
        }
        self.push(Op::MulRowBroadcast { m, v }, Tensor::new(vec![r, c], out))
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::Mean(x), Tensor::scalar(s / n))
    }

    pub fn logsumexp(&mut self, x: Var) -> Var {
        let data = self.value(x).data();
        let m = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = data.iter().map(|&v| (v - m).exp()).sum();
        self.push(Op::LogSumExp(x), Tensor::scalar(m + s.ln()))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                s += e;
            }
            for j in 0..c {
                out[i * c + j] /= s;
            }
        }
        self.push(Op::SoftmaxRows(x), Tensor::new(vec![r, c], out))
    }

    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mu) * inv;
            }
        }
        self.push(Op::LayerNormRows { x, eps }, Tensor::new(vec![r, c], out))
    }

    // ---- indexing / layout ---------------------------------------------------

    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let src = self.value(x).data();
        for &i in idx {
            assert!(i < src.len(), "gather: index {i} out of {}", src.len());
        }
        let data: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        self.push(Op::Gather { x, idx: idx.to_vec() }, Tensor::vector(data))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            assert!(i < r, "gather_rows: row {i} out of {r}");
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(Op::GatherRows { x, rows: rows.to_vec() }, Tensor::new(vec![rows.len(), c], data))
    }

    pub fn slice(&mut self, x: Var, offset: usize, len: usize) -> Var {
        let src = self.value(x).data();
        assert!(offset + len <= src.len(), "slice: {offset}+{len} out of {}", src.len());
        let data = src[offset..offset + len].to_vec();
        self.push(Op::Slice { x, offset, len }, Tensor::vector(data))
    }

    pub fn slice_cols(&mut self, x: Var, c0: usize, c1: usize) -> Var {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        assert!(c0 < c1 && c1 <= c, "slice_cols: [{c0}, {c1}) out of {c}");
        let src = self.value(x).data();
        let w = c1 - c0;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + c0..i * c + c1]);
        }
        self.push(Op::SliceCols { x, c0, c1 }, Tensor::new(vec![r, w], data))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.value(p).cols();
                data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        for &p in parts {
            assert_eq!(self.value(p).rows(), r, "concat_cols: row counts differ");
        }
        self.push(Op::ConcatCols { parts: parts.to_vec() }, Tensor::new(vec![r, total], data))
    }

    /// Flat concatenation to a vector; reshape afterwards for row stacking.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Op::Concat { parts: parts.to_vec() }, Tensor::vector(data))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape.to_vec());
        self.push(Op::Reshape(x), t)
    }

    // ---- composites ----------------------------------------------------------

    /// Elementwise max via relu: max(a, b) = a + relu(b - a).
    pub fn max2(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(b, a);
        let r = self.relu(d);
        self.add(a, r)
    }

    /// Elementwise min via relu: min(a, b) = a - relu(a - b).
    pub fn min2(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let r = self.relu(d);
        self.sub(a, r)
    }

    /// Smooth minimum: -temp * logsumexp(-x / temp). Always <= min(x).
    pub fn softmin(&mut self, x: Var, temp: f64) -> Var {
        let s = self.scale(x, -1.0 / temp);
        let l = self.logsumexp(s);
        self.scale(l, -temp)
    }

    // ---- reverse sweep ---------------------------------------------------------

    /// Reverse-mode sweep from a scalar objective. Returns one gradient buffer
    /// per node; look up parameters by their `Var`.
    pub fn backward(&mut self, objective: Var) -> Result<Gradients, DiffError> {
        if let Some((index, name)) = self.fault {
            return Err(DiffError::NonFinite { index, name });
        }
        if !self.value(objective).is_scalar() {
            return Err(DiffError::NonScalarObjective {
                shape: self.shape(objective).to_vec(),
            });
        }
        let mut grads: Vec<Vec<f64>> =
            self.nodes.iter().map(|n| vec![0.0; n.values.len()]).collect();
        grads[objective.id()][0] = 1.0;

        for id in (0..=objective.id()).rev() {
            let g = std::mem::take(&mut grads[id]);
            if g.iter().all(|&v| v == 0.0) {
                grads[id] = g;
                continue;
            }
            // Split borrows: the node list is read-only here.
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Neg(x) => {
                    for (dst, &gi) in grads[x.id()].iter_mut().zip(&g) {
                        *dst -= gi;
                    }
                }
                Op::Exp(x) => {
                    let out = self.nodes[id].values.data();
                    let xg = &mut grads[x.id()];
                    for i in 0..g.len() {
                        xg[i] += g[i] * out[i];
                    }
                }
                Op::Tanh(x) => {
                    let out = self.nodes[id].values.data();
                    let xg = &mut grads[x.id()];
                    for i in 0..g.len() {
                        xg[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                }
                Op::Relu(x) => {
                    let xin = self.nodes[x.id()].values.data();
                    let xg = &mut grads[x.id()];
                    for i in 0..g.len() {
                        if xin[i] > 0.0 {
                            xg[i] += g[i];
                        }
                    }
                }
                Op::Abs(x) => {
                    let xin = self.nodes[x.id()].values.data();
                    let xg = &mut grads[x.id()];
                    for i in 0..g.len() {
                        xg[i] += g[i] * if xin[i] > 0.0 { 1.0 } else if xin[i] < 0.0 { -1.0 } else { 0.0 };
                    }
                }
                Op::Square(x) => {
                    let xin = self.nodes[x.id()].values.data();
                    let xg = &mut grads[x.id()];
                    for i in 0..g.len() {
                        xg[i] += g[i] * 2.0 * xin[i];
                    }
                }
                Op::LnEps { x, eps } => {
                    let eps = *eps;
                    let xin = self.nodes[x.id()].values.data();
                    let xg = &mut grads[x.id()];
                    for i in 0..g.len() {
                        if xin[i] > eps {
                            xg[i] += g[i] / xin[i];
                        }
                    }
                }
                Op::Powf { x, p } => {
                    let p = *p;
                    let xin = self.nodes[x.id()].values.data();
                    let xg = &mut grads[x.id()];
                    for i in 0..g.len() {
                        if xin[i] > 0.0 {
                            xg[i] += g[i] * p * xin[i].powf(p - 1.0);
                        }
                    }
                }
                Op::Recip(x) => {
                    let xin = self.nodes[x.id()].values.data();
                    let xg = &mut grads[x.id()];
                    for i in 0..g.len() {
                        xg[i] -= g[i] / (xin[i] * xin[i]);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let xin = self.nodes[x.id()].values.data();
                    let xg = &mut grads[x.id()];
                    for i in 0..g.len() {
                        if xin[i] > lo && xin[i] < hi {
                            xg[i] += g[i];
                        }
                    }
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    let xg = &mut grads[x.id()];
                    for i in 0..g.len() {
                        xg[i] += g[i] * c;
                    }
                }
                Op::AddScalar { x, .. } => {
                    let xg = &mut grads[x.id()];
                    for i in 0..g.len() {
                        xg[i] += g[i];
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    for i in 0..g.len() {
                        grads[a.id()][i] += g[i];
                    }
                    for i in 0..g.len() {
                        grads[b.id()][i] += g[i];
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    for i in 0..g.len() {
                        grads[a.id()][i] += g[i];
                    }
                    for i in 0..g.len() {
                        grads[b.id()][i] -= g[i];
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    {
                        let bv = self.nodes[b.id()].values.data();
                        let ag = &mut grads[a.id()];
                        for i in 0..g.len() {
                            ag[i] += g[i] * bv[i];
                        }
                    }
                    {
                        let av = self.nodes[a.id()].values.data();
                        let bg = &mut grads[b.id()];
                        for i in 0..g.len() {
                            bg[i] += g[i] * av[i];
                        }
                    }
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    {
                        let bv = self.nodes[b.id()].values.data();
                        let ag = &mut grads[a.id()];
                        for i in 0..g.len() {
                            ag[i] += g[i] / bv[i];
                        }
                    }
                    {
                        let av = self.nodes[a.id()].values.data();
                        let bv = self.nodes[b.id()].values.data();
                        let bg = &mut grads[b.id()];
                        for i in 0..g.len() {
                            bg[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                        }
                    }
                }
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let m = self.nodes[a.id()].values.rows();
                    let k = self.nodes[a.id()].values.cols();
                    let n = self.nodes[b.id()].values.cols();
                    // dA += g @ B^T
                    {
                        let bv = self.nodes[b.id()].values.data();
                        let ga = &mut grads[a.id()];
                        unsafe {
                            matrixmultiply::dgemm(
                                m,
                                n,
                                k,
                                1.0,
                                g.as_ptr(),
                                n as isize,
                                1,
                                bv.as_ptr(),
                                1,
                                n as isize,
                                1.0,
                                ga.as_mut_ptr(),
                                k as isize,
                                1,
                            );
                        }
                    }
                    // dB += A^T @ g
                    {
                        let av = self.nodes[a.id()].values.data();
                        let gb = &mut grads[b.id()];
                        unsafe {
                            matrixmultiply::dgemm(
                                k,
                                m,
                                n,
                                1.0,
                                av.as_ptr(),
                                1,
                                k as isize,
                                g.as_ptr(),
                                n as isize,
                                1,
                                1.0,
                                gb.as_mut_ptr(),
                                n as isize,
                                1,
                            );
                        }
                    }
                }
                Op::Transpose(x) => {
                    let x = *x;
                    let (r, c) = {
                        let t = &self.nodes[id].values;
                        (t.rows(), t.cols())
                    };
                    let xg = &mut grads[x.id()];
                    for i in 0..r {
                        for j in 0..c {
                            xg[j * r + i] += g[i * c + j];
                        }
                    }
                }
                Op::AddRowBroadcast { m, v } => {
                    let (m, v) = (*m, *v);
                    let c = self.nodes[v.id()].values.len();
                    for i in 0..g.len() {
                        grads[m.id()][i] += g[i];
                    }
                    let vg = &mut grads[v.id()];
                    for (i, &gi) in g.iter().enumerate() {
                        vg[i % c] += gi;
                    }
                }
                Op::MulRowBroadcast { m, v } => {
                    let (m, v) = (*m, *v);
                    let c = self.nodes[v.id()].values.len();
                    let mv: Vec<f64> = self.nodes[m.id()].values.data().to_vec();
                    let vv: Vec<f64> = self.nodes[v.id()].values.data().to_vec();
                    for i in 0..g.len() {
                        grads[m.id()][i] += g[i] * vv[i % c];
                    }
                    let vg = &mut grads[v.id()];
                    for (i, &gi) in g.iter().enumerate() {
                        vg[i % c] += gi * mv[i];
                    }
                }
                Op::Sum(x) => {
                    let g0 = g[0];
                    for dst in grads[x.id()].iter_mut() {
                        *dst += g0;
                    }
                }
                Op::Mean(x) => {
                    let n = self.nodes[x.id()].values.len() as f64;
                    let g0 = g[0] / n;
                    for dst in grads[x.id()].iter_mut() {
                        *dst += g0;
                    }
                }
                Op::LogSumExp(x) => {
                    let x = *x;
                    let out = self.nodes[id].values.item();
                    let xin = self.nodes[x.id()].values.data();
                    let g0 = g[0];
                    let xg = &mut grads[x.id()];
                    for i in 0..xg.len() {
                        xg[i] += g0 * (xin[i] - out).exp();
                    }
                }
                Op::SoftmaxRows(x) => {
                    let x = *x;
                    let (r, c) = {
                        let t = &self.nodes[id].values;
                        (t.rows(), t.cols())
                    };
                    let s = self.nodes[id].values.data();
                    let xg = &mut grads[x.id()];
                    for i in 0..r {
                        let row = &s[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let dot: f64 = row.iter().zip(grow).map(|(&si, &gi)| si * gi).sum();
                        for j in 0..c {
                            xg[i * c + j] += row[j] * (grow[j] - dot);
                        }
                    }
                }
                Op::LayerNormRows { x, eps } => {
                    let (x, eps) = (*x, *eps);
                    let (r, c) = {
                        let t = &self.nodes[id].values;
                        (t.rows(), t.cols())
                    };
                    let xin = self.nodes[x.id()].values.data();
                    let xhat = self.nodes[id].values.data();
                    let xg = &mut grads[x.id()];
                    for i in 0..r {
                        let row = &xin[i * c..(i + 1) * c];
                        let mu = row.iter().sum::<f64>() / c as f64;
                        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let hrow = &xhat[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let mg: f64 = grow.iter().sum::<f64>() / c as f64;
                        let mgh: f64 =
                            grow.iter().zip(hrow).map(|(&gi, &hi)| gi * hi).sum::<f64>() / c as f64;
                        for j in 0..c {
                            xg[i * c + j] += inv * (grow[j] - mg - hrow[j] * mgh);
                        }
                    }
                }
                Op::Gather { x, idx } => {
                    let x = *x;
                    let idx = idx.clone();
                    let xg = &mut grads[x.id()];
                    for (k, &i) in idx.iter().enumerate() {
                        xg[i] += g[k];
                    }
                }
                Op::GatherRows { x, rows } => {
                    let x = *x;
                    let rows = rows.clone();
                    let c = self.nodes[x.id()].values.cols();
                    let xg = &mut grads[x.id()];
                    for (k, &i) in rows.iter().enumerate() {
                        for j in 0..c {
                            xg[i * c + j] += g[k * c + j];
                        }
                    }
                }
                Op::Slice { x, offset, .. } => {
                    let (x, offset) = (*x, *offset);
                    let xg = &mut grads[x.id()];
                    for (k, &gi) in g.iter().enumerate() {
                        xg[offset + k] += gi;
                    }
                }
                Op::SliceCols { x, c0, c1 } => {
                    let (x, c0, c1) = (*x, *c0, *c1);
                    let c = self.nodes[x.id()].values.cols();
                    let w = c1 - c0;
                    let xg = &mut grads[x.id()];
                    for k in 0..g.len() {
                        let (i, j) = (k / w, k % w);
                        xg[i * c + c0 + j] += g[k];
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let r = self.nodes[id].values.rows();
                    let total = self.nodes[id].values.cols();
                    let mut offset = 0;
                    for &p in &parts {
                        let c = self.nodes[p.id()].values.cols();
                        let pg = &mut grads[p.id()];
                        for i in 0..r {
                            for j in 0..c {
                                pg[i * c + j] += g[i * total + offset + j];
                            }
                        }
                        offset += c;
                    }
                }
                Op::Concat { parts } => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for &p in &parts {
                        let n = self.nodes[p.id()].values.len();
                        let pg = &mut grads[p.id()];
                        for k in 0..n {
                            pg[k] += g[offset + k];
                        }
                        offset += n;
                    }
                }
                Op::Reshape(x) => {
                    let x = *x;
                    let xg = &mut grads[x.id()];
                    for i in 0..g.len() {
                        xg[i] += g[i];
                    }
                }
            }
            grads[id] = g;
        }

        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.values.shape().to_vec()).collect() })
    }
}

/// Result of a reverse sweep: d(objective)/d(node) for every node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Tensor {
        Tensor::new(self.shapes[v.id()].clone(), self.grads[v.id()].clone())
    }

    pub fn raw(&self, v: Var) -> &[f64] {
        &self.grads[v.id()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative_at_three() {
        // f(x) = x * x at x = 3 -> df/dx = 6
        let mut tape = Tape::new();
        let x = tape.scalar(3.0);
        let y = tape.mul(x, x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).item(), 6.0);
    }

    #[test]
    fn constant_objective_has_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let c = tape.scalar(7.0);
        let _ = tape.sum(x);
        let g = tape.backward(c).unwrap();
        assert!(g.raw(x).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_objective_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(DiffError::NonScalarObjective { .. })));
    }

    #[test]
    fn non_finite_fault_identifies_op() {
        let mut tape = Tape::new();
        let x = tape.scalar(1000.0);
        let e = tape.exp(x); // overflows to +inf
        let s = tape.sum(e);
        match tape.backward(s) {
            Err(DiffError::NonFinite { name, .. }) => assert_eq!(name, "exp"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn matmul_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.leaf(Tensor::matrix(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn determinism_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector((0..16).map(|i| (i as f64).sin()).collect()));
            let m = tape.reshape(x, &[4, 4]);
            let s = tape.softmax_rows(m);
            let l = tape.logsumexp(s);
            let g = tape.backward(l).unwrap();
            (tape.value(l).item(), g.raw(x).to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
