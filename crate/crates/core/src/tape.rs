//! Reverse-mode gradient tape over the closed op set the pipeline needs.
//!
//! Values are computed eagerly as nodes are recorded, so forward code can
//! inspect intermediate results (the skip loss uses this to mask
//! zero-variance rows). `backward` walks the recorded nodes once in reverse,
//! accumulating gradients additively; subtrees that cannot reach a parameter
//! are skipped.

use crate::error::{CoreError, Result};
use crate::tensor::{gemm_nn, gemm_nn_acc, gemm_nt, gemm_tn, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// y = x·wᵀ + b with x[m,k], w[n,k], b[n]
    Linear { x: Var, w: Var, b: Var },
    /// y = a·b
    MatMul { a: Var, b: Var },
    /// y = a·bᵀ with a[m,k], b[n,k]
    MatMulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    AddScalar { a: Var },
    MulScalar { a: Var, c: f64 },
    Neg { a: Var },
    /// broadcast a[m,n] + v[n]
    AddRow { a: Var, v: Var },
    /// broadcast a[m,n] op v[m]
    SubCol { a: Var, v: Var },
    MulCol { a: Var, v: Var },
    DivCol { a: Var, v: Var },
    Relu { a: Var },
    Gelu { a: Var },
    Tanh { a: Var },
    Abs { a: Var },
    Sqrt { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    SumCols { a: Var },
    MeanCols { a: Var },
    /// mean over the token axis: [m, t*d] -> [m, d]
    MeanTokens { a: Var, t: usize, d: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    LogSoftmaxRows { x: Var },
    Transpose { a: Var },
    Reshape { a: Var },
}

struct Node {
    op: Op,
    value: std::sync::Arc<Tensor>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: std::sync::Arc::new(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Record a constant leaf (no gradient flows into it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Record a constant leaf without copying the backing data (frozen
    /// weights are bound once per step across many steps).
    pub fn constant_shared(&mut self, t: std::sync::Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        let (m, k) = (self.value(x).rows(), self.value(x).cols());
        let (n, wk) = (ws[0], ws[1]);
        assert_eq!(k, wk, "linear: x {xs:?} vs w {ws:?}");
        assert_eq!(bs, vec![n], "linear: bias {bs:?} vs out dim {n}");
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, self.value(x).data(), self.value(w).data(), &mut out, false);
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(self.value(b).data()) {
                *o += bv;
            }
        }
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        let val = Tensor::new(vec![m, n], out).unwrap();
        self.push(Op::Linear { x, w, b }, val, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (k2, n) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let needs = self.ng(a) || self.ng(b);
        let val = Tensor::new(vec![m, n], out).unwrap();
        self.push(Op::MatMul { a, b }, val, needs)
    }

    /// a[m,k] · b[n,k]ᵀ -> [m,n]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (n, k2) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        let needs = self.ng(a) || self.ng(b);
        let val = Tensor::new(vec![m, n], out).unwrap();
        self.push(Op::MatMulNT { a, b }, val, needs)
    }

    fn zip_ew(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "elementwise shape mismatch"
        );
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let needs = self.ng(a) || self.ng(b);
        let val = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(op, val, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_ew(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_ew(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_ew(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip_ew(a, b, |x, y| x / y, Op::Div { a, b })
    }

    fn map_ew(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| f(*x)).collect();
        let needs = self.ng(a);
        let val = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(op, val, needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map_ew(a, |x| x + c, Op::AddScalar { a })
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map_ew(a, |x| x * c, Op::MulScalar { a, c })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.map_ew(a, |x| -x, Op::Neg { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_ew(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map_ew(a, gelu, Op::Gelu { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_ew(a, f64::tanh, Op::Tanh { a })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map_ew(a, f64::abs, Op::Abs { a })
    }

    /// Callers add an epsilon first; non-positive inputs produce NaN that the
    /// loss-level finite checks surface.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map_ew(a, f64::sqrt, Op::Sqrt { a })
    }

    pub fn add_row(&mut self, a: Var, v: Var) -> Var {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        assert_eq!(self.value(v).len(), n, "add_row width");
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, b) in data[i * n..(i + 1) * n].iter_mut().zip(self.value(v).data()) {
                *x += b;
            }
        }
        let needs = self.ng(a) || self.ng(v);
        let val = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(Op::AddRow { a, v }, val, needs)
    }

    fn col_op(&mut self, a: Var, v: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        assert_eq!(self.value(v).len(), m, "column broadcast length");
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let c = self.value(v).data()[i];
            data.extend(self.value(a).row(i).iter().map(|&x| f(x, c)));
        }
        let needs = self.ng(a) || self.ng(v);
        let val = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(op, val, needs)
    }

    pub fn sub_col(&mut self, a: Var, v: Var) -> Var {
        self.col_op(a, v, |x, c| x - c, Op::SubCol { a, v })
    }

    pub fn mul_col(&mut self, a: Var, v: Var) -> Var {
        self.col_op(a, v, |x, c| x * c, Op::MulCol { a, v })
    }

    pub fn div_col(&mut self, a: Var, v: Var) -> Var {
        self.col_op(a, v, |x, c| x / c, Op::DivCol { a, v })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let needs = self.ng(a);
        self.push(Op::SumAll { a }, Tensor::scalar(s), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum::<f64>() / n;
        let needs = self.ng(a);
        self.push(Op::MeanAll { a }, Tensor::scalar(s), needs)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (m, _n) = (self.value(a).rows(), self.value(a).cols());
        let data: Vec<f64> = (0..m).map(|i| self.value(a).row(i).iter().sum()).collect();
        let needs = self.ng(a);
        self.push(Op::SumCols { a }, Tensor::new(vec![m], data).unwrap(), needs)
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        let data: Vec<f64> = (0..m)
            .map(|i| self.value(a).row(i).iter().sum::<f64>() / n as f64)
            .collect();
        let needs = self.ng(a);
        self.push(Op::MeanCols { a }, Tensor::new(vec![m], data).unwrap(), needs)
    }

    pub fn mean_tokens(&mut self, a: Var, t: usize, d: usize) -> Var {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        assert_eq!(n, t * d, "mean_tokens: {n} != {t}*{d}");
        let mut data = vec![0.0; m * d];
        for i in 0..m {
            let row = self.value(a).row(i);
            let out = &mut data[i * d..(i + 1) * d];
            for tok in 0..t {
                for j in 0..d {
                    out[j] += row[tok * d + j];
                }
            }
            for o in out.iter_mut() {
                *o /= t as f64;
            }
        }
        let needs = self.ng(a);
        self.push(
            Op::MeanTokens { a, t, d },
            Tensor::new(vec![m, d], data).unwrap(),
            needs,
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, n) = (self.value(x).rows(), self.value(x).cols());
        assert_eq!(self.value(gamma).len(), n, "layer_norm gamma");
        assert_eq!(self.value(beta).len(), n, "layer_norm beta");
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = self.value(x).row(i);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let out = &mut data[i * n..(i + 1) * n];
            for j in 0..n {
                out[j] = (row[j] - mu) * inv * self.value(gamma).data()[j]
                    + self.value(beta).data()[j];
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let val = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.push(Op::LayerNorm { x, gamma, beta, eps }, val, needs)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = (self.value(x).rows(), self.value(x).cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = self.value(x).row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..n {
                data[i * n + j] = row[j] - lse;
            }
        }
        let needs = self.ng(x);
        let val = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.push(Op::LogSoftmaxRows { x }, val, needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.value(a).data()[i * n + j];
            }
        }
        let needs = self.ng(a);
        self.push(Op::Transpose { a }, Tensor::new(vec![n, m], data).unwrap(), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.value(a).len(), "reshape element count");
        let needs = self.ng(a);
        let val = Tensor::new(shape, self.value(a).data().to_vec()).unwrap();
        self.push(Op::Reshape { a }, val, needs)
    }

    /// L2-normalize each row (composite op; epsilon keeps sqrt differentiable).
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let sq = self.mul(a, a);
        let ss = self.sum_cols(sq);
        let ss_eps = self.add_scalar(ss, eps);
        let norms = self.sqrt(ss_eps);
        self.div_col(a, norms)
    }

    /// Backward pass from a scalar output. Returns a gradient per node,
    /// `None` where no gradient flows.
    pub fn backward(&mut self, out: Var) -> Result<Gradients> {
        let out_node = &self.nodes[out.0];
        if out_node.value.len() != 1 {
            return Err(CoreError::arg(format!(
                "backward expects a scalar output, got shape {:?}",
                out_node.value.shape()
            )));
        }
        if !out_node.value.data()[0].is_finite() {
            return Err(CoreError::NonFinite("loss value".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);

        for idx in (0..=out.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            let op = self.nodes[idx].op.clone();
            self.backprop_node(idx, &g, &op, &mut grads);
            if matches!(op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn alloc<'a>(
        grads: &'a mut Vec<Option<Vec<f64>>>,
        node: usize,
        len: usize,
    ) -> &'a mut Vec<f64> {
        grads[node].get_or_insert_with(|| vec![0.0; len])
    }

    fn backprop_node(&self, idx: usize, g: &[f64], op: &Op, grads: &mut Vec<Option<Vec<f64>>>) {
        match *op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (m, k) = (self.value(x).rows(), self.value(x).cols());
                let n = self.value(w).rows();
                if self.ng(x) {
                    let gx = Self::alloc(grads, x.0, m * k);
                    gemm_nn_acc(m, n, k, g, self.value(w).data(), gx);
                }
                if self.ng(w) {
                    let gw = Self::alloc(grads, w.0, n * k);
                    gemm_tn(n, m, k, g, self.value(x).data(), gw, true);
                }
                if self.ng(b) {
                    let gb = Self::alloc(grads, b.0, n);
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                if self.ng(a) {
                    let ga = Self::alloc(grads, a.0, m * k);
                    gemm_nt(m, n, k, g, self.value(b).data(), ga, true);
                }
                if self.ng(b) {
                    let gb = Self::alloc(grads, b.0, k * n);
                    gemm_tn(k, m, n, self.value(a).data(), g, gb, true);
                }
            }
            Op::MatMulNT { a, b } => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).rows();
                if self.ng(a) {
                    let ga = Self::alloc(grads, a.0, m * k);
                    gemm_nn_acc(m, n, k, g, self.value(b).data(), ga);
                }
                if self.ng(b) {
                    let gb = Self::alloc(grads, b.0, n * k);
                    gemm_tn(n, m, k, g, self.value(a).data(), gb, true);
                }
            }
            Op::Add { a, b } => {
                for (v, _other) in [(a, b), (b, a)] {
                    if self.ng(v) {
                        let gv = Self::alloc(grads, v.0, g.len());
                        for (o, x) in gv.iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.ng(a) {
                    let ga = Self::alloc(grads, a.0, g.len());
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if self.ng(b) {
                    let gb = Self::alloc(grads, b.0, g.len());
                    for (o, x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.ng(a) {
                    let ga = Self::alloc(grads, a.0, g.len());
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(self.value(b).data()) {
                        *o += x * y;
                    }
                }
                if self.ng(b) {
                    let gb = Self::alloc(grads, b.0, g.len());
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(self.value(a).data()) {
                        *o += x * y;
                    }
                }
            }
            Op::Div { a, b } => {
                if self.ng(a) {
                    let ga = Self::alloc(grads, a.0, g.len());
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(self.value(b).data()) {
                        *o += x / y;
                    }
                }
                if self.ng(b) {
                    let gb = Self::alloc(grads, b.0, g.len());
                    for i in 0..g.len() {
                        let bv = self.value(b).data()[i];
                        gb[i] -= g[i] * self.value(a).data()[i] / (bv * bv);
                    }
                }
            }
            Op::AddScalar { a } => {
                if self.ng(a) {
                    let ga = Self::alloc(grads, a.0, g.len());
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
            Op::MulScalar { a, c } => {
                if self.ng(a) {
                    let ga = Self::alloc(grads, a.0, g.len());
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += c * x;
                    }
                }
            }
            Op::Neg { a } => {
                if self.ng(a) {
                    let ga = Self::alloc(grads, a.0, g.len());
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::AddRow { a, v } => {
                let (m, n) = (self.value(a).rows(), self.value(a).cols());
                if self.ng(a) {
                    let ga = Self::alloc(grads, a.0, g.len());
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if self.ng(v) {
                    let gv = Self::alloc(grads, v.0, n);
                    for i in 0..m {
                        for j in 0..n {
                            gv[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::SubCol { a, v } => {
                let (m, n) = (self.value(a).rows(), self.value(a).cols());
                if self.ng(a) {
                    let ga = Self::alloc(grads, a.0, g.len());
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if self.ng(v) {
                    let gv = Self::alloc(grads, v.0, m);
                    for i in 0..m {
                        gv[i] -= g[i * n..(i + 1) * n].iter().sum::<f64>();
                    }
                }
            }
            Op::MulCol { a, v } => {
                let (m, n) = (self.value(a).rows(), self.value(a).cols());
                if self.ng(a) {
                    let ga = Self::alloc(grads, a.0, g.len());
                    for i in 0..m {
                        let c = self.value(v).data()[i];
                        for j in 0..n {
                            ga[i * n + j] += g[i * n + j] * c;
                        }
                    }
                }
                if self.ng(v) {
                    let gv = Self::alloc(grads, v.0, m);
                    for i in 0..m {
                        gv[i] += g[i * n..(i + 1) * n]
                            .iter()
                            .zip(self.value(a).row(i))
                            .map(|(x, y)| x * y)
                            .sum::<f64>();
                    }
                }
            }
            Op::DivCol { a, v } => {
                let (m, n) = (self.value(a).rows(), self.value(a).cols());
                if self.ng(a) {
                    let ga = Self::alloc(grads, a.0, g.len());
                    for i in 0..m {
                        let c = self.value(v).data()[i];
                        for j in 0..n {
                            ga[i * n + j] += g[i * n + j] / c;
                        }
                    }
                }
                if self.ng(v) {
                    let gv = Self::alloc(grads, v.0, m);
                    for i in 0..m {
                        let c = self.value(v).data()[i];
                        gv[i] -= g[i * n..(i + 1) * n]
                            .iter()
                            .zip(self.value(a).row(i))
                            .map(|(x, y)| x * y)
                            .sum::<f64>()
                            / (c * c);
                    }
                }
            }
            Op::Relu { a } => {
                if self.ng(a) {
                    let ga = Self::alloc(grads, a.0, g.len());
                    for (i, (o, x)) in ga.iter_mut().zip(g).enumerate() {
                        if self.value(a).data()[i] > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if self.ng(a) {
                    let ga = Self::alloc(grads, a.0, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(self.value(a).data()[i]);
                    }
                }
            }
            Op::Tanh { a } => {
                if self.ng(a) {
                    let ga = Self::alloc(grads, a.0, g.len());
                    for i in 0..g.len() {
                        let y = self.nodes[idx].value.data()[i];
                        ga[i] += g[i] * (1.0 - y * y);
                    }
                }
            }
            Op::Abs { a } => {
                if self.ng(a) {
                    let ga = Self::alloc(grads, a.0, g.len());
                    for i in 0..g.len() {
                        let x = self.value(a).data()[i];
                        // subgradient 0 at the kink
                        ga[i] += g[i] * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
            Op::Sqrt { a } => {
                if self.ng(a) {
                    let ga = Self::alloc(grads, a.0, g.len());
                    for i in 0..g.len() {
                        let y = self.nodes[idx].value.data()[i];
                        ga[i] += g[i] * 0.5 / y;
                    }
                }
            }
            Op::SumAll { a } => {
                if self.ng(a) {
                    let n = self.value(a).len();
                    let ga = Self::alloc(grads, a.0, n);
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::MeanAll { a } => {
                if self.ng(a) {
                    let n = self.value(a).len();
                    let ga = Self::alloc(grads, a.0, n);
                    let gv = g[0] / n as f64;
                    for o in ga.iter_mut() {
                        *o += gv;
                    }
                }
            }
            Op::SumCols { a } => {
                if self.ng(a) {
                    let (m, n) = (self.value(a).rows(), self.value(a).cols());
                    let ga = Self::alloc(grads, a.0, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[i];
                        }
                    }
                }
            }
            Op::MeanCols { a } => {
                if self.ng(a) {
                    let (m, n) = (self.value(a).rows(), self.value(a).cols());
                    let ga = Self::alloc(grads, a.0, m * n);
                    for i in 0..m {
                        let gv = g[i] / n as f64;
                        for j in 0..n {
                            ga[i * n + j] += gv;
                        }
                    }
                }
            }
            Op::MeanTokens { a, t, d } => {
                if self.ng(a) {
                    let m = self.value(a).rows();
                    let ga = Self::alloc(grads, a.0, m * t * d);
                    for i in 0..m {
                        for tok in 0..t {
                            for j in 0..d {
                                ga[i * t * d + tok * d + j] += g[i * d + j] / t as f64;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (m, n) = (self.value(x).rows(), self.value(x).cols());
                let gamma_d = self.value(gamma).data();
                for i in 0..m {
                    let row = self.value(x).row(i);
                    let mu = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let grow = &g[i * n..(i + 1) * n];
                    if self.ng(gamma) || self.ng(beta) {
                        for j in 0..n {
                            let xhat = (row[j] - mu) * inv;
                            if self.ng(gamma) {
                                Self::alloc(grads, gamma.0, n)[j] += grow[j] * xhat;
                            }
                            if self.ng(beta) {
                                Self::alloc(grads, beta.0, n)[j] += grow[j];
                            }
                        }
                    }
                    if self.ng(x) {
                        let mut sum_gy = 0.0;
                        let mut sum_gy_xhat = 0.0;
                        for j in 0..n {
                            let gy = grow[j] * gamma_d[j];
                            let xhat = (row[j] - mu) * inv;
                            sum_gy += gy;
                            sum_gy_xhat += gy * xhat;
                        }
                        let gx = Self::alloc(grads, x.0, m * n);
                        for j in 0..n {
                            let gy = grow[j] * gamma_d[j];
                            let xhat = (row[j] - mu) * inv;
                            gx[i * n + j] += inv
                                * (gy - sum_gy / n as f64 - xhat * sum_gy_xhat / n as f64);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows { x } => {
                if self.ng(x) {
                    let (m, n) = (self.value(x).rows(), self.value(x).cols());
                    let gx = Self::alloc(grads, x.0, m * n);
                    let y = self.nodes[idx].value.data();
                    for i in 0..m {
                        let gsum: f64 = g[i * n..(i + 1) * n].iter().sum();
                        for j in 0..n {
                            let p = y[i * n + j].exp();
                            gx[i * n + j] += g[i * n + j] - p * gsum;
                        }
                    }
                }
            }
            Op::Transpose { a } => {
                if self.ng(a) {
                    let (m, n) = (self.value(a).rows(), self.value(a).cols());
                    let ga = Self::alloc(grads, a.0, m * n);
                    // output was [n,m]; g is in output layout
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if self.ng(a) {
                    let ga = Self::alloc(grads, a.0, g.len());
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
        }
    }
}

/// Gradients produced by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a leaf, as a tensor shaped like `shape`.
    pub fn get(&self, v: Var, shape: &[usize]) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.to_vec(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape.to_vec()),
        }
    }

    pub fn get_raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}
