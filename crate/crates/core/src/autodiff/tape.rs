//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records each operation of a forward pass; [`Tape::backward`]
//! replays the record in reverse, accumulating gradients by the chain rule.
//! Nodes hold dense `f64` matrices, so a whole mini-batch flows through a
//! handful of GEMMs instead of thousands of scalar ops.
//!
//! Parameters enter the graph as leaves tagged with a caller-chosen id;
//! everything that never reaches the seeded output keeps an exactly-zero
//! gradient.

use super::matrix::{gemm_acc, matmul, Matrix, Trans};
use crate::error::CqnpError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Input node (constant or registered parameter).
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    /// Broadcast-add a (1, c) row vector to every row of x.
    AddRow { x: NodeId, v: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Neg { x: NodeId },
    AddConst { x: NodeId },
    MulConst { x: NodeId, c: f64 },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Softplus { x: NodeId },
    Exp { x: NodeId },
    Ln { x: NodeId },
    /// Elementwise max; ties route the gradient to `a`.
    MaxPair { a: NodeId, b: NodeId },
    /// Identity inside [lo, hi], gradient zero outside.
    Clamp { x: NodeId, lo: f64, hi: f64 },
    ConcatCols { a: NodeId, b: NodeId },
    /// Each row of x repeated `k` times consecutively.
    RepeatRows { x: NodeId, k: usize },
    /// Column mean over rows: (n, c) -> (1, c).
    MeanRows { x: NodeId },
    /// Column mean over consecutive groups of `k` rows: (n*k, c) -> (n, c).
    GroupMeanRows { x: NodeId, k: usize },
    /// Log-sum-exp over consecutive groups of `k` rows of a column vector.
    GroupLogSumExp { x: NodeId, k: usize },
    /// Asymmetric Laplace log-density of observation column `y` (treated
    /// as constants), fused over the location / raw-scale / level columns.
    /// The scale is softplus(sraw) + sigma_floor; gradients flow to `tau`
    /// only when `tau_grad` is set (levels are constants in the
    /// non-adaptive model).
    AlLogPdf {
        y: NodeId,
        mu: NodeId,
        sraw: NodeId,
        tau: NodeId,
        tau_grad: bool,
        sigma_floor: f64,
    },
    SliceRows { x: NodeId, r0: usize },
    SliceCols { x: NodeId, c0: usize },
    /// Sum of all entries: (n, c) -> (1, 1).
    Sum { x: NodeId },
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Gradients produced by [`Tape::backward`], queryable per node or per
/// parameter id.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    by_param: Vec<(usize, NodeId)>,
}

impl Gradients {
    /// Gradient of the seeded output w.r.t. `node`. Zero matrices are
    /// materialized on demand for nodes off the path.
    pub fn get(&self, node: NodeId, shape: (usize, usize)) -> Matrix {
        match &self.grads[node.0] {
            Some(g) => g.clone(),
            None => Matrix::zeros(shape.0, shape.1),
        }
    }

    /// Visit `(param_id, gradient)` for every registered parameter leaf.
    /// Parameters never touched by the forward pass yield `None`.
    pub fn for_each_param(&self, mut f: impl FnMut(usize, Option<&Matrix>)) {
        for &(pid, node) in &self.by_param {
            f(pid, self.grads[node.0].as_ref());
        }
    }
}

/// The recorded forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(usize, NodeId)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let m = self.value(id);
        assert_eq!(m.shape(), (1, 1), "node is not a scalar");
        m.data()[0]
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// A constant leaf: no gradient is reported for it.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// A parameter leaf whose gradient is retrievable under `param_id`.
    pub fn param(&mut self, param_id: usize, value: Matrix) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.params.push((param_id, id));
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(Op::MatMul { a, b }, v)
    }

    pub fn add_row(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let xm = self.value(x);
        let vm = self.value(v);
        assert_eq!(vm.rows(), 1, "bias must be a row vector");
        assert_eq!(vm.cols(), xm.cols(), "bias width mismatch");
        let mut out = xm.clone();
        let vr = vm.data();
        for row in out.data_mut().chunks_mut(vr.len()) {
            for (o, b) in row.iter_mut().zip(vr) {
                *o += b;
            }
        }
        self.push(Op::AddRow { x, v }, out)
    }

    fn zip(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let am = self.value(a);
        let bm = self.value(b);
        assert_eq!(am.shape(), bm.shape(), "elementwise shape mismatch");
        let data = am
            .iter()
            .zip(bm.iter())
            .map(|(&x, &y)| f(x, y))
            .collect::<Vec<_>>();
        let v = Matrix::from_vec(am.rows(), am.cols(), data);
        self.push(op, v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, Op::Div { a, b }, |x, y| x / y)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|t| -t);
        self.push(Op::Neg { x }, v)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|t| t + c);
        self.push(Op::AddConst { x }, v)
    }

    pub fn mul_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|t| t * c);
        self.push(Op::MulConst { x, c }, v)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|t| t.max(0.0));
        self.push(Op::Relu { x }, v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid { x }, v)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(softplus);
        self.push(Op::Softplus { x }, v)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::exp);
        self.push(Op::Exp { x }, v)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::ln);
        self.push(Op::Ln { x }, v)
    }

    pub fn max_pair(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, Op::MaxPair { a, b }, f64::max)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(x).map(|t| t.clamp(lo, hi));
        self.push(Op::Clamp { x, lo, hi }, v)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let am = self.value(a);
        let bm = self.value(b);
        assert_eq!(am.rows(), bm.rows(), "concat row mismatch");
        let (n, ca, cb) = (am.rows(), am.cols(), bm.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            data.extend_from_slice(am.row_slice(r));
            data.extend_from_slice(bm.row_slice(r));
        }
        let v = Matrix::from_vec(n, ca + cb, data);
        self.push(Op::ConcatCols { a, b }, v)
    }

    pub fn repeat_rows(&mut self, x: NodeId, k: usize) -> NodeId {
        let xm = self.value(x);
        let (n, c) = xm.shape();
        let mut data = Vec::with_capacity(n * k * c);
        for r in 0..n {
            let row = xm.row_slice(r);
            for _ in 0..k {
                data.extend_from_slice(row);
            }
        }
        let v = Matrix::from_vec(n * k, c, data);
        self.push(Op::RepeatRows { x, k }, v)
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xm = self.value(x);
        let (n, c) = xm.shape();
        assert!(n > 0, "mean over zero rows");
        let mut acc = vec![0.0; c];
        for r in 0..n {
            for (a, v) in acc.iter_mut().zip(xm.row_slice(r)) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= n as f64;
        }
        self.push(Op::MeanRows { x }, Matrix::row(&acc))
    }

    /// Mean over consecutive groups of `k` rows: (n*k, c) -> (n, c).
    pub fn group_mean_rows(&mut self, x: NodeId, k: usize) -> NodeId {
        let xm = self.value(x);
        let (rows, c) = xm.shape();
        assert!(k >= 1 && rows % k == 0, "group size must divide rows");
        let n = rows / k;
        let mut data = vec![0.0; n * c];
        for r in 0..rows {
            let dst = &mut data[(r / k) * c..(r / k + 1) * c];
            for (d, v) in dst.iter_mut().zip(xm.row_slice(r)) {
                *d += v;
            }
        }
        let scale = 1.0 / k as f64;
        for d in &mut data {
            *d *= scale;
        }
        self.push(Op::GroupMeanRows { x, k }, Matrix::from_vec(n, c, data))
    }

    /// Log-sum-exp over consecutive groups of `k` rows. Input must be a
    /// column vector with row count divisible by `k`.
    pub fn group_log_sum_exp(&mut self, x: NodeId, k: usize) -> NodeId {
        let xm = self.value(x);
        assert_eq!(xm.cols(), 1, "group LSE expects a column vector");
        assert!(k >= 1 && xm.rows() % k == 0, "group size must divide rows");
        let groups = xm.rows() / k;
        let mut out = Vec::with_capacity(groups);
        for g in 0..groups {
            out.push(log_sum_exp_slice(&xm.data()[g * k..(g + 1) * k]));
        }
        self.push(Op::GroupLogSumExp { x, k }, Matrix::column(&out))
    }

    /// Fused asymmetric Laplace log-density column:
    /// `ln(tau (1-tau) / sigma) - pinball_tau(y - mu) / sigma` with
    /// `sigma = softplus(sraw) + sigma_floor`. All inputs are (n, 1).
    pub fn al_log_pdf(
        &mut self,
        y: NodeId,
        mu: NodeId,
        sraw: NodeId,
        tau: NodeId,
        tau_grad: bool,
        sigma_floor: f64,
    ) -> NodeId {
        let n = self.value(y).rows();
        for id in [y, mu, sraw, tau] {
            assert_eq!(self.value(id).shape(), (n, 1), "AL pdf expects (n,1) columns");
        }
        let mut out = Vec::with_capacity(n);
        {
            let yv = self.value(y).data();
            let muv = self.value(mu).data();
            let sv = self.value(sraw).data();
            let tv = self.value(tau).data();
            for i in 0..n {
                let sigma = softplus(sv[i]) + sigma_floor;
                let r = yv[i] - muv[i];
                let rho = if r >= 0.0 { r * tv[i] } else { r * (tv[i] - 1.0) };
                out.push((tv[i] * (1.0 - tv[i]) / sigma).ln() - rho / sigma);
            }
        }
        self.push(
            Op::AlLogPdf {
                y,
                mu,
                sraw,
                tau,
                tau_grad,
                sigma_floor,
            },
            Matrix::column(&out),
        )
    }

    pub fn slice_rows(&mut self, x: NodeId, r0: usize, r1: usize) -> NodeId {
        let xm = self.value(x);
        assert!(r0 < r1 && r1 <= xm.rows(), "row slice out of range");
        let c = xm.cols();
        let data = xm.data()[r0 * c..r1 * c].to_vec();
        let v = Matrix::from_vec(r1 - r0, c, data);
        self.push(Op::SliceRows { x, r0 }, v)
    }

    pub fn slice_cols(&mut self, x: NodeId, c0: usize, c1: usize) -> NodeId {
        let xm = self.value(x);
        assert!(c0 < c1 && c1 <= xm.cols(), "column slice out of range");
        let (n, c) = xm.shape();
        let mut data = Vec::with_capacity(n * (c1 - c0));
        for r in 0..n {
            data.extend_from_slice(&xm.data()[r * c + c0..r * c + c1]);
        }
        let v = Matrix::from_vec(n, c1 - c0, data);
        self.push(Op::SliceCols { x, c0 }, v)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).iter().sum();
        self.push(Op::Sum { x }, Matrix::from_vec(1, 1, vec![s]))
    }

    /// Backpropagate from a scalar node, seeding its gradient with `seed`.
    ///
    /// Errors if `output` is not (1, 1).
    pub fn backward(&self, output: NodeId, seed: f64) -> Result<Gradients, CqnpError> {
        if self.value(output).shape() != (1, 1) {
            return Err(CqnpError::Usage(format!(
                "backward requires a scalar output node, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::from_vec(1, 1, vec![seed]));

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // Keep the gradient available for callers after propagating it.
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    // dA += G B^T ; dB += A^T G
                    let (am, bm) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    gemm_acc(self.grad_mut(&mut grads, a), &g, bm, Trans::NT);
                    gemm_acc(self.grad_mut(&mut grads, b), am, &g, Trans::TN);
                }
                Op::AddRow { x, v } => {
                    self.accumulate(&mut grads, x, g.data());
                    let cols = g.cols();
                    let gv = self.grad_mut(&mut grads, v);
                    for row in g.data().chunks(cols) {
                        for (dv, gr) in gv.data_mut().iter_mut().zip(row) {
                            *dv += gr;
                        }
                    }
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, a, g.data());
                    self.accumulate(&mut grads, b, g.data());
                }
                Op::Sub { a, b } => {
                    self.accumulate(&mut grads, a, g.data());
                    self.accumulate_scaled(&mut grads, b, g.data(), -1.0);
                }
                Op::Mul { a, b } => {
                    let bv: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[b.0].value.iter())
                        .map(|(&gi, &bi)| gi * bi)
                        .collect();
                    let av: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a.0].value.iter())
                        .map(|(&gi, &ai)| gi * ai)
                        .collect();
                    self.accumulate(&mut grads, a, &bv);
                    self.accumulate(&mut grads, b, &av);
                }
                Op::Div { a, b } => {
                    let bm = &self.nodes[b.0].value;
                    let am = &self.nodes[a.0].value;
                    let da: Vec<f64> = g
                        .iter()
                        .zip(bm.iter())
                        .map(|(&gi, &bi)| gi / bi)
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(am.iter().zip(bm.iter()))
                        .map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi))
                        .collect();
                    self.accumulate(&mut grads, a, &da);
                    self.accumulate(&mut grads, b, &db);
                }
                Op::Neg { x } => self.accumulate_scaled(&mut grads, x, g.data(), -1.0),
                Op::AddConst { x } => self.accumulate(&mut grads, x, g.data()),
                Op::MulConst { x, c } => self.accumulate_scaled(&mut grads, x, g.data(), c),
                Op::Relu { x } => {
                    // Subgradient at the kink is 0.
                    let xv = &self.nodes[x.0].value;
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(xv.iter())
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, x, &dx);
                }
                Op::Sigmoid { x } => {
                    let yv = &node.value;
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(yv.iter())
                        .map(|(&gi, &yi)| gi * yi * (1.0 - yi))
                        .collect();
                    self.accumulate(&mut grads, x, &dx);
                }
                Op::Softplus { x } => {
                    let xv = &self.nodes[x.0].value;
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(xv.iter())
                        .map(|(&gi, &xi)| gi * sigmoid(xi))
                        .collect();
                    self.accumulate(&mut grads, x, &dx);
                }
                Op::Exp { x } => {
                    let yv = &node.value;
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(yv.iter())
                        .map(|(&gi, &yi)| gi * yi)
                        .collect();
                    self.accumulate(&mut grads, x, &dx);
                }
                Op::Ln { x } => {
                    let xv = &self.nodes[x.0].value;
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(xv.iter())
                        .map(|(&gi, &xi)| gi / xi)
                        .collect();
                    self.accumulate(&mut grads, x, &dx);
                }
                Op::MaxPair { a, b } => {
                    let am = &self.nodes[a.0].value;
                    let bm = &self.nodes[b.0].value;
                    let da: Vec<f64> = g
                        .iter()
                        .zip(am.iter().zip(bm.iter()))
                        .map(|(&gi, (&ai, &bi))| if ai >= bi { gi } else { 0.0 })
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(am.iter().zip(bm.iter()))
                        .map(|(&gi, (&ai, &bi))| if ai < bi { gi } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, a, &da);
                    self.accumulate(&mut grads, b, &db);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = &self.nodes[x.0].value;
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(xv.iter())
                        .map(|(&gi, &xi)| if xi > lo && xi < hi { gi } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, x, &dx);
                }
                Op::ConcatCols { a, b } => {
                    let ca = self.nodes[a.0].value.cols();
                    let cb = self.nodes[b.0].value.cols();
                    let n = g.rows();
                    let mut da = Vec::with_capacity(n * ca);
                    let mut db = Vec::with_capacity(n * cb);
                    for r in 0..n {
                        let row = g.row_slice(r);
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    self.accumulate(&mut grads, a, &da);
                    self.accumulate(&mut grads, b, &db);
                }
                Op::RepeatRows { x, k } => {
                    let (n, c) = self.nodes[x.0].value.shape();
                    let mut dx = vec![0.0; n * c];
                    for r in 0..n * k {
                        let src = g.row_slice(r);
                        let dst = &mut dx[(r / k) * c..(r / k + 1) * c];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    self.accumulate(&mut grads, x, &dx);
                }
                Op::MeanRows { x } => {
                    let (n, c) = self.nodes[x.0].value.shape();
                    let scale = 1.0 / n as f64;
                    let mut dx = Vec::with_capacity(n * c);
                    for _ in 0..n {
                        dx.extend(g.data().iter().map(|&v| v * scale));
                    }
                    self.accumulate(&mut grads, x, &dx);
                }
                Op::GroupMeanRows { x, k } => {
                    let (rows, c) = self.nodes[x.0].value.shape();
                    let scale = 1.0 / k as f64;
                    let mut dx = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dx.extend(g.row_slice(r / k).iter().map(|&v| v * scale));
                    }
                    self.accumulate(&mut grads, x, &dx);
                }
                Op::GroupLogSumExp { x, k } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Vec::with_capacity(xv.rows());
                    for g_idx in 0..g.rows() {
                        let out = node.value.data()[g_idx];
                        let gi = g.data()[g_idx];
                        for &xi in &xv.data()[g_idx * k..(g_idx + 1) * k] {
                            dx.push(gi * (xi - out).exp());
                        }
                    }
                    self.accumulate(&mut grads, x, &dx);
                }
                Op::AlLogPdf {
                    y,
                    mu,
                    sraw,
                    tau,
                    tau_grad,
                    sigma_floor,
                } => {
                    let n = g.rows();
                    let yv = self.nodes[y.0].value.data();
                    let muv = self.nodes[mu.0].value.data();
                    let sv = self.nodes[sraw.0].value.data();
                    let tv = self.nodes[tau.0].value.data();
                    let mut dmu = Vec::with_capacity(n);
                    let mut dsraw = Vec::with_capacity(n);
                    let mut dtau = if tau_grad { Vec::with_capacity(n) } else { Vec::new() };
                    for i in 0..n {
                        let gi = g.data()[i];
                        let sigma = softplus(sv[i]) + sigma_floor;
                        let r = yv[i] - muv[i];
                        let slope = if r >= 0.0 { tv[i] } else { tv[i] - 1.0 };
                        let rho = r * slope;
                        dmu.push(gi * slope / sigma);
                        dsraw.push(gi * (rho / (sigma * sigma) - 1.0 / sigma) * sigmoid(sv[i]));
                        if tau_grad {
                            dtau.push(
                                gi * ((1.0 - 2.0 * tv[i]) / (tv[i] * (1.0 - tv[i])) - r / sigma),
                            );
                        }
                    }
                    self.accumulate(&mut grads, mu, &dmu);
                    self.accumulate(&mut grads, sraw, &dsraw);
                    if tau_grad {
                        self.accumulate(&mut grads, tau, &dtau);
                    }
                }
                                Op::SliceRows { x, r0 } => {
                    let c = self.nodes[x.0].value.cols();
                    let gx = self.grad_mut(&mut grads, x);
                    let dst = &mut gx.data_mut()[r0 * c..r0 * c + g.len()];
                    for (d, s) in dst.iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
                Op::SliceCols { x, c0 } => {
                    let (n, c) = self.nodes[x.0].value.shape();
                    let w = g.cols();
                    let gx = self.grad_mut(&mut grads, x);
                    for r in 0..n {
                        let src = g.row_slice(r);
                        let dst = &mut gx.data_mut()[r * c + c0..r * c + c0 + w];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                Op::Sum { x } => {
                    let gi = g.data()[0];
                    let len = self.nodes[x.0].value.len();
                    self.accumulate(&mut grads, x, &vec![gi; len]);
                }
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            by_param: self.params.clone(),
        })
    }

    fn grad_mut<'g>(&self, grads: &'g mut [Option<Matrix>], id: NodeId) -> &'g mut Matrix {
        let (r, c) = self.nodes[id.0].value.shape();
        grads[id.0].get_or_insert_with(|| Matrix::zeros(r, c))
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], id: NodeId, delta: &[f64]) {
        let gx = self.grad_mut(grads, id);
        debug_assert_eq!(gx.len(), delta.len());
        for (d, s) in gx.data_mut().iter_mut().zip(delta) {
            *d += s;
        }
    }

    fn accumulate_scaled(&self, grads: &mut [Option<Matrix>], id: NodeId, delta: &[f64], c: f64) {
        let gx = self.grad_mut(grads, id);
        debug_assert_eq!(gx.len(), delta.len());
        for (d, s) in gx.data_mut().iter_mut().zip(delta) {
            *d += c * s;
        }
    }

    /// Smallest |pre-activation| observed over every ReLU input on the tape.
    /// Finite-difference checks use this to stay away from kinks.
    pub fn min_relu_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                for &v in self.nodes[x.0].value.iter() {
                    margin = margin.min(v.abs());
                }
            }
        }
        margin
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus ln(1 + e^x).
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Stable log-sum-exp of a nonempty slice: max(v) + ln Σ exp(v - max(v)).
pub fn log_sum_exp(v: &[f64]) -> Result<f64, CqnpError> {
    if v.is_empty() {
        return Err(CqnpError::Usage("log_sum_exp of empty input".into()));
    }
    Ok(log_sum_exp_slice(v))
}

fn log_sum_exp_slice(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    let s: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(0, Matrix::from_vec(1, 1, vec![3.0]));
        let y = tape.sum(w);
        let grads = tape.backward(y, 1.0).unwrap();
        assert_eq!(grads.get(w, (1, 1)).data(), &[1.0]);
    }

    #[test]
    fn relu_piecewise_slope() {
        for (x, want) in [(-1.0, 0.0), (1.0, 1.0)] {
            let mut tape = Tape::new();
            let w = tape.param(0, Matrix::from_vec(1, 1, vec![x]));
            let r = tape.relu(w);
            let y = tape.sum(r);
            let grads = tape.backward(y, 1.0).unwrap();
            assert_eq!(grads.get(w, (1, 1)).data(), &[want]);
        }
    }

    #[test]
    fn unreached_param_gradient_is_exactly_zero() {
        let mut tape = Tape::new();
        let w = tape.param(0, Matrix::from_vec(1, 1, vec![2.0]));
        let unused = tape.param(1, Matrix::from_vec(2, 2, vec![1.0; 4]));
        let y = tape.sum(w);
        let grads = tape.backward(y, 1.0).unwrap();
        let mut seen = vec![];
        grads.for_each_param(|pid, g| seen.push((pid, g.map(|m| m.data().to_vec()))));
        assert_eq!(seen[0], (0, Some(vec![1.0])));
        assert_eq!(seen[1], (1, None));
        assert_eq!(grads.get(unused, (2, 2)).data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(0, Matrix::from_vec(2, 1, vec![1.0, 2.0]));
        assert!(tape.backward(w, 1.0).is_err());
    }

    #[test]
    fn matmul_chain_gradients() {
        // y = sum(a * b) with a = [1 2; 3 4], b = [5; 6]
        let mut tape = Tape::new();
        let a = tape.param(0, Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(1, Matrix::from_vec(2, 1, vec![5.0, 6.0]));
        let p = tape.matmul(a, b);
        let y = tape.sum(p);
        assert_eq!(tape.scalar_value(y), 17.0 + 39.0);
        let grads = tape.backward(y, 1.0).unwrap();
        // d/da = ones(2,1) * b^T, d/db = a^T * ones(2,1)
        assert_eq!(grads.get(a, (2, 2)).data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(grads.get(b, (2, 1)).data(), &[4.0, 6.0]);
    }

    #[test]
    fn log_sum_exp_basics() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let shifted = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((shifted - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn log_sum_exp_shift_invariance() {
        let v = [0.3, -1.2, 4.0, 2.2, -0.7];
        let base = log_sum_exp(&v).unwrap();
        for c in [-3.0, 0.5, 10.0] {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            assert!((log_sum_exp(&shifted).unwrap() - (base + c)).abs() < 1e-12);
        }
    }

    #[test]
    fn group_lse_matches_per_group() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::column(&[0.0, 1.0, -2.0, 0.5, 0.5, 0.5]));
        let out = tape.group_log_sum_exp(x, 3);
        let v = tape.value(out).data().to_vec();
        assert!((v[0] - log_sum_exp(&[0.0, 1.0, -2.0]).unwrap()).abs() < 1e-14);
        assert!((v[1] - log_sum_exp(&[0.5, 0.5, 0.5]).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn repeat_and_mean_roundtrip_gradients() {
        // mean_rows(repeat_rows(x, k)) == x, so the composite gradient is 1.
        let mut tape = Tape::new();
        let x = tape.param(0, Matrix::row(&[2.0, -3.0]));
        let rep = tape.repeat_rows(x, 4);
        let mean = tape.mean_rows(rep);
        let s = tape.sum(mean);
        let grads = tape.backward(s, 1.0).unwrap();
        assert_eq!(grads.get(x, (1, 2)).data(), &[1.0, 1.0]);
    }

    /// The fused density must agree (values and gradients) with the same
    /// quantity composed from primitive ops.
    #[test]
    fn fused_al_log_pdf_matches_composition() {
        let y = [0.3, -1.2, 0.0, 2.5];
        let mu0 = [0.1, -0.4, 0.2, 2.0];
        let sraw0 = [0.5, -1.0, 0.0, 1.5];
        let tau0 = [0.2, 0.5, 0.8, 0.35];
        let floor = 1e-3;

        let mut fused = Tape::new();
        let yn = fused.constant(Matrix::column(&y));
        let mu = fused.param(0, Matrix::column(&mu0));
        let sraw = fused.param(1, Matrix::column(&sraw0));
        let tau = fused.param(2, Matrix::column(&tau0));
        let lpdf = fused.al_log_pdf(yn, mu, sraw, tau, true, floor);
        let fused_vals = fused.value(lpdf).data().to_vec();
        let sum = fused.sum(lpdf);
        let fg = fused.backward(sum, 1.0).unwrap();

        let mut comp = Tape::new();
        let yn = comp.constant(Matrix::column(&y));
        let mu = comp.param(0, Matrix::column(&mu0));
        let sraw = comp.param(1, Matrix::column(&sraw0));
        let tau = comp.param(2, Matrix::column(&tau0));
        let sp = comp.softplus(sraw);
        let sigma = comp.add_const(sp, floor);
        let r = comp.sub(yn, mu);
        let a = comp.mul(tau, r);
        let tau_m1 = comp.add_const(tau, -1.0);
        let b = comp.mul(tau_m1, r);
        let pin = comp.max_pair(a, b);
        let ln_tau = comp.ln(tau);
        let neg_tau = comp.neg(tau);
        let om = comp.add_const(neg_tau, 1.0);
        let ln_om = comp.ln(om);
        let skew = comp.add(ln_tau, ln_om);
        let ln_sigma = comp.ln(sigma);
        let ratio = comp.div(pin, sigma);
        let spread = comp.add(ln_sigma, ratio);
        let lpdf2 = comp.sub(skew, spread);
        let comp_vals = comp.value(lpdf2).data().to_vec();
        let sum2 = comp.sum(lpdf2);
        let cg = comp.backward(sum2, 1.0).unwrap();

        for (a, b) in fused_vals.iter().zip(&comp_vals) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for pid in 0..3 {
            let mut fv = None;
            let mut cv = None;
            fg.for_each_param(|id, g| {
                if id == pid {
                    fv = g.map(|m| m.data().to_vec());
                }
            });
            cg.for_each_param(|id, g| {
                if id == pid {
                    cv = g.map(|m| m.data().to_vec());
                }
            });
            let (fv, cv) = (fv.unwrap(), cv.unwrap());
            for (a, b) in fv.iter().zip(&cv) {
                assert!((a - b).abs() < 1e-12, "param {pid}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn group_mean_matches_per_group_mean() {
        let mut tape = Tape::new();
        let x = tape.param(0, Matrix::from_vec(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let m = tape.group_mean_rows(x, 2);
        assert_eq!(tape.value(m).data(), &[2.0, 3.0, 6.0, 7.0]);
        let s = tape.sum(m);
        let grads = tape.backward(s, 1.0).unwrap();
        assert_eq!(grads.get(x, (4, 2)).data(), &[0.5; 8]);
    }

    #[test]
    fn slice_and_concat_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(0, Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let left = tape.slice_cols(x, 0, 1);
        let right = tape.slice_cols(x, 1, 3);
        let back = tape.concat_cols(left, right);
        let doubled = tape.mul_const(back, 2.0);
        let s = tape.sum(doubled);
        let grads = tape.backward(s, 1.0).unwrap();
        assert_eq!(grads.get(x, (2, 3)).data(), &[2.0; 6]);
    }
}
