//! Tape-based reverse-mode automatic differentiation.
//!
//! Every node holds a dense row-major matrix (scalars are 1x1, vectors 1xn).
//! Nodes are appended in topological order during the forward pass; a reverse
//! sweep accumulates adjoints. Evaluation order is fixed, so identical inputs
//! reproduce identical values and gradients bit for bit.

use crate::error::Error;

/// Dense row-major matrix used for tape values and adjoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix shape/data mismatch");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Matrix { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn row(values: &[f64]) -> Self {
        Matrix { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub fn column(values: &[f64]) -> Self {
        Matrix { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Elementwise a + b, same shape.
    Add(NodeId, NodeId),
    /// Elementwise a - b, same shape.
    Sub(NodeId, NodeId),
    /// Elementwise a * b, same shape.
    Mul(NodeId, NodeId),
    /// Elementwise alpha * x + beta; beta is folded into the stored value, so
    /// only alpha is needed for the reverse pass.
    AffineConst(NodeId, f64),
    /// X (m x k) times W^T where W is (n x k); result m x n.
    MatMulNT(NodeId, NodeId),
    /// X plus a broadcast row vector (1 x n).
    AddRow(NodeId, NodeId),
    /// X plus a broadcast 1x1 scalar node.
    AddScalar(NodeId, NodeId),
    /// View of a flat range of the source node, reshaped to rows x cols.
    Slice(NodeId, usize),
    Sin(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    Log(NodeId),
    /// Sum of all entries; result 1x1.
    Sum(NodeId),
    /// Inner product of two same-shape nodes; result 1x1.
    Dot(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Recording of a forward computation, replayable in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softplus(x: f64) -> f64 {
    // log(1 + e^x), stable for large |x|
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input leaf. Leaves receive adjoints but have no parents.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let v = Matrix::new(va.rows, va.cols, data);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "sub shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let v = Matrix::new(va.rows, va.cols, data);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let v = Matrix::new(va.rows, va.cols, data);
        self.push(Op::Mul(a, b), v)
    }

    /// alpha * x + beta, elementwise.
    pub fn affine(&mut self, x: NodeId, alpha: f64, beta: f64) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let data = vx.data.iter().map(|v| alpha * v + beta).collect();
        let v = Matrix::new(vx.rows, vx.cols, data);
        self.push(Op::AffineConst(x, alpha), v)
    }

    /// X (m x k) * W^T with W stored as (n x k); result is m x n.
    pub fn matmul_nt(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        assert_eq!(vx.cols, vw.cols, "matmul_nt inner dimension mismatch");
        let (m, k, n) = (vx.rows, vx.cols, vw.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let xi = &vx.data[i * k..(i + 1) * k];
            for j in 0..n {
                let wj = &vw.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for t in 0..k {
                    acc += xi[t] * wj[t];
                }
                out[i * n + j] = acc;
            }
        }
        self.push(Op::MatMulNT(x, w), Matrix::new(m, n, out))
    }

    /// Add a 1 x n row vector to every row of X.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        assert_eq!(vb.rows, 1, "add_row expects a row vector");
        assert_eq!(vx.cols, vb.cols, "add_row width mismatch");
        let mut data = vx.data.clone();
        for i in 0..vx.rows {
            for j in 0..vx.cols {
                data[i * vx.cols + j] += vb.data[j];
            }
        }
        let v = Matrix::new(vx.rows, vx.cols, data);
        self.push(Op::AddRow(x, b), v)
    }

    /// Add a 1x1 scalar node to every entry of X.
    pub fn add_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (vx, vs) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        assert_eq!(vs.len(), 1, "add_scalar expects a 1x1 node");
        let sv = vs.data[0];
        let data = vx.data.iter().map(|v| v + sv).collect();
        let v = Matrix::new(vx.rows, vx.cols, data);
        self.push(Op::AddScalar(x, s), v)
    }

    /// View entries [offset, offset + rows*cols) of `src` as a rows x cols matrix.
    pub fn slice(&mut self, src: NodeId, offset: usize, rows: usize, cols: usize) -> NodeId {
        let vs = &self.nodes[src.0].value;
        assert!(offset + rows * cols <= vs.len(), "slice out of range");
        let data = vs.data[offset..offset + rows * cols].to_vec();
        self.push(Op::Slice(src, offset), Matrix::new(rows, cols, data))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: impl Fn(NodeId) -> Op) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let data = vx.data.iter().map(|v| f(*v)).collect();
        let v = Matrix::new(vx.rows, vx.cols, data);
        self.push(op(x), v)
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::sin, Op::Sin)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, Op::Tanh)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, softplus, Op::Softplus)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v * v, Op::Square)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::ln, Op::Log)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].value.data.iter().sum();
        self.push(Op::Sum(x), Matrix::scalar(s))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "dot length mismatch");
        let s: f64 = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).sum();
        self.push(Op::Dot(a, b), Matrix::scalar(s))
    }

    /// Reverse pass from a scalar root. The root's adjoint is seeded with 1.
    pub fn grad_scalar(&self, root: NodeId) -> Result<Gradients, Error> {
        let v = self.value(root);
        if v.len() != 1 {
            return Err(Error::Autodiff(format!(
                "grad_scalar requires a 1x1 root, got {}x{}",
                v.rows, v.cols
            )));
        }
        Ok(self.backward(root, &[1.0]))
    }

    /// Reverse pass seeding the adjoint of `root` with a basis vector at
    /// `flat_index`. Used for per-output gradients.
    pub fn grad_seeded(&self, root: NodeId, flat_index: usize) -> Result<Gradients, Error> {
        let v = self.value(root);
        if flat_index >= v.len() {
            return Err(Error::Autodiff(format!(
                "output index {} out of range for {}x{} root",
                flat_index, v.rows, v.cols
            )));
        }
        let mut seed = vec![0.0; v.len()];
        seed[flat_index] = 1.0;
        Ok(self.backward(root, &seed))
    }

    fn backward(&self, root: NodeId, seed: &[f64]) -> Gradients {
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        adj[root.0].copy_from_slice(seed);

        for idx in (0..=root.0).rev() {
            if adj[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut adj[idx]);
            match &self.nodes[idx].op {
                Op::Leaf => {
                    adj[idx] = g;
                }
                Op::Add(a, b) => {
                    for (t, gi) in adj[a.0].iter_mut().zip(&g) {
                        *t += gi;
                    }
                    for (t, gi) in adj[b.0].iter_mut().zip(&g) {
                        *t += gi;
                    }
                    adj[idx] = g;
                }
                Op::Sub(a, b) => {
                    for (t, gi) in adj[a.0].iter_mut().zip(&g) {
                        *t += gi;
                    }
                    for (t, gi) in adj[b.0].iter_mut().zip(&g) {
                        *t -= gi;
                    }
                    adj[idx] = g;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                    for i in 0..g.len() {
                        adj[a.0][i] += g[i] * vb[i];
                        adj[b.0][i] += g[i] * va[i];
                    }
                    adj[idx] = g;
                }
                Op::AffineConst(x, alpha) => {
                    for (t, gi) in adj[x.0].iter_mut().zip(&g) {
                        *t += alpha * gi;
                    }
                    adj[idx] = g;
                }
                Op::MatMulNT(x, w) => {
                    let vx = &self.nodes[x.0].value;
                    let vw = &self.nodes[w.0].value;
                    let (m, k, n) = (vx.rows, vx.cols, vw.rows);
                    // dX += G * W ; dW += G^T * X
                    {
                        let dx = &mut adj[x.0];
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                let wj = &vw.data[j * k..(j + 1) * k];
                                let dxi = &mut dx[i * k..(i + 1) * k];
                                for t in 0..k {
                                    dxi[t] += gij * wj[t];
                                }
                            }
                        }
                    }
                    {
                        let dw = &mut adj[w.0];
                        for i in 0..m {
                            let xi = &vx.data[i * k..(i + 1) * k];
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                let dwj = &mut dw[j * k..(j + 1) * k];
                                for t in 0..k {
                                    dwj[t] += gij * xi[t];
                                }
                            }
                        }
                    }
                    adj[idx] = g;
                }
                Op::AddRow(x, b) => {
                    let cols = self.nodes[b.0].value.cols;
                    for (t, gi) in adj[x.0].iter_mut().zip(&g) {
                        *t += gi;
                    }
                    for (i, gi) in g.iter().enumerate() {
                        adj[b.0][i % cols] += gi;
                    }
                    adj[idx] = g;
                }
                Op::AddScalar(x, s) => {
                    for (t, gi) in adj[x.0].iter_mut().zip(&g) {
                        *t += gi;
                    }
                    adj[s.0][0] += g.iter().sum::<f64>();
                    adj[idx] = g;
                }
                Op::Slice(src, offset) => {
                    for (i, gi) in g.iter().enumerate() {
                        adj[src.0][offset + i] += gi;
                    }
                    adj[idx] = g;
                }
                Op::Sin(x) => {
                    let vx = &self.nodes[x.0].value.data;
                    for i in 0..g.len() {
                        adj[x.0][i] += g[i] * vx[i].cos();
                    }
                    adj[idx] = g;
                }
                Op::Tanh(x) => {
                    let vy = &self.nodes[idx].value.data;
                    for i in 0..g.len() {
                        adj[x.0][i] += g[i] * (1.0 - vy[i] * vy[i]);
                    }
                    adj[idx] = g;
                }
                Op::Softplus(x) => {
                    let vx = &self.nodes[x.0].value.data;
                    for i in 0..g.len() {
                        adj[x.0][i] += g[i] * sigmoid(vx[i]);
                    }
                    adj[idx] = g;
                }
                Op::Square(x) => {
                    let vx = &self.nodes[x.0].value.data;
                    for i in 0..g.len() {
                        adj[x.0][i] += g[i] * 2.0 * vx[i];
                    }
                    adj[idx] = g;
                }
                Op::Log(x) => {
                    let vx = &self.nodes[x.0].value.data;
                    for i in 0..g.len() {
                        adj[x.0][i] += g[i] / vx[i];
                    }
                    adj[idx] = g;
                }
                Op::Sum(x) => {
                    let gs = g[0];
                    for t in adj[x.0].iter_mut() {
                        *t += gs;
                    }
                    adj[idx] = g;
                }
                Op::Dot(a, b) => {
                    let gs = g[0];
                    let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                    for i in 0..va.len() {
                        adj[a.0][i] += gs * vb[i];
                        adj[b.0][i] += gs * va[i];
                    }
                    adj[idx] = g;
                }
            }
        }
        Gradients { adjoints: adj }
    }
}

/// Adjoints for every node of a tape after a reverse pass.
pub struct Gradients {
    adjoints: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn of(&self, id: NodeId) -> &[f64] {
        &self.adjoints[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of a scalar-valued builder over leaf inputs.
    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn check_primitive(name: &str, build: impl Fn(&mut Tape, NodeId) -> NodeId, n: usize, positive: bool) {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for trial in 0..100 {
            let x: Vec<f64> = (0..n)
                .map(|_| {
                    let v: f64 = rng.gen_range(-2.0..2.0);
                    if positive {
                        v.abs() + 0.1
                    } else {
                        v
                    }
                })
                .collect();
            let eval = |vals: &[f64]| {
                let mut t = Tape::new();
                let leaf = t.leaf(Matrix::row(vals));
                let out = build(&mut t, leaf);
                let s = t.sum(out);
                t.value(s).data[0]
            };
            let mut t = Tape::new();
            let leaf = t.leaf(Matrix::row(&x));
            let out = build(&mut t, leaf);
            let s = t.sum(out);
            let grads = t.grad_scalar(s).unwrap();
            let g = grads.of(leaf);
            let fd = fd_grad(eval, &x, 1e-6);
            for i in 0..n {
                let denom = fd[i].abs().max(1.0);
                assert!(
                    (g[i] - fd[i]).abs() / denom < 1e-5,
                    "{name} trial {trial} idx {i}: ad {} vs fd {}",
                    g[i],
                    fd[i]
                );
            }
        }
    }

    #[test]
    fn primitives_match_finite_differences() {
        check_primitive("sin", |t, x| t.sin(x), 5, false);
        check_primitive("tanh", |t, x| t.tanh(x), 5, false);
        check_primitive("softplus", |t, x| t.softplus(x), 5, false);
        check_primitive("square", |t, x| t.square(x), 5, false);
        check_primitive("log", |t, x| t.log(x), 5, true);
        check_primitive("affine", |t, x| t.affine(x, -1.7, 0.3), 5, false);
        check_primitive(
            "add_mul",
            |t, x| {
                let a = t.slice(x, 0, 1, 3);
                let b = t.slice(x, 3, 1, 3);
                let s = t.add(a, b);
                t.mul(s, a)
            },
            6,
            false,
        );
        check_primitive(
            "sub_dot",
            |t, x| {
                let a = t.slice(x, 0, 1, 3);
                let b = t.slice(x, 3, 1, 3);
                let d = t.sub(a, b);
                t.dot(d, a)
            },
            6,
            false,
        );
        check_primitive(
            "matvec",
            |t, x| {
                let w = t.slice(x, 0, 2, 3); // 2x3 matrix
                let v = t.slice(x, 6, 1, 3); // length-3 vector
                t.matmul_nt(v, w)
            },
            9,
            false,
        );
        check_primitive(
            "matmul_bias",
            |t, x| {
                let xm = t.slice(x, 0, 2, 2);
                let w = t.slice(x, 4, 3, 2);
                let b = t.slice(x, 10, 1, 3);
                let y = t.matmul_nt(xm, w);
                t.add_row(y, b)
            },
            13,
            false,
        );
        check_primitive(
            "add_scalar",
            |t, x| {
                let xm = t.slice(x, 0, 1, 4);
                let s = t.slice(x, 4, 1, 1);
                t.add_scalar(xm, s)
            },
            5,
            false,
        );
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        // U(x) = 0.5 * ||x||^2 has gradient x
        let x = vec![1.5, -0.3, 2.0, 0.0];
        let mut t = Tape::new();
        let leaf = t.leaf(Matrix::row(&x));
        let sq = t.square(leaf);
        let s = t.sum(sq);
        let u = t.affine(s, 0.5, 0.0);
        let g = t.grad_scalar(u).unwrap();
        assert_eq!(g.of(leaf), &x[..]);
    }

    #[test]
    fn root_adjoint_is_one() {
        let mut t = Tape::new();
        let leaf = t.leaf(Matrix::row(&[0.7]));
        let y = t.sin(leaf);
        let s = t.sum(y);
        let g = t.grad_scalar(s).unwrap();
        assert_eq!(g.of(s), &[1.0]);
    }

    #[test]
    fn grad_of_unused_input_is_zero() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::row(&[1.0, 2.0]));
        let b = t.leaf(Matrix::row(&[3.0, 4.0]));
        let sq = t.square(a);
        let s = t.sum(sq);
        let g = t.grad_scalar(s).unwrap();
        assert_eq!(g.of(b), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::row(&[1.0, 2.0]));
        assert!(t.grad_scalar(a).is_err());
        assert!(t.grad_seeded(a, 5).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let a = t.leaf(Matrix::row(&[0.1, 0.2, 0.3]));
            let b = t.tanh(a);
            let c = t.square(b);
            let s = t.sum(c);
            let g = t.grad_scalar(s).unwrap();
            (t.value(s).data[0], g.of(a).to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_seeded_selects_single_output() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::row(&[1.0, 2.0, 3.0]));
        let y = t.square(a); // y_i = a_i^2
        let g = t.grad_seeded(y, 1).unwrap();
        assert_eq!(g.of(a), &[0.0, 4.0, 0.0]);
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        // linearity of the reverse pass over per-datum losses
        let x = [0.4, -1.1, 0.9];
        let per_datum = |i: usize| {
            let mut t = Tape::new();
            let leaf = t.leaf(Matrix::row(&x));
            let s = t.sin(leaf);
            let g = t.grad_seeded(s, i).unwrap();
            g.of(leaf).to_vec()
        };
        let mut t = Tape::new();
        let leaf = t.leaf(Matrix::row(&x));
        let s = t.sin(leaf);
        let tot = t.sum(s);
        let g = t.grad_scalar(tot).unwrap();
        let summed: Vec<f64> = (0..3).map(|i| (0..3).map(|j| per_datum(j)[i]).sum()).collect();
        for i in 0..3 {
            assert!((g.of(leaf)[i] - summed[i]).abs() < 1e-12);
        }
    }
}
