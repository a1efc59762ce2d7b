//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Calling
//! [`Graph::backward`] on a `1×1` node walks the record in reverse and
//! accumulates gradients for every node that depends on a differentiable
//! leaf. Constants never receive gradients.
//!
//! Shapes are always two-dimensional. Row vectors (`1×n`) act as per-column
//! parameters, column vectors (`B×1`) as per-row gates.

use std::cell::{Ref, RefCell};

use ndarray::{s, Array1, Array2, Axis};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Recip(Var),
    Softplus(Var),
    Square(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sum(Var),
    SumCols(Var),
    LogSoftmax(Var),
    Normalize(Var, Array1<f64>),
    BlockLinear(Var, Var, usize),
    PassThrough(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

/// A recording of differentiable computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, materialising zeros of `shape` when absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
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

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var(nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    fn val(&self, v: Var) -> Ref<'_, Array2<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> Array2<f64> {
        self.val(v).clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.val(v).dim()
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.val(v);
        assert_eq!(value.dim(), (1, 1), "scalar() on non-scalar node");
        value[[0, 0]]
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.val(a).mapv(f);
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let (x, y) = (self.val(a), self.val(b));
            assert_eq!(x.ncols(), y.nrows(), "matmul shape mismatch");
            x.dot(&*y)
        };
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), tracked)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let (x, y) = (self.val(a), self.val(b));
            assert_eq!(x.dim(), y.dim(), "add shape mismatch");
            &*x + &*y
        };
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), tracked)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let (x, y) = (self.val(a), self.val(b));
            assert_eq!(x.dim(), y.dim(), "sub shape mismatch");
            &*x - &*y
        };
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Sub(a, b), tracked)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let (x, y) = (self.val(a), self.val(b));
            assert_eq!(x.dim(), y.dim(), "mul shape mismatch");
            &*x * &*y
        };
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Mul(a, b), tracked)
    }

    /// `a (B×n) + row (1×n)` broadcast over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let (x, r) = (self.val(a), self.val(row));
            assert_eq!(r.dim(), (1, x.ncols()), "add_row shape mismatch");
            &*x + &*r
        };
        let tracked = self.tracked(a) || self.tracked(row);
        self.push(value, Op::AddRow(a, row), tracked)
    }

    /// `a (B×n) ⊙ row (1×n)` broadcast over rows.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let (x, r) = (self.val(a), self.val(row));
            assert_eq!(r.dim(), (1, x.ncols()), "mul_row shape mismatch");
            &*x * &*r
        };
        let tracked = self.tracked(a) || self.tracked(row);
        self.push(value, Op::MulRow(a, row), tracked)
    }

    /// `a (B×n) ⊙ col (B×1)` broadcast over columns.
    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        let value = {
            let (x, c) = (self.val(a), self.val(col));
            assert_eq!(c.dim(), (x.nrows(), 1), "mul_col shape mismatch");
            &*x * &*c
        };
        let tracked = self.tracked(a) || self.tracked(col);
        self.push(value, Op::MulCol(a, col), tracked)
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn recip(&self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| 1.0 / x)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Column-wise concatenation; all parts share the row count.
    pub fn concat(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let value = {
            let views: Vec<_> = parts.iter().map(|&p| self.val(p)).collect();
            let rows = views[0].nrows();
            let cols: usize = views.iter().map(|v| v.ncols()).sum();
            let mut out = Array2::zeros((rows, cols));
            let mut at = 0;
            for v in &views {
                assert_eq!(v.nrows(), rows, "concat row mismatch");
                out.slice_mut(s![.., at..at + v.ncols()]).assign(&**v);
                at += v.ncols();
            }
            out
        };
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(value, Op::Concat(parts.to_vec()), tracked)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let value = self.val(a).slice(s![.., start..start + len]).to_owned();
        let tracked = self.tracked(a);
        self.push(value, Op::Slice(a, start), tracked)
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(&self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.val(a).sum());
        let tracked = self.tracked(a);
        self.push(value, Op::Sum(a), tracked)
    }

    /// Row sums: `B×n → B×1`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let value = self.val(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let tracked = self.tracked(a);
        self.push(value, Op::SumCols(a), tracked)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&self, a: Var) -> Var {
        let mut value = self.value(a);
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let tracked = self.tracked(a);
        self.push(value, Op::LogSoftmax(a), tracked)
    }

    /// Batch standardisation over rows: `(x − mean) / sqrt(var + eps)`,
    /// using the biased batch variance. Returns the node together with the
    /// batch mean and variance.
    pub fn batch_normalize(&self, a: Var, eps: f64) -> (Var, Array1<f64>, Array1<f64>) {
        let (value, mean, var, inv) = {
            let x = self.val(a);
            let n = x.nrows() as f64;
            let mean = x.sum_axis(Axis(0)) / n;
            let centered = &*x - &mean;
            let var = centered.mapv(|c| c * c).sum_axis(Axis(0)) / n;
            let inv = var.mapv(|v| 1.0 / (v + eps).sqrt());
            (centered * &inv, mean, var, inv)
        };
        let tracked = self.tracked(a);
        (self.push(value, Op::Normalize(a, inv), tracked), mean, var)
    }

    /// Block-diagonal linear map. `x` is `B × (blocks·d_in)`, `w` is
    /// `(blocks·d_in) × d_out`; output block `i` is `x_i · w_i`, giving
    /// `B × (blocks·d_out)`.
    pub fn block_linear(&self, x: Var, w: Var, blocks: usize) -> Var {
        let value = {
            let (xv, wv) = (self.val(x), self.val(w));
            assert_eq!(xv.ncols(), wv.nrows(), "block_linear shape mismatch");
            assert_eq!(xv.ncols() % blocks, 0, "block_linear block mismatch");
            let din = xv.ncols() / blocks;
            let dout = wv.ncols();
            let mut out = Array2::zeros((xv.nrows(), blocks * dout));
            for i in 0..blocks {
                let xi = xv.slice(s![.., i * din..(i + 1) * din]);
                let wi = wv.slice(s![i * din..(i + 1) * din, ..]);
                out.slice_mut(s![.., i * dout..(i + 1) * dout]).assign(&xi.dot(&wi));
            }
            out
        };
        let tracked = self.tracked(x) || self.tracked(w);
        self.push(value, Op::BlockLinear(x, w, blocks), tracked)
    }

    /// Node whose value is `forward` but whose gradient flows unchanged into
    /// `surrogate` (straight-through estimator).
    pub fn pass_through(&self, surrogate: Var, forward: Array2<f64>) -> Var {
        assert_eq!(self.shape(surrogate), forward.dim(), "pass_through shape mismatch");
        let tracked = self.tracked(surrogate);
        self.push(forward, Op::PassThrough(surrogate), tracked)
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.0].value.dim(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[output.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], nodes: &[Node], v: Var, g: Array2<f64>) {
            if !nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &nodes[i];
            let value = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if nodes[a.0].tracked {
                        let g = gout.dot(&nodes[b.0].value.t());
                        acc(&mut grads, &nodes, *a, g);
                    }
                    if nodes[b.0].tracked {
                        let g = nodes[a.0].value.t().dot(&gout);
                        acc(&mut grads, &nodes, *b, g);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, gout.clone());
                    acc(&mut grads, &nodes, *b, gout.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *a, gout.clone());
                    acc(&mut grads, &nodes, *b, -&gout);
                }
                Op::Mul(a, b) => {
                    if nodes[a.0].tracked {
                        acc(&mut grads, &nodes, *a, &gout * &nodes[b.0].value);
                    }
                    if nodes[b.0].tracked {
                        acc(&mut grads, &nodes, *b, &gout * &nodes[a.0].value);
                    }
                }
                Op::AddRow(a, r) => {
                    if nodes[r.0].tracked {
                        let g = gout.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, &nodes, *r, g);
                    }
                    acc(&mut grads, &nodes, *a, gout.clone());
                }
                Op::MulRow(a, r) => {
                    if nodes[r.0].tracked {
                        let g = (&gout * &nodes[a.0].value).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, &nodes, *r, g);
                    }
                    if nodes[a.0].tracked {
                        acc(&mut grads, &nodes, *a, &gout * &nodes[r.0].value);
                    }
                }
                Op::MulCol(a, c) => {
                    if nodes[c.0].tracked {
                        let g = (&gout * &nodes[a.0].value).sum_axis(Axis(1)).insert_axis(Axis(1));
                        acc(&mut grads, &nodes, *c, g);
                    }
                    if nodes[a.0].tracked {
                        acc(&mut grads, &nodes, *a, &gout * &nodes[c.0].value);
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, &nodes, *a, gout * *k),
                Op::AddScalar(a) => acc(&mut grads, &nodes, *a, gout),
                Op::Tanh(a) => {
                    let g = &gout * &value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Sigmoid(a) => {
                    let g = &gout * &value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Relu(a) => {
                    let mask = nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, &nodes, *a, gout * mask);
                }
                Op::Exp(a) => acc(&mut grads, &nodes, *a, gout * value),
                Op::Ln(a) => {
                    let g = gout / &nodes[a.0].value;
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Recip(a) => {
                    let g = -(gout * &value.mapv(|y| y * y));
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Softplus(a) => {
                    let g = gout * &nodes[a.0].value.mapv(sigmoid);
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Square(a) => {
                    let g = gout * &nodes[a.0].value.mapv(|x| 2.0 * x);
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = nodes[p.0].value.ncols();
                        if nodes[p.0].tracked {
                            let g = gout.slice(s![.., at..at + w]).to_owned();
                            acc(&mut grads, &nodes, *p, g);
                        }
                        at += w;
                    }
                }
                Op::Slice(a, start) => {
                    let mut g = Array2::zeros(nodes[a.0].value.dim());
                    g.slice_mut(s![.., *start..*start + gout.ncols()]).assign(&gout);
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Sum(a) => {
                    let g = Array2::from_elem(nodes[a.0].value.dim(), gout[[0, 0]]);
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::SumCols(a) => {
                    let g = Array2::ones(nodes[a.0].value.dim()) * &gout;
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::LogSoftmax(a) => {
                    let total = gout.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let g = &gout - &(value.mapv(f64::exp) * &total);
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Normalize(a, inv) => {
                    let n = value.nrows() as f64;
                    let sum_g = gout.sum_axis(Axis(0));
                    let sum_gx = (&gout * value).sum_axis(Axis(0));
                    let g = (&gout * n - &sum_g - &(value * &sum_gx)) * &(inv / n);
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::BlockLinear(x, w, blocks) => {
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    let din = xv.ncols() / blocks;
                    let dout = wv.ncols();
                    if nodes[x.0].tracked {
                        let mut gx = Array2::zeros(xv.dim());
                        for i in 0..*blocks {
                            let go = gout.slice(s![.., i * dout..(i + 1) * dout]);
                            let wi = wv.slice(s![i * din..(i + 1) * din, ..]);
                            gx.slice_mut(s![.., i * din..(i + 1) * din]).assign(&go.dot(&wi.t()));
                        }
                        acc(&mut grads, &nodes, *x, gx);
                    }
                    if nodes[w.0].tracked {
                        let mut gw = Array2::zeros(wv.dim());
                        for i in 0..*blocks {
                            let go = gout.slice(s![.., i * dout..(i + 1) * dout]);
                            let xi = xv.slice(s![.., i * din..(i + 1) * din]);
                            gw.slice_mut(s![i * din..(i + 1) * din, ..]).assign(&xi.t().dot(&go));
                        }
                        acc(&mut grads, &nodes, *w, gw);
                    }
                }
                Op::PassThrough(a) => acc(&mut grads, &nodes, *a, gout),
            }
        }
        Gradients { grads }
    }
}
