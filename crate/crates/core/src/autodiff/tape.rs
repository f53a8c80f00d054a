use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::special::{digamma, gamma_unit_pdf, inv_reg_inc_gamma, reg_inc_gamma};
use crate::numerics::{
    cholesky_matrix, lgamma, sigmoid, softplus, tri_solve_lower, tri_solve_lower_transpose, Matrix,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    StopGradient,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, f64),
    AddScalar(usize, usize),
    ScaleBy(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sqrt(usize),
    Softplus(usize),
    Sigmoid(usize),
    ClampMin(usize, f64),
    Sum(usize),
    RowSum(usize),
    Trace(usize),
    Diag(usize),
    DiagEmbed(usize),
    Mask(usize, Rc<Matrix>),
    AddRow(usize, usize),
    AddCol(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    SliceCols(usize, usize),
    PadCols(usize),
    VStack(usize, usize),
    Cholesky(usize),
    TriSolve(usize, usize),
    LogDiagSum(usize),
    GammaLogpdf(usize, usize, usize),
    NormalLogpdf(usize, usize, usize),
    /// Unit-rate Gamma draws `g` (cached) scaled by `1 / rate`.
    GammaReparam {
        shape: usize,
        rate: usize,
        unit: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Define-by-run record of matrix operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the append order is a
/// topological order and the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    visits: Cell<usize>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    rows: usize,
    cols: usize,
}

/// Adjoints produced by [`Tape::gradients`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint for `v`; zeros if nothing flowed into it.
    pub fn wrt(&self, v: &Var<'_>) -> Matrix {
        match &self.adjoints[v.id] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[v.id];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: &Var<'_>) -> Option<&Matrix> {
        self.adjoints[v.id].as_ref()
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::shape(format!("{op}: {a:?} vs {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of nodes the most recent backward sweep touched.
    pub fn last_backward_visits(&self) -> usize {
        self.visits.get()
    }

    fn push(&self, value: Matrix, op: Op) -> Var<'_> {
        let (rows, cols) = value.shape();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
            rows,
            cols,
        }
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Matrix::scalar(value))
    }

    /// Constant 1x1 node.
    pub fn scalar_const(&self, v: f64) -> Var<'_> {
        self.constant(Matrix::scalar(v))
    }

    /// Input that never receives an adjoint.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: &Var<'_>) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    fn with_value<T>(&self, id: usize, f: impl FnOnce(&Matrix) -> T) -> T {
        f(&self.nodes.borrow()[id].value)
    }

    fn with_values<T>(&self, a: usize, b: usize, f: impl FnOnce(&Matrix, &Matrix) -> T) -> T {
        let nodes = self.nodes.borrow();
        f(&nodes[a].value, &nodes[b].value)
    }

    /// Reverse sweep from a 1x1 output.
    pub fn gradients(&self, output: &Var<'_>) -> Result<Gradients> {
        if (output.rows, output.cols) != (1, 1) {
            return Err(Error::shape(format!(
                "gradients need a scalar output, got {:?}",
                (output.rows, output.cols)
            )));
        }
        let nodes = self.nodes.borrow();
        let n = output.id + 1;
        let mut adj: Vec<Option<Matrix>> = vec![None; nodes.len()];
        adj[output.id] = Some(Matrix::scalar(1.0));
        let mut visits = 0usize;

        fn acc(adj: &mut [Option<Matrix>], id: usize, g: Matrix) {
            match &mut adj[id] {
                Some(m) => m.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for id in (0..n).rev() {
            visits += 1;
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::Constant | Op::StopGradient => {}
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, g.scale(-1.0));
                    acc(&mut adj, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut adj, *a, g.hadamard(val(*b)));
                    acc(&mut adj, *b, g.hadamard(val(*a)));
                }
                Op::ScalarMul(a, c) => acc(&mut adj, *a, g.scale(*c)),
                Op::AddScalar(a, s) => {
                    acc(&mut adj, *s, Matrix::scalar(g.sum()));
                    acc(&mut adj, *a, g.clone());
                }
                Op::ScaleBy(a, s) => {
                    let sv = val(*s).item();
                    acc(&mut adj, *s, Matrix::scalar(g.hadamard(val(*a)).sum()));
                    acc(&mut adj, *a, g.scale(sv));
                }
                Op::MatMul(a, b) => {
                    acc(&mut adj, *a, g.matmul_nt(val(*b)));
                    acc(&mut adj, *b, val(*a).matmul_tn(&g));
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.transpose()),
                Op::Exp(a) => acc(&mut adj, *a, g.hadamard(&node.value)),
                Op::Log(a) => acc(&mut adj, *a, g.zip_map(val(*a), |g, x| g / x)),
                Op::Square(a) => acc(&mut adj, *a, g.zip_map(val(*a), |g, x| 2.0 * g * x)),
                Op::Sqrt(a) => acc(&mut adj, *a, g.zip_map(&node.value, |g, y| 0.5 * g / y)),
                Op::Softplus(a) => acc(&mut adj, *a, g.zip_map(val(*a), |g, x| g * sigmoid(x))),
                Op::Sigmoid(a) => {
                    acc(&mut adj, *a, g.zip_map(&node.value, |g, s| g * s * (1.0 - s)))
                }
                Op::ClampMin(a, lo) => {
                    let lo = *lo;
                    acc(
                        &mut adj,
                        *a,
                        g.zip_map(val(*a), |g, x| if x > lo { g } else { 0.0 }),
                    )
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(&mut adj, *a, Matrix::filled(r, c, g.item()));
                }
                Op::RowSum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(&mut adj, *a, Matrix::from_fn(r, c, |i, _| g[(i, 0)]));
                }
                Op::Trace(a) => {
                    let (r, c) = val(*a).shape();
                    let t = g.item();
                    acc(&mut adj, *a, Matrix::from_fn(r, c, |i, j| if i == j { t } else { 0.0 }));
                }
                Op::Diag(a) => {
                    let (r, c) = val(*a).shape();
                    acc(
                        &mut adj,
                        *a,
                        Matrix::from_fn(r, c, |i, j| if i == j { g[(i, 0)] } else { 0.0 }),
                    );
                }
                Op::DiagEmbed(a) => {
                    let n = val(*a).rows();
                    acc(&mut adj, *a, Matrix::from_fn(n, 1, |i, _| g[(i, i)]));
                }
                Op::Mask(a, m) => acc(&mut adj, *a, g.hadamard(m)),
                Op::AddRow(a, r) => {
                    let cols = g.cols();
                    let mut gr = Matrix::zeros(1, cols);
                    for i in 0..g.rows() {
                        for j in 0..cols {
                            gr[(0, j)] += g[(i, j)];
                        }
                    }
                    acc(&mut adj, *r, gr);
                    acc(&mut adj, *a, g.clone());
                }
                Op::AddCol(a, c) => {
                    let gc = Matrix::from_fn(g.rows(), 1, |i, _| g.row(i).iter().sum());
                    acc(&mut adj, *c, gc);
                    acc(&mut adj, *a, g.clone());
                }
                Op::MulRow(a, r) => {
                    let (av, rv) = (val(*a), val(*r));
                    let mut gr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            gr[(0, j)] += g[(i, j)] * av[(i, j)];
                        }
                    }
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * rv[(0, j)]);
                    acc(&mut adj, *r, gr);
                    acc(&mut adj, *a, ga);
                }
                Op::MulCol(a, c) => {
                    let (av, cv) = (val(*a), val(*c));
                    let gc = Matrix::from_fn(g.rows(), 1, |i, _| {
                        g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum()
                    });
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * cv[(i, 0)]);
                    acc(&mut adj, *c, gc);
                    acc(&mut adj, *a, ga);
                }
                Op::SliceCols(a, c0) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    ga.set_block(0, *c0, &g);
                    acc(&mut adj, *a, ga);
                }
                Op::PadCols(a) => {
                    let (r, c) = val(*a).shape();
                    acc(&mut adj, *a, g.block(0, r, 0, c));
                }
                Op::VStack(a, b) => {
                    let ra = val(*a).rows();
                    let (r, c) = g.shape();
                    acc(&mut adj, *b, g.block(ra, r, 0, c));
                    acc(&mut adj, *a, g.block(0, ra, 0, c));
                }
                Op::Cholesky(a) => {
                    acc(&mut adj, *a, cholesky_adjoint(&node.value, &g)?);
                }
                Op::TriSolve(l, b) => {
                    let lv = val(*l);
                    let gb = tri_solve_lower_transpose(lv, &g)?;
                    let gl = gb.matmul_nt(&node.value).lower().scale(-1.0);
                    acc(&mut adj, *l, gl);
                    acc(&mut adj, *b, gb);
                }
                Op::LogDiagSum(a) => {
                    let av = val(*a);
                    let t = g.item();
                    let (r, c) = av.shape();
                    acc(
                        &mut adj,
                        *a,
                        Matrix::from_fn(r, c, |i, j| if i == j { t / av[(i, i)] } else { 0.0 }),
                    );
                }
                Op::GammaLogpdf(x, sh, rt) => {
                    let (xv, av, bv) = (val(*x), val(*sh), val(*rt));
                    let gx = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                        let (x, a, b) = (xv[(i, j)], av[(i, j)], bv[(i, j)]);
                        g[(i, j)] * ((a - 1.0) / x - b)
                    });
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                        let (x, a, b) = (xv[(i, j)], av[(i, j)], bv[(i, j)]);
                        g[(i, j)] * (b.ln() - digamma(a) + x.ln())
                    });
                    let gb = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                        let (x, a, b) = (xv[(i, j)], av[(i, j)], bv[(i, j)]);
                        g[(i, j)] * (a / b - x)
                    });
                    acc(&mut adj, *rt, gb);
                    acc(&mut adj, *sh, ga);
                    acc(&mut adj, *x, gx);
                }
                Op::NormalLogpdf(x, m, s) => {
                    let (xv, mv, sv) = (val(*x), val(*m), val(*s));
                    let gx = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                        let s2 = sv[(i, j)] * sv[(i, j)];
                        -g[(i, j)] * (xv[(i, j)] - mv[(i, j)]) / s2
                    });
                    let gs = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                        let s = sv[(i, j)];
                        let d = xv[(i, j)] - mv[(i, j)];
                        g[(i, j)] * (d * d / (s * s * s) - 1.0 / s)
                    });
                    acc(&mut adj, *s, gs);
                    acc(&mut adj, *m, gx.scale(-1.0));
                    acc(&mut adj, *x, gx);
                }
                Op::GammaReparam { shape, rate, unit } => {
                    let (av, bv) = (val(*shape), val(*rate));
                    let (r, c) = av.shape();
                    let mut ga = Matrix::zeros(r, c);
                    let mut gb = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            let k = i * c + j;
                            let (a, b) = (av[(i, j)], bv[(i, j)]);
                            let u = unit[k];
                            ga[(i, j)] = g[(i, j)] * implicit_gamma_shape_grad(a, u)? / b;
                            gb[(i, j)] = -g[(i, j)] * node.value[(i, j)] / b;
                        }
                    }
                    acc(&mut adj, *rate, gb);
                    acc(&mut adj, *shape, ga);
                }
            }
            adj[id] = Some(g);
        }
        self.visits.set(visits);
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients {
            adjoints: adj,
            shapes,
        })
    }
}

/// `dg/da` for a unit-rate Gamma draw `g` held at fixed CDF level:
/// `-(dP/da)(a, g) / p(g; a)`, with `dP/da` by central differences.
pub fn implicit_gamma_shape_grad(a: f64, g: f64) -> Result<f64> {
    let mut h = 1e-4 * a.max(1.0);
    if a - h <= 0.0 {
        h = 0.5 * a;
    }
    let dp = (reg_inc_gamma(a + h, g)? - reg_inc_gamma(a - h, g)?) / (2.0 * h);
    let pdf = gamma_unit_pdf(a, g);
    if pdf == 0.0 {
        return Ok(0.0);
    }
    Ok(-dp / pdf)
}

/// Adjoint of `L = chol(A)` with respect to a symmetric `A`:
/// `S = L^-T Phi(L^T Lbar) L^-1`, returned as `(S + S^T) / 2`, where `Phi`
/// keeps the lower triangle and halves the diagonal.
fn cholesky_adjoint(l: &Matrix, lbar: &Matrix) -> Result<Matrix> {
    let n = l.rows();
    let mut p = l.matmul_tn(&lbar.lower());
    for i in 0..n {
        for j in 0..n {
            if j > i {
                p[(i, j)] = 0.0;
            } else if i == j {
                p[(i, j)] *= 0.5;
            }
        }
    }
    let x = tri_solve_lower_transpose(l, &p)?;
    let s = tri_solve_lower_transpose(l, &x.transpose())?.transpose();
    Ok(s.symmetrize())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the primal value.
    pub fn value(&self) -> Matrix {
        self.tape.value(self).clone()
    }

    /// Primal of a 1x1 node.
    pub fn item(&self) -> f64 {
        self.tape.value(self).item()
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Matrix) -> Matrix) -> Var<'t> {
        let v = self.tape.with_value(self.id, f);
        self.tape.push(v, op)
    }

    fn same_shape(&self, other: &Var<'t>, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add")?;
        let v = self.tape.with_values(self.id, other.id, |a, b| a.add(b));
        Ok(self.tape.push(v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "sub")?;
        let v = self.tape.with_values(self.id, other.id, |a, b| a.sub(b));
        Ok(self.tape.push(v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "mul")?;
        let v = self.tape.with_values(self.id, other.id, |a, b| a.hadamard(b));
        Ok(self.tape.push(v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::ScalarMul(self.id, c), |a| a.scale(c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Adds a differentiable 1x1 value to every entry.
    pub fn add_scalar(&self, s: &Var<'t>) -> Result<Var<'t>> {
        if s.shape() != (1, 1) {
            return Err(shape_err("add_scalar", s.shape(), (1, 1)));
        }
        let v = self
            .tape
            .with_values(self.id, s.id, |a, s| a.map(|x| x + s.item()));
        Ok(self.tape.push(v, Op::AddScalar(self.id, s.id)))
    }

    /// Multiplies every entry by a differentiable 1x1 value.
    pub fn scale_by(&self, s: &Var<'t>) -> Result<Var<'t>> {
        if s.shape() != (1, 1) {
            return Err(shape_err("scale_by", s.shape(), (1, 1)));
        }
        let v = self
            .tape
            .with_values(self.id, s.id, |a, s| a.scale(s.item()));
        Ok(self.tape.push(v, Op::ScaleBy(self.id, s.id)))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        if self.cols != other.rows {
            return Err(shape_err("matmul", self.shape(), other.shape()));
        }
        let v = self.tape.with_values(self.id, other.id, |a, b| a.matmul(b));
        Ok(self.tape.push(v, Op::MatMul(self.id, other.id)))
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul(&other.t())
    }

    pub fn t(&self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), |a| a.transpose())
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |a| a.map(f64::exp))
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), |a| a.map(f64::ln))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square(self.id), |a| a.map(|x| x * x))
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), |a| a.map(f64::sqrt))
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), |a| a.map(softplus))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |a| a.map(sigmoid))
    }

    /// `max(x, lo)` entrywise; the adjoint is zero where clamped.
    pub fn clamp_min(&self, lo: f64) -> Var<'t> {
        self.unary(Op::ClampMin(self.id, lo), |a| a.map(|x| x.max(lo)))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| Matrix::scalar(a.sum()))
    }

    /// Column vector of row sums.
    pub fn row_sum(&self) -> Var<'t> {
        self.unary(Op::RowSum(self.id), |a| {
            Matrix::from_fn(a.rows(), 1, |i, _| a.row(i).iter().sum())
        })
    }

    pub fn trace(&self) -> Result<Var<'t>> {
        if self.rows != self.cols {
            return Err(shape_err("trace", self.shape(), self.shape()));
        }
        Ok(self.unary(Op::Trace(self.id), |a| Matrix::scalar(a.trace())))
    }

    /// Diagonal of a square matrix as a column vector.
    pub fn diag(&self) -> Result<Var<'t>> {
        if self.rows != self.cols {
            return Err(shape_err("diag", self.shape(), self.shape()));
        }
        Ok(self.unary(Op::Diag(self.id), |a| Matrix::column(&a.diag())))
    }

    /// Square diagonal matrix from a column vector.
    pub fn diag_embed(&self) -> Result<Var<'t>> {
        if self.cols != 1 {
            return Err(shape_err("diag_embed", self.shape(), (self.rows, 1)));
        }
        Ok(self.unary(Op::DiagEmbed(self.id), |a| Matrix::diag_from(a.as_slice())))
    }

    /// Entrywise product with a constant matrix.
    pub fn mask(&self, m: Rc<Matrix>) -> Result<Var<'t>> {
        if m.shape() != self.shape() {
            return Err(shape_err("mask", self.shape(), m.shape()));
        }
        let v = self.tape.with_value(self.id, |a| a.hadamard(&m));
        Ok(self.tape.push(v, Op::Mask(self.id, m)))
    }

    /// Adds a 1 x cols row vector to every row.
    pub fn add_row(&self, r: &Var<'t>) -> Result<Var<'t>> {
        if r.shape() != (1, self.cols) {
            return Err(shape_err("add_row", self.shape(), r.shape()));
        }
        let v = self.tape.with_values(self.id, r.id, |a, r| {
            Matrix::from_fn(a.rows(), a.cols(), |i, j| a[(i, j)] + r[(0, j)])
        });
        Ok(self.tape.push(v, Op::AddRow(self.id, r.id)))
    }

    /// Adds a rows x 1 column vector to every column.
    pub fn add_col(&self, c: &Var<'t>) -> Result<Var<'t>> {
        if c.shape() != (self.rows, 1) {
            return Err(shape_err("add_col", self.shape(), c.shape()));
        }
        let v = self.tape.with_values(self.id, c.id, |a, c| {
            Matrix::from_fn(a.rows(), a.cols(), |i, j| a[(i, j)] + c[(i, 0)])
        });
        Ok(self.tape.push(v, Op::AddCol(self.id, c.id)))
    }

    /// Scales column `j` by `r[0, j]`.
    pub fn mul_row(&self, r: &Var<'t>) -> Result<Var<'t>> {
        if r.shape() != (1, self.cols) {
            return Err(shape_err("mul_row", self.shape(), r.shape()));
        }
        let v = self.tape.with_values(self.id, r.id, |a, r| {
            Matrix::from_fn(a.rows(), a.cols(), |i, j| a[(i, j)] * r[(0, j)])
        });
        Ok(self.tape.push(v, Op::MulRow(self.id, r.id)))
    }

    /// Scales row `i` by `c[i, 0]`.
    pub fn mul_col(&self, c: &Var<'t>) -> Result<Var<'t>> {
        if c.shape() != (self.rows, 1) {
            return Err(shape_err("mul_col", self.shape(), c.shape()));
        }
        let v = self.tape.with_values(self.id, c.id, |a, c| {
            Matrix::from_fn(a.rows(), a.cols(), |i, j| a[(i, j)] * c[(i, 0)])
        });
        Ok(self.tape.push(v, Op::MulCol(self.id, c.id)))
    }

    pub fn slice_cols(&self, c0: usize, c1: usize) -> Result<Var<'t>> {
        if c0 > c1 || c1 > self.cols {
            return Err(Error::shape(format!("slice_cols {c0}..{c1} of {:?}", self.shape())));
        }
        let rows = self.rows;
        Ok(self.unary(Op::SliceCols(self.id, c0), |a| a.block(0, rows, c0, c1)))
    }

    /// Appends zero columns up to `total` columns.
    pub fn pad_cols(&self, total: usize) -> Result<Var<'t>> {
        if total < self.cols {
            return Err(Error::shape(format!("pad_cols to {total} from {}", self.cols)));
        }
        Ok(self.unary(Op::PadCols(self.id), |a| {
            let mut m = Matrix::zeros(a.rows(), total);
            m.set_block(0, 0, a);
            m
        }))
    }

    pub fn vstack(&self, bottom: &Var<'t>) -> Result<Var<'t>> {
        if self.cols != bottom.cols {
            return Err(shape_err("vstack", self.shape(), bottom.shape()));
        }
        let v = self
            .tape
            .with_values(self.id, bottom.id, Matrix::vstack);
        Ok(self.tape.push(v, Op::VStack(self.id, bottom.id)))
    }

    pub fn stop_gradient(&self) -> Var<'t> {
        self.unary(Op::StopGradient, |a| a.clone())
    }

    /// Cholesky factor of a symmetric positive-definite matrix.
    pub fn cholesky(&self) -> Result<Var<'t>> {
        let l = self.tape.with_value(self.id, cholesky_matrix)?;
        Ok(self.tape.push(l, Op::Cholesky(self.id)))
    }

    /// Solves `self * x = b` where `self` is lower triangular.
    pub fn tri_solve(&self, b: &Var<'t>) -> Result<Var<'t>> {
        let x = self.tape.with_values(self.id, b.id, tri_solve_lower)?;
        Ok(self.tape.push(x, Op::TriSolve(self.id, b.id)))
    }

    /// `sum_i log(self[i, i])`.
    pub fn log_diag_sum(&self) -> Result<Var<'t>> {
        let s = self.tape.with_value(self.id, |a| {
            let d = a.diag();
            if d.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::domain("log_diag_sum of nonpositive diagonal"));
            }
            Ok(d.iter().map(|x| x.ln()).sum::<f64>())
        })?;
        Ok(self.tape.push(Matrix::scalar(s), Op::LogDiagSum(self.id)))
    }

    /// Entrywise `log Gamma(x; shape, rate)` (rate parameterization).
    pub fn gamma_logpdf(&self, shape: &Var<'t>, rate: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(shape, "gamma_logpdf")?;
        self.same_shape(rate, "gamma_logpdf")?;
        let v = {
            let nodes = self.tape.nodes.borrow();
            let (x, a, b) = (
                &nodes[self.id].value,
                &nodes[shape.id].value,
                &nodes[rate.id].value,
            );
            let mut out = Matrix::zeros(self.rows, self.cols);
            for k in 0..x.len() {
                out.as_mut_slice()[k] = gamma_logpdf_scalar(
                    x.as_slice()[k],
                    a.as_slice()[k],
                    b.as_slice()[k],
                )?;
            }
            out
        };
        Ok(self
            .tape
            .push(v, Op::GammaLogpdf(self.id, shape.id, rate.id)))
    }

    /// Entrywise `log N(x; mean, std^2)`.
    pub fn normal_logpdf(&self, mean: &Var<'t>, std: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(mean, "normal_logpdf")?;
        self.same_shape(std, "normal_logpdf")?;
        let v = {
            let nodes = self.tape.nodes.borrow();
            let (x, m, s) = (
                &nodes[self.id].value,
                &nodes[mean.id].value,
                &nodes[std.id].value,
            );
            let mut out = Matrix::zeros(self.rows, self.cols);
            for k in 0..x.len() {
                let (x, m, s) = (x.as_slice()[k], m.as_slice()[k], s.as_slice()[k]);
                if !(s > 0.0) {
                    return Err(Error::domain(format!("normal_logpdf with std {s}")));
                }
                let z = (x - m) / s;
                out.as_mut_slice()[k] = -0.5 * LN_2PI - s.ln() - 0.5 * z * z;
            }
            out
        };
        Ok(self.tape.push(v, Op::NormalLogpdf(self.id, mean.id, std.id)))
    }
}

/// `a log b - log Gamma(a) + (a - 1) log x - b x`.
pub fn gamma_logpdf_scalar(x: f64, shape: f64, rate: f64) -> Result<f64> {
    if !(x > 0.0) || !(shape > 0.0) || !(rate > 0.0) {
        return Err(Error::domain(format!(
            "gamma_logpdf(x = {x}; shape = {shape}, rate = {rate})"
        )));
    }
    Ok(shape * rate.ln() - lgamma(shape)? + (shape - 1.0) * x.ln() - rate * x)
}

/// Reparameterized Gamma draws: `z = P^-1(shape, u) / rate` with `u` held
/// fixed, so gradients flow to `shape` implicitly and to `rate` exactly.
pub fn gamma_reparam<'t>(shape: &Var<'t>, rate: &Var<'t>, uniforms: &[f64]) -> Result<Var<'t>> {
    shape.same_shape(rate, "gamma_reparam")?;
    if uniforms.len() != shape.rows * shape.cols {
        return Err(Error::shape("gamma_reparam: wrong number of uniforms"));
    }
    let tape = shape.tape;
    let (unit, z) = {
        let nodes = tape.nodes.borrow();
        let (a, b) = (&nodes[shape.id].value, &nodes[rate.id].value);
        let mut unit = Vec::with_capacity(uniforms.len());
        let mut z = Matrix::zeros(shape.rows, shape.cols);
        for (k, &u) in uniforms.iter().enumerate() {
            let (ak, bk) = (a.as_slice()[k], b.as_slice()[k]);
            if !(ak > 0.0) || !(bk > 0.0) {
                return Err(Error::domain(format!("gamma_reparam(shape = {ak}, rate = {bk})")));
            }
            let g = inv_reg_inc_gamma(ak, u)?;
            unit.push(g);
            z.as_mut_slice()[k] = g / bk;
        }
        (unit, z)
    };
    Ok(tape.push(
        z,
        Op::GammaReparam {
            shape: shape.id,
            rate: rate.id,
            unit,
        },
    ))
}
