use nalgebra::DMatrix;

use super::AdError;

pub type Tensor = DMatrix<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive whose derivative is supplied by the caller, such as an ODE
/// solve backed by a discrete adjoint.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    /// Cotangents of every input given the cotangent of the output.
    fn backward(&self, out_grad: &Tensor) -> Result<Vec<Tensor>, AdError>;
}

enum Op<'a> {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Matrix plus a broadcast row vector.
    AddRow(Var, Var),
    /// Matrix plus a broadcast column vector.
    AddCol(Var, Var),
    MatMul(Var, Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Sum(Var),
    Transpose(Var),
    /// Column-major reshape.
    Reshape(Var),
    /// Gather of column-major element indices into a column vector.
    Select(Var, Vec<usize>),
    /// `x` solving `A x = b`.
    Solve(Var, Var),
    Custom(Vec<Var>, Box<dyn CustomOp + 'a>),
}

struct Node<'a> {
    op: Op<'a>,
    value: Tensor,
    needs_grad: bool,
}

/// Records dense array operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every input precedes its
/// consumer and the graph is acyclic by construction.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`; zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "node is not a scalar");
        t[(0, 0)]
    }

    fn push(&mut self, op: Op<'a>, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn leaf_vector(&mut self, values: &[f64]) -> Var {
        self.leaf(Tensor::from_column_slice(values.len(), 1, values))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const, value, false)
    }

    pub fn constant_vector(&mut self, values: &[f64]) -> Var {
        self.constant(Tensor::from_column_slice(values.len(), 1, values))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{what}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a) + self.value(b);
        let g = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a) - self.value(b);
        let g = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), v, g)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a).component_mul(self.value(b));
        let g = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), v, g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        let g = self.needs(a);
        self.push(Op::Scale(a, s), v, g)
    }

    pub fn add_row(&mut self, m: Var, row: Var) -> Var {
        let (r, c) = self.value(m).shape();
        assert_eq!(self.value(row).shape(), (1, c), "add_row: shape mismatch");
        let rv = self.value(row);
        let v = Tensor::from_fn(r, c, |i, j| self.value(m)[(i, j)] + rv[(0, j)]);
        let g = self.needs(m) || self.needs(row);
        self.push(Op::AddRow(m, row), v, g)
    }

    pub fn add_col(&mut self, m: Var, col: Var) -> Var {
        let (r, c) = self.value(m).shape();
        assert_eq!(self.value(col).shape(), (r, 1), "add_col: shape mismatch");
        let cv = self.value(col);
        let v = Tensor::from_fn(r, c, |i, j| self.value(m)[(i, j)] + cv[(i, 0)]);
        let g = self.needs(m) || self.needs(col);
        self.push(Op::AddCol(m, col), v, g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).ncols(),
            self.value(b).nrows(),
            "matmul: shape mismatch"
        );
        let v = self.value(a) * self.value(b);
        let g = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), v, g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let g = self.needs(a);
        self.push(Op::Exp(a), v, g)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let g = self.needs(a);
        self.push(Op::Ln(a), v, g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let g = self.needs(a);
        self.push(Op::Tanh(a), v, g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::from_element(1, 1, self.value(a).iter().sum());
        let g = self.needs(a);
        self.push(Op::Sum(a), v, g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let g = self.needs(a);
        self.push(Op::Transpose(a), v, g)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape: size mismatch");
        let v = Tensor::from_column_slice(rows, cols, src.as_slice());
        let g = self.needs(a);
        self.push(Op::Reshape(a), v, g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn select(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let src = self.value(a);
        let v = Tensor::from_iterator(indices.len(), 1, indices.iter().map(|&i| src[i]));
        let g = self.needs(a);
        self.push(Op::Select(a, indices), v, g)
    }

    /// Solves `A x = b` by LU with partial pivoting.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let x = self
            .value(a)
            .clone()
            .lu()
            .solve(self.value(b))
            .ok_or(AdError::Singular)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Solve(a, b), x, g))
    }

    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp + 'a>) -> Var {
        let g = inputs.iter().any(|&v| self.needs(v));
        self.push(Op::Custom(inputs.to_vec(), op), value, g)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients, AdError> {
        let shape = self.value(out).shape();
        if shape != (1, 1) {
            return Err(AdError::NonScalar {
                rows: shape.0,
                cols: shape.1,
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::from_element(1, 1, 1.0));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let val = |v: Var| &self.nodes[v.0].value;
            let wants = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], -&g);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g.component_mul(val(*b)));
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], g.component_mul(val(*a)));
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads[a.0], &g * *s),
                Op::AddRow(m, r) => {
                    if wants(*r) {
                        let cs = Tensor::from_fn(1, g.ncols(), |_, j| g.column(j).sum());
                        accumulate(&mut grads[r.0], cs);
                    }
                    if wants(*m) {
                        accumulate(&mut grads[m.0], g);
                    }
                }
                Op::AddCol(m, c) => {
                    if wants(*c) {
                        let rs = Tensor::from_fn(g.nrows(), 1, |i, _| g.row(i).sum());
                        accumulate(&mut grads[c.0], rs);
                    }
                    if wants(*m) {
                        accumulate(&mut grads[m.0], g);
                    }
                }
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[a.0], &g * val(*b).transpose());
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], val(*a).tr_mul(&g));
                    }
                }
                Op::Exp(a) => accumulate(&mut grads[a.0], g.component_mul(&node.value)),
                Op::Ln(a) => accumulate(&mut grads[a.0], g.component_div(val(*a))),
                Op::Tanh(a) => {
                    let d = node.value.map(|t| 1.0 - t * t);
                    accumulate(&mut grads[a.0], g.component_mul(&d));
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads[a.0], Tensor::from_element(r, c, g[(0, 0)]));
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.transpose()),
                Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(
                        &mut grads[a.0],
                        Tensor::from_column_slice(r, c, g.as_slice()),
                    );
                }
                Op::Select(a, indices) => {
                    let (r, c) = val(*a).shape();
                    let mut acc = Tensor::zeros(r, c);
                    for (k, &i) in indices.iter().enumerate() {
                        acc[i] += g[k];
                    }
                    accumulate(&mut grads[a.0], acc);
                }
                Op::Solve(a, b) => {
                    let bbar = val(*a)
                        .transpose()
                        .lu()
                        .solve(&g)
                        .ok_or(AdError::Singular)?;
                    if wants(*a) {
                        accumulate(&mut grads[a.0], -(&bbar * node.value.transpose()));
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], bbar);
                    }
                }
                Op::Custom(inputs, op) => {
                    let parts = op.backward(&g)?;
                    if parts.len() != inputs.len() {
                        return Err(AdError::Unsupported(format!(
                            "custom op `{}` returned {} cotangents for {} inputs",
                            op.name(),
                            parts.len(),
                            inputs.len()
                        )));
                    }
                    for (v, p) in inputs.iter().zip(parts) {
                        if wants(*v) {
                            accumulate(&mut grads[v.0], p);
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    /// Recomputes every node from its recorded inputs. Custom nodes keep
    /// their recorded value.
    pub fn replay(&self) -> Result<Vec<Tensor>, AdError> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = |x: &Var| &vals[x.0];
            let out = match &node.op {
                Op::Leaf | Op::Const | Op::Custom(..) => node.value.clone(),
                Op::Add(a, b) => v(a) + v(b),
                Op::Sub(a, b) => v(a) - v(b),
                Op::Mul(a, b) => v(a).component_mul(v(b)),
                Op::Scale(a, s) => v(a) * *s,
                Op::AddRow(m, r) => {
                    let (mm, rr) = (v(m), v(r));
                    Tensor::from_fn(mm.nrows(), mm.ncols(), |i, j| mm[(i, j)] + rr[(0, j)])
                }
                Op::AddCol(m, c) => {
                    let (mm, cc) = (v(m), v(c));
                    Tensor::from_fn(mm.nrows(), mm.ncols(), |i, j| mm[(i, j)] + cc[(i, 0)])
                }
                Op::MatMul(a, b) => v(a) * v(b),
                Op::Exp(a) => v(a).map(f64::exp),
                Op::Ln(a) => v(a).map(f64::ln),
                Op::Tanh(a) => v(a).map(f64::tanh),
                Op::Sum(a) => Tensor::from_element(1, 1, v(a).iter().sum()),
                Op::Transpose(a) => v(a).transpose(),
                Op::Reshape(a) => Tensor::from_column_slice(
                    node.value.nrows(),
                    node.value.ncols(),
                    v(a).as_slice(),
                ),
                Op::Select(a, idx) => {
                    Tensor::from_iterator(idx.len(), 1, idx.iter().map(|&i| v(a)[i]))
                }
                Op::Solve(a, b) => v(a).clone().lu().solve(v(b)).ok_or(AdError::Singular)?,
            };
            vals.push(out);
        }
        Ok(vals)
    }

    /// True when [`Tape::replay`] reproduces every recorded value bit for bit.
    pub fn replay_matches(&self) -> Result<bool, AdError> {
        let vals = self.replay()?;
        Ok(vals.iter().zip(&self.nodes).all(|(a, n)| {
            a.iter()
                .zip(n.value.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        }))
    }
}
