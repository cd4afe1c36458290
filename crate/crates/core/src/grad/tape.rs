//! Minimal reverse-mode differentiation over `f64` vectors.
//!
//! The tape records a small set of vector operations (enough for the MLP
//! denoiser, classifier-free guidance, Tweedie estimation and the analytic
//! rewards) and accumulates adjoints in a single reverse sweep. Scalars are
//! length-1 vectors. Weight matrices are borrowed, never copied, and are
//! treated as constants: the tape differentiates with respect to leaves only.

use crate::math::Mat;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<'a> {
    /// Input or constant; a leaf of the graph.
    Leaf,
    Concat(Vec<Var>),
    /// y = W x + b with constant parameters.
    Affine { w: &'a Mat, x: Var },
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// y = c·x
    Scale(Var, f64),
    /// y_i = a·x_i + shift_i (the shift is folded into the stored value)
    ScaleShift { x: Var, a: f64 },
    /// scalar ‖x‖²
    SumSq(Var),
    /// scalar a·x with constant a
    DotConst { x: Var, a: Vec<f64> },
    /// elementwise sqrt (used on scalars)
    Sqrt(Var),
    /// elementwise product (used on scalars)
    Mul(Var, Var),
    /// y = x + c elementwise
    AddConst(Var),
}

struct Node<'a> {
    op: Op<'a>,
    value: Vec<f64>,
}

/// Records operations eagerly and differentiates in reverse.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Default for Tape<'a> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op<'a>, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Alias for [`Tape::leaf`]; constants are just leaves nobody asks a
    /// gradient for.
    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.leaf(value)
    }

    pub fn concat(&mut self, parts: Vec<Var>) -> Var {
        let mut value = Vec::new();
        for p in &parts {
            value.extend_from_slice(self.value(*p));
        }
        self.push(Op::Concat(parts), value)
    }

    pub fn affine(&mut self, w: &'a Mat, b: &[f64], x: Var) -> Var {
        let mut y = w.matvec(self.value(x));
        for (yi, bi) in y.iter_mut().zip(b) {
            *yi += bi;
        }
        self.push(Op::Affine { w, x }, y)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh(x), y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = crate::math::add(self.value(a), self.value(b));
        self.push(Op::Add(a, b), y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = crate::math::sub(self.value(a), self.value(b));
        self.push(Op::Sub(a, b), y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).iter().map(|v| c * v).collect();
        self.push(Op::Scale(x, c), y)
    }

    pub fn scale_shift(&mut self, x: Var, a: f64, shift: Vec<f64>) -> Var {
        debug_assert_eq!(self.value(x).len(), shift.len());
        let y = self
            .value(x)
            .iter()
            .zip(&shift)
            .map(|(v, s)| a * v + s)
            .collect();
        self.push(Op::ScaleShift { x, a }, y)
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let y = vec![crate::math::sum_sq(self.value(x))];
        self.push(Op::SumSq(x), y)
    }

    pub fn dot_const(&mut self, x: Var, a: Vec<f64>) -> Var {
        debug_assert_eq!(self.value(x).len(), a.len());
        let y = vec![crate::math::dot(self.value(x), &a)];
        self.push(Op::DotConst { x, a }, y)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|v| v.sqrt()).collect();
        self.push(Op::Sqrt(x), y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul(a, b), y)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).iter().map(|v| v + c).collect();
        self.push(Op::AddConst(x), y)
    }

    /// Reverse sweep from a scalar `output`; returns the adjoints of every
    /// requested variable.
    pub fn gradients(&self, output: Var, wrts: &[Var]) -> Vec<Vec<f64>> {
        let adj = self.backward(output);
        wrts.iter().map(|w| adj[w.0].clone()).collect()
    }

    /// Reverse sweep from a scalar `output`; returns the adjoint of `wrt`.
    pub fn gradient(&self, output: Var, wrt: Var) -> Vec<f64> {
        let adj = self.backward(output);
        adj[wrt.0].clone()
    }

    fn backward(&self, output: Var) -> Vec<Vec<f64>> {
        debug_assert_eq!(self.value(output).len(), 1, "output must be scalar");
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        adj[output.0][0] = 1.0;

        for i in (0..=output.0).rev() {
            let d = std::mem::take(&mut adj[i]);
            if d.iter().all(|v| *v == 0.0) {
                adj[i] = d;
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        for (a, g) in adj[p.0].iter_mut().zip(&d[off..off + len]) {
                            *a += g;
                        }
                        off += len;
                    }
                }
                Op::Affine { w, x } => {
                    w.matvec_transpose_acc(&d, &mut adj[x.0]);
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[i].value;
                    for ((a, g), yi) in adj[x.0].iter_mut().zip(&d).zip(y) {
                        *a += g * (1.0 - yi * yi);
                    }
                }
                Op::Add(a, b) => {
                    for (acc, g) in adj[a.0].iter_mut().zip(&d) {
                        *acc += g;
                    }
                    for (acc, g) in adj[b.0].iter_mut().zip(&d) {
                        *acc += g;
                    }
                }
                Op::Sub(a, b) => {
                    for (acc, g) in adj[a.0].iter_mut().zip(&d) {
                        *acc += g;
                    }
                    for (acc, g) in adj[b.0].iter_mut().zip(&d) {
                        *acc -= g;
                    }
                }
                Op::Scale(x, c) => {
                    for (acc, g) in adj[x.0].iter_mut().zip(&d) {
                        *acc += c * g;
                    }
                }
                Op::ScaleShift { x, a } => {
                    for (acc, g) in adj[x.0].iter_mut().zip(&d) {
                        *acc += a * g;
                    }
                }
                Op::SumSq(x) => {
                    let g = d[0];
                    for (acc, xi) in adj[x.0].iter_mut().zip(&self.nodes[x.0].value) {
                        *acc += 2.0 * xi * g;
                    }
                }
                Op::DotConst { x, a } => {
                    let g = d[0];
                    for (acc, ai) in adj[x.0].iter_mut().zip(a) {
                        *acc += ai * g;
                    }
                }
                Op::Sqrt(x) => {
                    let y = &self.nodes[i].value;
                    for ((acc, g), yi) in adj[x.0].iter_mut().zip(&d).zip(y) {
                        *acc += g * 0.5 / yi;
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    for ((acc, g), bi) in adj[a.0].iter_mut().zip(&d).zip(vb) {
                        *acc += g * bi;
                    }
                    for ((acc, g), ai) in adj[b.0].iter_mut().zip(&d).zip(va) {
                        *acc += g * ai;
                    }
                }
                Op::AddConst(x) => {
                    for (acc, g) in adj[x.0].iter_mut().zip(&d) {
                        *acc += g;
                    }
                }
            }
            adj[i] = d;
        }
        adj
    }
}
