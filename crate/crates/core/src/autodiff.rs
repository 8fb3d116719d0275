//! Reverse-mode differentiation over matrix-valued expressions.
//!
//! A [`Tape`] records every operation in creation order, so node ids are a
//! topological order and [`Tape::backward`] is a single reverse sweep. The op
//! set is exactly what the network and the losses need; there is no general
//! broadcasting beyond [`Tape::add_bias`].
//!
//! ```
//! use drmea::autodiff::Tape;
//! use drmea::Matrix;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
//! let y = tape.frobenius_sq(x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().as_slice(), &[2.0, 6.0, 4.0, 8.0]);
//! ```

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, SymEig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    SoftmaxColumns(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Matrix,
    },
    NormalizeColumns {
        x: NodeId,
        eps: f64,
        norms: Vec<f64>,
    },
    CenterColumns(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    FrobeniusSq(NodeId),
    ElementwiseMul(NodeId, NodeId),
    SelectColumns {
        x: NodeId,
        idx: Vec<usize>,
    },
    SubspaceProjector {
        h: NodeId,
        d_prime: usize,
        eig: Box<SymEig>,
        centered: Matrix,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddBias(..) => "add_bias",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::SoftmaxColumns(..) => "softmax_columns",
            Op::CrossEntropy { .. } => "cross_entropy_from_logits",
            Op::NormalizeColumns { .. } => "normalize_columns",
            Op::CenterColumns(..) => "center_columns",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::FrobeniusSq(..) => "frobenius_sq",
            Op::ElementwiseMul(..) => "elementwise_mul",
            Op::SelectColumns { .. } => "select_columns",
            Op::SubspaceProjector { .. } => "subspace_projector",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::AddBias(a, b) | Op::ElementwiseMul(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(x)
            | Op::LeakyRelu(x, _)
            | Op::Tanh(x)
            | Op::SoftmaxColumns(x)
            | Op::CenterColumns(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::FrobeniusSq(x) => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::NormalizeColumns { x, .. } | Op::SelectColumns { x, .. } => vec![*x],
            Op::SubspaceProjector { h, .. } => vec![*h],
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Computation record. Single owner, single thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that reaches it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.get(id).is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).scalar()
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push_raw(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push_raw(value, Op::Constant, false)
    }

    fn push_raw(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).shape()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// `x + b 1ᵀ` for a column vector `b`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(x).add_column(self.value(bias))?;
        Ok(self.push(v, Op::AddBias(x, bias)))
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> NodeId {
        let v = self.value(x).map(|z| leaky_relu(z, alpha));
        self.push(v, Op::LeakyRelu(x, alpha))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn softmax_columns(&mut self, x: NodeId) -> NodeId {
        let v = softmax_columns(self.value(x));
        self.push(v, Op::SoftmaxColumns(x))
    }

    /// Mean over columns of `-log softmax(z_j)[y_j]`.
    pub fn cross_entropy_from_logits(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        check_labels(labels, z.rows(), z.cols())?;
        let probs = softmax_columns(z);
        let v = cross_entropy_value(z, labels);
        Ok(self.push(
            Matrix::filled(1, 1, v),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn normalize_columns(&mut self, x: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let norms: Vec<f64> = (0..xv.cols()).map(|j| numerics::norm(xv.col(j))).collect();
        let v = numerics::normalize_columns(xv, eps);
        self.push(v, Op::NormalizeColumns { x, eps, norms })
    }

    pub fn center_columns(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).center_columns();
        self.push(v, Op::CenterColumns(x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).scale(c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn frobenius_sq(&mut self, x: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(x).frobenius_sq());
        self.push(v, Op::FrobeniusSq(x))
    }

    pub fn elementwise_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::ElementwiseMul(a, b)))
    }

    pub fn select_columns(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = self.value(x).select_columns(idx)?;
        Ok(self.push(v, Op::SelectColumns { x, idx: idx.to_vec() }))
    }

    /// `U Uᵀ` for the leading `d_prime` eigenvectors `U` of `covariance(H)`.
    ///
    /// Fails with [`Error::DegenerateSpectrum`] when the eigen-gap
    /// `λ_{d'} - λ_{d'+1}` is below `gap_tol`; the backward pass divides by
    /// eigenvalue differences across that gap.
    pub fn subspace_projector(&mut self, h: NodeId, d_prime: usize, gap_tol: f64) -> Result<NodeId> {
        let hv = self.value(h);
        let (d, n) = hv.shape();
        if d_prime == 0 || d_prime > d.min(n.saturating_sub(1)) {
            return Err(Error::Usage(format!(
                "d'={d_prime} outside 1..=min(d={d}, n-1={})",
                n.saturating_sub(1)
            )));
        }
        let centered = hv.center_columns();
        let eig = if d >= n {
            numerics::covariance_eig_thin(&centered)?
        } else {
            numerics::sym_eig(&numerics::covariance(hv)?)?
        };
        let gap = eig.gap(d_prime);
        if !(gap >= gap_tol) {
            return Err(Error::DegenerateSpectrum {
                gap,
                d_prime,
                tol: gap_tol,
            });
        }
        let v = eig.projector(d_prime);
        Ok(self.push(
            v,
            Op::SubspaceProjector {
                h,
                d_prime,
                eig: Box::new(eig),
                centered,
            },
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            let (r, c) = self.shape(root);
            return Err(Error::Usage(format!("backward from a {r}x{c} root")));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            for (parent, contribution) in self.local_grads(node, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[id] = Some(g);
        }
        // Constants never hold a gradient, except a constant root's own seed.
        for (id, slot) in grads.iter_mut().enumerate() {
            if id != root.0 && !self.nodes[id].requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Matrix) -> Result<Vec<(NodeId, Matrix)>> {
        let val = |id: NodeId| self.value(id);
        let out = match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) => vec![(*a, g.matmul_t(val(*b))?), (*b, val(*a).t_matmul(g)?)],
            Op::Transpose(x) => vec![(*x, g.transpose())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::AddBias(x, b) => vec![(*x, g.clone()), (*b, g.row_sums())],
            Op::LeakyRelu(x, alpha) => {
                let a = *alpha;
                vec![(*x, val(*x).zip_map(g, |z, gi| if z > 0.0 { gi } else { a * gi }))]
            }
            Op::Tanh(x) => vec![(*x, node.value.zip_map(g, |y, gi| gi * (1.0 - y * y)))],
            Op::SoftmaxColumns(x) => {
                let s = &node.value;
                let mut out = Matrix::zeros(s.rows(), s.cols());
                for j in 0..s.cols() {
                    let inner = numerics::dot(s.col(j), g.col(j));
                    for (o, (&si, &gi)) in out.col_mut(j).iter_mut().zip(s.col(j).iter().zip(g.col(j))) {
                        *o = si * (gi - inner);
                    }
                }
                vec![(*x, out)]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = g.scalar() / labels.len() as f64;
                let mut out = probs.clone();
                for (j, &y) in labels.iter().enumerate() {
                    out[(y, j)] -= 1.0;
                }
                vec![(*logits, out.scale(scale))]
            }
            Op::NormalizeColumns { x, eps, norms } => {
                let y = &node.value;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for j in 0..y.cols() {
                    let dst = out.col_mut(j);
                    if norms[j] >= *eps {
                        let proj = numerics::dot(y.col(j), g.col(j));
                        for (o, (&yi, &gi)) in dst.iter_mut().zip(y.col(j).iter().zip(g.col(j))) {
                            *o = (gi - yi * proj) / norms[j];
                        }
                    } else {
                        for (o, &gi) in dst.iter_mut().zip(g.col(j)) {
                            *o = gi / eps;
                        }
                    }
                }
                vec![(*x, out)]
            }
            Op::CenterColumns(x) => vec![(*x, g.center_columns())],
            Op::Scale(x, c) => vec![(*x, g.scale(*c))],
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                vec![(*x, Matrix::filled(r, c, g.scalar()))]
            }
            Op::FrobeniusSq(x) => vec![(*x, val(*x).scale(2.0 * g.scalar()))],
            Op::ElementwiseMul(a, b) => vec![(*a, g.hadamard(val(*b))?), (*b, g.hadamard(val(*a))?)],
            Op::SelectColumns { x, idx } => {
                let (r, c) = self.shape(*x);
                let mut out = Matrix::zeros(r, c);
                for (k, &j) in idx.iter().enumerate() {
                    for (o, gi) in out.col_mut(j).iter_mut().zip(g.col(k)) {
                        *o += gi;
                    }
                }
                vec![(*x, out)]
            }
            Op::SubspaceProjector {
                h,
                d_prime,
                eig,
                centered,
            } => vec![(*h, projector_backward(eig, *d_prime, centered, g)?)],
        };
        Ok(out)
    }
}

/// Gradient of `L(U Uᵀ)` with respect to the feature matrix `H`, where `U`
/// spans the leading `d'` eigenvectors of `C = cov(H)`.
///
/// First-order eigenvector perturbation gives
/// `dL/dC = Σ_{i≤d'<j} [u_jᵀ(G+Gᵀ)u_i / (λ_i-λ_j)] u_j u_iᵀ`; it is then
/// symmetrised and pulled back through `C = Hc Hcᵀ/(n-1)` and the centring.
fn projector_backward(eig: &SymEig, d_prime: usize, centered: &Matrix, g: &Matrix) -> Result<Matrix> {
    if eig.vectors.cols() < eig.vectors.rows() {
        return thin_projector_backward(eig, d_prime, centered, g);
    }
    let d = eig.values.len();
    let u = &eig.vectors;
    let g_sym = g.add(&g.transpose())?;
    let rotated = u.t_matmul(&g_sym)?.matmul(u)?;
    let mut k = Matrix::zeros(d, d);
    for i in 0..d_prime {
        for j in d_prime..d {
            k[(j, i)] = rotated[(j, i)] / (eig.values[i] - eig.values[j]);
        }
    }
    let grad_c = u.matmul(&k)?.matmul_t(u)?.symmetrize();
    let n = centered.cols();
    let grad_centered = grad_c.matmul(centered)?.scale(2.0 / (n - 1) as f64);
    Ok(grad_centered.center_columns())
}

/// Same gradient as [`projector_backward`] when only the `r` eigenpairs with
/// non-zero eigenvalue are stored. The discarded eigenvectors all share the
/// eigenvalue 0, so their contribution collapses onto the complement
/// projector `Q = I - U_r U_rᵀ` and no `d x d` eigenbasis is needed.
fn thin_projector_backward(eig: &SymEig, d_prime: usize, centered: &Matrix, g: &Matrix) -> Result<Matrix> {
    let r = eig.values.len();
    let u_r = &eig.vectors;
    let u_d = u_r.leading_columns(d_prime);
    let s_u = g.add(&g.transpose())?.matmul(&u_d)?;
    let rotated = u_r.t_matmul(&s_u)?;
    let mut k = Matrix::zeros(r, d_prime);
    for i in 0..d_prime {
        for j in d_prime..r {
            k[(j, i)] = rotated[(j, i)] / (eig.values[i] - eig.values[j]);
        }
    }
    let mut a = u_r.matmul(&k)?;
    let complement = s_u.sub(&u_r.matmul(&rotated)?)?;
    for i in 0..d_prime {
        let inv = 1.0 / eig.values[i];
        for (dst, src) in a.col_mut(i).iter_mut().zip(complement.col(i)) {
            *dst += src * inv;
        }
    }
    // sym(A U_dᵀ) H_c without forming the d x d matrix.
    let n = centered.cols();
    let left = a.matmul(&u_d.t_matmul(centered)?)?;
    let right = u_d.matmul(&a.t_matmul(centered)?)?;
    let grad_centered = left.add(&right)?.scale(1.0 / (n - 1) as f64);
    Ok(grad_centered.center_columns())
}

#[inline]
pub fn leaky_relu(z: f64, alpha: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        alpha * z
    }
}

/// Column-wise softmax, shifted by the column maximum.
pub fn softmax_columns(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for j in 0..z.cols() {
        let col = out.col_mut(j);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in col.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        col.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn cross_entropy_value(z: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        let col = z.col(j);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - col[y];
    }
    total / labels.len() as f64
}

pub(crate) fn check_labels(labels: &[usize], classes: usize, cols: usize) -> Result<()> {
    if labels.len() != cols {
        return Err(Error::Shape(format!("{} labels for {cols} columns", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Largest relative discrepancy between the tape gradient of `f` at `x0` and
/// central finite differences with the given step:
/// `max |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
pub fn grad_check<F>(f: F, x0: &Matrix, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let root = f(&mut tape, x)?;
    let grads = tape.backward(root)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(x0.rows(), x0.cols()));

    let eval = |m: Matrix| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(m);
        let root = f(&mut tape, x)?;
        Ok(tape.scalar(root))
    };

    let mut worst: f64 = 0.0;
    for k in 0..x0.as_slice().len() {
        let mut plus = x0.clone();
        plus.as_mut_slice()[k] += step;
        let mut minus = x0.clone();
        minus.as_mut_slice()[k] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let ad = analytic.as_slice()[k];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
