//! Reverse-mode tape over [`Matrix`] values.
//!
//! Every primitive records its output together with whatever it needs for the
//! backward rule. `backward` walks the records in exact reverse order and
//! accumulates gradients additively.

use super::{Matrix, NumericsError, ParamStore};
use crate::scalar::{cast, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRow(Var, usize),
    Sum(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::Softmax(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SelectRow(..) => "select_row",
            Op::Sum(..) => "sum",
            Op::Gather { .. } => "gather_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-threaded recording of one computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    visited: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` does not influence the loss.
    pub fn wrt(&self, v: Var, shape: (usize, usize)) -> Matrix<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }

    /// Node indices whose backward rule ran, in the order they ran.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Name of the primitive that produced node `i`.
    pub fn op_name(&self, i: usize) -> &'static str {
        self.nodes[i].op.name()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input that does not receive a gradient.
    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Input that receives a gradient.
    pub fn param(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Registers every matrix in `store` as a parameter; the returned vector is
    /// indexed by [`ParamId`](super::ParamId).
    pub fn bind(&mut self, store: &ParamStore<T>) -> Vec<Var> {
        store
            .values()
            .iter()
            .map(|m| self.param(m.clone()))
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).matmul(self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).add(self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    /// `a + bias` with `bias` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).add_row(self.value(bias))?;
        let g = self.grad_of(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), g))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, NumericsError> {
        let value = self.value(a).scale(s)?;
        let g = self.grad_of(&[a]);
        Ok(self.push(value, Op::Scale(a, s), g))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let g = self.grad_of(&[a]);
        self.push(value, Op::Transpose(a), g)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_rows_masked(a, None)
    }

    pub fn softmax_rows_masked(&mut self, a: Var, key_mask: Option<&[bool]>) -> Var {
        let value = self.value(a).softmax_rows_masked(key_mask);
        let g = self.grad_of(&[a]);
        self.push(value, Op::Softmax(a), g)
    }

    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<Var, NumericsError> {
        let (value, xhat, inv_std) =
            self.value(x)
                .layer_norm_parts(self.value(gamma), self.value(beta), eps)?;
        let g = self.grad_of(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).gelu();
        let g = self.grad_of(&[a]);
        self.push(value, Op::Gelu(a), g)
    }

    /// `m·w + bias`.
    pub fn linear(&mut self, m: Var, w: Var, bias: Var) -> Result<Var, NumericsError> {
        let p = self.matmul(m, w)?;
        self.add_row(p, bias)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::concat_cols(&mats)?;
        let g = self.grad_of(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::concat_rows(&mats)?;
        let g = self.grad_of(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), g))
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var, NumericsError> {
        let m = self.value(a);
        if row >= m.rows() {
            return Err(NumericsError::InvalidArgument(format!(
                "row {row} out of range for {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let value = m.slice_rows(row, 1);
        let g = self.grad_of(&[a]);
        Ok(self.push(value, Op::SelectRow(a, row), g))
    }

    /// Sum of all entries as a `1×1` matrix.
    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.value(a).sum();
        let value = Matrix::checked(1, 1, vec![s], "sum")?;
        let g = self.grad_of(&[a]);
        Ok(self.push(value, Op::Sum(a), g))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(NumericsError::InvalidArgument(format!(
                "id {bad} out of range for table with {} rows",
                t.rows()
            )));
        }
        let parts: Vec<&[T]> = ids.iter().map(|&i| t.row(i)).collect();
        let value = Matrix::raw(ids.len(), t.cols(), parts.concat());
        let g = self.grad_of(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    /// Mean softmax cross-entropy over rows that carry a target.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var, NumericsError> {
        let l = self.value(logits);
        if targets.len() != l.rows() {
            return Err(NumericsError::InvalidArgument(format!(
                "{} targets for {} logit rows",
                targets.len(),
                l.rows()
            )));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(NumericsError::InvalidArgument(
                "cross entropy needs at least one target".into(),
            ));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= l.cols()) {
            return Err(NumericsError::InvalidArgument(format!(
                "target {bad} out of range for {} classes",
                l.cols()
            )));
        }
        let probs = l.softmax_rows();
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = l.row(r);
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                total += lse - row[t];
            }
        }
        let loss = total / cast::<T>(count as f64);
        let value = Matrix::checked(1, 1, vec![loss], "cross_entropy")?;
        let g = self.grad_of(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            g,
        ))
    }

    /// Reverse pass from a `1×1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if self.shape(loss) != (1, 1) {
            return Err(NumericsError::shape("backward", (1, 1), self.shape(loss)));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        let mut visited = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(up) = grads[i].take() else { continue };
            visited.push(i);
            for (var, g) in self.pullback(node, &up)? {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign_unchecked(&g),
                    slot => *slot = Some(g),
                }
            }
            grads[i] = Some(up);
        }
        Ok(Gradients { grads, visited })
    }

    fn pullback(
        &self,
        node: &Node<T>,
        up: &Matrix<T>,
    ) -> Result<Vec<(Var, Matrix<T>)>, NumericsError> {
        let v = |x: Var| self.value(x);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => vec![
                (*a, up.matmul(&v(*b).transpose())?),
                (*b, v(*a).transpose().matmul(up)?),
            ],
            Op::Add(a, b) => vec![(*a, up.clone()), (*b, up.clone())],
            Op::AddRow(a, b) => vec![(*a, up.clone()), (*b, up.sum_rows())],
            Op::Scale(a, s) => vec![(*a, up.scale(*s)?)],
            Op::Transpose(a) => vec![(*a, up.transpose())],
            Op::Softmax(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: T = y.row(r).iter().zip(up.row(r)).map(|(p, g)| *p * *g).sum();
                    for c in 0..y.cols() {
                        dx.data_mut()[r * y.cols() + c] = y.get(r, c) * (up.get(r, c) - dot);
                    }
                }
                vec![(*a, dx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let g = v(*gamma);
                let (rows, d) = xhat.shape();
                let width = cast::<T>(d as f64);
                let dgamma = up.hadamard(xhat)?.sum_rows();
                let dbeta = up.sum_rows();
                let mut dx = Matrix::zeros(rows, d);
                for r in 0..rows {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for c in 0..d {
                        let dh = up.get(r, c) * g.get(0, c);
                        s1 += dh;
                        s2 += dh * xhat.get(r, c);
                    }
                    for c in 0..d {
                        let dh = up.get(r, c) * g.get(0, c);
                        dx.data_mut()[r * d + c] =
                            inv_std[r] / width * (width * dh - s1 - xhat.get(r, c) * s2);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Gelu(a) => {
                let x = v(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(up.data())
                    .map(|(&xi, &gi)| super::matrix::gelu_grad(xi) * gi)
                    .collect();
                vec![(
                    *a,
                    Matrix::checked(x.rows(), x.cols(), data, "gelu.backward")?,
                )]
            }
            Op::ConcatCols(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut start = 0;
                for p in parts {
                    let w = v(*p).cols();
                    out.push((*p, up.slice_cols(start, w)));
                    start += w;
                }
                out
            }
            Op::ConcatRows(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut start = 0;
                for p in parts {
                    let h = v(*p).rows();
                    out.push((*p, up.slice_rows(start, h)));
                    start += h;
                }
                out
            }
            Op::SelectRow(a, row) => {
                let (r, c) = v(*a).shape();
                let mut g = Matrix::zeros(r, c);
                g.data_mut()[row * c..(row + 1) * c].copy_from_slice(up.row(0));
                vec![(*a, g)]
            }
            Op::Sum(a) => {
                let (r, c) = v(*a).shape();
                vec![(*a, Matrix::filled(r, c, up.get(0, 0)))]
            }
            Op::Gather { table, ids } => {
                let (r, c) = v(*table).shape();
                let mut g = Matrix::zeros(r, c);
                for (k, &id) in ids.iter().enumerate() {
                    let dst = &mut g.data_mut()[id * c..(id + 1) * c];
                    for (d, s) in dst.iter_mut().zip(up.row(k)) {
                        *d += *s;
                    }
                }
                vec![(*table, g)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let count = cast::<T>(targets.iter().flatten().count() as f64);
                let scale = up.get(0, 0) / count;
                let (r, c) = probs.shape();
                let mut g = Matrix::zeros(r, c);
                for (row, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for col in 0..c {
                            let onehot = if col == t { T::one() } else { T::zero() };
                            g.data_mut()[row * c + col] = (probs.get(row, col) - onehot) * scale;
                        }
                    }
                }
                vec![(*logits, g)]
            }
        })
    }
}
