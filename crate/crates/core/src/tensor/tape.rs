//! Reverse-mode tape over [`Matrix`] values.
//!
//! Leaves are either constants (borrowed weights, fixed noise) or free variables.
//! Only free leaves and nodes computed from them carry gradients; constants never
//! allocate gradient storage.

use std::borrow::Cow;

use super::matrix::{
    argmax_excluding, binary, cosine_from_parts, dot_norms, matmul, matmul_at, matmul_bt,
    shape_str, sigmoid, softmax_in_place, unary, Binary, Matrix, Unary,
};
use crate::error::{Error, Result};
use crate::scalar::{max, sum, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Binary(Var, Var, Binary),
    AddRow(Var, Var),
    Unary(Var, Unary<T>),
    Affine(Var, T, T),
    ClampMin(Var, T),
    SoftmaxRows(Var),
    Row(Var, usize),
    GatherRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    MaskCols(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    RowMax(Var, Vec<usize>),
    CosineRows(Var, Var),
    CrossEntropy(Var, Vec<usize>),
}

struct Node<'w, T: Scalar> {
    value: Cow<'w, Matrix<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. Operands are always recorded before their results, so the
/// node order is a topological order.
pub struct Tape<'w, T: Scalar> {
    nodes: Vec<Node<'w, T>>,
}

impl<'w, T: Scalar> Default for Tape<'w, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'w, T: Scalar> Tape<'w, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'w, Matrix<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Matrix<T>, op: Op<T>, operands: &[Var]) -> Var {
        let needs_grad = operands.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    /// Borrowed constant, e.g. a frozen weight matrix.
    pub fn constant(&mut self, value: &'w Matrix<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, value: Matrix<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// Free variable: gradients are accumulated for it.
    pub fn free(&mut self, value: Matrix<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let out = binary(self.value(a), self.value(b), op)?;
        Ok(self.derived(out, Op::Binary(a, b, op), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::shape("add_row", av.shape_string(), rv.shape_string()));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o = *o + b;
            }
        }
        Ok(self.derived(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn unary(&mut self, a: Var, op: Unary<T>) -> Result<Var> {
        let out = unary(self.value(a), op)?;
        Ok(self.derived(out, Op::Unary(a, op), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.derived(out, Op::Unary(a, Unary::Sigmoid), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::tanh);
        self.derived(out, Op::Unary(a, Unary::Tanh), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| max(v, T::zero()));
        self.derived(out, Op::Unary(a, Unary::Relu), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::exp);
        self.derived(out, Op::Unary(a, Unary::Exp), &[a])
    }

    /// Natural log; errors on non-positive entries.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn powf(&mut self, a: Var, p: T) -> Var {
        let out = self.value(a).map(|v| v.powf(p));
        self.derived(out, Op::Unary(a, Unary::Pow(p)), &[a])
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let out = self.value(a).map(|v| scale * v + shift);
        self.derived(out, Op::Affine(a, scale, shift), &[a])
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        let out = self.value(a).map(|v| max(v, floor));
        self.derived(out, Op::ClampMin(a, floor), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.derived(out, Op::SoftmaxRows(a), &[a])
    }

    /// Row `r` of `a` as a `1 x cols` matrix.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let av = self.value(a);
        if r >= av.rows() {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: r,
                width: av.rows(),
            });
        }
        let out = Matrix::row_vector(av.row(r).to_vec());
        Ok(self.derived(out, Op::Row(a, r), &[a]))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let out = self.value(a).gather_rows(&idx)?;
        Ok(self.derived(out, Op::GatherRows(a, idx), &[a]))
    }

    pub fn select_cols(&mut self, a: Var, cols: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if let Some(&c) = cols.iter().find(|&&c| c >= av.cols()) {
            return Err(Error::IndexOutOfRange {
                what: "select columns",
                index: c,
                width: av.cols(),
            });
        }
        let mut out = Matrix::zeros(av.rows(), cols.len());
        for r in 0..av.rows() {
            let src = av.row(r);
            for (o, &c) in out.row_mut(r).iter_mut().zip(&cols) {
                *o = src[c];
            }
        }
        Ok(self.derived(out, Op::SelectCols(a, cols), &[a]))
    }

    /// Overwrites the given columns with `fill`; no gradient flows through them.
    pub fn mask_cols(&mut self, a: Var, cols: Vec<usize>, fill: T) -> Result<Var> {
        let mut out = self.value(a).clone();
        if let Some(&c) = cols.iter().find(|&&c| c >= out.cols()) {
            return Err(Error::IndexOutOfRange {
                what: "mask columns",
                index: c,
                width: out.cols(),
            });
        }
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for &c in &cols {
                row[c] = fill;
            }
        }
        Ok(self.derived(out, Op::MaskCols(a, cols), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.derived(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = T::from_usize(av.data().len()).expect("length fits scalar");
        let out = Matrix::scalar(av.sum() / n);
        self.derived(out, Op::Mean(a), &[a])
    }

    /// Per-row maximum as a `rows x 1` column; ties resolve to the lowest column.
    pub fn row_max(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut arg = Vec::with_capacity(av.rows());
        let mut out = Matrix::zeros(av.rows(), 1);
        for r in 0..av.rows() {
            let i = argmax_excluding(av.row(r), &[]).unwrap_or(0);
            arg.push(i);
            out.set(r, 0, av.row(r)[i]);
        }
        self.derived(out, Op::RowMax(a, arg), &[a])
    }

    /// `out[t][v] = cos(a_t, b_v)` for `a: T x d`, `b: V x d`. Zero-norm rows of `b`
    /// yield 0; a zero-norm row of `a` is an error.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::shape("cosine_rows", av.shape_string(), bv.shape_string()));
        }
        let mut out = Matrix::zeros(av.rows(), bv.rows());
        for t in 0..av.rows() {
            let at = av.row(t);
            if at.iter().all(|&x| x == T::zero()) {
                return Err(Error::Degenerate(format!("zero-norm row {t} in cosine")));
            }
            for v in 0..bv.rows() {
                let (dot, na, nb) = dot_norms(at, bv.row(v));
                if nb > T::zero() {
                    out.set(t, v, cosine_from_parts(dot, na, nb));
                }
            }
        }
        Ok(self.derived(out, Op::CosineRows(a, b), &[a, b]))
    }

    /// Summed softmax cross-entropy of each row of `logits` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return Err(Error::shape(
                "cross_entropy",
                lv.shape_string(),
                format!("{} targets", targets.len()),
            ));
        }
        let mut total = T::zero();
        for (r, &tgt) in targets.iter().enumerate() {
            let row = lv.row(r);
            if tgt >= row.len() {
                return Err(Error::IndexOutOfRange {
                    what: "cross-entropy target",
                    index: tgt,
                    width: row.len(),
                });
            }
            let max = row.iter().fold(T::neg_infinity(), |m, &v| max(m, v));
            let lse = max + sum(row.iter().map(|&v| (v - max).exp())).ln();
            total = total + lse - row[tgt];
        }
        Ok(self.derived(Matrix::scalar(total), Op::CrossEntropy(logits, targets), &[logits]))
    }

    /// Reverse pass from the 1x1 node `output`. The tape itself is not modified, so
    /// repeated calls yield identical gradients.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out_shape = self.value(output).shape();
        if out_shape != (1, 1) {
            return Err(Error::shape("backward", shape_str(1, 1), shape_str(out_shape.0, out_shape.1)));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Matrix::scalar(T::one()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, contribution: Matrix<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, node: &Node<'w, T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let y = node.value.as_ref();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, matmul_bt(g, self.value(*b)));
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, matmul_at(self.value(*a), g));
                }
            }
            Op::Binary(a, b, op) => match op {
                Binary::Add => {
                    self.accumulate(grads, *a, g.clone());
                    self.accumulate(grads, *b, g.clone());
                }
                Binary::Sub => {
                    self.accumulate(grads, *a, g.clone());
                    self.accumulate(grads, *b, g.scale(-T::one()));
                }
                Binary::Mul => {
                    if self.needs_grad(*a) {
                        let ga = g.zip_map(self.value(*b), "mul", |x, y| x * y).expect("shape");
                        self.accumulate(grads, *a, ga);
                    }
                    if self.needs_grad(*b) {
                        let gb = g.zip_map(self.value(*a), "mul", |x, y| x * y).expect("shape");
                        self.accumulate(grads, *b, gb);
                    }
                }
            },
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs_grad(*row) {
                    let mut col_sums = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (s, &v) in col_sums.data_mut().iter_mut().zip(g.row(r)) {
                            *s = *s + v;
                        }
                    }
                    self.accumulate(grads, *row, col_sums);
                }
            }
            Op::Unary(a, op) => {
                let x = self.value(*a);
                let one = T::one();
                let local = match *op {
                    Unary::Sigmoid => g.zip_map(y, "sigmoid", |g, y| g * y * (one - y)),
                    Unary::Tanh => g.zip_map(y, "tanh", |g, y| g * (one - y * y)),
                    Unary::Relu => g.zip_map(x, "relu", |g, x| if x > T::zero() { g } else { T::zero() }),
                    Unary::Log => g.zip_map(x, "log", |g, x| g / x),
                    Unary::Exp => g.zip_map(y, "exp", |g, y| g * y),
                    Unary::Pow(p) => g.zip_map(x, "pow", |g, x| {
                        if p == T::zero() {
                            T::zero()
                        } else {
                            g * p * x.powf(p - one)
                        }
                    }),
                }
                .expect("gradient shape matches value");
                self.accumulate(grads, *a, local);
            }
            Op::Affine(a, scale, _) => self.accumulate(grads, *a, g.scale(*scale)),
            Op::ClampMin(a, floor) => {
                let local = g
                    .zip_map(self.value(*a), "clamp_min", |g, x| if x > *floor { g } else { T::zero() })
                    .expect("shape");
                self.accumulate(grads, *a, local);
            }
            Op::SoftmaxRows(a) => {
                let mut local = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = sum(yr.iter().zip(gr).map(|(&p, &q)| p * q));
                    for ((o, &p), &q) in local.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot);
                    }
                }
                self.accumulate(grads, *a, local);
            }
            Op::Row(a, r) => {
                let src = self.value(*a);
                let mut local = Matrix::zeros(src.rows(), src.cols());
                local.row_mut(*r).copy_from_slice(g.data());
                self.accumulate(grads, *a, local);
            }
            Op::GatherRows(a, idx) => {
                let src = self.value(*a);
                let mut local = Matrix::zeros(src.rows(), src.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &v) in local.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o = *o + v;
                    }
                }
                self.accumulate(grads, *a, local);
            }
            Op::SelectCols(a, cols) => {
                let src = self.value(*a);
                let mut local = Matrix::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    let gr = g.row(r);
                    let lr = local.row_mut(r);
                    for (k, &c) in cols.iter().enumerate() {
                        lr[c] = lr[c] + gr[k];
                    }
                }
                self.accumulate(grads, *a, local);
            }
            Op::MaskCols(a, cols) => {
                let mut local = g.clone();
                for r in 0..local.rows() {
                    let lr = local.row_mut(r);
                    for &c in cols {
                        lr[c] = T::zero();
                    }
                }
                self.accumulate(grads, *a, local);
            }
            Op::Sum(a) => {
                let src = self.value(*a);
                self.accumulate(grads, *a, Matrix::filled(src.rows(), src.cols(), g.data()[0]));
            }
            Op::Mean(a) => {
                let src = self.value(*a);
                let n = T::from_usize(src.data().len()).expect("length fits scalar");
                self.accumulate(grads, *a, Matrix::filled(src.rows(), src.cols(), g.data()[0] / n));
            }
            Op::RowMax(a, arg) => {
                let src = self.value(*a);
                let mut local = Matrix::zeros(src.rows(), src.cols());
                for (r, &c) in arg.iter().enumerate() {
                    local.set(r, c, g.get(r, 0));
                }
                self.accumulate(grads, *a, local);
            }
            Op::CosineRows(a, b) => self.cosine_backward(*a, *b, y, g, grads),
            Op::CrossEntropy(logits, targets) => {
                let lv = self.value(*logits);
                let scale = g.data()[0];
                let mut local = lv.clone();
                for (r, &tgt) in targets.iter().enumerate() {
                    let row = local.row_mut(r);
                    softmax_in_place(row);
                    row[tgt] = row[tgt] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                self.accumulate(grads, *logits, local);
            }
        }
    }

    fn cosine_backward(&self, a: Var, b: Var, cos: &Matrix<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let (av, bv) = (self.value(a), self.value(b));
        let norms = |m: &Matrix<T>| -> Vec<T> {
            (0..m.rows())
                .map(|r| sum(m.row(r).iter().map(|&x| x * x)).sqrt())
                .collect()
        };
        let (na, nb) = (norms(av), norms(bv));
        let d = av.cols();
        // d cos(x, y) / dx = y / (|x||y|) - cos · x / |x|²
        let mut ga = Matrix::zeros(av.rows(), d);
        let mut gb = Matrix::zeros(bv.rows(), d);
        for t in 0..av.rows() {
            for v in 0..bv.rows() {
                if nb[v] == T::zero() {
                    continue;
                }
                let (gtv, c) = (g.get(t, v), cos.get(t, v));
                if gtv == T::zero() {
                    continue;
                }
                let inv = T::one() / (na[t] * nb[v]);
                let (xt, yv) = (av.row(t), bv.row(v));
                if self.needs_grad(a) {
                    let row = ga.row_mut(t);
                    for k in 0..d {
                        row[k] = row[k] + gtv * (yv[k] * inv - c * xt[k] / (na[t] * na[t]));
                    }
                }
                if self.needs_grad(b) {
                    let row = gb.row_mut(v);
                    for k in 0..d {
                        row[k] = row[k] + gtv * (xt[k] * inv - c * yv[k] / (nb[v] * nb[v]));
                    }
                }
            }
        }
        self.accumulate(grads, a, ga);
        self.accumulate(grads, b, gb);
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` does not depend on a free leaf or does
    /// not influence the output.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_dead_region_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.free(Matrix::scalar(-2.0));
        let y = tape.relu(x);
        assert_eq!(tape.scalar(y), 0.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn constants_get_no_gradient_storage() {
        let w = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.free(Matrix::row_vector(vec![1.0, -1.0]));
        let wv = tape.constant(&w);
        let y = tape.matmul(x, wv).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(wv).is_none());
        // d/dx sum(x W) = row sums of W
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::<f64>::new();
        let x = tape.free(Matrix::from_vec(2, 3, vec![0.1, -0.4, 2.0, 0.7, 0.3, -1.1]).unwrap());
        let s = tape.softmax_rows(x);
        let t = tape.tanh(s);
        let o = tape.mean(t);
        let g1 = tape.backward(o).unwrap();
        let g2 = tape.backward(o).unwrap();
        assert_eq!(g1.get(x), g2.get(x));
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.free(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn masked_columns_block_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.free(Matrix::row_vector(vec![1.0, 2.0, 3.0]));
        let m = tape.mask_cols(x, vec![0], f64::NEG_INFINITY).unwrap();
        let p = tape.softmax_rows(m);
        assert_eq!(tape.value(p).get(0, 0), 0.0);
        let c = tape.select_cols(p, vec![2]).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().get(0, 0), 0.0);
    }
}
