use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::{max, min, sum, Scalar};

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            let start = r * self.cols;
            writeln!(f, "  {:?}", &self.data[start..start + self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

/// Shape as "RxC" for error messages.
pub(crate) fn shape_str(rows: usize, cols: usize) -> String {
    format!("{rows}x{cols}")
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                shape_str(rows, cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "from_rows",
                    format!("row 0 has {cols} columns"),
                    format!("row {i} has {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        Matrix {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(value: T) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// `tokens.len() x width` matrix of one-hot rows.
    pub fn one_hot(tokens: &[usize], width: usize) -> Result<Self> {
        let mut m = Self::zeros(tokens.len(), width);
        for (r, &tok) in tokens.iter().enumerate() {
            if tok >= width {
                return Err(Error::IndexOutOfRange {
                    what: "one-hot width",
                    index: tok,
                    width,
                });
            }
            m.data[r * width + tok] = T::one();
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub(crate) fn shape_string(&self) -> String {
        shape_str(self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        assert!(r < self.rows && c < self.cols, "index ({r},{c}) out of bounds");
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: T) {
        assert!(r < self.rows && c < self.cols, "index ({r},{c}) out of bounds");
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Errors with a `NonFinite` naming `what` if any entry is NaN or infinite.
    pub fn validate(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{what}: entry ({}, {}) = {}",
                i / self.cols.max(1),
                i % self.cols.max(1),
                self.data[i]
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape_string(), other.shape_string()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += other`, shapes must agree.
    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    pub fn sum(&self) -> T {
        sum(self.data.iter().copied())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| max(m, x.abs()))
    }

    /// Sum of squares of all entries.
    pub fn norm_sq(&self) -> T {
        sum(self.data.iter().map(|&x| x * x))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::IndexOutOfRange {
                    what: "gather rows",
                    index: i,
                    width: self.rows,
                });
            }
            out.extend_from_slice(self.row(i));
        }
        Ok(Matrix {
            rows: idx.len(),
            cols: self.cols,
            data: out,
        })
    }

    /// Converts every entry to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }
}

/// `a · b`. Terms with a zero left factor are skipped, which leaves results bitwise
/// unchanged for finite right operands and makes one-hot products exact row copies.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape_string(), b.shape_string()));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let a_row = &a.data[i * k..(i + 1) * k];
        let out_row = &mut out[i * m..(i + 1) * m];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// `a · bᵀ` without materializing the transpose.
pub(crate) fn matmul_bt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    debug_assert_eq!(a.cols, b.cols);
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b.data[j * k..(j + 1) * k];
            out[i * m + j] = sum(a_row.iter().zip(b_row).map(|(&x, &y)| x * y));
        }
    }
    Matrix {
        rows: n,
        cols: m,
        data: out,
    }
}

/// `aᵀ · b` without materializing the transpose.
pub(crate) fn matmul_at<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    debug_assert_eq!(a.rows, b.rows);
    let (k, n, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![T::zero(); n * m];
    for p in 0..k {
        let a_row = &a.data[p * n..(p + 1) * n];
        let b_row = &b.data[p * m..(p + 1) * m];
        for (i, &aval) in a_row.iter().enumerate() {
            if aval == T::zero() {
                continue;
            }
            let out_row = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aval * bv;
            }
        }
    }
    Matrix {
        rows: n,
        cols: m,
        data: out,
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| max(m, v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        // Masked entries map to exactly 0 without forming `-inf - max`.
        *v = if *v == T::neg_infinity() && max > T::neg_infinity() { T::zero() } else { (*v - max).exp() };
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Cosine similarity of two equally long nonzero vectors.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", a.len(), b.len()));
    }
    let (dot, na, nb) = dot_norms(a, b);
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
    }
    Ok(cosine_from_parts(dot, na, nb))
}

pub(crate) fn dot_norms<T: Scalar>(a: &[T], b: &[T]) -> (T, T, T) {
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    (dot, na, nb)
}

/// `dot / sqrt(|a|²|b|²)`: exactly 1 when `a == b`, because `sqrt(fl(x·x)) == x`.
pub(crate) fn cosine_from_parts<T: Scalar>(dot: T, norm_sq_a: T, norm_sq_b: T) -> T {
    let c = dot / (norm_sq_a * norm_sq_b).sqrt();
    min(max(c, -T::one()), T::one())
}

/// Pointwise nonlinearities and powers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary<T> {
    Sigmoid,
    Tanh,
    Relu,
    Log,
    Exp,
    Pow(T),
}

/// Elementwise binary operators on equal shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Applies `op` to every entry. `Log` rejects non-positive entries.
pub fn unary<T: Scalar>(x: &Matrix<T>, op: Unary<T>) -> Result<Matrix<T>> {
    Ok(match op {
        Unary::Sigmoid => x.map(sigmoid),
        Unary::Tanh => x.map(T::tanh),
        Unary::Relu => x.map(|v| max(v, T::zero())),
        Unary::Exp => x.map(T::exp),
        Unary::Pow(p) => x.map(|v| v.powf(p)),
        Unary::Log => {
            if let Some(i) = x.data.iter().position(|&v| !(v > T::zero())) {
                return Err(Error::Domain {
                    op: "log",
                    index: i,
                    value: x.data[i].as_f64(),
                });
            }
            x.map(T::ln)
        }
    })
}

pub fn binary<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, op: Binary) -> Result<Matrix<T>> {
    match op {
        Binary::Add => a.zip_map(b, "add", |x, y| x + y),
        Binary::Sub => a.zip_map(b, "sub", |x, y| x - y),
        Binary::Mul => a.zip_map(b, "mul", |x, y| x * y),
    }
}

/// Index of the largest entry, lowest index on ties; `skip` columns are never chosen.
pub(crate) fn argmax_excluding<T: Scalar>(row: &[T], skip: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in row.iter().enumerate() {
        if skip.contains(&i) || v.is_nan() {
            continue;
        }
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_product_is_noop() {
        let a = m(3, 2, &[1.0, -2.0, 3.5, 0.25, 7.0, 1e-3]);
        assert_eq!(matmul(&Matrix::identity(3), &a).unwrap(), a);
    }

    #[test]
    fn one_hot_row_selects_bitwise() {
        let emb = m(3, 3, &[0.1, 0.2, 0.3, -1.7, 2.9, 1e-17, 4.0, 5.0, 6.0]);
        let x = m(1, 3, &[0.0, 1.0, 0.0]);
        let out = matmul(&x, &emb).unwrap();
        for (a, b) in out.data().iter().zip(emb.row(1)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::<f64>::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = m(4, 3, &[1.0, 0.5, -1.0, 2.0, 0.0, 1.0, -3.0, 1.0, 1.0, 0.1, 0.2, 0.3]);
        assert_eq!(matmul_bt(&a, &b), matmul(&a, &b.transpose()).unwrap());
        let c = m(2, 2, &[1.0, -1.0, 0.5, 2.0]);
        assert_eq!(matmul_at(&a, &c), matmul(&a.transpose(), &c).unwrap());
    }

    #[test]
    fn scalar_nonlinearities() {
        let x = m(1, 3, &[0.0, 1.0, -2.0]);
        assert_eq!(unary(&x, Unary::Sigmoid).unwrap().get(0, 0), 0.5);
        assert!((unary(&x, Unary::Tanh).unwrap().get(0, 1) - 0.76159).abs() < 1e-5);
        assert_eq!(unary(&x, Unary::Relu).unwrap().get(0, 2), 0.0);
    }

    #[test]
    fn log_of_nonpositive_reports_index() {
        let x = m(1, 3, &[1.0, 2.0, -0.5]);
        match unary(&x, Unary::Log) {
            Err(Error::Domain { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&m(1, 3, &[0.0, 0.0, 0.0]));
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&m(1, 3, &[1.0, 0.0, 0.0]));
        let expected = [0.5761, 0.2119, 0.2119];
        for (v, e) in s.data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-4);
        }
        let shifted = softmax_rows(&m(1, 3, &[123.0, 123.0, 123.0]));
        assert_eq!(shifted, softmax_rows(&m(1, 3, &[0.0, 0.0, 0.0])));
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 4.0];
        assert_eq!(cosine(&v, &v).unwrap(), 1.0);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert_eq!(cosine(&v, &neg).unwrap(), -1.0);
        assert!((cosine::<f64>(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-5);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 1.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn argmax_ties_break_low_and_skip() {
        assert_eq!(argmax_excluding(&[1.0, 3.0, 3.0, 2.0], &[]), Some(1));
        assert_eq!(argmax_excluding(&[9.0, 3.0, 3.0], &[0]), Some(1));
    }
}
