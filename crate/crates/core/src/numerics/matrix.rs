use rand::Rng;

use super::NumericsError;
use crate::scalar::{cast, Scalar};

/// Dense row-major matrix. Entries are always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Self::checked(rows, cols, data, "construction")
    }

    /// Builds from computed data, rejecting overflow into NaN/Inf.
    pub(crate) fn checked(
        rows: usize,
        cols: usize,
        data: Vec<T>,
        op: &'static str,
    ) -> Result<Self, NumericsError> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite {
                op,
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Caller guarantees length and finiteness.
    pub(crate) fn raw(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::raw(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        Self::raw(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    /// Panics if `f` yields a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = f(r, c);
                assert!(v.is_finite(), "from_fn produced a non-finite entry");
                data.push(v);
            }
        }
        Self::raw(rows, cols, data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(NumericsError::Ragged);
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn from_f64_rows(rows: &[&[f64]]) -> Result<Self, NumericsError> {
        let rows: Vec<Vec<T>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| cast(v)).collect())
            .collect();
        Self::from_rows(&rows)
    }

    /// Entries drawn from uniform(-bound, bound).
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| cast(rng.random_range(-bound..=bound)))
            .collect();
        Self::raw(rows, cols, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Overwrites one entry. Non-finite values are rejected.
    pub fn set(&mut self, r: usize, c: usize, v: T) -> Result<(), NumericsError> {
        if !v.is_finite() {
            return Err(NumericsError::NonFinite {
                op: "set",
                row: r,
                col: c,
            });
        }
        self.data[r * self.cols + c] = v;
        Ok(())
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix::raw(
            self.rows,
            self.cols,
            self.data
                .iter()
                .map(|&v| cast(crate::scalar::to_f64(v)))
                .collect(),
        )
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<(), NumericsError> {
        if self.shape() != other.shape() {
            return Err(NumericsError::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::shape("matmul", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == T::zero() {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::checked(m, n, out, "matmul")
    }

    pub fn transpose(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.get(r, c));
            }
        }
        Self::raw(self.cols, self.rows, out)
    }

    pub fn add(&self, other: &Self) -> Result<Self, NumericsError> {
        self.same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a + *b)
            .collect();
        Self::checked(self.rows, self.cols, data, "add")
    }

    pub fn sub(&self, other: &Self) -> Result<Self, NumericsError> {
        self.same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a - *b)
            .collect();
        Self::checked(self.rows, self.cols, data, "sub")
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self, NumericsError> {
        self.same_shape(other, "hadamard")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a * *b)
            .collect();
        Self::checked(self.rows, self.cols, data, "hadamard")
    }

    pub fn scale(&self, s: T) -> Result<Self, NumericsError> {
        let data = self.data.iter().map(|v| *v * s).collect();
        Self::checked(self.rows, self.cols, data, "scale")
    }

    /// Adds a `1×cols` row to every row.
    pub fn add_row(&self, bias: &Self) -> Result<Self, NumericsError> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(NumericsError::shape("add_row", self.shape(), bias.shape()));
        }
        let data = self
            .data
            .chunks(self.cols.max(1))
            .flat_map(|row| row.iter().zip(&bias.data).map(|(a, b)| *a + *b))
            .take(self.data.len())
            .collect();
        Self::checked(self.rows, self.cols, data, "add_row")
    }

    /// Column sums as a `1×cols` row.
    pub fn sum_rows(&self) -> Self {
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += *v;
            }
        }
        Self::raw(1, self.cols, out)
    }

    pub fn linear(&self, w: &Self, bias: &Self) -> Result<Self, NumericsError> {
        self.matmul(w)?.add_row(bias)
    }

    pub fn softmax_rows(&self) -> Self {
        self.softmax_rows_masked(None)
    }

    /// Row softmax with max subtraction. Columns where `key_mask` is false
    /// receive exactly zero weight; a row with every column masked is all zeros.
    pub fn softmax_rows_masked(&self, key_mask: Option<&[bool]>) -> Self {
        if let Some(mask) = key_mask {
            assert_eq!(mask.len(), self.cols, "key mask width");
        }
        let keep = |c: usize| key_mask.is_none_or(|m| m[c]);
        let mut out = vec![T::zero(); self.data.len()];
        for r in 0..self.rows {
            let row = self.row(r);
            let max = (0..self.cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(T::neg_infinity(), T::max);
            if !max.is_finite() {
                continue;
            }
            let dst = &mut out[r * self.cols..(r + 1) * self.cols];
            let mut total = T::zero();
            for c in 0..self.cols {
                if keep(c) {
                    let e = (row[c] - max).exp();
                    dst[c] = e;
                    total += e;
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        Self::raw(self.rows, self.cols, out)
    }

    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: T) -> Result<Self, NumericsError> {
        Ok(self.layer_norm_parts(gamma, beta, eps)?.0)
    }

    /// Returns (output, normalized input, per-row 1/std).
    pub(crate) fn layer_norm_parts(
        &self,
        gamma: &Self,
        beta: &Self,
        eps: T,
    ) -> Result<(Self, Self, Vec<T>), NumericsError> {
        let d = self.cols;
        if gamma.shape() != (1, d) {
            return Err(NumericsError::shape(
                "layer_norm.gamma",
                self.shape(),
                gamma.shape(),
            ));
        }
        if beta.shape() != (1, d) {
            return Err(NumericsError::shape(
                "layer_norm.beta",
                self.shape(),
                beta.shape(),
            ));
        }
        if d == 0 {
            return Err(NumericsError::InvalidArgument(
                "layer_norm needs d >= 1".into(),
            ));
        }
        if eps <= T::zero() {
            return Err(NumericsError::InvalidArgument(
                "layer_norm eps must be > 0".into(),
            ));
        }
        let width = cast::<T>(d as f64);
        let mut xhat = Vec::with_capacity(self.data.len());
        let mut out = Vec::with_capacity(self.data.len());
        let mut inv_std = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            let mean = row.iter().copied().sum::<T>() / width;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / width;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat.push(h);
                out.push(h * gamma.data[c] + beta.data[c]);
            }
        }
        Ok((
            Self::checked(self.rows, d, out, "layer_norm")?,
            Self::raw(self.rows, d, xhat),
            inv_std,
        ))
    }

    /// Tanh-form GELU.
    pub fn gelu(&self) -> Self {
        Self::raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| gelu(x)).collect(),
        )
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self, NumericsError> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(NumericsError::shape("concat_cols", (rows, 0), bad.shape()));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self::raw(rows, cols, data))
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self, NumericsError> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if let Some(bad) = parts.iter().find(|p| p.cols != cols) {
            return Err(NumericsError::shape("concat_rows", (0, cols), bad.shape()));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Self::raw(rows, cols, data))
    }

    /// Columns `start..start+width` as a new matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols);
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Self::raw(self.rows, width, data)
    }

    pub fn slice_rows(&self, start: usize, count: usize) -> Self {
        assert!(start + count <= self.rows);
        Self::raw(
            count,
            self.cols,
            self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        )
    }

    pub(crate) fn add_assign_unchecked(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = cast::<T>(0.5);
    let u = cast::<T>(GELU_C) * (x + cast::<T>(GELU_K) * x * x * x);
    half * x * (T::one() + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = cast::<T>(0.5);
    let c = cast::<T>(GELU_C);
    let k = cast::<T>(GELU_K);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + cast::<T>(3.0) * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type M = Matrix<f64>;

    fn naive(a: &M, b: &M) -> M {
        M::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|p| a.get(i, p) * b.get(p, j)).sum()
        })
    }

    #[test]
    fn matmul_identity() {
        let a = M::from_f64_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(M::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = M::from_f64_rows(&[&[1.0, 2.0]]).unwrap();
        let b = M::from_f64_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = M::uniform(5, 7, 1.0, &mut rng);
        let b = M::uniform(7, 3, 1.0, &mut rng);
        assert!(a.matmul(&b).unwrap().max_abs_diff(&naive(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_reports_both() {
        let err = M::zeros(2, 3).matmul(&M::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn construction_rejects_nan() {
        assert!(M::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(M::new(1, 2, vec![1.0, f64::INFINITY]).is_err());
        assert!(M::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = M::from_f64_rows(&[&[0.0, 0.0]]).unwrap().softmax_rows();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = M::from_f64_rows(&[&[1000.0, 1000.0]])
            .unwrap()
            .softmax_rows();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = M::from_f64_rows(&[&[0.0, 3f64.ln()]])
            .unwrap()
            .softmax_rows();
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-15);
        assert!(M::zeros(0, 0).softmax_rows().is_empty());
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let m = M::from_f64_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let s = m.softmax_rows_masked(Some(&[true, false, true]));
        assert_eq!(s.get(0, 1), 0.0);
        assert!((s.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let g = M::filled(1, 3, 1.0);
        let b = M::zeros(1, 3);
        let y = M::filled(1, 3, 1.0).layer_norm(&g, &b, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let g2 = M::filled(1, 2, 1.0);
        let b2 = M::zeros(1, 2);
        let y = M::from_f64_rows(&[&[0.0, 2.0]])
            .unwrap()
            .layer_norm(&g2, &b2, 1e-12)
            .unwrap();
        assert!((y.get(0, 0) + 1.0).abs() < 1e-9 && (y.get(0, 1) - 1.0).abs() < 1e-9);

        let beta = M::from_f64_rows(&[&[5.0, 6.0, 7.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = M::uniform(4, 3, 2.0, &mut rng);
        let y = x.layer_norm(&M::zeros(1, 3), &beta, 1e-5).unwrap();
        for r in 0..4 {
            assert_eq!(y.row(r), beta.row(0));
        }
    }

    #[test]
    fn layer_norm_rejects_width_mismatch() {
        let x = M::zeros(2, 3);
        assert!(x
            .layer_norm(&M::zeros(1, 2), &M::zeros(1, 3), 1e-5)
            .is_err());
        assert!(x
            .layer_norm(&M::zeros(1, 3), &M::zeros(1, 4), 1e-5)
            .is_err());
    }

    #[test]
    fn linear_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = M::uniform(3, 4, 1.0, &mut rng);
        assert_eq!(x.linear(&M::identity(4), &M::zeros(1, 4)).unwrap(), x);
        let bias = M::uniform(1, 2, 1.0, &mut rng);
        let y = M::zeros(3, 4)
            .linear(&M::uniform(4, 2, 1.0, &mut rng), &bias)
            .unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), bias.row(0));
        }
        let w = M::uniform(4, 2, 1.0, &mut rng);
        let via = x.linear(&w, &bias).unwrap();
        let oracle = M::from_fn(3, 2, |i, j| naive(&x, &w).get(i, j) + bias.get(0, j));
        assert!(via.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
