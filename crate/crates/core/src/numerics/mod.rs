//! Dense row-major `f64` kernels shared by the reliability, fusion and
//! gradient code.
//!
//! Matrices here are small (at most a few thousand entries), so every kernel
//! is a straightforward loop nest. The eigen-solver is cyclic Jacobi and the
//! QR factorization is Householder, both chosen for determinism over speed.

mod dd;
mod dump;

pub use dd::{Dd, Real};
pub use dump::{read_tensor, write_tensor, TensorHeader};

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("Matrix::from_rows", "ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// Copies columns `start..end` into a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_fn(self.rows, end - start, |i, j| self[(i, start + j)])
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "Matrix::sub", |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "Matrix::add", |a, b| a + b)
    }

    /// `self += s * other`, shapes must agree.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::contract(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::contract(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    Ok(matmul_unchecked(a, b))
}

/// `a · b` for callers that have already established `a.cols == b.rows`.
pub(crate) fn matmul_unchecked(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.rows);
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (p, &aip) in a.row(i).iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bpj) in out_row.iter_mut().zip(b.row(p)) {
                *o += aip * bpj;
            }
        }
    }
    out
}

/// `aᵀ · b` without materializing the transpose.
pub(crate) fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.rows, b.rows);
    let mut out = Matrix::zeros(a.cols, b.cols);
    for p in 0..a.rows {
        let b_row = b.row(p);
        for (i, &api) in a.row(p).iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bpj) in out_row.iter_mut().zip(b_row) {
                *o += api * bpj;
            }
        }
    }
    out
}

/// `a · bᵀ` without materializing the transpose.
pub(crate) fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.cols);
    Matrix::from_fn(a.rows, b.rows, |i, j| dot(a.row(i), b.row(j)))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable softmax of a single slice, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    out
}

/// Gradient of a row-wise softmax: given the softmax output `y` and the
/// upstream gradient `dy`, returns `dx = y ⊙ (dy − ⟨dy, y⟩)` per row.
pub(crate) fn softmax_rows_backward(y: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(y.rows, y.cols);
    for i in 0..y.rows {
        let yr = y.row(i);
        let dyr = dy.row(i);
        let inner = dot(yr, dyr);
        for ((d, &yv), &g) in dx.row_mut(i).iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - inner);
        }
    }
    dx
}

pub fn row_l2_norms(a: &Matrix) -> Vec<f64> {
    (0..a.rows).map(|i| l2_norm(a.row(i))).collect()
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// the columns of the second matrix.
pub fn sym_eig(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::contract(
            "sym_eig",
            format!("{}x{} is not square", a.rows, a.cols),
        ));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (a[(i, j)] - a[(j, i)]).abs();
            if d > 1e-10 {
                return Err(Error::contract(
                    "sym_eig",
                    format!("asymmetry {d:e} at ({i}, {j})"),
                ));
            }
        }
    }
    if !a.is_finite() {
        return Err(Error::NonFinite { op: "sym_eig" });
    }

    // Symmetrize exactly so rotations act on a truly symmetric matrix.
    let mut m = Matrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    Ok((values, vectors))
}

/// Thin Q factor of a Householder QR factorization, with the sign convention
/// that the triangular factor has a non-negative diagonal.
pub fn qr_orthonormalize(a: &Matrix) -> Result<Matrix> {
    let (m, n) = (a.rows, a.cols);
    if m < n {
        return Err(Error::contract(
            "qr_orthonormalize",
            format!("{m}x{n} has more columns than rows"),
        ));
    }
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut diag_sign = Vec::with_capacity(n);

    for j in 0..n {
        let x: Vec<f64> = (j..m).map(|i| r[(i, j)]).collect();
        let norm = l2_norm(&x);
        if norm < 1e-12 {
            return Err(Error::degenerate(
                "qr_orthonormalize",
                format!("pivot {norm:e} in column {j}"),
            ));
        }
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let vnorm = l2_norm(&v);
        if vnorm > 0.0 {
            v.iter_mut().for_each(|e| *e /= vnorm);
            for col in j..n {
                let proj: f64 = (j..m).map(|i| v[i - j] * r[(i, col)]).sum();
                for i in j..m {
                    r[(i, col)] -= 2.0 * v[i - j] * proj;
                }
            }
        }
        // After reflection r[(j, j)] == alpha.
        diag_sign.push(if alpha < 0.0 { -1.0 } else { 1.0 });
        reflectors.push(v);
    }

    let mut q = Matrix::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for j in (0..n).rev() {
        let v = &reflectors[j];
        for col in 0..n {
            let proj: f64 = (j..m).map(|i| v[i - j] * q[(i, col)]).sum();
            if proj != 0.0 {
                for i in j..m {
                    q[(i, col)] -= 2.0 * v[i - j] * proj;
                }
            }
        }
    }
    for (j, s) in diag_sign.iter().enumerate() {
        if *s < 0.0 {
            for i in 0..m {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn gram_error(q: &Matrix) -> f64 {
        matmul_tn(q, q)
            .sub(&Matrix::identity(q.cols()))
            .unwrap()
            .frobenius_norm()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = random(3, 4, 1);
        assert_eq!(matmul(&Matrix::identity(3), &a).unwrap(), a);
        let z = matmul(&a, &Matrix::zeros(4, 2)).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::ContractViolation { .. }));
    }

    #[test]
    fn transposed_products_agree_with_matmul() {
        let a = random(5, 3, 2);
        let b = random(5, 4, 3);
        let c = random(4, 3, 4);
        let tn = matmul_tn(&a, &b);
        let ref_tn = matmul(&a.transpose(), &b).unwrap();
        assert!(tn.sub(&ref_tn).unwrap().frobenius_norm() < 1e-14);
        let nt = matmul_nt(&a, &c);
        let ref_nt = matmul(&a, &c.transpose()).unwrap();
        assert!(nt.sub(&ref_nt).unwrap().frobenius_norm() < 1e-14);
    }

    #[test]
    fn softmax_examples() {
        let a = Matrix::from_rows(&[
            vec![2.5, 2.5, 2.5, 2.5],
            vec![3.0f64.ln(), 0.0, 0.0, 0.0],
        ])
        .unwrap();
        let s = softmax_rows(&a);
        for v in s.row(0) {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let single = softmax_rows(&Matrix::zeros(1, 1));
        assert_eq!(single.data(), &[1.0]);

        let pair = softmax_rows(&Matrix::from_rows(&[vec![3.0f64.ln(), 0.0]]).unwrap());
        assert!((pair[(0, 0)] - 0.75).abs() < 1e-15);
        assert!((pair[(0, 1)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let s = softmax_rows(&Matrix::from_rows(&[vec![1000.0, 999.0, -1000.0]]).unwrap());
        assert!(s.is_finite());
        assert!((s.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn row_norm_examples() {
        let a = Matrix::from_rows(&[
            vec![3.0, 4.0, 0.0, 0.0],
            vec![0.0; 4],
            vec![1.0, 1.0, 1.0, 1.0],
        ])
        .unwrap();
        assert_eq!(row_l2_norms(&a), vec![5.0, 0.0, 2.0]);
    }

    #[test]
    fn sym_eig_examples() {
        let (vals, vecs) = sym_eig(&Matrix::diag(&[4.0, 1.0])).unwrap();
        assert_eq!(vals, vec![4.0, 1.0]);
        for j in 0..2 {
            let col = vecs.column(j);
            assert_eq!(col.iter().filter(|v| v.abs() == 1.0).count(), 1);
        }

        let (vals, _) = sym_eig(&Matrix::identity(5)).unwrap();
        assert!(vals.iter().all(|v| *v == 1.0));

        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let (vals, _) = sym_eig(&a).unwrap();
        // x² − 4x + 3 = (x − 3)(x − 1)
        assert!((vals[0] - 3.0).abs() < 1e-14);
        assert!((vals[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sym_eig_rejects_asymmetric() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            sym_eig(&a),
            Err(Error::ContractViolation { .. })
        ));
    }

    #[test]
    fn qr_examples() {
        let q = qr_orthonormalize(&Matrix::diag(&[2.0, 3.0])).unwrap();
        assert!(q.sub(&Matrix::identity(2)).unwrap().frobenius_norm() < 1e-15);

        let a = random(4, 4, 9);
        let q = qr_orthonormalize(&a).unwrap();
        assert!(gram_error(&q) < 1e-10);

        // Orthonormal input is a fixed point.
        let q2 = qr_orthonormalize(&q).unwrap();
        assert!(q2.sub(&q).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn qr_keeps_column_span_and_positive_diagonal() {
        let a = random(6, 3, 11);
        let q = qr_orthonormalize(&a).unwrap();
        // R = Qᵀ A must be upper triangular with non-negative diagonal.
        let r = matmul_tn(&q, &a);
        for i in 0..3 {
            assert!(r[(i, i)] > 0.0);
            for j in 0..i {
                assert!(r[(i, j)].abs() < 1e-12);
            }
        }
        let back = matmul(&q, &r).unwrap();
        assert!(back.sub(&a).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn qr_rejects_rank_deficient() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        assert!(matches!(
            qr_orthonormalize(&a),
            Err(Error::DegenerateInput { .. })
        ));
    }
}
