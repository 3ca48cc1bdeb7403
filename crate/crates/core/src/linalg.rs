//! Small dense linear-algebra helpers shared across the crate.
//!
//! Descriptors are plain slices; matrices are row-major [`Mat`]. The only
//! decomposition needed anywhere (symmetric eigendecomposition for PCA and
//! whitening) is delegated to `nalgebra` and always computed in `f64`.

use crate::error::{Error, Result};
use crate::scalar::{from_f64, to_f64, Real};

#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

#[inline]
pub fn l2_norm<F: Real>(v: &[F]) -> F {
    dot(v, v).sqrt()
}

/// Scale `v` to unit norm, reporting the original norm.
/// Fails on (numerically) zero input; `context` names the vector in the error.
pub fn normalize_in_place<F: Real>(v: &mut [F], context: &str) -> Result<F> {
    let norm = l2_norm(v);
    if !norm.is_finite() || norm <= F::zero() {
        return Err(Error::ZeroNorm(context.to_string()));
    }
    for x in v.iter_mut() {
        *x = *x / norm;
    }
    Ok(norm)
}

pub fn normalized<F: Real>(v: &[F], context: &str) -> Result<Vec<F>> {
    let mut out = v.to_vec();
    normalize_in_place(&mut out, context)?;
    Ok(out)
}

/// Gradient of `y = x / ‖x‖` pulled back through the normalization:
/// `g_x = (g_y - (g_y·y) y) / ‖x‖`.
pub fn normalize_backward<F: Real>(unit: &[F], norm: F, grad_out: &[F]) -> Vec<F> {
    let proj = dot(grad_out, unit);
    unit.iter()
        .zip(grad_out)
        .map(|(u, g)| (*g - proj * *u) / norm)
        .collect()
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_flat(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<F>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            if row.len() != c {
                return Err(Error::InvalidArgument("ragged matrix rows".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Mat { rows: r, cols: c, data })
    }

    /// Identity matrix (square).
    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = F::one();
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
    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// `self · v` for a vector of length `cols`.
    pub fn matvec(&self, v: &[F]) -> Vec<F> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ · v` for a vector of length `rows`.
    pub fn matvec_transposed(&self, v: &[F]) -> Vec<F> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![F::zero(); self.cols];
        for i in 0..self.rows {
            let vi = v[i];
            for (o, m) in out.iter_mut().zip(self.row(i)) {
                *o = *o + vi * *m;
            }
        }
        out
    }

    /// Accumulate the outer product `u ⊗ v` (used for weight gradients).
    pub fn add_outer(&mut self, u: &[F], v: &[F]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for i in 0..self.rows {
            let ui = u[i];
            for (m, x) in self.row_mut(i).iter_mut().zip(v) {
                *m = *m + ui * *x;
            }
        }
    }

    pub fn frobenius_distance_to_identity(&self) -> F {
        debug_assert_eq!(self.rows, self.cols);
        let mut acc = F::zero();
        for i in 0..self.rows {
            for j in 0..self.cols {
                let target = if i == j { F::one() } else { F::zero() };
                let d = self.get(i, j) - target;
                acc = acc + d * d;
            }
        }
        acc.sqrt()
    }
}

/// Mean vector and (biased, 1/n) covariance of a sample of equal-length rows.
pub fn mean_and_covariance<F: Real>(sample: &[Vec<F>]) -> Result<(Vec<F>, Mat<F>)> {
    let n = sample.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    let dim = sample[0].len();
    let mut mean = vec![F::zero(); dim];
    for row in sample {
        if row.len() != dim {
            return Err(Error::InvalidArgument("ragged sample rows".into()));
        }
        for (m, x) in mean.iter_mut().zip(row) {
            *m = *m + *x;
        }
    }
    let inv_n = F::one() / from_f64::<F>(n as f64);
    for m in mean.iter_mut() {
        *m = *m * inv_n;
    }
    let mut cov = Mat::zeros(dim, dim);
    let mut centered = vec![F::zero(); dim];
    for row in sample {
        for ((c, x), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = *x - *m;
        }
        for i in 0..dim {
            let ci = centered[i];
            let out = cov.row_mut(i);
            for (o, cj) in out.iter_mut().zip(&centered) {
                *o = *o + ci * *cj;
            }
        }
    }
    for v in cov.data_mut() {
        *v = *v * inv_n;
    }
    Ok((mean, cov))
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors as matrix *rows*.
/// Computed in `f64` regardless of `F`.
pub fn sym_eigen_desc<F: Real>(m: &Mat<F>) -> Result<(Vec<F>, Mat<F>)> {
    let n = m.rows();
    if n != m.cols() {
        return Err(Error::InvalidArgument("eigendecomposition needs a square matrix".into()));
    }
    if m.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite matrix entries".into()));
    }
    let dm = nalgebra::DMatrix::from_fn(n, n, |i, j| to_f64(m.get(i, j)));
    let eig = nalgebra::SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut values = Vec::with_capacity(n);
    let mut vectors = Mat::zeros(n, n);
    for (rank, &idx) in order.iter().enumerate() {
        values.push(from_f64::<F>(eig.eigenvalues[idx]));
        let col = eig.eigenvectors.column(idx);
        // Fix the sign so the entry of largest magnitude is positive; keeps
        // the decomposition deterministic across runs.
        let mut best = 0usize;
        let mut best_mag = f64::NEG_INFINITY;
        for (j, v) in col.iter().enumerate() {
            if v.abs() > best_mag {
                best_mag = v.abs();
                best = j;
            }
        }
        let flip = if col[best] < 0.0 { -1.0 } else { 1.0 };
        for (j, v) in col.iter().enumerate() {
            vectors.set(rank, j, from_f64::<F>(v * flip));
        }
    }
    Ok((values, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_matches_manual_dots() {
        let m = Mat::from_rows(vec![vec![1.0, 2.0, 3.0], vec![0.5, -1.0, 4.0]]).unwrap();
        let v = vec![2.0, 1.0, -1.0];
        assert_eq!(m.matvec(&v), vec![1.0, -4.0]);
    }

    #[test]
    fn normalize_rejects_zero() {
        let mut v = [0.0f64; 3];
        assert!(normalize_in_place(&mut v, "test").is_err());
    }

    #[test]
    fn eigen_recovers_diagonal() {
        let m = Mat::from_rows(vec![vec![4.0f64, 0.0], vec![0.0, 1.0]]).unwrap();
        let (vals, vecs) = sym_eigen_desc(&m).unwrap();
        assert!((vals[0] - 4.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        assert!((vecs.get(0, 0).abs() - 1.0).abs() < 1e-12);
        assert!((vecs.get(1, 1).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn covariance_of_symmetric_pair() {
        let sample = vec![vec![1.0f64, -1.0], vec![-1.0, 1.0]];
        let (mean, cov) = mean_and_covariance(&sample).unwrap();
        assert_eq!(mean, vec![0.0, 0.0]);
        assert_eq!(cov.get(0, 0), 1.0);
        assert_eq!(cov.get(0, 1), -1.0);
    }
}
