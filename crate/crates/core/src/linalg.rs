//! Small dense linear algebra: one-sided Jacobi SVD and minimum-norm least
//! squares with rank detection. Systems here have at most a few dozen
//! unknowns, so clarity wins over blocking.

use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Matrix { rows: r, cols: c, data: rows.iter().flatten().copied().collect() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn add_to(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = self.data[i * self.cols + j] + v;
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| (0..self.cols).fold(T::zero(), |acc, j| acc + self.get(i, j) * x[j]))
            .collect()
    }
}

/// Thin SVD `A = U diag(s) V^T` of a matrix with `rows >= cols`.
#[derive(Debug, Clone)]
pub struct Svd<T> {
    /// Columns of `U`, one per singular value.
    pub u: Vec<Vec<T>>,
    pub s: Vec<T>,
    /// Columns of `V`, one per singular value.
    pub v: Vec<Vec<T>>,
}

/// One-sided Jacobi SVD. Wide inputs are padded with zero rows so that `V`
/// always spans the full column space (needed for null-space bases).
pub fn svd<T: Scalar>(a: &Matrix<T>) -> Svd<T> {
    let n = a.cols;
    let m = a.rows.max(n);
    // work on columns
    let mut cols: Vec<Vec<T>> = (0..n)
        .map(|j| (0..m).map(|i| if i < a.rows { a.get(i, j) } else { T::zero() }).collect())
        .collect();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();
    let eps = T::epsilon();
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = cols[p].iter().zip(&cols[q]).fold(
                    (T::zero(), T::zero(), T::zero()),
                    |(a, b, g), (&x, &y)| (a + x * x, b + y * y, g + x * y),
                );
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::two() * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                let (lo, hi) = v.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<T> = cols.iter().map(|c| c.iter().fold(T::zero(), |a, &x| a + x * x).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = Svd { u: Vec::with_capacity(n), s: Vec::with_capacity(n), v: Vec::with_capacity(n) };
    for &j in &order {
        let sj = norms[j];
        let uj = if sj > T::zero() {
            cols[j].iter().take(a.rows).map(|&x| x / sj).collect()
        } else {
            vec![T::zero(); a.rows]
        };
        out.u.push(uj);
        out.s.push(sj);
        out.v.push(v[j].clone());
    }
    out
}

/// Minimum-norm least-squares solution with its rank diagnostics.
#[derive(Debug, Clone)]
pub struct LeastSquares<T> {
    pub x: Vec<T>,
    pub rank: usize,
    /// Orthonormal basis of the null space of `A`.
    pub nullspace: Vec<Vec<T>>,
    /// `||A x - b||_2`.
    pub residual_norm: T,
    pub singular_values: Vec<T>,
}

/// Solves `min ||A x - b||` choosing the minimum-norm `x`. Singular values
/// at or below `rtol * s_max` are treated as zero.
pub fn lstsq<T: Scalar>(a: &Matrix<T>, b: &[T], rtol: T) -> LeastSquares<T> {
    assert_eq!(a.rows, b.len());
    let dec = svd(a);
    let smax = dec.s.first().copied().unwrap_or(T::zero());
    let cutoff = rtol * smax;
    let mut x = vec![T::zero(); a.cols];
    let mut rank = 0;
    let mut nullspace = Vec::new();
    for ((u, &s), v) in dec.u.iter().zip(&dec.s).zip(&dec.v) {
        if s > cutoff && s > T::zero() {
            rank += 1;
            let coef = u.iter().zip(b).fold(T::zero(), |acc, (&ui, &bi)| acc + ui * bi) / s;
            for (xi, &vi) in x.iter_mut().zip(v) {
                *xi = *xi + coef * vi;
            }
        } else {
            nullspace.push(v.clone());
        }
    }
    let ax = a.mul_vec(&x);
    let residual_norm = ax.iter().zip(b).fold(T::zero(), |acc, (&p, &q)| acc + (p - q) * (p - q)).sqrt();
    LeastSquares { x, rank, nullspace, residual_norm, singular_values: dec.s }
}
