//! Dense helpers for the short vectors and small matrices the solvers pass
//! around. Matrices are row-major `Vec<T>`.

use crate::scalar::Scalar;

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
pub fn norm_sq<T: Scalar>(a: &[T]) -> T {
    a.iter().map(|&x| x * x).sum()
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    norm_sq(a).sqrt()
}

#[inline]
pub fn sub<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

#[inline]
pub fn add<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

#[inline]
pub fn scale<T: Scalar>(a: &[T], s: T) -> Vec<T> {
    a.iter().map(|&x| x * s).collect()
}

#[inline]
pub fn dist_sq<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// `a += s * b`
#[inline]
pub fn axpy<T: Scalar>(a: &mut [T], s: T, b: &[T]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x += s * y;
    }
}

/// Row-major `rows x cols` matrix times vector.
pub fn mat_vec<T: Scalar>(mat: &[T], rows: usize, cols: usize, v: &[T]) -> Vec<T> {
    debug_assert_eq!(mat.len(), rows * cols);
    debug_assert_eq!(v.len(), cols);
    (0..rows)
        .map(|r| dot(&mat[r * cols..(r + 1) * cols], v))
        .collect()
}

/// Sums the columns of a row-major `rows x cols` matrix, giving a `rows`-vector.
pub fn row_sums<T: Scalar>(mat: &[T], rows: usize, cols: usize) -> Vec<T> {
    (0..rows)
        .map(|r| mat[r * cols..(r + 1) * cols].iter().copied().sum())
        .collect()
}

pub fn frobenius<T: Scalar>(mat: &[T]) -> T {
    norm(mat)
}
