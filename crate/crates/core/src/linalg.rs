//! Small dense linear algebra: LU with partial pivoting and vector helpers.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::{Error, Result, Scalar};

/// LU factorization `P A = L U` of a square matrix, stored compactly.
#[derive(Debug, Clone)]
pub struct Lu<T> {
    lu: Array2<T>,
    perm: Vec<usize>,
}

impl<T: Scalar> Lu<T> {
    /// Factorizes `a`. A pivot below `rel_tol · max|a|` is treated as singular.
    pub fn factor(a: ArrayView2<T>, rel_tol: T, context: &'static str) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension {
                context: "lu factor (square)",
                expected: n,
                got: a.ncols(),
            });
        }
        let mut lu = a.to_owned();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = lu.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        if !scale.is_finite() {
            return Err(Error::non_finite::<T>(context, &[]));
        }
        let tiny = rel_tol * scale.max(T::min_positive_value());
        for k in 0..n {
            let (mut p, mut best) = (k, lu[[k, k]].abs());
            for i in k + 1..n {
                let v = lu[[i, k]].abs();
                if v > best {
                    p = i;
                    best = v;
                }
            }
            if best <= tiny {
                return Err(Error::Singular { context });
            }
            if p != k {
                for j in 0..n {
                    lu.swap([k, j], [p, j]);
                }
                perm.swap(k, p);
            }
            let pivot = lu[[k, k]];
            for i in k + 1..n {
                let factor = lu[[i, k]] / pivot;
                lu[[i, k]] = factor;
                if factor != T::zero() {
                    for j in k + 1..n {
                        let u = lu[[k, j]];
                        lu[[i, j]] -= factor * u;
                    }
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn solve(&self, b: ArrayView1<T>) -> Array1<T> {
        let n = self.dim();
        let mut x: Array1<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[[i, j]] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[[i, j]] * x[j];
            }
            x[i] = s / self.lu[[i, i]];
        }
        x
    }
}

/// Solves `a x = b` for a single right-hand side.
pub fn solve<T: Scalar>(a: ArrayView2<T>, b: ArrayView1<T>, context: &'static str) -> Result<Array1<T>> {
    Ok(Lu::factor(a, T::epsilon() * T::lit(16.0), context)?.solve(b))
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn all_finite<T: Scalar>(a: &[T]) -> bool {
    a.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn solves_permuted_system() {
        let a = array![[0.0, 2.0, 1.0], [1.0, 1.0, 0.0], [3.0, 0.0, 1.0]];
        let x_true: Array1<f64> = array![1.0, -2.0, 0.5];
        let b = a.dot(&x_true);
        let x = solve(a.view(), b.view(), "test").unwrap();
        for (u, v) in x.iter().zip(x_true.iter()) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn singular_is_reported() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(matches!(
            solve(a.view(), array![1.0, 1.0].view(), "test"),
            Err(Error::Singular { .. })
        ));
    }
}
