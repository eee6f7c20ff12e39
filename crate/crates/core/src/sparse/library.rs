use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, s};

use crate::{Error, Result, Scalar};

/// Monomials `x^α` with `|α| ≤ max_degree` in graded lexicographic order:
/// by total degree, then by decreasing power of the first variable, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialLibrary {
    dim: usize,
    max_degree: u32,
    terms: Vec<Vec<u32>>,
    index: HashMap<Vec<u32>, usize>,
    /// `derivs[i]` lists `(source, target, factor)` for `∂/∂x_i`.
    derivs: Vec<Vec<(usize, usize, u32)>>,
}

fn compositions(total: u32, parts: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if parts == 1 {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in (0..=total).rev() {
        prefix.push(first);
        compositions(total - first, parts - 1, prefix, out);
        prefix.pop();
    }
}

impl PolynomialLibrary {
    pub fn new(dim: usize, max_degree: u32) -> Self {
        assert!(dim > 0, "library dimension must be positive");
        let mut terms = Vec::new();
        for deg in 0..=max_degree {
            compositions(deg, dim, &mut Vec::with_capacity(dim), &mut terms);
        }
        let index: HashMap<Vec<u32>, usize> = terms.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        let derivs = (0..dim)
            .map(|i| {
                terms
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| a[i] > 0)
                    .map(|(k, a)| {
                        let mut lower = a.clone();
                        lower[i] -= 1;
                        (k, index[&lower], a[i])
                    })
                    .collect()
            })
            .collect();
        Self {
            dim,
            max_degree,
            terms,
            index,
            derivs,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    /// Number of terms `q = C(d + D, D)`.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[Vec<u32>] {
        &self.terms
    }

    pub fn term_index(&self, alpha: &[u32]) -> Option<usize> {
        self.index.get(alpha).copied()
    }

    pub fn degree(&self, k: usize) -> u32 {
        self.terms[k].iter().sum()
    }

    fn eval_row_into<T: Scalar>(&self, x: ArrayView1<T>, pows: &mut [Vec<T>], mut out: ArrayViewMut1<T>) {
        for (j, p) in pows.iter_mut().enumerate() {
            p[0] = T::one();
            for e in 1..p.len() {
                p[e] = p[e - 1] * x[j];
            }
        }
        for (k, alpha) in self.terms.iter().enumerate() {
            out[k] = alpha.iter().enumerate().fold(T::one(), |acc, (j, &e)| acc * pows[j][e as usize]);
        }
    }

    /// `Θ(X)`: entry `(i, k)` is `Π_j X[i, j]^{α_k[j]}`.
    pub fn eval<T: Scalar>(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.dim {
            return Err(Error::Dimension {
                context: "library evaluation",
                expected: self.dim,
                got: x.ncols(),
            });
        }
        let mut out = Array2::zeros((x.nrows(), self.len()));
        let mut pows = vec![vec![T::zero(); self.max_degree as usize + 1]; self.dim];
        for (i, row) in x.rows().into_iter().enumerate() {
            self.eval_row_into(row, &mut pows, out.row_mut(i));
        }
        Ok(out)
    }

    pub fn eval_point<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut out = Array1::zeros(self.len());
        let mut pows = vec![vec![T::zero(); self.max_degree as usize + 1]; self.dim];
        self.eval_row_into(ArrayView1::from(x), &mut pows, out.view_mut());
        out.to_vec()
    }

    /// `T(Ξ_v)`: column `i` holds the coefficients of `∂V/∂x_i` in this library.
    pub fn gradient_transform<T: Scalar>(&self, xi_v: ArrayView1<T>) -> Result<Array2<T>> {
        if xi_v.len() != self.len() {
            return Err(Error::Dimension {
                context: "gradient transform",
                expected: self.len(),
                got: xi_v.len(),
            });
        }
        let mut out = Array2::zeros((self.len(), self.dim));
        for (i, list) in self.derivs.iter().enumerate() {
            for &(src, dst, factor) in list {
                out[[dst, i]] += T::lit(f64::from(factor)) * xi_v[src];
            }
        }
        Ok(out)
    }

    /// Nonzero entries of the linear map `T`, as `(axis, source, target, factor)`.
    pub fn derivative_entries(&self) -> impl Iterator<Item = (usize, usize, usize, u32)> + '_ {
        self.derivs
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().map(move |&(s, t, f)| (i, s, t, f)))
    }

    pub fn monomial_name(&self, k: usize, vars: &[String]) -> String {
        let parts: Vec<String> = self.terms[k]
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 0)
            .map(|(j, &e)| {
                let v = vars.get(j).cloned().unwrap_or_else(|| format!("x{}", j + 1));
                if e == 1 {
                    v
                } else {
                    format!("{v}^{e}")
                }
            })
            .collect();
        parts.join(" ")
    }
}

fn format_magnitude(c: f64) -> String {
    let a = c.abs();
    if a >= 5e-4 {
        format!("{a:.3}")
    } else {
        format!("{a:.2e}")
    }
}

/// Human-readable polynomial, highest degree first, three decimals per
/// coefficient (scientific notation for magnitudes that would round to zero).
pub fn format_polynomial<T: Scalar>(lib: &PolynomialLibrary, coeffs: ArrayView1<T>, vars: &[String]) -> String {
    let mut order: Vec<usize> = (0..lib.len()).filter(|&k| coeffs[k] != T::zero()).collect();
    order.sort_by_key(|&k| std::cmp::Reverse(lib.degree(k)));
    if order.is_empty() {
        return "0".to_string();
    }
    let mut s = String::new();
    for (n, &k) in order.iter().enumerate() {
        let c = coeffs[k].as_f64();
        let mono = lib.monomial_name(k, vars);
        let sign = if c < 0.0 { "-" } else { "+" };
        if n == 0 {
            if c < 0.0 {
                s.push('-');
            }
        } else {
            s.push_str(&format!(" {sign} "));
        }
        s.push_str(&format_magnitude(c));
        if !mono.is_empty() {
            s.push(' ');
            s.push_str(&mono);
        }
    }
    s
}

/// Stacked coefficients `Ξ = [Ξ_f | Ξ_v | Ξ_g]` of shape `q × (2d + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientBlock<T> {
    pub xi: Array2<T>,
    dim: usize,
}

impl<T: Scalar> CoefficientBlock<T> {
    pub fn new(xi: Array2<T>, dim: usize) -> Result<Self> {
        if xi.ncols() != 2 * dim + 1 {
            return Err(Error::Dimension {
                context: "coefficient block columns",
                expected: 2 * dim + 1,
                got: xi.ncols(),
            });
        }
        Ok(Self { xi, dim })
    }

    /// Builds the consistent block `[−T(Ξ_v) + Ξ_g, Ξ_v, Ξ_g]`.
    pub fn from_potential_and_circulation(lib: &PolynomialLibrary, xi_v: ArrayView1<T>, xi_g: ArrayView2<T>) -> Result<Self> {
        let (q, d) = (lib.len(), lib.dim());
        if xi_g.dim() != (q, d) {
            return Err(Error::Dimension {
                context: "circulation coefficients",
                expected: q * d,
                got: xi_g.len(),
            });
        }
        let t = lib.gradient_transform(xi_v)?;
        let mut xi = Array2::zeros((q, 2 * d + 1));
        xi.slice_mut(s![.., ..d]).assign(&(&xi_g - &t));
        xi.column_mut(d).assign(&xi_v);
        xi.slice_mut(s![.., d + 1..]).assign(&xi_g);
        Ok(Self { xi, dim: d })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn f(&self) -> ArrayView2<'_, T> {
        self.xi.slice(s![.., ..self.dim])
    }

    pub fn v(&self) -> ArrayView1<'_, T> {
        self.xi.column(self.dim)
    }

    pub fn g(&self) -> ArrayView2<'_, T> {
        self.xi.slice(s![.., self.dim + 1..])
    }

    /// Largest violation of `Ξ_f = −T(Ξ_v) + Ξ_g`.
    pub fn consistency_error(&self, lib: &PolynomialLibrary) -> Result<T> {
        let t = lib.gradient_transform(self.v())?;
        let expect = &self.g() - &t;
        Ok((&self.f() - &expect).iter().fold(T::zero(), |m, v| m.max(v.abs())))
    }
}
