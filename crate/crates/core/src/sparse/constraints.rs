use ndarray::{Array2, ArrayView2};

use super::PolynomialLibrary;
use crate::{Error, Result, Scalar};

/// Linear equality constraints `C·vec(Ξ) = 0` on a `q × m` coefficient matrix.
///
/// Variables are indexed column-major, `col * q + k`. Single-entry zero rows
/// are stored separately in `fixed_zero` so solvers can eliminate them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet<T> {
    pub terms: usize,
    pub columns: usize,
    pub rows: Vec<Vec<(usize, T)>>,
    pub fixed_zero: Vec<usize>,
}

impl<T: Scalar> ConstraintSet<T> {
    pub fn unconstrained(terms: usize, columns: usize) -> Self {
        Self {
            terms,
            columns,
            rows: Vec::new(),
            fixed_zero: Vec::new(),
        }
    }

    /// Zero-rows for every `false` entry of `mask`.
    pub fn from_mask(mask: ArrayView2<bool>) -> Self {
        let (q, m) = mask.dim();
        let mut c = Self::unconstrained(q, m);
        c.add_mask(mask);
        c
    }

    pub fn num_vars(&self) -> usize {
        self.terms * self.columns
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len() + self.fixed_zero.len()
    }

    pub fn var(&self, k: usize, col: usize) -> usize {
        col * self.terms + k
    }

    pub fn add_mask(&mut self, mask: ArrayView2<bool>) {
        for ((k, col), &keep) in mask.indexed_iter() {
            if !keep {
                self.fixed_zero.push(self.var(k, col));
            }
        }
        self.fixed_zero.sort_unstable();
        self.fixed_zero.dedup();
    }

    pub fn is_fixed_zero(&self, var: usize) -> bool {
        self.fixed_zero.binary_search(&var).is_ok()
    }

    /// `‖C·vec(Ξ)‖∞`.
    pub fn residual(&self, xi: ArrayView2<T>) -> Result<T> {
        if xi.dim() != (self.terms, self.columns) {
            return Err(Error::Dimension {
                context: "constraint residual",
                expected: self.num_vars(),
                got: xi.len(),
            });
        }
        let at = |v: usize| xi[[v % self.terms, v / self.terms]];
        let general = self
            .rows
            .iter()
            .map(|row| row.iter().fold(T::zero(), |acc, &(v, c)| acc + c * at(v)).abs());
        let zeros = self.fixed_zero.iter().map(|&v| at(v).abs());
        Ok(general.chain(zeros).fold(T::zero(), T::max))
    }

    pub fn to_dense(&self) -> Array2<T> {
        let mut out = Array2::zeros((self.num_rows(), self.num_vars()));
        for (r, row) in self.rows.iter().enumerate() {
            for &(v, c) in row {
                out[[r, v]] += c;
            }
        }
        for (r, &v) in self.fixed_zero.iter().enumerate() {
            out[[self.rows.len() + r, v]] = T::one();
        }
        out
    }
}

/// Coupling rows `Ξ_f[:, i] + T(Ξ_v)[:, i] − Ξ_g[:, i] = 0` for the stacked
/// layout `[Ξ_f | Ξ_v | Ξ_g]`, plus one zero-row per masked-out entry.
pub fn build_constraints<T: Scalar>(lib: &PolynomialLibrary, mask: Option<ArrayView2<bool>>) -> Result<ConstraintSet<T>> {
    let (q, d) = (lib.len(), lib.dim());
    let m = 2 * d + 1;
    let mut c = ConstraintSet::unconstrained(q, m);
    let mut rows: Vec<Vec<(usize, T)>> = Vec::with_capacity(q * d);
    for i in 0..d {
        for k in 0..q {
            rows.push(vec![(c.var(k, i), T::one()), (c.var(k, d + 1 + i), -T::one())]);
        }
    }
    for (i, src, dst, factor) in lib.derivative_entries() {
        rows[i * q + dst].push((c.var(src, d), T::lit(f64::from(factor))));
    }
    c.rows = rows;
    if let Some(mask) = mask {
        if mask.dim() != (q, m) {
            return Err(Error::Dimension {
                context: "sparsity mask",
                expected: q * m,
                got: mask.len(),
            });
        }
        c.add_mask(mask);
    }
    Ok(c)
}

/// Mask allowing `V` terms up to `v_degree`, `g` terms up to `g_degree`
/// and every `f` term.
pub fn library_subset_mask(lib: &PolynomialLibrary, v_degree: u32, g_degree: u32) -> Array2<bool> {
    let d = lib.dim();
    Array2::from_shape_fn((lib.len(), 2 * d + 1), |(k, col)| {
        let deg = lib.degree(k);
        match col {
            c if c < d => true,
            c if c == d => deg <= v_degree,
            _ => deg <= g_degree,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::CoefficientBlock;
    use ndarray::{Array1, Array2};
    use rand::Rng;

    #[test]
    fn scalar_library_rows() {
        let lib = PolynomialLibrary::new(1, 2);
        let c = build_constraints::<f64>(&lib, None).unwrap();
        assert_eq!(c.num_rows(), 3);
        let block =
            CoefficientBlock::from_potential_and_circulation(&lib, Array1::from(vec![0.3, -1.0, 2.0]).view(), Array2::from_elem((3, 1), 0.7).view())
                .unwrap();
        assert_eq!(c.residual(block.xi.view()).unwrap(), 0.0);
    }

    #[test]
    fn resonator_mask_rows() {
        let lib = PolynomialLibrary::new(2, 4);
        let mask = library_subset_mask(&lib, 4, 3);
        let c = build_constraints::<f64>(&lib, Some(mask.view())).unwrap();
        let top = lib.terms().iter().filter(|a| a.iter().sum::<u32>() == 4).count();
        assert_eq!(top, 5);
        assert_eq!(c.num_rows(), lib.len() * 2 + top * 2);
        assert!(build_constraints::<f64>(&lib, Some(Array2::from_elem((3, 5), true).view())).is_err());
    }

    #[test]
    fn consistent_blocks_satisfy_coupling() {
        let mut rng = crate::rng::stream(5, 0);
        for (d, deg) in [(2, 4), (3, 5)] {
            let lib = PolynomialLibrary::new(d, deg);
            let q = lib.len();
            let v = Array1::from_shape_fn(q, |_| rng.random_range(-1.0..1.0));
            let g = Array2::from_shape_fn((q, d), |_| rng.random_range(-1.0..1.0));
            let block = CoefficientBlock::from_potential_and_circulation(&lib, v.view(), g.view()).unwrap();
            let c = build_constraints::<f64>(&lib, None).unwrap();
            assert!(c.residual(block.xi.view()).unwrap() < 1e-12);
            let dense = c.to_dense();
            let flat = Array1::from_iter(block.xi.t().iter().copied());
            assert!(dense.dot(&flat).iter().all(|r| r.abs() < 1e-12));
        }
    }
}
