use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{CoefficientBlock, ConstraintSet, PolynomialLibrary};
use crate::linalg::Lu;
use crate::{Error, Result, Scalar};

const PIVOT_TOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sr3Config {
    pub lambda: f64,
    pub nu: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Scale library columns to unit RMS before solving.
    pub normalize_columns: bool,
    /// Divide all targets by their common RMS, making the threshold relative
    /// to the target magnitude. A single factor keeps the constraints intact.
    pub normalize_targets: bool,
    /// Refit on the discovered support without the relaxation term.
    pub polish: bool,
    /// Columns whose entries are never restricted by the support in the
    /// polish step; their values follow from the constraints.
    pub free_columns: Vec<usize>,
    #[serde(skip)]
    pub sparsity_mask: Option<Array2<bool>>,
}

impl Default for Sr3Config {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            nu: 1e-5,
            max_iters: 10_000,
            tol: 1e-10,
            normalize_columns: true,
            normalize_targets: false,
            polish: true,
            free_columns: Vec::new(),
            sparsity_mask: None,
        }
    }
}

impl Sr3Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Invalid(format!("sr3 lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::Invalid(format!("sr3 nu must be finite and > 0, got {}", self.nu)));
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::Invalid("sr3 needs tol > 0 and max_iters >= 1".into()));
        }
        Ok(())
    }

    pub fn threshold(&self) -> f64 {
        (2.0 * self.lambda * self.nu).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct Sr3Result<T> {
    pub xi: Array2<T>,
    /// Nonzero pattern of the relaxed variable `W` at exit.
    pub support: Array2<bool>,
    pub iterations: usize,
    pub converged: bool,
    /// Relaxed objective after each outer iteration (in scaled coordinates).
    pub objective: Vec<f64>,
}

impl<T: Scalar> Sr3Result<T> {
    pub fn into_block(self, dim: usize) -> Result<CoefficientBlock<T>> {
        CoefficientBlock::new(self.xi, dim)
    }
}

/// Quadratic data of `½‖G − ΘΞ‖²` in scaled coordinates.
struct Problem<T> {
    gram: Array2<T>,
    tg: Array2<T>,
    gg: T,
    scale: Array1<T>,
    target_scale: T,
}

impl<T: Scalar> Problem<T> {
    fn new(theta: ArrayView2<T>, targets: ArrayView2<T>, normalize: bool, normalize_targets: bool) -> Self {
        let (n, q) = theta.dim();
        let rms = (targets.iter().map(|&v| v * v).sum::<T>() / T::lit(targets.len().max(1) as f64)).sqrt();
        let target_scale = if normalize_targets && rms > T::zero() { rms } else { T::one() };
        let targets = &targets / target_scale;
        let scale = if normalize {
            theta
                .axis_iter(Axis(1))
                .map(|c| {
                    let rms = (c.iter().map(|&v| v * v).sum::<T>() / T::lit(n.max(1) as f64)).sqrt();
                    if rms > T::zero() { rms } else { T::one() }
                })
                .collect()
        } else {
            Array1::ones(q)
        };
        let inv = scale.mapv(|s| T::one() / s);
        let scaled = &theta * &inv;
        Self {
            gram: scaled.t().dot(&scaled),
            tg: scaled.t().dot(&targets),
            gg: targets.iter().map(|&v| v * v).sum(),
            scale,
            target_scale,
        }
    }

    fn data_term(&self, xi: &Array2<T>) -> T {
        let cross: T = (xi * &self.tg).sum();
        let quad: T = (xi * &self.gram.dot(xi)).sum();
        T::lit(0.5) * (self.gg - T::lit(2.0) * cross + quad)
    }
}

/// Equality-constrained quadratic `½ΣΞ_cᵀ(A)Ξ_c − tr(BᵀΞ)` over the free
/// variables, factored once and solved for changing right-hand sides.
struct Kkt<T> {
    lu: Lu<T>,
    free: Vec<usize>,
    terms: usize,
    columns: usize,
}

impl<T: Scalar> Kkt<T> {
    fn new(gram: &Array2<T>, ridge: T, constraints: &ConstraintSet<T>, free: Vec<usize>) -> Result<Self> {
        let (q, m) = (constraints.terms, constraints.columns);
        let mut pos = vec![usize::MAX; q * m];
        for (p, &v) in free.iter().enumerate() {
            pos[v] = p;
        }
        let rows: Vec<Vec<(usize, T)>> = constraints
            .rows
            .iter()
            .map(|r| r.iter().filter(|(v, _)| pos[*v] != usize::MAX).map(|&(v, c)| (pos[v], c)).collect::<Vec<_>>())
            .filter(|r: &Vec<(usize, T)>| r.iter().any(|&(_, c)| c != T::zero()))
            .collect();
        let nf = free.len();
        let size = nf + rows.len();
        let mut a = Array2::zeros((size, size));
        for (i, &vi) in free.iter().enumerate() {
            let (ki, ci) = (vi % q, vi / q);
            for (j, &vj) in free.iter().enumerate() {
                let (kj, cj) = (vj % q, vj / q);
                if ci == cj {
                    a[[i, j]] = gram[[ki, kj]];
                }
            }
            a[[i, i]] += ridge;
        }
        for (r, row) in rows.iter().enumerate() {
            for &(p, c) in row {
                a[[nf + r, p]] += c;
                a[[p, nf + r]] += c;
            }
        }
        let lu = Lu::factor(a.view(), T::lit(PIVOT_TOL), "SR3 KKT system")?;
        Ok(Self {
            lu,
            free,
            terms: q,
            columns: m,
        })
    }

    fn solve(&self, rhs: &Array2<T>) -> Array2<T> {
        let mut b = Array1::zeros(self.lu.dim());
        for (p, &v) in self.free.iter().enumerate() {
            b[p] = rhs[[v % self.terms, v / self.terms]];
        }
        let x = self.lu.solve(b.view());
        let mut out = Array2::zeros((self.terms, self.columns));
        for (p, &v) in self.free.iter().enumerate() {
            out[[v % self.terms, v / self.terms]] = x[p];
        }
        out
    }
}

fn hard_threshold<T: Scalar>(xi: &Array2<T>, thr: T) -> Array2<T> {
    xi.mapv(|v| if v.abs() >= thr { v } else { T::zero() })
}

/// Constrained SR3 with an ℓ₀ penalty:
/// `min ½‖G − ΘΞ‖² + λ‖W‖₀ + ‖Ξ − W‖²/(2ν)` subject to `C·vec(Ξ) = 0`.
///
/// Returns the polished, constraint-satisfying `Ξ` in original units.
pub fn sr3_solve<T: Scalar>(
    theta: ArrayView2<T>,
    targets: ArrayView2<T>,
    constraints: &ConstraintSet<T>,
    cfg: &Sr3Config,
    init: ArrayView2<T>,
) -> Result<Sr3Result<T>> {
    cfg.validate()?;
    let (n, q) = theta.dim();
    let m = targets.ncols();
    if targets.nrows() != n {
        return Err(Error::Dimension {
            context: "sr3 target rows",
            expected: n,
            got: targets.nrows(),
        });
    }
    if constraints.terms != q || constraints.columns != m || init.dim() != (q, m) {
        return Err(Error::Dimension {
            context: "sr3 coefficient shape",
            expected: q * m,
            got: if init.dim() != (q, m) { init.len() } else { constraints.num_vars() },
        });
    }
    if n == 0 {
        return Err(Error::Empty("sr3 needs at least one sample".into()));
    }
    let mut constraints = constraints.clone();
    if let Some(mask) = &cfg.sparsity_mask {
        if mask.dim() != (q, m) {
            return Err(Error::Dimension {
                context: "sparsity mask",
                expected: q * m,
                got: mask.len(),
            });
        }
        constraints.add_mask(mask.view());
    }

    let prob = Problem::new(theta, targets, cfg.normalize_columns, cfg.normalize_targets);
    let scale_col = prob.scale.view().insert_axis(Axis(1));
    for row in &mut constraints.rows {
        for (v, c) in row.iter_mut() {
            *c /= prob.scale[*v % q];
        }
    }

    let nu = T::lit(cfg.nu);
    let inv_nu = T::one() / nu;
    let lambda = T::lit(cfg.lambda);
    let thr = T::lit(cfg.threshold());
    let free: Vec<usize> = (0..q * m).filter(|&v| !constraints.is_fixed_zero(v)).collect();
    let kkt = Kkt::new(&prob.gram, inv_nu, &constraints, free.clone())?;

    let objective = |xi: &Array2<T>, w: &Array2<T>| -> f64 {
        let nnz = w.iter().filter(|&&v| v != T::zero()).count();
        let gap: T = (xi - w).mapv(|v| v * v).sum();
        (prob.data_term(xi) + lambda * T::lit(nnz as f64) + gap * inv_nu * T::lit(0.5)).as_f64()
    };

    let mut xi = &init * &scale_col / prob.target_scale;
    let mut w = hard_threshold(&xi, thr);
    for &v in &constraints.fixed_zero {
        w[[v % q, v / q]] = T::zero();
    }
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let rhs = &prob.tg + &(&w * inv_nu);
        xi = kkt.solve(&rhs);
        if !xi.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("sr3 iterate", xi.as_slice().unwrap_or(&[])));
        }
        let w_new = hard_threshold(&xi, thr);
        let delta = (&w_new - &w).mapv(|v| v * v).sum().sqrt();
        w = w_new;
        history.push(objective(&xi, &w));
        if delta < T::lit(cfg.tol) {
            converged = true;
            break;
        }
    }

    let support = w.mapv(|v| v != T::zero());
    let mut out = if cfg.polish {
        let mut polish_free: Vec<usize> = free
            .iter()
            .copied()
            .filter(|&v| cfg.free_columns.contains(&(v / q)) || support[[v % q, v / q]])
            .collect();
        polish_free.sort_unstable();
        let kkt = Kkt::new(&prob.gram, T::zero(), &constraints, polish_free)?;
        kkt.solve(&prob.tg)
    } else {
        xi
    };
    out /= &scale_col;
    out *= prob.target_scale;
    Ok(Sr3Result {
        xi: out,
        support,
        iterations,
        converged,
        objective: history,
    })
}

fn column_block(mask: Option<&Array2<bool>>, cols: std::ops::Range<usize>) -> Option<Array2<bool>> {
    mask.map(|m| m.slice(ndarray::s![.., cols]).to_owned())
}

/// Separate SR3 fits for `V` and `g`, assembled into a consistent block.
pub fn init_coefficients<T: Scalar>(
    lib: &PolynomialLibrary,
    theta: ArrayView2<T>,
    v_target: ArrayView1<T>,
    g_target: ArrayView2<T>,
    cfg: &Sr3Config,
) -> Result<CoefficientBlock<T>> {
    let (q, d) = (lib.len(), lib.dim());
    if g_target.ncols() != d {
        return Err(Error::Dimension {
            context: "circulation target",
            expected: d,
            got: g_target.ncols(),
        });
    }
    let mask = cfg.sparsity_mask.as_ref();
    let solve = |target: ArrayView2<T>, cols: std::ops::Range<usize>| -> Result<Array2<T>> {
        let width = cols.len();
        let sub = Sr3Config {
            sparsity_mask: column_block(mask, cols),
            free_columns: Vec::new(),
            ..cfg.clone()
        };
        let cons = ConstraintSet::unconstrained(q, width);
        Ok(sr3_solve(theta, target, &cons, &sub, Array2::zeros((q, width)).view())?.xi)
    };
    let xi_v = solve(v_target.insert_axis(Axis(1)), d..d + 1)?;
    let xi_g = solve(g_target, d + 1..2 * d + 1)?;
    CoefficientBlock::from_potential_and_circulation(lib, xi_v.column(0), xi_g.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::build_constraints;
    use ndarray::array;
    use rand::Rng;

    fn points(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::stream(seed, 0);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn zero_lambda_is_least_squares() {
        let lib = PolynomialLibrary::new(2, 3);
        let x = points(200, 2, 1);
        let theta = lib.eval(x.view()).unwrap();
        let mut rng = crate::rng::stream(2, 0);
        let v = Array1::from_shape_fn(lib.len(), |_| rng.random_range(-1.0..1.0));
        let g = Array2::from_shape_fn((lib.len(), 2), |_| rng.random_range(-1.0..1.0));
        let truth = CoefficientBlock::from_potential_and_circulation(&lib, v.view(), g.view()).unwrap();
        let targets = theta.dot(&truth.xi);
        let cons = build_constraints(&lib, None).unwrap();
        let cfg = Sr3Config {
            lambda: 0.0,
            nu: 1.0,
            free_columns: vec![0, 1],
            ..Default::default()
        };
        let res = sr3_solve(theta.view(), targets.view(), &cons, &cfg, Array2::zeros(truth.xi.dim()).view()).unwrap();
        assert!(res.converged);
        assert!((&res.xi - &truth.xi).iter().all(|e| e.abs() < 1e-8));
        assert!(cons.residual(res.xi.view()).unwrap() < 1e-8);
    }

    #[test]
    fn masked_entries_are_exactly_zero() {
        let lib = PolynomialLibrary::new(2, 4);
        let x = points(300, 2, 3);
        let theta = lib.eval(x.view()).unwrap();
        let targets = Array2::from_shape_fn((300, 5), |(i, j)| (x[[i, 0]] * (j as f64 + 1.0)).sin());
        let mask = crate::sparse::library_subset_mask(&lib, 4, 3);
        let cons = build_constraints(&lib, None).unwrap();
        let cfg = Sr3Config {
            lambda: 1e-3,
            nu: 1e-2,
            sparsity_mask: Some(mask.clone()),
            free_columns: vec![0, 1],
            ..Default::default()
        };
        let res = sr3_solve(theta.view(), targets.view(), &cons, &cfg, Array2::zeros((15, 5)).view()).unwrap();
        for ((k, c), &keep) in mask.indexed_iter() {
            if !keep {
                assert_eq!(res.xi[[k, c]], 0.0);
            }
        }
        assert!(cons.residual(res.xi.view()).unwrap() < 1e-8);
        for w in res.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-10 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn zero_targets_give_zero_init() {
        let lib = PolynomialLibrary::new(2, 2);
        let theta = lib.eval(points(50, 2, 4).view()).unwrap();
        let cfg = Sr3Config::default();
        let block = init_coefficients(&lib, theta.view(), Array1::zeros(50).view(), Array2::zeros((50, 2)).view(), &cfg).unwrap();
        assert!(block.xi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_recovers_potential() {
        let lib = PolynomialLibrary::new(2, 4);
        let x = points(400, 2, 5);
        let theta = lib.eval(x.view()).unwrap();
        let mut v = Array1::<f64>::zeros(lib.len());
        v[lib.term_index(&[4, 0]).unwrap()] = 0.25;
        v[lib.term_index(&[2, 0]).unwrap()] = -0.5;
        v[lib.term_index(&[0, 2]).unwrap()] = 0.5;
        let g = Array2::<f64>::zeros((lib.len(), 2));
        let cfg = Sr3Config {
            lambda: 0.01,
            nu: 1e-3,
            ..Default::default()
        };
        let block = init_coefficients(&lib, theta.view(), theta.dot(&v).view(), theta.dot(&g).view(), &cfg).unwrap();
        assert!((&block.v() - &v).iter().all(|e| e.abs() < 1e-6));
        assert!(block.consistency_error(&lib).unwrap() < 1e-12);
    }

    #[test]
    fn target_normalization_is_scale_free() {
        let lib = PolynomialLibrary::new(2, 4);
        let x = points(400, 2, 6);
        let theta = lib.eval(x.view()).unwrap();
        let mut v = Array1::<f64>::zeros(lib.len());
        v[lib.term_index(&[4, 0]).unwrap()] = 0.25;
        v[lib.term_index(&[0, 2]).unwrap()] = 0.5;
        let mut g = Array2::<f64>::zeros((lib.len(), 2));
        g[[lib.term_index(&[0, 1]).unwrap(), 0]] = -1.0;
        g[[lib.term_index(&[1, 0]).unwrap(), 1]] = 1.0;
        let truth = CoefficientBlock::from_potential_and_circulation(&lib, v.view(), g.view()).unwrap();
        let cons = build_constraints(&lib, None).unwrap();
        let cfg = Sr3Config {
            lambda: 1e-3,
            nu: 1e-2,
            normalize_targets: true,
            free_columns: vec![0, 1],
            ..Default::default()
        };
        let zeros = Array2::zeros(truth.xi.dim());
        let unit = sr3_solve(theta.view(), theta.dot(&truth.xi).view(), &cons, &cfg, zeros.view()).unwrap();
        let tiny_targets = theta.dot(&truth.xi) * 1e-8;
        let tiny = sr3_solve(theta.view(), tiny_targets.view(), &cons, &cfg, zeros.view()).unwrap();
        assert_eq!(unit.support, tiny.support);
        assert!((&unit.xi - &truth.xi).iter().all(|e| e.abs() < 1e-8));
        assert!((&tiny.xi * 1e8 - &truth.xi).iter().all(|e| e.abs() < 1e-6));

        let raw = Sr3Config { normalize_targets: false, ..cfg };
        let lost = sr3_solve(theta.view(), tiny_targets.view(), &cons, &raw, zeros.view()).unwrap();
        assert!(lost.support.iter().all(|&s| !s));
    }

    #[test]
    fn singular_system_is_reported() {
        let theta: Array2<f64> = array![[1.0, 1.0], [1.0, 1.0]];
        let cons = ConstraintSet::unconstrained(2, 1);
        let cfg = Sr3Config {
            lambda: 0.0,
            nu: 1.0,
            ..Default::default()
        };
        let res = sr3_solve(theta.view(), array![[1.0], [1.0]].view(), &cons, &cfg, Array2::zeros((2, 1)).view());
        assert!(matches!(res, Err(Error::Singular { .. })));
        let bad = sr3_solve(theta.view(), array![[1.0f64]].view(), &cons, &cfg, Array2::zeros((2, 1)).view());
        assert!(bad.is_err());
    }
}
