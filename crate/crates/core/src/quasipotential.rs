//! Symbolic quasipotential `U = 2V`, Hamilton–Jacobi diagnostics,
//! normalization constants and invariant-density grids.

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::decomposition::DecompositionModel;
use crate::dynamics::{BoxDomain, VectorField};
use crate::sparse::{format_polynomial, CoefficientBlock, PolynomialLibrary};
use crate::special::bessel_i_scaled;
use crate::{Error, Result, Scalar};

/// Points evaluated per batch in tensor-grid loops.
const CHUNK: usize = 8192;
/// Integrand cutoff: the domain is trimmed where `U − min U > TRUNCATION·ε`.
pub const TRUNCATION: f64 = 40.0;
const COSINE_GUARD: f64 = 1e-12;

/// Anything that splits a field as `f = −∇V + g`.
pub trait Decomposition<T: Scalar> {
    fn dim(&self) -> usize;
    fn potential_batch(&self, x: ArrayView2<T>) -> Array1<T>;
    fn potential_gradient_batch(&self, x: ArrayView2<T>) -> Array2<T>;
    fn circulation_batch(&self, x: ArrayView2<T>) -> Array2<T>;

    fn field_batch(&self, x: ArrayView2<T>) -> Array2<T> {
        self.circulation_batch(x) - self.potential_gradient_batch(x)
    }
}

impl<T: Scalar> Decomposition<T> for DecompositionModel<T> {
    fn dim(&self) -> usize {
        DecompositionModel::dim(self)
    }
    fn potential_batch(&self, x: ArrayView2<T>) -> Array1<T> {
        DecompositionModel::potential_batch(self, x)
    }
    fn potential_gradient_batch(&self, x: ArrayView2<T>) -> Array2<T> {
        DecompositionModel::potential_gradient_batch(self, x)
    }
    fn circulation_batch(&self, x: ArrayView2<T>) -> Array2<T> {
        DecompositionModel::circulation_batch(self, x)
    }
}

/// Polynomial `V`, `g` and `f = −∇V + g` from a coefficient block.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicModel<T> {
    lib: PolynomialLibrary,
    block: CoefficientBlock<T>,
    variables: Vec<String>,
    grad: Array2<T>,
    field: Array2<T>,
    hessian: Vec<Array2<T>>,
}

impl<T: Scalar> SymbolicModel<T> {
    pub fn new(lib: PolynomialLibrary, block: CoefficientBlock<T>, variables: Vec<String>) -> Result<Self> {
        if block.xi.nrows() != lib.len() || block.dim() != lib.dim() {
            return Err(Error::Dimension {
                context: "symbolic model coefficients",
                expected: lib.len() * (2 * lib.dim() + 1),
                got: block.xi.len(),
            });
        }
        if variables.len() != lib.dim() {
            return Err(Error::Dimension {
                context: "symbolic model variable names",
                expected: lib.dim(),
                got: variables.len(),
            });
        }
        let grad = lib.gradient_transform(block.v())?;
        let field = &block.g() - &grad;
        let hessian = (0..lib.dim())
            .map(|i| lib.gradient_transform(grad.column(i)))
            .collect::<Result<_>>()?;
        Ok(Self {
            lib,
            block,
            variables,
            grad,
            field,
            hessian,
        })
    }

    pub fn library(&self) -> &PolynomialLibrary {
        &self.lib
    }

    pub fn block(&self) -> &CoefficientBlock<T> {
        &self.block
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    fn theta(&self, x: ArrayView2<T>) -> Array2<T> {
        self.lib.eval(x).expect("input width checked by caller")
    }

    fn check(&self, x: &[T]) -> Result<()> {
        if x.len() != self.lib.dim() {
            return Err(Error::Dimension {
                context: "symbolic model input",
                expected: self.lib.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn potential(&self, x: &[T]) -> Result<T> {
        self.check(x)?;
        Ok(self.lib.eval_point(x).iter().zip(self.block.v()).map(|(&a, &b)| a * b).sum())
    }

    pub fn quasipotential(&self, x: &[T]) -> Result<T> {
        Ok(T::lit(2.0) * self.potential(x)?)
    }

    fn apply(&self, x: &[T], coeffs: &Array2<T>) -> Result<Vec<T>> {
        self.check(x)?;
        Ok(Array1::from(self.lib.eval_point(x)).dot(coeffs).to_vec())
    }

    pub fn potential_gradient(&self, x: &[T]) -> Result<Vec<T>> {
        self.apply(x, &self.grad)
    }

    pub fn circulation(&self, x: &[T]) -> Result<Vec<T>> {
        self.apply(x, &self.block.g().to_owned())
    }

    pub fn predict_field(&self, x: &[T]) -> Result<Vec<T>> {
        self.apply(x, &self.field)
    }

    /// Hessian of `V`, row-major `d × d`.
    pub fn potential_hessian(&self, x: &[T]) -> Result<Vec<T>> {
        self.check(x)?;
        let th = Array1::from(self.lib.eval_point(x));
        Ok(self.hessian.iter().flat_map(|h| th.dot(h).to_vec()).collect())
    }

    pub fn quasipotential_batch(&self, x: ArrayView2<T>) -> Array1<T> {
        Decomposition::potential_batch(self, x) * T::lit(2.0)
    }

    pub fn quasipotential_string(&self) -> String {
        let u = self.block.v().mapv(|c| c * T::lit(2.0));
        format_polynomial(&self.lib, u.view(), &self.variables)
    }

    pub fn potential_string(&self) -> String {
        format_polynomial(&self.lib, self.block.v(), &self.variables)
    }

    pub fn gradient_strings(&self) -> Vec<String> {
        self.grad.columns().into_iter().map(|c| format_polynomial(&self.lib, c, &self.variables)).collect()
    }

    pub fn circulation_strings(&self) -> Vec<String> {
        self.block.g().columns().into_iter().map(|c| format_polynomial(&self.lib, c, &self.variables)).collect()
    }

    pub fn field_strings(&self) -> Vec<String> {
        self.field.columns().into_iter().map(|c| format_polynomial(&self.lib, c, &self.variables)).collect()
    }
}

impl<T: Scalar> Decomposition<T> for SymbolicModel<T> {
    fn dim(&self) -> usize {
        self.lib.dim()
    }
    fn potential_batch(&self, x: ArrayView2<T>) -> Array1<T> {
        self.theta(x).dot(&self.block.v())
    }
    fn potential_gradient_batch(&self, x: ArrayView2<T>) -> Array2<T> {
        self.theta(x).dot(&self.grad)
    }
    fn circulation_batch(&self, x: ArrayView2<T>) -> Array2<T> {
        self.theta(x).dot(&self.block.g())
    }
    fn field_batch(&self, x: ArrayView2<T>) -> Array2<T> {
        self.theta(x).dot(&self.field)
    }
}

impl<T: Scalar> VectorField<T> for SymbolicModel<T> {
    fn dim(&self) -> usize {
        self.lib.dim()
    }

    fn eval_into(&self, x: &[T], out: &mut [T]) {
        let th = self.lib.eval_point(x);
        for (i, o) in out.iter_mut().enumerate() {
            *o = th.iter().zip(self.field.column(i)).map(|(&a, &b)| a * b).sum();
        }
    }
}

/// The exact decomposition of the archetypal system in a degree-5 library:
/// `V = (x⁴ − 2x² + y² + z² + 1)/2`, `g = (−y − z, 2x³ − 2x, 2x³ − 2x)`.
pub fn archetypal_exact() -> SymbolicModel<f64> {
    let lib = PolynomialLibrary::new(3, 5);
    let idx = |a: [u32; 3]| lib.term_index(&a).expect("term in library");
    let mut v = Array1::zeros(lib.len());
    for (a, c) in [([4, 0, 0], 0.5), ([2, 0, 0], -1.0), ([0, 2, 0], 0.5), ([0, 0, 2], 0.5), ([0, 0, 0], 0.5)] {
        v[idx(a)] = c;
    }
    let mut g = Array2::zeros((lib.len(), 3));
    g[[idx([0, 1, 0]), 0]] = -1.0;
    g[[idx([0, 0, 1]), 0]] = -1.0;
    for col in 1..3 {
        g[[idx([3, 0, 0]), col]] = 2.0;
        g[[idx([1, 0, 0]), col]] = -2.0;
    }
    let block = CoefficientBlock::from_potential_and_circulation(&lib, v.view(), g.view()).expect("shapes match");
    let vars = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    SymbolicModel::new(lib, block, vars).expect("consistent exact model")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub mean_abs_r1: f64,
    pub max_abs_r1: f64,
    pub mean_abs_r2: f64,
    pub max_abs_r2: f64,
    /// Mean of `|g·∇V| / (|g||∇V|)` over points where both norms exceed the guard.
    pub mean_abs_cosine: f64,
    pub guarded: usize,
}

#[derive(Debug, Clone)]
pub struct HjResiduals<T> {
    /// `∇V·∇V + f·∇V`.
    pub r1: Array1<T>,
    /// `g·∇V`.
    pub r2: Array1<T>,
    pub summary: ResidualSummary,
}

/// Hamilton–Jacobi and orthogonality residuals. `f` is `reference` when
/// given, otherwise the decomposition's own `−∇V + g`.
pub fn hj_residual<T: Scalar, D: Decomposition<T> + ?Sized>(
    model: &D,
    x: ArrayView2<T>,
    reference: Option<&dyn VectorField<T>>,
) -> Result<HjResiduals<T>> {
    if x.nrows() == 0 {
        return Err(Error::Empty("residual evaluation needs at least one point".into()));
    }
    if x.ncols() != model.dim() {
        return Err(Error::Dimension {
            context: "residual points",
            expected: model.dim(),
            got: x.ncols(),
        });
    }
    let grad = model.potential_gradient_batch(x);
    let circ = model.circulation_batch(x);
    let field = match reference {
        Some(f) => {
            let mut out = Array2::zeros(x.raw_dim());
            for (row, mut o) in x.rows().into_iter().zip(out.rows_mut()) {
                f.eval_into(&row.to_vec(), o.as_slice_mut().expect("row-major output"));
            }
            out
        }
        None => &circ - &grad,
    };
    let gg = (&grad * &grad).sum_axis(Axis(1));
    let r1 = &gg + &(&field * &grad).sum_axis(Axis(1));
    let r2 = (&circ * &grad).sum_axis(Axis(1));
    let cn = (&circ * &circ).sum_axis(Axis(1));
    let n = x.nrows() as f64;
    let stats = |r: &Array1<T>| {
        let abs = r.mapv(|v| v.abs().as_f64());
        (abs.sum() / n, abs.fold(0.0f64, |m, &v| m.max(v)))
    };
    let (mean_abs_r1, max_abs_r1) = stats(&r1);
    let (mean_abs_r2, max_abs_r2) = stats(&r2);
    let mut cos_sum = 0.0;
    let mut counted = 0usize;
    for i in 0..x.nrows() {
        let denom = (gg[i] * cn[i]).sqrt().as_f64();
        if denom > COSINE_GUARD {
            cos_sum += r2[i].as_f64().abs() / denom;
            counted += 1;
        }
    }
    Ok(HjResiduals {
        r1,
        r2,
        summary: ResidualSummary {
            mean_abs_r1,
            max_abs_r1,
            mean_abs_r2,
            max_abs_r2,
            mean_abs_cosine: if counted > 0 { cos_sum / counted as f64 } else { 0.0 },
            guarded: x.nrows() - counted,
        },
    })
}

/// Calls `f(first_index, points)` over the tensor grid `axes`, last axis fastest.
fn for_each_chunk(axes: &[Vec<f64>], mut f: impl FnMut(usize, ArrayView2<f64>) -> Result<()>) -> Result<()> {
    let d = axes.len();
    let total: usize = axes.iter().map(Vec::len).product();
    let mut idx = vec![0usize; d];
    let mut buf = Array2::zeros((CHUNK.min(total), d));
    let mut start = 0;
    while start < total {
        let len = CHUNK.min(total - start);
        for r in 0..len {
            for a in 0..d {
                buf[[r, a]] = axes[a][idx[a]];
            }
            for a in (0..d).rev() {
                idx[a] += 1;
                if idx[a] < axes[a].len() {
                    break;
                }
                idx[a] = 0;
            }
        }
        f(start, buf.slice(ndarray::s![..len, ..]))?;
        start += len;
    }
    Ok(())
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut out = vec![0; shape.len()];
    for a in (0..shape.len()).rev() {
        out[a] = flat % shape[a];
        flat /= shape[a];
    }
    out
}

fn simpson_weights(intervals: usize, lo: f64, hi: f64) -> Vec<f64> {
    let h = (hi - lo) / intervals as f64;
    (0..=intervals)
        .map(|i| {
            let w = if i == 0 || i == intervals {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * h / 3.0
        })
        .collect()
}

fn trapezoid_weights(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let h = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h }).collect()
}

/// Running `ln Σ w·exp(v)`.
#[derive(Debug, Clone, Copy)]
struct LogSum {
    max: f64,
    sum: f64,
}

impl LogSum {
    fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    fn add(&mut self, w: f64, v: f64) {
        if v > self.max {
            self.sum = self.sum * (self.max - v).exp() + w;
            self.max = v;
        } else {
            self.sum += w * (v - self.max).exp();
        }
    }

    fn ln(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

/// Batch evaluator for `U` on rows of a point matrix.
pub trait PotentialFn: Fn(ArrayView2<f64>) -> Array1<f64> {}
impl<F: Fn(ArrayView2<f64>) -> Array1<f64>> PotentialFn for F {}

fn nonfinite_at(values: &Array1<f64>, points: ArrayView2<f64>, context: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite {
            context: context.to_string(),
            state: points.row(i).to_vec(),
        }),
        None => Ok(()),
    }
}

/// `ln ∫ exp(−U/ε)` by tensor Simpson with `intervals` (even) per axis.
pub fn simpson_ln_integral(u: &impl PotentialFn, eps: f64, domain: &BoxDomain, intervals: usize) -> Result<f64> {
    let intervals = intervals.max(2) + intervals % 2;
    let axes = domain.nodes(intervals + 1);
    let weights: Vec<Vec<f64>> = domain.bounds.iter().map(|[lo, hi]| simpson_weights(intervals, *lo, *hi)).collect();
    let shape: Vec<usize> = axes.iter().map(Vec::len).collect();
    let mut acc = LogSum::new();
    for_each_chunk(&axes, |start, pts| {
        let vals = u(pts);
        nonfinite_at(&vals, pts, "quadrature integrand")?;
        for (r, &v) in vals.iter().enumerate() {
            let idx = unravel(start + r, &shape);
            let w: f64 = idx.iter().enumerate().map(|(a, &i)| weights[a][i]).product();
            acc.add(w, -v / eps);
        }
        Ok(())
    })?;
    Ok(acc.ln())
}

/// Box of points with `U − min U ≤ 40ε` on a probe grid over `search`,
/// padded by one probe cell. The flag reports whether the box reached the
/// search boundary, i.e. whether `search` may be too small.
pub fn truncated_domain(u: &impl PotentialFn, eps: f64, search: &BoxDomain, probe: usize) -> Result<(BoxDomain, bool)> {
    let probe = probe.max(3);
    let axes = search.nodes(probe);
    let shape: Vec<usize> = axes.iter().map(Vec::len).collect();
    let mut values = Vec::with_capacity(shape.iter().product());
    for_each_chunk(&axes, |_, pts| {
        let vals = u(pts);
        nonfinite_at(&vals, pts, "potential on probe grid")?;
        values.extend(vals);
        Ok(())
    })?;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let d = search.dim();
    let mut lo = vec![usize::MAX; d];
    let mut hi = vec![0usize; d];
    for (flat, &v) in values.iter().enumerate() {
        if v - min <= TRUNCATION * eps {
            for (a, i) in unravel(flat, &shape).into_iter().enumerate() {
                lo[a] = lo[a].min(i);
                hi[a] = hi[a].max(i);
            }
        }
    }
    let mut touches = false;
    let bounds = (0..d)
        .map(|a| {
            let (l, h) = (lo[a].saturating_sub(1), (hi[a] + 1).min(probe - 1));
            touches |= lo[a] == 0 || hi[a] == probe - 1;
            [axes[a][l], axes[a][h]]
        })
        .collect();
    Ok((BoxDomain::new(bounds)?, touches))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadrature {
    pub z: f64,
    pub ln_z: f64,
    /// Estimate at half the resolution.
    pub coarse_z: f64,
    /// `|z − coarse_z| / z`.
    pub richardson_rel: f64,
    pub domain: BoxDomain,
    pub intervals: usize,
    pub reached_search_boundary: bool,
}

/// `Z = ∫ exp(−U/ε)` over the part of `search` where `U − min U ≤ 40ε`.
pub fn normalization_quadrature(u: &impl PotentialFn, eps: f64, search: &BoxDomain, intervals: usize) -> Result<Quadrature> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Invalid(format!("noise strength must be positive, got {eps}")));
    }
    search.validate()?;
    let probe = match search.dim() {
        1 => 2001,
        2 => 401,
        3 => 81,
        _ => 21,
    };
    let (domain, reached) = truncated_domain(u, eps, search, probe)?;
    let ln_z = simpson_ln_integral(u, eps, &domain, intervals)?;
    let ln_coarse = simpson_ln_integral(u, eps, &domain, intervals / 2)?;
    let (z, coarse_z) = (ln_z.exp(), ln_coarse.exp());
    Ok(Quadrature {
        z,
        ln_z,
        coarse_z,
        richardson_rel: (ln_z - ln_coarse).exp_m1().abs(),
        domain,
        intervals,
        reached_search_boundary: reached,
    })
}

/// `U = a₁x⁴ − a₂x² + a₃ + a₄y² + a₅z²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuarticQuadraticForm {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub a5: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMethod {
    ClosedForm,
    Quadrature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub z: f64,
    pub ln_z: f64,
    pub method: NormalizationMethod,
}

impl QuarticQuadraticForm {
    pub fn new(a1: f64, a2: f64, a3: f64, a4: f64, a5: f64) -> Result<Self> {
        let f = Self { a1, a2, a3, a4, a5 };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.a1, self.a2, self.a3, self.a4, self.a5];
        if all.iter().any(|a| !a.is_finite()) || !(self.a1 > 0.0 && self.a4 > 0.0 && self.a5 > 0.0) {
            return Err(Error::Invalid(format!("quartic-quadratic form needs finite a and a1, a4, a5 > 0, got {all:?}")));
        }
        Ok(())
    }

    /// Reads `U = 2V` off a three-variable model; every other coefficient
    /// must be at most `tol` in magnitude.
    pub fn from_model(model: &SymbolicModel<f64>, tol: f64) -> Result<Self> {
        let lib = model.library();
        if lib.dim() != 3 {
            return Err(Error::Invalid(format!("quartic-quadratic form needs 3 variables, got {}", lib.dim())));
        }
        let u = model.block().v().mapv(|c| 2.0 * c);
        let known = [[4, 0, 0], [2, 0, 0], [0, 0, 0], [0, 2, 0], [0, 0, 2]];
        let at = |a: [u32; 3]| lib.term_index(&a).map_or(0.0, |k| u[k]);
        for (k, alpha) in lib.terms().iter().enumerate() {
            if !known.iter().any(|a| a[..] == alpha[..]) && u[k].abs() > tol {
                return Err(Error::Invalid(format!(
                    "potential has term {} with coefficient {:.3e}, not of quartic-quadratic form",
                    lib.monomial_name(k, model.variables()),
                    u[k]
                )));
            }
        }
        Self::new(at(known[0]), -at(known[1]), at(known[2]), at(known[3]), at(known[4]))
    }

    pub fn potential(&self, x: &[f64]) -> f64 {
        let (x2, y, z) = (x[0] * x[0], x[1], x[2]);
        self.a1 * x2 * x2 - self.a2 * x2 + self.a3 + self.a4 * y * y + self.a5 * z * z
    }

    pub fn potential_batch(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.rows().into_iter().map(|r| self.potential(&r.to_vec())).collect()
    }

    /// Box holding every point with `U − min U ≤ 40ε`, slightly enlarged.
    pub fn search_box(&self, eps: f64) -> BoxDomain {
        let budget = TRUNCATION * eps;
        let xw = if self.a2 > 0.0 {
            (self.a2 / self.a1 + (budget / self.a1).sqrt()).sqrt()
        } else {
            (budget / self.a1).powf(0.25)
        };
        let side = |w: f64| [-1.2 * w, 1.2 * w];
        BoxDomain {
            bounds: vec![side(xw), side((budget / self.a4).sqrt()), side((budget / self.a5).sqrt())],
        }
    }
}

/// Closed form via `I_{±1/4}`, evaluated in log space; falls back to
/// quadrature when `a₂ ≤ 0`.
pub fn normalization_closed_form(form: &QuarticQuadraticForm, eps: f64) -> Result<Normalization> {
    form.validate()?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Invalid(format!("noise strength must be positive, got {eps}")));
    }
    if form.a2 <= 0.0 {
        let q = normalization_quadrature(&|x: ArrayView2<f64>| form.potential_batch(x), eps, &form.search_box(eps), 240)?;
        return Ok(Normalization {
            z: q.z,
            ln_z: q.ln_z,
            method: NormalizationMethod::Quadrature,
        });
    }
    let s = form.a2 * form.a2 / (8.0 * form.a1 * eps);
    let bessel = bessel_i_scaled(0.25, s)? + bessel_i_scaled(-0.25, s)?;
    let ln_z = 0.5 * (form.a2 / (8.0 * form.a1)).ln() + (PI * PI * eps / (form.a4 * form.a5).sqrt()).ln() + 2.0 * s
        - form.a3 / eps
        + bessel.ln();
    Ok(Normalization {
        z: ln_z.exp(),
        ln_z,
        method: NormalizationMethod::ClosedForm,
    })
}

/// How a density on `d` axes is reduced to the plotted axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Projection {
    /// Fix the remaining coordinates at `at`.
    Slice { at: f64 },
    /// Integrate the remaining coordinates over the domain (trapezoid rule).
    Marginalize,
}

impl Default for Projection {
    fn default() -> Self {
        Projection::Slice { at: 0.0 }
    }
}

/// `p = exp(−U/ε − ln Z)` on a tensor grid over the retained `axes`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub axes: Vec<usize>,
    pub coords: Vec<Vec<f64>>,
    /// Row-major, last retained axis fastest.
    pub values: Vec<f64>,
    pub eps: f64,
    pub ln_z: f64,
}

pub fn density_grid(
    u: &impl PotentialFn,
    eps: f64,
    ln_z: f64,
    domain: &BoxDomain,
    resolution: usize,
    axes: &[usize],
    projection: Projection,
) -> Result<DensityGrid> {
    let d = domain.dim();
    if axes.is_empty() || axes.iter().any(|&a| a >= d) || axes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid(format!("density axes must be increasing indices below {d}, got {axes:?}")));
    }
    if resolution < 2 {
        return Err(Error::Invalid("density grid needs at least 2 nodes per axis".into()));
    }
    let nodes = domain.nodes(resolution);
    let coords: Vec<Vec<f64>> = axes.iter().map(|&a| nodes[a].clone()).collect();
    let rest: Vec<usize> = (0..d).filter(|a| !axes.contains(a)).collect();
    let shape: Vec<usize> = coords.iter().map(Vec::len).collect();
    let len: usize = shape.iter().product();
    let mut values = Vec::with_capacity(len);
    match projection {
        Projection::Slice { at } => {
            let full: Vec<Vec<f64>> = (0..d)
                .map(|a| match axes.iter().position(|&k| k == a) {
                    Some(p) => coords[p].clone(),
                    None => vec![at],
                })
                .collect();
            for_each_chunk(&full, |_, pts| {
                let v = u(pts);
                nonfinite_at(&v, pts, "density potential")?;
                values.extend(v.iter().map(|&v| (-v / eps - ln_z).exp()));
                Ok(())
            })?;
        }
        Projection::Marginalize => {
            let rest_axes: Vec<Vec<f64>> = rest.iter().map(|&a| nodes[a].clone()).collect();
            let rest_w: Vec<Vec<f64>> = rest.iter().map(|&a| trapezoid_weights(resolution, domain.bounds[a][0], domain.bounds[a][1])).collect();
            let rest_shape: Vec<usize> = rest_axes.iter().map(Vec::len).collect();
            for flat in 0..len {
                let idx = unravel(flat, &shape);
                let mut acc = LogSum::new();
                let mut full: Vec<Vec<f64>> = vec![Vec::new(); d];
                for (p, &a) in axes.iter().enumerate() {
                    full[a] = vec![coords[p][idx[p]]];
                }
                for (p, &a) in rest.iter().enumerate() {
                    full[a] = rest_axes[p].clone();
                }
                for_each_chunk(&full, |start, pts| {
                    let v = u(pts);
                    nonfinite_at(&v, pts, "density potential")?;
                    for (r, &v) in v.iter().enumerate() {
                        let ri = unravel(start + r, &rest_shape);
                        let w: f64 = ri.iter().enumerate().map(|(k, &i)| rest_w[k][i]).product();
                        acc.add(w, -v / eps);
                    }
                    Ok(())
                })?;
                values.push((acc.ln() - ln_z).exp());
            }
        }
    }
    Ok(DensityGrid {
        axes: axes.to_vec(),
        coords,
        values,
        eps,
        ln_z,
    })
}

impl DensityGrid {
    pub fn shape(&self) -> Vec<usize> {
        self.coords.iter().map(Vec::len).collect()
    }

    fn point(&self, flat: usize) -> Vec<f64> {
        unravel(flat, &self.shape()).iter().enumerate().map(|(a, &i)| self.coords[a][i]).collect()
    }

    /// Trapezoid integral of the grid values.
    pub fn mass(&self) -> f64 {
        let shape = self.shape();
        let w: Vec<Vec<f64>> = self
            .coords
            .iter()
            .map(|c| trapezoid_weights(c.len(), c[0], *c.last().expect("nonempty axis")))
            .collect();
        self.values
            .iter()
            .enumerate()
            .map(|(flat, &v)| v * unravel(flat, &shape).iter().enumerate().map(|(a, &i)| w[a][i]).product::<f64>())
            .sum()
    }

    /// Shannon entropy of the grid values normalized to a discrete distribution.
    pub fn entropy(&self) -> f64 {
        let total: f64 = self.values.iter().sum();
        -self
            .values
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| {
                let p = v / total;
                p * p.ln()
            })
            .sum::<f64>()
    }

    /// Nodes strictly larger than all axis neighbours, sorted by value, descending.
    pub fn local_maxima(&self) -> Vec<(Vec<f64>, f64)> {
        let shape = self.shape();
        let mut stride = vec![1usize; shape.len()];
        for a in (0..shape.len().saturating_sub(1)).rev() {
            stride[a] = stride[a + 1] * shape[a + 1];
        }
        let mut out: Vec<(Vec<f64>, f64)> = (0..self.values.len())
            .filter(|&flat| {
                let idx = unravel(flat, &shape);
                let v = self.values[flat];
                (0..shape.len()).all(|a| {
                    let below = idx[a] == 0 || self.values[flat - stride[a]] < v;
                    let above = idx[a] + 1 == shape[a] || self.values[flat + stride[a]] < v;
                    below && above
                })
            })
            .map(|flat| (self.point(flat), self.values[flat]))
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1));
        out
    }

    fn require_plane(&self) -> Result<()> {
        if self.coords.len() == 2 {
            Ok(())
        } else {
            Err(Error::Invalid(format!("planar export needs 2 axes, grid has {}", self.coords.len())))
        }
    }

    /// CSV with header `x,y,value`.
    pub fn to_csv(&self) -> Result<String> {
        self.require_plane()?;
        let mut s = String::from("x,y,value\n");
        for (flat, v) in self.values.iter().enumerate() {
            let p = self.point(flat);
            let _ = writeln!(s, "{:e},{:e},{:e}", p[0], p[1], v);
        }
        Ok(s)
    }

    /// Heatmap with a fixed five-stop colormap, first axis horizontal.
    pub fn to_svg(&self, title: &str) -> Result<String> {
        self.require_plane()?;
        const STOPS: [[f64; 3]; 5] = [[68.0, 1.0, 84.0], [59.0, 82.0, 139.0], [33.0, 145.0, 140.0], [94.0, 201.0, 98.0], [253.0, 231.0, 37.0]];
        let (nx, ny) = (self.coords[0].len(), self.coords[1].len());
        let max = self.values.iter().copied().fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
        let cell = 4usize;
        let (w, h) = (nx * cell, ny * cell);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{}" shape-rendering="crispEdges">"#, h + 20);
        let _ = writeln!(s, r#"<text x="2" y="14" font-family="sans-serif" font-size="12">{title}</text>"#);
        for ix in 0..nx {
            for iy in 0..ny {
                let t = (self.values[ix * ny + iy] / max).clamp(0.0, 1.0) * 4.0;
                let k = (t.floor() as usize).min(3);
                let f = t - k as f64;
                let c: Vec<u8> = (0..3).map(|j| (STOPS[k][j] + f * (STOPS[k + 1][j] - STOPS[k][j])).round() as u8).collect();
                let _ = writeln!(
                    s,
                    r##"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="#{:02x}{:02x}{:02x}"/>"##,
                    ix * cell,
                    20 + (ny - 1 - iy) * cell,
                    c[0],
                    c[1],
                    c[2]
                );
            }
        }
        s.push_str("</svg>\n");
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalMinimum {
    pub point: Vec<f64>,
    pub quasipotential: f64,
}

fn cholesky_solve(h: &[f64], g: &[f64]) -> Option<Vec<f64>> {
    let d = g.len();
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = h[i * d + j] - (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        y[i] = (g[i] - (0..i).map(|k| l[i * d + k] * y[k]).sum::<f64>()) / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        x[i] = (y[i] - (i + 1..d).map(|k| l[k * d + i] * x[k]).sum::<f64>()) / l[i * d + i];
    }
    Some(x)
}

/// Local minimizers of `U` reached by damped Newton descent from a
/// `starts_per_axis^d` grid of starting points; runs that leave `domain` are
/// dropped and coincident endpoints merged.
pub fn local_minima(model: &SymbolicModel<f64>, domain: &BoxDomain, starts_per_axis: usize) -> Result<Vec<LocalMinimum>> {
    let d = model.library().dim();
    if domain.dim() != d {
        return Err(Error::Dimension {
            context: "minimum search domain",
            expected: d,
            got: domain.dim(),
        });
    }
    let diam = domain.bounds.iter().map(|[lo, hi]| (hi - lo).powi(2)).sum::<f64>().sqrt();
    let starts = domain.scaled(1.0 - 1.0 / starts_per_axis.max(2) as f64).nodes(starts_per_axis.max(2));
    let total: usize = starts.iter().map(Vec::len).product();
    let shape: Vec<usize> = starts.iter().map(Vec::len).collect();
    let mut found: Vec<LocalMinimum> = Vec::new();
    for flat in 0..total {
        let mut x: Vec<f64> = unravel(flat, &shape).iter().enumerate().map(|(a, &i)| starts[a][i]).collect();
        let mut converged = false;
        for _ in 0..500 {
            let g = model.potential_gradient(&x)?;
            let h = model.potential_hessian(&x)?;
            let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gnorm == 0.0 {
                converged = true;
                break;
            }
            let step = cholesky_solve(&h, &g)
                .map(|p| p.iter().map(|v| -v).collect::<Vec<_>>())
                .filter(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt() < diam)
                .unwrap_or_else(|| g.iter().map(|v| -v / gnorm * 0.05 * diam).collect());
            let slope: f64 = g.iter().zip(&step).map(|(a, b)| a * b).sum();
            let v0 = model.potential(&x)?;
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + alpha * b).collect();
                if model.potential(&trial)? <= v0 + 1e-4 * alpha * slope {
                    x = trial;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            let moved = alpha * step.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !accepted || moved < 1e-13 * diam {
                converged = true;
                break;
            }
            if !domain.contains(&x) {
                break;
            }
        }
        if !converged || !domain.contains(&x) {
            continue;
        }
        let h = model.potential_hessian(&x)?;
        if cholesky_solve(&h, &vec![0.0; d]).is_none() {
            continue;
        }
        let close = |m: &LocalMinimum| m.point.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() < 1e-6 * diam;
        if !found.iter().any(close) {
            found.push(LocalMinimum {
                quasipotential: model.quasipotential(&x)?,
                point: x,
            });
        }
    }
    found.sort_by(|a, b| a.point.partial_cmp(&b.point).unwrap_or(std::cmp::Ordering::Equal));
    Ok(found)
}
