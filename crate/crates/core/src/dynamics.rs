//! Benchmark vector fields, fixed-step Runge–Kutta integrators and snapshot
//! dataset generation.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::all_finite;
use crate::rng;
use crate::{Error, Result, Scalar};

/// An autonomous vector field `ẋ = f(x)` on `R^d`.
pub trait VectorField<T: Scalar> {
    fn dim(&self) -> usize;
    /// Writes `f(x)` into `out`; both slices have length `dim()`.
    fn eval_into(&self, x: &[T], out: &mut [T]);
}

impl<T: Scalar, F: VectorField<T> + ?Sized> VectorField<T> for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval_into(&self, x: &[T], out: &mut [T]) {
        (**self).eval_into(x, out)
    }
}

/// Adapts a closure into a [`VectorField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<T: Scalar, F: Fn(&[T], &mut [T])> VectorField<T> for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval_into(&self, x: &[T], out: &mut [T]) {
        (self.f)(x, out)
    }
}

/// Parameters of the rotating-frame graphene resonator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResonatorParams {
    pub omega0: f64,
    pub omega_f: f64,
    pub zeta: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ResonatorParams {
    fn default() -> Self {
        Self {
            omega0: 1.0,
            omega_f: 1.0018,
            zeta: 0.00045,
            alpha: 33.0,
            beta: 1.4e-5,
        }
    }
}

/// Built-in benchmark systems.
#[derive(Debug, Clone, PartialEq)]
pub enum System<T> {
    /// Three-dimensional non-gradient double well with exact quasipotential
    /// `U = x⁴ − 2x² + y² + z² + 1`.
    Archetypal,
    /// Slow-flow (P, Q) dynamics of a driven Duffing membrane.
    Resonator(ResonatorCoeffs<T>),
}

/// Resonator parameters folded into the three coefficients that appear in the field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResonatorCoeffs<T> {
    pub params: ResonatorParams,
    detuning: T,
    cubic: T,
    zeta: T,
    forcing: T,
}

impl<T: Scalar> System<T> {
    pub fn resonator(params: ResonatorParams) -> Self {
        let wf = params.omega_f;
        System::Resonator(ResonatorCoeffs {
            params,
            detuning: T::lit((params.omega0 * params.omega0 - wf * wf) / (2.0 * wf)),
            cubic: T::lit(3.0 / 8.0 * params.alpha / wf),
            zeta: T::lit(params.zeta),
            forcing: T::lit(params.beta / (2.0 * wf)),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            System::Archetypal => "archetypal",
            System::Resonator(_) => "resonator",
        }
    }

    pub fn parameters(&self) -> Vec<(&'static str, f64)> {
        match self {
            System::Archetypal => Vec::new(),
            System::Resonator(c) => vec![
                ("omega0", c.params.omega0),
                ("omega_f", c.params.omega_f),
                ("zeta", c.params.zeta),
                ("alpha", c.params.alpha),
                ("beta", c.params.beta),
            ],
        }
    }

    pub fn variable_names(&self) -> Vec<String> {
        let names: &[&str] = match self {
            System::Archetypal => &["x", "y", "z"],
            System::Resonator(_) => &["P", "Q"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// Stable equilibria (approximate for the resonator).
    pub fn stable_equilibria(&self) -> Vec<Vec<f64>> {
        match self {
            System::Archetypal => vec![vec![-1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]],
            System::Resonator(_) => vec![vec![-0.007, -0.011], vec![0.004, -0.001]],
        }
    }
}

impl<T: Scalar> VectorField<T> for System<T> {
    fn dim(&self) -> usize {
        match self {
            System::Archetypal => 3,
            System::Resonator(_) => 2,
        }
    }

    fn eval_into(&self, s: &[T], out: &mut [T]) {
        match self {
            System::Archetypal => {
                let (x, y, z) = (s[0], s[1], s[2]);
                let two = T::lit(2.0);
                let c = two * (x * x * x - x);
                out[0] = -c - y - z;
                out[1] = -y + c;
                out[2] = -z + c;
            }
            System::Resonator(k) => {
                let (p, q) = (s[0], s[1]);
                let r2 = p * p + q * q;
                out[0] = k.detuning * q - k.zeta * p + k.cubic * q * r2;
                out[1] = -k.detuning * p - k.zeta * q - k.cubic * p * r2 - k.forcing;
            }
        }
    }
}

/// Evaluates `f(x)` with a dimension check.
pub fn eval_field<T: Scalar, F: VectorField<T> + ?Sized>(field: &F, x: &[T]) -> Result<Vec<T>> {
    if x.len() != field.dim() {
        return Err(Error::Dimension {
            context: "eval_field",
            expected: field.dim(),
            got: x.len(),
        });
    }
    let mut out = vec![T::zero(); x.len()];
    field.eval_into(x, &mut out);
    Ok(out)
}

/// Scratch buffers for repeated Runge–Kutta steps in dimension `d`.
#[derive(Debug, Clone)]
pub struct RkWorkspace<T> {
    k: [Vec<T>; 4],
    tmp: Vec<T>,
}

impl<T: Scalar> RkWorkspace<T> {
    pub fn new(d: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![T::zero(); d]),
            tmp: vec![T::zero(); d],
        }
    }

    /// Classical four-stage Runge–Kutta step, in place.
    pub fn rk4<F: VectorField<T> + ?Sized>(&mut self, f: &F, x: &mut [T], dt: T) -> Result<()> {
        let half = dt * T::lit(0.5);
        let [k1, k2, k3, k4] = &mut self.k;
        let tmp = &mut self.tmp;
        f.eval_into(x, k1);
        for i in 0..x.len() {
            tmp[i] = x[i] + half * k1[i];
        }
        f.eval_into(tmp, k2);
        for i in 0..x.len() {
            tmp[i] = x[i] + half * k2[i];
        }
        f.eval_into(tmp, k3);
        for i in 0..x.len() {
            tmp[i] = x[i] + dt * k3[i];
        }
        f.eval_into(tmp, k4);
        let sixth = dt / T::lit(6.0);
        for i in 0..x.len() {
            tmp[i] = x[i] + sixth * (k1[i] + T::lit(2.0) * (k2[i] + k3[i]) + k4[i]);
        }
        if !all_finite(tmp) {
            return Err(Error::non_finite("rk4 step", x));
        }
        x.copy_from_slice(tmp);
        Ok(())
    }

    /// Explicit midpoint rule, in place.
    pub fn rk2<F: VectorField<T> + ?Sized>(&mut self, f: &F, x: &mut [T], dt: T) -> Result<()> {
        let half = dt * T::lit(0.5);
        let [k1, k2, ..] = &mut self.k;
        let tmp = &mut self.tmp;
        f.eval_into(x, k1);
        for i in 0..x.len() {
            tmp[i] = x[i] + half * k1[i];
        }
        f.eval_into(tmp, k2);
        for i in 0..x.len() {
            tmp[i] = x[i] + dt * k2[i];
        }
        if !all_finite(tmp) {
            return Err(Error::non_finite("rk2 step", x));
        }
        x.copy_from_slice(tmp);
        Ok(())
    }
}

fn check_step<T: Scalar>(x: &[T], d: usize, dt: T) -> Result<()> {
    if x.len() != d {
        return Err(Error::Dimension {
            context: "runge-kutta step",
            expected: d,
            got: x.len(),
        });
    }
    if !(dt > T::zero()) {
        return Err(Error::Invalid(format!("time step must be positive, got {dt}")));
    }
    Ok(())
}

/// One classical RK4 step from `x` over `dt`.
pub fn rk4_step<T: Scalar, F: VectorField<T> + ?Sized>(f: &F, x: &[T], dt: T) -> Result<Vec<T>> {
    check_step(x, f.dim(), dt)?;
    let mut out = x.to_vec();
    RkWorkspace::new(x.len()).rk4(f, &mut out, dt)?;
    Ok(out)
}

/// One explicit-midpoint (second order) step from `x` over `dt`.
pub fn rk2_step<T: Scalar, F: VectorField<T> + ?Sized>(f: &F, x: &[T], dt: T) -> Result<Vec<T>> {
    check_step(x, f.dim(), dt)?;
    let mut out = x.to_vec();
    RkWorkspace::new(x.len()).rk2(f, &mut out, dt)?;
    Ok(out)
}

/// Integrates with RK4 for `steps` steps, returning the state after every
/// `record_every` steps (the initial state included).
pub fn integrate_rk4<T: Scalar, F: VectorField<T> + ?Sized>(
    f: &F,
    x0: &[T],
    dt: T,
    steps: usize,
    record_every: usize,
) -> Result<Vec<Vec<T>>> {
    check_step(x0, f.dim(), dt)?;
    let record_every = record_every.max(1);
    let mut ws = RkWorkspace::new(x0.len());
    let mut x = x0.to_vec();
    let mut out = vec![x.clone()];
    for s in 1..=steps {
        ws.rk4(f, &mut x, dt)?;
        if s % record_every == 0 {
            out.push(x.clone());
        }
    }
    Ok(out)
}

/// Axis-aligned box `Π [lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub bounds: Vec<[f64; 2]>,
}

impl BoxDomain {
    pub fn new(bounds: Vec<[f64; 2]>) -> Result<Self> {
        let b = Self { bounds };
        b.validate()?;
        Ok(b)
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bounds.is_empty() {
            return Err(Error::Invalid("domain has no axes".into()));
        }
        for (i, [lo, hi]) in self.bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Invalid(format!("domain axis {i}: need lo < hi, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn contains<T: Scalar>(&self, x: &[T]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(&self.bounds).all(|(v, [lo, hi])| {
                let v = v.as_f64();
                v >= *lo && v <= *hi
            })
    }

    pub fn sample<T: Scalar, R: Rng>(&self, rng: &mut R) -> Vec<T> {
        self.bounds
            .iter()
            .map(|[lo, hi]| T::lit(lo + (hi - lo) * rng.random::<f64>()))
            .collect()
    }

    pub fn volume(&self) -> f64 {
        self.bounds.iter().map(|[lo, hi]| hi - lo).product()
    }

    /// Same center, every side multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let bounds = self
            .bounds
            .iter()
            .map(|[lo, hi]| {
                let (c, r) = (0.5 * (lo + hi), 0.5 * (hi - lo) * factor);
                [c - r, c + r]
            })
            .collect();
        Self { bounds }
    }

    /// `n` evenly spaced nodes per axis, endpoints included.
    pub fn nodes(&self, n: usize) -> Vec<Vec<f64>> {
        self.bounds
            .iter()
            .map(|[lo, hi]| (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1).max(1) as f64).collect())
            .collect()
    }
}

/// How snapshot pairs are drawn from simulated trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub domain: BoxDomain,
    /// Number of trajectories `N`.
    pub trajectories: usize,
    /// Snapshot pairs per trajectory `M`.
    pub snapshots: usize,
    /// Time offset within a pair.
    pub h: f64,
    /// Snapshot times are `t_j = stride · j`, `1 ≤ j ≤ M`.
    pub stride: f64,
    /// RK4 step; `h / 5` by default.
    pub integrator_step: f64,
    pub seed: u64,
}

impl SamplingPlan {
    pub fn new(domain: BoxDomain, trajectories: usize, snapshots: usize, h: f64, stride: f64, seed: u64) -> Self {
        Self {
            domain,
            trajectories,
            snapshots,
            h,
            stride,
            integrator_step: h / 5.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        if self.trajectories == 0 || self.snapshots == 0 {
            return Err(Error::Invalid("sampling plan needs N >= 1 and M >= 1".into()));
        }
        for (name, v) in [("h", self.h), ("stride", self.stride), ("integrator_step", self.integrator_step)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Invalid(format!("sampling plan: {name} must be positive, got {v}")));
            }
        }
        self.steps_per(self.h, "h")?;
        self.steps_per(self.stride, "stride")?;
        Ok(())
    }

    fn steps_per(&self, span: f64, name: &str) -> Result<usize> {
        let n = (span / self.integrator_step).round();
        if n < 1.0 || (n * self.integrator_step - span).abs() > 1e-9 * span {
            return Err(Error::Invalid(format!(
                "sampling plan: {name} = {span} is not a multiple of the integrator step {}",
                self.integrator_step
            )));
        }
        Ok(n as usize)
    }

    /// Trajectory horizon `t_M + h`.
    pub fn horizon(&self) -> f64 {
        self.stride * self.snapshots as f64 + self.h
    }
}

/// Snapshot pairs `(x0, xh)` and the finite-difference velocities `(xh − x0)/h`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotDataset<T> {
    pub x0: Array2<T>,
    pub xh: Array2<T>,
    pub h: T,
    pub plan: Option<SamplingPlan>,
    /// Trajectories that blew up and were redrawn during sampling.
    pub rejections: usize,
}

impl<T: Scalar> SnapshotDataset<T> {
    pub fn from_pairs(x0: Array2<T>, xh: Array2<T>, h: T) -> Result<Self> {
        if x0.dim() != xh.dim() {
            return Err(Error::Dimension {
                context: "snapshot pairs",
                expected: x0.len(),
                got: xh.len(),
            });
        }
        if !(h > T::zero()) {
            return Err(Error::Invalid("snapshot offset h must be positive".into()));
        }
        Ok(Self {
            x0,
            xh,
            h,
            plan: None,
            rejections: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.x0.ncols()
    }

    pub fn len(&self) -> usize {
        self.x0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `Y = (xh − x0) / h`, one row per pair.
    pub fn velocities(&self) -> Array2<T> {
        (&self.xh - &self.x0) / self.h
    }
}

/// Simulates `plan.trajectories` trajectories from uniform initial states and
/// records `(x(t_j), x(t_j + h))` for `j = 1..=M`.
pub fn sample_trajectories<T: Scalar, F: VectorField<T> + ?Sized>(
    field: &F,
    plan: &SamplingPlan,
) -> Result<SnapshotDataset<T>> {
    plan.validate()?;
    let d = field.dim();
    if plan.domain.dim() != d {
        return Err(Error::Dimension {
            context: "sampling domain",
            expected: d,
            got: plan.domain.dim(),
        });
    }
    let dt = T::lit(plan.integrator_step);
    let h_steps = plan.steps_per(plan.h, "h")?;
    let stride_steps = plan.steps_per(plan.stride, "stride")?;
    let m = plan.snapshots;
    let total = stride_steps * m + h_steps;

    // slot[s] = Some(k) means the state after s steps is stored in buffer k
    let mut slot: Vec<Option<usize>> = vec![None; total + 1];
    let mut wanted = Vec::with_capacity(2 * m);
    for j in 1..=m {
        for s in [j * stride_steps, j * stride_steps + h_steps] {
            if slot[s].is_none() {
                slot[s] = Some(wanted.len());
                wanted.push(s);
            }
        }
    }

    let n = plan.trajectories;
    let mut x0 = Array2::zeros((n * m, d));
    let mut xh = Array2::zeros((n * m, d));
    let mut ws = RkWorkspace::new(d);
    let mut states = vec![vec![T::zero(); d]; wanted.len()];
    let max_attempts = 100 * n;
    let mut rejections = 0usize;

    for i in 0..n {
        let mut attempt = 0u64;
        loop {
            let mut r = rng::stream2(plan.seed, i as u64, attempt);
            let mut x: Vec<T> = plan.domain.sample(&mut r);
            let mut ok = true;
            for s in 1..=total {
                if ws.rk4(field, &mut x, dt).is_err() {
                    ok = false;
                    break;
                }
                if let Some(k) = slot[s] {
                    states[k].copy_from_slice(&x);
                }
            }
            if ok {
                break;
            }
            rejections += 1;
            attempt += 1;
            if rejections >= max_attempts {
                return Err(Error::TooManyRejections {
                    rejected: rejections,
                    requested: n,
                });
            }
        }
        for j in 1..=m {
            let row = i * m + j - 1;
            let a = &states[slot[j * stride_steps].unwrap()];
            let b = &states[slot[j * stride_steps + h_steps].unwrap()];
            for c in 0..d {
                x0[[row, c]] = a[c];
                xh[[row, c]] = b[c];
            }
        }
    }

    Ok(SnapshotDataset {
        x0,
        xh,
        h: T::lit(plan.h),
        plan: Some(plan.clone()),
        rejections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_field(d: usize) -> FnField<impl Fn(&[f64], &mut [f64])> {
        FnField::new(d, |_: &[f64], out: &mut [f64]| out.iter_mut().for_each(|v| *v = 0.0))
    }

    #[test]
    fn archetypal_equilibria_and_hand_values() {
        let s = System::<f64>::Archetypal;
        assert_eq!(eval_field(&s, &[-1.0, 0.0, 0.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(eval_field(&s, &[1.0, 0.0, 0.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(eval_field(&s, &[0.0, 0.0, 0.0]).unwrap(), vec![0.0; 3]);
        // x³ − x = 0 at x = 1, so only the linear y, z terms remain
        assert_eq!(eval_field(&s, &[1.0, 1.0, 0.0]).unwrap(), vec![-1.0, -1.0, 0.0]);
    }

    #[test]
    fn resonator_stable_fixed_points() {
        let s = System::<f64>::resonator(ResonatorParams::default());
        let f = eval_field(&s, &[0.004, -0.001]).unwrap();
        assert!(crate::linalg::norm(&f) < 1e-4);
        let f = eval_field(&s, &[-0.007, -0.011]).unwrap();
        assert!(crate::linalg::norm(&f) < 1e-4);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let s = System::<f64>::Archetypal;
        assert!(matches!(eval_field(&s, &[1.0, 2.0]), Err(Error::Dimension { .. })));
        assert!(rk4_step(&s, &[1.0], 0.1).is_err());
        assert!(rk4_step(&s, &[1.0, 0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn zero_field_is_stationary() {
        let f = zero_field(2);
        assert_eq!(rk4_step(&f, &[0.3, -2.0], 0.1).unwrap(), vec![0.3, -2.0]);
        assert_eq!(rk2_step(&f, &[0.3, -2.0], 0.1).unwrap(), vec![0.3, -2.0]);
    }

    #[test]
    fn linear_decay_accuracy() {
        let f = FnField::new(1, |x: &[f64], out: &mut [f64]| out[0] = -x[0]);
        let exact = (-0.1f64).exp();
        assert!((rk4_step(&f, &[1.0], 0.1).unwrap()[0] - exact).abs() < 1e-7);
        // any two-stage second-order RK gives 1 − h + h²/2 on this field; the
        // error is the third-order remainder ≈ h³/6
        let rk2 = rk2_step(&f, &[1.0], 0.1).unwrap()[0];
        assert!((rk2 - 0.905).abs() < 1e-15);
        assert!((rk2 - exact).abs() < 0.1f64.powi(3) / 6.0);
    }

    #[test]
    fn blow_up_reports_state() {
        let f = FnField::new(1, |x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0] * 1e300);
        match rk4_step(&f, &[1e10], 1.0) {
            Err(Error::NonFinite { state, .. }) => assert_eq!(state, vec![1e10]),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn single_pair_on_zero_field() {
        let plan = SamplingPlan::new(BoxDomain::new(vec![[-1.0, 1.0]]).unwrap(), 1, 1, 0.5, 1.0, 3);
        let ds: SnapshotDataset<f64> = sample_trajectories(&zero_field(1), &plan).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.x0, ds.xh);
        assert_eq!(ds.velocities()[[0, 0]], 0.0);
    }

    #[test]
    fn plan_validation() {
        let dom = BoxDomain::new(vec![[0.0, 1.0]]).unwrap();
        let mut p = SamplingPlan::new(dom.clone(), 1, 1, 0.01, 0.1, 0);
        assert!(p.validate().is_ok());
        p.stride = 0.1037;
        assert!(p.validate().is_err());
        assert!(BoxDomain::new(vec![[1.0, 1.0]]).is_err());
        assert!(SamplingPlan::new(dom, 0, 1, 0.1, 0.1, 0).validate().is_err());
    }

    #[test]
    fn escaping_trajectories_are_resampled() {
        // Blows up for x > 0.5 within the horizon, stable otherwise.
        let f = FnField::new(1, |x: &[f64], out: &mut [f64]| {
            out[0] = if x[0] > 0.5 { x[0].powi(3) * 1e200 } else { -x[0] }
        });
        let plan = SamplingPlan::new(BoxDomain::new(vec![[-1.0, 1.0]]).unwrap(), 20, 2, 0.05, 0.1, 11);
        let ds: SnapshotDataset<f64> = sample_trajectories(&f, &plan).unwrap();
        assert_eq!(ds.len(), 40);
        assert!(ds.rejections > 0);
        assert!(ds.x0.iter().all(|v| v.is_finite() && *v <= 0.5));
    }
}
