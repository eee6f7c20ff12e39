//! Long-term prediction error and landscape comparison.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dynamics::{BoxDomain, RkWorkspace, SamplingPlan, VectorField};
use crate::quasipotential::PotentialFn;
use crate::{rng, Error, Result};

/// True and predicted states at shared sample times, one row per time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair {
    pub times: Vec<f64>,
    pub truth: Array2<f64>,
    pub predicted: Array2<f64>,
}

impl TrajectoryPair {
    pub fn new(times: Vec<f64>, truth: Array2<f64>, predicted: Array2<f64>) -> Result<Self> {
        if truth.dim() != predicted.dim() || truth.nrows() != times.len() {
            return Err(Error::Dimension {
                context: "trajectory pair",
                expected: truth.len(),
                got: predicted.len(),
            });
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid("trajectory times must be increasing".into()));
        }
        Ok(Self { times, truth, predicted })
    }

    /// Columns `t, <name>_true..., <name>_pred...`.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = String::from("t");
        for suffix in ["true", "pred"] {
            for n in names {
                let _ = write!(s, ",{n}_{suffix}");
            }
        }
        s.push('\n');
        for (i, t) in self.times.iter().enumerate() {
            let _ = write!(s, "{t:e}");
            for v in self.truth.row(i).iter().chain(self.predicted.row(i).iter()) {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        }
        s
    }
}

/// `‖X_pred − X_true‖₂ / ‖X_true‖₂` over all sampled states; `None` when
/// the reference trajectory has zero norm.
pub fn prediction_error(pair: &TrajectoryPair) -> Option<f64> {
    let den = pair.truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 || pair.times.is_empty() {
        return None;
    }
    let num = (&pair.predicted - &pair.truth).iter().map(|v| v * v).sum::<f64>().sqrt();
    Some(num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub errors: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

impl ErrorSummary {
    pub fn from_errors(errors: Vec<f64>) -> Self {
        let count = errors.len();
        if count == 0 {
            return Self {
                errors,
                mean: 0.0,
                std: 0.0,
                count,
            };
        }
        let mean = errors.iter().sum::<f64>() / count as f64;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / count as f64;
        Self {
            errors,
            mean,
            std: var.sqrt(),
            count,
        }
    }

    pub fn display(&self) -> String {
        format!("{:.3e} ± {:.3e} (n = {})", self.mean, self.std, self.count)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("trajectory,error\n");
        for (k, e) in self.errors.iter().enumerate() {
            let _ = writeln!(s, "{k},{e:e}");
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct HoldoutReport {
    pub summary: ErrorSummary,
    /// Predicted trajectories that became non-finite.
    pub failures: usize,
    /// Reference trajectories with zero norm.
    pub undefined: usize,
    /// The first few pairs, for overlays.
    pub examples: Vec<TrajectoryPair>,
}

/// Snapshot schedule of `plan`: step counts of `t_j` and `t_j + h`, `1 ≤ j ≤ M`.
fn schedule(plan: &SamplingPlan) -> Vec<usize> {
    let per = |span: f64| (span / plan.integrator_step).round() as usize;
    let (stride, h) = (per(plan.stride), per(plan.h));
    let mut steps: Vec<usize> = (1..=plan.snapshots).flat_map(|j| [j * stride, j * stride + h]).collect();
    steps.sort_unstable();
    steps.dedup();
    steps
}

fn simulate<F: VectorField<f64> + ?Sized>(f: &F, x0: &[f64], dt: f64, steps: &[usize]) -> Option<Array2<f64>> {
    let mut ws = RkWorkspace::new(x0.len());
    let mut x = x0.to_vec();
    let mut out = Array2::zeros((steps.len(), x0.len()));
    let mut done = 0;
    for (row, &target) in steps.iter().enumerate() {
        while done < target {
            ws.rk4(f, &mut x, dt).ok()?;
            done += 1;
        }
        out.row_mut(row).assign(&ndarray::ArrayView1::from(&x[..]));
    }
    Some(out)
}

/// Integrates `truth` and `model` with RK4 from `count` fresh initial
/// states in `plan.domain ∩ region` and compares them on the snapshot schedule.
pub fn evaluate_holdout<F, G>(
    truth: &F,
    model: &G,
    plan: &SamplingPlan,
    count: usize,
    seed: u64,
    region: &dyn Fn(&[f64]) -> bool,
    keep_examples: usize,
) -> Result<HoldoutReport>
where
    F: VectorField<f64> + ?Sized,
    G: VectorField<f64> + ?Sized,
{
    plan.validate()?;
    let steps = schedule(plan);
    let times: Vec<f64> = steps.iter().map(|&s| s as f64 * plan.integrator_step).collect();
    let mut errors = Vec::with_capacity(count);
    let (mut failures, mut undefined) = (0, 0);
    let mut examples = Vec::new();
    let max_attempts = 1000 * count.max(1) as u64;
    for k in 0..count {
        let mut attempt = 0u64;
        let reference = loop {
            if attempt >= max_attempts {
                return Err(Error::TooManyRejections {
                    rejected: attempt as usize,
                    requested: count,
                });
            }
            let x0: Vec<f64> = plan.domain.sample(&mut rng::stream2(seed, k as u64, attempt));
            attempt += 1;
            if !region(&x0) {
                continue;
            }
            if let Some(traj) = simulate(truth, &x0, plan.integrator_step, &steps) {
                break (x0, traj);
            }
        };
        let (x0, true_traj) = reference;
        let Some(pred) = simulate(model, &x0, plan.integrator_step, &steps) else {
            failures += 1;
            continue;
        };
        let pair = TrajectoryPair::new(times.clone(), true_traj, pred)?;
        match prediction_error(&pair) {
            Some(e) => errors.push(e),
            None => undefined += 1,
        }
        if examples.len() < keep_examples {
            examples.push(pair);
        }
    }
    Ok(HoldoutReport {
        summary: ErrorSummary::from_errors(errors),
        failures,
        undefined,
        examples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandscapeDiscrepancy {
    pub max_abs: f64,
    pub rms: f64,
    pub points: usize,
}

/// Compares two landscapes on a tensor grid after subtracting each one's grid
/// minimum. With `level`, only points where the aligned `U_a` is below it count.
pub fn landscape_compare(
    u_a: &impl PotentialFn,
    u_b: &impl PotentialFn,
    domain: &BoxDomain,
    resolution: usize,
    level: Option<f64>,
) -> Result<LandscapeDiscrepancy> {
    domain.validate()?;
    let axes = domain.nodes(resolution.max(2));
    let total: usize = axes.iter().map(Vec::len).product();
    let d = axes.len();
    let mut pts = Array2::zeros((total, d));
    for (flat, mut row) in pts.rows_mut().into_iter().enumerate() {
        let mut rem = flat;
        for a in (0..d).rev() {
            row[a] = axes[a][rem % axes[a].len()];
            rem /= axes[a].len();
        }
    }
    let eval = |u: &dyn Fn(ArrayView2<f64>) -> ndarray::Array1<f64>| {
        let v = u(pts.view());
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        v - min
    };
    let a = eval(u_a);
    let b = eval(u_b);
    let (mut max_abs, mut sq, mut n) = (0.0f64, 0.0, 0usize);
    for (x, y) in a.iter().zip(&b) {
        if level.is_some_and(|l| *x >= l) {
            continue;
        }
        let e = (x - y).abs();
        max_abs = max_abs.max(e);
        sq += e * e;
        n += 1;
    }
    if !max_abs.is_finite() {
        return Err(Error::NonFinite {
            context: "landscape comparison".into(),
            state: Vec::new(),
        });
    }
    Ok(LandscapeDiscrepancy {
        max_abs,
        rms: if n > 0 { (sq / n as f64).sqrt() } else { 0.0 },
        points: n,
    })
}
