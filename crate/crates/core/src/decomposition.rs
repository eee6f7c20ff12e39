//! Neural orthogonal decomposition `f_θ = −∇V_θ + g_θ`.
//!
//! `V_θ(x) = η_v·[V_nn(y) + |y|²]` and `g_θ(x) = η_g·g_nn(y)` with
//! `y = (x − μ)/σ`. The scalers `μ, σ, η_v, η_g` are fixed when the model is
//! built and never touched by training.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::RepresentativeSubset;
use crate::dynamics::{SnapshotDataset, VectorField};
use crate::neuralnet::{adam_step, AdamConfig, AdamState, Mlp};
use crate::rng;
use crate::{Error, Result, Scalar};

const SIGMA_FLOOR: f64 = 1e-12;
const ORTH_GUARD: f64 = 1e-12;

/// Frozen input normalization and output scales.
#[derive(Debug, Clone, PartialEq)]
pub struct Scalers<T> {
    pub mu: Array1<T>,
    pub sigma: Array1<T>,
    pub eta_v: T,
    pub eta_g: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionModel<T> {
    pub v_net: Mlp<T>,
    pub g_net: Mlp<T>,
    scalers: Scalers<T>,
}

/// Piecewise orthogonality weight `w(z, δ) = z²` for `z ≥ 0`, `δ z²` otherwise.
pub fn orthogonality_weight<T: Scalar>(z: T, delta: T) -> T {
    if z >= T::zero() {
        z * z
    } else {
        delta * z * z
    }
}

fn orthogonality_weight_derivative<T: Scalar>(z: T, delta: T) -> T {
    if z >= T::zero() {
        T::lit(2.0) * z
    } else {
        T::lit(2.0) * delta * z
    }
}

impl<T: Scalar> DecompositionModel<T> {
    pub fn from_parts(v_net: Mlp<T>, g_net: Mlp<T>, scalers: Scalers<T>) -> Result<Self> {
        let d = scalers.mu.len();
        if scalers.sigma.len() != d {
            return Err(Error::Dimension {
                context: "scaler sigma",
                expected: d,
                got: scalers.sigma.len(),
            });
        }
        if v_net.input_dim() != d || v_net.output_dim() != 1 {
            return Err(Error::Invalid(format!(
                "potential network must map {d} -> 1, got {:?}",
                v_net.layer_sizes()
            )));
        }
        if g_net.input_dim() != d || g_net.output_dim() != d {
            return Err(Error::Invalid(format!(
                "circulation network must map {d} -> {d}, got {:?}",
                g_net.layer_sizes()
            )));
        }
        if scalers.sigma.iter().any(|s| !(*s > T::lit(SIGMA_FLOOR))) {
            return Err(Error::Degenerate(format!("sigma components must exceed {SIGMA_FLOOR}")));
        }
        if !(scalers.eta_v > T::zero() && scalers.eta_g > T::zero()) {
            return Err(Error::Degenerate("output scales eta_v, eta_g must be positive".into()));
        }
        Ok(Self { v_net, g_net, scalers })
    }

    pub fn scalers(&self) -> &Scalers<T> {
        &self.scalers
    }

    pub fn dim(&self) -> usize {
        self.scalers.mu.len()
    }

    /// `y = (x − μ)/σ` row-wise.
    pub fn normalize(&self, x: ArrayView2<T>) -> Array2<T> {
        (&x - &self.scalers.mu) / &self.scalers.sigma
    }

    pub fn potential_batch(&self, x: ArrayView2<T>) -> Array1<T> {
        let y = self.normalize(x);
        let out = self.v_net.forward_batch(y.view());
        let harmonic = y.mapv(|v| v * v).sum_axis(Axis(1));
        (&out.column(0) + &harmonic) * self.scalers.eta_v
    }

    pub fn potential_gradient_batch(&self, x: ArrayView2<T>) -> Array2<T> {
        let y = self.normalize(x);
        let tape = self.v_net.tape(y.view());
        let pass = self.v_net.input_gradient_pass(&tape, 0);
        self.chain_potential_gradient(pass.input_gradient(), &y)
    }

    fn chain_potential_gradient(&self, nn_grad: &Array2<T>, y: &Array2<T>) -> Array2<T> {
        let two = T::lit(2.0);
        let mut g = nn_grad.clone();
        Zip::from(&mut g).and(y).for_each(|gv, &yv| *gv += two * yv);
        g / &self.scalers.sigma * self.scalers.eta_v
    }

    pub fn circulation_batch(&self, x: ArrayView2<T>) -> Array2<T> {
        let y = self.normalize(x);
        self.g_net.forward_batch(y.view()) * self.scalers.eta_g
    }

    /// `f_θ = −∇V_θ + g_θ` row-wise.
    pub fn field_batch(&self, x: ArrayView2<T>) -> Array2<T> {
        self.circulation_batch(x) - self.potential_gradient_batch(x)
    }

    fn row_view<'a>(&self, x: &'a [T]) -> Result<ArrayView2<'a, T>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                context: "decomposition input",
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(ArrayView2::from_shape((1, x.len()), x).unwrap())
    }

    pub fn potential(&self, x: &[T]) -> Result<T> {
        Ok(self.potential_batch(self.row_view(x)?)[0])
    }

    pub fn potential_gradient(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.potential_gradient_batch(self.row_view(x)?).into_raw_vec_and_offset().0)
    }

    pub fn circulation(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.circulation_batch(self.row_view(x)?).into_raw_vec_and_offset().0)
    }

    /// Predicted vector field `−∇V_θ(x) + g_θ(x)`.
    pub fn predict_field(&self, x: &[T]) -> Result<Vec<T>> {
        let f = self.field_batch(self.row_view(x)?).into_raw_vec_and_offset().0;
        if !f.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("predicted field", x));
        }
        Ok(f)
    }
}

impl<T: Scalar> VectorField<T> for DecompositionModel<T> {
    fn dim(&self) -> usize {
        self.scalers.mu.len()
    }

    fn eval_into(&self, x: &[T], out: &mut [T]) {
        let xv = ArrayView2::from_shape((1, x.len()), x).unwrap();
        let f = self.field_batch(xv);
        out.copy_from_slice(f.as_slice().unwrap());
    }
}

/// Estimates `μ, σ` from the `x0` states and the output scales `η_v, η_g`
/// that match `|∇V_θ|` and `|g_θ|` to the observed velocity magnitudes.
///
/// `η_v = Σ|v||Y| / Σ|v|²` where `v` is the x-gradient of `Ṽ((x − μ)/σ)`,
/// i.e. `(∇V_nn(y) + 2y)/σ`; `η_g` uses `g_nn(y)` the same way.
pub fn fit_scalers<T: Scalar>(dataset: &SnapshotDataset<T>, v_net: Mlp<T>, g_net: Mlp<T>) -> Result<DecompositionModel<T>> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::Empty("cannot fit scalers on an empty dataset".into()));
    }
    let x = &dataset.x0;
    let mu = x.mean_axis(Axis(0)).unwrap();
    let ddof = if n > 1 { T::one() } else { T::zero() };
    let sigma = x.std_axis(Axis(0), ddof);
    if let Some((i, s)) = sigma.iter().enumerate().find(|(_, s)| !(**s >= T::lit(SIGMA_FLOOR))) {
        return Err(Error::Degenerate(format!("state axis {i} has standard deviation {s}")));
    }
    let provisional = Scalers {
        mu,
        sigma,
        eta_v: T::one(),
        eta_g: T::one(),
    };
    let model = DecompositionModel::from_parts(v_net, g_net, provisional)?;
    let y_mag: Vec<T> = dataset.velocities().rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let v = model.potential_gradient_batch(x.view());
    let g = model.circulation_batch(x.view());
    let eta = |m: &Array2<T>, what: &str| -> Result<T> {
        let (mut num, mut den) = (T::zero(), T::zero());
        for (row, &ym) in m.rows().into_iter().zip(&y_mag) {
            let sq = row.dot(&row);
            num += sq.sqrt() * ym;
            den += sq;
        }
        let e = num / den;
        if !(e.is_finite() && e > T::zero()) {
            return Err(Error::Degenerate(format!("cannot fit {what}: ratio {num}/{den}")));
        }
        Ok(e)
    };
    let eta_v = eta(&v, "eta_v")?;
    let eta_g = eta(&g, "eta_g")?;
    let DecompositionModel { v_net, g_net, mut scalers } = model;
    scalers.eta_v = eta_v;
    scalers.eta_g = eta_g;
    DecompositionModel::from_parts(v_net, g_net, scalers)
}

/// Loss and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight `λ` of the orthogonality penalty.
    pub lambda_orth: f64,
    /// Weight `δ` of negative cosines in `w(z, δ)`.
    pub delta: f64,
    /// Horizon of the midpoint step inside the loss; the snapshot offset `h`.
    pub h: f64,
    pub batch_size: usize,
    /// Subset points per step for the penalty; the whole subset if larger.
    pub orth_batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_orth >= 0.0) {
            return Err(Error::Invalid(format!("lambda_orth must be >= 0, got {}", self.lambda_orth)));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Invalid(format!("delta must lie in (0, 1], got {}", self.delta)));
        }
        if !(self.h > 0.0) {
            return Err(Error::Invalid(format!("loss horizon h must be positive, got {}", self.h)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<T> {
    pub total: T,
    pub data: T,
    pub orth: T,
    /// Subset points whose penalty was skipped because a field vanished.
    pub skipped: usize,
    pub max_preactivation: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients<T> {
    pub v: Mlp<T>,
    pub g: Mlp<T>,
}

/// Evaluates the training loss and its parameter gradients.
///
/// The data term is the mean of `|(I_h(x0) − xh)/h|²` with `I_h` one midpoint
/// step of `f_θ`; the penalty is `(λ/S) Σ w(cos θ_k, δ)` over `subset`.
pub fn loss<T: Scalar>(
    model: &DecompositionModel<T>,
    x0: ArrayView2<T>,
    xh: ArrayView2<T>,
    subset: ArrayView2<T>,
    cfg: &TrainConfig,
) -> Result<(LossTerms<T>, LossGradients<T>)> {
    let d = model.dim();
    if x0.nrows() == 0 {
        return Err(Error::Empty("loss needs a nonempty batch".into()));
    }
    if x0.dim() != xh.dim() || x0.ncols() != d {
        return Err(Error::Dimension {
            context: "loss batch",
            expected: d,
            got: x0.ncols(),
        });
    }
    let lambda = T::lit(cfg.lambda_orth);
    if lambda > T::zero() && subset.nrows() == 0 {
        return Err(Error::Empty("orthogonality penalty needs a nonempty subset".into()));
    }
    let sc = &model.scalers;
    let (v_net, g_net) = (&model.v_net, &model.g_net);
    let h = T::lit(cfg.h);
    let half_h = h * T::lit(0.5);
    let two = T::lit(2.0);
    let batch = T::from_usize(x0.nrows()).unwrap();
    let mut grad_v = v_net.zeros_like();
    let mut grad_g = g_net.zeros_like();
    let mut max_pre = T::zero();

    // forward: k1 = f(x0), xm = x0 + h/2 k1, k2 = f(xm), x1 = x0 + h k2
    let y0 = model.normalize(x0);
    let tv0 = v_net.tape(y0.view());
    let pv0 = v_net.input_gradient_pass(&tv0, 0);
    let tg0 = g_net.tape(y0.view());
    let k1 = &tg0.output * sc.eta_g - model.chain_potential_gradient(pv0.input_gradient(), &y0);
    let xm = &x0 + &(&k1 * half_h);
    let ym = model.normalize(xm.view());
    let tvm = v_net.tape(ym.view());
    let pvm = v_net.input_gradient_pass(&tvm, 0);
    let tgm = g_net.tape(ym.view());
    let k2 = &tgm.output * sc.eta_g - model.chain_potential_gradient(pvm.input_gradient(), &ym);
    let resid = (&x0 - &xh) / h + &k2;
    let data = resid.mapv(|v| v * v).sum() / batch;
    for t in [&tv0, &tg0, &tvm, &tgm] {
        max_pre = max_pre.max(t.max_preactivation);
    }

    // reverse through k2 at xm
    let k2_bar = resid * (two / batch);
    let c_m = &k2_bar / &sc.sigma * (-sc.eta_v);
    let (gv, yv_bar) = v_net.backward(&tvm, None, &[(&pvm, c_m.view())], true);
    grad_v.axpy(T::one(), &gv);
    let ug = &k2_bar * sc.eta_g;
    let (gg, yg_bar) = g_net.backward(&tgm, Some(ug.view()), &[], true);
    grad_g.axpy(T::one(), &gg);
    let ym_bar = yv_bar.unwrap() + yg_bar.unwrap() + &c_m * two;
    let k1_bar = ym_bar / &sc.sigma * half_h;

    // reverse through k1 at x0 (x0 is data, no input adjoint needed)
    let c_0 = &k1_bar / &sc.sigma * (-sc.eta_v);
    let (gv, _) = v_net.backward(&tv0, None, &[(&pv0, c_0.view())], false);
    grad_v.axpy(T::one(), &gv);
    let ug = &k1_bar * sc.eta_g;
    let (gg, _) = g_net.backward(&tg0, Some(ug.view()), &[], false);
    grad_g.axpy(T::one(), &gg);

    let mut orth = T::zero();
    let mut skipped = 0usize;
    if lambda > T::zero() {
        if subset.ncols() != d {
            return Err(Error::Dimension {
                context: "orthogonality subset",
                expected: d,
                got: subset.ncols(),
            });
        }
        let delta = T::lit(cfg.delta);
        let guard = T::lit(ORTH_GUARD);
        let s_count = T::from_usize(subset.nrows()).unwrap();
        let ys = model.normalize(subset);
        let tvs = v_net.tape(ys.view());
        let pvs = v_net.input_gradient_pass(&tvs, 0);
        let tgs = g_net.tape(ys.view());
        max_pre = max_pre.max(tvs.max_preactivation).max(tgs.max_preactivation);
        let a = model.chain_potential_gradient(pvs.input_gradient(), &ys);
        let b = &tgs.output * sc.eta_g;
        let mut a_bar = Array2::zeros(a.raw_dim());
        let mut b_bar = Array2::zeros(b.raw_dim());
        let scale = lambda / s_count;
        for k in 0..a.nrows() {
            let (ar, br) = (a.row(k), b.row(k));
            let (na, nb) = (ar.dot(&ar).sqrt(), br.dot(&br).sqrt());
            if na < guard || nb < guard {
                skipped += 1;
                continue;
            }
            let cos = ar.dot(&br) / (na * nb);
            orth += scale * orthogonality_weight(cos, delta);
            let dw = scale * orthogonality_weight_derivative(cos, delta);
            for i in 0..d {
                a_bar[[k, i]] = dw * (br[i] / (na * nb) - cos * ar[i] / (na * na));
                b_bar[[k, i]] = dw * (ar[i] / (na * nb) - cos * br[i] / (nb * nb));
            }
        }
        let c_s = a_bar / &sc.sigma * sc.eta_v;
        let (gv, _) = v_net.backward(&tvs, None, &[(&pvs, c_s.view())], false);
        grad_v.axpy(T::one(), &gv);
        let ug = b_bar * sc.eta_g;
        let (gg, _) = g_net.backward(&tgs, Some(ug.view()), &[], false);
        grad_g.axpy(T::one(), &gg);
    }

    let terms = LossTerms {
        total: data + orth,
        data,
        orth,
        skipped,
        max_preactivation: max_pre,
    };
    if !(terms.total.is_finite()) {
        return Err(Error::NonFinite {
            context: "training loss".into(),
            state: vec![data.as_f64(), orth.as_f64()],
        });
    }
    Ok((terms, LossGradients { v: grad_v, g: grad_g }))
}

/// Model plus optimizer state; everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub model: DecompositionModel<T>,
    pub adam_v: AdamState<T>,
    pub adam_g: AdamState<T>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: DecompositionModel<T>) -> Self {
        Self {
            adam_v: AdamState::new(&model.v_net),
            adam_g: AdamState::new(&model.g_net),
            model,
            step: 0,
        }
    }
}

/// Telemetry for one optimizer step (loss measured before the update).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub data_loss: f64,
    pub orth_loss: f64,
    pub lr: f64,
    pub skipped: usize,
    pub max_preactivation: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Final state, or the last good state if training diverged.
    pub state: TrainState<T>,
    pub history: Vec<TrainRecord>,
    pub diverged_at: Option<u64>,
}

/// Draws the mini-batch for `step`: data rows and subset rows.
fn batch_indices(cfg: &TrainConfig, step: u64, n_data: usize, n_subset: usize) -> (Vec<usize>, Option<Vec<usize>>) {
    let mut r = rng::stream(cfg.seed, step);
    let data = (0..cfg.batch_size).map(|_| r.random_range(0..n_data)).collect();
    let orth = (n_subset > cfg.orth_batch && cfg.orth_batch > 0)
        .then(|| (0..cfg.orth_batch).map(|_| r.random_range(0..n_subset)).collect());
    (data, orth)
}

/// Runs Adam from `state.step` up to `cfg.steps` on seeded mini-batches.
/// Batches depend only on `(cfg.seed, step)`, so a resumed run matches an
/// uninterrupted one.
pub fn train<T: Scalar>(
    mut state: TrainState<T>,
    dataset: &SnapshotDataset<T>,
    subset: &RepresentativeSubset<T>,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset is empty".into()));
    }
    let mut history = Vec::with_capacity(cfg.steps.saturating_sub(state.step) as usize);
    let mut diverged_at = None;
    while state.step < cfg.steps {
        let step = state.step;
        let (rows, orth_rows) = batch_indices(cfg, step, dataset.len(), subset.len());
        let x0 = dataset.x0.select(Axis(0), &rows);
        let xh = dataset.xh.select(Axis(0), &rows);
        let sub = match &orth_rows {
            Some(idx) => subset.points.select(Axis(0), idx),
            None => subset.points.clone(),
        };
        let (terms, grads) = match loss(&state.model, x0.view(), xh.view(), sub.view(), cfg) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => {
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        let mut next = state.clone();
        let lr = adam_step(&mut next.model.v_net, &grads.v, &mut next.adam_v, &cfg.adam, "V_net")
            .and_then(|lr| {
                adam_step(&mut next.model.g_net, &grads.g, &mut next.adam_g, &cfg.adam, "g_net")?;
                Ok(lr)
            });
        let lr = match lr {
            Ok(lr) if next.model.v_net.all_finite() && next.model.g_net.all_finite() => lr,
            _ => {
                diverged_at = Some(step);
                break;
            }
        };
        next.step += 1;
        state = next;
        let rec = TrainRecord {
            step,
            data_loss: terms.data.as_f64(),
            orth_loss: terms.orth.as_f64(),
            lr,
            skipped: terms.skipped,
            max_preactivation: terms.max_preactivation.as_f64(),
        };
        progress(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome {
        state,
        history,
        diverged_at,
    })
}

/// Builds Glorot-initialized networks for dimension `d` and fits the scalers.
pub fn init_model<T: Scalar>(dataset: &SnapshotDataset<T>, v_hidden: &[usize], g_hidden: &[usize], seed: u64) -> Result<DecompositionModel<T>> {
    let d = dataset.dim();
    let sizes = |hidden: &[usize], out: usize| {
        let mut s = vec![d];
        s.extend_from_slice(hidden);
        s.push(out);
        s
    };
    let v_net = Mlp::glorot(&sizes(v_hidden, 1), &mut rng::stream(seed, 0));
    let g_net = Mlp::glorot(&sizes(g_hidden, d), &mut rng::stream(seed, 1));
    fit_scalers(dataset, v_net, g_net)
}

/// Mean `|cos ∠(∇V, g)|` over the rows of `x`, skipping vanishing fields.
pub fn mean_abs_cosine<T: Scalar>(model: &DecompositionModel<T>, x: ArrayView2<T>) -> T {
    let a = model.potential_gradient_batch(x);
    let b = model.circulation_batch(x);
    let guard = T::lit(ORTH_GUARD);
    let (mut sum, mut n) = (T::zero(), 0usize);
    for (ar, br) in a.rows().into_iter().zip(b.rows()) {
        let (na, nb) = (ar.dot(&ar).sqrt(), br.dot(&br).sqrt());
        if na >= guard && nb >= guard {
            sum += (ar.dot(&br) / (na * nb)).abs();
            n += 1;
        }
    }
    if n == 0 {
        T::zero()
    } else {
        sum / T::from_usize(n).unwrap()
    }
}
