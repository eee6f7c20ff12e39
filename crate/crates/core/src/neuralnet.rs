//! Fully connected tanh networks with exact input gradients and parameter
//! gradients of losses that contain those input gradients.
//!
//! The input gradient of a tanh MLP has a closed layerwise form
//! (`S_{l-1} = (S_l ⊙ (1 − A_l²)) W_l`). [`Mlp::input_gradient_pass`] records
//! that computation next to the forward activations, and [`Mlp::backward`]
//! runs reverse mode over both, which yields `∂/∂θ` and `∂/∂x` of
//! `⟨U, y⟩ + Σ_o ⟨C_o, ∇ₓ y_o⟩` without a general nested AD.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

/// Affine layer `y = W x + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

/// Multilayer perceptron: tanh on every hidden layer, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

/// Forward activations of a batch. `acts[0]` is the input; `acts[l]` is the
/// output of hidden layer `l`.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    pub acts: Vec<Array2<T>>,
    pub output: Array2<T>,
    /// Largest |pre-activation| over all hidden units and samples.
    pub max_preactivation: T,
}

/// Recorded input-gradient computation for one output component.
#[derive(Debug, Clone)]
pub struct GradientPass<T> {
    pub output: usize,
    /// `s[l] = ∂y_o/∂a_l`; `s[0]` is the input gradient.
    pub s: Vec<Array2<T>>,
    /// `t[l] = ∂y_o/∂z_l` for hidden layers (`t[0]` unused).
    pub t: Vec<Array2<T>>,
}

impl<T> GradientPass<T> {
    pub fn input_gradient(&self) -> &Array2<T> {
        &self.s[0]
    }
}

/// Output of [`Mlp::param_gradients`].
#[derive(Debug, Clone)]
pub struct ParamGradients<T> {
    pub params: Mlp<T>,
    pub input: Vec<T>,
}

impl<T: Scalar> Mlp<T> {
    /// Builds a network from explicit layers, checking shapes and finiteness.
    pub fn from_layers(layers: Vec<Dense<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::Dimension {
                    context: "layer bias",
                    expected: l.weight.nrows(),
                    got: l.bias.len(),
                });
            }
            if i > 0 && layers[i - 1].weight.nrows() != l.weight.ncols() {
                return Err(Error::Dimension {
                    context: "adjacent layer sizes",
                    expected: layers[i - 1].weight.nrows(),
                    got: l.weight.ncols(),
                });
            }
            if !l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::Invalid(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        Self {
            layers: sizes
                .windows(2)
                .map(|w| Dense {
                    weight: Array2::zeros((w[1], w[0])),
                    bias: Array1::zeros(w[1]),
                })
                .collect(),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes);
        for l in &mut net.layers {
            let (fan_out, fan_in) = l.weight.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            l.weight.mapv_inplace(|_| T::lit(rng.random_range(-limit..limit)));
        }
        net
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut v = vec![self.input_dim()];
        v.extend(self.layers.iter().map(|l| l.weight.nrows()));
        v
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer: weight (row-major), then bias.
    pub fn to_flat(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend(l.weight.iter().copied());
            v.extend(l.bias.iter().copied());
        }
        v
    }

    pub fn from_flat(sizes: &[usize], flat: &[T]) -> Result<Self> {
        let mut net = Self::zeros(sizes);
        if flat.len() != net.num_params() {
            return Err(Error::Dimension {
                context: "flat parameter vector",
                expected: net.num_params(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for l in &mut net.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Self::from_layers(net.layers)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.layer_sizes())
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(alpha, &b.weight);
            a.bias.scaled_add(alpha, &b.bias);
        }
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("network input", x));
        }
        Ok(())
    }

    /// Batched forward pass recording activations (rows are samples).
    pub fn tape(&self, x: ArrayView2<T>) -> Tape<T> {
        let nl = self.layers.len();
        let mut acts = Vec::with_capacity(nl);
        acts.push(x.to_owned());
        let mut max_pre = T::zero();
        for l in &self.layers[..nl - 1] {
            let mut z = acts.last().unwrap().dot(&l.weight.t());
            z += &l.bias;
            for v in z.iter_mut() {
                let a = v.abs();
                if a > max_pre {
                    max_pre = a;
                }
                *v = v.tanh();
            }
            acts.push(z);
        }
        let last = &self.layers[nl - 1];
        let mut output = acts.last().unwrap().dot(&last.weight.t());
        output += &last.bias;
        Tape {
            acts,
            output,
            max_preactivation: max_pre,
        }
    }

    pub fn forward_batch(&self, x: ArrayView2<T>) -> Array2<T> {
        self.tape(x).output
    }

    /// Network output at a single input.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        let x = ArrayView2::from_shape((1, x.len()), x).unwrap();
        let y = self.forward_batch(x).into_raw_vec_and_offset().0;
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("network output", &y));
        }
        Ok(y)
    }

    /// Records the reverse sweep computing `∇ₓ y_o` for every sample.
    pub fn input_gradient_pass(&self, tape: &Tape<T>, output: usize) -> GradientPass<T> {
        let nl = self.layers.len();
        let batch = tape.output.nrows();
        let w_last = self.layers[nl - 1].weight.row(output);
        let mut s = vec![Array2::zeros((0, 0)); nl];
        let mut t = vec![Array2::zeros((0, 0)); nl];
        s[nl - 1] = w_last.broadcast((batch, w_last.len())).unwrap().to_owned();
        for l in (1..nl).rev() {
            let a = &tape.acts[l];
            let mut tl = s[l].clone();
            Zip::from(&mut tl).and(a).for_each(|tv, &av| *tv *= T::one() - av * av);
            s[l - 1] = tl.dot(&self.layers[l - 1].weight);
            t[l] = tl;
        }
        GradientPass { output, s, t }
    }

    /// Reverse mode over the forward tape and any recorded gradient passes.
    ///
    /// Differentiates `L = ⟨value_upstream, y⟩ + Σ ⟨C, ∇ₓ y_o⟩` where each
    /// entry of `ingrad_upstream` pairs a gradient pass with its `C`
    /// (`batch × in`). Returns parameter gradients summed over the batch and,
    /// when requested, the per-sample input adjoint.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        value_upstream: Option<ArrayView2<T>>,
        ingrad_upstream: &[(&GradientPass<T>, ArrayView2<T>)],
        want_input: bool,
    ) -> (Mlp<T>, Option<Array2<T>>) {
        let nl = self.layers.len();
        let mut grads = self.zeros_like();
        let mut abar: Vec<Array2<T>> = tape.acts.iter().map(|a| Array2::zeros(a.raw_dim())).collect();

        for (pass, c) in ingrad_upstream {
            let mut sbar = c.to_owned();
            for l in 1..nl {
                let w = &self.layers[l - 1].weight;
                let tbar = sbar.dot(&w.t());
                grads.layers[l - 1].weight += &pass.t[l].t().dot(&sbar);
                let a = &tape.acts[l];
                Zip::from(&mut abar[l])
                    .and(&tbar)
                    .and(&pass.s[l])
                    .and(a)
                    .for_each(|ab, &tb, &sv, &av| *ab -= T::lit(2.0) * tb * sv * av);
                sbar = tbar;
                Zip::from(&mut sbar).and(a).for_each(|sb, &av| *sb *= T::one() - av * av);
            }
            let col = sbar.sum_axis(Axis(0));
            let mut row = grads.layers[nl - 1].weight.row_mut(pass.output);
            row += &col;
        }

        if let Some(u) = value_upstream {
            let last = &self.layers[nl - 1];
            grads.layers[nl - 1].weight += &u.t().dot(&tape.acts[nl - 1]);
            grads.layers[nl - 1].bias += &u.sum_axis(Axis(0));
            abar[nl - 1] += &u.dot(&last.weight);
        }

        for l in (1..nl).rev() {
            let a = &tape.acts[l];
            let mut zbar = std::mem::replace(&mut abar[l], Array2::zeros((0, 0)));
            Zip::from(&mut zbar).and(a).for_each(|zb, &av| *zb *= T::one() - av * av);
            grads.layers[l - 1].weight += &zbar.t().dot(&tape.acts[l - 1]);
            grads.layers[l - 1].bias += &zbar.sum_axis(Axis(0));
            if l > 1 || want_input {
                abar[l - 1] += &zbar.dot(&self.layers[l - 1].weight);
            }
        }
        let input = want_input.then(|| std::mem::replace(&mut abar[0], Array2::zeros((0, 0))));
        (grads, input)
    }

    /// Jacobian `∂y/∂x` (shape `out × in`) at a single input.
    pub fn input_gradient(&self, x: &[T]) -> Result<Array2<T>> {
        self.check_input(x)?;
        let xv = ArrayView2::from_shape((1, x.len()), x).unwrap();
        let tape = self.tape(xv);
        let mut jac = Array2::zeros((self.output_dim(), self.input_dim()));
        for o in 0..self.output_dim() {
            let pass = self.input_gradient_pass(&tape, o);
            jac.row_mut(o).assign(&pass.s[0].row(0));
        }
        if !jac.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("input gradient", x));
        }
        Ok(jac)
    }

    /// Gradient of `L = ⟨u, y(x)⟩ + ⟨C, ∂y/∂x⟩` with respect to all
    /// parameters and to `x`, where `u` has length `out` and `C` is `out × in`.
    pub fn param_gradients(
        &self,
        x: &[T],
        upstream_value: &[T],
        upstream_ingrad: ArrayView2<T>,
    ) -> Result<ParamGradients<T>> {
        self.check_input(x)?;
        let (out, inp) = (self.output_dim(), self.input_dim());
        if upstream_value.len() != out {
            return Err(Error::Dimension {
                context: "value upstream",
                expected: out,
                got: upstream_value.len(),
            });
        }
        if upstream_ingrad.dim() != (out, inp) {
            return Err(Error::Dimension {
                context: "input-gradient upstream",
                expected: out * inp,
                got: upstream_ingrad.len(),
            });
        }
        if !upstream_value.iter().chain(upstream_ingrad.iter()).all(|v| v.is_finite()) {
            return Err(Error::Invalid("upstream sensitivities must be finite".into()));
        }
        let xv = ArrayView2::from_shape((1, inp), x).unwrap();
        let tape = self.tape(xv);
        let passes: Vec<GradientPass<T>> = (0..out)
            .filter(|&o| upstream_ingrad.row(o).iter().any(|v| *v != T::zero()))
            .map(|o| self.input_gradient_pass(&tape, o))
            .collect();
        let seeds: Vec<(&GradientPass<T>, ArrayView2<T>)> = passes
            .iter()
            .map(|p| (p, upstream_ingrad.slice(s![p.output..p.output + 1, ..])))
            .collect();
        let u = ArrayView2::from_shape((1, out), upstream_value).unwrap();
        let (params, input) = self.backward(&tape, Some(u), &seeds, true);
        if !params.all_finite() {
            return Err(Error::non_finite("parameter gradients", x));
        }
        Ok(ParamGradients {
            params,
            input: input.unwrap().into_raw_vec_and_offset().0,
        })
    }
}

/// Exponentially decaying learning rate `lr0 · gamma^(t / decay_steps)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr0: f64,
    pub gamma: f64,
    pub decay_steps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            gamma: 0.9,
            decay_steps: 5000.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn learning_rate(&self, step: u64) -> f64 {
        self.lr0 * self.gamma.powf(step as f64 / self.decay_steps)
    }
}

/// Adam moments for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Mlp<T>,
    pub v: Mlp<T>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &Mlp<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place. `name` labels the
/// network in error messages. Returns the learning rate used.
pub fn adam_step<T: Scalar>(
    params: &mut Mlp<T>,
    grads: &Mlp<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    name: &str,
) -> Result<f64> {
    if params.layer_sizes() != grads.layer_sizes() || params.layer_sizes() != state.m.layer_sizes() {
        return Err(Error::Invalid(format!("{name}: gradient shapes do not match parameters")));
    }
    for (i, g) in grads.layers.iter().enumerate() {
        if !g.weight.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient block {name}.layer{i}.weight"),
                state: Vec::new(),
            });
        }
        if !g.bias.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient block {name}.layer{i}.bias"),
                state: Vec::new(),
            });
        }
    }
    // the schedule is indexed by completed updates, so the first step uses lr0
    let lr = cfg.learning_rate(state.t);
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr_t, eps) = (T::lit(lr), T::lit(cfg.eps));
    let update = |p: &mut T, &g: &T, m: &mut T, v: &mut T| {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr_t * mhat / (vhat.sqrt() + eps);
    };
    for (((p, g), m), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.m.layers.iter_mut())
        .zip(state.v.layers.iter_mut())
    {
        Zip::from(&mut p.weight).and(&g.weight).and(&mut m.weight).and(&mut v.weight).for_each(update);
        Zip::from(&mut p.bias).and(&g.bias).and(&mut m.bias).and(&mut v.bias).for_each(update);
    }
    Ok(lr)
}

/// Inner product of two parameter sets.
pub fn params_dot<T: Scalar>(a: &Mlp<T>, b: &Mlp<T>) -> T {
    a.layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| (&x.weight * &y.weight).sum() + x.bias.dot(&y.bias))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    fn affine(w: f64, b: f64) -> Mlp<f64> {
        Mlp::from_layers(vec![Dense {
            weight: array![[w]],
            bias: array![b],
        }])
        .unwrap()
    }

    fn tiny_tanh() -> Mlp<f64> {
        Mlp::from_layers(vec![
            Dense {
                weight: array![[1.0]],
                bias: array![0.0],
            },
            Dense {
                weight: array![[1.0]],
                bias: array![0.0],
            },
        ])
        .unwrap()
    }

    fn random_net(sizes: &[usize], seed: u64) -> Mlp<f64> {
        let mut net = Mlp::glorot(sizes, &mut rng::stream(seed, 0));
        let mut r = rng::stream(seed, 1);
        for l in &mut net.layers {
            l.bias.mapv_inplace(|_| r.random_range(-0.5..0.5));
        }
        net
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn forward_examples() {
        let z = Mlp::<f64>::zeros(&[3, 4, 1]);
        assert_eq!(z.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0]);
        assert_eq!(affine(2.0, 1.0).forward(&[3.0]).unwrap(), vec![7.0]);
        let y = tiny_tanh().forward(&[0.5]).unwrap()[0];
        assert!((y - 0.462117).abs() < 1e-6);
        assert!(matches!(affine(1.0, 0.0).forward(&[1.0, 2.0]), Err(Error::Dimension { .. })));
        assert!(affine(1.0, 0.0).forward(&[f64::NAN]).is_err());
    }

    #[test]
    fn input_gradient_examples() {
        assert_eq!(affine(2.5, 1.0).input_gradient(&[-4.0]).unwrap(), array![[2.5]]);
        assert_eq!(tiny_tanh().input_gradient(&[0.0]).unwrap(), array![[1.0]]);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = random_net(&[3, 8, 1], 5);
        let x = [0.3, -0.7, 1.1];
        let jac = net.input_gradient(&x).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            let (mut xp, mut xm) = (x, x);
            xp[i] += h;
            xm[i] -= h;
            let fd = (net.forward(&xp).unwrap()[0] - net.forward(&xm).unwrap()[0]) / (2.0 * h);
            assert!(rel_err(jac[[0, i]], fd) < 1e-6, "{} vs {}", jac[[0, i]], fd);
        }
    }

    #[test]
    fn affine_ingrad_gradient() {
        // L = ∂y/∂x = w, so dL/dw = 1 and dL/db = 0
        let g = affine(3.0, -1.0).param_gradients(&[2.0], &[0.0], array![[1.0]].view()).unwrap();
        assert_eq!(g.params.layers[0].weight, array![[1.0]]);
        assert_eq!(g.params.layers[0].bias, array![0.0]);
    }

    #[test]
    fn tape_replay_is_bit_exact() {
        let net = random_net(&[2, 5, 5, 3], 2);
        let x = array![[0.1, 0.2], [-1.0, 0.5]];
        let tape = net.tape(x.view());
        for i in 0..2 {
            let y = net.forward(&[x[[i, 0]], x[[i, 1]]]).unwrap();
            assert_eq!(tape.output.row(i).to_vec(), y);
        }
        assert_eq!(net.tape(x.view()).output, tape.output);
    }

    #[test]
    fn flat_roundtrip() {
        let net = random_net(&[2, 3, 1], 4);
        let back = Mlp::from_flat(&net.layer_sizes(), &net.to_flat()).unwrap();
        assert_eq!(net, back);
        assert!(Mlp::<f64>::from_flat(&[2, 3, 1], &[0.0; 3]).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut net = random_net(&[2, 3, 1], 1);
        let before = net.clone();
        let mut st = AdamState::new(&net);
        let zeros = net.zeros_like();
        adam_step(&mut net, &zeros, &mut st, &AdamConfig::default(), "V").unwrap();
        assert_eq!(net, before);
        assert!(st.m.to_flat().iter().all(|v| *v == 0.0));
        assert!(st.v.to_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adam_first_step_is_sign_step() {
        let cfg = AdamConfig::default();
        let mut net = affine(1.0, 0.0);
        let mut st = AdamState::new(&net);
        let g = affine(0.37, -2.0);
        adam_step(&mut net, &g, &mut st, &cfg, "V").unwrap();
        let dw = net.layers[0].weight[[0, 0]] - 1.0;
        let db = net.layers[0].bias[0];
        assert!((dw + cfg.lr0 * 0.37 / (0.37 + cfg.eps)).abs() < 1e-15);
        assert!((db - cfg.lr0 * 2.0 / (2.0 + cfg.eps)).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_updates_shrink() {
        let cfg = AdamConfig {
            gamma: 0.5,
            decay_steps: 1.0,
            ..Default::default()
        };
        let mut net = affine(0.0, 0.0);
        let mut st = AdamState::new(&net);
        let g = affine(0.8, 0.8);
        adam_step(&mut net, &g, &mut st, &cfg, "V").unwrap();
        let u1 = net.layers[0].weight[[0, 0]];
        adam_step(&mut net, &g, &mut st, &cfg, "V").unwrap();
        let u2 = net.layers[0].weight[[0, 0]] - u1;
        assert!(u2.abs() <= u1.abs());
        assert_eq!(st.t, 2);
    }

    #[test]
    fn adam_rejects_nan_and_names_block() {
        let mut net = random_net(&[2, 3, 1], 1);
        let mut g = net.zeros_like();
        g.layers[1].bias[0] = f64::NAN;
        let mut st = AdamState::new(&net);
        let err = adam_step(&mut net, &g, &mut st, &AdamConfig::default(), "g_net").unwrap_err();
        assert!(err.to_string().contains("g_net.layer1.bias"), "{err}");
    }
}
