//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use quasipot::decomposition::{loss, DecompositionModel, Scalers, TrainConfig};
use quasipot::neuralnet::{AdamConfig, Mlp};
use quasipot::rng;
use quasipot::sparse::{build_constraints, sr3_solve, CoefficientBlock, PolynomialLibrary, Sr3Config};
use rand::seq::index::sample;
use rand::Rng;

pub fn random_net(sizes: &[usize], seed: u64) -> Mlp<f64> {
    let mut net = Mlp::glorot(sizes, &mut rng::stream(seed, 0));
    let mut r = rng::stream(seed, 1);
    for l in &mut net.layers {
        l.weight.mapv_inplace(|w| w * 1.5);
        l.bias.mapv_inplace(|_| r.random_range(-0.5..0.5));
    }
    net
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn max_rel(pairs: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    pairs.into_iter().map(|(a, b)| rel_err(a, b)).fold(0.0, f64::max)
}

/// Central differences of `f` over every parameter of `net`.
pub fn fd_params(net: &Mlp<f64>, f: impl Fn(&Mlp<f64>) -> f64, h: f64) -> Vec<f64> {
    let sizes = net.layer_sizes();
    let flat = net.to_flat();
    (0..flat.len())
        .map(|i| {
            let mut p = flat.clone();
            p[i] += h;
            let fp = f(&Mlp::from_flat(&sizes, &p).unwrap());
            p[i] -= 2.0 * h;
            let fm = f(&Mlp::from_flat(&sizes, &p).unwrap());
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn fd_input(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Worst relative error of the input Jacobian over 20 random nets.
pub fn input_gradient_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut r = rng::stream(seed, 99);
        let (inp, out) = (r.random_range(1..4), r.random_range(1..3));
        let sizes = [inp, r.random_range(2..7), r.random_range(2..7), out];
        let net = random_net(&sizes, seed);
        let x: Vec<f64> = (0..inp).map(|_| r.random_range(-1.0..1.0)).collect();
        let jac = net.input_gradient(&x).unwrap();
        for i in 0..inp {
            for o in 0..out {
                let fd = fd_input(|x| net.forward(x).unwrap()[o], &x, i, 1e-5);
                worst = worst.max(rel_err(jac[[o, i]], fd));
            }
        }
    }
    worst
}

/// Plain backprop on a vector-output net.
pub fn backprop_error() -> f64 {
    let net = random_net(&[3, 6, 5, 2], 3);
    let x = [0.2, -0.4, 0.9];
    let u = [0.7, -1.3];
    let g = net.param_gradients(&x, &u, Array2::zeros((2, 3)).view()).unwrap();
    let fd = fd_params(
        &net,
        |n| {
            let y = n.forward(&x).unwrap();
            u[0] * y[0] + u[1] * y[1]
        },
        1e-6,
    );
    max_rel(g.params.to_flat().into_iter().zip(fd))
}

/// `L = |∇ₓy|²` on 2-5-1 nets: parameter gradients and the input adjoint.
pub fn input_gradient_pathway_error() -> f64 {
    let mut worst = 0.0f64;
    let sq = |n: &Mlp<f64>, x: &[f64]| -> f64 { n.input_gradient(x).unwrap().iter().map(|v| v * v).sum() };
    for seed in 0..20 {
        let net = random_net(&[2, 5, 1], seed);
        let mut r = rng::stream(seed, 7);
        let x = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let c = &net.input_gradient(&x).unwrap() * 2.0;
        let g = net.param_gradients(&x, &[0.0], c.view()).unwrap();
        let fd = fd_params(&net, |n| sq(n, &x), 1e-6);
        worst = worst.max(max_rel(g.params.to_flat().into_iter().zip(fd)));
        for i in 0..2 {
            worst = worst.max(rel_err(g.input[i], fd_input(|x| sq(&net, x), &x, i, 1e-6)));
        }
    }
    worst
}

/// Value and Jacobian upstream gradients combined on a vector-output net.
pub fn mixed_upstream_error() -> f64 {
    let net = random_net(&[3, 4, 4, 2], 11);
    let x = [0.5, 0.1, -0.3];
    let u = [0.4, -0.9];
    let c = ndarray::array![[0.3, -0.2, 1.0], [-0.5, 0.8, 0.1]];
    let objective = |n: &Mlp<f64>, x: &[f64]| {
        let y = n.forward(x).unwrap();
        let j = n.input_gradient(x).unwrap();
        u[0] * y[0] + u[1] * y[1] + (&j * &c).sum()
    };
    let g = net.param_gradients(&x, &u, c.view()).unwrap();
    let fd = fd_params(&net, |n| objective(n, &x), 1e-6);
    let mut worst = max_rel(g.params.to_flat().into_iter().zip(fd));
    for i in 0..3 {
        worst = worst.max(rel_err(g.input[i], fd_input(|x| objective(&net, x), &x, i, 1e-6)));
    }
    worst
}

fn tiny_model(seed: u64) -> DecompositionModel<f64> {
    let scalers = Scalers {
        mu: Array1::from(vec![0.1, -0.2]),
        sigma: Array1::from(vec![0.8, 1.3]),
        eta_v: 0.7,
        eta_g: 1.4,
    };
    DecompositionModel::from_parts(random_net(&[2, 4, 4, 1], seed), random_net(&[2, 4, 4, 2], seed + 100), scalers).unwrap()
}

/// Full training loss (RK2 data term plus orthogonality) on 5 tiny models.
pub fn loss_gradient_error() -> f64 {
    let mut r = rng::stream(5, 5);
    let x0 = Array2::from_shape_fn((6, 2), |_| r.random_range(-1.0..1.0));
    let xh = &x0 + &Array2::from_shape_fn((6, 2), |_| r.random_range(-0.05..0.05));
    let sub = Array2::from_shape_fn((5, 2), |_| r.random_range(-1.0..1.0));
    let cfg = TrainConfig {
        lambda_orth: 0.8,
        delta: 0.1,
        h: 0.1,
        batch_size: 6,
        orth_batch: 0,
        steps: 0,
        seed: 0,
        adam: AdamConfig::default(),
    };
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let model = tiny_model(seed);
        let (_, grads) = loss(&model, x0.view(), xh.view(), sub.view(), &cfg).unwrap();
        let total = |m: &DecompositionModel<f64>| loss(m, x0.view(), xh.view(), sub.view(), &cfg).unwrap().0.total;
        let fd_v = fd_params(
            &model.v_net,
            |n| {
                let mut m = model.clone();
                m.v_net = n.clone();
                total(&m)
            },
            1e-6,
        );
        let fd_g = fd_params(
            &model.g_net,
            |n| {
                let mut m = model.clone();
                m.g_net = n.clone();
                total(&m)
            },
            1e-6,
        );
        worst = worst.max(max_rel(grads.v.to_flat().into_iter().zip(fd_v)));
        worst = worst.max(max_rel(grads.g.to_flat().into_iter().zip(fd_g)));
    }
    worst
}

/// `Θ(X)·T(Ξ_v)` against central differences of `Θ(X)·Ξ_v`, d=2, degree 4.
pub fn gradient_transform_error(seed: u64) -> f64 {
    let lib = PolynomialLibrary::new(2, 4);
    let mut r = rng::stream(seed, 3);
    let xi = Array1::from_shape_fn(lib.len(), |_| r.random_range(-1.0..1.0));
    let t = lib.gradient_transform(xi.view()).unwrap();
    let v = |x: &[f64]| -> f64 { lib.eval_point(x).iter().zip(xi.iter()).map(|(a, b)| a * b).sum() };
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let th = Array1::from(lib.eval_point(&x));
        for i in 0..2 {
            worst = worst.max(rel_err(th.dot(&t.column(i)), fd_input(v, &x, i, 1e-5)));
        }
    }
    worst
}

pub struct SparseProblem {
    pub lib: PolynomialLibrary,
    pub theta: Array2<f64>,
    pub targets: Array2<f64>,
    pub truth: CoefficientBlock<f64>,
}

/// Random sparse `V` and `g` (at most five terms per column) with targets
/// `Θ·[−T(Ξ_v)+Ξ_g, Ξ_v, Ξ_g]` plus uniform noise of size `noise`.
pub fn sparse_problem(seed: u64, dim: usize, degree: u32, n: usize, noise: f64) -> SparseProblem {
    let lib = PolynomialLibrary::new(dim, degree);
    let q = lib.len();
    let mut r = rng::stream(seed, 11);
    let column = |r: &mut rand_chacha::ChaCha8Rng| {
        let mut c = Array1::<f64>::zeros(q);
        let active = r.random_range(1..=5usize.min(q));
        for k in sample(r, q, active) {
            let mag = r.random_range(0.5..2.0);
            c[k] = if r.random_bool(0.5) { mag } else { -mag };
        }
        c
    };
    let v = column(&mut r);
    let mut g = Array2::zeros((q, dim));
    for i in 0..dim {
        g.column_mut(i).assign(&column(&mut r));
    }
    let truth = CoefficientBlock::from_potential_and_circulation(&lib, v.view(), g.view()).unwrap();
    let x = Array2::from_shape_fn((n, dim), |_| r.random_range(-1.0..1.0));
    let theta = lib.eval(x.view()).unwrap();
    let targets = theta.dot(&truth.xi) + Array2::from_shape_fn((n, 2 * dim + 1), |_| r.random_range(-noise..noise));
    SparseProblem { lib, theta, targets, truth }
}

pub struct Recovery {
    pub support_exact: bool,
    pub max_coef_error: f64,
}

/// Joint constrained solve; support compared on the `V` and `g` columns.
pub fn recover(p: &SparseProblem) -> Recovery {
    let d = p.lib.dim();
    let cons = build_constraints(&p.lib, None).unwrap();
    let cfg = Sr3Config {
        lambda: 5e-5,
        nu: 1.0,
        free_columns: (0..d).collect(),
        ..Default::default()
    };
    let res = sr3_solve(p.theta.view(), p.targets.view(), &cons, &cfg, Array2::zeros(p.truth.xi.dim()).view()).unwrap();
    let support_exact = res
        .xi
        .columns()
        .into_iter()
        .zip(p.truth.xi.columns())
        .skip(d)
        .all(|(a, b)| a.iter().zip(b).all(|(x, y)| (*x != 0.0) == (*y != 0.0)));
    let max_coef_error = (&res.xi - &p.truth.xi).iter().fold(0.0f64, |m, e| m.max(e.abs()));
    Recovery {
        support_exact,
        max_coef_error,
    }
}
