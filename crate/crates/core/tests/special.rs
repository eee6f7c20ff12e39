use std::f64::consts::PI;

use quasipot::special::bessel_i;

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(a) + f(b) + inner) * h / 3.0
}

/// `(1/π)∫₀^π e^{z cos θ} cos(αθ) dθ − (sin(απ)/π)∫₀^∞ e^{−z cosh t − αt} dt`.
fn integral_representation(alpha: f64, z: f64) -> f64 {
    let first = simpson(|t| (z * t.cos()).exp() * (alpha * t).cos(), 0.0, PI, 20_000) / PI;
    let second = simpson(|t| (-z * t.cosh() - alpha * t).exp(), 0.0, 8.0, 40_000);
    first - (alpha * PI).sin() / PI * second
}

#[test]
fn quarter_orders_match_integral_representation() {
    for alpha in [0.25, -0.25] {
        for z in [0.3, 1.0, 4.0, 12.0] {
            let oracle = integral_representation(alpha, z);
            let ours = bessel_i(alpha, z).unwrap();
            assert!((ours - oracle).abs() < 1e-8 * oracle.max(1.0), "α={alpha} z={z}: {ours} vs {oracle}");
        }
    }
}
