//! Gamma function and modified Bessel functions of the first kind.

use std::f64::consts::PI;

use crate::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Crossover between the power series and the large-argument expansion.
pub const BESSEL_SERIES_LIMIT: f64 = 30.0;

fn lanczos_sum(x: f64) -> f64 {
    LANCZOS[1..]
        .iter()
        .enumerate()
        .fold(LANCZOS[0], |acc, (i, &c)| acc + c / (x + i as f64 + 1.0))
}

/// `Γ(x)` via the Lanczos approximation, with reflection for `x < 1/2`.
pub fn gamma(x: f64) -> f64 {
    if x < 0.5 {
        return PI / ((PI * x).sin() * gamma(1.0 - x));
    }
    let x = x - 1.0;
    let t = x + LANCZOS_G + 0.5;
    (2.0 * PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * lanczos_sum(x)
}

/// `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + lanczos_sum(x).ln()
}

fn check_order(order: f64) -> Result<()> {
    let quarter = (order.abs() - 0.25).abs() < 1e-15;
    let whole = order >= 0.0 && order.fract() == 0.0;
    if quarter || whole {
        Ok(())
    } else {
        Err(Error::UnsupportedOrder(order))
    }
}

fn scaled_series(order: f64, z: f64) -> f64 {
    let half = 0.5 * z;
    let mut term = (order * half.ln() - z - ln_gamma(order + 1.0)).exp();
    let mut sum = term;
    let q = half * half;
    for k in 1.. {
        let k = k as f64;
        term *= q / (k * (k + order));
        sum += term;
        if term <= sum * 1e-17 {
            break;
        }
    }
    sum
}

fn scaled_asymptotic(order: f64, z: f64) -> f64 {
    let mu = 4.0 * order * order;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        let kf = k as f64;
        let next = -term * (mu - (2.0 * kf - 1.0).powi(2)) / (8.0 * kf * z);
        if next.abs() >= term.abs() && k > 1 {
            break;
        }
        term = next;
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    sum / (2.0 * PI * z).sqrt()
}

/// `e^{-z} I_α(z)` for `α ∈ {±1/4} ∪ ℕ` and `z > 0`.
pub fn bessel_i_scaled(order: f64, z: f64) -> Result<f64> {
    check_order(order)?;
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::Invalid(format!("Bessel argument must be positive and finite, got {z}")));
    }
    Ok(if z <= BESSEL_SERIES_LIMIT {
        scaled_series(order, z)
    } else {
        scaled_asymptotic(order, z)
    })
}

/// `I_α(z)`. Overflows to infinity for `z ≳ 700`; use [`ln_bessel_i`] there.
pub fn bessel_i(order: f64, z: f64) -> Result<f64> {
    Ok(bessel_i_scaled(order, z)? * z.exp())
}

pub fn ln_bessel_i(order: f64, z: f64) -> Result<f64> {
    Ok(bessel_i_scaled(order, z)?.ln() + z)
}

#[doc(hidden)]
pub fn bessel_i_branches(order: f64, z: f64) -> (f64, f64) {
    (scaled_series(order, z), scaled_asymptotic(order, z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gamma_values() {
        assert_relative_eq!(gamma(5.0), 24.0, max_relative = 1e-13);
        assert_relative_eq!(gamma(0.5), PI.sqrt(), max_relative = 1e-13);
        assert_relative_eq!(gamma(0.75), 1.225_416_702_465_177_6, max_relative = 1e-13);
        assert_relative_eq!(gamma(-0.5), -2.0 * PI.sqrt(), max_relative = 1e-13);
        assert_relative_eq!(ln_gamma(100.0), 359.134_205_369_575_4, max_relative = 1e-13);
    }

    #[test]
    fn small_argument_limit() {
        assert!((bessel_i(0.0, 1e-8).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn integer_orders() {
        assert_relative_eq!(bessel_i(0.0, 1.0).unwrap(), 1.266_065_877_752_008_4, max_relative = 1e-14);
        assert_relative_eq!(bessel_i(1.0, 2.0).unwrap(), 1.590_636_854_637_329, max_relative = 1e-14);
    }

    #[test]
    fn large_argument_leading_term() {
        let z = 100.0;
        let lead = bessel_i_scaled(0.25, z).unwrap() * (2.0 * PI * z).sqrt();
        assert!((lead - 1.0).abs() < 1e-2);
    }

    #[test]
    fn branches_agree_at_crossover() {
        for order in [-0.25, 0.25, 0.0, 1.0] {
            let (s, a) = bessel_i_branches(order, BESSEL_SERIES_LIMIT);
            assert!((s - a).abs() / s < 1e-8, "order {order}: {s} vs {a}");
        }
    }

    #[test]
    fn rejects_other_orders() {
        assert!(matches!(bessel_i(0.3, 1.0), Err(Error::UnsupportedOrder(_))));
        assert!(bessel_i(-1.0, 1.0).is_err());
        assert!(bessel_i(0.25, 0.0).is_err());
    }
}
