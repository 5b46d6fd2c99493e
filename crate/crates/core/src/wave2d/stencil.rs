//! Central finite-difference weights for the second derivative.

use crate::error::{Error, Result};

pub const SUPPORTED_ORDERS: [usize; 3] = [4, 8, 16];

/// Weights `[c0, c1, ..., cp]` of the order-`2p` central second-derivative
/// stencil on a unit grid: `f''(x) ≈ c0 f(x) + Σ cj (f(x+j) + f(x-j))`.
pub fn second_derivative_weights(order: usize) -> Result<Vec<f64>> {
    if !SUPPORTED_ORDERS.contains(&order) {
        return Err(Error::Config(format!(
            "stencil order {order} not in {SUPPORTED_ORDERS:?}"
        )));
    }
    let p = order / 2;
    let fact = |k: usize| (1..=k).fold(1.0f64, |acc, v| acc * v as f64);
    let pf2 = fact(p) * fact(p);
    let mut w = vec![0.0; p + 1];
    for j in 1..=p {
        let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
        w[j] = 2.0 * sign * pf2 / ((j * j) as f64 * fact(p - j) * fact(p + j));
    }
    w[0] = -2.0 * w[1..].iter().sum::<f64>();
    Ok(w)
}

/// Largest eigenvalue of the negated 1-D operator (unit spacing), reached at
/// the Nyquist wavenumber.
pub fn nyquist_symbol(weights: &[f64]) -> f64 {
    let mut s = -weights[0];
    for (j, &c) in weights.iter().enumerate().skip(1) {
        let cos = if j % 2 == 0 { 1.0 } else { -1.0 };
        s -= 2.0 * c * cos;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fourth_order_weights() {
        let w = second_derivative_weights(4).unwrap();
        assert!((w[0] + 2.5).abs() < 1e-15);
        assert!((w[1] - 4.0 / 3.0).abs() < 1e-15);
        assert!((w[2] + 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn weights_differentiate_polynomials_exactly() {
        for order in SUPPORTED_ORDERS {
            let w = second_derivative_weights(order).unwrap();
            let p = order / 2;
            // exact on x^k for k <= order + 1 (even part only matters)
            for k in (0..=order).step_by(2) {
                let mut approx = w[0] * if k == 0 { 1.0 } else { 0.0 };
                let mut scale = approx.abs();
                for j in 1..=p {
                    let term = 2.0 * w[j] * (j as f64).powi(k as i32);
                    approx += term;
                    scale += term.abs();
                }
                let exact = if k == 2 { 2.0 } else { 0.0 };
                assert!((approx - exact).abs() < 1e-12 * scale.max(1.0), "order {order} k {k}: {approx}");
            }
        }
    }

    #[test]
    fn unsupported_order_rejected() {
        assert!(second_derivative_weights(6).is_err());
    }

    #[test]
    fn symbol_grows_with_order() {
        let s4 = nyquist_symbol(&second_derivative_weights(4).unwrap());
        assert!((s4 - 16.0 / 3.0).abs() < 1e-12);
        let s16 = nyquist_symbol(&second_derivative_weights(16).unwrap());
        assert!(s16 > s4 && s16 < std::f64::consts::PI.powi(2));
    }
}
