//! Composite Gauss-Legendre quadrature with panel doubling.

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Points per panel.
pub const ORDER: usize = 20;
/// Relative agreement required between successive panel counts.
pub const REL_TOL: f64 = 1e-12;
const MAX_PANELS: usize = 1 << 14;

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess followed by Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    let d = nf * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

fn rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(ORDER))
}

/// Fixed composite rule with `panels` equal panels.
pub fn integrate_panels(f: &impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let (nodes, weights) = rule();
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for k in 0..panels {
        let lo = a + k as f64 * h;
        let mid = lo + 0.5 * h;
        let s: f64 = nodes
            .iter()
            .zip(weights)
            .map(|(x, w)| w * f(mid + 0.5 * h * x))
            .sum();
        total += 0.5 * h * s;
    }
    total
}

/// Doubles the panel count until two successive estimates agree to `rel_tol`
/// (with an absolute floor of `abs_tol`).
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64, abs_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let mut panels = 1;
    let mut prev = integrate_panels(&f, a, b, panels);
    while panels < MAX_PANELS {
        panels *= 2;
        let next = integrate_panels(&f, a, b, panels);
        if !next.is_finite() {
            break;
        }
        if (next - prev).abs() <= (rel_tol * next.abs()).max(abs_tol) {
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::Quadrature { a, b, panels })
}

/// [`integrate`] at the crate default tolerance.
pub fn integrate_default(f: impl Fn(f64) -> f64, a: f64, b: f64) -> Result<f64> {
    integrate(f, a, b, REL_TOL, 1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_two_and_nodes_are_symmetric() {
        for n in [1, 2, 5, 20, 33] {
            let (x, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
            for i in 0..n {
                assert!((x[i] + x[n - 1 - i]).abs() < 1e-15);
            }
        }
        let (x, w) = gauss_legendre(2);
        assert!((x[1] - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert!((w[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exact_for_high_degree_polynomials() {
        let f = |x: f64| x.powi(38) - 3.0 * x.powi(7) + 1.0;
        let exact = 2f64.powi(39) / 39.0 - 3.0 * 2f64.powi(8) / 8.0 + 2.0;
        let got = integrate_panels(&f, 0.0, 2.0, 1);
        assert!((got - exact).abs() <= 1e-12 * exact.abs());
    }

    #[test]
    fn adaptive_matches_closed_forms() {
        let got = integrate_default(|x| (3.0 * x).exp(), 0.0, 4.0).unwrap();
        let exact = ((12f64).exp() - 1.0) / 3.0;
        assert!((got - exact).abs() <= 1e-12 * exact);
        let got = integrate_default(|x| 1.0 / (1.0 + x), 0.0, 1e3).unwrap();
        assert!((got - 1001f64.ln()).abs() < 1e-11);
        assert_eq!(integrate_default(|x| x, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn divergent_integrand_errors() {
        let r = integrate(|x| 1.0 / x.sqrt(), 0.0, 1.0, 1e-15, 0.0);
        assert!(matches!(r, Err(Error::Quadrature { .. })));
    }
}
