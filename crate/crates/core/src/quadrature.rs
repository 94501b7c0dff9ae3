//! Gauss–Legendre quadrature and its exponentially mapped variant.
//!
//! The mapped rule places Gauss–Legendre nodes uniformly in `log t` on
//! `[log t_min, log t_max]` and maps them back with `t = exp(u)`, scaling each
//! weight by `exp(u)`. Nodes therefore cluster near `t_min`, which is where an
//! intensity with fast exponential decay changes most.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("lower limit must be positive, got {0}")]
    NonPositiveLower(f64),
    #[error("empty interval [{0}, {1}]")]
    EmptyInterval(f64, f64),
    #[error("a rule needs at least one node")]
    NoNodes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * f(t))
            .sum()
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`,
/// nodes in increasing order.
pub fn gauss_legendre(n: usize) -> QuadratureRule {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi's initial guess for the i-th largest root
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
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
        dp = if d.is_finite() { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    QuadratureRule { nodes, weights }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Gauss–Legendre rule affinely mapped to `[a, b]`.
pub fn gauss_legendre_on(a: f64, b: f64, n: usize) -> QuadratureRule {
    let base = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    QuadratureRule {
        nodes: base.nodes.iter().map(|x| mid + half * x).collect(),
        weights: base.weights.iter().map(|w| half * w).collect(),
    }
}

/// Rule for `∫_{t_min}^{t_max} f(t) dt` with nodes equispaced in Gauss sense
/// on the log scale: `(t̃, w̃) = (exp(u), w·exp(u))`.
pub fn log_transformed_rule(
    t_min: f64,
    t_max: f64,
    n: usize,
) -> Result<QuadratureRule, QuadratureError> {
    if n == 0 {
        return Err(QuadratureError::NoNodes);
    }
    if !(t_min > 0.0) {
        return Err(QuadratureError::NonPositiveLower(t_min));
    }
    if !(t_max > t_min) {
        return Err(QuadratureError::EmptyInterval(t_min, t_max));
    }
    let base = gauss_legendre_on(t_min.ln(), t_max.ln(), n);
    let nodes: Vec<f64> = base.nodes.iter().map(|u| u.exp()).collect();
    let weights = base
        .weights
        .iter()
        .zip(&nodes)
        .map(|(w, t)| w * t)
        .collect();
    Ok(QuadratureRule { nodes, weights })
}

/// Mapped rule with a precomputed base rule, for repeated use on many intervals.
pub fn log_transformed_with(base: &QuadratureRule, t_min: f64, t_max: f64) -> QuadratureRule {
    let (a, b) = (t_min.ln(), t_max.ln());
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut nodes = Vec::with_capacity(base.len());
    let mut weights = Vec::with_capacity(base.len());
    for (x, w) in base.nodes.iter().zip(&base.weights) {
        let t = (mid + half * x).exp();
        nodes.push(t);
        weights.push(half * w * t);
    }
    QuadratureRule { nodes, weights }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn known_small_rules() {
        let r = gauss_legendre(2);
        assert_relative_eq!(r.nodes[1], 1.0 / 3f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(r.weights[0], 1.0, epsilon = 1e-15);
        let r = gauss_legendre(3);
        assert_relative_eq!(r.nodes[2], (0.6f64).sqrt(), epsilon = 1e-15);
        assert_relative_eq!(r.nodes[1], 0.0, epsilon = 1e-15);
        assert_relative_eq!(r.weights[1], 8.0 / 9.0, epsilon = 1e-15);
    }

    #[test]
    fn exact_for_polynomials_up_to_degree_2n_minus_1() {
        for n in [1usize, 4, 17, 50] {
            let r = gauss_legendre_on(-0.5, 2.0, n);
            let deg = 2 * n - 1;
            let approx = r.integrate(|x| x.powi(deg as i32));
            let exact = (2f64.powi(deg as i32 + 1) - (-0.5f64).powi(deg as i32 + 1)) / (deg as f64 + 1.0);
            assert_relative_eq!(approx, exact, max_relative = 1e-12);
        }
    }

    #[test]
    fn single_node_sits_at_geometric_mean() {
        let r = log_transformed_rule(0.01, 4.0, 1).unwrap();
        assert_relative_eq!(r.nodes[0], (0.01f64 * 4.0).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn weights_sum_to_interval_length() {
        let r = log_transformed_rule(1e-6, 3.5, 50).unwrap();
        assert_relative_eq!(r.weight_sum(), 3.5 - 1e-6, max_relative = 1e-10);
        assert_eq!(r.len(), 50);
    }

    #[test]
    fn integrates_fast_exponential_decay() {
        let r = log_transformed_rule(1e-6, 1.0, 50).unwrap();
        let exact = (5.0f64 * -1e-6).exp() / 5.0 - (-5.0f64).exp() / 5.0;
        assert_relative_eq!(r.integrate(|t| (-5.0 * t).exp()), exact, max_relative = 1e-8);
    }

    #[test]
    fn rejects_bad_limits() {
        assert_eq!(
            log_transformed_rule(0.0, 1.0, 5).unwrap_err(),
            QuadratureError::NonPositiveLower(0.0)
        );
        assert!(log_transformed_rule(2.0, 1.0, 5).is_err());
        assert!(log_transformed_rule(0.1, 1.0, 0).is_err());
    }

    #[test]
    fn cached_base_matches_direct_rule() {
        let base = gauss_legendre(50);
        let a = log_transformed_with(&base, 1e-6, 2.0);
        let b = log_transformed_rule(1e-6, 2.0, 50).unwrap();
        for (x, y) in a.nodes.iter().zip(&b.nodes) {
            assert_relative_eq!(x, y, max_relative = 1e-14);
        }
    }
}
