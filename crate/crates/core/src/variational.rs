//! Mean-field variational distributions over static parameters, priors, and
//! Fisher blocks for natural gradients.
//!
//! Every factor is a transformed normal: a draw is `θ = T(mu + exp(v)·η)`
//! with `η ~ N(0, 1)` and `T` the identity, `exp` or the logistic sigmoid.
//! Gradients reach `(mu, v)` through the transform, which is what makes the
//! bound differentiable with respect to the variational parameters.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::autodiff::Real;
use crate::linalg::LN_2PI;
use crate::quadrature::gauss_legendre_on;
use crate::rng::standard_normals;

#[derive(Debug, Error)]
pub enum VariationalError {
    #[error("no closed-form Fisher block for {0:?} factors")]
    UnsupportedKind(FactorKind),
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorKind {
    Normal,
    LogNormal,
    SigmoidNormal,
}

impl FactorKind {
    /// Maps the underlying normal variable to the factor's support.
    pub fn transform<T: Real>(self, x: T) -> T {
        match self {
            FactorKind::Normal => x,
            FactorKind::LogNormal => x.exp(),
            FactorKind::SigmoidNormal => x.sigmoid(),
        }
    }

    /// `log |dθ/dx|` at the underlying normal variable `x`.
    fn log_jacobian<T: Real>(self, x: T) -> T {
        match self {
            FactorKind::Normal => T::zero(),
            FactorKind::LogNormal => x,
            // log θ + log(1 - θ) with θ = σ(x)
            FactorKind::SigmoidNormal => x.log_sigmoid() + (-x).log_sigmoid(),
        }
    }

    pub fn in_support(self, theta: f64) -> bool {
        match self {
            FactorKind::Normal => theta.is_finite(),
            FactorKind::LogNormal => theta > 0.0 && theta.is_finite(),
            FactorKind::SigmoidNormal => theta > 0.0 && theta < 1.0,
        }
    }

    /// Inverse transform `x = T⁻¹(θ)`; the caller checks the support.
    fn inverse<T: Real>(self, theta: T) -> T {
        match self {
            FactorKind::Normal => theta,
            FactorKind::LogNormal => theta.ln(),
            FactorKind::SigmoidNormal => theta.ln() - (T::cst(1.0) - theta).ln(),
        }
    }
}

/// One scalar factor: location `mu` and log standard deviation `v` of the
/// underlying normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub kind: FactorKind,
    pub mu: f64,
    pub v: f64,
}

impl Factor {
    pub fn new(kind: FactorKind, mu: f64, v: f64) -> Self {
        Factor { kind, mu, v }
    }

    pub fn log_density(&self, theta: f64) -> f64 {
        factor_log_density(self.kind, self.mu, self.v, theta)
    }

    /// Draw and log-density for a given standard-normal `eta`.
    pub fn sample_with(&self, eta: f64) -> (f64, f64) {
        factor_sample(self.kind, self.mu, self.v, eta)
    }

    /// `T(mu)`, the point used in EM mode.
    pub fn point(&self) -> f64 {
        self.kind.transform(self.mu)
    }

    /// Mean of the factor. Closed form for normal and log-normal factors,
    /// 64-point Gauss–Legendre over ±10 standard deviations for the
    /// sigmoid-normal factor.
    pub fn mean(&self) -> f64 {
        match self.kind {
            FactorKind::Normal => self.mu,
            FactorKind::LogNormal => (self.mu + 0.5 * (2.0 * self.v).exp()).exp(),
            FactorKind::SigmoidNormal => {
                let rule = gauss_legendre_on(-10.0, 10.0, 64);
                let sd = self.v.exp();
                rule.integrate(|z| {
                    crate::autodiff::sigmoid(self.mu + sd * z) * (-0.5 * z * z - 0.5 * LN_2PI).exp()
                })
            }
        }
    }
}

/// Reparameterised draw `θ = T(mu + exp(v)·eta)` and `log q(θ)` including the
/// Jacobian of `T`.
pub fn factor_sample<T: Real>(kind: FactorKind, mu: T, v: T, eta: f64) -> (T, T) {
    let x = mu + v.exp() * eta;
    let theta = kind.transform(x);
    let log_q = -v - kind.log_jacobian(x) - (0.5 * LN_2PI + 0.5 * eta * eta);
    (theta, log_q)
}

/// `log q(θ)` at an arbitrary point; `-∞` outside the support.
pub fn factor_log_density<T: Real>(kind: FactorKind, mu: T, v: T, theta: T) -> T {
    if !kind.in_support(theta.value()) {
        return T::cst(f64::NEG_INFINITY);
    }
    let x = kind.inverse(theta);
    let z = (x - mu) * (-v).exp();
    -v - z.square() * 0.5 - kind.log_jacobian(x) - 0.5 * LN_2PI
}

/// Fisher information of `(mu, v)` for normal and log-normal factors:
/// `diag(exp(-2v), 2)`.
pub fn fisher_block(factor: &Factor) -> Result<[[f64; 2]; 2], VariationalError> {
    match factor.kind {
        FactorKind::Normal | FactorKind::LogNormal => {
            Ok([[(-2.0 * factor.v).exp(), 0.0], [0.0, 2.0]])
        }
        kind => Err(VariationalError::UnsupportedKind(kind)),
    }
}

/// Natural gradient `I⁻¹ ∇` for one factor.
pub fn natural_gradient(
    factor: &Factor,
    grad_mu: f64,
    grad_v: f64,
) -> Result<(f64, f64), VariationalError> {
    let block = fisher_block(factor)?;
    Ok((grad_mu / block[0][0], grad_v / block[1][1]))
}

/// Score `∇_(mu, v) log q(θ)` of a normal or log-normal factor.
pub fn factor_score(factor: &Factor, theta: f64) -> (f64, f64) {
    let x = match factor.kind {
        FactorKind::Normal => theta,
        FactorKind::LogNormal => theta.ln(),
        FactorKind::SigmoidNormal => (theta / (1.0 - theta)).ln(),
    };
    let prec = (-2.0 * factor.v).exp();
    let r = x - factor.mu;
    (prec * r, prec * r * r - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "kebab-case")]
pub enum Prior {
    /// `N(mean, var)`.
    Normal { mean: f64, var: f64 },
    /// Shape–rate parameterisation.
    Gamma { shape: f64, rate: f64 },
    Uniform { low: f64, high: f64 },
    /// `log θ ~ N(mu, var)`.
    LogNormal { mu: f64, var: f64 },
    /// Shape–scale parameterisation.
    InverseGamma { shape: f64, scale: f64 },
}

impl Prior {
    pub fn log_density<T: Real>(&self, theta: T) -> T {
        log_prior(self, theta)
    }
}

/// Log prior density; `-∞` outside the support.
pub fn log_prior<T: Real>(prior: &Prior, theta: T) -> T {
    let t = theta.value();
    let outside = T::cst(f64::NEG_INFINITY);
    match *prior {
        Prior::Normal { mean, var } => {
            (theta - mean).square() * (-0.5 / var) - 0.5 * (LN_2PI + var.ln())
        }
        Prior::Gamma { shape, rate } => {
            if !(t > 0.0) {
                return outside;
            }
            theta.ln() * (shape - 1.0) - theta * rate + (shape * rate.ln() - ln_gamma(shape))
        }
        Prior::Uniform { low, high } => {
            if t < low || t > high {
                outside
            } else {
                T::cst(-(high - low).ln())
            }
        }
        Prior::LogNormal { mu, var } => {
            if !(t > 0.0) {
                return outside;
            }
            let x = theta.ln();
            (x - mu).square() * (-0.5 / var) - x - 0.5 * (LN_2PI + var.ln())
        }
        Prior::InverseGamma { shape, scale } => {
            if !(t > 0.0) {
                return outside;
            }
            -(theta.ln() * (shape + 1.0)) - T::cst(scale) / theta
                + (shape * scale.ln() - ln_gamma(shape))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedFactor {
    pub name: String,
    #[serde(flatten)]
    pub factor: Factor,
}

/// Product of independent scalar factors, one per component of θ, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MeanFieldFamily {
    pub factors: Vec<NamedFactor>,
}

impl MeanFieldFamily {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, factor: Factor) {
        self.factors.push(NamedFactor {
            name: name.into(),
            factor,
        });
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factors.iter().map(|f| f.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    /// Flattened variational parameters `[mu_0, v_0, mu_1, v_1, ...]`.
    pub fn params(&self) -> Vec<f64> {
        self.factors
            .iter()
            .flat_map(|f| [f.factor.mu, f.factor.v])
            .collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), VariationalError> {
        if params.len() != 2 * self.len() {
            return Err(VariationalError::Length {
                expected: 2 * self.len(),
                got: params.len(),
            });
        }
        for (f, p) in self.factors.iter_mut().zip(params.chunks(2)) {
            f.factor.mu = p[0];
            f.factor.v = p[1];
        }
        Ok(())
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        standard_normals(rng, self.len())
    }

    /// Reparameterised θ draw and `log q_ψ(θ)` for externally supplied
    /// `(mu, v)` scalars (e.g. tape leaves laid out as in [`Self::params`]).
    pub fn sample_reparam<T: Real>(&self, params: &[T], eta: &[f64]) -> (Vec<T>, T) {
        assert_eq!(params.len(), 2 * self.len(), "variational parameter length");
        assert_eq!(eta.len(), self.len(), "noise length");
        let mut log_q = T::zero();
        let theta = self
            .factors
            .iter()
            .zip(params.chunks(2))
            .zip(eta)
            .map(|((f, p), &e)| {
                let (t, lq) = factor_sample(f.factor.kind, p[0], p[1], e);
                log_q += lq;
                t
            })
            .collect();
        (theta, log_q)
    }

    /// θ draw with plain values.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, f64) {
        let eta = self.draw_noise(rng);
        self.sample_reparam(&self.params(), &eta)
    }

    /// Point mass location `T(mu)` for each factor, from supplied `mu` scalars.
    pub fn point_from<T: Real>(&self, params: &[T]) -> Vec<T> {
        self.factors
            .iter()
            .zip(params.chunks(2))
            .map(|(f, p)| f.factor.kind.transform(p[0]))
            .collect()
    }

    pub fn point(&self) -> Vec<f64> {
        self.factors.iter().map(|f| f.factor.point()).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.factors.iter().map(|f| f.factor.mean()).collect()
    }

    /// `log q_ψ(θ) = Σ_i log q_i(θ_i)`.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        self.factors
            .iter()
            .zip(theta)
            .map(|(f, &t)| f.factor.log_density(t))
            .sum()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<(), VariationalError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self, VariationalError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Sum of prior log-densities, one prior per θ component.
pub fn joint_log_prior<T: Real>(priors: &[Prior], theta: &[T]) -> T {
    assert_eq!(priors.len(), theta.len(), "one prior per parameter");
    let mut acc = T::zero();
    for (p, &t) in priors.iter().zip(theta) {
        acc += log_prior(p, t);
    }
    acc
}
