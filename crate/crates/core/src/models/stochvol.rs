//! Multivariate stochastic volatility.
//!
//! `x_0 ~ N(μ, Σ_x0)`, `x_n ~ N(μ + diag(a)(x_{n-1} − μ), Σ_x)` and
//! `y_n ~ N(0, diag(exp(x_n)))`, where `Σ_x = L Lᵀ` and `Σ_x0` is the
//! stationary covariance. The proposal keeps the prior mean and replaces
//! `Σ_x` by a learned diagonal covariance.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Real;
use crate::linalg::{chol_normal_logpdf, Mat, LN_2PI};
use crate::rng::{derive_seed, standard_normals, stream, SmcRng};
use crate::smc::{
    run_smc_with, AncestryRecord, ParticleFilter, ParticleSystem, RunOptions, SmcConfig, StateSpaceModel,
};
use crate::trainer::{Problem, TrainError};
use crate::variational::{Factor, FactorKind, MeanFieldFamily, Prior};

pub use super::ThetaSource;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SvError {
    #[error("autoregressive coefficient {0} is outside (-1, 1)")]
    NonStationary(f64),
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("only one- and two-step predictions are supported, got {0}")]
    UnsupportedHorizon(usize),
    #[error("prediction target {target} is beyond the last observation {last}")]
    OutOfRange { target: usize, last: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("particle filter: {0}")]
    Smc(#[from] crate::smc::SmcError),
}

/// `(Σ_x0)_ij = (Σ_x)_ij / (1 − a_i a_j)`, the solution of
/// `Σ_x0 = diag(a) Σ_x0 diag(a) + Σ_x`.
pub fn lyapunov_stationary<T: Real>(a: &[T], sigma_x: &Mat<T>) -> Result<Mat<T>, SvError> {
    if let Some(bad) = a.iter().find(|v| !(v.value().abs() < 1.0)) {
        return Err(SvError::NonStationary(bad.value()));
    }
    let n = a.len();
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, sigma_x.at(i, j) / (T::cst(1.0) - a[i] * a[j]));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvParams<T> {
    pub mu: Vec<T>,
    pub a: Vec<T>,
    /// Lower-triangular factor of `Σ_x`; positive diagonal.
    pub l: Mat<T>,
}

impl<T: Real> SvParams<T> {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma_x(&self) -> Mat<T> {
        self.l.outer_self()
    }

    pub fn sigma_x0(&self) -> Result<Mat<T>, SvError> {
        lyapunov_stationary(&self.a, &self.sigma_x())
    }

    pub fn values(&self) -> SvParams<f64> {
        SvParams {
            mu: self.mu.iter().map(|v| v.value()).collect(),
            a: self.a.iter().map(|v| v.value()).collect(),
            l: self.l.values(),
        }
    }
}

impl SvParams<f64> {
    /// Draws `(y_{0:M}, x_{0:M})` with `M = horizon`.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        horizon: usize,
        rng: &mut R,
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), SvError> {
        let d = self.dim();
        let l0 = self
            .sigma_x0()?
            .cholesky()
            .ok_or(SvError::NotPositiveDefinite("stationary covariance"))?;
        let mut xs: Vec<Vec<f64>> = Vec::with_capacity(horizon + 1);
        let mut ys = Vec::with_capacity(horizon + 1);
        for _ in 0..=horizon {
            let x: Vec<f64> = match xs.last() {
                None => {
                    let e = l0.matvec(&standard_normals(rng, d));
                    (0..d).map(|i| self.mu[i] + e[i]).collect()
                }
                Some(prev) => self.step(prev, &standard_normals(rng, d)),
            };
            ys.push(self.observe(&x, &standard_normals(rng, d)));
            xs.push(x);
        }
        Ok((ys, xs))
    }

    /// One transition with standard-normal noise `eps`.
    fn step(&self, prev: &[f64], eps: &[f64]) -> Vec<f64> {
        let e = self.l.matvec(eps);
        (0..self.dim())
            .map(|i| self.mu[i] + self.a[i] * (prev[i] - self.mu[i]) + e[i])
            .collect()
    }

    fn observe(&self, x: &[f64], eps: &[f64]) -> Vec<f64> {
        x.iter().zip(eps).map(|(xi, e)| (0.5 * xi).exp() * e).collect()
    }
}

/// `log g(y | x) = Σ_i −½(log 2π + x_i + y_i² e^{−x_i})`.
pub fn log_obs_density<T: Real>(y: &[f64], x: &[T]) -> T {
    let mut acc = T::cst(-0.5 * LN_2PI * y.len() as f64);
    for (yi, &xi) in y.iter().zip(x) {
        acc -= (xi + (-xi).exp() * (yi * yi)) * 0.5;
    }
    acc
}

/// Proposal parameters: log standard deviations after the first step and at
/// the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct SvProposal<T> {
    pub log_sd: Vec<T>,
    pub log_sd0: Vec<T>,
}

impl<T: Real> SvProposal<T> {
    pub fn from_flat(d: usize, flat: &[T]) -> Self {
        assert_eq!(flat.len(), 2 * d, "proposal vector length");
        SvProposal {
            log_sd: flat[..d].to_vec(),
            log_sd0: flat[d..].to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SvModel<'a, T> {
    pub params: SvParams<T>,
    ys: &'a [Vec<f64>],
    chol_x: Mat<T>,
    chol_x0: Mat<T>,
    sd: Vec<T>,
    sd0: Vec<T>,
    sum_log_sd: T,
    sum_log_sd0: T,
    inv_sd: Vec<T>,
    inv_sd0: Vec<T>,
}

impl<'a, T: Real> SvModel<'a, T> {
    pub fn new(params: SvParams<T>, proposal: &SvProposal<T>, ys: &'a [Vec<f64>]) -> Result<Self, SvError> {
        let d = params.dim();
        if params.a.len() != d || params.l.rows != d || proposal.log_sd.len() != d {
            return Err(SvError::Dimension(format!("inconsistent parameter shapes for D={d}")));
        }
        if let Some(y) = ys.iter().find(|y| y.len() != d) {
            return Err(SvError::Dimension(format!("observation of length {}", y.len())));
        }
        let sx0 = params.sigma_x0()?;
        let chol_x0 = sx0
            .cholesky()
            .ok_or(SvError::NotPositiveDefinite("stationary covariance"))?;
        Ok(SvModel {
            // L is already the lower Cholesky factor of Σ_x
            chol_x: params.l.clone(),
            chol_x0,
            sd: proposal.log_sd.iter().map(|&s| s.exp()).collect(),
            sd0: proposal.log_sd0.iter().map(|&s| s.exp()).collect(),
            inv_sd: proposal.log_sd.iter().map(|&s| (-s).exp()).collect(),
            inv_sd0: proposal.log_sd0.iter().map(|&s| (-s).exp()).collect(),
            sum_log_sd: T::sum(&proposal.log_sd),
            sum_log_sd0: T::sum(&proposal.log_sd0),
            params,
            ys,
        })
    }

    fn prior_mean(&self, prev: Option<&[T]>) -> Vec<T> {
        let p = &self.params;
        match prev {
            None => p.mu.clone(),
            Some(x) => (0..p.dim()).map(|i| p.mu[i] + p.a[i] * (x[i] - p.mu[i])).collect(),
        }
    }
}

impl<T: Real> StateSpaceModel<T> for SvModel<'_, T> {
    fn num_steps(&self) -> usize {
        self.ys.len()
    }

    fn state_dim(&self) -> usize {
        self.params.dim()
    }

    fn noise_dim(&self, _step: usize) -> usize {
        self.params.dim()
    }

    fn propose(&self, _step: usize, prev: Option<&[T]>, noise: &[f64]) -> (Vec<T>, T) {
        let mean = self.prior_mean(prev);
        let (sd, sum_log_sd) = match prev {
            None => (&self.sd0, self.sum_log_sd0),
            Some(_) => (&self.sd, self.sum_log_sd),
        };
        let x = mean.iter().zip(sd).zip(noise).map(|((&m, &s), &e)| m + s * e).collect();
        let quad: f64 = noise.iter().map(|e| e * e).sum();
        (x, -sum_log_sd - 0.5 * (quad + LN_2PI * noise.len() as f64))
    }

    fn log_proposal(&self, _step: usize, prev: Option<&[T]>, x: &[T]) -> T {
        let mean = self.prior_mean(prev);
        let (inv_sd, sum_log_sd) = match prev {
            None => (&self.inv_sd0, self.sum_log_sd0),
            Some(_) => (&self.inv_sd, self.sum_log_sd),
        };
        let mut acc = -sum_log_sd - 0.5 * LN_2PI * x.len() as f64;
        for i in 0..x.len() {
            acc -= ((x[i] - mean[i]) * inv_sd[i]).square() * 0.5;
        }
        acc
    }

    fn log_transition(&self, _step: usize, prev: Option<&[T]>, x: &[T]) -> T {
        let mean = self.prior_mean(prev);
        match prev {
            None => chol_normal_logpdf(x, &mean, &self.chol_x0),
            Some(_) => chol_normal_logpdf(x, &mean, &self.chol_x),
        }
    }

    fn log_observation(&self, step: usize, x: &[T]) -> T {
        log_obs_density(&self.ys[step], x)
    }
}

/// Variational parameter layout: `μ` (D), `a` (D), `diag L` (D), strictly
/// lower `L` entries row by row.
#[derive(Debug, Clone)]
pub struct SvProblem {
    pub ys: Vec<Vec<f64>>,
    pub dim: usize,
    family: MeanFieldFamily,
    priors: Vec<Prior>,
}

/// Initial location of the sigmoid-normal factors of `a` (`a ≈ 0.88`).
const A_INIT_LOGIT: f64 = 2.0;

impl SvProblem {
    pub fn new(ys: Vec<Vec<f64>>) -> Self {
        let dim = ys.first().map_or(0, |y| y.len());
        let init_sd = crate::models::lgss::INIT_LOG_SD;
        let mut family = MeanFieldFamily::new();
        let mut priors = Vec::new();
        for i in 0..dim {
            let n = ys.len() as f64;
            let mean = ys.iter().map(|y| y[i]).sum::<f64>() / n;
            let var = ys.iter().map(|y| (y[i] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            family.push(format!("mu[{i}]"), Factor::new(FactorKind::Normal, 0.5 * var.max(1e-12).ln(), init_sd));
            priors.push(Prior::Normal { mean: 0.0, var: 10.0 });
        }
        for i in 0..dim {
            family.push(format!("a[{i}]"), Factor::new(FactorKind::SigmoidNormal, A_INIT_LOGIT, init_sd));
            priors.push(Prior::Uniform { low: 0.0, high: 1.0 });
        }
        for i in 0..dim {
            family.push(format!("L[{i},{i}]"), Factor::new(FactorKind::LogNormal, 0.2f64.ln(), init_sd));
            priors.push(Prior::LogNormal { mu: 0.0, var: 10.0 });
        }
        for i in 0..dim {
            for j in 0..i {
                family.push(format!("L[{i},{j}]"), Factor::new(FactorKind::Normal, 0.0, init_sd));
                priors.push(Prior::Normal { mean: 0.0, var: 10.0 });
            }
        }
        SvProblem {
            ys,
            dim,
            family,
            priors,
        }
    }

    pub fn num_params(dim: usize) -> usize {
        3 * dim + dim * (dim - 1) / 2
    }

    pub fn params_from<T: Real>(&self, theta: &[T]) -> SvParams<T> {
        params_from_flat(self.dim, theta)
    }
}

/// Builds [`SvParams`] from the flat layout used by [`SvProblem`].
pub fn params_from_flat<T: Real>(d: usize, theta: &[T]) -> SvParams<T> {
    let mu = theta[..d].to_vec();
    let a = theta[d..2 * d].to_vec();
    let mut l = Mat::zeros(d, d);
    for i in 0..d {
        l.set(i, i, theta[2 * d + i]);
    }
    let mut k = 3 * d;
    for i in 0..d {
        for j in 0..i {
            l.set(i, j, theta[k]);
            k += 1;
        }
    }
    SvParams { mu, a, l }
}

impl Problem for SvProblem {
    fn num_series(&self) -> usize {
        1
    }

    fn initial_family(&self) -> MeanFieldFamily {
        self.family.clone()
    }

    fn priors(&self) -> Vec<Prior> {
        self.priors.clone()
    }

    fn initial_proposal(&self) -> Vec<f64> {
        let mut v = vec![0.2f64.ln(); self.dim];
        v.extend(vec![0.0; self.dim]);
        v
    }

    fn log_evidence<T: Real>(
        &self,
        _series: usize,
        theta: &[T],
        phi: &[T],
        smc: SmcConfig,
        rng: &mut SmcRng,
        frozen: Option<&AncestryRecord>,
    ) -> Result<ParticleSystem<T>, TrainError> {
        let proposal = SvProposal::from_flat(self.dim, phi);
        let model = SvModel::new(self.params_from(theta), &proposal, &self.ys)
            .map_err(|e| TrainError::Model(e.to_string()))?;
        let opts = RunOptions {
            frozen,
            ..Default::default()
        };
        Ok(run_smc_with(&model, smc, rng, opts)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSettings {
    /// Steps ahead, 1 or 2.
    pub p: usize,
    /// Number of filters (θ draws).
    pub s: usize,
    /// Particles per filter.
    pub k: usize,
}

/// Log predictive scores `log p̂(y_{m+p} | y_{0:m})`, one per conditioning
/// point, and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveScore {
    pub p: usize,
    pub conditioning_points: Vec<usize>,
    pub log_scores: Vec<f64>,
    pub mean: f64,
}

/// Mixture estimate of the `p`-step predictive density at each conditioning
/// point `m`:
/// `(1/S) Σ_s Σ_k W_m^{k,s} g_{θ_s}(y_{m+p} | X_{m+p}^{k,s})`, where
/// `X_{m+p}^{k,s}` is propagated from `X_m^{k,s}` through the model.
/// Returns the densities on the natural (not log) scale, `[point][…]`.
pub fn predictive_densities(
    source: &ThetaSource,
    phi: &[f64],
    ys: &[Vec<f64>],
    points: &[usize],
    settings: PredictiveSettings,
    seed: u64,
) -> Result<Vec<f64>, SvError> {
    let PredictiveSettings { p, s, k } = settings;
    if !(1..=2).contains(&p) {
        return Err(SvError::UnsupportedHorizon(p));
    }
    let d = ys.first().map_or(0, |y| y.len());
    let last = ys.len() - 1;
    if let Some(&m) = points.iter().find(|&&m| m + p > last) {
        return Err(SvError::OutOfRange { target: m + p, last });
    }
    let max_m = points.iter().copied().max().unwrap_or(0);
    let proposal = SvProposal::from_flat(d, phi);
    let per_filter: Vec<Vec<f64>> = (0..s)
        .into_par_iter()
        .map(|j| -> Result<Vec<f64>, SvError> {
            let theta = source.draw(seed, j);
            let params = params_from_flat(d, &theta);
            let data = &ys[..=max_m];
            let model = SvModel::new(params.clone(), &proposal, data)?;
            let mut rng = SmcRng::new(derive_seed(seed, &[j as u64, 1]));
            let mut prop_rng = stream(seed, &[j as u64, 2]);
            let mut filter = ParticleFilter::new(&model, SmcConfig::new(k), RunOptions::default())?;
            let mut out = vec![0.0; points.len()];
            while !filter.is_done() {
                filter.advance(&mut rng)?;
                let n = filter.next_step() - 1;
                for (slot, _) in points.iter().enumerate().filter(|(_, &m)| m == n) {
                    let sys = filter.system();
                    let lw = sys.log_weights.last().unwrap();
                    let target = &ys[n + p];
                    let terms: Vec<f64> = (0..k)
                        .map(|i| {
                            let mut x = sys.state(sys.num_steps() - 1, i).to_vec();
                            for _ in 0..p {
                                // intermediate observations do not feed back into the state
                                x = params.step(&x, &standard_normals(&mut prop_rng, d));
                            }
                            lw[i] + log_obs_density(target, &x)
                        })
                        .collect();
                    out[slot] = f64::log_sum_exp(&terms).exp();
                }
            }
            Ok(out)
        })
        .collect::<Result<_, _>>()?;
    Ok((0..points.len())
        .map(|i| per_filter.iter().map(|f| f[i]).sum::<f64>() / s as f64)
        .collect())
}

/// Log scores at each conditioning point and their average.
pub fn predictive_loglik(
    source: &ThetaSource,
    phi: &[f64],
    ys: &[Vec<f64>],
    points: &[usize],
    settings: PredictiveSettings,
    seed: u64,
) -> Result<PredictiveScore, SvError> {
    let dens = predictive_densities(source, phi, ys, points, settings, seed)?;
    let log_scores: Vec<f64> = dens.iter().map(|v| v.ln()).collect();
    let mean = log_scores.iter().sum::<f64>() / log_scores.len() as f64;
    Ok(PredictiveScore {
        p: settings.p,
        conditioning_points: points.to_vec(),
        log_scores,
        mean,
    })
}

/// The last `count` conditioning points that leave room for a `p`-step target.
pub fn final_conditioning_points(len: usize, p: usize, count: usize) -> Vec<usize> {
    let last = len.saturating_sub(1 + p);
    (last.saturating_sub(count - 1)..=last).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smc::run_smc;
    use approx::assert_relative_eq;

    fn one_d(mu: f64, a: f64, var: f64) -> SvParams<f64> {
        SvParams {
            mu: vec![mu],
            a: vec![a],
            l: Mat::from_vec(1, 1, vec![var.sqrt()]),
        }
    }

    #[test]
    fn lyapunov_closed_form() {
        let s = Mat::from_vec(1, 1, vec![1.0]);
        assert_relative_eq!(lyapunov_stationary(&[0.9], &s).unwrap().at(0, 0), 1.0 / 0.19, epsilon = 1e-12);
        let s2 = Mat::from_vec(2, 2, vec![2.0, 0.3, 0.3, 1.0]);
        assert_eq!(lyapunov_stationary(&[0.0, 0.0], &s2).unwrap(), s2);
        assert!(matches!(lyapunov_stationary(&[1.0], &s), Err(SvError::NonStationary(_))));
    }

    #[test]
    fn lyapunov_residual_is_tiny() {
        let mut rng = stream(2, &[]);
        let g = Mat::from_vec(3, 3, standard_normals(&mut rng, 9));
        let sx = g.outer_self();
        let a = [0.3, -0.7, 0.95];
        let s0 = lyapunov_stationary(&a, &sx).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let r = s0.at(i, j) - (a[i] * s0.at(i, j) * a[j] + sx.at(i, j));
                assert!(r.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn observation_density_at_zero_state() {
        assert_relative_eq!(log_obs_density(&[0.0, 0.0], &[0.0, 0.0]), -LN_2PI, epsilon = 1e-15);
    }

    #[test]
    fn zero_persistence_transition_ignores_the_past() {
        let p = SvParams { mu: vec![0.5, -0.2], a: vec![0.0, 0.0], l: Mat::identity(2) };
        let ys = vec![vec![0.0, 0.0]; 2];
        let prop = SvProposal { log_sd: vec![0.0; 2], log_sd0: vec![0.0; 2] };
        let m = SvModel::new(p, &prop, &ys).unwrap();
        let x = [0.1, 0.3];
        let a = m.log_transition(1, Some(&[5.0, -7.0]), &x);
        let b = m.log_transition(1, Some(&[0.0, 0.0]), &x);
        assert_eq!(a, b);
    }

    /// Grid filter on the log-volatility, 200 points over ±6 stationary sd.
    fn grid_loglik(p: &SvParams<f64>, ys: &[Vec<f64>]) -> f64 {
        let (mu, a, var) = (p.mu[0], p.a[0], p.l.at(0, 0).powi(2));
        let sd0 = (var / (1.0 - a * a)).sqrt();
        let n = 200;
        let (lo, hi) = (mu - 8.0 * sd0, mu + 8.0 * sd0);
        let h = (hi - lo) / (n - 1) as f64;
        let grid: Vec<f64> = (0..n).map(|i| lo + h * i as f64).collect();
        let npdf = |x: f64, m: f64, v: f64| (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        let mut pred: Vec<f64> = grid.iter().map(|&x| npdf(x, mu, sd0 * sd0)).collect();
        let mut ll = 0.0;
        for (step, y) in ys.iter().enumerate() {
            if step > 0 {
                pred = grid
                    .iter()
                    .map(|&x| grid.iter().zip(&pred).map(|(&z, &w)| w * h * npdf(x, mu + a * (z - mu), var)).sum())
                    .collect();
            }
            let post: Vec<f64> = grid.iter().zip(&pred).map(|(&x, &w)| w * log_obs_density(y, &[x]).exp()).collect();
            let z: f64 = post.iter().sum::<f64>() * h;
            ll += z.ln();
            pred = post.iter().map(|w| w / z).collect();
        }
        ll
    }

    #[test]
    fn smc_matches_grid_filter() {
        let p = one_d(0.0, 0.9, 0.1);
        let (ys, _) = p.simulate(10, &mut stream(4, &[])).unwrap();
        let prop = SvProposal { log_sd: vec![0.5 * 0.1f64.ln()], log_sd0: vec![0.5 * (0.1f64 / 0.19).ln()] };
        let m = SvModel::new(p.clone(), &prop, &ys).unwrap();
        let sys = run_smc(&m, SmcConfig::new(500), &mut SmcRng::new(3)).unwrap();
        let oracle = grid_loglik(&p, &ys);
        assert!((sys.log_z - oracle).abs() < 0.5, "smc {} grid {}", sys.log_z, oracle);
    }

    #[test]
    fn flat_layout_roundtrip() {
        let theta: Vec<f64> = (0..SvProblem::num_params(3)).map(|i| i as f64).collect();
        let p = params_from_flat(3, &theta);
        assert_eq!(p.mu, vec![0.0, 1.0, 2.0]);
        assert_eq!(p.a, vec![3.0, 4.0, 5.0]);
        assert_eq!(p.l.at(1, 1), 7.0);
        assert_eq!(p.l.at(1, 0), 9.0);
        assert_eq!(p.l.at(2, 1), 11.0);
        assert_eq!(p.l.at(0, 1), 0.0);
    }

    #[test]
    fn initial_family_follows_data_scale() {
        let p = one_d(-1.0, 0.5, 0.2);
        let (ys, _) = p.simulate(50, &mut stream(1, &[])).unwrap();
        let prob = SvProblem::new(ys.clone());
        let fam = prob.initial_family();
        let n = ys.len() as f64;
        let m = ys.iter().map(|y| y[0]).sum::<f64>() / n;
        let sd = (ys.iter().map(|y| (y[0] - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert_relative_eq!(fam.factors[0].factor.mu, sd.ln(), epsilon = 1e-12);
        assert_relative_eq!(fam.point()[2], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn em_filters_share_theta_and_degenerate_case_collapses() {
        // σ_x → 0 with a = 0: the state is μ after every transition
        let theta = vec![0.3, 0.0, 1e-9];
        let ys = vec![vec![0.1], vec![-0.4], vec![0.7]];
        let phi = vec![(1e-9f64).ln(), 0.0];
        let settings = PredictiveSettings { p: 1, s: 1, k: 1 };
        let dens = predictive_densities(&ThetaSource::Point(theta), &phi, &ys, &[1], settings, 5).unwrap();
        let direct = log_obs_density(&ys[2], &[0.3]).exp();
        assert_relative_eq!(dens[0], direct, max_relative = 1e-6);
        assert!(matches!(
            predictive_densities(&ThetaSource::Point(vec![0.0, 0.0, 1.0]), &phi, &ys, &[1], PredictiveSettings { p: 3, s: 1, k: 1 }, 0),
            Err(SvError::UnsupportedHorizon(3))
        ));
    }

    #[test]
    fn conditioning_points_sweep() {
        assert_eq!(final_conditioning_points(100, 1, 10), (89..=98).collect::<Vec<_>>());
        assert_eq!(final_conditioning_points(100, 2, 3), vec![95, 96, 97]);
    }
}
