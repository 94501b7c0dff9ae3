//! Linear-Gaussian state-space models.
//!
//! `x_0 ~ N(a0, Σ_x0)`, `x_n = A x_{n-1} + N(0, Σ_x)`, `y_n = B x_n + N(0, Σ_y)`,
//! with an affine-Gaussian proposal
//! `M_n(x_n | x_{n-1}, y_n) = N(A_φ x_{n-1} + B_φ y_n, diag(exp(2 s_φ)))`
//! and `M_0(x_0 | y_0) = N(a0_φ + B_φ y_0, diag(exp(2 s0_φ)))`.
//! Exact log-likelihoods and smoothed marginals come from the Kalman filter
//! and the Rauch–Tung–Striebel smoother.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::autodiff::Real;
use crate::linalg::{chol_normal_logpdf, Mat, LN_2PI};
use crate::rng::standard_normals;
use crate::rng::SmcRng;
use crate::smc::{run_smc_with, AncestryRecord, ParticleSystem, RunOptions, SmcConfig, StateSpaceModel};
use crate::trainer::{Problem, TrainError};
use crate::variational::{Factor, FactorKind, MeanFieldFamily, Prior};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LgssError {
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("autoregressive parameter must satisfy |λ| < 1, got {0}")]
    Domain(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LgssParams<T> {
    pub a: Mat<T>,
    pub b: Mat<T>,
    pub sigma_x: Mat<T>,
    pub sigma_x0: Mat<T>,
    pub sigma_y: Mat<T>,
    pub a0: Vec<T>,
}

impl<T: Real> LgssParams<T> {
    pub fn dx(&self) -> usize {
        self.a.rows
    }

    pub fn dy(&self) -> usize {
        self.b.rows
    }

    pub fn values(&self) -> LgssParams<f64> {
        LgssParams {
            a: self.a.values(),
            b: self.b.values(),
            sigma_x: self.sigma_x.values(),
            sigma_x0: self.sigma_x0.values(),
            sigma_y: self.sigma_y.values(),
            a0: self.a0.iter().map(|v| v.value()).collect(),
        }
    }

    pub fn check_dims(&self) -> Result<(), LgssError> {
        let (dx, dy) = (self.dx(), self.dy());
        let square = |m: &Mat<T>, n: usize| m.rows == n && m.cols == n;
        if !square(&self.a, dx)
            || self.b.cols != dx
            || !square(&self.sigma_x, dx)
            || !square(&self.sigma_x0, dx)
            || !square(&self.sigma_y, dy)
            || self.a0.len() != dx
        {
            return Err(LgssError::Dimension(format!("inconsistent shapes for d_x={dx}, d_y={dy}")));
        }
        Ok(())
    }
}

impl LgssParams<f64> {
    /// `A_ij = α^{|i−j|+1}`, `B_ij ~ N(0, 1)`, identity covariances, `a0 = 0`.
    pub fn banded<R: Rng + ?Sized>(dx: usize, dy: usize, alpha: f64, rng: &mut R) -> Self {
        let mut a = Mat::zeros(dx, dx);
        for i in 0..dx {
            for j in 0..dx {
                a.set(i, j, alpha.powi((i as i32 - j as i32).abs() + 1));
            }
        }
        let b = Mat::from_vec(dy, dx, standard_normals(rng, dy * dx));
        LgssParams {
            a,
            b,
            sigma_x: Mat::identity(dx),
            sigma_x0: Mat::identity(dx),
            sigma_y: Mat::identity(dy),
            a0: vec![0.0; dx],
        }
    }

    /// Two-dimensional AR model `A = λI`, `B = (1, 1)`, unit noises and the
    /// given initial covariance scale.
    pub fn ar2(lambda: f64, initial_var: f64) -> Self {
        LgssParams {
            a: Mat::diag(&[lambda, lambda]),
            b: Mat::from_vec(1, 2, vec![1.0, 1.0]),
            sigma_x: Mat::identity(2),
            sigma_x0: Mat::diag(&[initial_var, initial_var]),
            sigma_y: Mat::identity(1),
            a0: vec![0.0, 0.0],
        }
    }

    /// The AR model started from its stationary distribution `N(0, I/(1−λ²))`.
    pub fn ar2_stationary(lambda: f64) -> Result<Self, LgssError> {
        if !(lambda.abs() < 1.0) {
            return Err(LgssError::Domain(lambda));
        }
        Ok(Self::ar2(lambda, 1.0 / (1.0 - lambda * lambda)))
    }

    pub fn validate(&self) -> Result<(), LgssError> {
        self.check_dims()?;
        for (m, name) in [
            (&self.sigma_x, "state covariance"),
            (&self.sigma_x0, "initial covariance"),
            (&self.sigma_y, "observation covariance"),
        ] {
            m.cholesky().ok_or(LgssError::NotPositiveDefinite(name))?;
        }
        Ok(())
    }

    /// Draws `(y_{0:M}, x_{0:M})` with `M = horizon`. Singular covariances
    /// are allowed and contribute no noise along their null directions.
    pub fn simulate<R: Rng + ?Sized>(&self, horizon: usize, rng: &mut R) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let lx = psd_factor(&self.sigma_x);
        let lx0 = psd_factor(&self.sigma_x0);
        let ly = psd_factor(&self.sigma_y);
        let mut xs: Vec<Vec<f64>> = Vec::with_capacity(horizon + 1);
        let mut ys = Vec::with_capacity(horizon + 1);
        for _ in 0..=horizon {
            let (mean, l) = match xs.last() {
                None => (self.a0.clone(), &lx0),
                Some(prev) => (self.a.matvec(prev), &lx),
            };
            let x = add(&mean, &l.matvec(&standard_normals(rng, self.dx())));
            let y = add(&self.b.matvec(&x), &ly.matvec(&standard_normals(rng, self.dy())));
            xs.push(x);
            ys.push(y);
        }
        (ys, xs)
    }

    /// Exact `log p(y_{0:M})` by the prediction-error decomposition.
    pub fn kalman_loglik(&self, ys: &[Vec<f64>]) -> Result<f64, LgssError> {
        Ok(self.kalman_filter(ys)?.loglik)
    }

    pub fn kalman_filter(&self, ys: &[Vec<f64>]) -> Result<KalmanOutput, LgssError> {
        self.check_dims()?;
        let a = self.a.to_nalgebra();
        let b = self.b.to_nalgebra();
        let sx = self.sigma_x.to_nalgebra();
        let sy = self.sigma_y.to_nalgebra();
        let mut m = DVector::from_column_slice(&self.a0);
        let mut p = self.sigma_x0.to_nalgebra();
        let mut out = KalmanOutput::default();
        for (n, y) in ys.iter().enumerate() {
            if y.len() != self.dy() {
                return Err(LgssError::Dimension(format!("observation {n} has length {}", y.len())));
            }
            if n > 0 {
                m = &a * &m;
                p = &a * &p * a.transpose() + &sx;
            }
            out.predicted_means.push(m.clone());
            out.predicted_covs.push(p.clone());
            let s = &b * &p * b.transpose() + &sy;
            let chol = s
                .clone()
                .cholesky()
                .ok_or(LgssError::NotPositiveDefinite("innovation covariance"))?;
            let v = DVector::from_column_slice(y) - &b * &m;
            let z = chol.l().solve_lower_triangular(&v).expect("triangular solve");
            let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            out.loglik += -0.5 * (y.len() as f64 * LN_2PI + log_det + z.norm_squared());
            let gain = &p * b.transpose() * chol.inverse();
            m = &m + &gain * v;
            p = &p - &gain * &s * gain.transpose();
            p = 0.5 * (&p + p.transpose());
            out.filtered_means.push(m.clone());
            out.filtered_covs.push(p.clone());
        }
        Ok(out)
    }

    /// Smoothed marginals `p(x_n | y_{0:M})` as (means, covariances).
    pub fn rts_smoother(&self, ys: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<Mat<f64>>), LgssError> {
        let kf = self.kalman_filter(ys)?;
        let a = self.a.to_nalgebra();
        let n = ys.len();
        let mut means = kf.filtered_means.clone();
        let mut covs = kf.filtered_covs.clone();
        for i in (0..n.saturating_sub(1)).rev() {
            let pred = &kf.predicted_covs[i + 1];
            let inv = pred
                .clone()
                .try_inverse()
                .ok_or(LgssError::NotPositiveDefinite("predicted covariance"))?;
            let g = &kf.filtered_covs[i] * a.transpose() * inv;
            means[i] = &kf.filtered_means[i] + &g * (&means[i + 1] - &kf.predicted_means[i + 1]);
            covs[i] = &kf.filtered_covs[i] + &g * (&covs[i + 1] - pred) * g.transpose();
        }
        Ok((
            means.iter().map(|m| m.iter().copied().collect()).collect(),
            covs.iter().map(Mat::from_nalgebra).collect(),
        ))
    }

    pub fn cast<T: Real>(&self) -> LgssParams<T> {
        LgssParams {
            a: Mat::from_f64(&self.a),
            b: Mat::from_f64(&self.b),
            sigma_x: Mat::from_f64(&self.sigma_x),
            sigma_x0: Mat::from_f64(&self.sigma_x0),
            sigma_y: Mat::from_f64(&self.sigma_y),
            a0: self.a0.iter().map(|&v| T::cst(v)).collect(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct KalmanOutput {
    pub loglik: f64,
    pub predicted_means: Vec<DVector<f64>>,
    pub predicted_covs: Vec<DMatrix<f64>>,
    pub filtered_means: Vec<DVector<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Cholesky-like factor of a positive semi-definite matrix; zero pivots give
/// zero columns.
fn psd_factor(m: &Mat<f64>) -> Mat<f64> {
    let n = m.rows;
    let mut l: Mat<f64> = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = m.at(j, j);
        for k in 0..j {
            d -= l.at(j, k).powi(2);
        }
        if d <= 1e-14 {
            continue;
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..n {
            let mut s = m.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    l
}

/// Gaussian posterior of `(x_0⁽⁰⁾, x_0⁽¹⁾, x_1⁽⁰⁾, x_1⁽¹⁾)` for the stationary
/// two-step AR model with scalar observations `y_0, y_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStepPosterior {
    pub mean: Vec<f64>,
    pub cov: Mat<f64>,
    pub precision: Mat<f64>,
}

impl TwoStepPosterior {
    pub fn log_density(&self, x: &[f64]) -> f64 {
        crate::linalg::mvn_logpdf(x, &self.mean, &self.cov).expect("posterior covariance is positive definite")
    }
}

pub fn two_step_posterior(lambda: f64, y0: f64, y1: f64) -> Result<TwoStepPosterior, LgssError> {
    if !(lambda.abs() < 1.0) {
        return Err(LgssError::Domain(lambda));
    }
    let l = lambda;
    let precision = Mat::from_vec(
        4,
        4,
        vec![
            2.0, 1.0, -l, 0.0, //
            1.0, 2.0, 0.0, -l, //
            -l, 0.0, 2.0, 1.0, //
            0.0, -l, 1.0, 2.0,
        ],
    );
    let cov_na = precision
        .to_nalgebra()
        .try_inverse()
        .ok_or(LgssError::NotPositiveDefinite("posterior precision"))?;
    let mean = &cov_na * DVector::from_column_slice(&[y0, y0, y1, y1]);
    Ok(TwoStepPosterior {
        mean: mean.iter().copied().collect(),
        cov: Mat::from_nalgebra(&cov_na),
        precision,
    })
}

/// Affine-Gaussian proposal parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LgssProposal<T> {
    pub a: Mat<T>,
    pub b: Mat<T>,
    pub log_sd: Vec<T>,
    pub a0: Vec<T>,
    pub log_sd0: Vec<T>,
}

impl<T: Real> LgssProposal<T> {
    pub fn flat_len(dx: usize, dy: usize) -> usize {
        dx * dx + dx * dy + 3 * dx
    }

    /// Layout: `A_φ` (row-major), `B_φ`, `s_φ`, `a0_φ`, `s0_φ`.
    pub fn from_flat(dx: usize, dy: usize, flat: &[T]) -> Result<Self, LgssError> {
        if flat.len() != Self::flat_len(dx, dy) {
            return Err(LgssError::Dimension(format!(
                "proposal vector has length {}, expected {}",
                flat.len(),
                Self::flat_len(dx, dy)
            )));
        }
        let (a, rest) = flat.split_at(dx * dx);
        let (b, rest) = rest.split_at(dx * dy);
        let (log_sd, rest) = rest.split_at(dx);
        let (a0, log_sd0) = rest.split_at(dx);
        Ok(LgssProposal {
            a: Mat::from_vec(dx, dx, a.to_vec()),
            b: Mat::from_vec(dx, dy, b.to_vec()),
            log_sd: log_sd.to_vec(),
            a0: a0.to_vec(),
            log_sd0: log_sd0.to_vec(),
        })
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut v = self.a.data.clone();
        v.extend_from_slice(&self.b.data);
        v.extend_from_slice(&self.log_sd);
        v.extend_from_slice(&self.a0);
        v.extend_from_slice(&self.log_sd0);
        v
    }
}

impl LgssProposal<f64> {
    /// The transition prior as proposal for a model with diagonal `Σ_x` and
    /// `Σ_x0`: `A_φ = A`, `B_φ = 0`.
    pub fn prior_like(params: &LgssParams<f64>) -> Self {
        let dx = params.dx();
        LgssProposal {
            a: params.a.clone(),
            b: Mat::zeros(dx, params.dy()),
            log_sd: (0..dx).map(|i| 0.5 * params.sigma_x.at(i, i).ln()).collect(),
            a0: params.a0.clone(),
            log_sd0: (0..dx).map(|i| 0.5 * params.sigma_x0.at(i, i).ln()).collect(),
        }
    }
}

/// An LGSS model with proposal, bound to one observation sequence.
#[derive(Debug, Clone)]
pub struct LgssModel<'a, T> {
    pub params: LgssParams<T>,
    pub proposal: LgssProposal<T>,
    ys: &'a [Vec<f64>],
    chol_x: Mat<T>,
    chol_x0: Mat<T>,
    chol_y: Mat<T>,
    sd: Vec<T>,
    sd0: Vec<T>,
    inv_sd: Vec<T>,
    inv_sd0: Vec<T>,
    sum_log_sd: T,
    sum_log_sd0: T,
}

impl<'a, T: Real> LgssModel<'a, T> {
    pub fn new(params: LgssParams<T>, proposal: LgssProposal<T>, ys: &'a [Vec<f64>]) -> Result<Self, LgssError> {
        params.check_dims()?;
        let (dx, dy) = (params.dx(), params.dy());
        if proposal.a.rows != dx || proposal.b.cols != dy || proposal.log_sd.len() != dx {
            return Err(LgssError::Dimension("proposal does not match the model".into()));
        }
        if let Some(y) = ys.iter().find(|y| y.len() != dy) {
            return Err(LgssError::Dimension(format!("observation of length {}", y.len())));
        }
        let chol = |m: &Mat<T>, name| m.cholesky().ok_or(LgssError::NotPositiveDefinite(name));
        Ok(LgssModel {
            chol_x: chol(&params.sigma_x, "state covariance")?,
            chol_x0: chol(&params.sigma_x0, "initial covariance")?,
            chol_y: chol(&params.sigma_y, "observation covariance")?,
            sd: proposal.log_sd.iter().map(|&s| s.exp()).collect(),
            sd0: proposal.log_sd0.iter().map(|&s| s.exp()).collect(),
            inv_sd: proposal.log_sd.iter().map(|&s| (-s).exp()).collect(),
            inv_sd0: proposal.log_sd0.iter().map(|&s| (-s).exp()).collect(),
            sum_log_sd: T::sum(&proposal.log_sd),
            sum_log_sd0: T::sum(&proposal.log_sd0),
            params,
            proposal,
            ys,
        })
    }

    fn y(&self, step: usize) -> Vec<T> {
        self.ys[step].iter().map(|&v| T::cst(v)).collect()
    }

    fn proposal_mean(&self, step: usize, prev: Option<&[T]>) -> Vec<T> {
        let by = self.proposal.b.matvec(&self.y(step));
        match prev {
            None => self.proposal.a0.iter().zip(by).map(|(&a, b)| a + b).collect(),
            Some(p) => self.proposal.a.matvec(p).into_iter().zip(by).map(|(a, b)| a + b).collect(),
        }
    }

    /// `(sd, 1/sd, Σ log sd)` of the proposal used after `prev`.
    fn proposal_scale(&self, prev: Option<&[T]>) -> (&[T], &[T], T) {
        match prev {
            None => (&self.sd0, &self.inv_sd0, self.sum_log_sd0),
            Some(_) => (&self.sd, &self.inv_sd, self.sum_log_sd),
        }
    }
}

impl<T: Real> StateSpaceModel<T> for LgssModel<'_, T> {
    fn num_steps(&self) -> usize {
        self.ys.len()
    }

    fn state_dim(&self) -> usize {
        self.params.dx()
    }

    fn noise_dim(&self, _step: usize) -> usize {
        self.params.dx()
    }

    fn propose(&self, step: usize, prev: Option<&[T]>, noise: &[f64]) -> (Vec<T>, T) {
        let mean = self.proposal_mean(step, prev);
        let (sd, _, sum_log_sd) = self.proposal_scale(prev);
        let x = mean
            .iter()
            .zip(sd)
            .zip(noise)
            .map(|((&m, &s), &e)| m + s * e)
            .collect();
        // the standardised residual is the noise itself
        let quad: f64 = noise.iter().map(|e| e * e).sum();
        let log_m = -sum_log_sd - 0.5 * (quad + LN_2PI * noise.len() as f64);
        (x, log_m)
    }

    fn log_proposal(&self, step: usize, prev: Option<&[T]>, x: &[T]) -> T {
        let mean = self.proposal_mean(step, prev);
        let (_, inv_sd, sum_log_sd) = self.proposal_scale(prev);
        let mut acc = -sum_log_sd - 0.5 * LN_2PI * x.len() as f64;
        for i in 0..x.len() {
            acc -= ((x[i] - mean[i]) * inv_sd[i]).square() * 0.5;
        }
        acc
    }

    fn log_transition(&self, _step: usize, prev: Option<&[T]>, x: &[T]) -> T {
        match prev {
            None => chol_normal_logpdf(x, &self.params.a0, &self.chol_x0),
            Some(p) => chol_normal_logpdf(x, &self.params.a.matvec(p), &self.chol_x),
        }
    }

    fn log_observation(&self, step: usize, x: &[T]) -> T {
        chol_normal_logpdf(&self.y(step), &self.params.b.matvec(x), &self.chol_y)
    }
}

/// Which static parameters are learned.
#[derive(Debug, Clone, PartialEq)]
pub enum LgssParameterisation {
    /// θ = (λ) with `A = λI`; everything else as in `base`.
    Ar { base: LgssParams<f64> },
    /// θ = (A row-major, B row-major, diag Σ_y); `Σ_x`, `Σ_x0`, `a0` from `base`.
    Full { base: LgssParams<f64> },
}

/// LGSS inference problem over a set of i.i.d. sequences sharing θ and φ.
#[derive(Debug, Clone)]
pub struct LgssProblem {
    pub series: Vec<Vec<Vec<f64>>>,
    pub kind: LgssParameterisation,
    family: MeanFieldFamily,
    priors: Vec<Prior>,
    phi0: Vec<f64>,
}

impl LgssProblem {
    /// Scalar AR problem, λ with a normal factor and `N(0, 1)` prior.
    pub fn ar(series: Vec<Vec<Vec<f64>>>, base: LgssParams<f64>, lambda_init: f64) -> Self {
        let mut family = MeanFieldFamily::new();
        family.push("lambda", Factor::new(FactorKind::Normal, lambda_init, INIT_LOG_SD));
        let dx = base.dx();
        let mut phi0 = LgssProposal::prior_like(&base);
        phi0.a = Mat::diag(&vec![lambda_init; dx]);
        LgssProblem {
            series,
            family,
            priors: vec![Prior::Normal { mean: 0.0, var: 1.0 }],
            phi0: phi0.to_flat(),
            kind: LgssParameterisation::Ar { base },
        }
    }

    /// Full problem with priors `A_ij ~ N(0, 1)`, `B_ij ~ N(0, 10)`,
    /// `Σ_y,ii ~ InvGamma(0.01, 0.01)`. Initial means: `A = 0`, `B` drawn
    /// from `N(0, 0.1²)` with `init_seed`, `Σ_y = I`.
    pub fn full(series: Vec<Vec<Vec<f64>>>, base: LgssParams<f64>, init_seed: u64) -> Self {
        let (dx, dy) = (base.dx(), base.dy());
        let mut family = MeanFieldFamily::new();
        let mut priors = Vec::new();
        for i in 0..dx {
            for j in 0..dx {
                family.push(format!("A[{i},{j}]"), Factor::new(FactorKind::Normal, 0.0, INIT_LOG_SD));
                priors.push(Prior::Normal { mean: 0.0, var: 1.0 });
            }
        }
        let b0 = standard_normals(&mut crate::rng::stream(init_seed, &[]), dy * dx);
        for i in 0..dy {
            for j in 0..dx {
                family.push(format!("B[{i},{j}]"), Factor::new(FactorKind::Normal, 0.1 * b0[i * dx + j], INIT_LOG_SD));
                priors.push(Prior::Normal { mean: 0.0, var: 10.0 });
            }
        }
        for i in 0..dy {
            family.push(format!("Sigma_y[{i}]"), Factor::new(FactorKind::LogNormal, 0.0, INIT_LOG_SD));
            priors.push(Prior::InverseGamma { shape: 0.01, scale: 0.01 });
        }
        let phi0 = LgssProposal {
            a: Mat::zeros(dx, dx),
            b: Mat::zeros(dx, dy),
            log_sd: vec![0.0; dx],
            a0: vec![0.0; dx],
            log_sd0: vec![0.0; dx],
        };
        LgssProblem {
            series,
            family,
            priors,
            phi0: phi0.to_flat(),
            kind: LgssParameterisation::Full { base },
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match &self.kind {
            LgssParameterisation::Ar { base } | LgssParameterisation::Full { base } => (base.dx(), base.dy()),
        }
    }

    /// Model parameters at θ.
    pub fn params_from<T: Real>(&self, theta: &[T]) -> LgssParams<T> {
        match &self.kind {
            LgssParameterisation::Ar { base } => {
                let mut p: LgssParams<T> = base.cast();
                let dx = base.dx();
                p.a = Mat::diag(&vec![theta[0]; dx]);
                p
            }
            LgssParameterisation::Full { base } => {
                let (dx, dy) = (base.dx(), base.dy());
                let mut p: LgssParams<T> = base.cast();
                p.a = Mat::from_vec(dx, dx, theta[..dx * dx].to_vec());
                p.b = Mat::from_vec(dy, dx, theta[dx * dx..dx * dx + dy * dx].to_vec());
                p.sigma_y = Mat::diag(&theta[dx * dx + dy * dx..]);
                p
            }
        }
    }

    /// Total Kalman log-likelihood of `data` at θ.
    pub fn kalman_loglik(&self, theta: &[f64], data: &[Vec<Vec<f64>>]) -> Result<f64, LgssError> {
        let p = self.params_from(theta);
        data.iter().map(|ys| p.kalman_loglik(ys)).sum()
    }
}

/// Initial log standard deviation of every variational factor.
pub const INIT_LOG_SD: f64 = -std::f64::consts::LN_10; // ln 0.1

impl Problem for LgssProblem {
    fn num_series(&self) -> usize {
        self.series.len()
    }

    fn initial_family(&self) -> MeanFieldFamily {
        self.family.clone()
    }

    fn priors(&self) -> Vec<Prior> {
        self.priors.clone()
    }

    fn initial_proposal(&self) -> Vec<f64> {
        self.phi0.clone()
    }

    fn log_evidence<T: Real>(
        &self,
        series: usize,
        theta: &[T],
        phi: &[T],
        smc: SmcConfig,
        rng: &mut SmcRng,
        frozen: Option<&AncestryRecord>,
    ) -> Result<ParticleSystem<T>, TrainError> {
        let (dx, dy) = self.dims();
        let params = self.params_from(theta);
        let proposal = LgssProposal::from_flat(dx, dy, phi).map_err(|e| TrainError::Model(e.to_string()))?;
        let model =
            LgssModel::new(params, proposal, &self.series[series]).map_err(|e| TrainError::Model(e.to_string()))?;
        let opts = RunOptions {
            frozen,
            ..Default::default()
        };
        Ok(run_smc_with(&model, smc, rng, opts)?)
    }
}
