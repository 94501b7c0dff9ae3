//! Non-linear stochastic Hawkes process as a discrete-time state-space model.
//!
//! Intensities are `λ_t = h(μ + Σ_b Ξ_t^b)` with `h(y) = ν·softplus(y/ν)`.
//! Each `Ξ^b` decays at rate `β_b` between events and jumps by `β_b A_n^b`
//! at event `n`, where `A_n ~ N(α_c, diag σ²_c)` depends on the event's
//! mark `c`. The SMC state at step `n` is `(Z_{n-1}, A_{n-1})`: the
//! excitation right after the previous event and the jump that produced it.
//! Step `n` observes `(t_n, c_n)`.
//!
//! Jump vectors of length `B·D` are laid out scale-major: entry `b·D + i`
//! acts on mark `i` through time scale `b`. Marks are 0-based internally.

use std::ops::Range;

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, softplus, Real};
use crate::linalg::LN_2PI;
use crate::quadrature::{gauss_legendre, log_transformed_with, QuadratureRule};
use crate::rng::{derive_seed, standard_normals, stream, SmcRng};
use crate::smc::{
    run_smc_with, AncestryRecord, Carry, ParticleFilter, ParticleSystem, RunOptions, SmcConfig, SmcError,
    StateSpaceModel,
};
use crate::trainer::{Problem, TrainError};
use crate::variational::{Factor, FactorKind, MeanFieldFamily, Prior};

use super::ThetaSource;

/// Width of the interval after each event that is not covered by the
/// log-transformed rule.
pub const GAP: f64 = 1e-6;
pub const QUAD_POINTS: usize = 50;
/// Log increments `(log β_1, log(β_2 − β_1), …)` of the default five time scales.
pub const DEFAULT_LOG_INCREMENTS: [f64; 5] = [-1.0, 1.0, 3.0, 5.0, 7.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HawkesError {
    #[error("time {t} precedes the previous event at {prev}")]
    TimeOrder { prev: f64, t: f64 },
    #[error("event {index}: times must be strictly increasing")]
    NotIncreasing { index: usize },
    #[error("event {index}: mark {mark} outside 0..{dims}")]
    MarkOutOfRange { index: usize, mark: usize, dims: usize },
    #[error("history is empty")]
    EmptyHistory,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("particle filter: {0}")]
    Smc(#[from] SmcError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub mark: usize,
}

/// Ordered events on `(origin, ∞)` with marks in `0..dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub origin: f64,
    pub dims: usize,
    pub events: Vec<Event>,
}

impl EventStream {
    pub fn new(origin: f64, dims: usize, events: Vec<Event>) -> Result<Self, HawkesError> {
        let mut prev = origin;
        for (index, e) in events.iter().enumerate() {
            if !(e.time > prev) {
                return Err(HawkesError::NotIncreasing { index });
            }
            if e.mark >= dims {
                return Err(HawkesError::MarkOutOfRange { index, mark: e.mark, dims });
            }
            prev = e.time;
        }
        Ok(EventStream { origin, dims, events })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Time of event `n − 1`, or the origin for `n = 0`.
    pub fn previous_time(&self, n: usize) -> f64 {
        if n == 0 {
            self.origin
        } else {
            self.events[n - 1].time
        }
    }

    /// `t_n − t_{n−1}`.
    pub fn gap(&self, n: usize) -> f64 {
        self.events[n].time - self.previous_time(n)
    }

    pub fn end_time(&self) -> f64 {
        self.events.last().map_or(self.origin, |e| e.time)
    }

    /// Events in `range`, re-based so the origin is the preceding event.
    pub fn slice(&self, range: Range<usize>) -> EventStream {
        EventStream {
            origin: self.previous_time(range.start),
            dims: self.dims,
            events: self.events[range].to_vec(),
        }
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.dims];
        for e in &self.events {
            c[e.mark] += 1;
        }
        c
    }
}

/// `β_b = Σ_{j≤b} exp(log_increments_j)`.
pub fn beta_from_log_increments(log_increments: &[f64]) -> Vec<f64> {
    betas_from_increments(&log_increments.iter().map(|v| v.exp()).collect::<Vec<_>>())
}

/// Cumulative sums of positive increments.
pub fn betas_from_increments<T: Real>(increments: &[T]) -> Vec<T> {
    let mut acc = T::zero();
    increments
        .iter()
        .map(|&d| {
            acc += d;
            acc
        })
        .collect()
}

/// Relative-time quadrature for `∫_0^Δ f(s) ds`: a trapezoid on `[0, g]`
/// followed by the log-transformed rule on `[g, Δ]`, `g = min(GAP, Δ/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl IntervalRule {
    pub fn new(base: &QuadratureRule, dt: f64) -> Self {
        assert!(dt > 0.0, "interval must have positive length");
        let g = GAP.min(0.5 * dt);
        let mapped = log_transformed_with(base, g, dt);
        let mut nodes = vec![0.0, g];
        let mut weights = vec![0.5 * g, 0.5 * g];
        nodes.extend(mapped.nodes);
        weights.extend(mapped.weights);
        IntervalRule { nodes, weights }
    }

    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&s, &w)| w * f(s)).sum()
    }
}

/// One rule per event gap.
pub fn interval_rules(events: &EventStream, points: usize) -> Vec<IntervalRule> {
    let base = gauss_legendre(points);
    (0..events.len()).map(|n| IntervalRule::new(&base, events.gap(n))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HawkesParams<T> {
    pub dims: usize,
    pub scales: usize,
    pub mu: Vec<T>,
    /// `D` blocks of `B·D` jump means, one block per triggering mark.
    pub alpha: Vec<T>,
    /// Jump variances, same layout as `alpha`.
    pub sigma2: Vec<T>,
    /// Strictly increasing decay rates.
    pub beta: Vec<T>,
    pub nu: T,
}

impl<T: Real> HawkesParams<T> {
    pub fn jump_len(&self) -> usize {
        self.dims * self.scales
    }

    pub fn alpha_for(&self, mark: usize) -> &[T] {
        let n = self.jump_len();
        &self.alpha[mark * n..(mark + 1) * n]
    }

    pub fn sigma2_for(&self, mark: usize) -> &[T] {
        let n = self.jump_len();
        &self.sigma2[mark * n..(mark + 1) * n]
    }

    pub fn values(&self) -> HawkesParams<f64> {
        let v = |xs: &[T]| xs.iter().map(|x| x.value()).collect();
        HawkesParams {
            dims: self.dims,
            scales: self.scales,
            mu: v(&self.mu),
            alpha: v(&self.alpha),
            sigma2: v(&self.sigma2),
            beta: v(&self.beta),
            nu: self.nu.value(),
        }
    }

    /// `h(u) = ν·softplus(u/ν)`.
    pub fn link(&self, u: T) -> T {
        (u / self.nu).softplus() * self.nu
    }

    /// `log h(u)`, stable for very negative `u/ν`.
    pub fn log_link(&self, u: T) -> T {
        let x = u / self.nu;
        let log_sp = if x.value() > -30.0 {
            x.softplus().ln()
        } else {
            x - x.exp() * 0.5
        };
        self.nu.ln() + log_sp
    }

    /// `μ_i + Σ_b e^{−β_b s} z^{b,i}`.
    pub fn argument(&self, z: &[T], s: f64, i: usize) -> T {
        let mut u = self.mu[i];
        for b in 0..self.scales {
            u += (self.beta[b] * -s).exp() * z[b * self.dims + i];
        }
        u
    }

    /// Intensities at `t` given the post-event excitation `z` at `t_prev`.
    pub fn intensity(&self, z: &[T], t_prev: f64, t: f64) -> Result<Vec<T>, HawkesError> {
        if t < t_prev {
            return Err(HawkesError::TimeOrder { prev: t_prev, t });
        }
        Ok((0..self.dims).map(|i| self.link(self.argument(z, t - t_prev, i))).collect())
    }

    /// `Z_n = e^{−β Δ} Z_{n−1} + β A_n`.
    pub fn jump(&self, z_prev: &[T], a: &[T], dt: f64) -> Vec<T> {
        let d = self.dims;
        (0..self.jump_len())
            .map(|j| {
                let beta = self.beta[j / d];
                (beta * -dt).exp() * z_prev[j] + beta * a[j]
            })
            .collect()
    }

    /// `Σ_i ∫ λ^i(s) ds` over the interval of `rule`, recorded as one node
    /// with analytic partials in `μ`, `z`, `β` and `ν`.
    pub fn compensator(&self, z: &[T], rule: &IntervalRule) -> T {
        let (d, nb, q) = (self.dims, self.scales, rule.nodes.len());
        let nu = self.nu.value();
        let beta: Vec<f64> = self.beta.iter().map(|b| b.value()).collect();
        let zv: Vec<f64> = z.iter().map(|v| v.value()).collect();
        let mut decay = vec![0.0; nb * q];
        for b in 0..nb {
            for (j, &s) in rule.nodes.iter().enumerate() {
                decay[b * q + j] = (-beta[b] * s).exp();
            }
        }
        let mut value = 0.0;
        let mut d_mu = vec![0.0; d];
        let mut d_z = vec![0.0; nb * d];
        let mut d_beta = vec![0.0; nb];
        let mut d_nu = 0.0;
        for i in 0..d {
            let mu = self.mu[i].value();
            for j in 0..q {
                let (s, w) = (rule.nodes[j], rule.weights[j]);
                let mut u = mu;
                for b in 0..nb {
                    u += decay[b * q + j] * zv[b * d + i];
                }
                let x = u / nu;
                let sp = softplus(x);
                let sg = w * sigmoid(x);
                value += w * nu * sp;
                d_mu[i] += sg;
                for b in 0..nb {
                    let e = decay[b * q + j];
                    d_z[b * d + i] += sg * e;
                    d_beta[b] -= sg * s * e * zv[b * d + i];
                }
                d_nu += w * sp - x * sg;
            }
        }
        let mut parts = Vec::with_capacity(d + nb * d + nb + 1);
        parts.extend(self.mu.iter().zip(d_mu).map(|(&v, p)| (v, p)));
        parts.extend(z.iter().zip(d_z).map(|(&v, p)| (v, p)));
        parts.extend(self.beta.iter().zip(d_beta).map(|(&v, p)| (v, p)));
        parts.push((self.nu, d_nu));
        T::fused(value, &parts)
    }

    /// `log λ^c(t_n) − Σ_i ∫ λ^i`, given the excitation `z` right after the
    /// previous event. `−∞` when the intensity of the observed mark is zero.
    pub fn log_observation_density(&self, z: &[T], dt: f64, mark: usize, rule: &IntervalRule) -> T {
        self.log_link(self.argument(z, dt, mark)) - self.compensator(z, rule)
    }
}

impl HawkesParams<f64> {
    pub fn validate(&self) -> Result<(), HawkesError> {
        let n = self.jump_len();
        if self.mu.len() != self.dims || self.alpha.len() != self.dims * n || self.sigma2.len() != self.dims * n {
            return Err(HawkesError::InvalidParams("shape mismatch".into()));
        }
        if self.beta.len() != self.scales || self.beta.first().is_some_and(|&b| !(b > 0.0)) {
            return Err(HawkesError::InvalidParams("decay rates must be positive".into()));
        }
        if self.beta.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(HawkesError::InvalidParams("decay rates must be strictly increasing".into()));
        }
        if !(self.nu > 0.0) {
            return Err(HawkesError::InvalidParams(format!("softplus scale {} must be positive", self.nu)));
        }
        if self.sigma2.iter().any(|&s| !(s >= 0.0)) {
            return Err(HawkesError::InvalidParams("jump variances must be non-negative".into()));
        }
        Ok(())
    }

    /// Jump variances `ε/β_b` for every mark, the near-deterministic limit.
    pub fn deterministic_limit_variances(dims: usize, beta: &[f64], eps: f64) -> Vec<f64> {
        let one: Vec<f64> = beta.iter().flat_map(|b| std::iter::repeat_n(eps / b, dims)).collect();
        one.repeat(dims)
    }

    /// Upper bound on `Σ_i λ^i` over `[s, ∞)`: every excitation term is
    /// replaced by its positive part at `s`, which can only decay afterwards.
    fn bound(&self, z: &[f64], s: f64) -> f64 {
        (0..self.dims)
            .map(|i| {
                let mut u = self.mu[i];
                for b in 0..self.scales {
                    u += ((-self.beta[b] * s).exp() * z[b * self.dims + i]).max(0.0);
                }
                self.link(u)
            })
            .sum()
    }

    /// Ogata thinning for the next event after `t_prev` with excitation `z`,
    /// or `None` if none occurs before `t_max`.
    pub fn next_event<R: Rng + ?Sized>(&self, z: &[f64], t_prev: f64, t_max: f64, rng: &mut R) -> Option<(f64, usize)> {
        let s_max = t_max - t_prev;
        let mut s = 0.0;
        let mut bound = self.bound(z, 0.0);
        loop {
            if !(bound > 0.0) {
                return None;
            }
            let e: f64 = rng.sample(Exp1);
            s += e / bound;
            if s > s_max {
                return None;
            }
            let lam: Vec<f64> = (0..self.dims).map(|i| self.link(self.argument(z, s, i))).collect();
            let total: f64 = lam.iter().sum();
            if total > bound {
                // never accept under a violated bound
                bound = self.bound(z, s);
                continue;
            }
            if rng.random::<f64>() * bound < total {
                let mut u = rng.random::<f64>() * total;
                let mut mark = self.dims - 1;
                for (i, l) in lam.iter().enumerate() {
                    if u < *l {
                        mark = i;
                        break;
                    }
                    u -= l;
                }
                return Some((t_prev + s, mark));
            }
            bound = self.bound(z, s);
        }
    }

    pub fn sample_jump<R: Rng + ?Sized>(&self, mark: usize, rng: &mut R) -> Vec<f64> {
        let eps = standard_normals(rng, self.jump_len());
        self.alpha_for(mark)
            .iter()
            .zip(self.sigma2_for(mark))
            .zip(eps)
            .map(|((a, s2), e)| a + s2.sqrt() * e)
            .collect()
    }

    /// Simulates on `(origin, t_end]`, stopping early after `max_events`.
    /// Returns the stream and the post-event excitation after each event.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        origin: f64,
        t_end: f64,
        max_events: usize,
        rng: &mut R,
    ) -> Result<(EventStream, Vec<Vec<f64>>), HawkesError> {
        self.validate()?;
        let mut z = vec![0.0; self.jump_len()];
        let mut t = origin;
        let mut events = Vec::new();
        let mut zs = Vec::new();
        while events.len() < max_events {
            let Some((tn, c)) = self.next_event(&z, t, t_end, rng) else {
                break;
            };
            let a = self.sample_jump(c, rng);
            z = self.jump(&z, &a, tn - t);
            t = tn;
            events.push(Event { time: tn, mark: c });
            zs.push(z.clone());
        }
        Ok((EventStream::new(origin, self.dims, events)?, zs))
    }
}

/// Whether the jump proposal is learned or tied to the generative jumps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalKind {
    #[default]
    Learned,
    Prior,
}

/// Mark-indexed Gaussian proposal for the jumps.
#[derive(Debug, Clone, PartialEq)]
pub struct HawkesProposal<T> {
    pub alpha: Vec<T>,
    pub log_sd: Vec<T>,
}

impl<T: Real> HawkesProposal<T> {
    pub fn from_flat(flat: &[T]) -> Self {
        let n = flat.len() / 2;
        HawkesProposal {
            alpha: flat[..n].to_vec(),
            log_sd: flat[n..].to_vec(),
        }
    }

    pub fn from_prior(params: &HawkesParams<T>) -> Self {
        HawkesProposal {
            alpha: params.alpha.clone(),
            log_sd: params.sigma2.iter().map(|&s| s.ln() * 0.5).collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct MarkGaussian<T> {
    mean: Vec<T>,
    sd: Vec<T>,
    inv_sd: Vec<T>,
    sum_log_sd: Vec<T>,
}

impl<T: Real> MarkGaussian<T> {
    fn new(mean: &[T], log_sd: &[T], dims: usize) -> Self {
        let n = mean.len() / dims;
        MarkGaussian {
            mean: mean.to_vec(),
            sd: log_sd.iter().map(|&s| s.exp()).collect(),
            inv_sd: log_sd.iter().map(|&s| (-s).exp()).collect(),
            sum_log_sd: log_sd.chunks(n).map(T::sum).collect(),
        }
    }

    fn log_density(&self, mark: usize, a: &[T]) -> T {
        let n = a.len();
        let off = mark * n;
        let mut acc = -self.sum_log_sd[mark] - 0.5 * LN_2PI * n as f64;
        for j in 0..n {
            acc -= ((a[j] - self.mean[off + j]) * self.inv_sd[off + j]).square() * 0.5;
        }
        acc
    }
}

/// The Hawkes SSM over a stream with precomputed interval rules.
#[derive(Debug, Clone)]
pub struct HawkesModel<'a, T> {
    pub params: HawkesParams<T>,
    events: &'a EventStream,
    rules: &'a [IntervalRule],
    prior: MarkGaussian<T>,
    proposal: MarkGaussian<T>,
}

impl<'a, T: Real> HawkesModel<'a, T> {
    pub fn new(
        params: HawkesParams<T>,
        proposal: &HawkesProposal<T>,
        events: &'a EventStream,
        rules: &'a [IntervalRule],
    ) -> Result<Self, HawkesError> {
        params.values().validate()?;
        let n = params.dims * params.jump_len();
        if proposal.alpha.len() != n || proposal.log_sd.len() != n {
            return Err(HawkesError::InvalidParams(format!("proposal needs {n} means and scales")));
        }
        if rules.len() < events.len() || events.dims != params.dims {
            return Err(HawkesError::InvalidParams("stream and rules do not match the model".into()));
        }
        let prior_log_sd: Vec<T> = params.sigma2.iter().map(|&s| s.ln() * 0.5).collect();
        Ok(HawkesModel {
            prior: MarkGaussian::new(&params.alpha, &prior_log_sd, params.dims),
            proposal: MarkGaussian::new(&proposal.alpha, &proposal.log_sd, params.dims),
            params,
            events,
            rules,
        })
    }
}

impl<T: Real> StateSpaceModel<T> for HawkesModel<'_, T> {
    fn num_steps(&self) -> usize {
        self.events.len()
    }

    fn state_dim(&self) -> usize {
        2 * self.params.jump_len()
    }

    fn noise_dim(&self, step: usize) -> usize {
        if step == 0 {
            0
        } else {
            self.params.jump_len()
        }
    }

    fn propose(&self, step: usize, prev: Option<&[T]>, noise: &[f64]) -> (Vec<T>, T) {
        let n = self.params.jump_len();
        if step == 0 {
            return (vec![T::zero(); 2 * n], T::zero());
        }
        let zeros;
        let z_prev = match prev {
            Some(x) => &x[..n],
            None => {
                zeros = vec![T::zero(); n];
                &zeros[..]
            }
        };
        let mark = self.events.events[step - 1].mark;
        let p = &self.proposal;
        let a: Vec<T> = (0..n)
            .map(|j| p.mean[mark * n + j] + p.sd[mark * n + j] * noise[j])
            .collect();
        let mut x = self.params.jump(z_prev, &a, self.events.gap(step - 1));
        x.extend(a);
        let quad: f64 = noise.iter().map(|e| e * e).sum();
        (x, -p.sum_log_sd[mark] - 0.5 * (quad + LN_2PI * n as f64))
    }

    fn log_proposal(&self, step: usize, _prev: Option<&[T]>, x: &[T]) -> T {
        if step == 0 {
            return T::zero();
        }
        let n = self.params.jump_len();
        self.proposal.log_density(self.events.events[step - 1].mark, &x[n..])
    }

    fn log_transition(&self, step: usize, _prev: Option<&[T]>, x: &[T]) -> T {
        if step == 0 {
            return T::zero();
        }
        let n = self.params.jump_len();
        self.prior.log_density(self.events.events[step - 1].mark, &x[n..])
    }

    fn log_observation(&self, step: usize, x: &[T]) -> T {
        let n = self.params.jump_len();
        let e = self.events.events[step];
        self.params
            .log_observation_density(&x[..n], self.events.gap(step), e.mark, &self.rules[step])
    }
}

/// Static-parameter layout:
/// `μ` (D), `α` (D·B·D), `σ²` (D·B·D), decay increments (B, unless fixed), `ν`.
/// The learned proposal vector is `α̃` (D·B·D) followed by `log σ̃` (D·B·D).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HawkesLayout {
    pub dims: usize,
    pub scales: usize,
    /// Decay rates held fixed instead of inferred.
    pub fixed_beta: Option<Vec<f64>>,
    pub proposal: ProposalKind,
}

impl HawkesLayout {
    pub fn jump_len(&self) -> usize {
        self.dims * self.scales
    }

    pub fn num_params(&self) -> usize {
        let n = self.dims * self.jump_len();
        self.dims + 2 * n + if self.fixed_beta.is_some() { 0 } else { self.scales } + 1
    }

    pub fn proposal_len(&self) -> usize {
        match self.proposal {
            ProposalKind::Learned => 2 * self.dims * self.jump_len(),
            ProposalKind::Prior => 0,
        }
    }

    pub fn params_from<T: Real>(&self, theta: &[T]) -> HawkesParams<T> {
        let d = self.dims;
        let n = d * self.jump_len();
        let mut k = 0;
        let mut take = |len: usize| {
            let s = theta[k..k + len].to_vec();
            k += len;
            s
        };
        let mu = take(d);
        let alpha = take(n);
        let sigma2 = take(n);
        let beta = match &self.fixed_beta {
            Some(b) => b.iter().map(|&v| T::cst(v)).collect(),
            None => betas_from_increments(&take(self.scales)),
        };
        let nu = take(1)[0];
        HawkesParams {
            dims: d,
            scales: self.scales,
            mu,
            alpha,
            sigma2,
            beta,
            nu,
        }
    }

    pub fn proposal_from<T: Real>(&self, params: &HawkesParams<T>, phi: &[T]) -> HawkesProposal<T> {
        match self.proposal {
            ProposalKind::Learned => HawkesProposal::from_flat(phi),
            ProposalKind::Prior => HawkesProposal::from_prior(params),
        }
    }
}

/// Maximum-likelihood fit of the linear model
/// `λ^i(t) = μ_i + Σ_{n: t_n < t} Σ_b β_b α_{c_n}^{b,i} e^{−β_b (t − t_n)}`
/// with `μ > 0` and `α ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHawkesFit {
    pub mu: Vec<f64>,
    pub alpha: Vec<f64>,
    pub log_likelihood: f64,
}

struct LinearFeatures {
    /// `S_n[b·D + d] = Σ_{m<n, c_m=d} β_b e^{−β_b (t_n − t_m)}`, row per event.
    s: Vec<f64>,
    /// `G[b·D + d] = Σ_{m: c_m=d} (1 − e^{−β_b (T − t_m)})`.
    g: Vec<f64>,
    span: f64,
}

fn linear_features(events: &EventStream, beta: &[f64]) -> LinearFeatures {
    let d = events.dims;
    let n = d * beta.len();
    let t_end = events.end_time();
    let mut s = vec![0.0; events.len() * n];
    let mut cur = vec![0.0; n];
    let mut g = vec![0.0; n];
    for (k, e) in events.events.iter().enumerate() {
        if k > 0 {
            let dt = events.gap(k);
            let prev = events.events[k - 1].mark;
            for (b, &beta_b) in beta.iter().enumerate() {
                for dd in 0..d {
                    let j = b * d + dd;
                    let bump = if dd == prev { beta_b } else { 0.0 };
                    cur[j] = (-beta_b * dt).exp() * (cur[j] + bump);
                }
            }
        }
        s[k * n..(k + 1) * n].copy_from_slice(&cur);
        for (b, &beta_b) in beta.iter().enumerate() {
            g[b * d + e.mark] += 1.0 - (-beta_b * (t_end - e.time)).exp();
        }
    }
    LinearFeatures {
        s,
        g,
        span: t_end - events.origin,
    }
}

fn linear_loglik_and_grad(
    events: &EventStream,
    f: &LinearFeatures,
    nb: usize,
    mu: &[f64],
    alpha: &[f64],
) -> (f64, Vec<f64>, Vec<f64>) {
    let d = events.dims;
    let n = d * nb;
    let mut ll = 0.0;
    let mut g_mu = vec![-f.span; d];
    let mut g_alpha = vec![0.0; d * n];
    for dd in 0..d {
        for j in 0..n {
            // α_dd^{b,i} multiplies G[b·D + dd]
            g_alpha[dd * n + j] = -f.g[(j / d) * d + dd];
        }
    }
    for (k, e) in events.events.iter().enumerate() {
        let c = e.mark;
        let row = &f.s[k * n..(k + 1) * n];
        let mut lam = mu[c];
        for b in 0..nb {
            for dd in 0..d {
                lam += alpha[dd * n + b * d + c] * row[b * d + dd];
            }
        }
        ll += lam.ln();
        let inv = 1.0 / lam;
        g_mu[c] += inv;
        for b in 0..nb {
            for dd in 0..d {
                g_alpha[dd * n + b * d + c] += row[b * d + dd] * inv;
            }
        }
    }
    for i in 0..d {
        ll -= mu[i] * f.span;
    }
    for dd in 0..d {
        for j in 0..n {
            ll -= alpha[dd * n + j] * f.g[(j / d) * d + dd];
        }
    }
    (ll, g_mu, g_alpha)
}

/// Exact log-likelihood of the linear model on `events`.
pub fn linear_hawkes_loglik(events: &EventStream, beta: &[f64], mu: &[f64], alpha: &[f64]) -> f64 {
    let f = linear_features(events, beta);
    linear_loglik_and_grad(events, &f, beta.len(), mu, alpha).0
}

/// Gradient ascent on the (concave) linear log-likelihood with the
/// diagonal step `θ_j / G_j`, where `G_j` is the compensator coefficient of
/// `θ_j`. This step is the multiplicative update
/// `θ_j ← θ_j · (Σ_n ∂ log λ_n / ∂θ_j) / G_j`, which keeps every parameter
/// non-negative and never decreases the likelihood.
pub fn fit_linear_hawkes(events: &EventStream, beta: &[f64], iterations: usize) -> Result<LinearHawkesFit, HawkesError> {
    if events.is_empty() {
        return Err(HawkesError::EmptyHistory);
    }
    let d = events.dims;
    let n = d * beta.len();
    let f = linear_features(events, beta);
    let counts = events.counts();
    let mut params: Vec<f64> = counts.iter().map(|&c| (0.5 * c as f64 / f.span).max(1e-6)).collect();
    params.extend(vec![0.05; d * n]);
    let coef: Vec<f64> = std::iter::repeat_n(f.span, d)
        .chain((0..d * n).map(|k| f.g[((k % n) / d) * d + k / n]))
        .collect();
    for _ in 0..iterations {
        let (_, g_mu, g_alpha) = linear_loglik_and_grad(events, &f, beta.len(), &params[..d], &params[d..]);
        for ((p, g), c) in params.iter_mut().zip(g_mu.iter().chain(&g_alpha)).zip(&coef) {
            if *c > 0.0 {
                *p += *p / c * g;
            } else {
                *p = 0.0;
            }
        }
    }
    let (mu, alpha) = params.split_at(d);
    let (log_likelihood, _, _) = linear_loglik_and_grad(events, &f, beta.len(), mu, alpha);
    Ok(LinearHawkesFit {
        mu: mu.to_vec(),
        alpha: alpha.to_vec(),
        log_likelihood,
    })
}

/// Initial location of the sigmoid-normal factor of `ν` (`ν ≈ 0.01`).
const NU_INIT_LOGIT: f64 = -4.6;
/// Initial jump variance.
const SIGMA2_INIT: f64 = 0.01;

/// A stream split into consecutive batches; the particles at the end of one
/// batch seed the next.
#[derive(Debug, Clone)]
pub struct HawkesProblem {
    pub events: EventStream,
    pub layout: HawkesLayout,
    pub batches: Vec<Range<usize>>,
    rules: Vec<IntervalRule>,
    carries: Vec<Option<Carry>>,
    family: MeanFieldFamily,
    priors: Vec<Prior>,
    phi0: Vec<f64>,
}

impl HawkesProblem {
    /// Builds the problem with variational means at the linear fit `init`.
    /// Learned decay rates start at `init_beta`.
    pub fn new(
        events: EventStream,
        layout: HawkesLayout,
        batch_len: usize,
        init: &LinearHawkesFit,
        init_beta: &[f64],
    ) -> Result<Self, HawkesError> {
        if events.is_empty() {
            return Err(HawkesError::EmptyHistory);
        }
        if batch_len == 0 || init_beta.len() != layout.scales || events.dims != layout.dims {
            return Err(HawkesError::InvalidParams("batch length, scales or dims".into()));
        }
        let d = layout.dims;
        let n = layout.jump_len();
        let v0 = crate::models::lgss::INIT_LOG_SD;
        let mut family = MeanFieldFamily::new();
        let mut priors = Vec::new();
        let gamma = Prior::Gamma { shape: 0.01, rate: 0.01 };
        for i in 0..d {
            family.push(format!("mu[{i}]"), Factor::new(FactorKind::LogNormal, init.mu[i].max(1e-6).ln(), v0));
            priors.push(gamma);
        }
        for c in 0..d {
            for j in 0..n {
                let name = format!("alpha[{c}][{},{}]", j / d, j % d);
                family.push(name, Factor::new(FactorKind::Normal, init.alpha[c * n + j], v0));
                priors.push(Prior::Normal { mean: 0.0, var: 10.0 });
            }
        }
        for c in 0..d {
            for j in 0..n {
                let name = format!("sigma2[{c}][{},{}]", j / d, j % d);
                family.push(name, Factor::new(FactorKind::LogNormal, SIGMA2_INIT.ln(), v0));
                priors.push(gamma);
            }
        }
        if layout.fixed_beta.is_none() {
            let mut prev = 0.0;
            for (b, &beta) in init_beta.iter().enumerate() {
                family.push(format!("beta_increment[{b}]"), Factor::new(FactorKind::LogNormal, (beta - prev).ln(), v0));
                priors.push(Prior::LogNormal { mu: 0.0, var: 1.0 });
                prev = beta;
            }
        }
        family.push("nu", Factor::new(FactorKind::SigmoidNormal, NU_INIT_LOGIT, v0));
        priors.push(Prior::Uniform { low: 0.0, high: 1.0 });
        let phi0 = match layout.proposal {
            ProposalKind::Learned => {
                let mut p = init.alpha.clone();
                p.extend(vec![0.5 * SIGMA2_INIT.ln(); d * n]);
                p
            }
            ProposalKind::Prior => Vec::new(),
        };
        let batches: Vec<Range<usize>> = (0..events.len())
            .step_by(batch_len)
            .map(|s| s..(s + batch_len).min(events.len()))
            .collect();
        Ok(HawkesProblem {
            rules: interval_rules(&events, QUAD_POINTS),
            carries: vec![None; batches.len()],
            events,
            layout,
            batches,
            family,
            priors,
            phi0,
        })
    }

    /// [`HawkesProblem::new`] with the linear fit computed on `events`.
    pub fn from_events(events: EventStream, layout: HawkesLayout, batch_len: usize, init_beta: &[f64]) -> Result<Self, HawkesError> {
        let beta = layout.fixed_beta.clone().unwrap_or_else(|| init_beta.to_vec());
        let fit = fit_linear_hawkes(&events, &beta, 1000)?;
        Self::new(events, layout, batch_len, &fit, &beta)
    }

    pub fn rules(&self) -> &[IntervalRule] {
        &self.rules
    }

    pub fn carry(&self, batch: usize) -> Option<&Carry> {
        self.carries[batch].as_ref()
    }

    /// Runs one filter over all batches at `(θ, φ)` and stores the particle
    /// cloud at the start of every batch, for use as that batch's carry.
    pub fn refresh_carries(&mut self, theta: &[f64], phi: &[f64], particles: usize, seed: u64) -> Result<f64, HawkesError> {
        let params = self.layout.params_from(theta);
        let proposal = self.layout.proposal_from(&params, phi);
        let model = HawkesModel::new(params, &proposal, &self.events, &self.rules)?;
        let mut rng = SmcRng::new(seed);
        let mut carry: Option<Carry> = None;
        let mut log_z = 0.0;
        let mut carries = Vec::with_capacity(self.batches.len());
        for range in &self.batches {
            carries.push(carry.clone());
            let opts = RunOptions {
                steps: Some(range.clone()),
                carry: carry.as_ref(),
                frozen: None,
            };
            let sys = run_smc_with(&model, SmcConfig::new(particles), &mut rng, opts)?;
            log_z += sys.log_z;
            carry = Some(sys.carry());
        }
        self.carries = carries;
        Ok(log_z)
    }
}

impl Problem for HawkesProblem {
    fn num_series(&self) -> usize {
        self.batches.len()
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
        let params = self.layout.params_from(theta);
        let proposal = self.layout.proposal_from(&params, phi);
        let model =
            HawkesModel::new(params, &proposal, &self.events, &self.rules).map_err(|e| TrainError::Model(e.to_string()))?;
        // a stale carry with a different particle count is dropped
        let carry = self.carries[series].as_ref().filter(|c| c.particles() == smc.particles);
        let opts = RunOptions {
            steps: Some(self.batches[series].clone()),
            carry,
            frozen,
        };
        Ok(run_smc_with(&model, smc, rng, opts)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NextMarkSettings {
    /// Filters (θ draws).
    pub s: usize,
    /// Particles per filter.
    pub k: usize,
    /// Simulated next events per particle.
    pub j: usize,
}

impl Default for NextMarkSettings {
    fn default() -> Self {
        NextMarkSettings { s: 4, k: 20, j: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkPrediction {
    /// Index `m` of the last conditioning event.
    pub index: usize,
    pub predicted: usize,
    /// Mark of event `m + 1`, when it exists.
    pub actual: Option<usize>,
    /// Weighted counts per mark, summed over filters.
    pub weights: Vec<f64>,
}

/// Largest entry, ties to the smallest index.
pub fn weighted_argmax(weights: &[f64]) -> usize {
    let mut best = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > weights[best] {
            best = i;
        }
    }
    best
}

/// Number of events filtered per chunk, so memory stays flat on long streams.
const PREDICT_CHUNK: usize = 200;

/// Predicts the mark of event `m + 1` for every `m` in `targets`. Each filter
/// draws θ from `source`, filters `events[..=m]`, draws a fresh jump for
/// event `m` from the generative model and simulates `j` next events per
/// particle by thinning; mark counts are weighted by the filtering weights.
pub fn predict_next_marks(
    layout: &HawkesLayout,
    source: &ThetaSource,
    phi: &[f64],
    events: &EventStream,
    targets: Range<usize>,
    settings: NextMarkSettings,
    seed: u64,
) -> Result<Vec<MarkPrediction>, HawkesError> {
    if events.is_empty() || targets.is_empty() {
        return Err(HawkesError::EmptyHistory);
    }
    let last = targets.end.min(events.len());
    let d = layout.dims;
    let n = layout.jump_len();
    let rules = interval_rules(&events.slice(0..last), QUAD_POINTS);
    let prefix = events.slice(0..last);
    let per_filter: Vec<Vec<f64>> = (0..settings.s)
        .into_par_iter()
        .map(|s| -> Result<Vec<f64>, HawkesError> {
            let theta = source.draw(seed, s);
            let params = layout.params_from(&theta);
            let proposal = layout.proposal_from(&params, phi);
            let model = HawkesModel::new(params.clone(), &proposal, &prefix, &rules)?;
            let mut rng = SmcRng::new(derive_seed(seed, &[s as u64, 1]));
            let mut sim_rng = stream(seed, &[s as u64, 2]);
            let mut counts = vec![0.0; targets.len() * d];
            let mut carry: Option<Carry> = None;
            let mut start = 0;
            while start < last {
                let range = start..(start + PREDICT_CHUNK).min(last);
                let opts = RunOptions {
                    steps: Some(range.clone()),
                    carry: carry.as_ref(),
                    frozen: None,
                };
                let mut filter = ParticleFilter::new(&model, SmcConfig::new(settings.k), opts)?;
                while !filter.is_done() {
                    filter.advance(&mut rng)?;
                    let m = filter.next_step() - 1;
                    if !targets.contains(&m) {
                        continue;
                    }
                    let sys = filter.system();
                    let local = sys.num_steps() - 1;
                    let lw = &sys.log_weights[local];
                    let ev = prefix.events[m];
                    let slot = &mut counts[(m - targets.start) * d..(m - targets.start + 1) * d];
                    for k in 0..settings.k {
                        let z_prev = &sys.state(local, k)[..n];
                        let a = params.sample_jump(ev.mark, &mut sim_rng);
                        let z = params.jump(z_prev, &a, prefix.gap(m));
                        let w = lw[k].exp();
                        for _ in 0..settings.j {
                            if let Some((_, c)) = params.next_event(&z, ev.time, f64::INFINITY, &mut sim_rng) {
                                slot[c] += w;
                            }
                        }
                    }
                }
                carry = Some(filter.system().carry());
                start = range.end;
            }
            Ok(counts)
        })
        .collect::<Result<_, _>>()?;
    Ok(targets
        .clone()
        .enumerate()
        .map(|(slot, m)| {
            let weights: Vec<f64> = (0..d)
                .map(|c| per_filter.iter().map(|f| f[slot * d + c]).sum())
                .collect();
            MarkPrediction {
                index: m,
                predicted: weighted_argmax(&weights),
                actual: events.events.get(m + 1).map(|e| e.mark),
                weights,
            }
        })
        .collect())
}

/// Fraction of predictions whose mark differs from the realised one.
pub fn error_rate(predictions: &[MarkPrediction]) -> f64 {
    let scored: Vec<_> = predictions.iter().filter_map(|p| p.actual.map(|a| a != p.predicted)).collect();
    scored.iter().filter(|&&wrong| wrong).count() as f64 / scored.len().max(1) as f64
}
