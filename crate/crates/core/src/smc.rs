//! Sequential Monte Carlo samplers over generic state-space models.
//!
//! A run propagates `K` particles through steps `0..=M`. At step `n` particle
//! `k` picks a parent `a^k` (after optional resampling), is moved by the
//! proposal, and receives the unnormalised weight
//! `w_n^k = W_{n-1}^{a^k} · g(y_n | x_n) f(x_n | x_{n-1}) / M(x_n | x_{n-1})`,
//! with `W_{-1} = 1/K`. The evidence estimate is `log Ẑ = Σ_n log Σ_k w_n^k`.
//!
//! All weight arithmetic is done in log space on [`Real`] scalars, so the
//! same code computes plain values (`f64`) or records a differentiable graph
//! (`Var`). Resampling outcomes are discrete and carry no gradient; after a
//! resampling step the weights `1/K` are plain constants.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Real;
use crate::rng::{standard_normals, SmcRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmcError {
    #[error("need at least one particle")]
    NoParticles,
    #[error("model has no time steps")]
    NoSteps,
    #[error("all particle weights vanished or became non-finite at step {step}")]
    Degenerate { step: usize },
    #[error("proposal produced a non-finite value at step {step}, particle {particle}")]
    NonFinite { step: usize, particle: usize },
    #[error("particle index {index} out of range for {particles} particles")]
    IndexOutOfRange { index: usize, particles: usize },
    #[error("retained path has {got} steps, expected {expected}")]
    RetainedLength { expected: usize, got: usize },
    #[error("frozen ancestry does not match the run: {0}")]
    FrozenMismatch(&'static str),
    #[error("carried particle cloud has {got} particles, expected {expected}")]
    CarryMismatch { expected: usize, got: usize },
}

/// A state-space model together with a proposal, evaluated at fixed
/// parameter values of scalar type `T`.
///
/// Steps are indexed `0..num_steps()`. `prev` is `None` at step 0 of a fresh
/// run, where the transition density is the initial density `f(x_0)`.
pub trait StateSpaceModel<T: Real> {
    fn num_steps(&self) -> usize;
    fn state_dim(&self) -> usize;
    /// Number of standard-normal draws consumed by [`Self::propose`] at `step`.
    fn noise_dim(&self, step: usize) -> usize;
    /// Reparameterised proposal draw `x_n = h(x_{n-1}, ε)` and `log M_n(x_n | x_{n-1})`.
    fn propose(&self, step: usize, prev: Option<&[T]>, noise: &[f64]) -> (Vec<T>, T);
    fn log_proposal(&self, step: usize, prev: Option<&[T]>, x: &[T]) -> T;
    fn log_transition(&self, step: usize, prev: Option<&[T]>, x: &[T]) -> T;
    fn log_observation(&self, step: usize, x: &[T]) -> T;

    /// `log α_n = log g + log f − log M`.
    fn log_incremental_weight(&self, step: usize, prev: Option<&[T]>, x: &[T], log_m: T) -> T {
        self.log_observation(step, x) + self.log_transition(step, prev, x) - log_m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleMode {
    #[default]
    Always,
    EssThreshold,
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleScheme {
    #[default]
    Multinomial,
    Systematic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResamplingPolicy {
    pub mode: ResampleMode,
    /// Resample when `ESS < threshold · K` in [`ResampleMode::EssThreshold`].
    pub threshold: f64,
    pub scheme: ResampleScheme,
}

impl Default for ResamplingPolicy {
    fn default() -> Self {
        ResamplingPolicy {
            mode: ResampleMode::Always,
            threshold: 0.5,
            scheme: ResampleScheme::Multinomial,
        }
    }
}

impl ResamplingPolicy {
    pub fn always() -> Self {
        Self::default()
    }

    pub fn ess(threshold: f64) -> Self {
        ResamplingPolicy {
            mode: ResampleMode::EssThreshold,
            threshold,
            ..Self::default()
        }
    }

    pub fn never() -> Self {
        ResamplingPolicy {
            mode: ResampleMode::Never,
            ..Self::default()
        }
    }

    fn should_resample(&self, log_weights: &[f64]) -> bool {
        match self.mode {
            ResampleMode::Always => true,
            ResampleMode::Never => false,
            ResampleMode::EssThreshold => {
                ess(log_weights) < self.threshold * log_weights.len() as f64
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmcConfig {
    pub particles: usize,
    pub policy: ResamplingPolicy,
    /// Keep forward copies of every particle's index path (for checks).
    pub track_paths: bool,
}

impl SmcConfig {
    pub fn new(particles: usize) -> Self {
        SmcConfig {
            particles,
            policy: ResamplingPolicy::default(),
            track_paths: false,
        }
    }

    pub fn with_policy(mut self, policy: ResamplingPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn tracking_paths(mut self) -> Self {
        self.track_paths = true;
        self
    }
}

/// The discrete outcomes of a run: which steps resampled, the ancestors and
/// the final index. Replaying a run with the same noise and a frozen record
/// reproduces the same graph topology.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AncestryRecord {
    pub resampled: Vec<bool>,
    pub ancestors: Vec<Vec<usize>>,
    pub final_index: usize,
}

/// Particle cloud handed from the end of one run to the start of the next.
#[derive(Debug, Clone, PartialEq)]
pub struct Carry {
    pub state_dim: usize,
    /// `K · state_dim` values, particle-major.
    pub states: Vec<f64>,
    /// Normalised log weights.
    pub log_weights: Vec<f64>,
}

impl Carry {
    pub fn particles(&self) -> usize {
        self.log_weights.len()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.state_dim..(k + 1) * self.state_dim]
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    /// Steps to run; defaults to all of them.
    pub steps: Option<Range<usize>>,
    pub carry: Option<&'a Carry>,
    pub frozen: Option<&'a AncestryRecord>,
}

/// Output of one SMC run. Per-step vectors are indexed by the local step
/// `i = n − first_step`.
#[derive(Debug, Clone)]
pub struct ParticleSystem<T> {
    pub particles: usize,
    pub state_dim: usize,
    pub first_step: usize,
    /// `K · state_dim` values per step, particle-major.
    pub states: Vec<Vec<T>>,
    /// `log α_n^k`.
    pub log_alpha: Vec<Vec<T>>,
    /// `log M_n(x_n^k | x_{n-1}^{a^k})`.
    pub log_proposal: Vec<Vec<T>>,
    /// Unnormalised `log w_n^k = log W_{n-1}^{a^k} + log α_n^k`.
    pub log_w: Vec<Vec<T>>,
    /// Normalised `log W_n^k`.
    pub log_weights: Vec<Vec<T>>,
    /// `ancestors[i][k]`: index at the previous step of the parent of
    /// particle `k` at step `i`. Identity at step 0 of a fresh run.
    pub ancestors: Vec<Vec<usize>>,
    /// `resampled[i]`: whether the parents of step `i` were resampled.
    pub resampled: Vec<bool>,
    pub log_z_increments: Vec<T>,
    pub log_z: T,
    /// `Σ log W_{n-1}^{a^k}` over all resampled ancestor draws, with gradient
    /// flow through the weights; the score of the discrete ancestry.
    pub log_ancestry_prob: T,
    pub final_index: usize,
    /// Forward copies of each particle's index path, when tracked.
    pub forward_paths: Option<Vec<Vec<usize>>>,
}

impl<T: Real> ParticleSystem<T> {
    pub fn num_steps(&self) -> usize {
        self.states.len()
    }

    pub fn state(&self, local_step: usize, k: usize) -> &[T] {
        &self.states[local_step][k * self.state_dim..(k + 1) * self.state_dim]
    }

    /// Back-traced ancestor indices `b_0, …, b_M` of particle `l` at the last step.
    pub fn lineage(&self, l: usize) -> Result<Vec<usize>, SmcError> {
        if l >= self.particles {
            return Err(SmcError::IndexOutOfRange {
                index: l,
                particles: self.particles,
            });
        }
        let m = self.num_steps();
        let mut b = vec![0; m];
        b[m - 1] = l;
        for i in (1..m).rev() {
            b[i - 1] = self.ancestors[i][b[i]];
        }
        Ok(b)
    }

    /// The latent path of particle `l` at the last step, by lineage.
    pub fn path(&self, l: usize) -> Result<Vec<Vec<T>>, SmcError> {
        let b = self.lineage(l)?;
        Ok(b.iter()
            .enumerate()
            .map(|(i, &k)| self.state(i, k).to_vec())
            .collect())
    }

    pub fn final_path(&self) -> Vec<Vec<T>> {
        self.path(self.final_index).expect("final index is in range")
    }

    pub fn ancestry_record(&self) -> AncestryRecord {
        AncestryRecord {
            resampled: self.resampled.clone(),
            ancestors: self.ancestors.clone(),
            final_index: self.final_index,
        }
    }

    pub fn final_log_weights(&self) -> Vec<f64> {
        self.log_weights
            .last()
            .map(|w| w.iter().map(|v| v.value()).collect())
            .unwrap_or_default()
    }

    /// Detached particle cloud at the last step.
    pub fn carry(&self) -> Carry {
        Carry {
            state_dim: self.state_dim,
            states: self
                .states
                .last()
                .map(|s| s.iter().map(|v| v.value()).collect())
                .unwrap_or_default(),
            log_weights: self.final_log_weights(),
        }
    }
}

/// Effective sample size `1 / Σ W_k²` from normalised log weights.
pub fn ess(log_weights: &[f64]) -> f64 {
    let s: f64 = log_weights.iter().map(|lw| (2.0 * lw).exp()).sum();
    1.0 / s
}

fn normalised_weights(log_weights: &[f64]) -> Vec<f64> {
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut c: Vec<f64> = weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    if let Some(last) = c.last_mut() {
        *last = f64::INFINITY;
    }
    c
}

/// Draws one index with probability proportional to `exp(log_weights)`.
pub fn sample_index<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> usize {
    let cdf = cumulative(&normalised_weights(log_weights));
    let u: f64 = rng.random();
    cdf.partition_point(|&c| c <= u).min(log_weights.len() - 1)
}

/// Draws `n` ancestor indices from the categorical distribution given by
/// normalised log weights.
pub fn resample<R: Rng + ?Sized>(
    log_weights: &[f64],
    n: usize,
    scheme: ResampleScheme,
    rng: &mut R,
) -> Vec<usize> {
    let k = log_weights.len();
    let cdf = cumulative(&normalised_weights(log_weights));
    let pick = |u: f64| cdf.partition_point(|&c| c <= u).min(k - 1);
    match scheme {
        ResampleScheme::Multinomial => (0..n).map(|_| pick(rng.random::<f64>())).collect(),
        ResampleScheme::Systematic => {
            let u0: f64 = rng.random();
            (0..n).map(|i| pick((i as f64 + u0) / n as f64)).collect()
        }
    }
}

fn check_finite<T: Real>(x: &[T], log_m: T, step: usize, particle: usize) -> Result<(), SmcError> {
    if x.iter().any(|v| v.value().is_nan()) || log_m.value().is_nan() {
        return Err(SmcError::NonFinite { step, particle });
    }
    Ok(())
}

/// Retained trajectory for conditional SMC: one state per step and its slot
/// (lineage index) at every step.
#[derive(Debug, Clone, Copy)]
pub struct Retained<'a> {
    pub path: &'a [Vec<f64>],
    pub lineage: &'a [usize],
}

/// Step-by-step SMC driver. [`run_smc`] and [`run_csmc`] are thin wrappers;
/// streaming users (online prediction) call [`ParticleFilter::advance`]
/// and inspect the cloud between steps.
pub struct ParticleFilter<'a, T: Real, M: StateSpaceModel<T> + ?Sized> {
    model: &'a M,
    cfg: SmcConfig,
    frozen: Option<&'a AncestryRecord>,
    retained: Option<Retained<'a>>,
    carry: Option<(Vec<T>, Vec<T>)>,
    next: usize,
    end: usize,
    sys: ParticleSystem<T>,
}

impl<'a, T: Real, M: StateSpaceModel<T> + ?Sized> ParticleFilter<'a, T, M> {
    pub fn new(model: &'a M, cfg: SmcConfig, opts: RunOptions<'a>) -> Result<Self, SmcError> {
        let k = cfg.particles;
        if k == 0 {
            return Err(SmcError::NoParticles);
        }
        let steps = opts.steps.clone().unwrap_or(0..model.num_steps());
        if steps.is_empty() {
            return Err(SmcError::NoSteps);
        }
        let dim = model.state_dim();
        let carry = match opts.carry {
            Some(c) => {
                if c.particles() != k {
                    return Err(SmcError::CarryMismatch {
                        expected: k,
                        got: c.particles(),
                    });
                }
                Some((
                    c.states.iter().map(|&v| T::cst(v)).collect(),
                    c.log_weights.iter().map(|&v| T::cst(v)).collect(),
                ))
            }
            None => None,
        };
        let n = steps.len();
        Ok(ParticleFilter {
            model,
            cfg,
            frozen: opts.frozen,
            retained: None,
            carry,
            next: steps.start,
            end: steps.end,
            sys: ParticleSystem {
                particles: k,
                state_dim: dim,
                first_step: steps.start,
                states: Vec::with_capacity(n),
                log_alpha: Vec::with_capacity(n),
                log_proposal: Vec::with_capacity(n),
                log_w: Vec::with_capacity(n),
                log_weights: Vec::with_capacity(n),
                ancestors: Vec::with_capacity(n),
                resampled: Vec::with_capacity(n),
                log_z_increments: Vec::with_capacity(n),
                log_z: T::zero(),
                log_ancestry_prob: T::zero(),
                final_index: 0,
                forward_paths: cfg.track_paths.then(|| vec![Vec::new(); k]),
            },
        })
    }

    fn with_retained(mut self, retained: Retained<'a>) -> Result<Self, SmcError> {
        let n = self.end - self.next;
        if retained.path.len() != n || retained.lineage.len() != n {
            return Err(SmcError::RetainedLength {
                expected: n,
                got: retained.path.len().min(retained.lineage.len()),
            });
        }
        if let Some(&bad) = retained.lineage.iter().find(|&&b| b >= self.cfg.particles) {
            return Err(SmcError::IndexOutOfRange {
                index: bad,
                particles: self.cfg.particles,
            });
        }
        self.retained = Some(retained);
        Ok(self)
    }

    pub fn is_done(&self) -> bool {
        self.next >= self.end
    }

    /// Absolute index of the next step to be run.
    pub fn next_step(&self) -> usize {
        self.next
    }

    pub fn system(&self) -> &ParticleSystem<T> {
        &self.sys
    }

    /// Runs one step.
    pub fn advance(&mut self, rng: &mut SmcRng) -> Result<(), SmcError> {
        let k = self.cfg.particles;
        let dim = self.sys.state_dim;
        let step = self.next;
        let i = step - self.sys.first_step;
        let log_k = (k as f64).ln();

        // previous cloud: the last step of this run, or the carried cloud
        let prev: Option<(&[T], &[T])> = match self.sys.states.last() {
            Some(s) => Some((s.as_slice(), self.sys.log_weights.last().unwrap().as_slice())),
            None => self.carry.as_ref().map(|(s, w)| (s.as_slice(), w.as_slice())),
        };

        let retained_slot = self.retained.map(|r| (r.lineage[i], i.checked_sub(1).map(|j| r.lineage[j])));

        let (ancestors, resampled) = match prev {
            None => ((0..k).collect::<Vec<_>>(), false),
            Some((_, prev_lw)) => {
                let lw: Vec<f64> = prev_lw.iter().map(|v| v.value()).collect();
                if let Some(fr) = self.frozen {
                    let a = fr
                        .ancestors
                        .get(i)
                        .ok_or(SmcError::FrozenMismatch("too few steps"))?
                        .clone();
                    let r = fr.resampled[i];
                    if a.len() != k {
                        return Err(SmcError::FrozenMismatch("particle count"));
                    }
                    (a, r)
                } else if self.retained.is_some() {
                    let mut a = resample(&lw, k, self.cfg.policy.scheme, &mut rng.ancestry);
                    if let Some((b, Some(b_prev))) = retained_slot {
                        a[b] = b_prev;
                    } else if let Some((b, None)) = retained_slot {
                        // carried start: keep the slot's own predecessor
                        a[b] = b;
                    }
                    (a, true)
                } else if self.cfg.policy.should_resample(&lw) {
                    (resample(&lw, k, self.cfg.policy.scheme, &mut rng.ancestry), true)
                } else {
                    ((0..k).collect(), false)
                }
            }
        };

        let mut states = Vec::with_capacity(k * dim);
        let mut log_alpha = Vec::with_capacity(k);
        let mut log_props = Vec::with_capacity(k);
        let mut log_w = Vec::with_capacity(k);
        let mut anc_prob = T::zero();
        let nd = self.model.noise_dim(step);
        for (particle, &a) in ancestors.iter().enumerate() {
            let parent = prev.map(|(s, _)| &s[a * dim..(a + 1) * dim]);
            let noise = standard_normals(&mut rng.noise, nd);
            let (x, log_m) = match retained_slot {
                Some((b, _)) if b == particle => {
                    let r = self.retained.unwrap();
                    let x: Vec<T> = r.path[i].iter().map(|&v| T::cst(v)).collect();
                    let lm = self.model.log_proposal(step, parent, &x);
                    (x, lm)
                }
                _ => self.model.propose(step, parent, &noise),
            };
            check_finite(&x, log_m, step, particle)?;
            let la = self.model.log_incremental_weight(step, parent, &x, log_m);
            let prior_w = match prev {
                None => T::cst(-log_k),
                Some(_) if resampled => T::cst(-log_k),
                Some((_, prev_lw)) => prev_lw[a],
            };
            if resampled {
                if let Some((_, prev_lw)) = prev {
                    anc_prob += prev_lw[a];
                }
            }
            states.extend_from_slice(&x);
            log_w.push(prior_w + la);
            log_alpha.push(la);
            log_props.push(log_m);
        }

        let inc = T::log_sum_exp(&log_w);
        if !inc.value().is_finite() {
            return Err(SmcError::Degenerate { step });
        }
        let log_weights: Vec<T> = log_w.iter().map(|&w| w - inc).collect();

        if let Some(paths) = self.sys.forward_paths.as_mut() {
            let old = std::mem::take(paths);
            *paths = ancestors
                .iter()
                .enumerate()
                .map(|(particle, &a)| {
                    let mut p = old[a].clone();
                    p.push(particle);
                    p
                })
                .collect();
        }

        self.sys.log_z += inc;
        self.sys.log_ancestry_prob += anc_prob;
        self.sys.log_z_increments.push(inc);
        self.sys.states.push(states);
        self.sys.log_alpha.push(log_alpha);
        self.sys.log_proposal.push(log_props);
        self.sys.log_w.push(log_w);
        self.sys.log_weights.push(log_weights);
        self.sys.ancestors.push(ancestors);
        self.sys.resampled.push(resampled);
        self.next += 1;
        Ok(())
    }

    /// Runs the remaining steps and draws the final index.
    pub fn finish(mut self, rng: &mut SmcRng) -> Result<ParticleSystem<T>, SmcError> {
        while !self.is_done() {
            self.advance(rng)?;
        }
        self.sys.final_index = if let Some(fr) = self.frozen {
            if fr.final_index >= self.cfg.particles {
                return Err(SmcError::FrozenMismatch("final index"));
            }
            fr.final_index
        } else if let Some(r) = self.retained {
            *r.lineage.last().unwrap()
        } else {
            sample_index(&self.sys.final_log_weights(), &mut rng.ancestry)
        };
        Ok(self.sys)
    }
}

/// Runs a full SMC sweep over every step of the model.
pub fn run_smc<T: Real, M: StateSpaceModel<T> + ?Sized>(
    model: &M,
    cfg: SmcConfig,
    rng: &mut SmcRng,
) -> Result<ParticleSystem<T>, SmcError> {
    run_smc_with(model, cfg, rng, RunOptions::default())
}

pub fn run_smc_with<T: Real, M: StateSpaceModel<T> + ?Sized>(
    model: &M,
    cfg: SmcConfig,
    rng: &mut SmcRng,
    opts: RunOptions<'_>,
) -> Result<ParticleSystem<T>, SmcError> {
    ParticleFilter::new(model, cfg, opts)?.finish(rng)
}

/// Conditional SMC: the particle in slot `lineage[n]` at step `n` is clamped
/// to `path[n]` and descends from slot `lineage[n-1]`; the other `K − 1`
/// particles are resampled at every step and proposed as usual.
pub fn run_csmc<T: Real, M: StateSpaceModel<T> + ?Sized>(
    model: &M,
    cfg: SmcConfig,
    retained: Retained<'_>,
    rng: &mut SmcRng,
) -> Result<ParticleSystem<T>, SmcError> {
    let cfg = cfg.with_policy(ResamplingPolicy {
        mode: ResampleMode::Always,
        ..cfg.policy
    });
    ParticleFilter::new(model, cfg, RunOptions::default())?
        .with_retained(retained)?
        .finish(rng)
}

/// Back-traced lineage of `l` from a recorded ancestry table.
pub fn trace_lineage(record: &AncestryRecord, l: usize) -> Result<Vec<usize>, SmcError> {
    let particles = record.ancestors.first().map_or(0, |a| a.len());
    if l >= particles {
        return Err(SmcError::IndexOutOfRange { index: l, particles });
    }
    let m = record.ancestors.len();
    let mut b = vec![0; m];
    b[m - 1] = l;
    for i in (1..m).rev() {
        b[i - 1] = record.ancestors[i][b[i]];
    }
    Ok(b)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::linalg::LN_2PI;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// 1-D AR(1) model `x_n = a x_{n-1} + ε`, `y_n = x_n + δ`, unit noises,
    /// `x_0 ~ N(0, 1)`, with a proposal `N(c·x_{n-1}, s²)`.
    pub(crate) struct Ar1<T> {
        pub a: T,
        pub c: T,
        pub log_s: T,
        pub ys: Vec<f64>,
    }

    fn lnorm<T: Real>(x: T, m: T, log_sd: T) -> T {
        let z = (x - m) * (-log_sd).exp();
        -log_sd - z.square() * 0.5 - 0.5 * LN_2PI
    }

    impl<T: Real> StateSpaceModel<T> for Ar1<T> {
        fn num_steps(&self) -> usize {
            self.ys.len()
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn noise_dim(&self, _: usize) -> usize {
            1
        }
        fn propose(&self, step: usize, prev: Option<&[T]>, noise: &[f64]) -> (Vec<T>, T) {
            let m = prev.map_or(T::zero(), |p| self.c * p[0]);
            let x = m + self.log_s.exp() * noise[0];
            let lm = self.log_proposal(step, prev, &[x]);
            (vec![x], lm)
        }
        fn log_proposal(&self, _: usize, prev: Option<&[T]>, x: &[T]) -> T {
            let m = prev.map_or(T::zero(), |p| self.c * p[0]);
            lnorm(x[0], m, self.log_s)
        }
        fn log_transition(&self, _: usize, prev: Option<&[T]>, x: &[T]) -> T {
            let m = prev.map_or(T::zero(), |p| self.a * p[0]);
            lnorm(x[0], m, T::zero())
        }
        fn log_observation(&self, step: usize, x: &[T]) -> T {
            lnorm(T::cst(self.ys[step]), x[0], T::zero())
        }
    }

    fn model(ys: Vec<f64>) -> Ar1<f64> {
        Ar1 { a: 0.5, c: 0.4, log_s: 0.1, ys }
    }

    #[test]
    fn ess_extremes() {
        let k = 7;
        let uniform = vec![-(k as f64).ln(); k];
        assert_relative_eq!(ess(&uniform), k as f64, epsilon = 1e-12);
        let mut one_hot = vec![f64::NEG_INFINITY; k];
        one_hot[3] = 0.0;
        assert_eq!(ess(&one_hot), 1.0);
    }

    #[test]
    fn single_bootstrap_particle_sums_observation_densities() {
        // proposal equal to the transition prior
        let m = Ar1 { a: 0.5, c: 0.5, log_s: 0.0, ys: vec![0.3, -0.2, 1.1] };
        let mut rng = SmcRng::new(3);
        let sys = run_smc(&m, SmcConfig::new(1), &mut rng).unwrap();
        let path = sys.final_path();
        let expected: f64 = (0..3).map(|n| m.log_observation(n, &path[n])).sum();
        assert_relative_eq!(sys.log_z, expected, epsilon = 1e-12);
        assert_eq!(sys.lineage(0).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn normalised_weights_sum_to_one() {
        for policy in [ResamplingPolicy::always(), ResamplingPolicy::ess(0.5), ResamplingPolicy::never()] {
            let mut rng = SmcRng::new(9);
            let sys = run_smc(&model(vec![0.1, 2.0, -1.0, 0.5]), SmcConfig::new(13).with_policy(policy), &mut rng)
                .unwrap();
            for lw in &sys.log_weights {
                let s: f64 = lw.iter().map(|v| v.exp()).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
            for (i, anc) in sys.ancestors.iter().enumerate() {
                assert!(anc.iter().all(|&a| a < 13));
                if i > 0 && sys.resampled[i] {
                    // the weights entering step i were reset to 1/K
                    for (lw, la) in sys.log_w[i].iter().zip(&sys.log_alpha[i]) {
                        assert_relative_eq!(lw - la, -(13f64).ln(), epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn no_resampling_matches_direct_importance_estimate() {
        let m = model(vec![0.1, 2.0, -1.0, 0.5, 0.0]);
        let k = 6;
        let mut rng = SmcRng::new(4);
        let sys = run_smc(&m, SmcConfig::new(k).with_policy(ResamplingPolicy::never()), &mut rng).unwrap();
        let per_particle: Vec<f64> = (0..k)
            .map(|p| sys.log_alpha.iter().map(|la| la[p]).sum::<f64>())
            .collect();
        let direct = f64::log_sum_exp(&per_particle) - (k as f64).ln();
        assert!((sys.log_z - direct).abs() < 1e-10);
        for l in 0..k {
            assert_eq!(sys.lineage(l).unwrap(), vec![l; 5]);
        }
    }

    /// Independent back-walk over the raw ancestry table.
    fn brute_force_lineage(anc: &[Vec<usize>], l: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = l;
        let mut n = anc.len();
        while n > 0 {
            n -= 1;
            out.push(cur);
            cur = anc[n][cur];
        }
        out.reverse();
        out
    }

    #[test]
    fn lineage_matches_back_walk_and_forward_paths() {
        let m = model(vec![0.3, -0.4, 1.2, 0.1, -0.9]);
        let mut rng = SmcRng::new(21);
        let sys = run_smc(&m, SmcConfig::new(4).tracking_paths(), &mut rng).unwrap();
        let fwd = sys.forward_paths.as_ref().unwrap();
        for l in 0..4 {
            let b = sys.lineage(l).unwrap();
            assert_eq!(b, brute_force_lineage(&sys.ancestors, l));
            assert_eq!(&b, &fwd[l]);
            assert_eq!(trace_lineage(&sys.ancestry_record(), l).unwrap(), b);
        }
        assert!(matches!(sys.lineage(4), Err(SmcError::IndexOutOfRange { .. })));
    }

    #[test]
    fn frozen_ancestry_reproduces_run() {
        let m = model(vec![0.3, -0.4, 1.2, 0.1]);
        let cfg = SmcConfig::new(5);
        let a = run_smc(&m, cfg, &mut SmcRng::new(8)).unwrap();
        let rec = a.ancestry_record();
        let mut rng = SmcRng::new(8);
        rng.ancestry = crate::rng::stream(12345, &[]);
        let opts = RunOptions { frozen: Some(&rec), ..Default::default() };
        let b = run_smc_with(&m, cfg, &mut rng, opts).unwrap();
        assert_eq!(a.log_z, b.log_z);
        assert_eq!(a.final_index, b.final_index);
    }

    #[test]
    fn stop_gradient_on_ancestry_matches_hard_coded_topology() {
        // gradient of log Ẑ through a sampled run equals the gradient through
        // a run replaying the same ancestry as frozen data
        let ys = vec![0.3, -0.4, 1.2, 0.1];
        let grad = |frozen: Option<&AncestryRecord>| {
            let tape = Tape::new();
            let p = tape.vars(&[0.5, 0.4, 0.1]);
            let m = Ar1 { a: p[0], c: p[1], log_s: p[2], ys: ys.clone() };
            let opts = RunOptions { frozen, ..Default::default() };
            let sys = run_smc_with(&m, SmcConfig::new(3), &mut SmcRng::new(2), opts).unwrap();
            (tape.backward(sys.log_z, &p).unwrap(), sys.ancestry_record())
        };
        let (g1, rec) = grad(None);
        let (g2, _) = grad(Some(&rec));
        assert_eq!(g1, g2);
    }

    #[test]
    fn csmc_with_one_particle_returns_retained_path() {
        let m = model(vec![0.3, -0.4, 1.2]);
        let path = vec![vec![0.7], vec![-0.1], vec![2.0]];
        let lineage = vec![0, 0, 0];
        let sys = run_csmc(&m, SmcConfig::new(1), Retained { path: &path, lineage: &lineage }, &mut SmcRng::new(1))
            .unwrap();
        assert_eq!(sys.final_path(), path);
        // Ẑ is the retained path's own weight product
        let direct: f64 = (0..3)
            .map(|n| {
                let prev = (n > 0).then(|| path[n - 1].as_slice());
                m.log_observation(n, &path[n]) + m.log_transition(n, prev, &path[n])
                    - m.log_proposal(n, prev, &path[n])
            })
            .sum();
        assert_relative_eq!(sys.log_z, direct, epsilon = 1e-12);
    }

    #[test]
    fn csmc_keeps_retained_particles_in_their_slots() {
        let m = model(vec![0.3, -0.4, 1.2, 0.5]);
        let fwd = run_smc(&m, SmcConfig::new(6), &mut SmcRng::new(31)).unwrap();
        let lineage = fwd.lineage(fwd.final_index).unwrap();
        let path = fwd.final_path();
        let sys = run_csmc(&m, SmcConfig::new(6), Retained { path: &path, lineage: &lineage }, &mut SmcRng::new(32))
            .unwrap();
        for (i, &b) in lineage.iter().enumerate() {
            assert_eq!(sys.state(i, b), path[i].as_slice());
            if i > 0 {
                assert_eq!(sys.ancestors[i][b], lineage[i - 1]);
            }
        }
        assert_eq!(sys.lineage(sys.final_index).unwrap(), lineage);
        assert!(sys.log_z.is_finite());
        let bad = vec![0, 9, 0, 0];
        assert!(matches!(
            run_csmc(&m, SmcConfig::new(6), Retained { path: &path, lineage: &bad }, &mut SmcRng::new(1)),
            Err(SmcError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn degenerate_weights_report_the_step() {
        let m = model(vec![0.0, f64::INFINITY]);
        let err = run_smc(&m, SmcConfig::new(3), &mut SmcRng::new(1)).unwrap_err();
        assert_eq!(err, SmcError::Degenerate { step: 1 });
    }

    #[test]
    fn nan_proposals_are_reported() {
        let m = Ar1 { a: 0.5, c: f64::NAN, log_s: 0.0, ys: vec![0.0, 1.0] };
        let err = run_smc(&m, SmcConfig::new(2), &mut SmcRng::new(1)).unwrap_err();
        assert_eq!(err, SmcError::NonFinite { step: 1, particle: 0 });
    }

    #[test]
    fn split_run_with_carry_matches_unsplit_run() {
        let ys: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let m = model(ys);
        let cfg = SmcConfig::new(5).with_policy(ResamplingPolicy::never());
        let full = run_smc(&m, cfg, &mut SmcRng::new(6)).unwrap();
        let mut rng = SmcRng::new(6);
        let first = run_smc_with(&m, cfg, &mut rng, RunOptions { steps: Some(0..3), ..Default::default() }).unwrap();
        let carry = first.carry();
        let second = run_smc_with(
            &m,
            cfg,
            &mut rng,
            RunOptions { steps: Some(3..8), carry: Some(&carry), ..Default::default() },
        )
        .unwrap();
        assert_relative_eq!(first.log_z + second.log_z, full.log_z, epsilon = 1e-12);
    }

    #[test]
    fn systematic_resampling_counts_are_balanced() {
        let lw: Vec<f64> = [0.1f64, 0.2, 0.3, 0.4].iter().map(|w| w.ln()).collect();
        let idx = resample(&lw, 10, ResampleScheme::Systematic, &mut crate::rng::stream(1, &[]));
        let counts: Vec<usize> = (0..4).map(|k| idx.iter().filter(|&&i| i == k).count()).collect();
        for (c, w) in counts.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((*c as f64 - w).abs() <= 1.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ess_lies_between_one_and_k(raw in proptest::collection::vec(-20.0f64..5.0, 1..30)) {
            let z = f64::log_sum_exp(&raw);
            let lw: Vec<f64> = raw.iter().map(|w| w - z).collect();
            let e = ess(&lw);
            prop_assert!(e >= 1.0 - 1e-9 && e <= raw.len() as f64 + 1e-9);
        }

        #[test]
        fn resampled_indices_in_range(raw in proptest::collection::vec(-5.0f64..5.0, 1..20), seed in 0u64..1000) {
            let mut rng = crate::rng::stream(seed, &[]);
            for scheme in [ResampleScheme::Multinomial, ResampleScheme::Systematic] {
                let idx = resample(&raw, raw.len(), scheme, &mut rng);
                prop_assert!(idx.iter().all(|&i| i < raw.len()));
            }
        }

        #[test]
        fn log_z_equals_sum_of_increments(seed in 0u64..500, k in 1usize..8) {
            let m = model(vec![0.2, -0.3, 0.9, 0.0]);
            let sys = run_smc(&m, SmcConfig::new(k).with_policy(ResamplingPolicy::ess(0.5)), &mut SmcRng::new(seed)).unwrap();
            let total: f64 = sys.log_z_increments.iter().sum();
            prop_assert!((total - sys.log_z).abs() < 1e-12);
            for (i, lw) in sys.log_w.iter().enumerate() {
                prop_assert!((f64::log_sum_exp(lw) - sys.log_z_increments[i]).abs() < 1e-12);
            }
        }
    }
}
