//! Stochastic maximisation of the SMC variational bound.
//!
//! One iteration draws `θ ~ q_ψ` by reparameterisation (or takes `θ = T(mu)`
//! in EM mode), runs the SMC sampler with proposal parameters `φ` on one or
//! more series, and differentiates
//! `log Ẑ(θ, φ) + log p(θ) − log q_ψ(θ)` with respect to `(ψ, φ)`.
//! The discrete resampling outcomes contribute no gradient unless the score
//! term is switched on.

use std::path::Path;

use log::warn;
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Real, Tape};
use crate::rng::{stream, SmcRng};
use crate::smc::{AncestryRecord, ParticleSystem, ResamplingPolicy, SmcConfig, SmcError};
use crate::variational::{
    fisher_block, joint_log_prior, MeanFieldFamily, Prior, VariationalError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Smc(#[from] SmcError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Variational(#[from] VariationalError),
    #[error("model: {0}")]
    Model(String),
    #[error("non-finite {component} at iteration {iteration}")]
    NonFinite {
        component: &'static str,
        iteration: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
}

/// A model, its data, priors and initial variational state.
///
/// `log_evidence` runs the SMC sampler for one series at parameter values of
/// any scalar type, so the same code gives plain values and gradients.
pub trait Problem: Sync {
    fn num_series(&self) -> usize;
    fn initial_family(&self) -> MeanFieldFamily;
    fn priors(&self) -> Vec<Prior>;
    fn initial_proposal(&self) -> Vec<f64>;
    fn log_evidence<T: Real>(
        &self,
        series: usize,
        theta: &[T],
        phi: &[T],
        smc: SmcConfig,
        rng: &mut SmcRng,
        frozen: Option<&AncestryRecord>,
    ) -> Result<ParticleSystem<T>, TrainError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Vb,
    Em,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub particles: usize,
    /// Learning rate for the variational parameters ψ.
    pub step_size: f64,
    /// Learning rate for the proposal parameters φ; defaults to `step_size`.
    pub proposal_step_size: Option<f64>,
    pub adam: AdamConfig,
    /// Precondition ψ-gradients by the inverse Fisher information and take
    /// plain gradient steps on ψ.
    pub natural_gradient: bool,
    pub iterations: usize,
    pub seed: u64,
    pub resampling: ResamplingPolicy,
    /// Number of series drawn per iteration; all series when `None`.
    pub series_batch: Option<usize>,
    /// Independent ELBO samples averaged per iteration.
    pub samples_per_step: usize,
    /// Include the score term of the discrete ancestor draws.
    pub score_function: bool,
    pub checkpoint_every: usize,
    /// Start of the iterate average reported in [`FitResult::averaged`].
    pub average_from: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Vb,
            particles: 10,
            step_size: 0.01,
            proposal_step_size: None,
            adam: AdamConfig::default(),
            natural_gradient: false,
            iterations: 1000,
            seed: 0,
            resampling: ResamplingPolicy::default(),
            series_batch: None,
            samples_per_step: 1,
            score_function: false,
            checkpoint_every: 50,
            average_from: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.particles == 0 {
            return Err(TrainError::Config("particles must be at least 1".into()));
        }
        if !(self.step_size > 0.0) || self.proposal_step_size.is_some_and(|s| !(s > 0.0)) {
            return Err(TrainError::Config("step sizes must be positive".into()));
        }
        if self.samples_per_step == 0 {
            return Err(TrainError::Config("samples_per_step must be at least 1".into()));
        }
        if self.series_batch == Some(0) {
            return Err(TrainError::Config("series_batch must be at least 1".into()));
        }
        Ok(())
    }

    pub fn smc(&self) -> SmcConfig {
        SmcConfig::new(self.particles).with_policy(self.resampling)
    }
}

/// One sample of the bound: `total = log_z_hat + log_prior_minus_log_q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboSample<T> {
    pub log_z_hat: T,
    pub log_prior_minus_log_q: T,
    pub total: T,
}

impl<T: Real> ElboSample<T> {
    pub fn values(&self) -> ElboSample<f64> {
        ElboSample {
            log_z_hat: self.log_z_hat.value(),
            log_prior_minus_log_q: self.log_prior_minus_log_q.value(),
            total: self.total.value(),
        }
    }
}

/// Random inputs of one ELBO sample, fixed up front so that a sample can be
/// re-evaluated at perturbed parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleNoise {
    pub eta: Vec<f64>,
    pub series: Vec<usize>,
    pub seeds: Vec<u64>,
}

/// Draws the θ-noise, the series subsample and per-series SMC seeds for
/// `(seed, iteration, sample)`.
pub fn sample_noise(
    family: &MeanFieldFamily,
    num_series: usize,
    cfg: &TrainConfig,
    iteration: usize,
    sample_index: usize,
) -> SampleNoise {
    let path = [iteration as u64, sample_index as u64];
    let mut theta_rng = stream(cfg.seed, &[path[0], path[1], 0]);
    let eta = family.draw_noise(&mut theta_rng);
    let series = match cfg.series_batch {
        Some(b) if b < num_series => {
            let mut idx = sample(&mut stream(cfg.seed, &[path[0], path[1], 1]), num_series, b).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..num_series).collect(),
    };
    let seeds = series
        .iter()
        .map(|&s| crate::rng::derive_seed(cfg.seed, &[path[0], path[1], 2, s as u64]))
        .collect();
    SampleNoise { eta, series, seeds }
}

/// `(S / |batch|) · Σ_{s ∈ batch} log Ẑ_s`, unbiased for `Σ_s E[log Ẑ_s]`
/// when the batch is drawn uniformly.
pub fn multi_series_estimate<T: Real>(log_zs: &[T], num_series: usize) -> T {
    T::sum(log_zs) * (num_series as f64 / log_zs.len() as f64)
}

/// Evaluated sample together with the score surrogate for gradients.
pub struct ElboEvaluation<T> {
    pub sample: ElboSample<T>,
    /// Quantity whose gradient is the estimator used for training.
    pub surrogate: T,
    pub systems: Vec<ParticleSystem<T>>,
}

/// Evaluates one ELBO sample at variational parameters `psi` (laid out as
/// [`MeanFieldFamily::params`]) and proposal parameters `phi`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_elbo<T: Real, P: Problem>(
    problem: &P,
    family: &MeanFieldFamily,
    priors: &[Prior],
    psi: &[T],
    phi: &[T],
    cfg: &TrainConfig,
    noise: &SampleNoise,
    frozen: Option<&[AncestryRecord]>,
) -> Result<ElboEvaluation<T>, TrainError> {
    let (theta, lpq) = match cfg.mode {
        Mode::Vb => {
            let (theta, log_q) = family.sample_reparam(psi, &noise.eta);
            let lp = joint_log_prior(priors, &theta);
            (theta, lp - log_q)
        }
        Mode::Em => (family.point_from(psi), T::zero()),
    };
    let mut log_zs = Vec::with_capacity(noise.series.len());
    let mut systems = Vec::with_capacity(noise.series.len());
    let mut anc = T::zero();
    for (j, (&s, &seed)) in noise.series.iter().zip(&noise.seeds).enumerate() {
        let mut rng = SmcRng::new(seed);
        let fr = frozen.map(|f| &f[j]);
        let sys = problem.log_evidence(s, &theta, phi, cfg.smc(), &mut rng, fr)?;
        log_zs.push(sys.log_z);
        anc += sys.log_ancestry_prob;
        systems.push(sys);
    }
    let log_z = multi_series_estimate(&log_zs, problem.num_series());
    let total = log_z + lpq;
    let surrogate = if cfg.score_function {
        total + log_z.stop_gradient() * anc
    } else {
        total
    };
    Ok(ElboEvaluation {
        sample: ElboSample {
            log_z_hat: log_z,
            log_prior_minus_log_q: lpq,
            total,
        },
        surrogate,
        systems,
    })
}

/// One ELBO sample and its gradient with respect to `ψ` followed by `φ`.
pub fn elbo_step<P: Problem>(
    problem: &P,
    family: &MeanFieldFamily,
    phi: &[f64],
    cfg: &TrainConfig,
    iteration: usize,
    sample_index: usize,
) -> Result<(ElboSample<f64>, Vec<f64>), TrainError> {
    let priors = problem.priors();
    let noise = sample_noise(family, problem.num_series(), cfg, iteration, sample_index);
    let tape = Tape::new();
    let psi = tape.vars(&family.params());
    let phi_v = tape.vars(phi);
    let ev = evaluate_elbo(problem, family, &priors, &psi, &phi_v, cfg, &noise, None)?;
    let sample = ev.sample.values();
    if !sample.log_z_hat.is_finite() {
        return Err(TrainError::NonFinite {
            component: "log-evidence estimate",
            iteration,
        });
    }
    if !sample.log_prior_minus_log_q.is_finite() {
        return Err(TrainError::NonFinite {
            component: "prior minus entropy term",
            iteration,
        });
    }
    let grads = tape.gradient(ev.surrogate)?;
    let mut g: Vec<f64> = psi.iter().map(|&v| grads.wrt(v)).collect();
    g.extend(phi_v.iter().map(|&v| grads.wrt(v)));
    if g.iter().any(|x| !x.is_finite()) {
        return Err(TrainError::NonFinite {
            component: "gradient",
            iteration,
        });
    }
    Ok((sample, g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Bias-corrected Adam step minimising a loss with gradient `grads`.
pub fn adam_update(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) {
    adam_step(params, grads, state, cfg, |_| lr);
}

fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: impl Fn(usize) -> f64,
) {
    assert_eq!(params.len(), grads.len(), "gradient length");
    assert_eq!(params.len(), state.m.len(), "optimiser state length");
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr(i) * mh / (vh.sqrt() + cfg.eps);
    }
}

/// Natural-gradient ascent step on ψ: `ψ ← ψ + lr · I(ψ)⁻¹ ∇ψ`, factor by
/// factor. Factors without a closed-form Fisher block take a plain step.
pub fn natural_update(family: &mut MeanFieldFamily, grads: &[f64], lr: f64) {
    assert_eq!(grads.len(), 2 * family.len(), "gradient length");
    for (f, g) in family.factors.iter_mut().zip(grads.chunks(2)) {
        let (gm, gv) = match fisher_block(&f.factor) {
            Ok(b) => (g[0] / b[0][0], g[1] / b[1][1]),
            Err(e) => {
                warn!("factor {}: {e}; using the plain gradient", f.name);
                (g[0], g[1])
            }
        };
        f.factor.mu += lr * gm;
        f.factor.v += lr * gv;
    }
}

/// Optimiser state; everything needed to resume a run bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub iteration: usize,
    pub family: MeanFieldFamily,
    pub phi: Vec<f64>,
    pub adam: AdamState,
}

impl TrainerState {
    pub fn initial<P: Problem>(problem: &P) -> Self {
        let family = problem.initial_family();
        let phi = problem.initial_proposal();
        let n = 2 * family.len() + phi.len();
        TrainerState {
            iteration: 0,
            family,
            phi,
            adam: AdamState::new(n),
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub elbo: f64,
    pub log_z: f64,
    /// `log q_ψ(θ) − log p(θ)` at the drawn θ.
    pub kl_term: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: TrainerState,
    pub trace: Vec<TraceRow>,
    pub checkpoints: Vec<TrainerState>,
    /// Iterate average of `(family, φ)` from `average_from` on.
    pub averaged: Option<(MeanFieldFamily, Vec<f64>)>,
}

/// Averaged ELBO sample and gradient over `samples_per_step` independent samples.
pub fn averaged_step<P: Problem>(
    problem: &P,
    state: &TrainerState,
    cfg: &TrainConfig,
) -> Result<(ElboSample<f64>, Vec<f64>), TrainError> {
    let k = cfg.samples_per_step;
    let results: Vec<_> = (0..k)
        .into_par_iter()
        .map(|j| elbo_step(problem, &state.family, &state.phi, cfg, state.iteration, j))
        .collect::<Result<_, _>>()?;
    let n = results[0].1.len();
    let mut g = vec![0.0; n];
    let mut s = ElboSample {
        log_z_hat: 0.0,
        log_prior_minus_log_q: 0.0,
        total: 0.0,
    };
    for (sample, grad) in &results {
        for (a, b) in g.iter_mut().zip(grad) {
            *a += b / k as f64;
        }
        s.log_z_hat += sample.log_z_hat / k as f64;
        s.log_prior_minus_log_q += sample.log_prior_minus_log_q / k as f64;
        s.total += sample.total / k as f64;
    }
    Ok((s, g))
}

/// Applies one optimisation step to `state` given the ascent gradient.
pub fn apply_update(state: &mut TrainerState, grad: &[f64], cfg: &TrainConfig) {
    let npsi = 2 * state.family.len();
    let lr_phi = cfg.proposal_step_size.unwrap_or(cfg.step_size);
    let mut params = state.family.params();
    params.extend_from_slice(&state.phi);
    let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
    adam_step(&mut params, &descent, &mut state.adam, &cfg.adam, |i| {
        if i < npsi {
            cfg.step_size
        } else {
            lr_phi
        }
    });
    if cfg.natural_gradient && cfg.mode == Mode::Vb {
        natural_update(&mut state.family, &grad[..npsi], cfg.step_size);
    } else {
        state.family.set_params(&params[..npsi]).expect("parameter length");
    }
    state.phi.copy_from_slice(&params[npsi..]);
    state.iteration += 1;
}

/// Runs `cfg.iterations − state.iteration` optimisation steps. `on_iteration`
/// sees the trace row and the state after every step.
pub fn fit_from<P: Problem>(
    problem: &P,
    cfg: &TrainConfig,
    mut state: TrainerState,
    mut on_iteration: impl FnMut(&TraceRow, &TrainerState),
) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    let mut trace = Vec::new();
    let mut checkpoints = Vec::new();
    let mut avg: Option<(Vec<f64>, Vec<f64>, usize)> = None;
    while state.iteration < cfg.iterations {
        let (sample, grad) = averaged_step(problem, &state, cfg)?;
        let row = TraceRow {
            iteration: state.iteration,
            elbo: sample.total,
            log_z: sample.log_z_hat,
            kl_term: -sample.log_prior_minus_log_q,
        };
        apply_update(&mut state, &grad, cfg);
        trace.push(row);
        if cfg.average_from.is_some_and(|a| state.iteration > a) {
            let (ps, ph, n) = avg.get_or_insert_with(|| (vec![0.0; 2 * state.family.len()], vec![0.0; state.phi.len()], 0));
            for (a, b) in ps.iter_mut().zip(state.family.params()) {
                *a += b;
            }
            for (a, b) in ph.iter_mut().zip(&state.phi) {
                *a += b;
            }
            *n += 1;
        }
        if cfg.checkpoint_every > 0 && state.iteration.is_multiple_of(cfg.checkpoint_every) {
            checkpoints.push(state.clone());
        }
        on_iteration(&row, &state);
    }
    let averaged = avg.map(|(ps, ph, n)| {
        let mut fam = state.family.clone();
        fam.set_params(&ps.iter().map(|v| v / n as f64).collect::<Vec<_>>())
            .expect("parameter length");
        (fam, ph.iter().map(|v| v / n as f64).collect())
    });
    Ok(FitResult {
        state,
        trace,
        checkpoints,
        averaged,
    })
}

pub fn fit<P: Problem>(problem: &P, cfg: &TrainConfig) -> Result<FitResult, TrainError> {
    fit_from(problem, cfg, TrainerState::initial(problem), |_, _| {})
}

/// Plain-valued ELBO sample at the current state (no gradient).
pub fn elbo_value<P: Problem>(
    problem: &P,
    family: &MeanFieldFamily,
    phi: &[f64],
    cfg: &TrainConfig,
    iteration: usize,
    sample_index: usize,
) -> Result<ElboSample<f64>, TrainError> {
    let noise = sample_noise(family, problem.num_series(), cfg, iteration, sample_index);
    let ev = evaluate_elbo(problem, family, &problem.priors(), &family.params(), phi, cfg, &noise, None)?;
    Ok(ev.sample)
}
