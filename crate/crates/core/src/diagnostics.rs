//! Checks on the extended-space construction and density estimates of the
//! marginal variational distribution.
//!
//! The marginal density of `(θ, x_{0:M})` under the SMC-induced variational
//! distribution is `q_ψ(θ) γ_θ(x) E[1/Ẑ]`, where the expectation is over a
//! conditional SMC run that keeps `x` as one of its particles. It is
//! estimated here by averaging `1/Ẑ` over independent conditional runs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Real;
use crate::models::hawkes::{interval_rules, EventStream, HawkesParams, QUAD_POINTS};
use crate::rng::{derive_seed, SmcRng};
use crate::smc::{run_csmc, run_smc, ParticleSystem, ResamplingPolicy, Retained, SmcConfig, SmcError, StateSpaceModel};
use crate::trainer::ElboSample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("path has {got} states, the model has {expected} steps")]
    PathLength { got: usize, expected: usize },
    #[error("the identity needs resampling at every step; step {step} was not resampled")]
    NotResampled { step: usize },
    #[error("particle filter: {0}")]
    Smc(#[from] SmcError),
}

/// `log p_θ(x_{0:M}, y_{0:M})` along a full path.
pub fn log_joint<M: StateSpaceModel<f64> + ?Sized>(model: &M, path: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    for (n, x) in path.iter().enumerate() {
        let prev = n.checked_sub(1).map(|p| path[p].as_slice());
        acc += model.log_transition(n, prev, x) + model.log_observation(n, x);
    }
    acc
}

fn check_always_resampled<T>(sys: &ParticleSystem<T>) -> Result<(), DiagnosticsError> {
    if sys.particles == 1 {
        return Ok(());
    }
    match sys.resampled.iter().skip(1).position(|r| !r) {
        Some(i) => Err(DiagnosticsError::NotResampled { step: i + 1 }),
        None => Ok(()),
    }
}

/// Per-step terms along the lineage of particle `l`.
struct LineageTerms {
    log_g: Vec<f64>,
    log_f: Vec<f64>,
    log_m: Vec<f64>,
    /// `log W_n^{b_n}`.
    log_w: Vec<f64>,
}

fn lineage_terms<M: StateSpaceModel<f64> + ?Sized>(
    model: &M,
    sys: &ParticleSystem<f64>,
    l: usize,
) -> Result<LineageTerms, DiagnosticsError> {
    let b = sys.lineage(l)?;
    let path = sys.path(l)?;
    let steps = path.len();
    let mut t = LineageTerms {
        log_g: Vec::with_capacity(steps),
        log_f: Vec::with_capacity(steps),
        log_m: Vec::with_capacity(steps),
        log_w: Vec::with_capacity(steps),
    };
    for n in 0..steps {
        let prev = n.checked_sub(1).map(|p| path[p].as_slice());
        t.log_g.push(model.log_observation(n, &path[n]));
        t.log_f.push(model.log_transition(n, prev, &path[n]));
        t.log_m.push(model.log_proposal(n, prev, &path[n]));
        t.log_w.push(sys.log_weights[n][b[n]]);
    }
    Ok(t)
}

/// Static-parameter terms of the extended-space ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaTerms {
    pub log_prior: f64,
    pub log_q: f64,
    /// `log p(y_{0:M})`, the log evidence with θ integrated out.
    pub log_evidence: f64,
}

/// `log π̃ − log q` for the outcome in `sys` with selected particle `l`,
/// assembled from its definition: `K^{−(M+1)} p(θ) p_θ(x^l, y) / p(y)` over
/// `q_ψ(θ) W_M^l M_0(x_0^{b_0}) Π_n W_{n−1}^{b_{n−1}} M_n(x_n^{b_n} | ·)`.
pub fn extended_log_ratio<M: StateSpaceModel<f64> + ?Sized>(
    model: &M,
    sys: &ParticleSystem<f64>,
    l: usize,
    theta: ThetaTerms,
) -> Result<f64, DiagnosticsError> {
    check_always_resampled(sys)?;
    let t = lineage_terms(model, sys, l)?;
    let steps = t.log_g.len();
    let log_k = (sys.particles as f64).ln();
    let numerator = -(steps as f64) * log_k + theta.log_prior + t.log_f.iter().sum::<f64>()
        + t.log_g.iter().sum::<f64>()
        - theta.log_evidence;
    // W_M^l and W_{n−1}^{b_{n−1}} for n = 1..M together cover every step once
    let denominator = theta.log_q + t.log_w.iter().sum::<f64>() + t.log_m.iter().sum::<f64>();
    Ok(numerator - denominator)
}

/// Residual of `log π̃/q = log Ẑ + log p(θ) − log q_ψ(θ) − log p(y)`.
pub fn verify_extended_ratio<M: StateSpaceModel<f64> + ?Sized>(
    model: &M,
    sys: &ParticleSystem<f64>,
    l: usize,
    theta: ThetaTerms,
) -> Result<f64, DiagnosticsError> {
    let lhs = extended_log_ratio(model, sys, l, theta)?;
    Ok(lhs - (sys.log_z + theta.log_prior - theta.log_q - theta.log_evidence))
}

/// Sequential-autoencoder form of one ELBO sample:
/// `Σ_n [log g(y_n | x_n^{b_n}) − log W_n^{b_n} + log f/M along b] − (M+1) log K`
/// plus the single-draw estimate `log p(θ) − log q_ψ(θ)` of `−KL(q_ψ ‖ p)`.
pub fn vae_decomposition<M: StateSpaceModel<f64> + ?Sized>(
    model: &M,
    sys: &ParticleSystem<f64>,
    l: usize,
    log_prior_minus_log_q: f64,
) -> Result<f64, DiagnosticsError> {
    check_always_resampled(sys)?;
    let t = lineage_terms(model, sys, l)?;
    let steps = t.log_g.len();
    let mut acc = 0.0;
    for n in 0..steps {
        acc += t.log_g[n] - t.log_w[n] + t.log_f[n] - t.log_m[n];
    }
    Ok(acc - steps as f64 * (sys.particles as f64).ln() + log_prior_minus_log_q)
}

/// Residual between [`vae_decomposition`] and the ELBO sample total.
pub fn verify_vae_decomposition<M: StateSpaceModel<f64> + ?Sized>(
    model: &M,
    sys: &ParticleSystem<f64>,
    l: usize,
    sample: &ElboSample<f64>,
) -> Result<f64, DiagnosticsError> {
    Ok(vae_decomposition(model, sys, l, sample.log_prior_minus_log_q)? - sample.total)
}

/// `log` of the conditional-SMC estimate `q_ψ(θ) γ_θ(x) (1/R) Σ_r 1/Ẑ_r` of
/// the marginal variational density at `(θ, x)`. The retained path sits in
/// slot 0 at every step. `−∞` when `γ_θ(x) = 0`.
pub fn log_marginal_q_density<M: StateSpaceModel<f64> + ?Sized + Sync>(
    model: &M,
    log_q_theta: f64,
    path: &[Vec<f64>],
    particles: usize,
    repetitions: usize,
    seed: u64,
) -> Result<f64, DiagnosticsError> {
    if path.len() != model.num_steps() {
        return Err(DiagnosticsError::PathLength {
            got: path.len(),
            expected: model.num_steps(),
        });
    }
    let log_gamma = log_joint(model, path);
    if log_gamma == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let lineage = vec![0; path.len()];
    let neg_log_z: Vec<f64> = (0..repetitions)
        .map(|r| -> Result<f64, DiagnosticsError> {
            let mut rng = SmcRng::new(derive_seed(seed, &[r as u64]));
            let retained = Retained { path, lineage: &lineage };
            let sys: ParticleSystem<f64> = run_csmc(model, SmcConfig::new(particles), retained, &mut rng)?;
            Ok(-sys.log_z)
        })
        .collect::<Result<_, _>>()?;
    let log_mean_inv = f64::log_sum_exp(&neg_log_z) - (repetitions as f64).ln();
    Ok(log_q_theta + log_gamma + log_mean_inv)
}

/// [`log_marginal_q_density`] on the natural scale.
pub fn marginal_q_density<M: StateSpaceModel<f64> + ?Sized + Sync>(
    model: &M,
    log_q_theta: f64,
    path: &[Vec<f64>],
    particles: usize,
    repetitions: usize,
    seed: u64,
) -> Result<f64, DiagnosticsError> {
    Ok(log_marginal_q_density(model, log_q_theta, path, particles, repetitions, seed)?.exp())
}

/// One plotted coordinate: component `component` of the state at `step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub name: String,
    pub step: usize,
    pub component: usize,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridAxis {
    pub fn coords(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![0.5 * (self.lo + self.hi)];
        }
        let h = (self.hi - self.lo) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.lo + h * i as f64).collect()
    }
}

/// Density estimates on a 2-D slice; all other path components stay at
/// `fixed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub x: GridAxis,
    pub y: GridAxis,
    /// `values[j][i]` at `(x_i, y_j)`.
    pub values: Vec<Vec<f64>>,
    pub fixed: Vec<Vec<f64>>,
    pub particles: usize,
    pub repetitions: usize,
}

impl DensityGrid {
    /// `(x, y, value)` rows, x fastest.
    pub fn rows(&self) -> Vec<(f64, f64, f64)> {
        let xs = self.x.coords();
        let ys = self.y.coords();
        let mut out = Vec::with_capacity(xs.len() * ys.len());
        for (j, &yv) in ys.iter().enumerate() {
            for (i, &xv) in xs.iter().enumerate() {
                out.push((xv, yv, self.values[j][i]));
            }
        }
        out
    }

    /// Mean of `|v − oracle| / oracle` over the grid.
    pub fn mean_relative_error(&self, oracle: impl Fn(&[Vec<f64>]) -> f64) -> f64 {
        let xs = self.x.coords();
        let ys = self.y.coords();
        let mut total = 0.0;
        for (j, &yv) in ys.iter().enumerate() {
            for (i, &xv) in xs.iter().enumerate() {
                let mut path = self.fixed.clone();
                path[self.x.step][self.x.component] = xv;
                path[self.y.step][self.y.component] = yv;
                let o = oracle(&path);
                total += (self.values[j][i] - o).abs() / o;
            }
        }
        total / (xs.len() * ys.len()) as f64
    }
}

/// Evaluates [`marginal_q_density`] over a grid; grid point `(i, j)` uses
/// seed `derive_seed(seed, [i, j])`.
pub fn density_grid<M: StateSpaceModel<f64> + ?Sized + Sync>(
    model: &M,
    log_q_theta: f64,
    fixed: &[Vec<f64>],
    x: GridAxis,
    y: GridAxis,
    particles: usize,
    repetitions: usize,
    seed: u64,
) -> Result<DensityGrid, DiagnosticsError> {
    let xs = x.coords();
    let ys = y.coords();
    let values: Vec<Vec<f64>> = ys
        .par_iter()
        .enumerate()
        .map(|(j, &yv)| {
            xs.iter()
                .enumerate()
                .map(|(i, &xv)| {
                    let mut path = fixed.to_vec();
                    path[x.step][x.component] = xv;
                    path[y.step][y.component] = yv;
                    let s = derive_seed(seed, &[i as u64, j as u64]);
                    marginal_q_density(model, log_q_theta, &path, particles, repetitions, s)
                })
                .collect::<Result<Vec<f64>, _>>()
        })
        .collect::<Result<_, _>>()?;
    Ok(DensityGrid {
        x,
        y,
        values,
        fixed: fixed.to_vec(),
        particles,
        repetitions,
    })
}

/// Mean and standard error of the gap between the extended-space KL and the
/// marginal KL at fixed θ. Each replicate runs SMC, selects a path by its
/// final weight and pairs `log p(y) − log Ẑ` with
/// `log q̂(x) − log π(x | y)` from the same draw.
pub fn extended_kl_gap<M: StateSpaceModel<f64> + ?Sized + Sync>(
    model: &M,
    log_evidence: f64,
    particles: usize,
    replicates: usize,
    repetitions: usize,
    seed: u64,
) -> Result<(f64, f64), DiagnosticsError> {
    let gaps: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|r| -> Result<f64, DiagnosticsError> {
            let mut rng = SmcRng::new(derive_seed(seed, &[r as u64, 0]));
            let cfg = SmcConfig::new(particles).with_policy(ResamplingPolicy::always());
            let sys: ParticleSystem<f64> = run_smc(model, cfg, &mut rng)?;
            let l = sys.final_index;
            let path = sys.path(l)?;
            let log_q = log_marginal_q_density(model, 0.0, &path, particles, repetitions, derive_seed(seed, &[r as u64, 1]))?;
            let log_post = log_joint(model, &path) - log_evidence;
            Ok((log_evidence - sys.log_z) - (log_q - log_post))
        })
        .collect::<Result<_, _>>()?;
    Ok(mean_and_se(&gaps))
}

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// One-sample Kolmogorov–Smirnov test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// KS test of `samples` against `cdf`, with the asymptotic Kolmogorov
/// distribution and the `√n + 0.12 + 0.11/√n` small-sample correction.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    KsResult {
        statistic: d,
        p_value: kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d),
    }
}

/// `P(K > λ) = 2 Σ_{k≥1} (−1)^{k−1} e^{−2k²λ²}`.
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Compensator increments `Σ_i ∫_{t_{n−1}}^{t_n} λ^i` of a stream whose
/// post-event excitations are `post_event_z`. Under the true intensity they
/// are independent unit exponentials.
pub fn time_rescaled_increments(params: &HawkesParams<f64>, events: &EventStream, post_event_z: &[Vec<f64>]) -> Vec<f64> {
    let rules = interval_rules(events, QUAD_POINTS);
    let zero = vec![0.0; params.jump_len()];
    (0..events.len())
        .map(|n| {
            let z = if n == 0 { &zero } else { &post_event_z[n - 1] };
            params.compensator(z, &rules[n])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smc::tests::Ar1;
    use approx::assert_relative_eq;

    fn ar(ys: Vec<f64>) -> Ar1<f64> {
        Ar1 {
            a: 0.8,
            c: 0.5,
            log_s: 0.2,
            ys,
        }
    }

    #[test]
    fn ks_uniform_sample_is_accepted_and_shifted_one_rejected() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_test(&xs, |x| x.clamp(0.0, 1.0)).p_value > 0.99);
        let shifted: Vec<f64> = xs.iter().map(|x| x * 0.8).collect();
        assert!(ks_test(&shifted, |x| x.clamp(0.0, 1.0)).p_value < 1e-6);
    }

    #[test]
    fn kolmogorov_survival_reference_values() {
        // P(K > 1.36) ≈ 0.05 and P(K > 1.63) ≈ 0.01
        assert!((kolmogorov_survival(1.358) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_survival(1.628) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn single_particle_marginal_is_the_proposal_density() {
        let m = ar(vec![0.3, -0.1, 0.8]);
        let path = vec![vec![0.2], vec![-0.4], vec![1.1]];
        let est = log_marginal_q_density(&m, -0.7, &path, 1, 3, 0).unwrap();
        let mut log_m = 0.0;
        for n in 0..3usize {
            let prev = n.checked_sub(1).map(|p| path[p].as_slice());
            log_m += m.log_proposal(n, prev, &path[n]);
        }
        assert_relative_eq!(est, -0.7 + log_m, epsilon = 1e-10);
    }

    #[test]
    fn identities_hold_on_the_ar_model() {
        let m = ar(vec![0.3, -0.1, 0.8, 0.2]);
        for seed in 0..20 {
            let cfg = SmcConfig::new(3).with_policy(ResamplingPolicy::always());
            let sys: ParticleSystem<f64> = run_smc(&m, cfg, &mut SmcRng::new(seed)).unwrap();
            let theta = ThetaTerms {
                log_prior: -1.3,
                log_q: 0.4,
                log_evidence: -5.0,
            };
            for l in 0..3 {
                assert!(verify_extended_ratio(&m, &sys, l, theta).unwrap().abs() < 1e-10);
                let sample = ElboSample {
                    log_z_hat: sys.log_z,
                    log_prior_minus_log_q: -1.7,
                    total: sys.log_z - 1.7,
                };
                assert!(verify_vae_decomposition(&m, &sys, l, &sample).unwrap().abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_requires_resampling_every_step() {
        let m = ar(vec![0.3, -0.1]);
        let cfg = SmcConfig::new(3).with_policy(ResamplingPolicy::never());
        let sys: ParticleSystem<f64> = run_smc(&m, cfg, &mut SmcRng::new(1)).unwrap();
        let r = vae_decomposition(&m, &sys, 0, 0.0);
        assert_eq!(r, Err(DiagnosticsError::NotResampled { step: 1 }));
    }

    #[test]
    fn grid_axis_coordinates() {
        let a = GridAxis {
            name: "x".into(),
            step: 0,
            component: 0,
            lo: -1.0,
            hi: 1.0,
            points: 5,
        };
        assert_eq!(a.coords(), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    }
}
