//! Property checks that need several modules at once.

use proptest::prelude::*;
use smcvi::autodiff::Tape;
use smcvi::diagnostics::{density_grid, extended_kl_gap, mean_and_se, GridAxis};
use smcvi::models::hawkes::HawkesParams;
use smcvi::models::lgss::{LgssModel, LgssParams, LgssProblem, LgssProposal};
use smcvi::models::stochvol::{predictive_densities, predictive_loglik, PredictiveSettings, SvProblem};
use smcvi::models::ThetaSource;
use smcvi::quadrature::gauss_legendre_on;
use smcvi::rng::{derive_seed, stream, SmcRng};
use smcvi::smc::{run_smc, ParticleSystem, ResamplingPolicy, SmcConfig};
use smcvi::trainer::{elbo_value, evaluate_elbo, fit_from, sample_noise, Mode, Problem, TrainConfig, TrainerState};

fn ar_problem(lambda: f64, horizon: usize, seed: u64) -> LgssProblem {
    let ys = LgssParams::ar2(lambda, 1.0).simulate(horizon, &mut stream(seed, &[])).0;
    LgssProblem::ar(vec![ys], LgssParams::ar2(0.5, 1.0), 0.5)
}

fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean).powi(2) / var + (2.0 * std::f64::consts::PI * var).ln())
}

/// `log ∫ N(λ; 0, 1) p_λ(y) dλ` over `[-2, 2]` by composite Gauss–Legendre;
/// leaving out the tails can only lower it.
fn ar_log_evidence(ys: &[Vec<f64>]) -> f64 {
    let mut terms = Vec::new();
    for p in 0..8 {
        let lo = -2.0 + 0.5 * p as f64;
        let rule = gauss_legendre_on(lo, lo + 0.5, 16);
        for (&l, &w) in rule.nodes.iter().zip(&rule.weights) {
            let ll = LgssParams::ar2(l, 1.0).kalman_loglik(ys).unwrap();
            terms.push(w.ln() + normal_logpdf(l, 0.0, 1.0) + ll);
        }
    }
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

fn elbo_total(problem: &LgssProblem, psi: &[f64], cfg: &TrainConfig, noise: &smcvi::trainer::SampleNoise, frozen: &[smcvi::smc::AncestryRecord]) -> f64 {
    let family = problem.initial_family();
    let ev = evaluate_elbo(problem, &family, &problem.priors(), psi, &problem.initial_proposal(), cfg, noise, Some(frozen)).unwrap();
    ev.sample.total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn em_samples_carry_no_prior_or_entropy_term(seed in 0u64..1000, iteration in 0usize..50) {
        let problem = ar_problem(0.8, 5, seed);
        let cfg = TrainConfig { mode: Mode::Em, particles: 4, seed, ..TrainConfig::default() };
        let s = elbo_value(&problem, &problem.initial_family(), &problem.initial_proposal(), &cfg, iteration, 0).unwrap();
        prop_assert_eq!(s.log_prior_minus_log_q, 0.0);
        prop_assert_eq!(s.total, s.log_z_hat);
    }

    #[test]
    fn elbo_gradient_in_psi_matches_finite_differences(seed in 0u64..1000) {
        let problem = ar_problem(0.7, 4, seed);
        let cfg = TrainConfig { particles: 3, seed, resampling: ResamplingPolicy::always(), ..TrainConfig::default() };
        let family = problem.initial_family();
        let noise = sample_noise(&family, 1, &cfg, 0, 0);
        let tape = Tape::new();
        let psi = tape.vars(&family.params());
        let phi = tape.vars(&problem.initial_proposal());
        let ev = evaluate_elbo(&problem, &family, &problem.priors(), &psi, &phi, &cfg, &noise, None).unwrap();
        let frozen: Vec<_> = ev.systems.iter().map(|s| s.ancestry_record()).collect();
        let grads = tape.gradient(ev.sample.total).unwrap();
        let x0 = family.params();
        for (i, &v) in psi.iter().enumerate() {
            let h = 1e-3 * x0[i].abs().max(1.0);
            let at = |d: f64| {
                let mut x = x0.clone();
                x[i] += d;
                elbo_total(&problem, &x, &cfg, &noise, &frozen)
            };
            let d1 = (at(h) - at(-h)) / (2.0 * h);
            let d2 = (at(h / 2.0) - at(-h / 2.0)) / h;
            let fd = (4.0 * d2 - d1) / 3.0;
            let g = grads.wrt(v);
            let err = (g - fd).abs() / (g.abs().max(fd.abs()) + 1e-2);
            prop_assert!(err <= 1e-4, "component {i}: tape {g}, fd {fd}");
        }
    }

    #[test]
    fn link_is_nonnegative_monotone_and_close_to_relu(u in -50.0f64..50.0, du in 0.0f64..10.0, nu in 1e-4f64..1.0) {
        let params = HawkesParams {
            dims: 1,
            scales: 1,
            mu: vec![0.1],
            alpha: vec![0.0],
            sigma2: vec![1e-3],
            beta: vec![1.0],
            nu,
        };
        let (h0, h1) = (params.link(u), params.link(u + du));
        prop_assert!(h0 >= 0.0);
        prop_assert!(h1 >= h0);
        prop_assert!((h0 - u.max(0.0)).abs() <= nu * std::f64::consts::LN_2 + 1e-12);
    }

    #[test]
    fn density_grid_values_are_positive_and_finite(lambda in -0.95f64..0.95, y0 in -3.0f64..3.0, y1 in -3.0f64..3.0, seed in 0u64..100) {
        let params = LgssParams::ar2_stationary(lambda).unwrap();
        let ys = vec![vec![y0], vec![y1]];
        let model = LgssModel::new(params.clone(), LgssProposal::prior_like(&params), &ys).unwrap();
        let axis = |step| GridAxis { name: format!("x{step}"), step, component: 0, lo: -2.0, hi: 2.0, points: 2 };
        let fixed = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let grid = density_grid(&model, 0.0, &fixed, axis(0), axis(1), 10, 5, seed).unwrap();
        for v in grid.values.iter().flatten() {
            prop_assert!(v.is_finite() && *v >= 0.0);
        }
    }
}

#[test]
fn exchanging_noise_and_ancestry_streams_leaves_log_z_unchanged() {
    let params = LgssParams::ar2(0.8, 1.0);
    let ys = params.simulate(6, &mut stream(11, &[])).0;
    let model = LgssModel::new(params.clone(), LgssProposal::prior_like(&params), &ys).unwrap();
    let cfg = SmcConfig::new(5);
    let n = 20_000;
    let run = |swap: bool| -> Vec<f64> {
        (0..n)
            .map(|r| {
                let base = derive_seed(12, &[r]);
                let (a, b) = if swap { (1, 0) } else { (0, 1) };
                let mut rng = SmcRng {
                    noise: stream(base, &[a]),
                    ancestry: stream(base, &[b]),
                };
                let sys: ParticleSystem<f64> = run_smc(&model, cfg, &mut rng).unwrap();
                sys.log_z
            })
            .collect()
    };
    let (m0, se0) = mean_and_se(&run(false));
    let (m1, se1) = mean_and_se(&run(true));
    let z = (m0 - m1) / (se0 * se0 + se1 * se1).sqrt();
    assert!(z.abs() <= 3.0, "means {m0} and {m1}, z = {z}");
}

#[test]
fn score_term_has_zero_mean() {
    // two observations, three particles; the score and reparameterised
    // estimators differ only by the score term
    let problem = ar_problem(0.6, 1, 21);
    let family = problem.initial_family();
    let n = 100_000;
    let cfg = TrainConfig { particles: 3, seed: 22, score_function: true, resampling: ResamplingPolicy::always(), ..TrainConfig::default() };
    let dim = family.params().len() + problem.initial_proposal().len();
    let mut diffs = vec![Vec::with_capacity(n); dim];
    for it in 0..n {
        let noise = sample_noise(&family, 1, &cfg, it, 0);
        let tape = Tape::new();
        let psi = tape.vars(&family.params());
        let phi = tape.vars(&problem.initial_proposal());
        let ev = evaluate_elbo(&problem, &family, &problem.priors(), &psi, &phi, &cfg, &noise, None).unwrap();
        let full = tape.gradient(ev.surrogate).unwrap();
        let dropped = tape.gradient(ev.sample.total).unwrap();
        for (j, &v) in psi.iter().chain(&phi).enumerate() {
            diffs[j].push(full.wrt(v) - dropped.wrt(v));
        }
    }
    for (j, d) in diffs.iter().enumerate() {
        let (m, se) = mean_and_se(d);
        assert!(m.abs() <= 3.0 * se + 1e-12, "component {j}: mean {m}, se {se}");
    }
}

#[test]
fn expected_log_z_stays_below_the_exact_evidence_during_training() {
    let problem = ar_problem(0.9, 30, 31);
    let ys = problem.series[0].clone();
    let reps = 30;
    for mode in [Mode::Em, Mode::Vb] {
        let cfg = TrainConfig { mode, particles: 4, step_size: 0.02, iterations: 200, seed: 32, checkpoint_every: 1, ..TrainConfig::default() };
        let res = fit_from(&problem, &cfg, TrainerState::initial(&problem), |_, _| {}).unwrap();
        assert_eq!(res.checkpoints.len(), 200);
        let eval_cfg = TrainConfig { seed: 33, ..cfg };
        let evidence = ar_log_evidence(&ys);
        for (c, state) in res.checkpoints.iter().enumerate() {
            let samples: Vec<f64> = (0..reps)
                .map(|r| elbo_value(&problem, &state.family, &state.phi, &eval_cfg, c, r).unwrap().total)
                .collect();
            let (m, se) = mean_and_se(&samples);
            let bound = match mode {
                Mode::Em => problem.kalman_loglik(&state.family.point(), &problem.series).unwrap(),
                Mode::Vb => evidence,
            };
            assert!(m <= bound + 2.0 * se, "{mode:?} checkpoint {c}: mean {m} ± {se}, bound {bound}");
        }
    }
}

#[test]
fn extended_kl_gap_is_non_negative() {
    let params = LgssParams::ar2_stationary(0.9).unwrap();
    let ys = vec![vec![0.8], vec![-0.3]];
    let model = LgssModel::new(params.clone(), LgssProposal::prior_like(&params), &ys).unwrap();
    let evidence = params.kalman_loglik(&ys).unwrap();
    let (mean, se) = extended_kl_gap(&model, evidence, 5, 2000, 50, 41).unwrap();
    assert!(mean >= -3.0 * se, "gap {mean} ± {se}");
}

#[test]
fn predictive_mean_is_the_average_of_per_point_log_scores() {
    let truth = smcvi::models::stochvol::params_from_flat(2, &[-0.5, 0.2, 0.9, 0.8, 0.3, 0.05, 0.25]);
    let ys = truth.simulate(40, &mut stream(51, &[])).unwrap().0;
    let phi = SvProblem::new(ys.clone()).initial_proposal();
    let source = ThetaSource::Point(vec![-0.5, 0.2, 0.9, 0.8, 0.3, 0.05, 0.25]);
    let points = [30, 33, 36];
    let settings = PredictiveSettings { p: 2, s: 3, k: 50 };
    let score = predictive_loglik(&source, &phi, &ys, &points, settings, 52).unwrap();
    let dens = predictive_densities(&source, &phi, &ys, &points, settings, 52).unwrap();
    let mut acc = 0.0;
    for (d, s) in dens.iter().zip(&score.log_scores) {
        assert_eq!(d.ln(), *s);
        acc += d.ln();
    }
    assert!((score.mean - acc / points.len() as f64).abs() < 1e-12);
}
