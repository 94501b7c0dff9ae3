use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::Serialize;
use smcvi::diagnostics::{density_grid, GridAxis};
use smcvi::models::hawkes::{error_rate, predict_next_marks, NextMarkSettings, ProposalKind};
use smcvi::models::lgss::{LgssModel, LgssProposal};
use smcvi::models::stochvol::{final_conditioning_points, predictive_loglik, PredictiveSettings, SvProblem};
use smcvi::models::ThetaSource;
use smcvi::rng::derive_seed;
use smcvi::trainer::{Mode, Problem, TrainerState};

use crate::config::{config_error, AxisConfig, Config, ModelKind};
use crate::data;
use crate::manifest::Outputs;
use crate::models;
use crate::NumericFailure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    KalmanLlh,
    PredictiveLlh,
    NextMark,
    DensityGrid,
}

impl Task {
    fn model(self) -> ModelKind {
        match self {
            Task::KalmanLlh | Task::DensityGrid => ModelKind::Lgss,
            Task::PredictiveLlh => ModelKind::Stochvol,
            Task::NextMark => ModelKind::Hawkes,
        }
    }
}

/// Parameters being scored: a trained state, or the generating truth.
struct Source {
    label: &'static str,
    state: Option<TrainerState>,
    truth: Option<models::Truth>,
}

impl Source {
    fn load(data_dir: &Path, state: Option<&Path>) -> Result<Self> {
        match state {
            Some(p) => Ok(Source {
                label: "state",
                state: Some(TrainerState::load_json(p).with_context(|| format!("loading {}", p.display()))?),
                truth: None,
            }),
            None => Ok(Source {
                label: "truth",
                state: None,
                truth: Some(models::read_truth(data_dir)?),
            }),
        }
    }

    /// Point estimate of θ.
    fn point(&self) -> Vec<f64> {
        match (&self.state, &self.truth) {
            (Some(s), _) => s.family.point(),
            (None, Some(t)) => t.theta.clone(),
            (None, None) => unreachable!("source has a state or a truth"),
        }
    }

    /// θ draws for predictive filters: `q_ψ` for a VB state, a point otherwise.
    fn theta_source(&self, mode: Mode) -> ThetaSource {
        match (&self.state, mode) {
            (Some(s), Mode::Vb) => ThetaSource::Variational(s.family.clone()),
            _ => ThetaSource::Point(self.point()),
        }
    }

    fn check_len(&self, expected: usize) -> Result<()> {
        let got = self.point().len();
        if got != expected {
            return Err(config_error(format!("{} has {got} parameters, the configured model {expected}", self.label)));
        }
        Ok(())
    }
}

pub fn run(cfg: &Config, task: Task, seed: u64, data_dir: &Path, state: Option<&Path>, out: &mut Outputs) -> Result<()> {
    if cfg.model != task.model() {
        return Err(config_error(format!("{task:?} needs model = {:?}, config has {:?}", task.model(), cfg.model)));
    }
    let source = Source::load(data_dir, state)?;
    match task {
        Task::KalmanLlh => kalman(cfg, seed, data_dir, &source, out),
        Task::DensityGrid => density(cfg, seed, data_dir, &source, out),
        Task::PredictiveLlh => predictive(cfg, seed, data_dir, &source, out),
        Task::NextMark => next_mark(cfg, seed, data_dir, &source, out),
    }
}

#[derive(Serialize)]
struct KalmanReport {
    source: &'static str,
    theta: Vec<f64>,
    train_loglik: f64,
    test_loglik: f64,
    test_per_series: Vec<f64>,
}

fn kalman(cfg: &Config, seed: u64, data_dir: &Path, source: &Source, out: &mut Outputs) -> Result<()> {
    let train = models::load_lgss_series(data_dir, "train")?;
    let test = models::load_lgss_series(data_dir, "test")?;
    let problem = models::lgss_problem(cfg, train.clone(), seed);
    let theta = source.point();
    source.check_len(problem.initial_family().len())?;
    let per_series = test
        .iter()
        .map(|ys| problem.kalman_loglik(&theta, std::slice::from_ref(ys)))
        .collect::<Result<Vec<f64>, _>>()
        .context(NumericFailure)?;
    let report = KalmanReport {
        source: source.label,
        train_loglik: problem.kalman_loglik(&theta, &train).context(NumericFailure)?,
        test_loglik: per_series.iter().sum(),
        test_per_series: per_series,
        theta,
    };
    data::write_json(&out.file("kalman_llh.json")?, &report)
}

#[derive(Serialize)]
struct DensityHeader {
    source: &'static str,
    theta: Vec<f64>,
    log_q_theta: f64,
    x: GridAxis,
    y: GridAxis,
    fixed: Vec<Vec<f64>>,
    particles: usize,
    repetitions: usize,
}

fn axis(name: &str, a: &AxisConfig) -> GridAxis {
    GridAxis {
        name: name.to_string(),
        step: a.step,
        component: a.component,
        lo: a.lo,
        hi: a.hi,
        points: a.points,
    }
}

fn density(cfg: &Config, seed: u64, data_dir: &Path, source: &Source, out: &mut Outputs) -> Result<()> {
    let c = &cfg.density;
    let train = models::load_lgss_series(data_dir, "train")?;
    if train[0].len() < c.steps {
        return Err(config_error(format!("density.steps = {} exceeds the series length {}", c.steps, train[0].len())));
    }
    let ys: Vec<Vec<f64>> = train[0][..c.steps].to_vec();
    let problem = models::lgss_problem(cfg, train.clone(), seed);
    source.check_len(problem.initial_family().len())?;
    let theta = source.point();
    let params = problem.params_from(&theta);
    let (dx, dy) = problem.dims();
    let phi = match &source.state {
        Some(s) => s.phi.clone(),
        None => problem.initial_proposal(),
    };
    let proposal = LgssProposal::from_flat(dx, dy, &phi).map_err(|e| config_error(e.to_string()))?;
    for a in [&c.x, &c.y] {
        if a.component >= dx {
            return Err(config_error(format!("density axis component {} out of range for d_x = {dx}", a.component)));
        }
    }
    let fixed = match &c.fixed {
        Some(f) if f.len() == c.steps && f.iter().all(|x| x.len() == dx) => f.clone(),
        Some(_) => return Err(config_error("density.fixed must have `steps` rows of length d_x")),
        None => params.rts_smoother(&ys).context(NumericFailure)?.0,
    };
    let log_q_theta = source.state.as_ref().map_or(0.0, |s| s.family.log_density(&theta));
    let model = LgssModel::new(params, proposal, &ys).context(NumericFailure)?;
    let grid = density_grid(
        &model,
        log_q_theta,
        &fixed,
        axis("x", &c.x),
        axis("y", &c.y),
        c.particles,
        c.repetitions,
        derive_seed(seed, &[4]),
    )
    .context(NumericFailure)?;
    let mut w = csv::Writer::from_path(out.file("density.csv")?)?;
    w.write_record(["x", "y", "value"])?;
    for (x, y, v) in grid.rows() {
        w.write_record([x.to_string(), y.to_string(), v.to_string()])?;
    }
    w.flush()?;
    let header = DensityHeader {
        source: source.label,
        theta,
        log_q_theta,
        x: grid.x,
        y: grid.y,
        fixed: grid.fixed,
        particles: grid.particles,
        repetitions: grid.repetitions,
    };
    data::write_json(&out.file("density_header.json")?, &header)
}

#[derive(Serialize)]
#[allow(non_snake_case)]
struct PredictiveReport {
    source: &'static str,
    S: usize,
    K: usize,
    p: usize,
    mean: f64,
    std: f64,
    repeats: usize,
    repeat_means: Vec<f64>,
    conditioning_points: Vec<usize>,
    per_point: Vec<f64>,
}

fn predictive(cfg: &Config, seed: u64, data_dir: &Path, source: &Source, out: &mut Outputs) -> Result<()> {
    let e = &cfg.evaluate;
    let ys = data::read_matrix(&data_dir.join(models::SV_SERIES_FILE))?;
    let problem = SvProblem::new(ys.clone());
    source.check_len(problem.initial_family().len())?;
    let phi = match &source.state {
        Some(s) => s.phi.clone(),
        None => problem.initial_proposal(),
    };
    let settings = PredictiveSettings { p: e.p, s: e.s, k: e.k };
    if ys.len() < e.p + 1 {
        return Err(config_error("series too short for the predictive horizon"));
    }
    let points = final_conditioning_points(ys.len(), e.p, e.points.min(ys.len() - e.p));
    let theta = source.theta_source(cfg.train.mode);
    let mut repeat_means = Vec::with_capacity(e.repeats);
    let mut per_point = vec![0.0; points.len()];
    for r in 0..e.repeats {
        let score = predictive_loglik(&theta, &phi, &ys, &points, settings, derive_seed(seed, &[5, r as u64]))
            .context(NumericFailure)?;
        for (a, b) in per_point.iter_mut().zip(&score.log_scores) {
            *a += b / e.repeats as f64;
        }
        repeat_means.push(score.mean);
    }
    let n = repeat_means.len() as f64;
    let mean = repeat_means.iter().sum::<f64>() / n;
    let std = if repeat_means.len() > 1 {
        (repeat_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let report = PredictiveReport {
        source: source.label,
        S: e.s,
        K: e.k,
        p: e.p,
        mean,
        std,
        repeats: e.repeats,
        repeat_means,
        conditioning_points: points,
        per_point,
    };
    data::write_json(&out.file("predictive_llh.json")?, &report)
}

#[derive(Serialize)]
#[allow(non_snake_case)]
struct NextMarkSummary {
    source: &'static str,
    S: usize,
    K: usize,
    J: usize,
    scored: usize,
    error_rate: f64,
    standard_error: f64,
    /// Most frequent training mark (1-based).
    majority_mark: usize,
    majority_error_rate: f64,
}

fn next_mark(cfg: &Config, seed: u64, data_dir: &Path, source: &Source, out: &mut Outputs) -> Result<()> {
    let e = &cfg.evaluate;
    let train = data::read_events(&data_dir.join(models::EVENTS_FILE))?;
    let test = data::read_events(&data_dir.join(models::TEST_EVENTS_FILE))?;
    if train.is_empty() || test.is_empty() {
        bail!("next-mark evaluation needs training and held-out events");
    }
    let n_train = train.len();
    let counts = {
        let mut c = vec![0usize; cfg.hawkes.dims];
        for ev in &train {
            c[ev.mark.min(cfg.hawkes.dims - 1)] += 1;
        }
        c
    };
    let events = data::event_stream(cfg.hawkes.dims, vec![train, test])?;
    let layout = models::hawkes_layout(cfg);
    source.check_len(layout.num_params())?;
    let theta = source.point();
    let phi = match (&source.state, layout.proposal) {
        (Some(s), _) => s.phi.clone(),
        (None, ProposalKind::Learned) => models::hawkes_prior_phi(&layout.params_from(&theta)),
        (None, ProposalKind::Prior) => Vec::new(),
    };
    let scored = (events.len() - n_train).min(e.max_targets.unwrap_or(usize::MAX));
    let targets = n_train - 1..n_train - 1 + scored;
    let settings = NextMarkSettings { s: e.s, k: e.k, j: e.j };
    let preds = predict_next_marks(
        &layout,
        &source.theta_source(cfg.train.mode),
        &phi,
        &events,
        targets,
        settings,
        derive_seed(seed, &[6]),
    )
    .context(NumericFailure)?;
    let mut w = csv::Writer::from_path(out.file("next_mark.csv")?)?;
    w.write_record(["event_index", "predicted", "actual", "correct", "running_error_rate"])?;
    let mut wrong = 0usize;
    for (i, p) in preds.iter().enumerate() {
        let actual = p.actual.expect("targets stop before the last event");
        wrong += usize::from(actual != p.predicted);
        w.write_record([
            (p.index + 1).to_string(),
            (p.predicted + 1).to_string(),
            (actual + 1).to_string(),
            u8::from(actual == p.predicted).to_string(),
            (wrong as f64 / (i + 1) as f64).to_string(),
        ])?;
    }
    w.flush()?;
    let majority = smcvi::models::hawkes::weighted_argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let majority_wrong = preds.iter().filter(|p| p.actual != Some(majority)).count();
    let rate = error_rate(&preds);
    let n = preds.len() as f64;
    let summary = NextMarkSummary {
        source: source.label,
        S: e.s,
        K: e.k,
        J: e.j,
        scored: preds.len(),
        error_rate: rate,
        standard_error: (rate * (1.0 - rate) / n).sqrt(),
        majority_mark: majority + 1,
        majority_error_rate: majority_wrong as f64 / n,
    };
    data::write_json(&out.file("next_mark_summary.json")?, &summary)
}
