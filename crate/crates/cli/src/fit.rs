use std::path::Path;

use anyhow::{Context, Result};
use log::info;
use smcvi::models::stochvol::SvProblem;
use smcvi::models::hawkes::HawkesProblem;
use smcvi::rng::derive_seed;
use smcvi::trainer::{fit_from, Problem, TrainConfig, TrainError, TraceRow, TrainerState};

use crate::config::{config_error, Config, ModelKind};
use crate::data;
use crate::manifest::Outputs;
use crate::models;
use crate::NumericFailure;

/// Iterate averages accumulated over several calls of the trainer.
#[derive(Default)]
struct Average {
    psi: Vec<f64>,
    phi: Vec<f64>,
    count: usize,
}

impl Average {
    fn add(&mut self, psi: &[f64], phi: &[f64], count: usize) {
        if count == 0 {
            return;
        }
        if self.count == 0 {
            self.psi = vec![0.0; psi.len()];
            self.phi = vec![0.0; phi.len()];
        }
        for (a, b) in self.psi.iter_mut().zip(psi) {
            *a += b * count as f64;
        }
        for (a, b) in self.phi.iter_mut().zip(phi) {
            *a += b * count as f64;
        }
        self.count += count;
    }

    fn state(&self, last: &TrainerState) -> Option<TrainerState> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        let mut state = last.clone();
        state
            .family
            .set_params(&self.psi.iter().map(|v| v / n).collect::<Vec<_>>())
            .ok()?;
        state.phi = self.phi.iter().map(|v| v / n).collect();
        Some(state)
    }
}

struct Progress {
    trace: Vec<TraceRow>,
    checkpoints: Vec<TrainerState>,
    average: Average,
    state: TrainerState,
}

/// Runs the trainer from `state` up to `cfg.iterations`.
fn train<P: Problem>(problem: &P, cfg: &TrainConfig, state: TrainerState, progress: &mut Progress) -> Result<()> {
    let start = state.iteration;
    let res = fit_from(problem, cfg, state, |row, _| {
        info!("iteration {} elbo {:.4}", row.iteration, row.elbo);
    })
    .map_err(classify)?;
    if let (Some(a), Some((fam, phi))) = (cfg.average_from, &res.averaged) {
        let counted = (start + 1..=res.state.iteration).filter(|&i| i > a).count();
        progress.average.add(&fam.params(), phi, counted);
    }
    progress.trace.extend(res.trace);
    progress.checkpoints.extend(res.checkpoints);
    progress.state = res.state;
    Ok(())
}

fn classify(e: TrainError) -> anyhow::Error {
    match e {
        TrainError::Config(msg) => config_error(msg),
        TrainError::Io(_) | TrainError::Format(_) => e.into(),
        other => anyhow::Error::new(other).context(NumericFailure),
    }
}

pub fn run(cfg: &Config, seed: u64, data_dir: &Path, resume: Option<&Path>, out: &mut Outputs) -> Result<()> {
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    tc.validate().map_err(|e| config_error(e.to_string()))?;
    let load = |initial: TrainerState| -> Result<TrainerState> {
        match resume {
            Some(p) => {
                let s = TrainerState::load_json(p).with_context(|| format!("loading {}", p.display()))?;
                if s.family.len() != initial.family.len() || s.phi.len() != initial.phi.len() {
                    return Err(config_error(format!("{} does not match the configured model", p.display())));
                }
                Ok(s)
            }
            None => Ok(initial),
        }
    };
    let progress = match cfg.model {
        ModelKind::Lgss => {
            let series = models::load_lgss_series(data_dir, "train")?;
            let problem = models::lgss_problem(cfg, series, seed);
            let state = load(TrainerState::initial(&problem))?;
            let mut p = Progress::new(state.clone());
            train(&problem, &tc, state, &mut p)?;
            p
        }
        ModelKind::Stochvol => {
            let ys = data::read_matrix(&data_dir.join(models::SV_SERIES_FILE))?;
            let problem = SvProblem::new(ys);
            let state = load(TrainerState::initial(&problem))?;
            let mut p = Progress::new(state.clone());
            train(&problem, &tc, state, &mut p)?;
            p
        }
        ModelKind::Hawkes => {
            let events = data::event_stream(cfg.hawkes.dims, vec![data::read_events(&data_dir.join(models::EVENTS_FILE))?])?;
            let layout = models::hawkes_layout(cfg);
            let init_beta = smcvi::models::hawkes::beta_from_log_increments(&cfg.hawkes.log_increments);
            let mut problem = HawkesProblem::from_events(events, layout, cfg.hawkes.batch_len, &init_beta)
                .map_err(|e| config_error(e.to_string()))?;
            let state = load(TrainerState::initial(&problem))?;
            let mut p = Progress::new(state);
            let every = cfg.hawkes.refresh_every;
            while p.state.iteration < tc.iterations {
                // carries come from a filter at the current variational point
                let it = p.state.iteration;
                let theta = p.state.family.point();
                problem
                    .refresh_carries(&theta, &p.state.phi, tc.particles, derive_seed(seed, &[it as u64, 7]))
                    .context(NumericFailure)?;
                let round = TrainConfig {
                    iterations: ((it / every + 1) * every).min(tc.iterations),
                    ..tc.clone()
                };
                let state = p.state.clone();
                train(&problem, &round, state, &mut p)?;
            }
            p
        }
    };
    write(&progress, out)
}

impl Progress {
    fn new(state: TrainerState) -> Self {
        Progress {
            trace: Vec::new(),
            checkpoints: Vec::new(),
            average: Average::default(),
            state,
        }
    }
}

fn write(p: &Progress, out: &mut Outputs) -> Result<()> {
    let mut w = csv::Writer::from_path(out.file("trace.csv")?)?;
    w.write_record(["iteration", "elbo", "log_z", "kl_term"])?;
    for r in &p.trace {
        w.write_record([r.iteration.to_string(), r.elbo.to_string(), r.log_z.to_string(), r.kl_term.to_string()])?;
    }
    w.flush()?;
    for c in &p.checkpoints {
        c.save_json(out.file(&checkpoint_name(c.iteration))?)?;
    }
    p.state.save_json(out.file("final.json")?)?;
    if let Some(avg) = p.average.state(&p.state) {
        avg.save_json(out.file("averaged.json")?)?;
    }
    Ok(())
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("checkpoints/iter_{iteration:06}.json")
}
