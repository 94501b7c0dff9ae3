use anyhow::{Context, Result};
use smcvi::models::hawkes::EventStream;
use smcvi::models::lgss::LgssParams;
use smcvi::rng::stream;

use crate::config::{config_error, Config, LgssKind, ModelKind};
use crate::data;
use crate::manifest::Outputs;
use crate::models::{self, Truth};
use crate::NumericFailure;

pub fn run(cfg: &Config, seed: u64, out: &mut Outputs) -> Result<()> {
    match cfg.model {
        ModelKind::Lgss => lgss(cfg, seed, out),
        ModelKind::Stochvol => stochvol(cfg, seed, out),
        ModelKind::Hawkes => hawkes(cfg, seed, out),
    }
}

fn lgss(cfg: &Config, seed: u64, out: &mut Outputs) -> Result<()> {
    let c = &cfg.lgss;
    let (truth, theta) = match c.kind {
        LgssKind::Ar => (LgssParams::ar2(c.lambda, c.initial_var), vec![c.lambda]),
        LgssKind::Full => {
            let p = LgssParams::banded(c.dx, c.dy, c.alpha, &mut stream(seed, &[0]));
            let mut theta = p.a.data.clone();
            theta.extend(&p.b.data);
            theta.extend((0..c.dy).map(|i| p.sigma_y.at(i, i)));
            (p, theta)
        }
    };
    truth.validate().map_err(|e| config_error(e.to_string()))?;
    let header = data::column_names("y", truth.dy());
    let mut draw = |prefix: &str, count: usize, tag: u64| -> Result<Vec<Vec<Vec<f64>>>> {
        let mut all = Vec::with_capacity(count);
        for i in 0..count {
            let (ys, _) = truth.simulate(c.horizon, &mut stream(seed, &[tag, i as u64]));
            data::write_matrix(&out.file(&models::lgss_file(prefix, i))?, &header, &ys)?;
            all.push(ys);
        }
        Ok(all)
    };
    let train = draw("train", c.train_series, 1)?;
    let test = draw("test", c.test_series, 2)?;
    let problem = models::lgss_problem(cfg, train.clone(), seed);
    let train_loglik = problem.kalman_loglik(&theta, &train).context(NumericFailure)?;
    let per_series = test
        .iter()
        .map(|ys| problem.kalman_loglik(&theta, std::slice::from_ref(ys)))
        .collect::<Result<Vec<f64>, _>>()
        .context(NumericFailure)?;
    let t = Truth {
        model: ModelKind::Lgss,
        theta,
        beta: None,
        train_loglik: Some(train_loglik),
        test_loglik: Some(per_series.iter().sum()),
        test_per_series: Some(per_series),
    };
    data::write_json(&out.file(models::TRUTH_FILE)?, &t)
}

fn stochvol(cfg: &Config, seed: u64, out: &mut Outputs) -> Result<()> {
    let params = models::sv_truth(cfg)?;
    let (ys, xs) = params
        .simulate(cfg.stochvol.length - 1, &mut stream(seed, &[0]))
        .map_err(|e| config_error(e.to_string()))?;
    let d = params.dim();
    data::write_matrix(&out.file(models::SV_SERIES_FILE)?, &data::column_names("y", d), &ys)?;
    data::write_matrix(&out.file("states.csv")?, &data::column_names("x", d), &xs)?;
    let t = Truth {
        model: ModelKind::Stochvol,
        theta: models::sv_flat(&params),
        beta: None,
        train_loglik: None,
        test_loglik: None,
        test_per_series: None,
    };
    data::write_json(&out.file(models::TRUTH_FILE)?, &t)
}

fn hawkes(cfg: &Config, seed: u64, out: &mut Outputs) -> Result<()> {
    let c = &cfg.hawkes;
    let params = models::hawkes_truth(cfg)?;
    params.validate().map_err(|e| config_error(e.to_string()))?;
    let wanted = c.train_events + c.test_events;
    let (stream_all, _): (EventStream, _) = params
        .simulate(0.0, c.t_end, wanted, &mut stream(seed, &[0]))
        .context(NumericFailure)?;
    if stream_all.len() < wanted {
        return Err(config_error(format!(
            "only {} events before hawkes.t_end = {}, {wanted} requested",
            stream_all.len(),
            c.t_end
        )));
    }
    let (train, test) = stream_all.events.split_at(c.train_events);
    data::write_events(&out.file(models::EVENTS_FILE)?, train)?;
    data::write_events(&out.file(models::TEST_EVENTS_FILE)?, test)?;
    let layout = models::hawkes_layout(cfg);
    let t = Truth {
        model: ModelKind::Hawkes,
        theta: models::hawkes_flat(&layout, &params),
        beta: Some(params.beta.clone()),
        train_loglik: None,
        test_loglik: None,
        test_per_series: None,
    };
    data::write_json(&out.file(models::TRUTH_FILE)?, &t)
}
