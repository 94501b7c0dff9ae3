//! Builds model parameters and problems from a config and a dataset directory.

use std::path::Path;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use smcvi::linalg::Mat;
use smcvi::models::hawkes::{beta_from_log_increments, HawkesLayout, HawkesParams};
use smcvi::models::lgss::{LgssParams, LgssProblem};
use smcvi::models::stochvol::SvParams;
use smcvi::rng::derive_seed;

use crate::config::{broadcast, config_error, Config, LgssKind, ModelKind};
use crate::data;

/// Generating parameters and reference values written by `simulate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Truth {
    pub model: ModelKind,
    /// True parameters in the layout of the inference problem.
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    /// Kalman log-likelihoods at `theta` (linear-Gaussian model only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_loglik: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_loglik: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_per_series: Option<Vec<f64>>,
}

pub const TRUTH_FILE: &str = "truth.json";

pub fn read_truth(dir: &Path) -> Result<Truth> {
    data::read_json(&dir.join(TRUTH_FILE))
}

/// Fixed parts of the linear-Gaussian model; the learned entries are overwritten.
pub fn lgss_base(cfg: &Config) -> LgssParams<f64> {
    let c = &cfg.lgss;
    match c.kind {
        LgssKind::Ar => LgssParams::ar2(c.lambda_init, c.initial_var),
        LgssKind::Full => LgssParams {
            a: Mat::zeros(c.dx, c.dx),
            b: Mat::zeros(c.dy, c.dx),
            sigma_x: Mat::identity(c.dx),
            sigma_x0: Mat::identity(c.dx),
            sigma_y: Mat::identity(c.dy),
            a0: vec![0.0; c.dx],
        },
    }
}

pub fn lgss_problem(cfg: &Config, series: Vec<Vec<Vec<f64>>>, seed: u64) -> LgssProblem {
    let base = lgss_base(cfg);
    match cfg.lgss.kind {
        LgssKind::Ar => LgssProblem::ar(series, base, cfg.lgss.lambda_init),
        LgssKind::Full => LgssProblem::full(series, base, derive_seed(seed, &[3])),
    }
}

pub fn lgss_file(prefix: &str, i: usize) -> String {
    format!("{prefix}_{i}.csv")
}

/// Reads `prefix_0.csv`, `prefix_1.csv`, … until the first missing index.
pub fn load_lgss_series(dir: &Path, prefix: &str) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = Vec::new();
    loop {
        let path = dir.join(lgss_file(prefix, out.len()));
        if !path.exists() {
            break;
        }
        out.push(data::read_matrix(&path)?);
    }
    if out.is_empty() {
        bail!("no {prefix}_*.csv files in {}", dir.display());
    }
    Ok(out)
}

pub fn sv_truth(cfg: &Config) -> Result<SvParams<f64>> {
    let c = &cfg.stochvol;
    let d = c.dim;
    let mu = broadcast(&c.mu, d, "stochvol.mu")?;
    let a = broadcast(&c.a, d, "stochvol.a")?;
    let l = match &c.l {
        Some(v) if v.len() == d * d => {
            let mut m = Mat::zeros(d, d);
            for i in 0..d {
                for j in 0..=i {
                    m.set(i, j, v[i * d + j]);
                }
            }
            m
        }
        Some(v) => return Err(config_error(format!("stochvol.l has {} entries, expected {}", v.len(), d * d))),
        None => Mat::diag(&vec![c.noise_sd; d]),
    };
    Ok(SvParams { mu, a, l })
}

/// Flat θ in the stochastic-volatility problem layout.
pub fn sv_flat(params: &SvParams<f64>) -> Vec<f64> {
    let d = params.dim();
    let mut theta = params.mu.clone();
    theta.extend(&params.a);
    theta.extend((0..d).map(|i| params.l.at(i, i)));
    for i in 0..d {
        for j in 0..i {
            theta.push(params.l.at(i, j));
        }
    }
    theta
}

pub const SV_SERIES_FILE: &str = "series.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const TEST_EVENTS_FILE: &str = "test_events.csv";

pub fn hawkes_truth(cfg: &Config) -> Result<HawkesParams<f64>> {
    let c = &cfg.hawkes;
    let d = c.dims;
    let scales = c.log_increments.len();
    let n = d * scales * d;
    Ok(HawkesParams {
        dims: d,
        scales,
        mu: broadcast(&c.mu, d, "hawkes.mu")?,
        alpha: broadcast(&c.alpha, n, "hawkes.alpha")?,
        sigma2: vec![c.sigma2; n],
        beta: beta_from_log_increments(&c.log_increments),
        nu: c.nu,
    })
}

pub fn hawkes_layout(cfg: &Config) -> HawkesLayout {
    let c = &cfg.hawkes;
    HawkesLayout {
        dims: c.dims,
        scales: c.log_increments.len(),
        fixed_beta: c.fix_beta.then(|| beta_from_log_increments(&c.log_increments)),
        proposal: c.proposal,
    }
}

/// Flat θ in the layout of `layout`.
pub fn hawkes_flat(layout: &HawkesLayout, params: &HawkesParams<f64>) -> Vec<f64> {
    let mut theta = params.mu.clone();
    theta.extend(&params.alpha);
    theta.extend(&params.sigma2);
    if layout.fixed_beta.is_none() {
        let mut prev = 0.0;
        for &b in &params.beta {
            theta.push(b - prev);
            prev = b;
        }
    }
    theta.push(params.nu);
    theta
}

/// Proposal vector that reproduces the generative jump distribution.
pub fn hawkes_prior_phi(params: &HawkesParams<f64>) -> Vec<f64> {
    let mut phi = params.alpha.clone();
    phi.extend(params.sigma2.iter().map(|s| 0.5 * s.ln()));
    phi
}
