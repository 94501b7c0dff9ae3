use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smcvi::models::hawkes::{ProposalKind, DEFAULT_LOG_INCREMENTS};
use smcvi::trainer::TrainConfig;

/// Marks failures that should exit with the configuration status code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Lgss,
    Stochvol,
    Hawkes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelKind,
    #[serde(default)]
    pub seed: u64,
    /// Dataset directory for `fit` and `evaluate`; `--data` takes precedence.
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub lgss: LgssConfig,
    #[serde(default)]
    pub stochvol: StochvolConfig,
    #[serde(default)]
    pub hawkes: HawkesConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub density: DensityConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LgssKind {
    /// `A = λI` with `d_x = 2`, `d_y = 1`; only λ is learned.
    Ar,
    /// Banded `A`, random `B`; `A`, `B` and `diag Σ_y` are learned.
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LgssConfig {
    pub kind: LgssKind,
    pub dx: usize,
    pub dy: usize,
    /// Band decay of the true `A` in the full model.
    pub alpha: f64,
    /// True λ in the AR model.
    pub lambda: f64,
    /// Initial state variance of the AR model.
    pub initial_var: f64,
    /// Variational mean of λ at initialisation.
    pub lambda_init: f64,
    /// Number of transitions `M`; each series has `M + 1` observations.
    pub horizon: usize,
    pub train_series: usize,
    pub test_series: usize,
}

impl Default for LgssConfig {
    fn default() -> Self {
        LgssConfig {
            kind: LgssKind::Full,
            dx: 10,
            dy: 3,
            alpha: 0.42,
            lambda: 0.9,
            initial_var: 1.0,
            lambda_init: 0.5,
            horizon: 10,
            train_series: 10,
            test_series: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StochvolConfig {
    pub dim: usize,
    /// Number of observations written by `simulate`.
    pub length: usize,
    /// True long-run mean; one value per component, or one for all.
    pub mu: Vec<f64>,
    pub a: Vec<f64>,
    /// Lower-triangular noise factor, row-major `D × D`; the upper part is ignored.
    pub l: Option<Vec<f64>>,
    /// Diagonal of the noise factor when `l` is absent.
    pub noise_sd: f64,
}

impl Default for StochvolConfig {
    fn default() -> Self {
        StochvolConfig {
            dim: 3,
            length: 100,
            mu: vec![0.0],
            a: vec![0.9],
            l: None,
            noise_sd: 0.3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HawkesConfig {
    pub dims: usize,
    /// Log increments of the decay rates; their count sets the number of scales.
    pub log_increments: Vec<f64>,
    /// Baseline rates, one per mark (or one for all).
    pub mu: Vec<f64>,
    /// Jump means in the `D` blocks of `B·D` layout, or one value for all.
    pub alpha: Vec<f64>,
    pub sigma2: f64,
    pub nu: f64,
    pub train_events: usize,
    pub test_events: usize,
    /// Time horizon of the simulation.
    pub t_end: f64,
    pub batch_len: usize,
    /// Hold the decay rates at their true values instead of inferring them.
    pub fix_beta: bool,
    pub proposal: ProposalKind,
    /// Iterations between refreshes of the batch carries.
    pub refresh_every: usize,
}

impl Default for HawkesConfig {
    fn default() -> Self {
        HawkesConfig {
            dims: 4,
            log_increments: DEFAULT_LOG_INCREMENTS[..2].to_vec(),
            mu: vec![0.5],
            alpha: vec![0.05],
            sigma2: 0.01,
            nu: 0.01,
            train_events: 2000,
            test_events: 500,
            t_end: 1e9,
            batch_len: 100,
            fix_beta: false,
            proposal: ProposalKind::Learned,
            refresh_every: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    /// Predictive horizon, 1 or 2.
    pub p: usize,
    /// Number of θ draws (filters).
    pub s: usize,
    /// Particles per filter.
    pub k: usize,
    /// Simulated next events per particle.
    pub j: usize,
    /// Number of final conditioning points scored.
    pub points: usize,
    /// Independent repetitions for the predictive standard deviation.
    pub repeats: usize,
    /// Score held-out events only up to this many.
    pub max_targets: Option<usize>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            p: 1,
            s: 4,
            k: 100,
            j: 10,
            points: 10,
            repeats: 5,
            max_targets: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AxisConfig {
    pub step: usize,
    pub component: usize,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityConfig {
    /// Number of leading observations of the first training series used.
    pub steps: usize,
    pub particles: usize,
    pub repetitions: usize,
    pub x: AxisConfig,
    pub y: AxisConfig,
    /// Path at which the non-plotted components are held; smoothed means when absent.
    pub fixed: Option<Vec<Vec<f64>>>,
}

impl Default for AxisConfig {
    fn default() -> Self {
        AxisConfig {
            step: 0,
            component: 0,
            lo: -2.0,
            hi: 2.0,
            points: 21,
        }
    }
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            steps: 2,
            particles: 100,
            repetitions: 50,
            x: AxisConfig::default(),
            y: AxisConfig {
                step: 1,
                ..AxisConfig::default()
            },
            fixed: None,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| config_error(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> anyhow::Result<()> {
        let bad = |m: &str| Err(config_error(m.to_string()));
        if self.lgss.horizon == 0 || self.lgss.train_series == 0 {
            return bad("lgss.horizon and lgss.train_series must be positive");
        }
        if self.stochvol.dim == 0 || self.stochvol.length < 2 {
            return bad("stochvol.dim must be positive and stochvol.length at least 2");
        }
        if self.hawkes.dims == 0 || self.hawkes.log_increments.is_empty() || self.hawkes.batch_len == 0 {
            return bad("hawkes.dims, hawkes.log_increments and hawkes.batch_len must be non-empty");
        }
        if self.hawkes.refresh_every == 0 {
            return bad("hawkes.refresh_every must be positive");
        }
        if !(1..=2).contains(&self.evaluate.p) {
            return bad("evaluate.p must be 1 or 2");
        }
        if self.evaluate.s == 0 || self.evaluate.k == 0 || self.evaluate.points == 0 || self.evaluate.repeats == 0 {
            return bad("evaluate.s, evaluate.k, evaluate.points and evaluate.repeats must be positive");
        }
        if self.density.steps == 0 || self.density.particles == 0 || self.density.repetitions == 0 {
            return bad("density.steps, density.particles and density.repetitions must be positive");
        }
        for axis in [&self.density.x, &self.density.y] {
            if axis.step >= self.density.steps || axis.points == 0 {
                return bad("density axis step out of range or no grid points");
            }
        }
        Ok(())
    }
}

/// Expands a one-element list to `n` copies; other lengths must equal `n`.
pub fn broadcast(values: &[f64], n: usize, key: &str) -> anyhow::Result<Vec<f64>> {
    match values.len() {
        1 => Ok(vec![values[0]; n]),
        len if len == n => Ok(values.to_vec()),
        len => Err(config_error(format!("{key} has {len} entries, expected 1 or {n}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = Config::parse("model = \"lgss\"\n[lgss]\nhorizn = 5\n").unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
        assert!(err.to_string().contains("horizn"), "{err}");
    }

    #[test]
    fn unknown_model_is_rejected() {
        let err = Config::parse("model = \"garch\"\n").unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
    }

    #[test]
    fn defaults_fill_sections() {
        let cfg = Config::parse("model = \"stochvol\"\nseed = 3\n[train]\niterations = 0\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.stochvol.dim, 3);
        assert_eq!(cfg.train.iterations, 0);
    }

    #[test]
    fn broadcast_lengths() {
        assert_eq!(broadcast(&[1.0], 3, "k").unwrap(), vec![1.0; 3]);
        assert!(broadcast(&[1.0, 2.0], 3, "k").is_err());
    }
}
