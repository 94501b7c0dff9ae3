//! Model plugins.

use crate::rng::stream;
use crate::variational::MeanFieldFamily;

pub mod hawkes;
pub mod lgss;
pub mod stochvol;

/// Where the static parameters of the `S` predictive filters come from.
#[derive(Debug, Clone)]
pub enum ThetaSource {
    /// `θ_s ~ q_ψ`, drawn independently per filter.
    Variational(MeanFieldFamily),
    /// The same θ for every filter.
    Point(Vec<f64>),
}

impl ThetaSource {
    /// θ for filter `s`; draws come from `stream(seed, [s, 0])`.
    pub fn draw(&self, seed: u64, s: usize) -> Vec<f64> {
        match self {
            ThetaSource::Variational(fam) => fam.sample(&mut stream(seed, &[s as u64, 0])).0,
            ThetaSource::Point(t) => t.clone(),
        }
    }
}
