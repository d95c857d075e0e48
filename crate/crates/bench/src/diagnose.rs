//! Checks of the measurement model against its asymptotic theory.

use std::f64::consts::FRAC_PI_2;

use nvsense::model::{fisher_information, sample_outcome, MeasurementRecord, SensorModel, ShotDesign};
use nvsense::posterior::{ParticleFilter, Support};
use nvsense::rng::stream;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsymptoticsReport {
    pub omega: f64,
    pub design: ShotDesign,
    pub fisher: f64,
    pub shots: usize,
    /// `1 / (M F)`.
    pub predicted_variance: f64,
    /// Posterior variance per seed.
    pub variances: Vec<f64>,
}

impl AsymptoticsReport {
    pub fn mean_variance(&self) -> f64 {
        self.variances.iter().sum::<f64>() / self.variances.len() as f64
    }

    /// Mean posterior variance over the prediction.
    pub fn ratio(&self) -> f64 {
        self.mean_variance() / self.predicted_variance
    }
}

/// Design with `omega * tau + phi = pi / 2`, where the outcome probability is 1/2.
pub fn balanced_design(omega: f64, tau: f64) -> ShotDesign {
    ShotDesign::new(tau, (FRAC_PI_2 - omega * tau).rem_euclid(std::f64::consts::TAU))
}

/// Posterior variance after `shots` i.i.d. outcomes at a fixed balanced design,
/// on a fine grid of half a fringe period around `omega`, for each seed.
pub fn gaussian_asymptotics(
    model: &SensorModel,
    omega: f64,
    tau: f64,
    shots: usize,
    seeds: u64,
    particles: usize,
) -> Result<AsymptoticsReport> {
    let design = balanced_design(omega, tau);
    let fisher = fisher_information(model, omega, &design)?;
    // Half a period keeps the likelihood unimodal on the support.
    let half = std::f64::consts::PI / tau / 2.0;
    let support = Support::new(omega - half, omega + half)?;
    let variances = (0..seeds)
        .into_par_iter()
        .map(|seed| {
            let mut rng = stream(seed, &[]);
            let mut filter = ParticleFilter::init_uniform(support, particles)?;
            for k in 0..shots {
                let record = MeasurementRecord {
                    design,
                    outcome: sample_outcome(model, omega, &design, &mut rng),
                    elapsed_at: k as f64,
                };
                filter.bayes_update(model, &record)?;
            }
            Ok(filter.variance())
        })
        .collect::<nvsense::Result<Vec<_>>>()?;
    Ok(AsymptoticsReport {
        omega,
        design,
        fisher,
        shots,
        predicted_variance: 1.0 / (shots as f64 * fisher),
        variances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nvsense::model::outcome_probability;

    #[test]
    fn balanced_design_is_balanced() {
        let m = SensorModel::default();
        for (w, t) in [(5.0, 1.0), (0.3, 7.0), (9.9, 0.2)] {
            assert!((outcome_probability(&m, w, &balanced_design(w, t)) - 0.5).abs() < 1e-12);
        }
    }
}
