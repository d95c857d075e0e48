//! Weighted-particle posterior over the field frequency.
//!
//! Particles sit at the centres of equal-width bins of the support and never
//! move; a measurement only reweights them. [`GridPosterior`] recomputes the
//! same posterior from scratch in log space and serves as a reference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{likelihood, MeasurementRecord, SensorModel};

/// Frequency interval `(lo, hi)` in rad/µs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Support {
    pub lo: f64,
    pub hi: f64,
}

impl Support {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidSupport { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, omega: f64) -> bool {
        omega >= self.lo && omega <= self.hi
    }

    /// Distance from `omega` to the interval (0 inside).
    pub fn distance(&self, omega: f64) -> f64 {
        if omega < self.lo {
            self.lo - omega
        } else if omega > self.hi {
            omega - self.hi
        } else {
            0.0
        }
    }

    /// Centres of `count` equal bins.
    pub fn bin_centers(&self, count: usize) -> Vec<f64> {
        let width = self.width() / count as f64;
        (0..count)
            .map(|i| self.lo + (i as f64 + 0.5) * width)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleFilter {
    particles: Vec<f64>,
    weights: Vec<f64>,
    support: Support,
}

impl ParticleFilter {
    /// Uniform prior: `count` particles at bin centres, each with weight `1/count`.
    pub fn init_uniform(support: Support, count: usize) -> Result<Self> {
        if count < 2 {
            return Err(Error::InvalidArgument(format!(
                "particle count must be >= 2, got {count}"
            )));
        }
        Ok(Self {
            particles: support.bin_centers(count),
            weights: vec![1.0 / count as f64; count],
            support,
        })
    }

    /// Builds a filter from explicit positions and (unnormalized) weights.
    pub fn from_parts(particles: Vec<f64>, weights: Vec<f64>, support: Support) -> Result<Self> {
        if particles.len() != weights.len() {
            return Err(Error::ShapeMismatch {
                expected: particles.len(),
                actual: weights.len(),
            });
        }
        if particles.len() < 2 {
            return Err(Error::InvalidArgument("need at least 2 particles".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument("weights must be non-negative".into()));
        }
        let mut weights = weights;
        normalize(&mut weights)?;
        Ok(Self {
            particles,
            weights,
            support,
        })
    }

    pub fn particles(&self) -> &[f64] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn support(&self) -> Support {
        self.support
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Multiplies every weight by the likelihood of `record` and renormalizes.
    /// On a degenerate posterior the filter is left as it was.
    pub fn bayes_update(&mut self, model: &SensorModel, record: &MeasurementRecord) -> Result<()> {
        let updated: Vec<f64> = self
            .particles
            .iter()
            .zip(&self.weights)
            .map(|(&omega, &w)| w * likelihood(model, omega, &record.design, record.outcome))
            .collect();
        self.reweight(updated)
    }

    /// Multiplies weights by arbitrary per-particle likelihoods.
    pub fn apply_likelihoods(&mut self, likelihoods: &[f64]) -> Result<()> {
        if likelihoods.len() != self.len() {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                actual: likelihoods.len(),
            });
        }
        let updated = self
            .weights
            .iter()
            .zip(likelihoods)
            .map(|(w, l)| w * l)
            .collect();
        self.reweight(updated)
    }

    fn reweight(&mut self, mut updated: Vec<f64>) -> Result<()> {
        normalize(&mut updated)?;
        self.weights = updated;
        Ok(())
    }

    /// Posterior mean `sum_p a_p * omega_p`.
    pub fn mean(&self) -> f64 {
        self.particles
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| x * w)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.particles
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * (x - mean) * (x - mean))
            .sum()
    }

    /// Position of the heaviest particle; ties go to the lowest index.
    pub fn map_estimate(&self) -> f64 {
        self.particles[argmax(&self.weights)]
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn normalize(weights: &mut [f64]) -> Result<()> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() || total < f64::MIN_POSITIVE {
        return Err(Error::DegeneratePosterior);
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
    Ok(())
}

/// Exact Bayes on a fixed grid, accumulated as log-likelihood sums.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPosterior {
    grid: Vec<f64>,
    log_density: Vec<f64>,
}

impl GridPosterior {
    /// Flat prior on the given points.
    pub fn new(grid: Vec<f64>) -> Self {
        let n = grid.len();
        Self {
            grid,
            log_density: vec![0.0; n],
        }
    }

    pub fn uniform(support: Support, count: usize) -> Self {
        Self::new(support.bin_centers(count))
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn observe(&mut self, model: &SensorModel, record: &MeasurementRecord) {
        for (ld, &omega) in self.log_density.iter_mut().zip(&self.grid) {
            *ld += likelihood(model, omega, &record.design, record.outcome).ln();
        }
    }

    /// Normalized density via log-sum-exp.
    pub fn density(&self) -> Vec<f64> {
        let peak = self
            .log_density
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = self.log_density.iter().map(|l| (l - peak).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        unnorm.into_iter().map(|u| u / total).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_outcome, Outcome, ShotDesign};
    use proptest::prelude::*;
    use rand::Rng;

    fn record(tau: f64, phi: f64, outcome: Outcome) -> MeasurementRecord {
        MeasurementRecord {
            design: ShotDesign::new(tau, phi),
            outcome,
            elapsed_at: 0.0,
        }
    }

    #[test]
    fn uniform_init_places_bin_centres() {
        let f = ParticleFilter::init_uniform(Support::new(0.0, 10.0).unwrap(), 240).unwrap();
        assert_eq!(f.len(), 240);
        assert!(f.weights().iter().all(|&w| w == 1.0 / 240.0));
        let f = ParticleFilter::init_uniform(Support::new(0.0, 2.0).unwrap(), 2).unwrap();
        assert_eq!(f.particles(), &[0.5, 1.5]);
        assert_eq!(f.weights(), &[0.5, 0.5]);
        assert!(matches!(Support::new(3.0, 3.0), Err(Error::InvalidSupport { .. })));
    }

    #[test]
    fn constant_likelihood_leaves_weights() {
        let mut f = ParticleFilter::init_uniform(Support::new(0.0, 10.0).unwrap(), 50).unwrap();
        let before = f.weights().to_vec();
        // tau = 0: every particle sees p0 = 1.
        f.bayes_update(&SensorModel::default(), &record(0.0, 0.0, Outcome::Zero))
            .unwrap();
        for (a, b) in before.iter().zip(f.weights()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_reweighting() {
        let mut f = ParticleFilter::init_uniform(Support::new(0.0, 3.0).unwrap(), 3).unwrap();
        f.apply_likelihoods(&[0.9, 0.5, 0.1]).unwrap();
        let expected = [0.6, 1.0 / 3.0, 1.0 / 15.0];
        for (w, e) in f.weights().iter().zip(expected) {
            assert!((w - e).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_update_is_reported_and_leaves_filter() {
        let mut f = ParticleFilter::init_uniform(Support::new(0.0, 1.0).unwrap(), 4).unwrap();
        let before = f.clone();
        assert_eq!(f.apply_likelihoods(&[0.0; 4]), Err(Error::DegeneratePosterior));
        assert_eq!(f, before);
    }

    #[test]
    fn statistics_of_simple_filters() {
        let s = Support::new(0.0, 10.0).unwrap();
        let f = ParticleFilter::init_uniform(s, 240).unwrap();
        assert!((f.mean() - 5.0).abs() < 1e-12);
        // Discrete uniform on n points spaced h apart: variance h^2 (n^2 - 1) / 12.
        let h: f64 = 10.0 / 240.0;
        let expected = h * h * (240.0f64 * 240.0 - 1.0) / 12.0;
        assert!((f.variance() - expected).abs() < 1e-10);
        assert_eq!(f.effective_sample_size().round(), 240.0);
        assert_eq!(f.map_estimate(), f.particles()[0]);

        let mut w = vec![0.0; 240];
        w[0] = 1.0;
        let point = ParticleFilter::from_parts(f.particles().to_vec(), w, s).unwrap();
        assert_eq!(point.mean(), point.particles()[0]);
        assert_eq!(point.variance(), 0.0);
        assert_eq!(point.effective_sample_size(), 1.0);

        let two = ParticleFilter::from_parts(vec![0.0, 2.0], vec![1.0, 1.0], Support::new(0.0, 2.0).unwrap()).unwrap();
        assert_eq!(two.variance(), 1.0);

        let ess = ParticleFilter::from_parts(vec![0.0, 1.0, 2.0, 3.0], vec![0.5, 0.5, 0.0, 0.0], Support::new(0.0, 3.0).unwrap()).unwrap();
        assert_eq!(ess.effective_sample_size(), 2.0);

        let map = ParticleFilter::from_parts(vec![1.0, 2.0, 3.0], vec![0.1, 0.8, 0.1], Support::new(0.0, 4.0).unwrap()).unwrap();
        assert_eq!(map.map_estimate(), 2.0);
    }

    #[test]
    fn mean_matches_compensated_dot_product() {
        let mut rng = crate::rng::stream(11, &[]);
        let s = Support::new(1.0, 3.0).unwrap();
        let w: Vec<f64> = (0..240).map(|_| rng.random::<f64>()).collect();
        let f = ParticleFilter::from_parts(s.bin_centers(240), w, s).unwrap();
        // Neumaier-compensated summation as the reference.
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for (x, a) in f.particles().iter().zip(f.weights()) {
            let term = x * a;
            let t = sum + term;
            comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
            sum = t;
        }
        assert!((f.mean() - (sum + comp)).abs() < 1e-13);
    }

    #[test]
    fn map_matches_linear_scan_after_updates() {
        let model = SensorModel::default();
        let mut rng = crate::rng::stream(12, &[]);
        let mut f = ParticleFilter::init_uniform(Support::new(0.0, 10.0).unwrap(), 240).unwrap();
        for _ in 0..30 {
            let d = ShotDesign::new(rng.random_range(0.1..5.0), rng.random_range(0.0..6.28));
            let o = sample_outcome(&model, 4.2, &d, &mut rng);
            f.bayes_update(&model, &MeasurementRecord { design: d, outcome: o, elapsed_at: 0.0 }).unwrap();
        }
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, &w) in f.weights().iter().enumerate() {
            if w > best.1 {
                best = (i, w);
            }
        }
        assert_eq!(f.map_estimate(), f.particles()[best.0]);
    }

    fn random_records(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<MeasurementRecord> {
        let model = SensorModel::default();
        let mut rng = crate::rng::stream(seed, &[]);
        let truth = rng.random_range(lo..hi);
        (0..n)
            .map(|_| {
                let d = ShotDesign::new(rng.random_range(0.01..40.0), rng.random_range(0.0..6.28));
                MeasurementRecord { design: d, outcome: sample_outcome(&model, truth, &d, &mut rng), elapsed_at: 0.0 }
            })
            .collect()
    }

    #[test]
    fn fifty_updates_match_grid_bayes() {
        let model = SensorModel::default();
        let s = Support::new(2.0, 3.0).unwrap();
        let mut f = ParticleFilter::init_uniform(s, 240).unwrap();
        let mut g = GridPosterior::uniform(s, 240);
        for r in random_records(3, 50, 2.0, 3.0) {
            f.bayes_update(&model, &r).unwrap();
            g.observe(&model, &r);
        }
        for (a, b) in f.weights().iter().zip(g.density()) {
            assert!((a - b).abs() <= 1e-10 * b.max(1e-300) || (a - b).abs() < 1e-300);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn weights_stay_normalized(seed in 0u64..10_000, n in 1usize..100) {
            let model = SensorModel::default();
            let mut f = ParticleFilter::init_uniform(Support::new(0.0, 10.0).unwrap(), 240).unwrap();
            for r in random_records(seed, n, 0.0, 10.0) {
                f.bayes_update(&model, &r).unwrap();
                let total: f64 = f.weights().iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(f.weights().iter().all(|&w| w >= 0.0));
            }
        }

        #[test]
        fn update_order_does_not_matter(seed in 0u64..10_000) {
            let model = SensorModel::default();
            let recs = random_records(seed, 2, 4.0, 5.0);
            let s = Support::new(4.0, 5.0).unwrap();
            let mut a = ParticleFilter::init_uniform(s, 240).unwrap();
            let mut b = a.clone();
            a.bayes_update(&model, &recs[0]).unwrap();
            a.bayes_update(&model, &recs[1]).unwrap();
            b.bayes_update(&model, &recs[1]).unwrap();
            b.bayes_update(&model, &recs[0]).unwrap();
            for (x, y) in a.weights().iter().zip(b.weights()) {
                prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1e-300));
            }
        }
    }
}
