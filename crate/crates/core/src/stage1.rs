//! Non-adaptive coarse estimation with a Bayesian neural network.
//!
//! Every shot uses the fixed design `tau_min = pi / omega_max`, `phi = 0`, so
//! the fringe is monotone over the whole range. The network maps one outcome
//! bit to a posterior over a grid of candidate frequencies; shots are fused
//! by normalized product.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    sample_outcome, shot_cost, MeasurementRecord, Outcome, SensorModel, ShotDesign, TimeLedger,
};
use crate::nn::{cross_entropy_loss, l2_penalty, AdamState, LayerSpec, NetworkParams, Reader};
use crate::posterior::{argmax, Support};
use crate::rng::{self, stream};

/// Per-factor floor inside the log-space product of shot posteriors.
pub const FUSE_FLOOR: f64 = 1e-300;

pub fn tau_min(omega_max: f64) -> f64 {
    std::f64::consts::PI / omega_max
}

/// The fixed first-stage design.
pub fn fixed_design(omega_max: f64) -> ShotDesign {
    ShotDesign::new(tau_min(omega_max), 0.0)
}

/// Bin centres of `(0, omega_max)`.
pub fn omega_grid(omega_max: f64, classes: usize) -> Vec<f64> {
    Support {
        lo: 0.0,
        hi: omega_max,
    }
    .bin_centers(classes)
}

/// Outcomes simulated at every grid frequency, stored as packed bits.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Dataset {
    omega_max: f64,
    seed: u64,
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl Stage1Dataset {
    pub fn omega_max(&self) -> f64 {
        self.omega_max
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tau_min(&self) -> f64 {
        tau_min(self.omega_max)
    }

    /// Number of grid frequencies `b_omega`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Shots per frequency `|D_omega|`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn omega_grid(&self) -> Vec<f64> {
        omega_grid(self.omega_max, self.rows)
    }

    pub fn outcome(&self, row: usize, col: usize) -> Outcome {
        let idx = row * self.cols + col;
        if self.bits[idx / 8] >> (idx % 8) & 1 == 1 {
            Outcome::One
        } else {
            Outcome::Zero
        }
    }

    pub fn row(&self, row: usize) -> Vec<Outcome> {
        (0..self.cols).map(|c| self.outcome(row, c)).collect()
    }

    fn from_rows(omega_max: f64, seed: u64, rows: Vec<Vec<Outcome>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut bits = vec![0u8; (rows.len() * cols).div_ceil(8)];
        for (r, row) in rows.iter().enumerate() {
            for (c, o) in row.iter().enumerate() {
                let idx = r * cols + c;
                bits[idx / 8] |= o.bit() << (idx % 8);
            }
        }
        Self {
            omega_max,
            seed,
            rows: rows.len(),
            cols,
            bits,
        }
    }

    const MAGIC: &'static [u8; 4] = b"S1DS";

    /// `S1DS`, b_omega (u32), |D_omega| (u32), omega_max (f64), seed (u64),
    /// tau_min (f64), then row-major bits packed LSB-first. All little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36 + self.bits.len());
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&self.omega_max.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.tau_min().to_le_bytes());
        out.extend_from_slice(&self.bits);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            what: "stage-1 dataset",
            reason,
        };
        let mut r = Reader::new(bytes);
        if r.take(4)? != Self::MAGIC {
            return Err(bad("bad magic".into()));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let omega_max = r.f64()?;
        let seed = r.u64()?;
        let stored_tau = r.f64()?;
        if !(omega_max > 0.0) || stored_tau != tau_min(omega_max) {
            return Err(bad(format!(
                "header inconsistent: omega_max = {omega_max}, tau_min = {stored_tau}"
            )));
        }
        let bits = r.rest();
        if bits.len() != (rows * cols).div_ceil(8) {
            return Err(bad(format!(
                "expected {} payload bytes, found {}",
                (rows * cols).div_ceil(8),
                bits.len()
            )));
        }
        Ok(Self {
            omega_max,
            seed,
            rows,
            cols,
            bits: bits.to_vec(),
        })
    }
}

/// Simulates `shots_per_omega` fixed-design shots at each of `b_omega` bin centres.
pub fn generate_dataset(
    model: &SensorModel,
    omega_max: f64,
    b_omega: usize,
    shots_per_omega: usize,
    seed: u64,
) -> Result<Stage1Dataset> {
    if b_omega < 2 || shots_per_omega < 1 || !(omega_max > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need b_omega >= 2, shots >= 1, omega_max > 0 (got {b_omega}, {shots_per_omega}, {omega_max})"
        )));
    }
    let design = fixed_design(omega_max);
    let rows: Vec<Vec<Outcome>> = omega_grid(omega_max, b_omega)
        .into_par_iter()
        .enumerate()
        .map(|(row, omega)| {
            let mut rng = stream(seed, &[rng::stream::DATASET, row as u64]);
            (0..shots_per_omega)
                .map(|_| sample_outcome(model, omega, &design, &mut rng))
                .collect()
        })
        .collect();
    Ok(Stage1Dataset::from_rows(omega_max, seed, rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BnnHyper {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for BnnHyper {
    fn default() -> Self {
        Self {
            iterations: 8000,
            learning_rate: 1e-3,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// Trained single-shot posterior network and its class-to-frequency map.
#[derive(Debug, Clone, PartialEq)]
pub struct BnnEstimator {
    params: NetworkParams,
    omega_max: f64,
    omega_grid: Vec<f64>,
}

impl BnnEstimator {
    /// Output class `j` maps to the `j`-th bin centre of `(0, omega_max)`.
    pub fn new(params: NetworkParams, omega_max: f64) -> Result<Self> {
        if params.spec().input_width() != 1 {
            return Err(Error::ShapeMismatch {
                expected: 1,
                actual: params.spec().input_width(),
            });
        }
        if !(omega_max > 0.0) {
            return Err(Error::InvalidArgument(format!("omega_max must be > 0, got {omega_max}")));
        }
        let omega_grid = omega_grid(omega_max, params.spec().output_width());
        Ok(Self {
            params,
            omega_max,
            omega_grid,
        })
    }

    pub fn untrained(omega_max: f64, classes: usize) -> Self {
        Self::new(NetworkParams::zeros(LayerSpec::bnn(classes)), omega_max)
            .expect("valid untrained estimator")
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn omega_grid(&self) -> &[f64] {
        &self.omega_grid
    }

    pub fn omega_max(&self) -> f64 {
        self.omega_max
    }

    /// `p(omega_j | mu)` for a single outcome.
    pub fn single_shot_posterior(&self, outcome: Outcome) -> Vec<f64> {
        self.params
            .forward(&[outcome.as_f64()])
            .expect("BNN input width is 1")
    }

    pub fn fuse_posteriors(&self, outcomes: &[Outcome]) -> Result<Vec<f64>> {
        if outcomes.is_empty() {
            return Err(Error::InvalidArgument("need at least one outcome to fuse".into()));
        }
        let mut fused = FusedPosterior::new(self);
        for &o in outcomes {
            fused.push(o);
        }
        fused.posterior()
    }

    /// `NNP1` network record followed by `omega_max` as f64 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.params.to_bytes();
        out.extend_from_slice(&self.omega_max.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, rest) = NetworkParams::read_prefix(bytes)?;
        let mut r = Reader::new(rest);
        let omega_max = r.f64()?;
        if !r.rest().is_empty() {
            return Err(Error::Format {
                what: "BNN estimator",
                reason: "trailing bytes".into(),
            });
        }
        Self::new(params, omega_max)
    }
}

/// Running log-space product of single-shot posteriors.
#[derive(Debug, Clone)]
pub struct FusedPosterior {
    log_factor: [Vec<f64>; 2],
    log_sum: Vec<f64>,
    shots: usize,
}

impl FusedPosterior {
    pub fn new(estimator: &BnnEstimator) -> Self {
        let log_of = |o| {
            estimator
                .single_shot_posterior(o)
                .into_iter()
                .map(|p: f64| p.max(FUSE_FLOOR).ln())
                .collect::<Vec<_>>()
        };
        Self {
            log_factor: [log_of(Outcome::Zero), log_of(Outcome::One)],
            log_sum: vec![0.0; estimator.omega_grid.len()],
            shots: 0,
        }
    }

    pub fn push(&mut self, outcome: Outcome) {
        for (s, f) in self
            .log_sum
            .iter_mut()
            .zip(&self.log_factor[outcome.bit() as usize])
        {
            *s += f;
        }
        self.shots += 1;
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    /// Normalized product; uniform before any shot.
    pub fn posterior(&self) -> Result<Vec<f64>> {
        let peak = self.log_sum.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !peak.is_finite() {
            return Err(Error::DegeneratePosterior);
        }
        let unnorm: Vec<f64> = self.log_sum.iter().map(|l| (l - peak).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegeneratePosterior);
        }
        Ok(unnorm.into_iter().map(|u| u / total).collect())
    }

    /// Index of the MAP class of the normalized product (lowest index on ties).
    pub fn map_index(&self) -> Result<usize> {
        Ok(argmax(&self.posterior()?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub estimator: BnnEstimator,
    /// Objective (mean cross-entropy plus L2) at every iteration.
    pub loss_trace: Vec<f64>,
}

/// Fits the single-shot posterior network with Adam.
///
/// Each iteration takes one shot column across all grid rows, so the batch
/// holds exactly one sample per class. Columns are visited in a fresh seeded
/// permutation every epoch.
pub fn train_bnn(dataset: &Stage1Dataset, hyper: &BnnHyper) -> Result<TrainingReport> {
    train_bnn_from(dataset, hyper, None)
}

/// As [`train_bnn`], starting from `initial` parameters when supplied.
pub fn train_bnn_from(
    dataset: &Stage1Dataset,
    hyper: &BnnHyper,
    initial: Option<NetworkParams>,
) -> Result<TrainingReport> {
    let classes = dataset.rows();
    if classes == 0 || dataset.cols() == 0 {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let mut params = match initial {
        Some(p) => {
            if p.spec() != &LayerSpec::bnn(classes) {
                return Err(Error::ShapeMismatch {
                    expected: LayerSpec::bnn(classes).parameter_count(),
                    actual: p.len(),
                });
            }
            p
        }
        None => NetworkParams::init(
            LayerSpec::bnn(classes),
            &mut stream(hyper.seed, &[rng::stream::INIT]),
        ),
    };
    let mut adam = AdamState::new(params.len(), hyper.learning_rate);
    let mut columns: Vec<usize> = (0..dataset.cols()).collect();
    let mut loss_trace = Vec::with_capacity(hyper.iterations);
    let batch = classes as f64;

    for iteration in 0..hyper.iterations {
        let epoch = iteration / dataset.cols();
        let pos = iteration % dataset.cols();
        if pos == 0 {
            columns.sort_unstable();
            columns.shuffle(&mut stream(hyper.seed, &[rng::stream::SHUFFLE, epoch as u64]));
        }
        let col = columns[pos];

        // The input is a single bit, so the batch needs only two forward passes;
        // per-row logit gradients (p - onehot) are summed within each input value.
        let caches = [
            params.forward_cached(&[0.0])?,
            params.forward_cached(&[1.0])?,
        ];
        let mut d_logits = [vec![0.0; classes], vec![0.0; classes]];
        let mut loss = 0.0;
        for row in 0..classes {
            let bit = dataset.outcome(row, col).bit() as usize;
            let (l, d) = cross_entropy_loss(caches[bit].output(), row)?;
            loss += l;
            for (acc, g) in d_logits[bit].iter_mut().zip(&d) {
                *acc += g;
            }
        }
        loss /= batch;

        let (penalty, mut grad) = l2_penalty(&params, hyper.l2);
        loss += penalty;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration, loss });
        }
        for (bit, cache) in caches.iter().enumerate() {
            params.backward(cache, &d_logits[bit], 1.0 / batch, &mut grad)?;
        }
        adam.step(params.values_mut(), &grad)?;
        loss_trace.push(loss);
    }

    Ok(TrainingReport {
        estimator: BnnEstimator::new(params, dataset.omega_max())?,
        loss_trace,
    })
}

/// Mean cross-entropy of `estimator` over every sample in `dataset`.
pub fn dataset_loss(estimator: &BnnEstimator, dataset: &Stage1Dataset) -> Result<f64> {
    let post = [
        estimator.single_shot_posterior(Outcome::Zero),
        estimator.single_shot_posterior(Outcome::One),
    ];
    let mut total = 0.0;
    for row in 0..dataset.rows() {
        for col in 0..dataset.cols() {
            let bit = dataset.outcome(row, col).bit() as usize;
            total += cross_entropy_loss(&post[bit], row)?.0;
        }
    }
    Ok(total / (dataset.rows() * dataset.cols()) as f64)
}

/// Coarse estimate handed to the adaptive stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOneResult {
    pub omega_hat: f64,
    /// Width of the subrange searched by the adaptive stage.
    pub delta: f64,
    /// Fused posterior over the estimator's grid.
    pub fused: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Output {
    pub records: Vec<MeasurementRecord>,
    /// MAP of the partial fused posterior after each shot.
    pub running_estimates: Vec<f64>,
    pub result: StageOneResult,
    /// Set when the ledger ran out before `shots` were taken.
    pub exhausted: bool,
}

/// Runs up to `shots` fixed-design shots, charging `ledger` per shot, and
/// returns the MAP estimate with subrange width `delta`.
pub fn stage1_run<R: Rng + ?Sized>(
    model: &SensorModel,
    omega_true: f64,
    shots: usize,
    estimator: &BnnEstimator,
    delta: f64,
    ledger: &mut TimeLedger,
    rng: &mut R,
) -> Result<Stage1Output> {
    let design = fixed_design(estimator.omega_max());
    let cost = shot_cost(model, &design);
    let grid = estimator.omega_grid();
    let mut fused = FusedPosterior::new(estimator);
    let mut records = Vec::with_capacity(shots.min(4096));
    let mut running_estimates = Vec::with_capacity(shots.min(4096));
    let mut exhausted = false;
    for _ in 0..shots {
        let Ok(elapsed_at) = ledger.charge(cost) else {
            exhausted = true;
            break;
        };
        let outcome = sample_outcome(model, omega_true, &design, rng);
        fused.push(outcome);
        records.push(MeasurementRecord {
            design,
            outcome,
            elapsed_at,
        });
        running_estimates.push(grid[fused.map_index()?]);
    }
    let posterior = fused.posterior()?;
    Ok(Stage1Output {
        records,
        running_estimates,
        result: StageOneResult {
            omega_hat: grid[argmax(&posterior)],
            delta,
            fused: posterior,
        },
        exhausted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::outcome_probability;
    use crate::nn::Head;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    /// Network whose softmax output is exactly `probs` for every input:
    /// zero weights everywhere, output biases set to log-probabilities.
    fn constant_estimator(probs: &[f64], omega_max: f64) -> BnnEstimator {
        let spec = LayerSpec::new(vec![1, 2, probs.len()], Head::Softmax).unwrap();
        let mut p = NetworkParams::zeros(spec);
        let n = p.len();
        let k = probs.len();
        for (b, pr) in p.values_mut()[n - k..].iter_mut().zip(probs) {
            *b = pr.ln();
        }
        BnnEstimator::new(p, omega_max).unwrap()
    }

    #[test]
    fn grid_is_bin_centres() {
        let g = omega_grid(10.0, 100);
        assert_eq!(g.len(), 100);
        assert!((g[0] - 0.05).abs() < 1e-15 && (g[99] - 9.95).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn dataset_top_row_is_all_ones_without_decay() {
        // The top bin centre sits half a bin below the half-turn, where
        // p0 = sin^2(pi / 4b) ~ 6e-7 for b = 1000.
        let model = SensorModel::ideal(1e300, 240.0);
        let ds = generate_dataset(&model, 10.0, 1000, 500, 9).unwrap();
        assert!(ds.row(999).iter().all(|o| *o == Outcome::One));
        // At the exact half-turn the outcome is certain.
        let mut rng = stream(1, &[]);
        let d = fixed_design(10.0);
        assert!((0..500).all(|_| sample_outcome(&model, 10.0, &d, &mut rng) == Outcome::One));
    }

    #[test]
    fn dataset_rows_follow_likelihood() {
        let model = SensorModel::default();
        let ds = generate_dataset(&model, 10.0, 20, 2000, 3).unwrap();
        let d = fixed_design(10.0);
        for (row, omega) in ds.omega_grid().iter().enumerate() {
            let p1 = 1.0 - outcome_probability(&model, *omega, &d);
            let ones = ds.row(row).iter().filter(|o| **o == Outcome::One).count() as f64 / 2000.0;
            let sigma = (p1 * (1.0 - p1) / 2000.0).sqrt();
            assert!((ones - p1).abs() <= 3.0 * sigma + 1e-3, "row {row}: {ones} vs {p1}");
        }
    }

    #[test]
    fn dataset_is_deterministic_and_round_trips() {
        let model = SensorModel::default();
        let a = generate_dataset(&model, 5.0, 10, 37, 42).unwrap();
        let b = generate_dataset(&model, 5.0, 10, 37, 42).unwrap();
        assert_eq!(a, b);
        let back = Stage1Dataset::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.tau_min(), PI / 5.0);
        let mut corrupt = a.to_bytes();
        corrupt.pop();
        assert!(Stage1Dataset::from_bytes(&corrupt).is_err());
        assert!(generate_dataset(&model, 5.0, 1, 10, 0).is_err());
    }

    #[test]
    fn untrained_network_has_uniform_loss() {
        let model = SensorModel::default();
        let ds = generate_dataset(&model, 10.0, 50, 20, 1).unwrap();
        let est = BnnEstimator::untrained(10.0, 50);
        assert!((dataset_loss(&est, &ds).unwrap() - 50f64.ln()).abs() < 1e-12);
        let post = est.single_shot_posterior(Outcome::Zero);
        assert!(post.iter().all(|p| (p - 0.02).abs() < 1e-15));
    }

    #[test]
    fn fuse_examples() {
        let uniform = constant_estimator(&[0.25; 4], 4.0);
        let fused = uniform.fuse_posteriors(&[Outcome::Zero, Outcome::One, Outcome::One]).unwrap();
        assert!(fused.iter().all(|p| (p - 0.25).abs() < 1e-15));

        let skew = constant_estimator(&[0.8, 0.2], 2.0);
        let single = skew.single_shot_posterior(Outcome::One);
        let fused = skew.fuse_posteriors(&[Outcome::One]).unwrap();
        for (a, b) in single.iter().zip(&fused) {
            assert!((a - b).abs() < 1e-15);
        }

        // [0.5, 0.5] * [0.8, 0.2] normalized = [0.8, 0.2].
        let spec = LayerSpec::new(vec![1, 1, 2], Head::Softmax).unwrap();
        let mut p = NetworkParams::zeros(spec);
        // Output logits = bias + w * relu(x): x = 0 -> [0, 0], x = 1 -> [ln 4, 0].
        p.values_mut()[0] = 1.0; // hidden weight
        p.values_mut()[2] = 4f64.ln(); // output weight for class 0
        let est = BnnEstimator::new(p, 2.0).unwrap();
        let fused = est.fuse_posteriors(&[Outcome::Zero, Outcome::One]).unwrap();
        assert!((fused[0] - 0.8).abs() < 1e-15 && (fused[1] - 0.2).abs() < 1e-15);
        assert!(est.fuse_posteriors(&[]).is_err());
    }

    #[test]
    fn fuse_equals_sequential_bayes_with_likelihood_ratios() {
        // p(mu | w_j) is proportional to p(w_j | mu) under a flat prior, so successive
        // updates w <- w * p(w_j | mu) / sum must reproduce the normalized product.
        let model = SensorModel::default();
        let ds = generate_dataset(&model, 10.0, 20, 200, 4).unwrap();
        let est = train_bnn(&ds, &BnnHyper { iterations: 200, ..BnnHyper::default() })
            .unwrap()
            .estimator;
        let outs: Vec<Outcome> = ds.row(7).into_iter().take(80).collect();
        let fused = est.fuse_posteriors(&outs).unwrap();
        let mut w = vec![1.0 / 20.0; 20];
        for o in &outs {
            let q = est.single_shot_posterior(*o);
            for (wi, qi) in w.iter_mut().zip(&q) {
                *wi *= qi;
            }
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
        }
        for (a, b) in fused.iter().zip(&w) {
            assert!((a - b).abs() <= 1e-10 * b.max(1e-300) + 1e-300, "{a} vs {b}");
        }
    }

    #[test]
    fn training_reduces_loss_at_desk_scale() {
        let model = SensorModel::default();
        let ds = generate_dataset(&model, 10.0, 50, 500, 17).unwrap();
        let hyper = BnnHyper { iterations: 2000, seed: 17, ..BnnHyper::default() };
        let report = train_bnn(&ds, &hyper).unwrap();
        let head: f64 = report.loss_trace[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = report.loss_trace[1950..].iter().sum::<f64>() / 50.0;
        assert!(tail < 0.9 * head, "initial {head}, final {tail}");
        // Same seed, same trace.
        let again = train_bnn(&ds, &hyper).unwrap();
        assert_eq!(report.loss_trace, again.loss_trace);
        assert_eq!(report.estimator, again.estimator);
        assert!(train_bnn(&ds, &BnnHyper { learning_rate: f64::NAN, ..hyper }).is_err());
    }

    #[test]
    fn estimator_round_trips() {
        let est = constant_estimator(&[0.1, 0.2, 0.7], 3.0);
        assert_eq!(BnnEstimator::from_bytes(&est.to_bytes()).unwrap(), est);
    }

    #[test]
    fn point_mass_estimator_pins_estimate() {
        let mut probs = vec![1e-9; 10];
        probs[6] = 1.0;
        let est = constant_estimator(&probs, 10.0);
        let mut ledger = TimeLedger::new(22_000.0);
        let out = stage1_run(&SensorModel::default(), 2.0, 70, &est, 1.0, &mut ledger, &mut stream(1, &[])).unwrap();
        assert_eq!(out.result.omega_hat, est.omega_grid()[6]);
        assert!(out.running_estimates.iter().all(|&e| e == est.omega_grid()[6]));
    }

    #[test]
    fn stage1_charges_exact_cost() {
        let est = BnnEstimator::untrained(20.0, 100);
        let mut ledger = TimeLedger::new(22_000.0);
        let out = stage1_run(&SensorModel::default(), 7.0, 70, &est, 2.0, &mut ledger, &mut stream(2, &[])).unwrap();
        assert!(!out.exhausted);
        assert_eq!(out.records.len(), 70);
        let expected = 70.0 * (240.0 + PI / 20.0);
        assert!((ledger.consumed() - expected).abs() <= 1e-9 * expected);

        let mut small = TimeLedger::new(1000.0);
        let out = stage1_run(&SensorModel::default(), 7.0, 70, &est, 2.0, &mut small, &mut stream(2, &[])).unwrap();
        assert!(out.exhausted);
        assert_eq!(out.records.len(), 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn fuse_is_order_invariant(bits in proptest::collection::vec(0u8..2, 1..100), seed in 0u64..100) {
            let model = SensorModel::default();
            let ds = generate_dataset(&model, 10.0, 10, 50, seed).unwrap();
            let est = train_bnn(&ds, &BnnHyper { iterations: 50, seed, ..BnnHyper::default() }).unwrap().estimator;
            let outs: Vec<Outcome> = bits.iter().map(|b| Outcome::from_bit(*b).unwrap()).collect();
            let mut rev = outs.clone();
            rev.reverse();
            let a = est.fuse_posteriors(&outs).unwrap();
            let b = est.fuse_posteriors(&rev).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-10 * x.max(1e-300) + 1e-300);
            }
        }
    }
}
